//! Reverse-process anticipation: from an observed prefix to future action
//! sequences and frame-wise labels.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::codec::{
    normalize_durations, truncate_at_eos, ActionSequence, ActionVocabulary, CodecMode,
};
use crate::config::{InferMode, Renoise};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::net::{DecoderMemory, ObservedFeatures};
use crate::rng;
use crate::schedule::{InferenceTrajectory, LatentSeq};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AnticipateOptions {
    pub mode: InferMode,
    pub num_steps: usize,
    /// Sample count in stochastic mode; ignored in deterministic mode.
    pub samples: usize,
    pub horizon_frames: usize,
    pub keep_intermediate: bool,
    pub seed: u64,
    pub renoise: Renoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnticipationResult {
    /// Truncated at EOS with normalized durations.
    pub actions: ActionSequence,
    pub frame_labels: Vec<usize>,
    /// 0 in deterministic mode, `1..=m` for stochastic samples.
    pub sample_id: usize,
    /// True when the decoder put EOS first and the fallback label was used.
    pub fallback: bool,
    /// Per-class probabilities in multi-label mode.
    pub label_scores: Option<Vec<f64>>,
    /// `(step, decoded ẑ0)` for every visited step, when requested.
    pub intermediate: Option<Vec<(usize, ActionSequence)>>,
}

/// Splits `horizon` frames among segments by the largest-remainder method;
/// ties go to the earlier segment.
pub fn allocate_frames(durations: &[f64], horizon: usize) -> Vec<usize> {
    if durations.is_empty() {
        return Vec::new();
    }
    let total: f64 = durations.iter().sum();
    let quotas: Vec<f64> = durations
        .iter()
        .map(|d| d / total * horizon as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(horizon.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Expands an action sequence into exactly `horizon` frame labels.
pub fn to_framewise(actions: &ActionSequence, horizon: usize) -> Result<Vec<usize>> {
    if actions.is_empty() {
        return Err(Error::EmptyFuture);
    }
    let counts = allocate_frames(&actions.durations, horizon);
    let mut out = Vec::with_capacity(horizon);
    for (&c, &n) in actions.classes.iter().zip(&counts) {
        out.extend(std::iter::repeat_n(c, n));
    }
    Ok(out)
}

/// Decodes a clean latent into a truncated, normalized action sequence.
pub fn decode_latent(model: &Model, z0: &Matrix) -> Result<(ActionSequence, Option<Vec<f64>>)> {
    let pred = model.codec.predict_actions(&model.store, z0)?;
    if model.codec.mode == CodecMode::ClassOnly {
        let scores = pred.label_scores();
        let classes: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p > 0.5 && c != model.eos())
            .map(|(c, _)| c)
            .collect();
        let n = classes.len();
        let seq = ActionSequence {
            classes,
            durations: vec![1.0 / n.max(1) as f64; n],
        };
        return Ok((seq, Some(scores)));
    }
    let classes = pred.argmax_classes();
    let durations = pred.durations.expect("sequence codec has a duration head");
    let mut seq = truncate_at_eos(&classes, &durations, model.eos());
    if !seq.is_empty() {
        seq.durations = normalize_durations(&seq.durations)?;
    }
    Ok((seq, None))
}

/// Runs the reverse process for one observation.
pub fn anticipate(
    model: &Model,
    obs: &ObservedFeatures,
    opts: &AnticipateOptions,
) -> Result<Vec<AnticipationResult>> {
    let traj = InferenceTrajectory::new(model.schedule.steps(), opts.num_steps)?;
    if opts.samples == 0 {
        return Err(Error::InvalidRange("sample count must be >= 1".into()));
    }
    let enc = model.net.encode(&model.store, obs)?;
    let memory = model.net.memory(&model.store, &enc)?;
    let fallback_class = enc.frame_logits.argmax_row(enc.frame_logits.rows() - 1);
    let ids: Vec<usize> = match opts.mode {
        InferMode::Deterministic => vec![0],
        InferMode::Stochastic => (1..=opts.samples).collect(),
    };
    ids.par_iter()
        .map(|&id| run_sample(model, &memory, &traj, opts, id, fallback_class))
        .collect()
}

fn run_sample(
    model: &Model,
    memory: &DecoderMemory,
    traj: &InferenceTrajectory,
    opts: &AnticipateOptions,
    sample_id: usize,
    fallback_class: usize,
) -> Result<AnticipationResult> {
    let deterministic = opts.mode == InferMode::Deterministic;
    let (m, d) = (model.slots(), model.net.config.latent_dim);
    let mut r = rng::stream(opts.seed, sample_id as u64);
    let init = if deterministic {
        Matrix::zeros(m, d)
    } else {
        rng::gaussian(&mut r, m, d)
    };
    let shared =
        (!deterministic && opts.renoise == Renoise::Shared).then(|| rng::gaussian(&mut r, m, d));
    let mut z = LatentSeq::new(init, traj.first());
    let mut intermediate = opts.keep_intermediate.then(Vec::new);
    let steps = traj.steps();
    let mut z0_hat = Matrix::zeros(m, d);
    for (i, &s) in steps.iter().enumerate() {
        z0_hat = model.net.denoise(&model.store, &z.z, s, memory, false)?;
        if !z0_hat.is_finite() {
            return Err(Error::NonFinite {
                what: "denoised latent".into(),
                diagnostics: format!("sample {sample_id} step {s}"),
            });
        }
        if let Some(list) = intermediate.as_mut() {
            list.push((s, decode_latent(model, &z0_hat)?.0));
        }
        if let Some(&next) = steps.get(i + 1) {
            let noise = match &shared {
                Some(n) => Some(n.clone()),
                None => (!deterministic).then(|| rng::gaussian(&mut r, m, d)),
            };
            z = model.schedule.renoise_from_z0hat(
                &z0_hat,
                &z,
                next,
                noise.as_ref(),
                deterministic,
            )?;
        }
    }
    let (actions, label_scores) = decode_latent(model, &z0_hat)?;
    let multilabel = label_scores.is_some();
    let fallback = !multilabel && actions.is_empty();
    let frame_labels = if multilabel {
        Vec::new()
    } else if fallback {
        vec![fallback_class; opts.horizon_frames]
    } else {
        to_framewise(&actions, opts.horizon_frames)?
    };
    Ok(AnticipationResult {
        actions,
        frame_labels,
        sample_id,
        fallback,
        label_scores,
        intermediate,
    })
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub video_id: String,
    pub sample_id: usize,
    pub alpha: f64,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Frames(Vec<usize>),
    Segments(ActionSequence),
    Scores(Vec<f64>),
}

impl DumpRecord {
    pub fn to_line(&self, vocab: &ActionVocabulary) -> String {
        let mut s = format!("{}\t{}\t{}\t", self.video_id, self.sample_id, self.alpha);
        match &self.payload {
            Payload::Frames(f) => {
                let names: Vec<&str> = f.iter().map(|&c| vocab.name(c)).collect();
                s.push_str(&names.join(" "));
            }
            Payload::Segments(seq) => {
                let parts: Vec<String> = seq
                    .classes
                    .iter()
                    .zip(&seq.durations)
                    .map(|(&c, d)| format!("{}:{d:.6}", vocab.name(c)))
                    .collect();
                s.push_str(&parts.join(" "));
            }
            Payload::Scores(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                s.push_str(&parts.join(" "));
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpKind {
    Frames,
    Segments,
    Scores,
}

pub fn format_dump(records: &[DumpRecord], vocab: &ActionVocabulary, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for r in records {
        out.push_str(&r.to_line(vocab));
        out.push('\n');
    }
    out
}

pub fn parse_dump(text: &str, vocab: &ActionVocabulary, kind: DumpKind) -> Result<Vec<DumpRecord>> {
    let bad = |i: usize, m: &str| Error::data("predictions", format!("line {}: {m}", i + 1));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '\t').collect();
        if cols.len() != 4 {
            return Err(bad(i, "expected 4 tab-separated fields"));
        }
        let sample_id = cols[1].parse().map_err(|_| bad(i, "bad sample id"))?;
        let alpha = cols[2].parse().map_err(|_| bad(i, "bad alpha"))?;
        let name = |n: &str| {
            vocab
                .id_of(n)
                .ok_or_else(|| bad(i, &format!("unknown label `{n}`")))
        };
        let payload = match kind {
            DumpKind::Frames => Payload::Frames(
                cols[3]
                    .split_whitespace()
                    .map(name)
                    .collect::<Result<_>>()?,
            ),
            DumpKind::Segments => {
                let mut classes = Vec::new();
                let mut durations = Vec::new();
                for tok in cols[3].split_whitespace() {
                    let (n, d) = tok
                        .rsplit_once(':')
                        .ok_or_else(|| bad(i, "expected class:duration"))?;
                    classes.push(name(n)?);
                    durations.push(d.parse().map_err(|_| bad(i, "bad duration"))?);
                }
                Payload::Segments(ActionSequence { classes, durations })
            }
            DumpKind::Scores => Payload::Scores(
                cols[3]
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(i, "bad score")))
                    .collect::<Result<_>>()?,
            ),
        };
        out.push(DumpRecord {
            video_id: cols[0].to_string(),
            sample_id,
            alpha,
            payload,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_dataset, split_observation, GrammarSpec};
    use proptest::prelude::*;

    fn seq(classes: &[usize], durations: &[f64]) -> ActionSequence {
        ActionSequence::new(classes.to_vec(), durations.to_vec()).unwrap()
    }

    #[test]
    fn framewise_examples() {
        assert_eq!(to_framewise(&seq(&[3], &[1.0]), 10).unwrap(), vec![3; 10]);
        assert_eq!(
            to_framewise(&seq(&[0, 1], &[0.5, 0.5]), 4).unwrap(),
            vec![0, 0, 1, 1]
        );
        let third = 1.0 / 3.0;
        let counts = allocate_frames(&[third, third, third], 10);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        let mut sorted = counts.clone();
        sorted.sort();
        assert_eq!(sorted, vec![3, 3, 4]);
        assert!(to_framewise(&ActionSequence::empty(), 5).is_err());
    }

    proptest! {
        #[test]
        fn allocation_conserves_horizon(
            raw in prop::collection::vec(1e-3f64..1.0, 1..12),
            horizon in 1usize..500,
        ) {
            let total: f64 = raw.iter().sum();
            let d: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let counts = allocate_frames(&d, horizon);
            prop_assert_eq!(counts.iter().sum::<usize>(), horizon);
            for (c, di) in counts.iter().zip(&d) {
                prop_assert!((*c as f64 - di * horizon as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    fn setup() -> (Model, ObservedFeatures) {
        let mut g = GrammarSpec::default_profile(0.5);
        g.feature_dim = 6;
        let v = generate_dataset(&g, 1, 2).unwrap().remove(0).subsample(10);
        let mut c = RunConfig::default();
        c.model.hidden_dim = 8;
        c.model.latent_dim = 8;
        c.model.heads = 2;
        c.model.encoder_layers = 1;
        c.model.decoder_layers = 1;
        c.schedule.steps = 50;
        c.infer.steps = 10;
        let model = Model::new(&c, 6, g.vocabulary).unwrap();
        let obs = split_observation(&v, 0.3, None).unwrap().observed;
        (model, obs)
    }

    fn opts(mode: InferMode, seed: u64) -> AnticipateOptions {
        AnticipateOptions {
            mode,
            num_steps: 10,
            samples: 4,
            horizon_frames: 17,
            keep_intermediate: true,
            seed,
            renoise: Renoise::Fresh,
        }
    }

    #[test]
    fn deterministic_mode_is_pure_and_seed_free() {
        let (model, obs) = setup();
        let a = anticipate(&model, &obs, &opts(InferMode::Deterministic, 1)).unwrap();
        let b = anticipate(&model, &obs, &opts(InferMode::Deterministic, 99)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert_eq!(a[0].sample_id, 0);
        assert_eq!(a[0].frame_labels.len(), 17);
        assert_eq!(a[0].intermediate.as_ref().unwrap().len(), 10);
        assert_eq!(a[0].intermediate.as_ref().unwrap()[9].0, 1);
    }

    #[test]
    fn stochastic_mode_reproducible_per_seed() {
        let (model, obs) = setup();
        let a = anticipate(&model, &obs, &opts(InferMode::Stochastic, 5)).unwrap();
        let b = anticipate(&model, &obs, &opts(InferMode::Stochastic, 5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|r| r.sample_id).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        for r in &a {
            assert_eq!(r.frame_labels.len(), 17);
            if !r.actions.is_empty() {
                assert!((r.actions.durations.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let vocab = GrammarSpec::default_profile(0.0).vocabulary;
        let recs = vec![
            DumpRecord {
                video_id: "v1".into(),
                sample_id: 0,
                alpha: 0.3,
                payload: Payload::Frames(vec![0, 0, 4]),
            },
            DumpRecord {
                video_id: "v2".into(),
                sample_id: 3,
                alpha: 0.2,
                payload: Payload::Frames(vec![]),
            },
        ];
        let text = format_dump(&recs, &vocab, &["seed=1".into()]);
        assert!(text.starts_with("# seed=1\nv1\t0\t0.3\ttake_cup take_cup stir\n"));
        assert_eq!(parse_dump(&text, &vocab, DumpKind::Frames).unwrap(), recs);

        let segs = vec![DumpRecord {
            video_id: "v".into(),
            sample_id: 1,
            alpha: 0.5,
            payload: Payload::Segments(seq(&[1, 2], &[0.25, 0.75])),
        }];
        let text = format_dump(&segs, &vocab, &[]);
        assert!(text.contains("pour_coffee:0.250000 pour_milk:0.750000"));
        assert_eq!(parse_dump(&text, &vocab, DumpKind::Segments).unwrap(), segs);
    }
}
