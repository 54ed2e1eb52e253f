use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffant::codec::ActionVocabulary;
use diffant::config::{InferMode, Renoise, RunConfig};
use diffant::data::{load_manifest, split_observation, write_atomic, write_dataset, VideoRecord};
use diffant::eval::{
    diverse_eval, freq_split_by_median, map_multilabel, moc, seg_metrics, to_csv,
    DiversityProtocol, EvalWindow, MetricReport, WindowTruth,
};
use diffant::infer::{
    format_dump, parse_dump, to_framewise, AnticipateOptions, DumpKind, DumpRecord, Payload,
};
use diffant::model::Model;
use diffant::pipeline::{predict_dataset, synthetic_dataset};
use diffant::train::train as run_training;
use diffant::{Error, Result};

use crate::Protocol;

/// `path` with `.ext` appended to its file name.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn config_header(cfg: &RunConfig) -> Vec<String> {
    let mut h = vec![format!("diffant {}", env!("CARGO_PKG_VERSION"))];
    h.extend(cfg.to_text().lines().map(|l| format!("config {l}")));
    h
}

pub fn load_vocab(data: &Path) -> Result<ActionVocabulary> {
    ActionVocabulary::load(&data.join("mapping.txt"))
}

/// Videos of one split from a dataset directory written by `synth` or laid
/// out the same way.
pub fn load_split(
    data: &Path,
    vocab: &ActionVocabulary,
    split: &str,
    stride: usize,
) -> Result<Vec<VideoRecord>> {
    let manifest = data.join("manifest.tsv");
    let videos: Vec<VideoRecord> = load_manifest(&manifest, vocab, stride)?
        .into_iter()
        .filter(|v| v.split == split)
        .collect();
    if videos.is_empty() {
        return Err(Error::data(
            &manifest,
            format!("no videos in split `{split}`"),
        ));
    }
    Ok(videos)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (spec, train, test) = synthetic_dataset(cfg)?;
    let mut all = train;
    all.extend(test);
    write_dataset(out, &spec.vocabulary, &all)?;
    let header: String = config_header(cfg)
        .iter()
        .map(|h| format!("# {h}\n"))
        .collect();
    write_atomic(
        &out.join("config.txt"),
        format!("{header}{}", cfg.to_text()).as_bytes(),
    )?;
    println!("wrote {} videos to {}", all.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, split: &str, out: &Path, log: &Path) -> Result<()> {
    let vocab = load_vocab(data)?;
    let videos = load_split(data, &vocab, split, cfg.data.stride)?;
    let input_dim = videos[0].features.cols();
    let mut model = Model::new(cfg, input_dim, vocab)?;
    let mut text = String::new();
    for h in config_header(cfg) {
        let _ = writeln!(text, "# {h}");
    }
    let _ = writeln!(
        text,
        "# epoch\tupdate\tl_emb\tl_pred_class\tl_pred_dur\tl_seg\tl_smooth\ttotal"
    );
    let start = Instant::now();
    let result = run_training(&mut model, &videos, |epoch, update, l| {
        let _ = writeln!(text, "{}", l.log_line(epoch, update));
    });
    // The log is written even when training stops on a non-finite loss.
    write_atomic(log, text.as_bytes())?;
    let means = result?;
    for (e, m) in means.iter().enumerate() {
        if e + 1 == means.len() || (e + 1) % 10 == 0 {
            println!("epoch {:>4}  total {:.5}", e + 1, m.total);
        }
    }
    model.save(out)?;
    println!(
        "trained {} videos in {:.1}s, checkpoint {}",
        videos.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub struct AnticipateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub mode: Option<InferMode>,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub alpha: Option<f64>,
    pub keep_intermediate: bool,
    pub renoise: Option<Renoise>,
    pub seed: Option<u64>,
}

/// Writes the frame dump to `out` (label scores in multi-label mode), plus
/// `out.segments`, `out.observed` and, on request, `out.intermediate`.
pub fn anticipate(a: &AnticipateArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let cfg = &model.config;
    let vocab = load_vocab(&a.data)?;
    if vocab != model.vocab {
        return Err(Error::data(
            &a.data,
            "label mapping differs from the checkpoint's",
        ));
    }
    let videos = load_split(&a.data, &vocab, &a.split, cfg.data.stride)?;
    let alpha = a.alpha.unwrap_or(cfg.eval.alpha);
    let window = EvalWindow::new(alpha, 1.0 - alpha)?;
    let template = AnticipateOptions {
        mode: a.mode.unwrap_or(cfg.infer.mode),
        num_steps: a.steps.unwrap_or(cfg.infer.steps),
        samples: a.samples.unwrap_or(cfg.infer.samples),
        horizon_frames: 0,
        keep_intermediate: a.keep_intermediate,
        seed: a.seed.unwrap_or(cfg.seed),
        renoise: a.renoise.unwrap_or(cfg.infer.renoise),
    };
    let start = Instant::now();
    let preds = predict_dataset(&model, &videos, &window, &template)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut header = config_header(cfg);
    header.push(format!(
        "anticipate mode={} steps={} samples={} alpha={alpha} seed={}",
        template.mode, template.num_steps, template.samples, template.seed
    ));
    let multilabel = cfg.model.multilabel;
    let mut frames = Vec::new();
    let mut segments = Vec::new();
    let mut observed = Vec::new();
    let mut steps: BTreeMap<usize, Vec<DumpRecord>> = BTreeMap::new();
    for (p, v) in preds.iter().zip(&videos) {
        let split = split_observation(v, alpha, None)?;
        let enc = model.net.encode(&model.store, &split.observed)?;
        let seg: Vec<usize> = (0..enc.frame_logits.rows())
            .map(|t| enc.frame_logits.argmax_row(t))
            .collect();
        let fallback_class = *seg.last().expect("observation has frames");
        let record = |sample_id, payload| DumpRecord {
            video_id: p.video_id.clone(),
            sample_id,
            alpha,
            payload,
        };
        observed.push(record(0, Payload::Frames(seg)));
        for r in &p.results {
            segments.push(record(r.sample_id, Payload::Segments(r.actions.clone())));
            match &r.label_scores {
                Some(s) => frames.push(record(r.sample_id, Payload::Scores(s.clone()))),
                None => frames.push(record(r.sample_id, Payload::Frames(r.frame_labels.clone()))),
            }
            for (step, seq) in r.intermediate.iter().flatten() {
                let f = if seq.is_empty() || multilabel {
                    vec![fallback_class; p.horizon_frames]
                } else {
                    to_framewise(seq, p.horizon_frames)?
                };
                steps
                    .entry(*step)
                    .or_default()
                    .push(record(r.sample_id, Payload::Frames(f)));
            }
        }
    }
    write_atomic(&a.out, format_dump(&frames, &vocab, &header).as_bytes())?;
    write_atomic(
        &sibling(&a.out, "segments"),
        format_dump(&segments, &vocab, &header).as_bytes(),
    )?;
    write_atomic(
        &sibling(&a.out, "observed"),
        format_dump(&observed, &vocab, &header).as_bytes(),
    )?;
    if a.keep_intermediate {
        let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
        for (step, recs) in steps.iter().rev() {
            let _ = writeln!(text, "# step {step}");
            text.push_str(&format_dump(recs, &vocab, &[]));
        }
        write_atomic(&sibling(&a.out, "intermediate"), text.as_bytes())?;
    }
    println!(
        "anticipated {} videos in {elapsed:.2}s, wrote {}",
        preds.len(),
        a.out.display()
    );
    Ok(())
}

/// Splits an intermediate dump into `(step, frame records)` blocks.
pub fn parse_intermediate(
    text: &str,
    vocab: &ActionVocabulary,
) -> Result<Vec<(usize, Vec<DumpRecord>)>> {
    let mut blocks: Vec<(usize, String)> = Vec::new();
    for line in text.lines() {
        if let Some(s) = line.strip_prefix("# step ") {
            let step = s
                .trim()
                .parse()
                .map_err(|_| Error::data("intermediate", format!("bad step line `{line}`")))?;
            blocks.push((step, String::new()));
        } else if let Some((_, body)) = blocks.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    blocks
        .into_iter()
        .map(|(s, body)| Ok((s, parse_dump(&body, vocab, DumpKind::Frames)?)))
        .collect()
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub split: String,
    pub predictions: PathBuf,
    pub out: PathBuf,
    pub alpha: f64,
    pub beta: f64,
    pub protocol: Protocol,
    pub m: Vec<usize>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))
}

struct Truth {
    window: WindowTruth,
    observed: Vec<usize>,
    future_classes: Vec<usize>,
}

/// Frames from `observed_len` on, clipped to the window length.
fn clip(frames: &[usize], n: usize) -> Vec<usize> {
    frames[..n.min(frames.len())].to_vec()
}

fn check_alpha(records: &[DumpRecord], alpha: f64) -> Result<()> {
    match records.iter().find(|r| (r.alpha - alpha).abs() > 1e-9) {
        Some(r) => Err(Error::config(
            "eval.alpha",
            format!(
                "predictions for `{}` were made at alpha {}, evaluating at {alpha}",
                r.video_id, r.alpha
            ),
        )),
        None => Ok(()),
    }
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let vocab = load_vocab(&a.data)?;
    let window = EvalWindow::new(a.alpha, a.beta)?;
    let videos = load_split(&a.data, &vocab, &a.split, cfg.data.stride)?;
    let mut truths = Vec::with_capacity(videos.len());
    for v in &videos {
        let s = split_observation(v, a.alpha, Some(&window))?;
        let l = s.observed.len();
        let w = s.window_frames.unwrap_or(s.horizon_frames);
        truths.push(Truth {
            window: WindowTruth {
                video_id: v.video_id.clone(),
                frames: v.frame_labels[l..l + w].to_vec(),
            },
            observed: v.frame_labels[..l].to_vec(),
            future_classes: s.future_labels(),
        });
    }
    let gt: Vec<WindowTruth> = truths.iter().map(|t| t.window.clone()).collect();
    let win_len: BTreeMap<&str, usize> = gt
        .iter()
        .map(|t| (t.video_id.as_str(), t.frames.len()))
        .collect();

    let mut report = MetricReport::new();
    report.header = config_header(cfg);
    report.header.push(format!(
        "eval protocol={:?} alpha={} beta={} split={} videos={}",
        a.protocol,
        a.alpha,
        a.beta,
        a.split,
        videos.len()
    ));
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    let text = read_text(&a.predictions)?;
    match a.protocol {
        Protocol::Moc => {
            let records = parse_dump(&text, &vocab, DumpKind::Frames)?;
            check_alpha(&records, a.alpha)?;
            // One prediction per video: the lowest sample id present.
            let mut preds: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
            for r in records {
                let Payload::Frames(f) = r.payload else {
                    continue;
                };
                let n = win_len.get(r.video_id.as_str()).copied().unwrap_or(0);
                let e = preds.entry(r.video_id).or_insert((usize::MAX, Vec::new()));
                if r.sample_id < e.0 {
                    *e = (r.sample_id, clip(&f, n));
                }
            }
            let preds: BTreeMap<String, Vec<usize>> =
                preds.into_iter().map(|(k, (_, f))| (k, f)).collect();
            let tally = moc(&preds, &gt)?;
            let value = tally.moc()?;
            report.put_f64("moc", "value", value);
            csv_rows.push(vec!["moc".into(), "value".into(), format!("{value:.6}")]);
            for (c, acc) in tally.per_class() {
                report.put_f64("moc.per_class", vocab.name(c), acc);
                csv_rows.push(vec![
                    "moc.per_class".into(),
                    vocab.name(c).into(),
                    format!("{acc:.6}"),
                ]);
            }
        }
        Protocol::DivAvg | Protocol::DivTop1 => {
            let records = parse_dump(&text, &vocab, DumpKind::Frames)?;
            check_alpha(&records, a.alpha)?;
            let mut by_video: BTreeMap<String, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
            for r in records {
                let Payload::Frames(f) = r.payload else {
                    continue;
                };
                if r.sample_id == 0 {
                    continue;
                }
                let n = win_len.get(r.video_id.as_str()).copied().unwrap_or(0);
                by_video
                    .entry(r.video_id)
                    .or_default()
                    .push((r.sample_id, clip(&f, n)));
            }
            for list in by_video.values_mut() {
                list.sort_by_key(|s| s.0);
            }
            let protocol = if a.protocol == Protocol::DivAvg {
                DiversityProtocol::Averaged
            } else {
                DiversityProtocol::Top1
            };
            let section = if protocol == DiversityProtocol::Averaged {
                "diversity.mean"
            } else {
                "diversity.top1"
            };
            for &m in &a.m {
                let mut samples = BTreeMap::new();
                for t in &gt {
                    let list = by_video
                        .get(&t.video_id)
                        .ok_or_else(|| Error::MissingPrediction(t.video_id.clone()))?;
                    if list.len() < m {
                        return Err(Error::data(
                            &a.predictions,
                            format!(
                                "video `{}` has {} samples, {m} requested",
                                t.video_id,
                                list.len()
                            ),
                        ));
                    }
                    samples.insert(
                        t.video_id.clone(),
                        list[..m].iter().map(|s| s.1.clone()).collect(),
                    );
                }
                let value = diverse_eval(&samples, &gt, protocol)?;
                report.put_f64(section, &format!("m{m}"), value);
                csv_rows.push(vec![section.into(), format!("m{m}"), format!("{value:.6}")]);
            }
        }
        Protocol::Map => {
            let records = parse_dump(&text, &vocab, DumpKind::Scores)?;
            check_alpha(&records, a.alpha)?;
            let mut by_video: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
            for r in records {
                let Payload::Scores(s) = r.payload else {
                    continue;
                };
                let e = by_video
                    .entry(r.video_id)
                    .or_insert((usize::MAX, Vec::new()));
                if r.sample_id < e.0 {
                    *e = (r.sample_id, s);
                }
            }
            let mut scores = Vec::new();
            let mut sets = Vec::new();
            for t in &truths {
                let (_, s) = by_video
                    .get(&t.window.video_id)
                    .ok_or_else(|| Error::MissingPrediction(t.window.video_id.clone()))?;
                scores.push(s.clone());
                sets.push(t.future_classes.clone());
            }
            let counts = class_counts(&a.data, &vocab, cfg.data.stride, &sets)?;
            let frequent = freq_split_by_median(&counts);
            let r = map_multilabel(&scores, &sets, &frequent)?;
            report.put_f64("map", "all", r.all);
            csv_rows.push(vec!["map".into(), "all".into(), format!("{:.6}", r.all)]);
            for (k, v) in [("freq", r.freq), ("rare", r.rare)] {
                if let Some(v) = v {
                    report.put_f64("map", k, v);
                    csv_rows.push(vec!["map".into(), k.into(), format!("{v:.6}")]);
                }
            }
            for (c, ap) in &r.per_class {
                report.put_f64("map.per_class", vocab.name(*c), *ap);
            }
        }
    }

    let observed_path = sibling(&a.predictions, "observed");
    if observed_path.exists() {
        let records = parse_dump(&read_text(&observed_path)?, &vocab, DumpKind::Frames)?;
        let by_id: BTreeMap<&str, &[usize]> = records
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::Frames(f) => Some((r.video_id.as_str(), f.as_slice())),
                _ => None,
            })
            .collect();
        let mut sums = [0.0; 5];
        let mut n = 0usize;
        for t in &truths {
            if let Some(p) = by_id.get(t.window.video_id.as_str()) {
                if p.len() != t.observed.len() {
                    continue;
                }
                let s = seg_metrics(p, &t.observed);
                for (acc, v) in sums
                    .iter_mut()
                    .zip([s.acc, s.edit, s.f1[0], s.f1[1], s.f1[2]])
                {
                    *acc += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            for (k, v) in ["acc", "edit", "f1_10", "f1_25", "f1_50"].iter().zip(sums) {
                report.put_f64("segmentation", k, v / n as f64);
                csv_rows.push(vec![
                    "segmentation".into(),
                    k.to_string(),
                    format!("{:.6}", v / n as f64),
                ]);
            }
        }
    }

    let inter_path = sibling(&a.predictions, "intermediate");
    if a.protocol == Protocol::Moc && inter_path.exists() {
        let mut rows = Vec::new();
        for (step, recs) in parse_intermediate(&read_text(&inter_path)?, &vocab)? {
            let mut preds: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
            for r in recs {
                let Payload::Frames(f) = r.payload else {
                    continue;
                };
                let n = win_len.get(r.video_id.as_str()).copied().unwrap_or(0);
                let e = preds.entry(r.video_id).or_insert((usize::MAX, Vec::new()));
                if r.sample_id < e.0 {
                    *e = (r.sample_id, clip(&f, n));
                }
            }
            let preds: BTreeMap<String, Vec<usize>> =
                preds.into_iter().map(|(k, (_, f))| (k, f)).collect();
            let value = moc(&preds, &gt)?.moc()?;
            report.put_f64("moc.per_step", &step.to_string(), value);
            rows.push(vec![step.to_string(), format!("{value:.6}")]);
        }
        write_atomic(
            &sibling(&a.out, "steps.csv"),
            to_csv(&["step", "moc"], &rows).as_bytes(),
        )?;
    }

    write_atomic(&a.out, report.to_text().as_bytes())?;
    write_atomic(
        &sibling(&a.out, "csv"),
        to_csv(&["section", "key", "value"], &csv_rows).as_bytes(),
    )?;
    print!("{}", report.human_table());
    Ok(())
}

/// Per-class counts of training videos containing each class; falls back to
/// the evaluated ground truth when the dataset has no training split.
fn class_counts(
    data: &Path,
    vocab: &ActionVocabulary,
    stride: usize,
    eval_sets: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let c = vocab.num_classes();
    let mut counts = vec![0; c];
    match load_split(data, vocab, "train", stride) {
        Ok(train) => {
            for v in &train {
                let mut seen = vec![false; c];
                for &l in &v.frame_labels {
                    seen[l] = true;
                }
                for (k, s) in counts.iter_mut().zip(seen) {
                    *k += usize::from(s);
                }
            }
        }
        Err(Error::Data { .. }) => {
            for set in eval_sets {
                for &l in set {
                    counts[l] += 1;
                }
            }
        }
        Err(e) => return Err(e),
    }
    Ok(counts)
}
