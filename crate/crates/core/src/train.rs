//! Training objective, diffusion-step importance sampling and the
//! optimization loop.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::codec::{CodecMode, FutureTarget};
use crate::config::TrainSection;
use crate::data::{split_observation, VideoRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::net::{ForwardOptions, ObservedFeatures};
use crate::params::{clip_global_norm, AdamW, AdamWConfig};
use crate::rng::{self, DiffRng};
use crate::tensor::Matrix;

/// Per-term losses of one step. `l_emb` already carries the importance
/// weight, so `total` is a plain weighted sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_emb: f64,
    pub l_pred_class: f64,
    pub l_pred_dur: f64,
    pub l_seg: f64,
    pub l_smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        l_emb: f64,
        l_pred_class: f64,
        l_pred_dur: f64,
        l_seg: f64,
        l_smooth: f64,
        lambda_smooth: f64,
    ) -> Self {
        Self {
            l_emb,
            l_pred_class,
            l_pred_dur,
            l_seg,
            l_smooth,
            total: l_emb + l_pred_class + l_pred_dur + l_seg + lambda_smooth * l_smooth,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_emb,
            self.l_pred_class,
            self.l_pred_dur,
            self.l_seg,
            self.l_smooth,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// `epoch<TAB>step<TAB>l_emb<TAB>l_pred_class<TAB>l_pred_dur<TAB>l_seg<TAB>l_smooth<TAB>total`
    pub fn log_line(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch}\t{step}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}",
            self.l_emb, self.l_pred_class, self.l_pred_dur, self.l_seg, self.l_smooth, self.total
        )
    }
}

/// Squared error of `ẑ0` against `z0`, or against `Emb(a)` at `s = 1`.
pub fn loss_emb_graph(g: &mut Graph, z0_hat: Var, z0: Var, emb_a: Var, s: usize) -> Var {
    let target = if s == 1 { emb_a } else { z0 };
    g.mse(z0_hat, target)
}

/// `(class term, duration term)`. Sequence targets give mean CE over all
/// slots and duration MSE over non-EOS slots; label targets give mean binary
/// CE and no duration term.
pub fn loss_pred_graph(
    g: &mut Graph,
    logits: Var,
    durations: Option<Var>,
    target: &FutureTarget,
    eos: usize,
) -> (Var, Option<Var>) {
    match target {
        FutureTarget::Sequence(seq) => {
            let ce = g.cross_entropy(logits, &seq.classes);
            let dur = durations.map(|d| {
                let mask: Vec<bool> = seq.classes.iter().map(|&c| c != eos).collect();
                g.masked_mse(d, &seq.durations, &mask)
            });
            (ce, dur)
        }
        FutureTarget::Labels(_) => {
            let c = g.shape(logits).1;
            let bce = g.bce_logits(logits, &target.class_indicators(c));
            (bce, None)
        }
    }
}

pub fn loss_seg_graph(g: &mut Graph, frame_logits: Var, labels: &[usize]) -> Var {
    g.cross_entropy(frame_logits, labels)
}

/// Truncated squared difference of adjacent frame log-probabilities.
pub fn loss_smooth_graph(g: &mut Graph, frame_logits: Var, tau: f64) -> Var {
    let lp = g.log_softmax_rows(frame_logits);
    g.smooth_clamp(lp, tau)
}

pub fn loss_emb(z0_hat: &Matrix, target: &Matrix, s: usize, emb_a: &Matrix) -> f64 {
    let mut g = Graph::new();
    let (a, b, c) = (
        g.input(z0_hat.clone()),
        g.input(target.clone()),
        g.input(emb_a.clone()),
    );
    let l = loss_emb_graph(&mut g, a, b, c, s);
    g.value(l).item()
}

pub fn loss_pred(
    logits: &Matrix,
    durations: Option<&Matrix>,
    target: &FutureTarget,
    eos: usize,
) -> (f64, f64) {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let d = durations.map(|d| g.input(d.clone()));
    let (c, d) = loss_pred_graph(&mut g, l, d, target, eos);
    (g.value(c).item(), d.map_or(0.0, |d| g.value(d).item()))
}

pub fn loss_seg(frame_logits: &Matrix, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.input(frame_logits.clone());
    let v = loss_seg_graph(&mut g, l, labels);
    g.value(v).item()
}

/// Operates on log-probabilities directly.
pub fn loss_smooth(frame_logprobs: &Matrix, tau: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.input(frame_logprobs.clone());
    let v = g.smooth_clamp(l, tau);
    g.value(v).item()
}

/// Loss-aware sampler over steps `1..=S`.
#[derive(Clone, Debug)]
pub struct StepSampler {
    steps: usize,
    history_len: usize,
    importance: bool,
    histories: Vec<VecDeque<f64>>,
    warm: usize,
}

impl StepSampler {
    pub fn new(steps: usize, history_len: usize, importance: bool) -> Self {
        Self {
            steps,
            history_len,
            importance,
            histories: vec![VecDeque::with_capacity(history_len); steps],
            warm: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// True once every step holds a full history.
    pub fn warmed_up(&self) -> bool {
        self.warm == self.steps
    }

    pub fn record(&mut self, s: usize, loss: f64) {
        let h = &mut self.histories[s - 1];
        if h.len() == self.history_len {
            h.pop_front();
        } else if h.len() + 1 == self.history_len {
            self.warm += 1;
        }
        h.push_back(loss);
    }

    /// `p_s ∝ sqrt(mean(L_s²))` once warmed up; `None` while uniform.
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        if !self.importance || !self.warmed_up() {
            return None;
        }
        let w: Vec<f64> = self
            .histories
            .iter()
            .map(|h| (h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        Some(w.into_iter().map(|v| v / total).collect())
    }

    /// Draws `(s, weight)` with `weight = 1 / (S·p_s)`.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, f64) {
        match self.probabilities() {
            None => (rng.random_range(1..=self.steps), 1.0),
            Some(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = self.steps - 1;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                // guard against rounding landing on a zero-probability tail
                while p[idx] == 0.0 && idx > 0 {
                    idx -= 1;
                }
                (idx + 1, 1.0 / (self.steps as f64 * p[idx]))
            }
        }
    }
}

/// One training example: an observed prefix and its future.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub observed: ObservedFeatures,
    pub target: FutureTarget,
}

pub fn make_sample(model: &Model, video: &VideoRecord, alpha: f64) -> Result<TrainSample> {
    let split = split_observation(video, alpha, None)?;
    let target = split.target(
        model.codec.mode == CodecMode::ClassOnly,
        model.slots(),
        model.eos(),
    );
    Ok(TrainSample {
        observed: split.observed,
        target,
    })
}

/// The noise draws that fix one forward pass.
#[derive(Clone, Debug)]
pub struct SampleNoise {
    pub s: usize,
    pub z0_noise: Matrix,
    pub zs_noise: Matrix,
}

impl SampleNoise {
    pub fn draw(model: &Model, s: usize, rng: &mut impl Rng) -> Self {
        let (m, d) = (model.slots(), model.net.config.latent_dim);
        Self {
            s,
            z0_noise: rng::gaussian(rng, m, d),
            zs_noise: rng::gaussian(rng, m, d),
        }
    }
}

/// Loss terms of one sample on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub emb: Var,
    pub pred_class: Var,
    pub pred_dur: Option<Var>,
    pub seg: Option<Var>,
    pub smooth: Var,
}

/// Builds the full forward pass for one sample:
/// `z0 ~ q(z0|a)`, `z_s` from the forward marginal, `ẑ0 = f(z_s, s, E)`.
pub fn sample_losses(
    model: &Model,
    g: &mut Graph,
    sample: &TrainSample,
    noise: &SampleNoise,
    tau: f64,
    opts: &mut ForwardOptions<'_>,
) -> Result<LossVars> {
    let store = &model.store;
    let (e, frame_logits) =
        model
            .net
            .encode_graph(store, g, &sample.observed.features, opts, None)?;
    let emb = model.codec.embed(store, g, &sample.target)?;
    if g.shape(emb) != noise.z0_noise.shape() {
        return Err(Error::Shape(format!(
            "target latent {:?} vs noise {:?}",
            g.shape(emb),
            noise.z0_noise.shape()
        )));
    }
    let n0 = g.input(noise.z0_noise.clone());
    let n0 = g.scale(n0, model.beta0().sqrt());
    let z0 = g.add(emb, n0);
    let ab = model.schedule.alpha_bar(noise.s);
    let zs_signal = g.scale(z0, ab.sqrt());
    let ns = g.input(noise.zs_noise.clone());
    let ns = g.scale(ns, (1.0 - ab).sqrt());
    let zs = g.add(zs_signal, ns);
    let memory = model.net.memory_graph(store, g, e);
    let z0_hat = model
        .net
        .denoise_graph(store, g, zs, noise.s, &memory, opts)?;
    let emb_loss = loss_emb_graph(g, z0_hat, z0, emb, noise.s);
    let (logits, dur) = model.codec.predict(store, g, z0);
    let (pred_class, pred_dur) = loss_pred_graph(g, logits, dur, &sample.target, model.eos());
    let seg = sample
        .observed
        .frame_labels
        .as_ref()
        .map(|labels| loss_seg_graph(g, frame_logits, labels));
    let smooth = loss_smooth_graph(g, frame_logits, tau);
    Ok(LossVars {
        emb: emb_loss,
        pred_class,
        pred_dur,
        seg,
        smooth,
    })
}

/// Optimizer and sampler state carried across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub options: TrainSection,
    pub optimizer: AdamW,
    pub sampler: StepSampler,
    pub rng: DiffRng,
}

impl Trainer {
    pub fn new(model: &Model) -> Self {
        let options = model.config.train.clone();
        let optimizer = AdamW::new(
            &model.store,
            AdamWConfig {
                lr: options.lr,
                weight_decay: options.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let sampler = StepSampler::new(model.schedule.steps(), options.history, options.importance);
        Self {
            options,
            optimizer,
            sampler,
            rng: rng::stream(model.config.seed, 1),
        }
    }

    /// One optimizer update on `batch`; returns batch-mean losses.
    pub fn train_step(
        &mut self,
        model: &mut Model,
        batch: &[TrainSample],
        lr: f64,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidRange("empty batch".into()));
        }
        let lambda = self.options.lambda_smooth;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads = model.store.zeros_like();
        let mut sums = [0.0; 5];
        let mut records = Vec::with_capacity(batch.len());
        for sample in batch {
            let (s, weight) = self.sampler.sample(&mut self.rng);
            let noise = SampleNoise::draw(model, s, &mut self.rng);
            let mut g = Graph::new();
            let dropout = model.net.config.dropout > 0.0;
            let mut opts = ForwardOptions {
                rng: dropout.then_some(&mut self.rng),
                zero_cross_values: false,
            };
            let v = sample_losses(model, &mut g, sample, &noise, self.options.tau, &mut opts)?;
            let raw_emb = g.value(v.emb).item();
            let mut terms = vec![
                (v.emb, weight * inv_b),
                (v.pred_class, inv_b),
                (v.smooth, lambda * inv_b),
            ];
            terms.extend(v.pred_dur.map(|d| (d, inv_b)));
            terms.extend(v.seg.map(|d| (d, inv_b)));
            let loss = g.weighted_sum(&terms);
            let vals = [
                weight * raw_emb,
                g.value(v.pred_class).item(),
                v.pred_dur.map_or(0.0, |d| g.value(d).item()),
                v.seg.map_or(0.0, |d| g.value(d).item()),
                g.value(v.smooth).item(),
            ];
            if !g.value(loss).is_finite() || vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    diagnostics: format!(
                        "step s={s} weight={weight:e} l_emb={:e} l_pred_class={:e} l_pred_dur={:e} l_seg={:e} l_smooth={:e} lr={lr:e} update={}",
                        vals[0],
                        vals[1],
                        vals[2],
                        vals[3],
                        vals[4],
                        self.optimizer.steps_taken()
                    ),
                });
            }
            g.backward(loss, &mut grads);
            for (a, b) in sums.iter_mut().zip(vals) {
                *a += b * inv_b;
            }
            records.push((s, raw_emb));
        }
        for (s, l) in records {
            self.sampler.record(s, l);
        }
        let norm = clip_global_norm(&mut grads, self.options.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                diagnostics: format!("global norm {norm}"),
            });
        }
        self.optimizer.step(&mut model.store, &grads, lr);
        Ok(LossBreakdown::new(
            sums[0], sums[1], sums[2], sums[3], sums[4], lambda,
        ))
    }
}

/// Linear warm-up over `warmup` updates, then cosine annealing to zero.
pub fn lr_at(update: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if update < warmup {
        return base * (update + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((update - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Trains for `config.train.epochs` epochs over `videos`, reporting every
/// update through `on_step(epoch, update, &losses)`.
pub fn train(
    model: &mut Model,
    videos: &[VideoRecord],
    mut on_step: impl FnMut(usize, usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if videos.is_empty() {
        return Err(Error::data("training set", "no videos"));
    }
    let mut trainer = Trainer::new(model);
    let opts = trainer.options.clone();
    let per_epoch = videos.len().div_ceil(opts.batch);
    let total = per_epoch * opts.epochs;
    let warmup = per_epoch * opts.warmup_epochs;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut epoch_means = Vec::with_capacity(opts.epochs);
    let mut update = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut trainer.rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(opts.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let alpha = opts.alphas[trainer.rng.random_range(0..opts.alphas.len())];
                batch.push(make_sample(model, &videos[i], alpha)?);
            }
            let lr = lr_at(update, total, warmup, opts.lr);
            let l = trainer.train_step(model, &batch, lr)?;
            on_step(epoch, update, &l);
            let k = chunk.len() as f64 / videos.len() as f64;
            sum.l_emb += k * l.l_emb;
            sum.l_pred_class += k * l.l_pred_class;
            sum.l_pred_dur += k * l.l_pred_dur;
            sum.l_seg += k * l.l_seg;
            sum.l_smooth += k * l.l_smooth;
            update += 1;
        }
        epoch_means.push(LossBreakdown::new(
            sum.l_emb,
            sum.l_pred_class,
            sum.l_pred_dur,
            sum.l_seg,
            sum.l_smooth,
            opts.lambda_smooth,
        ));
    }
    Ok(epoch_means)
}
