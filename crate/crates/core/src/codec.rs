//! Conversion between discrete future actions and continuous latents.
//!
//! A future is embedded as `f_a([Emb_c(classes), Emb_t(durations)])` and read
//! back by two linear heads (class logits and `exp`-activated durations). In
//! class-only mode, used for multi-label anticipation, the duration branch and
//! `f_a` are skipped and the class embedding is the latent directly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Linear, ParamId, ParamStore};
use crate::schedule::LatentSeq;
use crate::tensor::Matrix;

pub const EOS_NAME: &str = "EOS";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionVocabulary {
    names: Vec<String>,
    eos_id: usize,
}

impl ActionVocabulary {
    pub fn new(names: Vec<String>, eos_id: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Vocabulary(
                "need at least one action class plus EOS".into(),
            ));
        }
        if eos_id >= names.len() {
            return Err(Error::Vocabulary(format!(
                "EOS id {eos_id} outside {} classes",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names, eos_id })
    }

    /// Action names followed by an appended EOS class.
    pub fn with_appended_eos(mut actions: Vec<String>) -> Result<Self> {
        let eos = actions.len();
        actions.push(EOS_NAME.to_string());
        Self::new(actions, eos)
    }

    /// Parses `id name` lines. Ids must cover `0..C` exactly. When no class is
    /// named `EOS` one is appended after the last id.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, char::is_whitespace);
            let id = parts.next().unwrap_or_default();
            let name = parts.next().map(str::trim).unwrap_or_default();
            let id: usize = id.parse().map_err(|_| {
                Error::Vocabulary(format!("line {}: bad class id `{id}`", lineno + 1))
            })?;
            if name.is_empty() {
                return Err(Error::Vocabulary(format!(
                    "line {}: missing class name",
                    lineno + 1
                )));
            }
            entries.push((id, name.to_string()));
        }
        entries.sort_by_key(|e| e.0);
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id != expect {
                return Err(Error::Vocabulary(format!(
                    "class ids must be contiguous from 0; missing {expect}"
                )));
            }
        }
        let names: Vec<String> = entries.into_iter().map(|e| e.1).collect();
        match names.iter().position(|n| n == EOS_NAME) {
            Some(eos) => Self::new(names, eos),
            None => Self::with_appended_eos(names),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path, format!("cannot read mapping: {e}")))?;
        Self::parse(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.names.iter().enumerate() {
            let _ = writeln!(out, "{i} {n}");
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A future as per-slot classes and relative durations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSequence {
    pub classes: Vec<usize>,
    pub durations: Vec<f64>,
}

impl ActionSequence {
    pub fn new(classes: Vec<usize>, durations: Vec<f64>) -> Result<Self> {
        if classes.len() != durations.len() {
            return Err(Error::Shape(format!(
                "{} classes but {} durations",
                classes.len(),
                durations.len()
            )));
        }
        Ok(Self { classes, durations })
    }

    pub fn empty() -> Self {
        Self {
            classes: Vec::new(),
            durations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Fixed-width ground truth from `(class, duration)` segments: the first
    /// `slots` segments are kept (durations rescaled to sum to 1 if any were
    /// dropped) and the remainder is padded with zero-length EOS slots.
    pub fn padded_from_segments(segments: &[(usize, f64)], slots: usize, eos: usize) -> Self {
        let kept = &segments[..segments.len().min(slots)];
        let total: f64 = kept.iter().map(|s| s.1).sum();
        let mut classes: Vec<usize> = kept.iter().map(|s| s.0).collect();
        let mut durations: Vec<f64> = kept
            .iter()
            .map(|s| if total > 0.0 { s.1 / total } else { 0.0 })
            .collect();
        classes.resize(slots, eos);
        durations.resize(slots, 0.0);
        Self { classes, durations }
    }

    /// Checks the slot invariants; `ground_truth` additionally requires the
    /// non-EOS durations to sum to 1.
    pub fn validate(&self, vocab: &ActionVocabulary, ground_truth: bool) -> Result<()> {
        let eos = vocab.eos_id();
        let mut after_eos = false;
        let mut total = 0.0;
        for (i, (&c, &d)) in self.classes.iter().zip(&self.durations).enumerate() {
            if c >= vocab.num_classes() {
                return Err(Error::Vocabulary(format!(
                    "slot {i}: class {c} outside vocabulary of {}",
                    vocab.num_classes()
                )));
            }
            if !(d >= 0.0) {
                return Err(Error::InvalidRange(format!("slot {i}: duration {d}")));
            }
            if c == eos {
                after_eos = true;
            }
            if after_eos && (c != eos || d != 0.0) {
                return Err(Error::InvalidRange(format!(
                    "slot {i}: non-empty slot after EOS"
                )));
            }
            if c != eos {
                total += d;
            }
        }
        if ground_truth && !self.classes.iter().all(|&c| c == eos) && (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRange(format!(
                "ground-truth durations sum to {total}"
            )));
        }
        Ok(())
    }
}

/// What the decoder is asked to anticipate.
#[derive(Clone, Debug, PartialEq)]
pub enum FutureTarget {
    /// Ordered actions with durations, padded to `M` slots.
    Sequence(ActionSequence),
    /// Set of classes occurring in the future (multi-label mode, `M = 1`).
    Labels(Vec<usize>),
}

impl FutureTarget {
    pub fn slots(&self) -> usize {
        match self {
            FutureTarget::Sequence(s) => s.len(),
            FutureTarget::Labels(_) => 1,
        }
    }

    /// One-hot (sequence) or multi-hot (labels) class indicator matrix.
    pub fn class_indicators(&self, num_classes: usize) -> Matrix {
        match self {
            FutureTarget::Sequence(s) => {
                let mut m = Matrix::zeros(s.len(), num_classes);
                for (r, &c) in s.classes.iter().enumerate() {
                    m.set(r, c, 1.0);
                }
                m
            }
            FutureTarget::Labels(set) => {
                let mut m = Matrix::zeros(1, num_classes);
                for &c in set {
                    m.set(0, c, 1.0);
                }
                m
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecMode {
    Sequence,
    ClassOnly,
}

/// Parameter handles for the embedding and predictor maps.
#[derive(Clone, Debug)]
pub struct CodecParams {
    pub mode: CodecMode,
    pub num_classes: usize,
    pub dim: usize,
    /// `C x d_c` (`C x D'` in class-only mode).
    pub class_emb: ParamId,
    /// `1 -> d_t` affine map of the scalar duration.
    pub dur_emb: Option<Linear>,
    /// `(d_c + d_t) -> D'` merge map.
    pub merge: Option<Linear>,
    pub class_head: Linear,
    pub dur_head: Option<Linear>,
}

/// Decoded heads for one latent.
#[derive(Clone, Debug)]
pub struct ActionPrediction {
    pub class_logits: Matrix,
    /// Strictly positive; `None` in class-only mode.
    pub durations: Option<Vec<f64>>,
}

impl ActionPrediction {
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.class_logits.rows())
            .map(|r| self.class_logits.argmax_row(r))
            .collect()
    }

    /// Per-class probabilities `σ(logit)` for the first slot.
    pub fn label_scores(&self) -> Vec<f64> {
        self.class_logits
            .row(0)
            .iter()
            .map(|&x| sigmoid(x))
            .collect()
    }
}

impl CodecParams {
    pub fn new(
        store: &mut ParamStore,
        mode: CodecMode,
        num_classes: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match mode {
            CodecMode::Sequence => {
                let d_t = dim / 2;
                let d_c = dim - d_t;
                let class_emb = store.add(
                    "codec.class_emb",
                    uniform(num_classes, d_c, num_classes, rng),
                );
                let dur_emb = Linear::new(store, "codec.dur_emb", 1, d_t, rng);
                let merge = Linear::new(store, "codec.merge", d_c + d_t, dim, rng);
                let class_head = Linear::new(store, "codec.class_head", dim, num_classes, rng);
                let dur_head = Linear::new(store, "codec.dur_head", dim, 1, rng);
                Self {
                    mode,
                    num_classes,
                    dim,
                    class_emb,
                    dur_emb: Some(dur_emb),
                    merge: Some(merge),
                    class_head,
                    dur_head: Some(dur_head),
                }
            }
            CodecMode::ClassOnly => {
                let class_emb = store.add(
                    "codec.class_emb",
                    uniform(num_classes, dim, num_classes, rng),
                );
                let class_head = Linear::new(store, "codec.class_head", dim, num_classes, rng);
                Self {
                    mode,
                    num_classes,
                    dim,
                    class_emb,
                    dur_emb: None,
                    merge: None,
                    class_head,
                    dur_head: None,
                }
            }
        }
    }

    fn check_target(&self, a: &FutureTarget) -> Result<()> {
        match (self.mode, a) {
            (CodecMode::Sequence, FutureTarget::Sequence(s)) => {
                if let Some(&c) = s.classes.iter().find(|&&c| c >= self.num_classes) {
                    return Err(Error::Vocabulary(format!(
                        "class {c} outside vocabulary of {}",
                        self.num_classes
                    )));
                }
                Ok(())
            }
            (CodecMode::ClassOnly, FutureTarget::Labels(set)) => {
                if let Some(&c) = set.iter().find(|&&c| c >= self.num_classes) {
                    return Err(Error::Vocabulary(format!(
                        "class {c} outside vocabulary of {}",
                        self.num_classes
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Vocabulary(
                "target kind does not match codec mode".into(),
            )),
        }
    }

    /// `Emb(a)` on the tape.
    pub fn embed(&self, store: &ParamStore, g: &mut Graph, a: &FutureTarget) -> Result<Var> {
        self.check_target(a)?;
        let onehot = g.input(a.class_indicators(self.num_classes));
        let table = store.bind(g, self.class_emb);
        let class_part = g.matmul(onehot, table);
        match (self.mode, a) {
            (CodecMode::Sequence, FutureTarget::Sequence(s)) => {
                let dur_in = g.input(Matrix::from_vec(s.len(), 1, s.durations.clone())?);
                let dur_part = self
                    .dur_emb
                    .expect("sequence codec")
                    .forward(store, g, dur_in);
                let joint = g.concat_cols(&[class_part, dur_part]);
                Ok(self.merge.expect("sequence codec").forward(store, g, joint))
            }
            _ => Ok(class_part),
        }
    }

    /// `Emb(a)` as a step-0 latent.
    pub fn embed_actions(&self, store: &ParamStore, a: &FutureTarget) -> Result<LatentSeq> {
        let mut g = Graph::new();
        let v = self.embed(store, &mut g, a)?;
        Ok(LatentSeq::new(g.value(v).clone(), 0))
    }

    /// Draw from `q(z0 | a) = N(Emb(a), beta0·I)`.
    pub fn sample_z0(
        &self,
        store: &ParamStore,
        a: &FutureTarget,
        beta0: f64,
        noise: &Matrix,
    ) -> Result<LatentSeq> {
        if !(beta0 >= 0.0) {
            return Err(Error::InvalidRange(format!(
                "beta0 must be >= 0, got {beta0}"
            )));
        }
        let emb = self.embed_actions(store, a)?;
        if emb.z.shape() != noise.shape() {
            return Err(Error::Shape(format!(
                "noise {:?} vs latent {:?}",
                noise.shape(),
                emb.z.shape()
            )));
        }
        let k = beta0.sqrt();
        Ok(LatentSeq::new(emb.z.zip_map(noise, |e, n| e + k * n), 0))
    }

    /// Predictor heads on the tape: `(class logits, durations)`; durations
    /// are `exp` of the head output and absent in class-only mode.
    pub fn predict(&self, store: &ParamStore, g: &mut Graph, z0: Var) -> (Var, Option<Var>) {
        let logits = self.class_head.forward(store, g, z0);
        let dur = self.dur_head.map(|h| {
            let pre = h.forward(store, g, z0);
            g.exp(pre)
        });
        (logits, dur)
    }

    pub fn predict_actions(&self, store: &ParamStore, z0: &Matrix) -> Result<ActionPrediction> {
        if z0.cols() != self.dim {
            return Err(Error::Shape(format!(
                "latent has {} columns, codec expects {}",
                z0.cols(),
                self.dim
            )));
        }
        let class_logits = self.class_head.apply(store, z0);
        let durations = self.dur_head.map(|h| {
            h.apply(store, z0)
                .as_slice()
                .iter()
                .map(|v| v.exp())
                .collect()
        });
        Ok(ActionPrediction {
            class_logits,
            durations,
        })
    }
}

/// Keeps the slots strictly before the first EOS.
pub fn truncate_at_eos(classes: &[usize], durations: &[f64], eos: usize) -> ActionSequence {
    let end = classes
        .iter()
        .position(|&c| c == eos)
        .unwrap_or(classes.len());
    ActionSequence {
        classes: classes[..end].to_vec(),
        durations: durations[..end.min(durations.len())].to_vec(),
    }
}

/// Rescales positive durations to sum to one.
pub fn normalize_durations(durations: &[f64]) -> Result<Vec<f64>> {
    if durations.is_empty() {
        return Err(Error::EmptyFuture);
    }
    if let Some(bad) = durations.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "durations must be positive and finite, got {bad}"
        )));
    }
    let total: f64 = durations.iter().sum();
    Ok(durations.iter().map(|d| d / total).collect())
}
