//! Datasets: a synthetic stochastic-grammar activity generator and loaders for
//! frame-label + feature files.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::codec::{ActionSequence, ActionVocabulary, FutureTarget};
use crate::error::{Error, Result};
use crate::eval::EvalWindow;
use crate::net::ObservedFeatures;
use crate::rng;
use crate::tensor::Matrix;

/// One step of an activity: a fixed action or a choice between alternatives.
#[derive(Clone, Debug, PartialEq)]
pub enum Element {
    Action(usize),
    Branch(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Activity {
    pub name: String,
    pub weight: f64,
    pub body: Vec<Element>,
}

/// A probabilistic grammar of activities.
///
/// At every branch the first alternative has probability `1 - ambiguity` and
/// the others share `ambiguity` equally.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    pub vocabulary: ActionVocabulary,
    pub activities: Vec<Activity>,
    /// Inclusive `(min_frames, max_frames)` per action id.
    pub durations: Vec<(usize, usize)>,
    pub ambiguity: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

/// A full expansion of one activity.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub activity: usize,
    pub branches: Vec<usize>,
    pub actions: Vec<usize>,
    pub probability: f64,
}

impl GrammarSpec {
    /// The default desk-scale profile: 12 actions plus EOS, four activities,
    /// each with one two-way branch in the middle.
    pub fn default_profile(ambiguity: f64) -> Self {
        let names = [
            "take_cup",
            "pour_coffee",
            "pour_milk",
            "add_sugar",
            "stir",
            "take_bowl",
            "pour_cereal",
            "crack_egg",
            "fry_egg",
            "butter_pan",
            "cut_bread",
            "add_topping",
        ];
        let vocabulary =
            ActionVocabulary::with_appended_eos(names.iter().map(|s| s.to_string()).collect())
                .expect("static vocabulary");
        use Element::{Action as A, Branch as B};
        let activities = vec![
            Activity {
                name: "coffee".into(),
                weight: 1.0,
                body: vec![A(0), A(1), B(vec![vec![2, 4], vec![3, 11]]), A(10), A(5)],
            },
            Activity {
                name: "cereal".into(),
                weight: 1.0,
                body: vec![A(5), A(6), B(vec![vec![2, 11], vec![4, 3]]), A(0), A(1)],
            },
            Activity {
                name: "eggs".into(),
                weight: 1.0,
                body: vec![A(9), A(7), B(vec![vec![8, 10], vec![4, 8]]), A(11), A(2)],
            },
            Activity {
                name: "toast".into(),
                weight: 1.0,
                body: vec![A(10), A(9), B(vec![vec![11, 1], vec![6, 2]]), A(3), A(4)],
            },
        ];
        // Opening actions run long so the usual observation cut falls before
        // the branch; later actions are shorter.
        let centers = [88, 50, 54, 46, 52, 92, 84, 86, 56, 90, 48, 44];
        let durations = centers.iter().map(|&c| (c - 2, c + 2)).collect();
        Self {
            vocabulary,
            activities,
            durations,
            ambiguity,
            feature_dim: 32,
            noise_sigma: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config("data.ambiguity", "must lie in [0, 1]"));
        }
        if self.activities.is_empty() {
            return Err(Error::config("data.grammar", "no activities"));
        }
        let actions = self.vocabulary.num_classes() - 1;
        if self.durations.len() != actions {
            return Err(Error::config(
                "data.grammar",
                format!(
                    "{} duration laws for {actions} actions",
                    self.durations.len()
                ),
            ));
        }
        if let Some(&(lo, hi)) = self.durations.iter().find(|(lo, hi)| *lo == 0 || lo > hi) {
            return Err(Error::config(
                "data.grammar",
                format!("invalid duration law ({lo}, {hi})"),
            ));
        }
        for a in &self.activities {
            if !(a.weight > 0.0) {
                return Err(Error::config(
                    "data.grammar",
                    format!("activity `{}` weight", a.name),
                ));
            }
            for e in &a.body {
                let ids: Vec<usize> = match e {
                    Element::Action(id) => vec![*id],
                    Element::Branch(alts) => {
                        if alts.is_empty() {
                            return Err(Error::config("data.grammar", "empty branch"));
                        }
                        alts.iter().flatten().copied().collect()
                    }
                };
                if ids.iter().any(|&id| id >= actions) {
                    return Err(Error::config(
                        "data.grammar",
                        format!("activity `{}` references unknown action", a.name),
                    ));
                }
            }
        }
        if self.feature_dim == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::config(
                "data.feature_dim",
                "invalid feature settings",
            ));
        }
        Ok(())
    }

    pub fn branch_probs(&self, alternatives: usize) -> Vec<f64> {
        if alternatives == 1 {
            return vec![1.0];
        }
        let rest = self.ambiguity / (alternatives - 1) as f64;
        let mut p = vec![rest; alternatives];
        p[0] = 1.0 - self.ambiguity;
        p
    }

    /// Every expansion of every activity with its prior probability.
    pub fn expansions(&self) -> Vec<Expansion> {
        let total_weight: f64 = self.activities.iter().map(|a| a.weight).sum();
        let mut out = Vec::new();
        for (ai, act) in self.activities.iter().enumerate() {
            let mut partial = vec![(Vec::new(), Vec::new(), act.weight / total_weight)];
            for e in &act.body {
                partial = match e {
                    Element::Action(id) => partial
                        .into_iter()
                        .map(|(mut acts, br, p)| {
                            acts.push(*id);
                            (acts, br, p)
                        })
                        .collect(),
                    Element::Branch(alts) => {
                        let probs = self.branch_probs(alts.len());
                        let mut next = Vec::new();
                        for (acts, br, p) in partial {
                            for (k, alt) in alts.iter().enumerate() {
                                let mut a2: Vec<usize> = acts.clone();
                                a2.extend(alt);
                                let mut b2: Vec<usize> = br.clone();
                                b2.push(k);
                                next.push((a2, b2, p * probs[k]));
                            }
                        }
                        next
                    }
                };
            }
            for (actions, branches, probability) in partial {
                out.push(Expansion {
                    activity: ai,
                    branches,
                    actions,
                    probability,
                });
            }
        }
        out
    }

    /// Conditional distribution over action-sequence continuations given the
    /// observed class segments. The last observed segment is assumed to be in
    /// progress, so each continuation starts with its class. Continuations
    /// with identical action lists are merged.
    pub fn continuations(&self, observed_classes: &[usize]) -> Vec<(f64, Vec<usize>)> {
        let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
        let n = observed_classes.len();
        for e in self.expansions() {
            if e.probability == 0.0 || n == 0 || e.actions.len() < n {
                continue;
            }
            if e.actions[..n] != *observed_classes {
                continue;
            }
            let cont = e.actions[n - 1..].to_vec();
            match out.iter_mut().find(|(_, c)| *c == cont) {
                Some(entry) => entry.0 += e.probability,
                None => out.push((e.probability, cont)),
            }
        }
        let total: f64 = out.iter().map(|c| c.0).sum();
        for c in &mut out {
            c.0 /= total;
        }
        out
    }

    /// Unit-norm feature prototype per class (EOS included), fixed by `seed`.
    pub fn prototypes(&self, seed: u64) -> Matrix {
        let c = self.vocabulary.num_classes();
        let mut r = rng::stream(seed, u64::MAX);
        let mut m = rng::gaussian(&mut r, c, self.feature_dim);
        for i in 0..c {
            let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in m.row_mut(i) {
                *v /= norm;
            }
        }
        m
    }

    /// Samples one expansion: `(activity, branch choices, actions)`.
    fn sample_expansion(&self, r: &mut impl Rng) -> (usize, Vec<usize>, Vec<usize>) {
        let total: f64 = self.activities.iter().map(|a| a.weight).sum();
        let mut u = r.random::<f64>() * total;
        let mut ai = self.activities.len() - 1;
        for (i, a) in self.activities.iter().enumerate() {
            if u < a.weight {
                ai = i;
                break;
            }
            u -= a.weight;
        }
        let mut actions = Vec::new();
        let mut branches = Vec::new();
        for e in &self.activities[ai].body {
            match e {
                Element::Action(id) => actions.push(*id),
                Element::Branch(alts) => {
                    let probs = self.branch_probs(alts.len());
                    let mut u = r.random::<f64>();
                    let mut k = alts.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        if u < *p {
                            k = i;
                            break;
                        }
                        u -= p;
                    }
                    branches.push(k);
                    actions.extend(&alts[k]);
                }
            }
        }
        (ai, branches, actions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_labels: Vec<usize>,
    /// `T x K`.
    pub features: Matrix,
    pub split: String,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frame_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_labels.is_empty()
    }

    /// Run-length segments `(class, start, length)`.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        run_lengths(&self.frame_labels)
    }

    /// Keeps every `stride`-th frame starting at 0.
    pub fn subsample(&self, stride: usize) -> Self {
        if stride <= 1 {
            return self.clone();
        }
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.features.row(i).to_vec()).collect();
        Self {
            video_id: self.video_id.clone(),
            frame_labels: idx.iter().map(|&i| self.frame_labels[i]).collect(),
            features: Matrix::from_rows(&rows).expect("subsample shape"),
            split: self.split.clone(),
        }
    }
}

pub fn run_lengths(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == c => last.2 += 1,
            _ => out.push((c, i, 1)),
        }
    }
    out
}

/// Samples `n_videos` videos; a pure function of `(spec, n_videos, seed)`.
pub fn generate_dataset(
    spec: &GrammarSpec,
    n_videos: usize,
    seed: u64,
) -> Result<Vec<VideoRecord>> {
    generate_with_split(spec, n_videos, seed, "train", 0)
}

/// Train and test videos from disjoint random streams.
pub fn generate_splits(
    spec: &GrammarSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>)> {
    let train = generate_with_split(spec, n_train, seed, "train", 0)?;
    let test = generate_with_split(spec, n_test, seed, "test", 1 << 32)?;
    Ok((train, test))
}

fn generate_with_split(
    spec: &GrammarSpec,
    n_videos: usize,
    seed: u64,
    split: &str,
    stream_offset: u64,
) -> Result<Vec<VideoRecord>> {
    spec.validate()?;
    let protos = spec.prototypes(seed);
    let mut out = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let mut r = rng::stream(seed, stream_offset + i as u64);
        let (_, _, actions) = spec.sample_expansion(&mut r);
        let mut labels = Vec::new();
        for &a in &actions {
            let (lo, hi) = spec.durations[a];
            let d = r.random_range(lo..=hi);
            labels.extend(std::iter::repeat_n(a, d));
        }
        let noise = rng::gaussian(&mut r, labels.len(), spec.feature_dim);
        let mut features = Matrix::zeros(labels.len(), spec.feature_dim);
        for (t, &c) in labels.iter().enumerate() {
            for (j, v) in features.row_mut(t).iter_mut().enumerate() {
                *v = protos.get(c, j) + spec.noise_sigma * noise.get(t, j);
            }
        }
        out.push(VideoRecord {
            video_id: format!("{split}-{i:05}"),
            frame_labels: labels,
            features,
            split: split.to_string(),
        });
    }
    Ok(out)
}

const FEATURE_HEADER_LEN: usize = 16;

/// Binary feature file: 16-byte ASCII header `"{K:>7} {T:>7}\n"` then `T x K`
/// little-endian `f32`, row-major.
pub fn encode_features(features: &Matrix) -> Vec<u8> {
    let header = format!("{:>7} {:>7}\n", features.cols(), features.rows());
    debug_assert_eq!(header.len(), FEATURE_HEADER_LEN);
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * features.len());
    out.extend_from_slice(header.as_bytes());
    for v in features.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses the binary layout or, failing that, a whitespace text matrix with
/// one frame per line.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if let Some(m) = decode_binary_features(bytes) {
        return Ok(m);
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::data(path, "neither a binary nor a text feature matrix"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?);
    }
    Matrix::from_rows(&rows).map_err(|e| Error::data(path, e.to_string()))
}

fn decode_binary_features(bytes: &[u8]) -> Option<Matrix> {
    let header = std::str::from_utf8(bytes.get(..FEATURE_HEADER_LEN)?).ok()?;
    if !header.ends_with('\n') {
        return None;
    }
    let mut it = header.split_whitespace();
    let k: usize = it.next()?.parse().ok()?;
    let t: usize = it.next()?.parse().ok()?;
    if it.next().is_some() || bytes.len() != FEATURE_HEADER_LEN + 4 * k * t {
        return None;
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(t, k, data).ok()
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
    decode_features(&bytes, path)
}

pub fn read_labels(path: &Path, vocab: &ActionVocabulary) -> Result<Vec<usize>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, name)| {
            vocab
                .id_of(name)
                .ok_or_else(|| Error::data(path, format!("frame {i}: unknown label `{name}`")))
        })
        .collect()
}

/// Writes `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn assemble(
    video_id: String,
    labels: Vec<usize>,
    features: Matrix,
    stride: usize,
    split: String,
    origin: &Path,
) -> Result<VideoRecord> {
    let (nl, nf) = (labels.len(), features.rows());
    if nl.abs_diff(nf) > stride.max(1) {
        return Err(Error::data(
            origin,
            format!("{nl} labels vs {nf} feature frames exceeds stride tolerance {stride}"),
        ));
    }
    let t = nl.min(nf);
    let rows: Vec<Vec<f64>> = (0..t).map(|i| features.row(i).to_vec()).collect();
    let features = if t == features.rows() {
        features
    } else {
        Matrix::from_rows(&rows).map_err(|e| Error::data(origin, e.to_string()))?
    };
    let mut labels = labels;
    labels.truncate(t);
    Ok(VideoRecord {
        video_id,
        frame_labels: labels,
        features,
        split,
    }
    .subsample(stride))
}

/// Loads every `<label_dir>/<id>.txt` with features from `<feature_dir>/<id>.feat`
/// (or `<id>.txt`), mapping names through `mapping_file` and subsampling both
/// by `stride`.
pub fn load_breakfast_style(
    label_dir: &Path,
    feature_dir: &Path,
    mapping_file: &Path,
    stride: usize,
) -> Result<(ActionVocabulary, Vec<VideoRecord>)> {
    let vocab = ActionVocabulary::load(mapping_file)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(label_dir)
        .map_err(|e| Error::data(label_dir, format!("cannot list: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for label_path in entries {
        let id = label_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(&label_path, "bad file name"))?
            .to_string();
        let feat_path = ["feat", "txt"]
            .iter()
            .map(|ext| feature_dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::data(feature_dir.join(&id), "no feature file"))?;
        let labels = read_labels(&label_path, &vocab)?;
        let features = read_features(&feat_path)?;
        out.push(assemble(
            id,
            labels,
            features,
            stride,
            "all".into(),
            &label_path,
        )?);
    }
    Ok((vocab, out))
}

/// Loads a `video_id<TAB>label_path<TAB>feature_path<TAB>split` manifest;
/// relative paths resolve against the manifest's directory.
pub fn load_manifest(
    manifest: &Path,
    vocab: &ActionVocabulary,
    stride: usize,
) -> Result<Vec<VideoRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::data(manifest, format!("cannot read: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::data(
                manifest,
                format!("line {}: expected 4 tab-separated fields", i + 1),
            ));
        }
        let labels = read_labels(&base.join(cols[1]), vocab)?;
        let features = read_features(&base.join(cols[2]))?;
        out.push(assemble(
            cols[0].to_string(),
            labels,
            features,
            stride,
            cols[3].to_string(),
            &base.join(cols[1]),
        )?);
    }
    Ok(out)
}

/// Writes videos as label/feature files plus `mapping.txt` and `manifest.tsv`
/// under `dir`.
pub fn write_dataset(dir: &Path, vocab: &ActionVocabulary, videos: &[VideoRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("labels"))?;
    fs::create_dir_all(dir.join("features"))?;
    write_atomic(&dir.join("mapping.txt"), vocab.to_text().as_bytes())?;
    let mut manifest = String::new();
    for v in videos {
        let label_rel = format!("labels/{}.txt", v.video_id);
        let feat_rel = format!("features/{}.feat", v.video_id);
        let mut labels = String::new();
        for &c in &v.frame_labels {
            labels.push_str(vocab.name(c));
            labels.push('\n');
        }
        write_atomic(&dir.join(&label_rel), labels.as_bytes())?;
        write_atomic(&dir.join(&feat_rel), &encode_features(&v.features))?;
        manifest.push_str(&format!(
            "{}\t{label_rel}\t{feat_rel}\t{}\n",
            v.video_id, v.split
        ));
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())
}

/// Parses a `video_id<TAB>space-separated class ids` multi-label manifest.
pub fn load_multilabel_manifest(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(path, format!("line {}: missing tab", i + 1)))?;
        let ids: std::result::Result<Vec<usize>, _> =
            rest.split_whitespace().map(str::parse).collect();
        let ids = ids.map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        out.push((id.to_string(), ids));
    }
    Ok(out)
}

/// An observed prefix and the future it leads into.
#[derive(Clone, Debug)]
pub struct ObservationSplit {
    pub observed: ObservedFeatures,
    /// Remaining segments as `(class, frames)`.
    pub future_segments: Vec<(usize, usize)>,
    /// Frames after the observation.
    pub horizon_frames: usize,
    /// Frames in the evaluation window, when one was requested.
    pub window_frames: Option<usize>,
}

impl ObservationSplit {
    /// Relative durations of the future segments; they sum to 1.
    pub fn relative_segments(&self) -> Vec<(usize, f64)> {
        let total = self.horizon_frames as f64;
        self.future_segments
            .iter()
            .map(|&(c, n)| (c, n as f64 / total))
            .collect()
    }

    pub fn future_sequence(&self, slots: usize, eos: usize) -> ActionSequence {
        ActionSequence::padded_from_segments(&self.relative_segments(), slots, eos)
    }

    pub fn future_labels(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.future_segments.iter().map(|s| s.0).collect();
        set.into_iter().collect()
    }

    pub fn target(&self, multilabel: bool, slots: usize, eos: usize) -> FutureTarget {
        if multilabel {
            FutureTarget::Labels(self.future_labels())
        } else {
            FutureTarget::Sequence(self.future_sequence(slots, eos))
        }
    }
}

/// `⌊fraction · total⌋`, tolerant of representation error in the fraction.
pub fn fraction_of(total: usize, fraction: f64) -> usize {
    (fraction * total as f64 + 1e-9).floor() as usize
}

/// Observes the first `⌊alpha·T⌋` frames; the rest becomes the future.
pub fn split_observation(
    v: &VideoRecord,
    alpha: f64,
    window: Option<&EvalWindow>,
) -> Result<ObservationSplit> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidRange(format!("alpha {alpha} outside (0, 1)")));
    }
    let t = v.len();
    let observed_len = fraction_of(t, alpha);
    if observed_len == 0 {
        return Err(Error::InvalidRange(format!(
            "alpha {alpha} observes no frame of `{}` ({t} frames)",
            v.video_id
        )));
    }
    if observed_len >= t {
        return Err(Error::InvalidRange(format!(
            "alpha {alpha} leaves no future for `{}`",
            v.video_id
        )));
    }
    let rows: Vec<Vec<f64>> = (0..observed_len)
        .map(|i| v.features.row(i).to_vec())
        .collect();
    let observed = ObservedFeatures::new(
        Matrix::from_rows(&rows)?,
        Some(v.frame_labels[..observed_len].to_vec()),
    )?;
    let future_segments = run_lengths(&v.frame_labels[observed_len..])
        .into_iter()
        .map(|(c, _, n)| (c, n))
        .collect();
    let horizon_frames = t - observed_len;
    let window_frames = window.map(|w| fraction_of(t, w.beta).min(horizon_frames));
    Ok(ObservationSplit {
        observed,
        future_segments,
        horizon_frames,
        window_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labels: &[usize]) -> VideoRecord {
        let features = Matrix::from_vec(
            labels.len(),
            2,
            (0..labels.len() * 2).map(|i| i as f64 * 0.25).collect(),
        )
        .unwrap();
        VideoRecord {
            video_id: "v".into(),
            frame_labels: labels.to_vec(),
            features,
            split: "train".into(),
        }
    }

    #[test]
    fn default_profile_is_valid_and_probabilities_sum() {
        for amb in [0.0, 0.3, 0.5] {
            let g = GrammarSpec::default_profile(amb);
            g.validate().unwrap();
            let total: f64 = g.expansions().iter().map(|e| e.probability).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((g.branch_probs(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for e in g.expansions() {
                assert!(e.actions.windows(2).all(|w| w[0] != w[1]));
            }
        }
    }

    #[test]
    fn unambiguous_grammar_fixes_action_order() {
        let g = GrammarSpec::default_profile(0.0);
        let videos = generate_dataset(&g, 200, 9).unwrap();
        let mut by_first: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        let mut lengths = BTreeSet::new();
        for v in &videos {
            let seq: Vec<usize> = v.segments().iter().map(|s| s.0).collect();
            lengths.insert(v.len());
            let prev = by_first.entry(seq[0]).or_insert_with(|| seq.clone());
            assert_eq!(*prev, seq);
        }
        assert!(lengths.len() > 1, "durations should vary");
    }

    #[test]
    fn branch_frequency_matches_ambiguity() {
        let g = GrammarSpec::default_profile(0.5);
        let n = 10_000;
        let mut r = rng::seeded(1);
        let second = (0..n)
            .filter(|_| g.sample_expansion(&mut r).1[0] == 1)
            .count() as f64
            / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((second - 0.5).abs() < 3.0 * sigma, "{second}");
    }

    #[test]
    fn noiseless_features_equal_prototypes() {
        let mut g = GrammarSpec::default_profile(0.0);
        g.noise_sigma = 0.0;
        let v = &generate_dataset(&g, 1, 4).unwrap()[0];
        let protos = g.prototypes(4);
        for (t, &c) in v.frame_labels.iter().enumerate() {
            assert_eq!(v.features.row(t), protos.row(c));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let g = GrammarSpec::default_profile(0.5);
        assert_eq!(
            generate_dataset(&g, 5, 3).unwrap(),
            generate_dataset(&g, 5, 3).unwrap()
        );
        assert_ne!(
            generate_dataset(&g, 5, 3).unwrap(),
            generate_dataset(&g, 5, 4).unwrap()
        );
    }

    #[test]
    fn continuation_oracle() {
        let g = GrammarSpec::default_profile(0.5);
        let c = g.continuations(&[0, 1]);
        assert_eq!(c.len(), 2);
        assert!((c[0].0 - 0.5).abs() < 1e-12);
        assert_eq!(c[0].1, vec![1, 2, 4, 10, 5]);
        assert_eq!(c[1].1, vec![1, 3, 11, 10, 5]);
        let g0 = GrammarSpec::default_profile(0.0);
        let c = g0.continuations(&[0]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].0, 1.0);
    }

    #[test]
    fn subsample_keeps_every_stride_frame() {
        let v = record(&[0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(v.subsample(1), v);
        let s = v.subsample(3);
        assert_eq!(s.len(), 4);
        assert_eq!(s.frame_labels, vec![0, 1, 2, 2]);
        assert_eq!(s.features.row(3), v.features.row(9));
    }

    #[test]
    fn feature_codec_round_trip_and_text_fallback() {
        let m = Matrix::from_vec(3, 2, vec![0.5, -1.25, 2.0, 3.5, 0.0, 1e3]).unwrap();
        let bytes = encode_features(&m);
        assert_eq!(&bytes[..16], b"      2       3\n");
        assert_eq!(decode_features(&bytes, Path::new("x")).unwrap(), m);
        let text = "0.5 -1.25\n2 3.5\n0 1000\n";
        assert_eq!(decode_features(text.as_bytes(), Path::new("x")).unwrap(), m);
        assert!(decode_features(b"1 2\n3\n", Path::new("x")).is_err());
    }

    #[test]
    fn split_inside_a_segment_keeps_partial_duration() {
        // segments: 0 x4, 1 x4, 2 x2 ; alpha 0.3 -> 3 observed frames
        let v = record(&[0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        let s = split_observation(&v, 0.3, None).unwrap();
        assert_eq!(s.observed.len(), 3);
        assert_eq!(s.future_segments, vec![(0, 1), (1, 4), (2, 2)]);
        assert_eq!(s.horizon_frames, 7);
        let rel = s.relative_segments();
        assert!((rel[0].1 - 1.0 / 7.0).abs() < 1e-15);
        assert!((rel.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_on_a_boundary_starts_with_next_segment() {
        let v = record(&[0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        let s = split_observation(&v, 0.4, Some(&EvalWindow::new(0.4, 0.5).unwrap())).unwrap();
        assert_eq!(s.future_segments, vec![(1, 4), (2, 2)]);
        assert_eq!(s.window_frames, Some(5));
        assert_eq!(s.future_labels(), vec![1, 2]);
        assert!(split_observation(&v, 0.05, None).is_err());
        assert!(split_observation(&v, 1.0, None).is_err());
    }

    #[test]
    fn future_round_trips_when_it_fits() {
        let g = GrammarSpec::default_profile(0.5);
        for v in generate_dataset(&g, 20, 2).unwrap() {
            for alpha in [0.2, 0.3, 0.5] {
                let s = split_observation(&v, alpha, None).unwrap();
                let seq = s.future_sequence(8, 12);
                // Expanding relative durations over the horizon restores the labels.
                let mut labels = Vec::new();
                for (&c, &d) in seq.classes.iter().zip(&seq.durations) {
                    if c != 12 {
                        let n = (d * s.horizon_frames as f64).round() as usize;
                        labels.extend(std::iter::repeat_n(c, n));
                    }
                }
                assert_eq!(labels, v.frame_labels[s.observed.len()..]);
            }
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrammarSpec::default_profile(0.5);
        let videos = generate_dataset(&g, 3, 8).unwrap();
        write_dataset(dir.path(), &g.vocabulary, &videos).unwrap();
        let vocab = ActionVocabulary::load(&dir.path().join("mapping.txt")).unwrap();
        assert_eq!(vocab, g.vocabulary);
        let loaded = load_manifest(&dir.path().join("manifest.tsv"), &vocab, 1).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&videos) {
            assert_eq!(a.frame_labels, b.frame_labels);
            // f32 storage
            let err = a.features.zip_map(&b.features, |x, y| (x - y).abs());
            assert!(err.as_slice().iter().all(|&e| e < 1e-6));
        }
        // A reloaded file re-encodes to identical bytes.
        let again = load_manifest(&dir.path().join("manifest.tsv"), &vocab, 1).unwrap();
        assert_eq!(again, loaded);

        let (v2, bf) = load_breakfast_style(
            &dir.path().join("labels"),
            &dir.path().join("features"),
            &dir.path().join("mapping.txt"),
            3,
        )
        .unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(bf[0].len(), videos[0].len().div_ceil(3));
    }

    #[test]
    fn loader_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("l")).unwrap();
        fs::create_dir_all(dir.path().join("f")).unwrap();
        fs::write(dir.path().join("map.txt"), "0 a\n1 b\n").unwrap();
        fs::write(dir.path().join("l/v1.txt"), "a\nb\nzzz\n").unwrap();
        fs::write(dir.path().join("f/v1.txt"), "1\n2\n3\n").unwrap();
        let err = load_breakfast_style(
            &dir.path().join("l"),
            &dir.path().join("f"),
            &dir.path().join("map.txt"),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("v1.txt"), "{err}");
        assert!(err.to_string().contains("zzz"));

        fs::write(dir.path().join("l/v1.txt"), "a\nb\nb\nb\nb\nb\n").unwrap();
        let err = load_breakfast_style(
            &dir.path().join("l"),
            &dir.path().join("f"),
            &dir.path().join("map.txt"),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("stride tolerance"), "{err}");
    }

    #[test]
    fn multilabel_manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ml.tsv");
        fs::write(&p, "v1\t3 5 7\nv2\t\n").unwrap();
        let m = load_multilabel_manifest(&p).unwrap();
        assert_eq!(m[0], ("v1".to_string(), vec![3, 5, 7]));
        assert!(m[1].1.is_empty());
    }
}
