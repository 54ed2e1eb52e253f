//! Evaluation protocols: MoC over observation/prediction windows, multi-label
//! mAP, diversity protocols over sampled futures, and segmentation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use crate::data::fraction_of;
use crate::error::{Error, Result};

/// Observe the first `alpha` of a video and score the next `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalWindow {
    pub alpha: f64,
    pub beta: f64,
}

impl EvalWindow {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidRange(format!("alpha {alpha} outside (0, 1)")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidRange(format!("beta {beta} outside (0, 1)")));
        }
        if alpha + beta > 1.0 + 1e-12 {
            return Err(Error::InvalidRange(format!(
                "alpha + beta = {} exceeds 1",
                alpha + beta
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Frame range scored for a video of `t` frames.
    pub fn range(&self, t: usize) -> Result<Range<usize>> {
        let start = fraction_of(t, self.alpha);
        let end = (start + fraction_of(t, self.beta)).min(t);
        if start == 0 || end <= start {
            return Err(Error::InvalidRange(format!(
                "window ({}, {}) is empty for a {t}-frame video",
                self.alpha, self.beta
            )));
        }
        Ok(start..end)
    }
}

/// Pooled per-class frame tallies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassTally {
    /// class -> (correct frames, ground-truth frames)
    pub counts: BTreeMap<usize, (usize, usize)>,
}

impl ClassTally {
    /// Adds one video. Predictions shorter than the ground truth count the
    /// uncovered frames as wrong.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        for (i, &g) in gt.iter().enumerate() {
            let e = self.counts.entry(g).or_insert((0, 0));
            e.1 += 1;
            if pred.get(i) == Some(&g) {
                e.0 += 1;
            }
        }
    }

    pub fn per_class(&self) -> BTreeMap<usize, f64> {
        self.counts
            .iter()
            .map(|(&c, &(ok, n))| (c, ok as f64 / n as f64))
            .collect()
    }

    /// Mean of per-class accuracies over classes present in the ground truth.
    pub fn moc(&self) -> Result<f64> {
        if self.counts.is_empty() {
            return Err(Error::UndefinedMetric("no ground-truth frames".into()));
        }
        let pc = self.per_class();
        Ok(pc.values().sum::<f64>() / pc.len() as f64)
    }
}

/// One video's ground truth inside the scoring window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTruth {
    pub video_id: String,
    pub frames: Vec<usize>,
}

/// MoC over a dataset. `preds` maps video ids to predicted frames starting at
/// the window's first frame.
pub fn moc(preds: &BTreeMap<String, Vec<usize>>, gt: &[WindowTruth]) -> Result<ClassTally> {
    let mut tally = ClassTally::default();
    for v in gt {
        let p = preds
            .get(&v.video_id)
            .ok_or_else(|| Error::MissingPrediction(v.video_id.clone()))?;
        tally.add(p, &v.frames);
    }
    tally.moc()?;
    Ok(tally)
}

fn correct_frames(pred: &[usize], gt: &[usize]) -> usize {
    gt.iter().zip(pred).filter(|(g, p)| g == p).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiversityProtocol {
    Averaged,
    Top1,
}

/// Scores `m` sampled futures per video. `samples[video_id][j]` is sample `j`.
/// Every video must carry the same number of samples.
pub fn diverse_eval(
    samples: &BTreeMap<String, Vec<Vec<usize>>>,
    gt: &[WindowTruth],
    protocol: DiversityProtocol,
) -> Result<f64> {
    let mut m = None;
    for v in gt {
        let s = samples
            .get(&v.video_id)
            .ok_or_else(|| Error::MissingPrediction(v.video_id.clone()))?;
        if s.is_empty() || m.is_some_and(|m| m != s.len()) {
            return Err(Error::Shape(format!(
                "video `{}` has {} samples, expected {}",
                v.video_id,
                s.len(),
                m.unwrap_or(1)
            )));
        }
        m = Some(s.len());
    }
    let m = m.ok_or_else(|| Error::UndefinedMetric("no videos".into()))?;
    match protocol {
        DiversityProtocol::Averaged => {
            let mut total = 0.0;
            for j in 0..m {
                let mut tally = ClassTally::default();
                for v in gt {
                    tally.add(&samples[&v.video_id][j], &v.frames);
                }
                total += tally.moc()?;
            }
            Ok(total / m as f64)
        }
        DiversityProtocol::Top1 => {
            let mut tally = ClassTally::default();
            for v in gt {
                let s = &samples[&v.video_id];
                tally.add(&s[top1_index(s, &v.frames)], &v.frames);
            }
            tally.moc()
        }
    }
}

/// Sample with the most correct frames; the lowest index wins ties.
pub fn top1_index(samples: &[Vec<usize>], gt: &[usize]) -> usize {
    let mut best = 0;
    let mut best_count = correct_frames(&samples[0], gt);
    for (j, s) in samples.iter().enumerate().skip(1) {
        let c = correct_frames(s, gt);
        if c > best_count {
            best = j;
            best_count = c;
        }
    }
    best
}

/// Average precision of a ranking; ties in score keep input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub all: f64,
    pub freq: Option<f64>,
    pub rare: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
}

/// Multi-label mAP. `scores[v][c]` ranks videos per class; `frequent[c]`
/// assigns class `c` to the frequent split. Classes without positives are
/// skipped.
pub fn map_multilabel(
    scores: &[Vec<f64>],
    gt_sets: &[Vec<usize>],
    frequent: &[bool],
) -> Result<MapReport> {
    if scores.len() != gt_sets.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} videos",
            scores.len(),
            gt_sets.len()
        )));
    }
    let c = frequent.len();
    if let Some(bad) = scores.iter().find(|s| s.len() != c) {
        return Err(Error::Shape(format!(
            "score row of {} for {c} classes",
            bad.len()
        )));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "label scores".into(),
            diagnostics: "scores must be finite".into(),
        });
    }
    let mut per_class = BTreeMap::new();
    for class in 0..c {
        let col: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let pos: Vec<bool> = gt_sets.iter().map(|g| g.contains(&class)).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            per_class.insert(class, ap);
        }
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has a positive video".into(),
        ));
    }
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = per_class
            .iter()
            .filter(|(&k, _)| keep(k))
            .map(|(_, &ap)| ap)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MapReport {
        all: mean(&|_| true).expect("nonempty"),
        freq: mean(&|k| frequent[k]),
        rare: mean(&|k| !frequent[k]),
        per_class,
    })
}

/// Frequent classes are those whose training count is strictly above the
/// median count.
pub fn freq_split_by_median(counts: &[usize]) -> Vec<bool> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    counts.iter().map(|&k| k as f64 > median).collect()
}

/// Segmentation scores; `edit` and `f1` are on a 0-100 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub acc: f64,
    pub edit: f64,
    /// F1 at IoU 0.10, 0.25, 0.50.
    pub f1: [f64; 3],
}

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

fn segments(frames: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &c) in frames.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.0 == c => s.2 = i + 1,
            _ => out.push((c, i, i + 1)),
        }
    }
    out
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn f1_at(pred: &[(usize, usize, usize)], gt: &[(usize, usize, usize)], threshold: f64) -> f64 {
    let mut hit = vec![false; gt.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(c, s, e) in pred {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, &(gc, gs, ge)) in gt.iter().enumerate() {
            if gc != c {
                continue;
            }
            let inter = e.min(ge).saturating_sub(s.max(gs)) as f64;
            let union = (e.max(ge) - s.min(gs)) as f64;
            let iou = inter / union;
            if iou > best_iou {
                best_iou = iou;
                best = Some(j);
            }
        }
        match best {
            Some(j) if best_iou >= threshold && !hit[j] => {
                hit[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = gt.len() - tp;
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    200.0 * precision * recall / (precision + recall)
}

/// Frame accuracy, edit score and F1@{10,25,50} of a segmentation.
pub fn seg_metrics(pred: &[usize], gt: &[usize]) -> SegMetrics {
    if pred.is_empty() || gt.is_empty() {
        return SegMetrics {
            acc: 0.0,
            edit: 0.0,
            f1: [0.0; 3],
        };
    }
    let acc = correct_frames(pred, gt) as f64 / gt.len() as f64;
    let ps = segments(pred);
    let gs = segments(gt);
    let pl: Vec<usize> = ps.iter().map(|s| s.0).collect();
    let gl: Vec<usize> = gs.iter().map(|s| s.0).collect();
    let edit = (1.0 - levenshtein(&pl, &gl) as f64 / pl.len().max(gl.len()) as f64) * 100.0;
    let f1 = F1_THRESHOLDS.map(|k| f1_at(&ps, &gs, k));
    SegMetrics { acc, edit, f1 }
}

/// Key/value report grouped into named sections, with `#` header lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub header: Vec<String>,
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let idx = match self.sections.iter().position(|(s, _)| s == section) {
            Some(i) => i,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        self.sections[idx].1.push((key.to_string(), value.into()));
    }

    pub fn put_f64(&mut self, section: &str, key: &str, value: f64) {
        self.put(section, key, format!("{value:.6}"));
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Option<f64> {
        self.get(section, key)?.parse().ok()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            let _ = writeln!(out, "# {h}");
        }
        for (name, entries) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k}={v}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::new();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                r.header.push(h.trim().to_string());
            } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.to_string());
                r.sections.push((name.to_string(), Vec::new()));
            } else if let Some((k, v)) = line.split_once('=') {
                let s = section.as_ref().ok_or_else(|| {
                    Error::data("report", format!("line {}: entry before section", i + 1))
                })?;
                r.put(s, k.trim(), v.trim());
            } else {
                return Err(Error::data(
                    "report",
                    format!("line {}: unparseable", i + 1),
                ));
            }
        }
        Ok(r)
    }

    /// Aligned plain-text rendering for terminals.
    pub fn human_table(&self) -> String {
        let width = self
            .sections
            .iter()
            .flat_map(|(s, e)| e.iter().map(move |(k, _)| s.len() + k.len() + 1))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        for (s, entries) in &self.sections {
            for (k, v) in entries {
                let _ = writeln!(out, "{:<width$}  {v}", format!("{s}.{k}"));
            }
        }
        out
    }
}

/// Comma-separated text with a header row.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(id: &str, frames: &[usize]) -> WindowTruth {
        WindowTruth {
            video_id: id.into(),
            frames: frames.to_vec(),
        }
    }

    #[test]
    fn window_validation_and_range() {
        assert!(EvalWindow::new(0.6, 0.5).is_err());
        assert!(EvalWindow::new(0.0, 0.5).is_err());
        let w = EvalWindow::new(0.3, 0.5).unwrap();
        assert_eq!(w.range(10).unwrap(), 3..8);
        assert!(w.range(2).is_err());
    }

    #[test]
    fn moc_perfect_and_per_class_balance() {
        let gt = vec![truth("a", &[0, 0, 0, 0, 0, 0, 0, 0, 0, 1])];
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), gt[0].frames.clone());
        assert_eq!(moc(&p, &gt).unwrap().moc().unwrap(), 1.0);
        // class 0 right everywhere, class 1 wrong: 0.5 despite 90% accuracy
        p.insert("a".to_string(), vec![0; 10]);
        assert_eq!(moc(&p, &gt).unwrap().moc().unwrap(), 0.5);
        assert!(matches!(
            moc(&BTreeMap::new(), &gt),
            Err(Error::MissingPrediction(_))
        ));
    }

    #[test]
    fn ap_hand_cases() {
        let s = [0.9, 0.1, 0.5];
        assert_eq!(average_precision(&s, &[true, false, true]), Some(1.0));
        let ap = average_precision(&s, &[true, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&s, &[false; 3]), None);
    }

    #[test]
    fn map_perfect_and_undefined() {
        let scores = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let gt = vec![vec![0], vec![1]];
        let r = map_multilabel(&scores, &gt, &[true, false]).unwrap();
        assert_eq!((r.all, r.freq, r.rare), (1.0, Some(1.0), Some(1.0)));
        assert!(matches!(
            map_multilabel(&scores, &[vec![], vec![]], &[true, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn median_split() {
        assert_eq!(
            freq_split_by_median(&[1, 5, 3, 9]),
            vec![false, true, false, true]
        );
        assert_eq!(freq_split_by_median(&[2, 2, 2]), vec![false; 3]);
    }

    #[test]
    fn diversity_protocols() {
        let gt = vec![truth("a", &[0, 0, 1, 1])];
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), vec![vec![0, 0, 0, 0]]);
        let one = diverse_eval(&s, &gt, DiversityProtocol::Averaged).unwrap();
        assert_eq!(one, diverse_eval(&s, &gt, DiversityProtocol::Top1).unwrap());
        assert_eq!(one, 0.5);
        s.get_mut("a").unwrap().push(vec![0, 0, 1, 1]);
        assert_eq!(diverse_eval(&s, &gt, DiversityProtocol::Top1).unwrap(), 1.0);
        assert_eq!(
            diverse_eval(&s, &gt, DiversityProtocol::Averaged).unwrap(),
            0.75
        );
    }

    #[test]
    fn top1_ties_pick_lowest_index() {
        let gt = [0, 1];
        assert_eq!(top1_index(&[vec![0, 0], vec![1, 1], vec![0, 1]], &gt), 2);
        assert_eq!(top1_index(&[vec![0, 0], vec![1, 1]], &gt), 0);
    }

    #[test]
    fn segmentation_identity_and_empty() {
        let gt = [0, 0, 1, 1, 1, 2];
        let m = seg_metrics(&gt, &gt);
        assert_eq!((m.acc, m.edit, m.f1), (1.0, 100.0, [100.0; 3]));
        let z = seg_metrics(&[], &gt);
        assert_eq!((z.acc, z.edit, z.f1), (0.0, 0.0, [0.0; 3]));
    }

    #[test]
    fn spurious_frame_hurts_f1_not_acc() {
        let gt: Vec<usize> = [vec![0; 50], vec![1; 50]].concat();
        let mut pred = gt.clone();
        pred[25] = 2;
        let m = seg_metrics(&pred, &gt);
        assert!((m.acc - 0.99).abs() < 1e-12);
        // segments: 0, 2, 0, 1 vs 0, 1 -> tp 2, fp 2, fn 0
        let f1 = 200.0 * 0.5 * 1.0 / 1.5;
        assert!((m.f1[0] - f1).abs() < 1e-9, "{:?}", m.f1);
        assert!((m.edit - 50.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricReport::new();
        r.header.push("model.layers=2".into());
        r.put_f64("moc", "value", 0.5);
        r.put("moc", "alpha", "0.3");
        r.put_f64("seg", "acc", 1.0);
        let back = MetricReport::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("moc", "value"), Some(0.5));
        assert!(r.human_table().contains("moc.value"));
    }
}
