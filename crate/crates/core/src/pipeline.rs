//! Dataset-level anticipation: split each video, run the reverse process and
//! line predictions up with the scored window.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::data::{generate_splits, split_observation, GrammarSpec, VideoRecord};
use crate::error::Result;
use crate::eval::{EvalWindow, WindowTruth};
use crate::infer::{anticipate, AnticipateOptions, AnticipationResult};
use crate::model::Model;

#[derive(Clone, Debug)]
pub struct VideoPrediction {
    pub video_id: String,
    pub observed_len: usize,
    pub horizon_frames: usize,
    /// Ground-truth frames inside the scored window.
    pub truth: Vec<usize>,
    /// Ground-truth future classes, for multi-label scoring.
    pub future_classes: Vec<usize>,
    pub results: Vec<AnticipationResult>,
}

impl VideoPrediction {
    pub fn window_truth(&self) -> WindowTruth {
        WindowTruth {
            video_id: self.video_id.clone(),
            frames: self.truth.clone(),
        }
    }

    /// Predicted frames of sample `j` clipped to the window.
    pub fn window_pred(&self, j: usize) -> Vec<usize> {
        let f = &self.results[j].frame_labels;
        f[..self.truth.len().min(f.len())].to_vec()
    }
}

/// The grammar and raw-rate train/test videos described by `cfg.data`,
/// seeded by `cfg.seed`.
pub fn synthetic_dataset(
    cfg: &RunConfig,
) -> Result<(GrammarSpec, Vec<VideoRecord>, Vec<VideoRecord>)> {
    let d = &cfg.data;
    let mut spec = GrammarSpec::default_profile(d.ambiguity);
    spec.feature_dim = d.feature_dim;
    spec.noise_sigma = d.noise_sigma;
    let (train, test) = generate_splits(&spec, d.train_videos, d.test_videos, cfg.seed)?;
    Ok((spec, train, test))
}

/// Predicts the full remaining horizon for every video. `template` supplies
/// mode, step count, sample count and seed; the seed is offset per video.
pub fn predict_dataset(
    model: &Model,
    videos: &[VideoRecord],
    window: &EvalWindow,
    template: &AnticipateOptions,
) -> Result<Vec<VideoPrediction>> {
    let mut out = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let split = split_observation(v, window.alpha, Some(window))?;
        let opts = AnticipateOptions {
            horizon_frames: split.horizon_frames,
            seed: template.seed.wrapping_add((i as u64) << 20),
            ..template.clone()
        };
        let results = anticipate(model, &split.observed, &opts)?;
        let l = split.observed.len();
        let w = split.window_frames.unwrap_or(split.horizon_frames);
        out.push(VideoPrediction {
            video_id: v.video_id.clone(),
            observed_len: l,
            horizon_frames: split.horizon_frames,
            truth: v.frame_labels[l..l + w].to_vec(),
            future_classes: split.future_labels(),
            results,
        });
    }
    Ok(out)
}

pub fn truths(preds: &[VideoPrediction]) -> Vec<WindowTruth> {
    preds.iter().map(VideoPrediction::window_truth).collect()
}

/// Sample `j` of every video, keyed by id.
pub fn sample_map(preds: &[VideoPrediction], j: usize) -> BTreeMap<String, Vec<usize>> {
    preds
        .iter()
        .map(|p| (p.video_id.clone(), p.window_pred(j)))
        .collect()
}

/// The first `m` samples of every video, keyed by id.
pub fn samples_map(preds: &[VideoPrediction], m: usize) -> BTreeMap<String, Vec<Vec<usize>>> {
    preds
        .iter()
        .map(|p| {
            let k = m.min(p.results.len());
            (
                p.video_id.clone(),
                (0..k).map(|j| p.window_pred(j)).collect(),
            )
        })
        .collect()
}
