//! Browser bindings: noise-schedule curves, inference trajectories and a
//! synthetic video with its closed-form continuations.
//!
//! The plain functions are what the bindings call; they also run natively.

use diffant::data::{fraction_of, generate_dataset, GrammarSpec};
use diffant::schedule::{InferenceTrajectory, NoiseSchedule, ScheduleKind};
use wasm_bindgen::prelude::*;

/// `ᾱ_s` for `s = 0..=steps`.
pub fn alpha_bar_values(
    kind: &str,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<Vec<f64>, String> {
    let kind: ScheduleKind = kind.parse().map_err(|e: diffant::Error| e.to_string())?;
    let s = NoiseSchedule::new(steps, kind, beta_min, beta_max).map_err(|e| e.to_string())?;
    Ok((0..=steps).map(|i| s.alpha_bar(i)).collect())
}

pub fn trajectory_steps(total: usize, n: usize) -> Result<Vec<u32>, String> {
    let t = InferenceTrajectory::new(total, n).map_err(|e| e.to_string())?;
    Ok(t.steps().iter().map(|&s| s as u32).collect())
}

/// One sampled video at stride 3 plus every future the grammar allows after
/// observing the first `alpha` of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub names: Vec<String>,
    pub frames: Vec<u32>,
    pub observed: usize,
    /// `(probability, class ids)` per continuation.
    pub futures: Vec<(f64, Vec<u32>)>,
}

pub fn synth_timeline(ambiguity: f64, seed: u64, alpha: f64) -> Result<Timeline, String> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(format!("alpha {alpha} outside (0, 1)"));
    }
    let spec = GrammarSpec::default_profile(ambiguity);
    let video = generate_dataset(&spec, 1, seed)
        .map_err(|e| e.to_string())?
        .remove(0)
        .subsample(3);
    let observed = fraction_of(video.len(), alpha).max(1);
    let mut seen: Vec<usize> = Vec::new();
    for &c in &video.frame_labels[..observed] {
        if seen.last() != Some(&c) {
            seen.push(c);
        }
    }
    let futures = spec
        .continuations(&seen)
        .into_iter()
        .map(|(p, a)| (p, a.into_iter().map(|c| c as u32).collect()))
        .collect();
    Ok(Timeline {
        names: spec.vocabulary.names().to_vec(),
        frames: video.frame_labels.iter().map(|&c| c as u32).collect(),
        observed,
        futures,
    })
}

#[wasm_bindgen]
pub fn alpha_bar_curve(
    kind: &str,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<Vec<f64>, JsError> {
    alpha_bar_values(kind, steps, beta_min, beta_max).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn trajectory(total: usize, n: usize) -> Result<Vec<u32>, JsError> {
    trajectory_steps(total, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = Timeline)]
pub struct JsTimeline(Timeline);

#[wasm_bindgen(js_class = Timeline)]
impl JsTimeline {
    #[wasm_bindgen(getter)]
    pub fn names(&self) -> Vec<String> {
        self.0.names.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> Vec<u32> {
        self.0.frames.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn observed(&self) -> usize {
        self.0.observed
    }

    #[wasm_bindgen(js_name = futureCount, getter)]
    pub fn future_count(&self) -> usize {
        self.0.futures.len()
    }

    #[wasm_bindgen(js_name = futureProbability)]
    pub fn future_probability(&self, i: usize) -> f64 {
        self.0.futures.get(i).map_or(0.0, |f| f.0)
    }

    #[wasm_bindgen(js_name = futureActions)]
    pub fn future_actions(&self, i: usize) -> Vec<u32> {
        self.0
            .futures
            .get(i)
            .map(|f| f.1.clone())
            .unwrap_or_default()
    }
}

#[wasm_bindgen]
pub fn timeline(ambiguity: f64, seed: u64, alpha: f64) -> Result<JsTimeline, JsError> {
    synth_timeline(ambiguity, seed, alpha)
        .map(JsTimeline)
        .map_err(|e| JsError::new(&e))
}
