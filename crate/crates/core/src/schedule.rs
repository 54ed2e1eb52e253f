//! Noise schedules and the closed-form pieces of the diffusion chain.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β interpolated linearly between the two bounds.
    Linear,
    /// `ᾱ(t) = 1 - sqrt(t + 1e-4)`, the profile used for text embeddings.
    /// The derived β values are clamped into the configured bounds.
    Sqrt,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sqrt => "sqrt",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            other => Err(Error::config(
                "schedule.kind",
                format!("unknown schedule `{other}` (expected linear|sqrt)"),
            )),
        }
    }
}

/// Precomputed β, α and ᾱ tables. Index `s - 1` holds the value for step `s`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange(
                "schedule needs at least one step".into(),
            ));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Sqrt => {
                let abar = |t: f64| 1.0 - (t + 1e-4).sqrt();
                (0..steps)
                    .map(|i| {
                        let t0 = i as f64 / steps as f64;
                        let t1 = (i + 1) as f64 / steps as f64;
                        let b = 1.0 - abar(t1) / abar(t0);
                        // Past the point where ᾱ(t) turns negative the ratio is
                        // meaningless; treat it as maximal noise.
                        let b = if b.is_finite() && abar(t1) > 0.0 {
                            b
                        } else {
                            beta_max
                        };
                        b.clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_s for `1 <= s <= S`.
    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    /// ᾱ_s, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::StepOutOfRange {
                step: s,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Sample of `q(z_s | z_0)` by reparameterization:
    /// `sqrt(ᾱ_s)·z0 + sqrt(1-ᾱ_s)·noise`.
    pub fn forward_marginal(&self, z0: &LatentSeq, s: usize, noise: &Matrix) -> Result<LatentSeq> {
        self.check_step(s)?;
        check_same_shape(&z0.z, noise)?;
        let ab = self.alpha_bar(s);
        Ok(LatentSeq {
            z: combine(&z0.z, ab.sqrt(), noise, (1.0 - ab).sqrt()),
            step: s,
        })
    }

    /// One forward transition `q(z_s | z_{s-1})`.
    pub fn forward_step(&self, z_prev: &LatentSeq, s: usize, noise: &Matrix) -> Result<LatentSeq> {
        self.check_step(s)?;
        if z_prev.step + 1 != s {
            return Err(Error::StepOrder(format!(
                "forward_step to {s} from a latent at step {}",
                z_prev.step
            )));
        }
        check_same_shape(&z_prev.z, noise)?;
        let b = self.beta(s);
        Ok(LatentSeq {
            z: combine(&z_prev.z, (1.0 - b).sqrt(), noise, b.sqrt()),
            step: s,
        })
    }

    /// Builds the latent for the next (lower) step `s_prev` from the current
    /// latent `z_s` and the denoiser's clean estimate `z0_hat`.
    ///
    /// Stochastic mode applies the forward marginal with fresh `noise`.
    /// Deterministic mode reuses the noise implied by `z_s`
    /// (`ε̂ = (z_s - sqrt(ᾱ_s)·ẑ0) / sqrt(1-ᾱ_s)`) and ignores `noise`.
    pub fn renoise_from_z0hat(
        &self,
        z0_hat: &Matrix,
        z_s: &LatentSeq,
        s_prev: usize,
        noise: Option<&Matrix>,
        deterministic: bool,
    ) -> Result<LatentSeq> {
        self.check_step(s_prev)?;
        if s_prev >= z_s.step {
            return Err(Error::StepOrder(format!(
                "re-noising must move to a lower step: {} -> {s_prev}",
                z_s.step
            )));
        }
        check_same_shape(z0_hat, &z_s.z)?;
        let ab_prev = self.alpha_bar(s_prev);
        let eps = if deterministic {
            let ab = self.alpha_bar(z_s.step);
            let denom = (1.0 - ab).sqrt();
            if denom > 0.0 {
                combine(&z_s.z, 1.0 / denom, z0_hat, -ab.sqrt() / denom)
            } else {
                Matrix::zeros(z0_hat.rows(), z0_hat.cols())
            }
        } else {
            let noise = noise.ok_or_else(|| {
                Error::Shape("stochastic re-noising requires a noise matrix".into())
            })?;
            check_same_shape(z0_hat, noise)?;
            noise.clone()
        };
        Ok(LatentSeq {
            z: combine(z0_hat, ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt()),
            step: s_prev,
        })
    }
}

fn combine(a: &Matrix, ka: f64, b: &Matrix, kb: f64) -> Matrix {
    a.zip_map(b, |x, y| ka * x + kb * y)
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "expected {:?}, got {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// An `M x D'` latent together with the diffusion step it lives at.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub z: Matrix,
    pub step: usize,
}

impl LatentSeq {
    pub fn new(z: Matrix, step: usize) -> Self {
        Self { z, step }
    }

    pub fn slots(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }
}

/// Decreasing step indices visited by the reverse process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceTrajectory {
    steps: Vec<usize>,
}

impl InferenceTrajectory {
    /// Uniform stride `S / num_steps`, ending at step 1. When `S` is not a
    /// multiple of `num_steps` the unused steps sit at the noisy end.
    pub fn new(total_steps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > total_steps {
            return Err(Error::InvalidRange(format!(
                "inference steps must be in [1, {total_steps}], got {num_steps}"
            )));
        }
        let stride = total_steps / num_steps;
        let steps = (0..num_steps).rev().map(|i| 1 + i * stride).collect();
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    pub fn first(&self) -> usize {
        self.steps[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_linear_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        // ∏(1 - β) computed directly.
        let product: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!(product < 0.01);
        assert!((s.alpha_bar(1000) - product).abs() <= 1e-10 * product);
    }

    #[test]
    fn tiny_schedules_have_closed_forms() {
        let s = NoiseSchedule::new(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::new(3, ScheduleKind::Linear, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariants_hold_for_both_kinds() {
        for (kind, lo, hi) in [
            (ScheduleKind::Linear, 1e-4, 0.02),
            (ScheduleKind::Sqrt, 1e-4, 0.999),
        ] {
            let s = NoiseSchedule::new(1000, kind, lo, hi).unwrap();
            let mut running = 1.0;
            for i in 0..1000 {
                let b = s.betas()[i];
                assert!(b > 0.0 && b < 1.0, "{kind}: beta {b}");
                assert_eq!(s.alphas()[i], 1.0 - b);
                running *= s.alphas()[i];
                let rel = (s.alpha_bars()[i] - running).abs() / running;
                assert!(rel <= 1e-10);
                if i > 0 {
                    assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1], "{kind} at {i}");
                }
            }
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_marginal_edge_cases() {
        // β so small that 1 - β rounds to 1: ᾱ_s = 1 exactly.
        let flat = NoiseSchedule::new(5, ScheduleKind::Linear, 1e-300, 1e-300).unwrap();
        assert_eq!(flat.alpha_bar(5), 1.0);
        let z0 = LatentSeq::new(
            Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
            0,
        );
        let noise = Matrix::filled(2, 2, 7.0);
        assert_eq!(flat.forward_marginal(&z0, 3, &noise).unwrap().z, z0.z);

        let s = NoiseSchedule::new(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let out = s.forward_marginal(&z0, 40, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(out.z, z0.z.map(|v| v * s.alpha_bar(40).sqrt()));
        assert_eq!(out.step, 40);

        assert!(s.forward_marginal(&z0, 0, &noise).is_err());
        assert!(s.forward_marginal(&z0, 101, &noise).is_err());
        assert!(s.forward_marginal(&z0, 1, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn forward_step_linearity() {
        let s = NoiseSchedule::new(10, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        let zero = LatentSeq::new(Matrix::zeros(1, 3), 4);
        let e1 = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let out = s.forward_step(&zero, 5, &e1).unwrap();
        assert_eq!(out.z.as_slice(), &[s.beta(5).sqrt(), 0.0, 0.0]);
        assert!(s.forward_step(&zero, 6, &e1).is_err());

        let flat = NoiseSchedule::new(3, ScheduleKind::Linear, 1e-300, 1e-300).unwrap();
        let z = LatentSeq::new(Matrix::from_vec(1, 3, vec![0.3, 0.2, 0.1]).unwrap(), 0);
        assert_eq!(
            flat.forward_step(&z, 1, &Matrix::zeros(1, 3)).unwrap().z,
            z.z
        );
    }

    #[test]
    fn renoise_endpoints() {
        // β_1 ≈ 0 so ᾱ_1 = 1 while later steps are noisy.
        let s = NoiseSchedule::new(3, ScheduleKind::Linear, 1e-300, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
        let z0 = Matrix::from_vec(1, 2, vec![0.4, -1.2]).unwrap();
        let zs = s
            .forward_marginal(
                &LatentSeq::new(z0.clone(), 0),
                3,
                &Matrix::filled(1, 2, 0.8),
            )
            .unwrap();
        let det = s.renoise_from_z0hat(&z0, &zs, 1, None, true).unwrap();
        assert_eq!(det.z, z0);
        assert_eq!(det.step, 1);

        let sto = s
            .renoise_from_z0hat(&z0, &zs, 2, Some(&Matrix::zeros(1, 2)), false)
            .unwrap();
        assert_eq!(sto.z, z0.map(|v| v * s.alpha_bar(2).sqrt()));

        assert!(s.renoise_from_z0hat(&z0, &zs, 3, None, true).is_err());
        assert!(s.renoise_from_z0hat(&z0, &zs, 2, None, false).is_err());
    }

    #[test]
    fn deterministic_renoise_recovers_exact_noise() {
        let s = NoiseSchedule::new(50, ScheduleKind::Linear, 1e-4, 0.05).unwrap();
        let mut r = rng::seeded(3);
        let z0 = rng::gaussian(&mut r, 3, 4);
        let eps = rng::gaussian(&mut r, 3, 4);
        let zs = s
            .forward_marginal(&LatentSeq::new(z0.clone(), 0), 40, &eps)
            .unwrap();
        let det = s.renoise_from_z0hat(&z0, &zs, 10, None, true).unwrap();
        let expect = s
            .forward_marginal(&LatentSeq::new(z0, 0), 10, &eps)
            .unwrap();
        let err = det.z.zip_map(&expect.z, |a, b| (a - b).abs()).sum();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn trajectory_construction() {
        let t = InferenceTrajectory::new(1000, 100).unwrap();
        let expect: Vec<usize> = (0..100).map(|i| 991 - 10 * i).collect();
        assert_eq!(t.steps(), expect.as_slice());
        assert_eq!(
            InferenceTrajectory::new(10, 10).unwrap().steps(),
            &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
        );
        let t = InferenceTrajectory::new(1000, 25).unwrap();
        assert_eq!(t.count(), 25);
        assert!(t.steps().windows(2).all(|w| w[0] - w[1] == 40));
        assert_eq!(*t.steps().last().unwrap(), 1);
        assert!(InferenceTrajectory::new(10, 11).is_err());
        assert!(InferenceTrajectory::new(10, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn trajectories_are_strictly_decreasing(total in 1usize..3000, frac in 0.0f64..1.0) {
            let n = 1 + ((total - 1) as f64 * frac) as usize;
            let t = InferenceTrajectory::new(total, n).unwrap();
            proptest::prop_assert_eq!(t.count(), n);
            proptest::prop_assert_eq!(*t.steps().last().unwrap(), 1);
            proptest::prop_assert!(t.first() <= total);
            proptest::prop_assert!(t.steps().windows(2).all(|w| w[0] > w[1]));
        }
    }
}
