//! Noise schedules, the forward process, velocity parameterization, and
//! ancestral DDPM sampling. Step indices are 1-based: `t` in `1..=T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::util::standard_normal_vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear in sqrt(beta), then squared.
    ScaledLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub spec: ScheduleSpec,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    ensure_arg!(steps >= 1, "schedule needs at least one step");
    ensure_arg!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
    );
    let frac = |i: usize| {
        if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(i)).powi(2)
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule {
        spec: ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            kind,
        },
        betas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure_arg!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        Ok(())
    }

    /// Variance of q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))
    }

    /// Uniform random step in `1..=T`.
    pub fn sample_step(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(1..=self.steps())
    }
}

fn same_len(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    ensure_arg!(
        a.len() == b.len(),
        "{what}: operand lengths differ ({} vs {})",
        a.len(),
        b.len()
    );
    Ok(())
}

/// x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε
pub fn forward_diffuse(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    s: &DiffusionSchedule,
) -> Result<Vec<f32>> {
    s.check_t(t)?;
    same_len(x0, eps, "forward_diffuse")?;
    let ab = s.alpha_bar(t);
    Ok(mix(x0, eps, ab.sqrt(), (1.0 - ab).sqrt()))
}

/// v = √ᾱ_t ε − √(1−ᾱ_t) x0
pub fn velocity_target(
    x0: &[f32],
    eps: &[f32],
    t: usize,
    s: &DiffusionSchedule,
) -> Result<Vec<f32>> {
    s.check_t(t)?;
    same_len(x0, eps, "velocity_target")?;
    let ab = s.alpha_bar(t);
    Ok(mix(eps, x0, ab.sqrt(), -(1.0 - ab).sqrt()))
}

/// x0 = √ᾱ_t x_t − √(1−ᾱ_t) v
pub fn recover_x0(x_t: &[f32], v: &[f32], t: usize, s: &DiffusionSchedule) -> Result<Vec<f32>> {
    s.check_t(t)?;
    same_len(x_t, v, "recover_x0")?;
    let ab = s.alpha_bar(t);
    Ok(mix(x_t, v, ab.sqrt(), -(1.0 - ab).sqrt()))
}

fn mix(a: &[f32], b: &[f32], ca: f64, cb: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect()
}

/// One ancestral step from `x_t` to `x_{t-1}` given the network output.
/// `z` is the fresh Gaussian draw; it is ignored at `t = 1`.
pub fn ddpm_step(
    x_t: &[f32],
    model_out: &[f32],
    t: usize,
    prediction: Prediction,
    z: &[f32],
    s: &DiffusionSchedule,
) -> Result<Vec<f32>> {
    ddpm_step_clipped(x_t, model_out, t, prediction, z, s, None)
}

/// Predicted clean sample implied by the network output at step `t`.
pub fn predict_x0(
    x_t: &[f32],
    model_out: &[f32],
    t: usize,
    prediction: Prediction,
    s: &DiffusionSchedule,
) -> Result<Vec<f32>> {
    match prediction {
        Prediction::Epsilon => {
            s.check_t(t)?;
            same_len(x_t, model_out, "predict_x0")?;
            let ab = s.alpha_bar(t);
            Ok(mix(
                x_t,
                model_out,
                1.0 / ab.sqrt(),
                -((1.0 - ab) / ab).sqrt(),
            ))
        }
        Prediction::Velocity => recover_x0(x_t, model_out, t, s),
    }
}

/// `ddpm_step` with the predicted clean sample clamped to `x0_range` before
/// the posterior mean is formed. The state itself is never clamped.
pub fn ddpm_step_clipped(
    x_t: &[f32],
    model_out: &[f32],
    t: usize,
    prediction: Prediction,
    z: &[f32],
    s: &DiffusionSchedule,
    x0_range: Option<(f32, f32)>,
) -> Result<Vec<f32>> {
    s.check_t(t)?;
    same_len(x_t, model_out, "ddpm_step")?;
    let beta = s.beta(t);
    let ab = s.alpha_bar(t);
    let mut mean = match (prediction, x0_range) {
        (Prediction::Epsilon, None) => {
            let c = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / (1.0 - beta).sqrt();
            x_t.iter()
                .zip(model_out)
                .map(|(&x, &e)| (inv * (x as f64 - c * e as f64)) as f32)
                .collect::<Vec<f32>>()
        }
        _ => {
            let mut x0 = predict_x0(x_t, model_out, t, prediction, s)?;
            if let Some((lo, hi)) = x0_range {
                x0.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            }
            let abp = s.alpha_bar_prev(t);
            let c1 = abp.sqrt() * beta / (1.0 - ab);
            let c2 = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
            mix(&x0, x_t, c1, c2)
        }
    };
    if t > 1 {
        same_len(x_t, z, "ddpm_step noise")?;
        let sigma = s.posterior_variance(t).sqrt();
        mean.iter_mut()
            .zip(z)
            .for_each(|(m, &n)| *m = (*m as f64 + sigma * n as f64) as f32);
    }
    Ok(mean)
}

/// Full reverse chain from pure noise. `model(x_t, t)` returns the network
/// output for the current state. Noise is drawn from `rng` in a fixed order:
/// the initial state first, then one draw per step for `t > 1`. With
/// `x0_range`, every step clamps its clean-sample estimate (see
/// `ddpm_step_clipped`).
pub fn sample_chain(
    len: usize,
    s: &DiffusionSchedule,
    prediction: Prediction,
    x0_range: Option<(f32, f32)>,
    rng: &mut impl Rng,
    mut model: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    let mut x = standard_normal_vec(rng, len);
    for t in (1..=s.steps()).rev() {
        let out = model(&x, t)?;
        let z = if t > 1 {
            standard_normal_vec(rng, len)
        } else {
            Vec::new()
        };
        x = ddpm_step_clipped(&x, &out, t, prediction, &z, s, x0_range)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use proptest::prelude::*;

    fn paper_linear() -> DiffusionSchedule {
        make_schedule(1000, 0.0015, 0.0205, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5]);
    }

    #[test]
    fn terminal_alpha_bar_by_direct_product() {
        let s = paper_linear();
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (0.0015 + 0.019 * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(prod < 0.01);
    }

    #[test]
    fn betas_monotone_and_alpha_bars_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = make_schedule(200, 0.001, 0.03, kind).unwrap();
            assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
            assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
            assert!((s.betas[0] - 0.001).abs() < 1e-15 && (s.betas[199] - 0.03).abs() < 1e-12);
        }
        let s = make_schedule(3, 0.01, 0.09, ScheduleKind::ScaledLinear).unwrap();
        assert!((s.betas[1] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = paper_linear();
        let x0 = [0.5f32, -1.0, 0.25];
        let xt = forward_diffuse(&x0, 10, &[0.0; 3], &s).unwrap();
        let k = s.alpha_bar(10).sqrt();
        for (a, b) in xt.iter().zip(x0) {
            assert!((*a as f64 - k * b as f64).abs() < 1e-7);
        }
        assert!(forward_diffuse(&x0, 0, &[0.0; 3], &s).is_err());
        assert!(forward_diffuse(&x0, 1, &[0.0; 2], &s).is_err());
    }

    #[test]
    fn variance_preserved() {
        let s = paper_linear();
        let mut rng = rng_for(0, 0);
        for t in [1, 250, 500, 1000] {
            let x0 = standard_normal_vec(&mut rng, 10_000);
            let e = standard_normal_vec(&mut rng, 10_000);
            let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
            let m = xt.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
            let var = xt.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 1e4;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn ddpm_step_forms_agree() {
        // With a perfect network both parameterizations give the same mean.
        let s = make_schedule(50, 0.001, 0.2, ScheduleKind::ScaledLinear).unwrap();
        let mut rng = rng_for(1, 0);
        let x0 = standard_normal_vec(&mut rng, 64);
        let e = standard_normal_vec(&mut rng, 64);
        for t in [1, 2, 25, 50] {
            let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
            let v = velocity_target(&x0, &e, t, &s).unwrap();
            let z = vec![0.0; 64];
            let a = ddpm_step(&xt, &e, t, Prediction::Epsilon, &z, &s).unwrap();
            let b = ddpm_step(&xt, &v, t, Prediction::Velocity, &z, &s).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-4, "t={t}: {p} vs {q}");
            }
        }
        // At t = 1 the exact noise recovers x0.
        let xt = forward_diffuse(&x0, 1, &e, &s).unwrap();
        let x = ddpm_step(&xt, &e, 1, Prediction::Epsilon, &[], &s).unwrap();
        for (p, q) in x.iter().zip(&x0) {
            assert!((p - q).abs() < 1e-4);
        }
    }

    #[test]
    fn chain_is_deterministic() {
        let s = make_schedule(10, 0.01, 0.3, ScheduleKind::Linear).unwrap();
        let run = || {
            let mut rng = rng_for(5, 1);
            sample_chain(32, &s, Prediction::Velocity, None, &mut rng, |x, _| {
                Ok(vec![0.1; x.len()])
            })
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn v_round_trip(seed in 0u64..1000, t in 1usize..=1000) {
            let s = paper_linear();
            let mut rng = rng_for(seed, 0);
            let x0 = standard_normal_vec(&mut rng, 128);
            let e = standard_normal_vec(&mut rng, 128);
            let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
            let v = velocity_target(&x0, &e, t, &s).unwrap();
            let back = recover_x0(&xt, &v, t, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
