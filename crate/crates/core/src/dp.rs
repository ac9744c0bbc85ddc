//! Privatized gradient pipeline: per-example clipping (split or combined),
//! noised aggregation with a single Gaussian draw per step, SGD for the
//! discriminator, and Adam for the generator.

use crate::error::{Error, Result};
use crate::nn::{MlpParams, PerExampleGradSet};
use crate::rng::RngStream;

/// L2 clipping bound C > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipNorm {
    c: f64,
}

impl ClipNorm {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Param(format!(
                "clip norm must be positive and finite, got {c}"
            )));
        }
        Ok(ClipNorm { c })
    }

    pub fn value(&self) -> f64 {
        self.c
    }
}

/// Which privatization strategy the discriminator update uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpMode {
    /// Clip real-loss and fake-loss per-example gradients separately, then
    /// sum and noise once — the headline method.
    SplitClip,
    /// Clip each example's summed (real + fake) gradient jointly — the
    /// "basic DP" baseline.
    CombinedClip,
    /// No clipping, no noise, no accounting — non-private comparison runs.
    None,
}

impl DpMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "split_clip" => Ok(DpMode::SplitClip),
            "combined_clip" => Ok(DpMode::CombinedClip),
            "none" => Ok(DpMode::None),
            other => Err(Error::Param(format!(
                "unknown dp_mode `{other}` (expected split_clip, combined_clip, or none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DpMode::SplitClip => "split_clip",
            DpMode::CombinedClip => "combined_clip",
            DpMode::None => "none",
        }
    }
}

/// Adam moment accumulators over the flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Fresh zeroed state for `dim` parameters.
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Param(format!(
                "Adam betas must lie in [0,1), got ({beta1}, {beta2})"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!("Adam epsilon must be > 0, got {eps}")));
        }
        Ok(AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }

    /// Conventional GAN defaults: β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn with_defaults(dim: usize) -> Self {
        Self::new(dim, 0.9, 0.999, 1e-8).expect("defaults are valid")
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn hyperparams(&self) -> (f64, f64, f64) {
        (self.beta1, self.beta2, self.eps)
    }

    /// Rebuilds a state from checkpointed fields.
    pub fn from_parts(
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Shape(format!(
                "Adam moment lengths differ: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        let mut s = Self::new(m.len(), beta1, beta2, eps)?;
        s.m = m;
        s.v = v;
        s.t = t;
        Ok(s)
    }
}

/// Scales each example's flat gradient by `1/max(1, ‖g‖₂/C)`: post-clip norms
/// are ≤ C and directions are preserved.
pub fn clip_per_example(grads: &PerExampleGradSet, c: ClipNorm) -> PerExampleGradSet {
    let mut out = grads.clone();
    clip_per_example_in_place(&mut out, c);
    out
}

/// [`clip_per_example`] applied in place, for reusable gradient buffers.
pub fn clip_per_example_in_place(grads: &mut PerExampleGradSet, c: ClipNorm) {
    let bound = c.value();
    grads.for_each_row_mut(|_, row| {
        let norm = row.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > bound { bound / norm } else { 1.0 };
        for g in row.iter_mut() {
            *g *= scale;
        }
    });
}

fn check_pair(real: &PerExampleGradSet, fake: &PerExampleGradSet) -> Result<()> {
    if real.batch_size() != fake.batch_size() {
        return Err(Error::Shape(format!(
            "real/fake batch sizes differ: {} vs {}",
            real.batch_size(),
            fake.batch_size()
        )));
    }
    if real.dim() != fake.dim() {
        return Err(Error::Shape(format!(
            "real/fake gradient dims differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    Ok(())
}

/// Split-clip aggregation: `(Σᵢ realᵢ + Σᵢ fakeᵢ + N(0, (mult·σ·C)² I)) / bs`
/// with exactly one noise draw per call. `sensitivity_multiplier = 1`
/// reproduces the pseudocode's σC noise; 2 noises at the 2C sensitivity the
/// separate clipping actually implies.
pub fn aggregate_and_noise(
    real_clipped: &PerExampleGradSet,
    fake_clipped: &PerExampleGradSet,
    sigma: f64,
    c: ClipNorm,
    sensitivity_multiplier: f64,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    check_pair(real_clipped, fake_clipped)?;
    if !(sensitivity_multiplier > 0.0) || !sensitivity_multiplier.is_finite() {
        return Err(Error::Param(format!(
            "sensitivity multiplier must be positive, got {sensitivity_multiplier}"
        )));
    }
    let bs = real_clipped.batch_size() as f64;
    let mut sum = real_clipped.sum_examples();
    let fake_sum = fake_clipped.sum_examples();
    for (s, f) in sum.iter_mut().zip(fake_sum.iter()) {
        *s += f;
    }
    let mut noise = vec![0.0; real_clipped.dim()];
    stream.fill_normal(&mut noise, sigma * c.value() * sensitivity_multiplier)?;
    for (s, n) in sum.iter_mut().zip(noise.iter()) {
        *s = (*s + n) / bs;
    }
    Ok(sum)
}

/// Baseline aggregation: clip each example's `realᵢ + fakeᵢ` jointly to C,
/// sum, add one `N(0, (mult·σ·C)² I)` draw, divide by bs.
pub fn combined_clip_and_noise(
    real_grads: &PerExampleGradSet,
    fake_grads: &PerExampleGradSet,
    sigma: f64,
    c: ClipNorm,
    sensitivity_multiplier: f64,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    check_pair(real_grads, fake_grads)?;
    if !(sensitivity_multiplier > 0.0) || !sensitivity_multiplier.is_finite() {
        return Err(Error::Param(format!(
            "sensitivity multiplier must be positive, got {sensitivity_multiplier}"
        )));
    }
    let bound = c.value();
    let bs = real_grads.batch_size();
    let dim = real_grads.dim();
    let mut sum = vec![0.0; dim];
    let mut combined = vec![0.0; dim];
    for i in 0..bs {
        let r = real_grads.example(i);
        let f = fake_grads.example(i);
        let mut norm_sq = 0.0;
        for j in 0..dim {
            let g = r[j] + f[j];
            combined[j] = g;
            norm_sq += g * g;
        }
        let norm = norm_sq.sqrt();
        let scale = if norm > bound { bound / norm } else { 1.0 };
        for (s, &g) in sum.iter_mut().zip(combined.iter()) {
            *s += g * scale;
        }
    }
    let mut noise = vec![0.0; dim];
    stream.fill_normal(&mut noise, sigma * bound * sensitivity_multiplier)?;
    for (s, n) in sum.iter_mut().zip(noise.iter()) {
        *s = (*s + n) / bs as f64;
    }
    Ok(sum)
}

/// Plain gradient descent: `params − lr·grad`.
pub fn sgd_step(params: &MlpParams, grad: &[f64], lr: f64) -> Result<MlpParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Param(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    let mut out = params.clone();
    out.axpy(-lr, grad)?;
    Ok(out)
}

/// Standard Adam update with bias correction; returns the stepped parameters
/// and the advanced optimizer state.
pub fn adam_step(
    params: &MlpParams,
    grad: &[f64],
    state: &AdamState,
    lr: f64,
) -> Result<(MlpParams, AdamState)> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Param(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if grad.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "gradient length {} vs Adam state dim {}",
            grad.len(),
            state.m.len()
        )));
    }
    if grad.len() != params.param_count() {
        return Err(Error::Shape(format!(
            "gradient length {} vs {} parameters",
            grad.len(),
            params.param_count()
        )));
    }
    let mut next = state.clone();
    next.t += 1;
    let t = next.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let mut update = vec![0.0; grad.len()];
    for j in 0..grad.len() {
        next.m[j] = b1 * next.m[j] + (1.0 - b1) * grad[j];
        next.v[j] = b2 * next.v[j] + (1.0 - b2) * grad[j] * grad[j];
        let m_hat = next.m[j] / bias1;
        let v_hat = next.v[j] / bias2;
        update[j] = m_hat / (v_hat.sqrt() + eps);
    }
    let mut stepped = params.clone();
    stepped.axpy(-lr, &update)?;
    Ok((stepped, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::{gaussian_sample, RngStream};

    fn set_from(rows: &[&[f64]]) -> PerExampleGradSet {
        PerExampleGradSet::from_flat_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn l2(v: &[f64]) -> f64 {
        v.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    #[test]
    fn clip_scales_three_four_to_unit_norm() {
        let grads = set_from(&[&[3.0, 4.0]]);
        let clipped = clip_per_example(&grads, ClipNorm::new(1.0).unwrap());
        let row = clipped.example(0);
        assert!((row[0] - 0.6).abs() < 1e-15);
        assert!((row[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let grads = set_from(&[&[0.3, 0.4]]);
        let clipped = clip_per_example(&grads, ClipNorm::new(1.0).unwrap());
        assert_eq!(clipped.example(0), grads.example(0));
    }

    #[test]
    fn post_clip_norms_bounded_over_random_batches() {
        let mut stream = RngStream::new(404);
        for trial in 0..100 {
            let c = 0.25 + (trial % 7) as f64 * 0.5;
            let clip = ClipNorm::new(c).unwrap();
            let m = gaussian_sample(8, 13, 3.0, &mut stream).unwrap();
            let rows: Vec<Vec<f64>> = (0..8).map(|i| m.row(i).to_vec()).collect();
            let set = PerExampleGradSet::from_flat_rows(rows).unwrap();
            let clipped = clip_per_example(&set, clip);
            for i in 0..8 {
                assert!(l2(clipped.example(i)) <= c + 1e-12);
            }
        }
    }

    #[test]
    fn clip_preserves_direction() {
        let grads = set_from(&[&[30.0, 40.0]]);
        let clipped = clip_per_example(&grads, ClipNorm::new(2.0).unwrap());
        let row = clipped.example(0);
        // Same direction as [3,4] normalized, scaled to norm 2.
        assert!((row[0] / row[1] - 0.75).abs() < 1e-12);
        assert!((l2(row) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_zero_aggregation_is_exact_batch_mean() {
        let real = set_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fake = set_from(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let mut stream = RngStream::new(1);
        let out = aggregate_and_noise(
            &real,
            &fake,
            0.0,
            ClipNorm::new(1.0).unwrap(),
            1.0,
            &mut stream,
        )
        .unwrap();
        assert_eq!(out, vec![(1.0 + 3.0 + 0.5 + 0.5) / 2.0, (2.0 + 4.0 + 1.0) / 2.0]);
    }

    #[test]
    fn zero_gradients_pass_pure_noise_through() {
        // bs=1, σ=1, C=1: output must equal exactly the stream's N(0,1) draw.
        let real = set_from(&[&[0.0, 0.0, 0.0]]);
        let fake = set_from(&[&[0.0, 0.0, 0.0]]);
        let mut stream = RngStream::new(777);
        let out = aggregate_and_noise(
            &real,
            &fake,
            1.0,
            ClipNorm::new(1.0).unwrap(),
            1.0,
            &mut stream,
        )
        .unwrap();
        let mut replay = RngStream::new(777);
        let mut expect = vec![0.0; 3];
        replay.fill_normal(&mut expect, 1.0).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn noise_draw_is_independent_of_gradient_values() {
        // Same stream state + different gradients → outputs differ exactly by
        // the gradient means; the noise realization is identical.
        let clip = ClipNorm::new(1.0).unwrap();
        let grads_a = set_from(&[&[0.1, -0.2]]);
        let grads_b = set_from(&[&[-0.4, 0.3]]);
        let zero = set_from(&[&[0.0, 0.0]]);

        let mut s1 = RngStream::new(31);
        let out_a = aggregate_and_noise(&grads_a, &zero, 1.3, clip, 1.0, &mut s1).unwrap();
        let mut s2 = RngStream::new(31);
        let out_b = aggregate_and_noise(&grads_b, &zero, 1.3, clip, 1.0, &mut s2).unwrap();

        let mut replay = RngStream::new(31);
        let mut noise = vec![0.0; 2];
        replay.fill_normal(&mut noise, 1.3).unwrap();
        for j in 0..2 {
            assert_eq!(out_a[j], (grads_a.example(0)[j] + noise[j]) / 1.0);
            assert_eq!(out_b[j], (grads_b.example(0)[j] + noise[j]) / 1.0);
        }
    }

    #[test]
    fn injected_noise_variance_matches_sigma_c_over_bs() {
        // Empirical per-coordinate variance of (output − noiseless output)
        // over 10⁴ draws ≈ (σC/bs)² within 5%.
        let bs = 600;
        let sigma = 1.1;
        let c = ClipNorm::new(1.0).unwrap();
        let rows = vec![vec![0.0; 4]; bs];
        let zero = PerExampleGradSet::from_flat_rows(rows).unwrap();
        let mut stream = RngStream::new(2025);
        let draws = 10_000;
        let mut sums = vec![0.0f64; 4];
        let mut sq = vec![0.0f64; 4];
        for _ in 0..draws {
            let out =
                aggregate_and_noise(&zero, &zero, sigma, c, 1.0, &mut stream).unwrap();
            for j in 0..4 {
                sums[j] += out[j];
                sq[j] += out[j] * out[j];
            }
        }
        let expect = (sigma * 1.0 / bs as f64).powi(2);
        for j in 0..4 {
            let mean = sums[j] / draws as f64;
            let var = sq[j] / draws as f64 - mean * mean;
            assert!(
                (var - expect).abs() < 0.05 * expect,
                "coordinate {j}: variance {var} vs expected {expect}"
            );
        }
    }

    #[test]
    fn sensitivity_multiplier_scales_the_noise() {
        let zero = set_from(&[&[0.0, 0.0, 0.0]]);
        let c = ClipNorm::new(1.0).unwrap();
        let mut s1 = RngStream::new(50);
        let base = aggregate_and_noise(&zero, &zero, 1.0, c, 1.0, &mut s1).unwrap();
        let mut s2 = RngStream::new(50);
        let doubled = aggregate_and_noise(&zero, &zero, 1.0, c, 2.0, &mut s2).unwrap();
        for j in 0..3 {
            assert!((doubled[j] - 2.0 * base[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_mode_cancels_opposing_gradients_before_clipping() {
        let real = set_from(&[&[5.0, -3.0], &[1.0, 1.0]]);
        let fake = set_from(&[&[-5.0, 3.0], &[-1.0, -1.0]]);
        let mut stream = RngStream::new(9);
        let out = combined_clip_and_noise(
            &real,
            &fake,
            0.0,
            ClipNorm::new(1.0).unwrap(),
            1.0,
            &mut stream,
        )
        .unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn combined_mode_passes_small_single_example_through() {
        let real = set_from(&[&[0.2, 0.1]]);
        let fake = set_from(&[&[0.1, 0.2]]);
        let mut stream = RngStream::new(9);
        let out = combined_clip_and_noise(
            &real,
            &fake,
            0.0,
            ClipNorm::new(1.0).unwrap(),
            1.0,
            &mut stream,
        )
        .unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
        assert!((out[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn split_mode_keeps_double_the_magnitude_of_combined_on_aligned_grads() {
        // ‖realᵢ‖ = ‖fakeᵢ‖ = C in the same direction: split clipping keeps
        // both at C (sum 2C), combined clipping shrinks the 2C sum back to C.
        let c = ClipNorm::new(1.0).unwrap();
        let dir = [0.6, 0.8];
        let real = set_from(&[&dir]);
        let fake = set_from(&[&dir]);
        let clipped_real = clip_per_example(&real, c);
        let clipped_fake = clip_per_example(&fake, c);
        let mut s1 = RngStream::new(1);
        let split =
            aggregate_and_noise(&clipped_real, &clipped_fake, 0.0, c, 1.0, &mut s1).unwrap();
        let mut s2 = RngStream::new(1);
        let combined =
            combined_clip_and_noise(&real, &fake, 0.0, c, 1.0, &mut s2).unwrap();
        assert!((l2(&split) - 2.0).abs() < 1e-12);
        assert!((l2(&combined) - 1.0).abs() < 1e-12);
        for j in 0..2 {
            assert!((split[j] - 2.0 * combined[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn replacing_one_example_moves_the_summed_gradient_at_most_two_c() {
        let mut stream = RngStream::new(606);
        let c_val = 0.7;
        let c = ClipNorm::new(c_val).unwrap();
        for _ in 0..50 {
            let m = gaussian_sample(6, 9, 2.0, &mut stream).unwrap();
            let fake_m = gaussian_sample(6, 9, 2.0, &mut stream).unwrap();
            let rows: Vec<Vec<f64>> = (0..6).map(|i| m.row(i).to_vec()).collect();
            let fake_rows: Vec<Vec<f64>> = (0..6).map(|i| fake_m.row(i).to_vec()).collect();

            let mut replaced = rows.clone();
            let replacement = gaussian_sample(1, 9, 5.0, &mut stream).unwrap();
            replaced[3] = replacement.row(0).to_vec();

            // Split mode: pre-noise sum = Σ clip(realᵢ) + Σ clip(fakeᵢ).
            let sum_split = |r: &Vec<Vec<f64>>| -> Vec<f64> {
                let real = clip_per_example(
                    &PerExampleGradSet::from_flat_rows(r.clone()).unwrap(),
                    c,
                );
                let fake = clip_per_example(
                    &PerExampleGradSet::from_flat_rows(fake_rows.clone()).unwrap(),
                    c,
                );
                let mut s = real.sum_examples();
                for (a, b) in s.iter_mut().zip(fake.sum_examples()) {
                    *a += b;
                }
                s
            };
            let before = sum_split(&rows);
            let after = sum_split(&replaced);
            let diff: Vec<f64> = before.iter().zip(after.iter()).map(|(a, b)| a - b).collect();
            assert!(l2(&diff) <= 2.0 * c_val + 1e-9, "split-mode shift {}", l2(&diff));

            // Combined mode: pre-noise sum = Σ clip(realᵢ + fakeᵢ).
            let sum_combined = |r: &Vec<Vec<f64>>| -> Vec<f64> {
                let combined: Vec<Vec<f64>> = r
                    .iter()
                    .zip(fake_rows.iter())
                    .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x + y).collect())
                    .collect();
                clip_per_example(
                    &PerExampleGradSet::from_flat_rows(combined).unwrap(),
                    c,
                )
                .sum_examples()
            };
            let before = sum_combined(&rows);
            let after = sum_combined(&replaced);
            let diff: Vec<f64> = before.iter().zip(after.iter()).map(|(a, b)| a - b).collect();
            assert!(l2(&diff) <= 2.0 * c_val + 1e-9, "combined-mode shift {}", l2(&diff));
        }
    }

    #[test]
    fn sgd_trivial_cases() {
        let mut stream = RngStream::new(4);
        let params = MlpParams::two_layer(
            2,
            3,
            1,
            Activation::Relu,
            Activation::Sigmoid,
            &mut stream,
        )
        .unwrap();
        let dim = params.param_count();

        let unchanged = sgd_step(&params, &vec![0.0; dim], 0.5).unwrap();
        assert_eq!(unchanged.to_flat(), params.to_flat());

        let zeroed = sgd_step(&params, &params.to_flat(), 1.0).unwrap();
        assert!(zeroed.to_flat().iter().all(|&p| p == 0.0));

        let grad: Vec<f64> = (0..dim).map(|i| (i as f64 - 3.0) * 0.1).collect();
        let two_half = sgd_step(&sgd_step(&params, &grad, 0.05).unwrap(), &grad, 0.05).unwrap();
        let one_full = sgd_step(&params, &grad, 0.1).unwrap();
        for (a, b) in two_half.to_flat().iter().zip(one_full.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut stream = RngStream::new(4);
        let params = MlpParams::two_layer(
            2,
            3,
            1,
            Activation::Relu,
            Activation::Sigmoid,
            &mut stream,
        )
        .unwrap();
        let state = AdamState::with_defaults(params.param_count());
        let (stepped, next) =
            adam_step(&params, &vec![0.0; params.param_count()], &state, 2e-4).unwrap();
        assert_eq!(stepped.to_flat(), params.to_flat());
        assert_eq!(next.timestep(), 1);
    }

    #[test]
    fn adam_first_step_with_unit_gradient_matches_hand_recurrence() {
        // t=1, g=1: m̂ = 1, v̂ = 1 → update = −lr/(1 + ε_adam).
        let mut stream = RngStream::new(4);
        let params =
            MlpParams::single_layer(1, 1, Activation::Identity, &mut stream).unwrap();
        let state = AdamState::with_defaults(params.param_count());
        let lr = 2e-4;
        let before = params.to_flat();
        let (stepped, _) = adam_step(&params, &[1.0, 1.0], &state, lr).unwrap();
        let after = stepped.to_flat();
        let expect = -lr / (1.0 + 1e-8);
        for j in 0..2 {
            // `after - before` reconstructs the update with ~ulp(before)
            // error, so the tolerance is set by the subtraction, not Adam.
            assert!(((after[j] - before[j]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_update_approaches_lr_times_sign_under_constant_gradient() {
        let mut stream = RngStream::new(4);
        let mut params =
            MlpParams::single_layer(1, 1, Activation::Identity, &mut stream).unwrap();
        let mut state = AdamState::with_defaults(params.param_count());
        let lr = 1e-3;
        let grad = [0.37, -2.5];
        let mut prev = params.to_flat();
        for step in 0..200 {
            let (next, ns) = adam_step(&params, &grad, &state, lr).unwrap();
            params = next;
            state = ns;
            let cur = params.to_flat();
            if step > 150 {
                for j in 0..2 {
                    let delta = cur[j] - prev[j];
                    let expect = -lr * grad[j].signum();
                    assert!(
                        (delta - expect).abs() < 0.05 * lr,
                        "step {step} coord {j}: delta {delta} vs {expect}"
                    );
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn mismatched_batch_sizes_are_shape_errors() {
        let real = set_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fake = set_from(&[&[1.0, 2.0]]);
        let mut stream = RngStream::new(1);
        assert!(matches!(
            aggregate_and_noise(
                &real,
                &fake,
                0.0,
                ClipNorm::new(1.0).unwrap(),
                1.0,
                &mut stream
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dp_mode_parses_all_variants() {
        assert_eq!(DpMode::parse("split_clip").unwrap(), DpMode::SplitClip);
        assert_eq!(DpMode::parse("combined_clip").unwrap(), DpMode::CombinedClip);
        assert_eq!(DpMode::parse("none").unwrap(), DpMode::None);
        assert!(DpMode::parse("other").is_err());
        assert_eq!(DpMode::SplitClip.as_str(), "split_clip");
    }
}
