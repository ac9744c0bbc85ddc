//! The conditional-GAN training loop with a privatized discriminator update:
//! Poisson batch sampling, per-example losses and gradients, the
//! learning-rate schedule, and label-conditioned generation.

use crate::accountant::{AccountantState, MechanismParams, PrivacySpend};
use crate::config::{LrSchedule, TrainConfig};
use crate::data::LabeledDataset;
use crate::dp::{self, AdamState, ClipNorm, DpMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    backward_batch_dinput, backward_batch_weights, backward_per_example, backward_per_example_into,
    forward, Activation,
    MlpParams, PerExampleGradSet,
};
use crate::rng::{RngStream, StreamState};

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// The privacy spend crossed the target ε.
    BudgetExhausted,
    /// The step cap was reached first.
    MaxSteps,
}

impl HaltReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            HaltReason::BudgetExhausted => "budget_exhausted",
            HaltReason::MaxSteps => "max_steps",
        }
    }
}

/// Mean losses recorded at a sampling step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub step: u64,
    pub d_loss_real: f64,
    pub d_loss_fake: f64,
    pub g_loss: f64,
}

/// End-of-run positions of the three RNG streams, captured so a checkpoint
/// can resume the exact random sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStates {
    pub params: StreamState,
    pub noise: StreamState,
    pub sampling: StreamState,
}

/// What a training run did: steps, halt cause, final spend, loss trajectory,
/// and where the RNG streams ended up.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps_run: u64,
    pub halt_reason: HaltReason,
    pub final_spend: PrivacySpend,
    pub loss_samples: Vec<LossSample>,
    pub final_streams: StreamStates,
}

/// The trained pair plus generator optimizer state and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GanPair {
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    pub adam_state: AdamState,
    pub step: u64,
}

/// Discriminator learning rate at `step`: linear interpolation from
/// `initial` to `final_value` over `[0, decay_end_step]`, constant after;
/// with `step_drop`, a hard switch at `decay_end_step`.
pub fn learning_rate(step: u64, schedule: &LrSchedule) -> f64 {
    if step >= schedule.decay_end_step {
        return schedule.final_value;
    }
    if schedule.step_drop {
        return schedule.initial;
    }
    let frac = step as f64 / schedule.decay_end_step as f64;
    schedule.initial + (schedule.final_value - schedule.initial) * frac
}

/// Poisson subsample: each example joins independently with probability
/// `q = bs/N`, in index order. An empty draw resamples immediately (the
/// retry belongs to the same accountant step). `q ≥ 1` returns the full
/// dataset in index order.
pub fn sample_batch(
    dataset: &LabeledDataset,
    bs: usize,
    stream: &mut RngStream,
) -> Result<(Matrix, Matrix)> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Param("cannot sample from an empty dataset".into()));
    }
    if bs == 0 {
        return Err(Error::Param("batch size must be ≥ 1".into()));
    }
    let q = bs as f64 / n as f64;
    if q >= 1.0 {
        return Ok((dataset.images().clone(), dataset.labels().clone()));
    }
    let dim = dataset.feature_dim();
    let classes = dataset.num_classes();
    loop {
        let mut img_data = Vec::new();
        let mut lbl_data = Vec::new();
        let mut count = 0;
        for i in 0..n {
            if stream.bernoulli(q) {
                img_data.extend_from_slice(dataset.images().row(i));
                lbl_data.extend_from_slice(dataset.labels().row(i));
                count += 1;
            }
        }
        if count > 0 {
            return Ok((
                Matrix::new(count, dim, img_data)?,
                Matrix::new(count, classes, lbl_data)?,
            ));
        }
    }
}

fn check_single_output(d: &MlpParams) -> Result<()> {
    if d.output_dim() != 1 {
        return Err(Error::Shape(format!(
            "discriminator must end in a single unit, has {}",
            d.output_dim()
        )));
    }
    Ok(())
}

/// Per-example descent-form losses for one discriminator step:
/// `−ln D(x|y)` on the real batch and `−ln(1 − D(G(z|y_f)|y_f))` on the
/// fake batch (stable logit forms, probabilities clamped away from {0,1}).
pub fn discriminator_losses(
    d: &MlpParams,
    x: &Matrix,
    y: &Matrix,
    g_out: &Matrix,
    g_labels: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_single_output(d)?;
    let (a_real, _) = forward(d, x, y)?;
    let (a_fake, _) = forward(d, g_out, g_labels)?;
    let real = (0..a_real.rows()).map(|i| -a_real.get(i, 0).ln()).collect();
    let fake = (0..a_fake.rows())
        .map(|i| -(1.0 - a_fake.get(i, 0)).ln())
        .collect();
    Ok((real, fake))
}

/// Per-example generator loss through a frozen discriminator: the saturating
/// `ln(1 − D(G(z|y)|y))`, or `−ln D(G(z|y)|y)` when `non_saturating` is set.
pub fn generator_loss(
    d: &MlpParams,
    g_out: &Matrix,
    y: &Matrix,
    non_saturating: bool,
) -> Result<Vec<f64>> {
    check_single_output(d)?;
    let (a, _) = forward(d, g_out, y)?;
    Ok((0..a.rows())
        .map(|i| {
            let ai = a.get(i, 0);
            if non_saturating {
                -ai.ln()
            } else {
                (1.0 - ai).ln()
            }
        })
        .collect())
}

/// Per-example real-batch losses and parameter gradients: example `i` yields
/// `−ln D(xᵢ|yᵢ)` and its gradient w.r.t. every discriminator parameter.
pub fn d_loss_real_grads(
    d: &MlpParams,
    x: &Matrix,
    y: &Matrix,
) -> Result<(Vec<f64>, PerExampleGradSet)> {
    let mut grads = PerExampleGradSet::empty();
    let losses = d_loss_real_grads_into(d, x, y, &mut grads)?;
    Ok((losses, grads))
}

/// [`d_loss_real_grads`] filling a caller-held gradient set so the training
/// loop can reuse one buffer across steps instead of remapping hundreds of
/// megabytes per step.
fn d_loss_real_grads_into(
    d: &MlpParams,
    x: &Matrix,
    y: &Matrix,
    grads: &mut PerExampleGradSet,
) -> Result<Vec<f64>> {
    check_single_output(d)?;
    let (a, trace) = forward(d, x, y)?;
    let bs = a.rows();
    let mut losses = Vec::with_capacity(bs);
    let mut dact = Matrix::zeros(bs, 1);
    for i in 0..bs {
        let ai = a.get(i, 0);
        losses.push(-ai.ln());
        dact.set(i, 0, -1.0 / ai);
    }
    backward_per_example_into(d, &trace, &dact, grads)?;
    Ok(losses)
}

/// Per-example fake-batch losses `−ln(1 − D(G(z)|y_f))` and their
/// discriminator-parameter gradients.
pub fn d_loss_fake_grads(
    d: &MlpParams,
    g_out: &Matrix,
    g_labels: &Matrix,
) -> Result<(Vec<f64>, PerExampleGradSet)> {
    let mut grads = PerExampleGradSet::empty();
    let losses = d_loss_fake_grads_into(d, g_out, g_labels, &mut grads)?;
    Ok((losses, grads))
}

/// [`d_loss_fake_grads`] filling a caller-held gradient set (see
/// [`d_loss_real_grads_into`]).
fn d_loss_fake_grads_into(
    d: &MlpParams,
    g_out: &Matrix,
    g_labels: &Matrix,
    grads: &mut PerExampleGradSet,
) -> Result<Vec<f64>> {
    check_single_output(d)?;
    let (a, trace) = forward(d, g_out, g_labels)?;
    let bs = a.rows();
    let mut losses = Vec::with_capacity(bs);
    let mut dact = Matrix::zeros(bs, 1);
    for i in 0..bs {
        let ai = a.get(i, 0);
        losses.push(-(1.0 - ai).ln());
        dact.set(i, 0, 1.0 / (1.0 - ai));
    }
    backward_per_example_into(d, &trace, &dact, grads)?;
    Ok(losses)
}

/// Real-batch losses plus the gradient of their *sum* over the batch, via a
/// single batch backward pass. Equals `d_loss_real_grads(..).1.sum_examples()`
/// bit-for-bit without materializing per-example gradients.
fn d_loss_real_batch(d: &MlpParams, x: &Matrix, y: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    check_single_output(d)?;
    let (a, trace) = forward(d, x, y)?;
    let bs = a.rows();
    let mut losses = Vec::with_capacity(bs);
    let mut dact = Matrix::zeros(bs, 1);
    for i in 0..bs {
        let ai = a.get(i, 0);
        losses.push(-ai.ln());
        dact.set(i, 0, -1.0 / ai);
    }
    let flat = backward_batch_weights(d, &trace, &dact)?;
    Ok((losses, flat))
}

/// Fake-batch losses plus the gradient of their sum, batch-backward variant of
/// [`d_loss_fake_grads`].
fn d_loss_fake_batch(
    d: &MlpParams,
    g_out: &Matrix,
    g_labels: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_single_output(d)?;
    let (a, trace) = forward(d, g_out, g_labels)?;
    let bs = a.rows();
    let mut losses = Vec::with_capacity(bs);
    let mut dact = Matrix::zeros(bs, 1);
    for i in 0..bs {
        let ai = a.get(i, 0);
        losses.push(-(1.0 - ai).ln());
        dact.set(i, 0, 1.0 / (1.0 - ai));
    }
    let flat = backward_batch_weights(d, &trace, &dact)?;
    Ok((losses, flat))
}

/// Generator-loss gradient w.r.t. the *discriminator's input* rows, shared by
/// the per-example and mean gradient paths. `scale` is 1 for per-example
/// losses and 1/bs for the mean loss.
fn g_loss_dinput(
    d: &MlpParams,
    g_out: &Matrix,
    g_labels: &Matrix,
    non_saturating: bool,
    scale: f64,
) -> Result<(Vec<f64>, Matrix)> {
    check_single_output(d)?;
    let (a, trace_d) = forward(d, g_out, g_labels)?;
    let bs = a.rows();
    let mut losses = Vec::with_capacity(bs);
    let mut dact = Matrix::zeros(bs, 1);
    for i in 0..bs {
        let ai = a.get(i, 0);
        if non_saturating {
            losses.push(-ai.ln());
            dact.set(i, 0, -scale / ai);
        } else {
            losses.push((1.0 - ai).ln());
            dact.set(i, 0, -scale / (1.0 - ai));
        }
    }
    let dinput = backward_batch_dinput(d, &trace_d, &dact)?;
    let dgout = dinput.slice_cols(0, g_out.cols())?;
    Ok((losses, dgout))
}

/// Per-example generator losses and their gradients w.r.t. the generator's
/// parameters, chained through a frozen discriminator.
pub fn g_loss_grads(
    g: &MlpParams,
    d: &MlpParams,
    z: &Matrix,
    g_labels: &Matrix,
    non_saturating: bool,
) -> Result<(Vec<f64>, PerExampleGradSet)> {
    let (g_out, trace_g) = forward(g, z, g_labels)?;
    let (losses, dgout) = g_loss_dinput(d, &g_out, g_labels, non_saturating, 1.0)?;
    let grads = backward_per_example(g, &trace_g, &dgout)?;
    Ok((losses, grads))
}

/// Mean generator-loss gradient for the Adam step, reading only the (already
/// noised) discriminator parameters, the latent batch, and the fake labels.
fn generator_gradient(
    g: &MlpParams,
    d_new: &MlpParams,
    trace_g: &crate::nn::ForwardTrace,
    g_out: &Matrix,
    g_labels: &Matrix,
    non_saturating: bool,
) -> Result<(Vec<f64>, f64)> {
    let bs = g_out.rows() as f64;
    let (losses, dgout) = g_loss_dinput(d_new, g_out, g_labels, non_saturating, 1.0 / bs)?;
    let flat = backward_batch_weights(g, trace_g, &dgout)?;
    let mean_loss = losses.iter().sum::<f64>() / bs;
    Ok((flat, mean_loss))
}

/// One-hot labels with `per_class` consecutive rows per class, classes in
/// ascending order — `per_class × num_classes` rows total.
pub fn balanced_one_hot(per_class: usize, num_classes: usize) -> Result<Matrix> {
    if per_class == 0 || num_classes == 0 {
        return Err(Error::Param(
            "balanced label grid needs per_class ≥ 1 and num_classes ≥ 1".into(),
        ));
    }
    let n = per_class * num_classes;
    let mut m = Matrix::zeros(n, num_classes);
    for i in 0..n {
        m.set(i, i / per_class, 1.0);
    }
    Ok(m)
}

/// Samples `labels.rows()` images from the generator: fresh `z ~ U(−1,1)` per
/// row, conditioned on the given one-hot labels, which pass through unchanged.
pub fn generate(
    g: &MlpParams,
    labels: &Matrix,
    stream: &mut RngStream,
) -> Result<LabeledDataset> {
    let classes = labels.cols();
    if g.input_dim() <= classes {
        return Err(Error::Shape(format!(
            "generator expects {} inputs, which cannot include {} label columns",
            g.input_dim(),
            classes
        )));
    }
    let latent_dim = g.input_dim() - classes;
    let n = labels.rows();
    let mut z = Matrix::zeros(n, latent_dim);
    for v in z.data_mut() {
        *v = stream.uniform(-1.0, 1.0);
    }
    let (images, _) = forward(g, &z, labels)?;
    LabeledDataset::new(images, labels.clone())
}

fn uniform_latent(
    bs: usize,
    latent_dim: usize,
    stream: &mut RngStream,
) -> Result<Matrix> {
    let mut z = Matrix::zeros(bs, latent_dim);
    for v in z.data_mut() {
        *v = stream.uniform(-1.0, 1.0);
    }
    Ok(z)
}

fn uniform_fake_labels(
    bs: usize,
    num_classes: usize,
    stream: &mut RngStream,
) -> Result<Matrix> {
    let mut y = Matrix::zeros(bs, num_classes);
    for i in 0..bs {
        let c = stream.below(num_classes);
        y.set(i, c, 1.0);
    }
    Ok(y)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs the training loop. Per step: Poisson batch, latent draw, per-example
/// discriminator gradients on real and fake losses, clipping per `dp_mode`,
/// one noised aggregation, an SGD step, one accountant accumulation, then the
/// generator Adam step through the *updated* discriminator, and finally the
/// budget check — so a crossed budget overshoots by at most one step's RDP.
pub fn train(
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(GanPair, TrainReport, AccountantState)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Param("training dataset is empty".into()));
    }
    if dataset.num_classes() < 2 {
        return Err(Error::Param(format!(
            "training needs ≥ 2 label classes, dataset has {}",
            dataset.num_classes()
        )));
    }

    let data_dim = dataset.feature_dim();
    let classes = dataset.num_classes();
    let mut params_stream = RngStream::new(config.seed_params);
    let mut noise_stream = RngStream::new(config.seed_noise);
    let mut sampling_stream = RngStream::new(config.seed_sampling);

    let mut g = MlpParams::two_layer(
        config.latent_dim + classes,
        config.gen_hidden_dim,
        data_dim,
        Activation::Relu,
        Activation::Sigmoid,
        &mut params_stream,
    )?;
    let mut d = MlpParams::two_layer(
        data_dim + classes,
        config.disc_hidden_dim,
        1,
        Activation::Relu,
        Activation::Sigmoid,
        &mut params_stream,
    )?;
    let mut adam = AdamState::with_defaults(g.param_count());

    let q = (config.batch_size as f64 / dataset.len() as f64).min(1.0);
    // In mode `none` no accounting happens (steps stays 0); σ=0 is allowed
    // there, so give the idle accountant a positive placeholder scale.
    let accountant_sigma = if config.noise_multiplier > 0.0 {
        config.noise_multiplier
    } else {
        1.0
    };
    let mut accountant = AccountantState::new(MechanismParams::new(q, accountant_sigma)?)?;

    let clip = ClipNorm::new(config.clip_norm)?;
    let sample_every = (config.max_steps / 100).max(1);
    let mut loss_samples = Vec::new();
    let mut halt_reason = HaltReason::MaxSteps;
    let mut steps_run = 0;

    // Long-lived per-example gradient buffers for the clipping modes. At
    // realistic sizes each holds batch × param_count doubles (hundreds of
    // megabytes), far past the allocator's mmap threshold — allocating them
    // fresh every step costs more in page faults than the math itself.
    let mut real_grads = PerExampleGradSet::empty();
    let mut fake_grads = PerExampleGradSet::empty();

    for step in 0..config.max_steps {
        let lr_d = learning_rate(step, &config.lr);
        let (x, y) = sample_batch(dataset, config.batch_size, &mut sampling_stream)?;
        let bs = x.rows();
        let z = uniform_latent(bs, config.latent_dim, &mut sampling_stream)?;
        let yf = uniform_fake_labels(bs, classes, &mut sampling_stream)?;
        let (g_out, trace_g) = forward(&g, &z, &yf)?;

        let (losses_real, losses_fake, grad_d) = match config.dp_mode {
            DpMode::SplitClip => {
                let losses_real = d_loss_real_grads_into(&d, &x, &y, &mut real_grads)?;
                let losses_fake = d_loss_fake_grads_into(&d, &g_out, &yf, &mut fake_grads)?;
                dp::clip_per_example_in_place(&mut real_grads, clip);
                dp::clip_per_example_in_place(&mut fake_grads, clip);
                let grad = dp::aggregate_and_noise(
                    &real_grads,
                    &fake_grads,
                    config.noise_multiplier,
                    clip,
                    config.sensitivity_multiplier,
                    &mut noise_stream,
                )?;
                (losses_real, losses_fake, grad)
            }
            DpMode::CombinedClip => {
                let losses_real = d_loss_real_grads_into(&d, &x, &y, &mut real_grads)?;
                let losses_fake = d_loss_fake_grads_into(&d, &g_out, &yf, &mut fake_grads)?;
                let grad = dp::combined_clip_and_noise(
                    &real_grads,
                    &fake_grads,
                    config.noise_multiplier,
                    clip,
                    config.sensitivity_multiplier,
                    &mut noise_stream,
                )?;
                (losses_real, losses_fake, grad)
            }
            DpMode::None => {
                // No per-example clipping, so skip materializing per-example
                // gradients: the batch backward pass yields the same summed
                // gradient bit-for-bit at a fraction of the memory traffic.
                let (losses_real, mut sum) = d_loss_real_batch(&d, &x, &y)?;
                let (losses_fake, flat_fake) = d_loss_fake_batch(&d, &g_out, &yf)?;
                for (s, f) in sum.iter_mut().zip(flat_fake) {
                    *s += f;
                }
                for s in sum.iter_mut() {
                    *s /= bs as f64;
                }
                (losses_real, losses_fake, sum)
            }
        };

        d = dp::sgd_step(&d, &grad_d, lr_d)?;
        if config.dp_mode != DpMode::None {
            accountant = accountant.accumulate_step(1)?;
        }

        // Post-processing discipline: the generator sees only the *noised*
        // discriminator parameters plus public z and fake labels.
        let (grad_g, g_loss_mean) =
            generator_gradient(&g, &d, &trace_g, &g_out, &yf, config.non_saturating)?;
        let (g_new, adam_new) = dp::adam_step(&g, &grad_g, &adam, config.gen_lr)?;
        g = g_new;
        adam = adam_new;
        steps_run = step + 1;

        if step % sample_every == 0 {
            loss_samples.push(LossSample {
                step: steps_run,
                d_loss_real: mean(&losses_real),
                d_loss_fake: mean(&losses_fake),
                g_loss: g_loss_mean,
            });
        }

        if config.dp_mode != DpMode::None
            && accountant.budget_exceeded(config.target_epsilon, config.target_delta)?
        {
            halt_reason = HaltReason::BudgetExhausted;
            break;
        }
    }

    let final_spend = accountant.to_epsilon_delta(config.target_delta)?;
    let report = TrainReport {
        steps_run,
        halt_reason,
        final_spend,
        loss_samples,
        final_streams: StreamStates {
            params: params_stream.state(),
            noise: noise_stream.state(),
            sampling: sampling_stream.state(),
        },
    };
    let pair = GanPair {
        generator: g,
        discriminator: d,
        adam_state: adam,
        step: steps_run,
    };
    Ok((pair, report, accountant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;

    fn toy_dataset(n: usize, dim: usize, classes: usize) -> LabeledDataset {
        let mut images = Matrix::zeros(n, dim);
        for i in 0..n {
            for j in 0..dim {
                images.set(i, j, ((i * dim + j) as f64 * 0.37) % 1.0);
            }
        }
        let labels =
            one_hot(&(0..n).map(|i| (i % classes) as u8).collect::<Vec<_>>(), classes)
                .unwrap();
        LabeledDataset::new(images, labels).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.latent_dim = 3;
        cfg.gen_hidden_dim = 5;
        cfg.disc_hidden_dim = 5;
        cfg.max_steps = 3;
        cfg.target_epsilon = f64::INFINITY;
        cfg
    }

    #[test]
    fn schedule_matches_the_documented_points() {
        let s = LrSchedule {
            initial: 0.15,
            final_value: 0.052,
            decay_end_step: 10_000,
            step_drop: false,
        };
        assert_eq!(learning_rate(0, &s), 0.15);
        assert!((learning_rate(5_000, &s) - 0.101).abs() < 1e-12);
        assert_eq!(learning_rate(10_000, &s), 0.052);
        assert_eq!(learning_rate(250_000, &s), 0.052);

        let drop = LrSchedule { step_drop: true, ..s };
        assert_eq!(learning_rate(0, &drop), 0.15);
        assert_eq!(learning_rate(9_999, &drop), 0.15);
        assert_eq!(learning_rate(10_000, &drop), 0.052);
    }

    #[test]
    fn full_rate_sampling_returns_the_dataset_in_index_order() {
        let ds = toy_dataset(6, 4, 3);
        let mut stream = RngStream::new(9);
        let (x, y) = sample_batch(&ds, 6, &mut stream).unwrap();
        assert_eq!(&x, ds.images());
        assert_eq!(&y, ds.labels());
        let (x2, _) = sample_batch(&ds, 100, &mut stream).unwrap();
        assert_eq!(&x2, ds.images());
    }

    #[test]
    fn realized_batch_size_concentrates_around_bs() {
        let ds = toy_dataset(6_000, 2, 2);
        let mut stream = RngStream::new(33);
        let draws = 10_000;
        let mut total = 0usize;
        for _ in 0..draws {
            let (x, y) = sample_batch(&ds, 60, &mut stream).unwrap();
            assert_eq!(x.rows(), y.rows());
            total += x.rows();
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - 60.0).abs() < 1.5, "mean realized batch {mean}");
    }

    #[test]
    fn labels_stay_aligned_with_images() {
        // Image row i is the constant i/n; label class is i % classes.
        let n = 50;
        let mut images = Matrix::zeros(n, 1);
        for i in 0..n {
            images.set(i, 0, i as f64 / n as f64);
        }
        let labels =
            one_hot(&(0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>(), 10).unwrap();
        let ds = LabeledDataset::new(images, labels).unwrap();
        let mut stream = RngStream::new(5);
        for _ in 0..20 {
            let (x, y) = sample_batch(&ds, 10, &mut stream).unwrap();
            for r in 0..x.rows() {
                let i = (x.get(r, 0) * n as f64).round() as usize;
                let class = y.row(r).iter().position(|&v| v == 1.0).unwrap();
                assert_eq!(class, i % 10);
            }
        }
    }

    #[test]
    fn sampling_never_yields_an_empty_batch() {
        // q = 0.01 on N=100: an empty first draw is likely (p ≈ 0.366), so
        // this exercises the internal resample path.
        let ds = toy_dataset(100, 2, 2);
        let mut stream = RngStream::new(7);
        for _ in 0..200 {
            let (x, _) = sample_batch(&ds, 1, &mut stream).unwrap();
            assert!(x.rows() >= 1);
        }
    }

    fn zeroed(params: &MlpParams) -> MlpParams {
        let mut p = params.clone();
        let flat = p.to_flat();
        p.axpy(-1.0, &flat).unwrap();
        p
    }

    #[test]
    fn indifferent_discriminator_gives_ln2_losses() {
        let mut stream = RngStream::new(1);
        let d = zeroed(
            &MlpParams::two_layer(6, 4, 1, Activation::Relu, Activation::Sigmoid, &mut stream)
                .unwrap(),
        );
        let x = Matrix::zeros(3, 4);
        let y = one_hot(&[0, 1, 0], 2).unwrap();
        let (real, fake) = discriminator_losses(&d, &x, &y, &x, &y).unwrap();
        for l in real.iter().chain(fake.iter()) {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let g_sat = generator_loss(&d, &x, &y, false).unwrap();
        for l in &g_sat {
            assert!((l + std::f64::consts::LN_2).abs() < 1e-12); // ln 0.5
        }
        let g_nonsat = generator_loss(&d, &x, &y, true).unwrap();
        for l in &g_nonsat {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_discriminator_losses_bottom_out_at_the_clamp() {
        // Single feature: w = 1000, b = −500. Real inputs at 1 → logit 500;
        // fake inputs at 0 → logit −500. Probabilities clamp at 10⁻⁷.
        let mut stream = RngStream::new(1);
        let mut d =
            MlpParams::single_layer(3, 1, Activation::Sigmoid, &mut stream).unwrap();
        let flat = d.to_flat();
        d.axpy(-1.0, &flat).unwrap();
        d.axpy(1.0, &[1000.0, 0.0, 0.0, -500.0]).unwrap();

        let real = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let fake = Matrix::new(2, 1, vec![0.0, 0.0]).unwrap();
        let y = one_hot(&[0, 1], 2).unwrap();
        let (lr, lf) = discriminator_losses(&d, &real, &y, &fake, &y).unwrap();
        let floor = -(1.0f64 - 1e-7).ln(); // ≈ 1.00000005e-7
        for l in lr.iter().chain(lf.iter()) {
            assert!((l - floor).abs() < 1e-14, "loss {l} vs clamp floor {floor}");
        }
    }

    #[test]
    fn batch_discriminator_gradients_match_per_example_sums_bitwise() {
        let mut stream = RngStream::new(41);
        let d = MlpParams::two_layer(6, 5, 1, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let x = Matrix::new(4, 4, (0..16).map(|i| (i as f64 * 0.31) % 1.0).collect()).unwrap();
        let y = one_hot(&[0, 1, 0, 1], 2).unwrap();

        let (losses_pe, grads_pe) = d_loss_real_grads(&d, &x, &y).unwrap();
        let (losses_b, flat_b) = d_loss_real_batch(&d, &x, &y).unwrap();
        assert_eq!(losses_pe, losses_b);
        assert_eq!(grads_pe.sum_examples(), flat_b);

        let (losses_pe, grads_pe) = d_loss_fake_grads(&d, &x, &y).unwrap();
        let (losses_b, flat_b) = d_loss_fake_batch(&d, &x, &y).unwrap();
        assert_eq!(losses_pe, losses_b);
        assert_eq!(grads_pe.sum_examples(), flat_b);
    }

    /// The generator chain exercises the batch backward pass with a
    /// *multi-column* output gradient (one column per pixel), unlike the
    /// single-sigmoid discriminator, so it gets its own mean-vs-per-example
    /// agreement check.
    #[test]
    fn mean_generator_gradient_matches_per_example_mean() {
        for non_saturating in [false, true] {
            let mut stream = RngStream::new(43);
            let g =
                MlpParams::two_layer(5, 6, 7, Activation::Relu, Activation::Sigmoid, &mut stream)
                    .unwrap();
            let d =
                MlpParams::two_layer(9, 5, 1, Activation::Relu, Activation::Sigmoid, &mut stream)
                    .unwrap();
            let z = Matrix::new(4, 3, (0..12).map(|i| ((i as f64) * 0.41) % 1.0 - 0.5).collect())
                .unwrap();
            let y = one_hot(&[0, 1, 1, 0], 2).unwrap();

            let (g_out, trace_g) = forward(&g, &z, &y).unwrap();
            let (grad_mean, _) =
                generator_gradient(&g, &d, &trace_g, &g_out, &y, non_saturating).unwrap();

            let (_, grads_pe) = g_loss_grads(&g, &d, &z, &y, non_saturating).unwrap();
            let sum = grads_pe.sum_examples();
            let bs = z.rows() as f64;
            for (j, (m, s)) in grad_mean.iter().zip(&sum).enumerate() {
                let want = s / bs;
                assert!(
                    (m - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "param {j} (non_saturating={non_saturating}): mean-path {m} vs \
                     per-example mean {want}"
                );
            }
        }
    }

    /// Central finite differences of a scalar loss over all params.
    fn fd_gradient(
        loss_at: &mut dyn FnMut(&MlpParams) -> f64,
        params: &MlpParams,
        h: f64,
    ) -> Vec<f64> {
        let dim = params.param_count();
        let mut grad = vec![0.0; dim];
        for j in 0..dim {
            let mut bump = vec![0.0; dim];
            bump[j] = h;
            let mut plus = params.clone();
            plus.axpy(1.0, &bump).unwrap();
            let mut minus = params.clone();
            minus.axpy(-1.0, &bump).unwrap();
            grad[j] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64) {
        for (j, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
            let denom = a.abs().max(f.abs()).max(1e-6);
            assert!(
                ((a - f) / denom).abs() < tol,
                "param {j}: analytic {a} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn summed_discriminator_loss_gradients_match_finite_differences() {
        let mut stream = RngStream::new(42);
        let d = MlpParams::two_layer(5, 4, 1, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let x = gaussian(&mut stream, 3, 3);
        let fake = gaussian(&mut stream, 3, 3);
        let y = one_hot(&[0, 1, 0], 2).unwrap();

        let (losses, grads) = d_loss_real_grads(&d, &x, &y).unwrap();
        assert_eq!(losses.len(), 3);
        let analytic = grads.sum_examples();
        let fd = fd_gradient(
            &mut |p| {
                discriminator_losses(p, &x, &y, &fake, &y)
                    .unwrap()
                    .0
                    .iter()
                    .sum()
            },
            &d,
            1e-5,
        );
        assert_close(&analytic, &fd, 1e-4);

        let (_, grads_fake) = d_loss_fake_grads(&d, &fake, &y).unwrap();
        let analytic = grads_fake.sum_examples();
        let fd = fd_gradient(
            &mut |p| {
                discriminator_losses(p, &x, &y, &fake, &y)
                    .unwrap()
                    .1
                    .iter()
                    .sum()
            },
            &d,
            1e-5,
        );
        assert_close(&analytic, &fd, 1e-4);
    }

    fn gaussian(stream: &mut RngStream, rows: usize, cols: usize) -> Matrix {
        crate::rng::gaussian_sample(rows, cols, 0.8, stream)
            .unwrap()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    #[test]
    fn generator_loss_gradients_match_finite_differences() {
        for non_saturating in [false, true] {
            let mut stream = RngStream::new(77);
            let g = MlpParams::two_layer(
                4,
                5,
                3,
                Activation::Relu,
                Activation::Sigmoid,
                &mut stream,
            )
            .unwrap();
            let d = MlpParams::two_layer(
                5,
                4,
                1,
                Activation::Relu,
                Activation::Sigmoid,
                &mut stream,
            )
            .unwrap();
            let z = crate::rng::gaussian_sample(3, 2, 1.0, &mut stream).unwrap();
            let y = one_hot(&[0, 1, 1], 2).unwrap();

            let (losses, grads) = g_loss_grads(&g, &d, &z, &y, non_saturating).unwrap();
            assert_eq!(losses.len(), 3);
            let analytic = grads.sum_examples();
            let fd = fd_gradient(
                &mut |p| {
                    let (g_out, _) = forward(p, &z, &y).unwrap();
                    generator_loss(&d, &g_out, &y, non_saturating)
                        .unwrap()
                        .iter()
                        .sum()
                },
                &g,
                1e-5,
            );
            assert_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn per_example_generator_grads_sum_to_the_scaled_mean_gradient() {
        let mut stream = RngStream::new(12);
        let g = MlpParams::two_layer(4, 5, 3, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let d = MlpParams::two_layer(5, 4, 1, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let z = crate::rng::gaussian_sample(4, 2, 1.0, &mut stream).unwrap();
        let y = one_hot(&[0, 1, 1, 0], 2).unwrap();
        let (g_out, trace_g) = forward(&g, &z, &y).unwrap();

        let (_, per_example) = g_loss_grads(&g, &d, &z, &y, false).unwrap();
        let summed = per_example.sum_examples();
        let (mean_grad, _) =
            generator_gradient(&g, &d, &trace_g, &g_out, &y, false).unwrap();
        for (s, m) in summed.iter().zip(mean_grad.iter()) {
            assert!((s / 4.0 - m).abs() < 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn max_steps_halt_runs_exactly_that_many_steps() {
        let ds = toy_dataset(8, 4, 2);
        let cfg = tiny_config();
        let (pair, report, accountant) = train(&ds, &cfg).unwrap();
        assert_eq!(report.steps_run, 3);
        assert_eq!(report.halt_reason, HaltReason::MaxSteps);
        assert_eq!(pair.step, 3);
        assert_eq!(accountant.steps(), 3);
        assert_eq!(pair.adam_state.timestep(), 3);
        assert!(!report.loss_samples.is_empty());
    }

    #[test]
    fn budget_below_one_step_halts_after_exactly_one_step() {
        let ds = toy_dataset(8, 4, 2);
        let mut cfg = tiny_config();
        cfg.max_steps = 50;
        cfg.target_epsilon = 0.001;
        let (_, report, accountant) = train(&ds, &cfg).unwrap();
        assert_eq!(report.steps_run, 1);
        assert_eq!(report.halt_reason, HaltReason::BudgetExhausted);
        assert_eq!(accountant.steps(), 1);
        assert!(report.final_spend.epsilon > cfg.target_epsilon);
    }

    #[test]
    fn budget_halt_overshoots_by_at_most_one_step() {
        let ds = toy_dataset(8, 4, 2);
        let mut cfg = tiny_config();
        cfg.max_steps = 10_000;
        cfg.batch_size = 4; // q = 0.5: substantial per-step spend
        cfg.noise_multiplier = 3.0; // slow the spend so the halt lands mid-run
        cfg.target_epsilon = 2.0;
        let (_, report, accountant) = train(&ds, &cfg).unwrap();
        assert_eq!(report.halt_reason, HaltReason::BudgetExhausted);
        assert!(report.final_spend.epsilon > cfg.target_epsilon);
        assert!(accountant.steps() >= 2, "halt should land mid-run");
        // One step earlier the budget must still have been within target.
        let minus_one = AccountantState::new(*accountant.params())
            .unwrap()
            .accumulate_step(accountant.steps() - 1)
            .unwrap();
        assert!(
            minus_one
                .to_epsilon_delta(cfg.target_delta)
                .unwrap()
                .epsilon
                <= cfg.target_epsilon
        );
    }

    #[test]
    fn non_private_mode_skips_accounting_and_learns_the_toy_set() {
        let ds = toy_dataset(8, 4, 2);
        let mut cfg = tiny_config();
        cfg.dp_mode = DpMode::None;
        cfg.noise_multiplier = 0.0;
        cfg.max_steps = 200;
        cfg.lr.initial = 0.15;
        cfg.lr.final_value = 0.052;
        cfg.lr.decay_end_step = 200;
        let (_, report, accountant) = train(&ds, &cfg).unwrap();
        assert_eq!(accountant.steps(), 0);
        assert_eq!(report.steps_run, 200);
        assert_eq!(report.halt_reason, HaltReason::MaxSteps);
        let first = &report.loss_samples[0];
        let last = report.loss_samples.last().unwrap();
        let start = first.d_loss_real + first.d_loss_fake;
        let end = last.d_loss_real + last.d_loss_fake;
        assert!(
            end < start,
            "discriminator loss should decrease: {start} → {end}"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = toy_dataset(10, 4, 2);
        let mut cfg = tiny_config();
        cfg.max_steps = 5;
        let (pair_a, report_a, acc_a) = train(&ds, &cfg).unwrap();
        let (pair_b, report_b, acc_b) = train(&ds, &cfg).unwrap();
        assert_eq!(pair_a.generator.to_flat(), pair_b.generator.to_flat());
        assert_eq!(pair_a.discriminator.to_flat(), pair_b.discriminator.to_flat());
        assert_eq!(report_a, report_b);
        assert_eq!(acc_a.to_snapshot_text(), acc_b.to_snapshot_text());
    }

    #[test]
    fn one_training_step_is_reconstructible_from_noised_artifacts_only() {
        // Audits the step's data flow: replaying the loop body by hand —
        // public draws, per-example clipping, one noise draw, SGD, then a
        // generator step that reads only the *updated* discriminator —
        // reproduces train()'s output bit for bit.
        let ds = toy_dataset(8, 4, 2);
        let mut cfg = tiny_config();
        cfg.max_steps = 1;
        let (pair, _, _) = train(&ds, &cfg).unwrap();

        let mut params_stream = RngStream::new(cfg.seed_params);
        let mut noise_stream = RngStream::new(cfg.seed_noise);
        let mut sampling_stream = RngStream::new(cfg.seed_sampling);
        let g0 = MlpParams::two_layer(
            cfg.latent_dim + 2,
            cfg.gen_hidden_dim,
            4,
            Activation::Relu,
            Activation::Sigmoid,
            &mut params_stream,
        )
        .unwrap();
        let d0 = MlpParams::two_layer(
            4 + 2,
            cfg.disc_hidden_dim,
            1,
            Activation::Relu,
            Activation::Sigmoid,
            &mut params_stream,
        )
        .unwrap();

        let (x, y) = sample_batch(&ds, cfg.batch_size, &mut sampling_stream).unwrap();
        let bs = x.rows();
        let z = uniform_latent(bs, cfg.latent_dim, &mut sampling_stream).unwrap();
        let yf = uniform_fake_labels(bs, 2, &mut sampling_stream).unwrap();
        let (g_out, trace_g) = forward(&g0, &z, &yf).unwrap();

        let clip = ClipNorm::new(cfg.clip_norm).unwrap();
        let (_, grads_real) = d_loss_real_grads(&d0, &x, &y).unwrap();
        let (_, grads_fake) = d_loss_fake_grads(&d0, &g_out, &yf).unwrap();
        let grad_d = dp::aggregate_and_noise(
            &dp::clip_per_example(&grads_real, clip),
            &dp::clip_per_example(&grads_fake, clip),
            cfg.noise_multiplier,
            clip,
            cfg.sensitivity_multiplier,
            &mut noise_stream,
        )
        .unwrap();
        let d1 = dp::sgd_step(&d0, &grad_d, learning_rate(0, &cfg.lr)).unwrap();

        // Generator step from public artifacts alone: noised d1, z, yf.
        let (grad_g, _) =
            generator_gradient(&g0, &d1, &trace_g, &g_out, &yf, cfg.non_saturating).unwrap();
        let adam = AdamState::with_defaults(g0.param_count());
        let (g1, _) = dp::adam_step(&g0, &grad_g, &adam, cfg.gen_lr).unwrap();

        assert_eq!(pair.discriminator.to_flat(), d1.to_flat());
        assert_eq!(pair.generator.to_flat(), g1.to_flat());
    }

    #[test]
    fn invalid_config_fails_before_training() {
        let ds = toy_dataset(8, 4, 2);
        let mut cfg = tiny_config();
        cfg.batch_size = 0;
        assert!(matches!(train(&ds, &cfg), Err(Error::Param(_))));

        let single_class = LabeledDataset::new(
            Matrix::zeros(4, 4),
            one_hot(&[0, 0, 0, 0], 1).unwrap(),
        )
        .unwrap();
        assert!(train(&single_class, &tiny_config()).is_err());
    }

    #[test]
    fn zero_weight_generator_emits_half_gray_images() {
        let mut stream = RngStream::new(3);
        let g = zeroed(
            &MlpParams::two_layer(5, 4, 6, Activation::Relu, Activation::Sigmoid, &mut stream)
                .unwrap(),
        );
        let labels = one_hot(&[0, 1, 2], 3).unwrap();
        let mut gen_stream = RngStream::new(11);
        let ds = generate(&g, &labels, &mut gen_stream).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.images().data().iter().all(|&p| p == 0.5));
        assert_eq!(ds.labels(), &labels);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let mut stream = RngStream::new(3);
        let g = MlpParams::two_layer(5, 4, 6, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let labels = balanced_one_hot(2, 3).unwrap();
        let a = generate(&g, &labels, &mut RngStream::new(7)).unwrap();
        let b = generate(&g, &labels, &mut RngStream::new(7)).unwrap();
        let c = generate(&g, &labels, &mut RngStream::new(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generate_rejects_soft_labels() {
        let mut stream = RngStream::new(3);
        let g = MlpParams::two_layer(5, 4, 6, Activation::Relu, Activation::Sigmoid, &mut stream)
            .unwrap();
        let mut labels = Matrix::zeros(2, 3);
        labels.set(0, 0, 0.5);
        labels.set(0, 1, 0.5);
        labels.set(1, 2, 1.0);
        assert!(matches!(
            generate(&g, &labels, &mut RngStream::new(1)),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn balanced_labels_cover_classes_in_order() {
        let m = balanced_one_hot(3, 4).unwrap();
        assert_eq!(m.rows(), 12);
        assert_eq!(m.cols(), 4);
        for i in 0..12 {
            let class = m.row(i).iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(class, i / 3);
        }
        assert!(balanced_one_hot(0, 4).is_err());
    }
}
