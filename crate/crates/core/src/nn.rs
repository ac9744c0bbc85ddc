//! Dense two-layer networks with batch and per-example backpropagation.
//!
//! Parameters flatten to a single `Vec<f64>` in a fixed layout (layer 0
//! weights row-major, layer 0 bias, layer 1 weights, …) shared by gradients,
//! optimizer state, and checkpoints. Per-example gradients sum to the batch
//! gradient bit-for-bit because both paths accumulate in example order.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;
use rayon::prelude::*;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` wherever they
/// are materialized, keeping log-losses and their gradients finite.
pub const PROB_CLAMP: f64 = 1e-7;

/// Elementwise (or row-wise, for softmax) activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Identity,
}

/// Numerically stable logistic function with output clamped away from {0, 1}.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl Activation {
    /// Applies the activation to a batch of pre-activations.
    pub fn apply(&self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Tanh => pre.map(f64::tanh),
            Activation::Identity => pre.map(|v| v),
            Activation::Softmax => {
                let mut out = Matrix::zeros(pre.rows(), pre.cols());
                let cols = pre.cols();
                for r in 0..pre.rows() {
                    let row = pre.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let mut exps = vec![0.0; cols];
                    for (e, &v) in exps.iter_mut().zip(row.iter()) {
                        *e = (v - max).exp();
                        sum += *e;
                    }
                    for (c, e) in exps.iter().enumerate() {
                        out.set(r, c, (e / sum).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
                    }
                }
                out
            }
        }
    }

    /// Pulls a gradient back through the activation:
    /// given dL/d(activation), returns dL/d(pre-activation).
    fn backprop(&self, pre: &Matrix, act: &Matrix, dact: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(dact.rows(), dact.cols());
        match self {
            Activation::Relu => {
                for i in 0..out.data().len() {
                    out.data_mut()[i] = if pre.data()[i] > 0.0 { dact.data()[i] } else { 0.0 };
                }
            }
            Activation::Sigmoid => {
                for i in 0..out.data().len() {
                    let a = act.data()[i];
                    out.data_mut()[i] = dact.data()[i] * a * (1.0 - a);
                }
            }
            Activation::Tanh => {
                for i in 0..out.data().len() {
                    let a = act.data()[i];
                    out.data_mut()[i] = dact.data()[i] * (1.0 - a * a);
                }
            }
            Activation::Identity => {
                out.data_mut().copy_from_slice(dact.data());
            }
            Activation::Softmax => {
                // Full per-row Jacobian: dz_j = a_j (da_j − Σ_k da_k a_k).
                let cols = dact.cols();
                for r in 0..dact.rows() {
                    let a = act.row(r);
                    let d = dact.row(r);
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += d[c] * a[c];
                    }
                    for c in 0..cols {
                        out.set(r, c, a[c] * (d[c] - dot));
                    }
                }
            }
        }
        out
    }
}

/// One dense layer: `act(x · weights + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out` weight matrix.
    pub weights: Matrix,
    /// Per-output bias.
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A dense network: an ordered stack of [`DenseLayer`]s with chained dims.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
}

impl MlpParams {
    /// Validates dimension chaining and wraps the layers.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Param("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.cols() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} vs {} outputs",
                    layer.bias.len(),
                    layer.weights.cols()
                )));
            }
            if i > 0 && layers[i - 1].weights.cols() != layer.weights.rows() {
                return Err(Error::Shape(format!(
                    "layer {i}: expects {} inputs but layer {} emits {}",
                    layer.weights.rows(),
                    i - 1,
                    layers[i - 1].weights.cols()
                )));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Standard two-layer network: weights ~ N(0, 1/fan_in), zero biases.
    pub fn two_layer(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
        stream: &mut RngStream,
    ) -> Result<Self> {
        MlpParams::new(vec![
            init_layer(in_dim, hidden_dim, hidden_act, stream)?,
            init_layer(hidden_dim, out_dim, output_act, stream)?,
        ])
    }

    /// Single dense layer (logistic-regression classifier).
    pub fn single_layer(
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        stream: &mut RngStream,
    ) -> Result<Self> {
        MlpParams::new(vec![init_layer(in_dim, out_dim, act, stream)?])
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Input width of the first layer (data columns + condition columns).
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    /// Output width of the last layer.
    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weights.cols()
    }

    /// `(in, out)` of every layer, the shape key for gradient sets.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.weights.rows(), l.weights.cols()))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// Flattens all parameters in the canonical layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// In-place `params += scale · flat` over the canonical layout.
    pub fn axpy(&mut self, scale: f64, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat gradient length {} vs {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let w_len = layer.weights.data().len();
            for (p, &g) in layer
                .weights
                .data_mut()
                .iter_mut()
                .zip(&flat[off..off + w_len])
            {
                *p += scale * g;
            }
            off += w_len;
            let b_len = layer.bias.len();
            for (p, &g) in layer.bias.iter_mut().zip(&flat[off..off + b_len]) {
                *p += scale * g;
            }
            off += b_len;
        }
        Ok(())
    }
}

fn init_layer(
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    stream: &mut RngStream,
) -> Result<DenseLayer> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::Param("layer dimensions must be ≥ 1".into()));
    }
    let stddev = (1.0 / in_dim as f64).sqrt();
    let weights = crate::rng::gaussian_sample(in_dim, out_dim, stddev, stream)?;
    Ok(DenseLayer {
        weights,
        bias: vec![0.0; out_dim],
        activation,
    })
}

/// Everything backward needs: the (condition-augmented) input batch plus each
/// layer's pre-activations and activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[input ‖ condition]`, one row per example.
    pub input: Matrix,
    /// Pre-activations per layer.
    pub pre: Vec<Matrix>,
    /// Activations per layer; the last entry is the network output.
    pub act: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Runs the network on `[input ‖ condition]`, returning the output batch and
/// a trace sufficient for backpropagation. Pass a zero-column condition
/// matrix for unconditioned networks (classifiers).
pub fn forward(
    params: &MlpParams,
    input: &Matrix,
    condition: &Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    if condition.rows() != input.rows() {
        return Err(Error::Shape(format!(
            "condition has {} rows but input has {}",
            condition.rows(),
            input.rows()
        )));
    }
    let x = input.hcat(condition)?;
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "network expects {} input columns, got {} (input {} + condition {})",
            params.input_dim(),
            x.cols(),
            input.cols(),
            condition.cols()
        )));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act = Vec::with_capacity(params.layers.len());
    let mut current = x.clone();
    for layer in &params.layers {
        let mut z = current.matmul(&layer.weights)?;
        z.add_row_vector(&layer.bias)?;
        let a = layer.activation.apply(&z);
        pre.push(z);
        act.push(a.clone());
        current = a;
    }
    Ok((
        current,
        ForwardTrace {
            input: x,
            pre,
            act,
        },
    ))
}

/// Per-example parameter gradients for a batch: one flat row per example in
/// the same layout as [`MlpParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradSet {
    batch_size: usize,
    dim: usize,
    /// `(in, out)` of each layer the rows mirror; empty for hand-built sets.
    shapes: Vec<(usize, usize)>,
    /// Row-major `batch_size × dim`.
    data: Vec<f64>,
}

impl PerExampleGradSet {
    /// An empty set meant as a reusable target for
    /// [`backward_per_example_into`]: refilling it keeps the backing
    /// allocation, so a training loop pays for each gradient buffer once
    /// instead of once per step. Most accessors are meaningless until the
    /// first refill.
    pub fn empty() -> Self {
        PerExampleGradSet {
            batch_size: 0,
            dim: 0,
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Builds a set from explicit flat per-example rows (test helper and
    /// baseline-mode plumbing).
    pub fn from_flat_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("gradient set needs batch_size ≥ 1".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("per-example rows have unequal lengths".into()));
        }
        Ok(PerExampleGradSet {
            batch_size: rows.len(),
            dim,
            shapes: Vec::new(),
            data: rows.concat(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Scalar parameters per example.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Layer shapes the rows mirror (empty when hand-built).
    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Flat gradient of example `i`.
    pub fn example(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Sums all examples in index order — the batch-summed gradient.
    pub fn sum_examples(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.batch_size {
            let row = self.example(i);
            for (o, &g) in out.iter_mut().zip(row.iter()) {
                *o += g;
            }
        }
        out
    }

    /// Mutates every example row in place through `f` (norm-scaling during
    /// clipping). Rows fan out to worker threads; each row is disjoint.
    pub(crate) fn for_each_row_mut(&mut self, f: impl Fn(usize, &mut [f64]) + Sync) {
        let dim = self.dim;
        self.data
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Layer deltas (dL/d pre-activation), shared by both backward entry points.
fn compute_deltas(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
) -> Result<Vec<Matrix>> {
    let n_layers = params.layers.len();
    if trace.pre.len() != n_layers || trace.act.len() != n_layers {
        return Err(Error::Shape(format!(
            "trace holds {} layers but params hold {n_layers}",
            trace.pre.len()
        )));
    }
    let batch = trace.batch_size();
    if dloss_doutput.rows() != batch || dloss_doutput.cols() != params.output_dim() {
        return Err(Error::Shape(format!(
            "dloss_doutput is {}x{}, expected {batch}x{}",
            dloss_doutput.rows(),
            dloss_doutput.cols(),
            params.output_dim()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let want = layer.weights.cols();
        if trace.pre[l].rows() != batch
            || trace.pre[l].cols() != want
            || trace.act[l].rows() != batch
            || trace.act[l].cols() != want
        {
            return Err(Error::Shape(format!(
                "trace layer {l} is {}x{}, params expect {batch}x{want}",
                trace.pre[l].rows(),
                trace.pre[l].cols()
            )));
        }
    }
    let mut deltas = vec![Matrix::zeros(0, 0); n_layers];
    let last = n_layers - 1;
    deltas[last] =
        params.layers[last]
            .activation
            .backprop(&trace.pre[last], &trace.act[last], dloss_doutput);
    for l in (0..last).rev() {
        // `delta · Wᵀ` as a streaming product against the materialized
        // transpose: same per-element accumulation order as a row dot
        // product (k ascending), so results are bit-identical, but the
        // inner loop vectorizes.
        let dact = deltas[l + 1].matmul(&params.layers[l + 1].weights.transpose())?;
        deltas[l] = params.layers[l]
            .activation
            .backprop(&trace.pre[l], &trace.act[l], &dact);
    }
    Ok(deltas)
}

/// Batch-summed gradient plus the gradient w.r.t. the (augmented) input.
///
/// The flat gradient accumulates over examples in index order, so it equals
/// [`PerExampleGradSet::sum_examples`] of [`backward_per_example`] bit for bit.
pub fn backward_batch(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let deltas = compute_deltas(params, trace, dloss_doutput)?;
    let flat = flatten_weight_gradients(params, trace, &deltas)?;
    let dinput = deltas[0].matmul(&params.layers[0].weights.transpose())?;
    Ok((flat, dinput))
}

/// [`backward_batch`] without the input gradient, for callers that only step
/// parameters — skips the `delta · Wᵀ` product against the widest layer.
pub(crate) fn backward_batch_weights(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
) -> Result<Vec<f64>> {
    let deltas = compute_deltas(params, trace, dloss_doutput)?;
    flatten_weight_gradients(params, trace, &deltas)
}

/// [`backward_batch`] without the parameter gradient, for chaining a loss
/// through frozen parameters into an upstream network.
pub(crate) fn backward_batch_dinput(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
) -> Result<Matrix> {
    let deltas = compute_deltas(params, trace, dloss_doutput)?;
    deltas[0].matmul(&params.layers[0].weights.transpose())
}

/// Batch-summed flat gradient shared by the two batch backward entry points.
fn flatten_weight_gradients(
    params: &MlpParams,
    trace: &ForwardTrace,
    deltas: &[Matrix],
) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(params.param_count());
    for (l, delta) in deltas.iter().enumerate() {
        let prev_act = if l == 0 { &trace.input } else { &trace.act[l - 1] };
        let dw = prev_act.matmul_tn(delta)?;
        flat.extend_from_slice(dw.data());
        flat.extend_from_slice(&column_sums(delta));
    }
    Ok(flat)
}

/// Per-example parameter gradients: row `i` is the gradient of example `i`'s
/// scalar loss with respect to every parameter.
pub fn backward_per_example(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
) -> Result<PerExampleGradSet> {
    let mut out = PerExampleGradSet::empty();
    backward_per_example_into(params, trace, dloss_doutput, &mut out)?;
    Ok(out)
}

/// [`backward_per_example`] writing into a caller-held set, reusing its
/// allocation. These buffers run to `batch × param_count` doubles — hundreds
/// of megabytes at realistic sizes — so a loop that refilled a fresh set each
/// step would spend most of its time in the allocator mapping and unmapping
/// pages. Every byte of every row is overwritten, so stale contents never
/// leak through.
pub fn backward_per_example_into(
    params: &MlpParams,
    trace: &ForwardTrace,
    dloss_doutput: &Matrix,
    out: &mut PerExampleGradSet,
) -> Result<()> {
    let deltas = compute_deltas(params, trace, dloss_doutput)?;
    let batch = trace.batch_size();
    let dim = params.param_count();
    out.batch_size = batch;
    out.dim = dim;
    out.shapes = params.layer_shapes();
    out.data.resize(batch * dim, 0.0);

    // Each example's row is an outer product per layer; examples fan out to
    // worker threads, each writing a disjoint row.
    out.data.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let mut off = 0;
        for (l, delta) in deltas.iter().enumerate() {
            let prev = if l == 0 {
                trace.input.row(i)
            } else {
                trace.act[l - 1].row(i)
            };
            let d = delta.row(i);
            let out_dim = d.len();
            for &a in prev {
                let dst = &mut row[off..off + out_dim];
                for (o, &dv) in dst.iter_mut().zip(d.iter()) {
                    *o = a * dv;
                }
                off += out_dim;
            }
            row[off..off + out_dim].copy_from_slice(d);
            off += out_dim;
        }
    });

    Ok(())
}

/// Column sums accumulated in row order (bit-stable against the per-example path).
fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r).iter()) {
            *o += v;
        }
    }
    out
}
