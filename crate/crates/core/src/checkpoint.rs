//! Binary checkpoint container: trained parameters, Adam state, the
//! accountant snapshot, RNG stream positions, and the resolved config —
//! everything needed to resume or regenerate bit-identically.

use std::fs;
use std::path::Path;

use crate::accountant::AccountantState;
use crate::config::TrainConfig;
use crate::dp::AdamState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, DenseLayer, MlpParams};
use crate::rng::StreamState;
use crate::train::StreamStates;

const MAGIC: &[u8; 8] = b"DPCGCKPT";
const VERSION: u32 = 1;

/// Everything a training run needs to persist.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    pub adam: AdamState,
    pub accountant: AccountantState,
    pub streams: StreamStates,
}

fn activation_byte(a: &Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Tanh => 2,
        Activation::Softmax => 3,
        Activation::Identity => 4,
    }
}

fn activation_from_byte(b: u8) -> Option<Activation> {
    match b {
        0 => Some(Activation::Relu),
        1 => Some(Activation::Sigmoid),
        2 => Some(Activation::Tanh),
        3 => Some(Activation::Softmax),
        4 => Some(Activation::Identity),
        _ => None,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn mlp(&mut self, params: &MlpParams) {
        self.u32(params.layers().len() as u32);
        for layer in params.layers() {
            self.u32(layer.weights.rows() as u32);
            self.u32(layer.weights.cols() as u32);
            self.u8(activation_byte(&layer.activation));
            for &w in layer.weights.data() {
                self.f64(w);
            }
            for &b in &layer.bias {
                self.f64(b);
            }
        }
    }

    fn stream(&mut self, s: &StreamState) {
        self.u64(s.seed);
        self.u128(s.word_pos);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            message: format!("{} (at byte {})", message.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() / 8 {
            return Err(self.corrupt(format!("implausible vector length {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(self.corrupt(format!("implausible text length {n}")));
        }
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("embedded text is not UTF-8"))
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let n_layers = self.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(self.corrupt(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let act_byte = self.u8()?;
            let activation = activation_from_byte(act_byte)
                .ok_or_else(|| self.corrupt(format!("unknown activation code {act_byte}")))?;
            if rows == 0 || cols == 0 || rows.saturating_mul(cols) > self.bytes.len() / 8 {
                return Err(self.corrupt(format!("implausible layer shape {rows}×{cols}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(self.f64()?);
            }
            let weights = Matrix::new(rows, cols, data)
                .map_err(|e| self.corrupt(format!("bad weight matrix: {e}")))?;
            let mut bias = Vec::with_capacity(cols);
            for _ in 0..cols {
                bias.push(self.f64()?);
            }
            if bias.iter().any(|b| !b.is_finite()) {
                return Err(self.corrupt("non-finite bias"));
            }
            layers.push(DenseLayer {
                weights,
                bias,
                activation,
            });
        }
        MlpParams::new(layers).map_err(|e| self.corrupt(format!("inconsistent layers: {e}")))
    }

    fn stream(&mut self) -> Result<StreamState> {
        Ok(StreamState {
            seed: self.u64()?,
            word_pos: self.u128()?,
        })
    }
}

/// Serializes a checkpoint to its stable little-endian byte layout.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.text(&ckpt.config.to_text());
    w.u64(ckpt.step);
    w.mlp(&ckpt.generator);
    w.mlp(&ckpt.discriminator);
    let (m, v) = ckpt.adam.moments();
    let (beta1, beta2, eps) = ckpt.adam.hyperparams();
    w.u64(ckpt.adam.timestep());
    w.f64(beta1);
    w.f64(beta2);
    w.f64(eps);
    w.f64_slice(m);
    w.f64_slice(v);
    w.text(&ckpt.accountant.to_snapshot_text());
    w.stream(&ckpt.streams.params);
    w.stream(&ckpt.streams.noise);
    w.stream(&ckpt.streams.sampling);
    w.buf
}

/// Writes the checkpoint file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(ckpt)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads and fully validates a checkpoint; any inconsistency is a corrupt-
/// artifact error (exit code 4), while a missing file stays an I/O error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };

    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Corrupt {
            path: r.path.clone(),
            message: "bad magic: not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version} (expected {VERSION})")));
    }
    let config_text = r.text()?;
    let config = TrainConfig::from_text(&config_text)
        .map_err(|e| r.corrupt(format!("embedded config does not parse: {e}")))?;
    let step = r.u64()?;
    let generator = r.mlp()?;
    let discriminator = r.mlp()?;
    let t = r.u64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let m = r.f64_vec()?;
    let v = r.f64_vec()?;
    let adam = AdamState::from_parts(m, v, t, beta1, beta2, eps)
        .map_err(|e| r.corrupt(format!("bad Adam state: {e}")))?;
    let snapshot_text = r.text()?;
    let accountant = AccountantState::from_snapshot_text(&snapshot_text, &r.path)?;
    let streams = StreamStates {
        params: r.stream()?,
        noise: r.stream()?,
        sampling: r.stream()?,
    };
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    if adam.moments().0.len() != generator.param_count() {
        return Err(r.corrupt(format!(
            "Adam state dim {} does not match generator parameter count {}",
            adam.moments().0.len(),
            generator.param_count()
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        generator,
        discriminator,
        adam,
        accountant,
        streams,
    })
}
