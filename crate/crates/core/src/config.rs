//! Training configuration: every knob the training loop reads, a flat
//! `key = value` text form shared by config files, checkpoints, and run
//! manifests, and the validation gate applied before any training starts.

use crate::dp::DpMode;
use crate::error::{Error, Result};

/// Learning-rate schedule for the discriminator: linear interpolation from
/// `initial` to `final_value` over `[0, decay_end_step]`, constant afterwards;
/// `step_drop` switches to a hard drop at `decay_end_step` instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_value: f64,
    pub decay_end_step: u64,
    pub step_drop: bool,
}

/// All inputs of one training run. Construct via `Default`, a config file,
/// or CLI flags; `validate` must pass before training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// L2 clip bound C applied to per-example gradients.
    pub clip_norm: f64,
    /// Noise scale σ (noise stddev is σ·C·sensitivity_multiplier).
    pub noise_multiplier: f64,
    /// Expected batch size bs; the Poisson rate is q = bs/N.
    pub batch_size: usize,
    /// Privacy budget: halt once spent ε exceeds this.
    pub target_epsilon: f64,
    /// Privacy budget δ.
    pub target_delta: f64,
    /// Hard cap on training steps.
    pub max_steps: u64,
    /// Privatization strategy for the discriminator update.
    pub dp_mode: DpMode,
    /// Discriminator learning-rate schedule.
    pub lr: LrSchedule,
    /// Seed for parameter initialization.
    pub seed_params: u64,
    /// Seed for DP noise draws.
    pub seed_noise: u64,
    /// Seed for batch subsampling, latent draws, and fake labels.
    pub seed_sampling: u64,
    /// Generator latent dimension.
    pub latent_dim: usize,
    /// Generator hidden width.
    pub gen_hidden_dim: usize,
    /// Discriminator hidden width.
    pub disc_hidden_dim: usize,
    /// Scales the noise stddev relative to C: 1 matches the pseudocode's σC;
    /// 2 noises at the 2C sensitivity that separate clipping implies.
    pub sensitivity_multiplier: f64,
    /// Use the non-saturating generator loss −log D(G(z)) instead of the
    /// saturating log(1 − D(G(z))).
    pub non_saturating: bool,
    /// Generator Adam learning rate.
    pub gen_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.1,
            batch_size: 600,
            target_epsilon: 9.6,
            target_delta: 1e-5,
            max_steps: 10_000,
            dp_mode: DpMode::SplitClip,
            lr: LrSchedule {
                initial: 0.15,
                final_value: 0.052,
                decay_end_step: 10_000,
                step_drop: false,
            },
            seed_params: 1,
            seed_noise: 2,
            seed_sampling: 3,
            latent_dim: 100,
            gen_hidden_dim: 128,
            disc_hidden_dim: 128,
            sensitivity_multiplier: 1.0,
            non_saturating: false,
            gen_lr: 2e-4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config {
            key: key.to_string(),
            message: format!("expected true or false, got `{other}`"),
        }),
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment; unknown keys are config errors
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "noise_multiplier" => self.noise_multiplier = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "target_epsilon" => self.target_epsilon = parse_num(key, value)?,
            "target_delta" => self.target_delta = parse_num(key, value)?,
            "max_steps" => self.max_steps = parse_num(key, value)?,
            "dp_mode" => {
                self.dp_mode = DpMode::parse(value.trim()).map_err(|e| Error::Config {
                    key: key.to_string(),
                    message: e.to_string(),
                })?
            }
            "lr_initial" => self.lr.initial = parse_num(key, value)?,
            "lr_final" => self.lr.final_value = parse_num(key, value)?,
            "lr_decay_end_step" => self.lr.decay_end_step = parse_num(key, value)?,
            "lr_step_drop" => self.lr.step_drop = parse_bool(key, value)?,
            "seed_params" => self.seed_params = parse_num(key, value)?,
            "seed_noise" => self.seed_noise = parse_num(key, value)?,
            "seed_sampling" => self.seed_sampling = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "gen_hidden_dim" => self.gen_hidden_dim = parse_num(key, value)?,
            "disc_hidden_dim" => self.disc_hidden_dim = parse_num(key, value)?,
            "sensitivity_multiplier" => self.sensitivity_multiplier = parse_num(key, value)?,
            "non_saturating" => self.non_saturating = parse_bool(key, value)?,
            "gen_lr" => self.gen_lr = parse_num(key, value)?,
            other => {
                return Err(Error::Config {
                    key: other.to_string(),
                    message: "unknown key".to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses a flat `key = value` config text on top of the defaults.
    /// Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies a config text's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                message: "expected `key = value`".to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Serializes every field as `key = value`, one per line, in a fixed
    /// order. `from_text` inverts this exactly (f64 Display round-trips).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("clip_norm", self.clip_norm.to_string());
        push("noise_multiplier", self.noise_multiplier.to_string());
        push("batch_size", self.batch_size.to_string());
        push("target_epsilon", self.target_epsilon.to_string());
        push("target_delta", self.target_delta.to_string());
        push("max_steps", self.max_steps.to_string());
        push("dp_mode", self.dp_mode.as_str().to_string());
        push("lr_initial", self.lr.initial.to_string());
        push("lr_final", self.lr.final_value.to_string());
        push("lr_decay_end_step", self.lr.decay_end_step.to_string());
        push("lr_step_drop", self.lr.step_drop.to_string());
        push("seed_params", self.seed_params.to_string());
        push("seed_noise", self.seed_noise.to_string());
        push("seed_sampling", self.seed_sampling.to_string());
        push("latent_dim", self.latent_dim.to_string());
        push("gen_hidden_dim", self.gen_hidden_dim.to_string());
        push("disc_hidden_dim", self.disc_hidden_dim.to_string());
        push("sensitivity_multiplier", self.sensitivity_multiplier.to_string());
        push("non_saturating", self.non_saturating.to_string());
        push("gen_lr", self.gen_lr.to_string());
        s
    }

    /// Checks every invariant; called before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Param("batch_size must be ≥ 1".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Param("max_steps must be ≥ 1".into()));
        }
        if !(self.target_epsilon > 0.0) {
            return Err(Error::Param(format!(
                "target_epsilon must be > 0, got {}",
                self.target_epsilon
            )));
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(Error::Param(format!(
                "target_delta must lie in (0,1), got {}",
                self.target_delta
            )));
        }
        if self.latent_dim < 1 {
            return Err(Error::Param("latent_dim must be ≥ 1".into()));
        }
        if self.gen_hidden_dim < 1 || self.disc_hidden_dim < 1 {
            return Err(Error::Param("hidden dims must be ≥ 1".into()));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::Param(format!(
                "clip_norm must be positive and finite, got {}",
                self.clip_norm
            )));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::Param(format!(
                "noise_multiplier must be ≥ 0 and finite, got {}",
                self.noise_multiplier
            )));
        }
        if self.dp_mode != DpMode::None && self.noise_multiplier == 0.0 {
            return Err(Error::Param(
                "noise_multiplier must be > 0 unless dp_mode is none".into(),
            ));
        }
        if !(self.sensitivity_multiplier > 0.0) || !self.sensitivity_multiplier.is_finite() {
            return Err(Error::Param(format!(
                "sensitivity_multiplier must be positive, got {}",
                self.sensitivity_multiplier
            )));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.final_value > 0.0) {
            return Err(Error::Param(
                "learning-rate schedule endpoints must be positive".into(),
            ));
        }
        if !(self.gen_lr > 0.0) || !self.gen_lr.is_finite() {
            return Err(Error::Param(format!(
                "gen_lr must be positive, got {}",
                self.gen_lr
            )));
        }
        Ok(())
    }
}

/// Provenance record written beside every artifact: the resolved config,
/// involved paths, a timestamp, and the tool version.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: TrainConfig) -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp_unix,
        }
    }

    pub fn input(mut self, name: &str, path: impl AsRef<std::path::Path>) -> Self {
        self.inputs
            .push((name.to_string(), path.as_ref().display().to_string()));
        self
    }

    pub fn output(mut self, name: &str, path: impl AsRef<std::path::Path>) -> Self {
        self.outputs
            .push((name.to_string(), path.as_ref().display().to_string()));
        self
    }

    /// Flat text form: run metadata first, then the full config under a
    /// comment header. Timestamp lines are the only run-to-run variance.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("tool_version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("timestamp_unix = {}\n", self.timestamp_unix));
        for (name, path) in &self.inputs {
            s.push_str(&format!("input_{name} = {path}\n"));
        }
        for (name, path) in &self.outputs {
            s.push_str(&format!("output_{name} = {path}\n"));
        }
        s.push_str("# resolved configuration\n");
        s.push_str(&self.config.to_text());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_the_documented_values() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.clip_norm, 1.0);
        assert_eq!(cfg.noise_multiplier, 1.1);
        assert_eq!(cfg.batch_size, 600);
        assert_eq!(cfg.target_epsilon, 9.6);
        assert_eq!(cfg.target_delta, 1e-5);
        assert_eq!(cfg.max_steps, 10_000);
        assert_eq!(cfg.dp_mode, DpMode::SplitClip);
        assert_eq!(cfg.lr.initial, 0.15);
        assert_eq!(cfg.lr.final_value, 0.052);
        assert_eq!(cfg.lr.decay_end_step, 10_000);
        assert_eq!(cfg.latent_dim, 100);
        assert_eq!(cfg.sensitivity_multiplier, 1.0);
        assert_eq!(cfg.gen_lr, 2e-4);
    }

    #[test]
    fn text_round_trip_is_identity() {
        let mut cfg = TrainConfig::default();
        cfg.noise_multiplier = 2.34567;
        cfg.target_delta = 1e-6;
        cfg.dp_mode = DpMode::CombinedClip;
        cfg.lr.step_drop = true;
        cfg.seed_noise = 987654321;
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_is_a_config_error_naming_the_key() {
        match TrainConfig::from_text("bogus_key = 3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus_key"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_value_is_a_config_error() {
        match TrainConfig::from_text("batch_size = many\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(TrainConfig::from_text("non_saturating = yes\n").is_err());
        assert!(TrainConfig::from_text("just a line\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg =
            TrainConfig::from_text("# a comment\n\nbatch_size = 32\n  # another\n").unwrap();
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.target_epsilon = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.target_delta = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.max_steps = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.clip_norm = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.noise_multiplier = 0.0;
        assert!(cfg.validate().is_err()); // σ=0 only allowed in mode none
        cfg.dp_mode = DpMode::None;
        cfg.validate().unwrap();
    }

    #[test]
    fn infinite_target_epsilon_is_allowed() {
        let mut cfg = TrainConfig::default();
        cfg.target_epsilon = f64::INFINITY;
        cfg.validate().unwrap();
    }

    #[test]
    fn manifest_text_carries_paths_and_config() {
        let manifest = RunManifest::new("train", TrainConfig::default())
            .input("images", "/data/train-images.idx")
            .output("checkpoint", "/out/model.ckpt");
        let text = manifest.to_text();
        assert!(text.contains("command = train\n"));
        assert!(text.contains("input_images = /data/train-images.idx\n"));
        assert!(text.contains("output_checkpoint = /out/model.ckpt\n"));
        assert!(text.contains("batch_size = 600\n"));
        assert!(text.contains("timestamp_unix = "));
    }
}
