//! Run configuration and its flat `key = value` text format.
//!
//! Blank lines and anything after `#` are ignored. Every key may appear at
//! most once and unknown keys are rejected. [`RunManifest::to_text`] writes
//! every field, so parsing its output reproduces the manifest exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, JaggedSchedule, PruneCoupling, PruneOptions, PruneScope};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ordinary full-rank training.
    Full,
    /// Full-rank training of a model shrunk to the low-rank trainable count.
    Control,
    /// Low-rank training from scratch without restarts or warm start.
    Lora,
    /// Warm start, then restarted low-rank training.
    Relora,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Control => "control",
            Mode::Lora => "lora",
            Mode::Relora => "relora",
        }
    }

    pub fn needs_rank(self) -> bool {
        !matches!(self, Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "control" => Ok(Mode::Control),
            "lora" => Ok(Mode::Lora),
            "relora" => Ok(Mode::Relora),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected full, control, lora or relora)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReloraConfig {
    /// Required in every mode except `full`.
    pub rank: Option<usize>,
    /// Defaults to `1 / rank`.
    pub lora_scale: Option<f64>,
    pub reset_period: usize,
    pub warm_start_steps: usize,
    pub num_resets: usize,
    pub prune_ratio: f64,
    pub restart_warmup_steps: usize,
    pub enable_restarts: bool,
    pub enable_jagged: bool,
    pub enable_opt_reset: bool,
    pub enable_warm_start: bool,
    pub prune: PruneOptions,
}

impl Default for ReloraConfig {
    fn default() -> Self {
        ReloraConfig {
            rank: None,
            lora_scale: None,
            reset_period: 200,
            warm_start_steps: 200,
            num_resets: 3,
            prune_ratio: 0.99,
            restart_warmup_steps: 100,
            enable_restarts: true,
            enable_jagged: true,
            enable_opt_reset: true,
            enable_warm_start: true,
            prune: PruneOptions::default(),
        }
    }
}

impl ReloraConfig {
    pub fn rank(&self) -> Result<usize> {
        self.rank
            .ok_or_else(|| Error::Config("missing required config key `rank`".into()))
    }

    pub fn scale(&self) -> Result<f64> {
        Ok(self.lora_scale.unwrap_or(1.0 / self.rank()? as f64))
    }

    /// Step at which projections are wrapped.
    pub fn wrap_step(&self) -> usize {
        if self.enable_warm_start {
            self.warm_start_steps
        } else {
            0
        }
    }

    /// Merge-and-reinit boundaries `wrap_step + k * reset_period`.
    pub fn reset_steps(&self) -> Vec<usize> {
        if !self.enable_restarts {
            return Vec::new();
        }
        (1..=self.num_resets).map(|k| self.wrap_step() + k * self.reset_period).collect()
    }

    /// Sets the four ablation switches at once.
    pub fn with_flags(mut self, restarts: bool, jagged: bool, opt_reset: bool, warm_start: bool) -> Self {
        self.enable_restarts = restarts;
        self.enable_jagged = jagged;
        self.enable_opt_reset = opt_reset;
        self.enable_warm_start = warm_start;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub mode: Mode,
    pub seed: u64,
    pub dtype: DType,
    pub model: ModelConfig,
    pub relora: ReloraConfig,
    pub adam: AdamConfig,
    pub peak_lr: f64,
    /// Defaults to `warm_start_steps + num_resets * reset_period`.
    pub total_steps: Option<usize>,
    pub init_warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Defaults to `seed`.
    pub shuffle_seed: Option<u64>,
    pub data: Option<PathBuf>,
    /// Checked against the loaded corpus when present.
    pub corpus_fingerprint: Option<String>,
    pub eval_fraction: f64,
    /// Evaluation windows per evaluation; 0 uses the whole split.
    pub eval_windows: usize,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub warm_start_checkpoint: Option<PathBuf>,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl RunManifest {
    pub fn new(mode: Mode, model: ModelConfig) -> Self {
        RunManifest {
            mode,
            seed: 0,
            dtype: DType::F32,
            model,
            relora: ReloraConfig::default(),
            adam: AdamConfig::default(),
            peak_lr: 1e-3,
            total_steps: None,
            init_warmup_steps: 100,
            min_lr_ratio: 0.0,
            batch_size: 8,
            shuffle: true,
            shuffle_seed: None,
            data: None,
            corpus_fingerprint: None,
            eval_fraction: crate::data::EVAL_FRACTION,
            eval_windows: 256,
            out_dir: None,
            checkpoint_every: 0,
            log_every: 50,
            warm_start_checkpoint: None,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps.unwrap_or(self.relora.warm_start_steps + self.relora.num_resets * self.relora.reset_period)
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed)
    }

    pub fn batch_spec(&self) -> crate::data::BatchSpec {
        crate::data::BatchSpec {
            batch_size: self.batch_size,
            seq_len: self.model.seq_len,
            shuffle: self.shuffle,
            seed: self.shuffle_seed(),
        }
    }

    /// Learning-rate schedule implied by the mode and ablation switches.
    pub fn schedule(&self) -> JaggedSchedule {
        let restart_steps = match self.mode {
            Mode::Relora if self.relora.enable_jagged => self.relora.reset_steps(),
            _ => Vec::new(),
        };
        JaggedSchedule {
            peak_lr: self.peak_lr,
            total_steps: self.total_steps(),
            init_warmup_steps: self.init_warmup_steps.min(self.total_steps()),
            restart_steps: restart_steps.into_iter().filter(|&t| t <= self.total_steps()).collect(),
            restart_warmup_steps: self.relora.restart_warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.mode.needs_rank() {
            let r = self.relora.rank()?;
            if r == 0 {
                return Err(Error::Config("rank must be at least 1".into()));
            }
            let limit = self.model.hidden.min(self.model.ffn_hidden);
            if r > limit {
                return Err(Error::Rank(format!(
                    "rank {r} exceeds the smallest projection dimension {limit}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.relora.prune_ratio) {
            return Err(Error::Config(format!("prune_ratio must lie in [0, 1], got {}", self.relora.prune_ratio)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) || self.eval_fraction == 0.0 {
            return Err(Error::Config(format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction)));
        }
        if !(self.divergence_factor > 0.0) {
            return Err(Error::Config("divergence_factor must be positive".into()));
        }
        if self.mode == Mode::Relora {
            let r = &self.relora;
            if r.enable_restarts && r.reset_period == 0 {
                return Err(Error::Config("reset_period must be positive when restarts are enabled".into()));
            }
            let needed = r.wrap_step() + if r.enable_restarts { r.num_resets * r.reset_period } else { 0 };
            if self.total_steps() < needed {
                return Err(Error::Config(format!(
                    "total_steps {} is smaller than warm start plus resets ({needed})",
                    self.total_steps()
                )));
            }
        }
        self.schedule().validate()
    }

    /// Parses a config file. `mode_override` takes precedence over a `mode`
    /// key; one of them must be present.
    pub fn parse(text: &str, mode_override: Option<Mode>) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let file_mode: Option<Mode> = kv.opt("mode")?;
        let mode = mode_override
            .or(file_mode)
            .ok_or_else(|| Error::Config("missing required config key `mode`".into()))?;

        let hidden: usize = kv.req("hidden")?;
        let mut model = ModelConfig::new(hidden, kv.req("heads")?, kv.req("layers")?, kv.get_or("vocab", 256)?, kv.req("seq_len")?);
        model.ffn_hidden = kv.get_or("ffn_hidden", model.ffn_hidden)?;
        model.rope_base = kv.get_or("rope_base", model.rope_base)?;
        model.tie_embeddings = kv.get_or("tie_embeddings", model.tie_embeddings)?;
        model.init_std = kv.get_or("init_std", model.init_std)?;

        let d = ReloraConfig::default();
        let relora = ReloraConfig {
            rank: kv.opt("rank")?,
            lora_scale: kv.opt("lora_scale")?,
            reset_period: kv.get_or("reset_period", d.reset_period)?,
            warm_start_steps: kv.get_or("warm_start_steps", d.warm_start_steps)?,
            num_resets: kv.get_or("num_resets", d.num_resets)?,
            prune_ratio: kv.get_or("prune_ratio", d.prune_ratio)?,
            restart_warmup_steps: kv.get_or("restart_warmup_steps", d.restart_warmup_steps)?,
            enable_restarts: kv.get_or("enable_restarts", d.enable_restarts)?,
            enable_jagged: kv.get_or("enable_jagged", d.enable_jagged)?,
            enable_opt_reset: kv.get_or("enable_opt_reset", d.enable_opt_reset)?,
            enable_warm_start: kv.get_or("enable_warm_start", d.enable_warm_start)?,
            prune: PruneOptions {
                scope: kv.get_or("prune_scope", PruneScope::PerTensor)?,
                coupling: kv.get_or("prune_coupling", PruneCoupling::Independent)?,
            },
        };

        let a = AdamConfig::default();
        let adam = AdamConfig {
            beta1: kv.get_or("beta1", a.beta1)?,
            beta2: kv.get_or("beta2", a.beta2)?,
            eps: kv.get_or("eps", a.eps)?,
            weight_decay: kv.get_or("weight_decay", a.weight_decay)?,
            max_grad_norm: kv.get_or("max_grad_norm", a.max_grad_norm)?,
        };

        let base = RunManifest::new(mode, model.clone());
        let dtype = match kv.take("dtype") {
            Some(s) => DType::parse(&s).ok_or_else(|| Error::Config(format!("invalid value `{s}` for key `dtype`")))?,
            None => base.dtype,
        };
        let manifest = RunManifest {
            mode,
            seed: kv.get_or("seed", base.seed)?,
            dtype,
            model,
            relora,
            adam,
            peak_lr: kv.get_or("peak_lr", base.peak_lr)?,
            total_steps: kv.opt("total_steps")?,
            init_warmup_steps: kv.get_or("init_warmup_steps", base.init_warmup_steps)?,
            min_lr_ratio: kv.get_or("min_lr_ratio", base.min_lr_ratio)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            shuffle: kv.get_or("shuffle", base.shuffle)?,
            shuffle_seed: kv.opt("shuffle_seed")?,
            data: kv.take("data").map(PathBuf::from),
            corpus_fingerprint: kv.take("corpus_fingerprint"),
            eval_fraction: kv.get_or("eval_fraction", base.eval_fraction)?,
            eval_windows: kv.get_or("eval_windows", base.eval_windows)?,
            out_dir: kv.take("out_dir").map(PathBuf::from),
            checkpoint_every: kv.get_or("checkpoint_every", base.checkpoint_every)?,
            log_every: kv.get_or("log_every", base.log_every)?,
            warm_start_checkpoint: kv.take("warm_start_checkpoint").map(PathBuf::from),
            divergence_factor: kv.get_or("divergence_factor", base.divergence_factor)?,
            divergence_patience: kv.get_or("divergence_patience", base.divergence_patience)?,
        };
        kv.finish()?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Serializes every field; optional fields are written only when set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("mode", self.mode.to_string());
        put("seed", self.seed.to_string());
        put("dtype", self.dtype.to_string());
        let m = &self.model;
        put("hidden", m.hidden.to_string());
        put("heads", m.heads.to_string());
        put("layers", m.layers.to_string());
        put("vocab", m.vocab.to_string());
        put("seq_len", m.seq_len.to_string());
        put("ffn_hidden", m.ffn_hidden.to_string());
        put("rope_base", m.rope_base.to_string());
        put("tie_embeddings", m.tie_embeddings.to_string());
        put("init_std", m.init_std.to_string());
        let r = &self.relora;
        if let Some(rank) = r.rank {
            put("rank", rank.to_string());
        }
        if let Some(s) = r.lora_scale {
            put("lora_scale", s.to_string());
        }
        put("reset_period", r.reset_period.to_string());
        put("warm_start_steps", r.warm_start_steps.to_string());
        put("num_resets", r.num_resets.to_string());
        put("prune_ratio", r.prune_ratio.to_string());
        put("restart_warmup_steps", r.restart_warmup_steps.to_string());
        put("enable_restarts", r.enable_restarts.to_string());
        put("enable_jagged", r.enable_jagged.to_string());
        put("enable_opt_reset", r.enable_opt_reset.to_string());
        put("enable_warm_start", r.enable_warm_start.to_string());
        put("prune_scope", r.prune.scope.to_string());
        put("prune_coupling", r.prune.coupling.to_string());
        let a = &self.adam;
        put("beta1", a.beta1.to_string());
        put("beta2", a.beta2.to_string());
        put("eps", a.eps.to_string());
        put("weight_decay", a.weight_decay.to_string());
        put("max_grad_norm", a.max_grad_norm.to_string());
        put("peak_lr", self.peak_lr.to_string());
        if let Some(t) = self.total_steps {
            put("total_steps", t.to_string());
        }
        put("init_warmup_steps", self.init_warmup_steps.to_string());
        put("min_lr_ratio", self.min_lr_ratio.to_string());
        put("batch_size", self.batch_size.to_string());
        put("shuffle", self.shuffle.to_string());
        if let Some(s) = self.shuffle_seed {
            put("shuffle_seed", s.to_string());
        }
        if let Some(p) = &self.data {
            put("data", p.display().to_string());
        }
        if let Some(f) = &self.corpus_fingerprint {
            put("corpus_fingerprint", f.clone());
        }
        put("eval_fraction", self.eval_fraction.to_string());
        put("eval_windows", self.eval_windows.to_string());
        if let Some(p) = &self.out_dir {
            put("out_dir", p.display().to_string());
        }
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("log_every", self.log_every.to_string());
        if let Some(p) = &self.warm_start_checkpoint {
            put("warm_start_checkpoint", p.display().to_string());
        }
        put("divergence_factor", self.divergence_factor.to_string());
        put("divergence_patience", self.divergence_patience.to_string());
        out
    }
}

/// Parsed `key = value` lines, consumed key by key.
struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate config key `{k}`")));
            }
        }
        Ok(KeyValues { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn opt<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{s}` for key `{key}`"))),
        }
    }

    fn req<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.opt(key)?
            .ok_or_else(|| Error::Config(format!("missing required config key `{key}`")))
    }

    fn get_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "hidden = 32\nheads = 2\nlayers = 2\nseq_len = 16\n";

    #[test]
    fn relora_requires_rank() {
        let err = RunManifest::parse(MINIMAL, Some(Mode::Relora)).unwrap_err();
        assert!(err.to_string().contains("`rank`"));
        assert_eq!(err.exit_code(), 3);
        assert!(RunManifest::parse(MINIMAL, Some(Mode::Full)).is_ok());
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let text = format!("{MINIMAL}colour = blue\n");
        assert!(RunManifest::parse(&text, Some(Mode::Full)).unwrap_err().to_string().contains("colour"));
        let text = format!("{MINIMAL}seed = 1\nseed = 2\n");
        assert!(RunManifest::parse(&text, Some(Mode::Full)).is_err());
    }

    #[test]
    fn comments_and_mode_key() {
        let text = format!("# toy run\nmode = relora  # inline\nrank = 4\n{MINIMAL}");
        let m = RunManifest::parse(&text, None).unwrap();
        assert_eq!(m.mode, Mode::Relora);
        assert_eq!(m.relora.rank, Some(4));
        assert_eq!(m.total_steps(), 800);
        assert_eq!(m.relora.reset_steps(), vec![400, 600, 800]);
    }

    #[test]
    fn round_trip() {
        let text = format!("mode = relora\nrank = 4\nlora_scale = 0.3\ntotal_steps = 900\ndata = /tmp/x.txt\n{MINIMAL}");
        let m = RunManifest::parse(&text, None).unwrap();
        let again = RunManifest::parse(&m.to_text(), None).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.to_text(), again.to_text());
    }
}
