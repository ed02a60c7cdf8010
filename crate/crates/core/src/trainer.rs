//! Training loops for every mode: full-rank, control, plain low-rank and
//! restarted low-rank with warm start.
//!
//! Within one run the step counter is the single source of truth: the
//! projections are wrapped at the start of step `wrap_step`, and each
//! merge-and-reinit (with its optimizer pruning) happens at the start of a
//! reset step, which is also where the jagged schedule drops to zero. A
//! reset that falls exactly on `total_steps` is applied after the last
//! update.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Archive, Buffer};
use crate::config::{Mode, RunManifest};
use crate::data::{eval_windows, Batcher, Corpus, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::lora::{lora_only_init_all, merge_and_reinit_all, relora_trainable_count, wrap_model, MergeRecord, WrapReport};
use crate::model::{ModelConfig, ParamId, Transformer};
use crate::optim::{adam_step, clip_grad_norm, prune_optimizer_state_with, AdamState, JaggedSchedule, Moments, PruneReport};
use crate::tensor::{DType, Scalar};

pub const METRICS_HEADER: &str = "step,lr,loss,ppl,tokens_seen,event";
pub const WARM_START_CHECKPOINT: &str = "warm_start.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn reset_checkpoint_name(k: usize) -> String {
    format!("reset_{k:03}.ckpt")
}

pub fn periodic_checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    None,
    WarmStartEnd,
    MergeReset,
    Prune,
}

impl Event {
    pub fn name(self) -> &'static str {
        match self {
            Event::None => "",
            Event::WarmStartEnd => "warm_start_end",
            Event::MergeReset => "merge_reset",
            Event::Prune => "prune",
        }
    }
}

/// One line of the metric log. Event rows carry no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub tokens_seen: u64,
    pub event: Event,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let (loss, ppl) = match self.loss {
            Some(l) => (l.to_string(), l.exp().to_string()),
            None => (String::new(), String::new()),
        };
        format!("{},{},{},{},{},{}", self.step, self.lr, loss, ppl, self.tokens_seen, self.event.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResetEvent {
    pub step: usize,
    pub merges: Vec<(ParamId, MergeRecord)>,
    pub prune: Option<PruneReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
    pub resets: Vec<ResetEvent>,
}

impl MetricLog {
    /// Training losses in step order.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss).collect()
    }

    pub fn events(&self, event: Event) -> Vec<usize> {
        self.rows.iter().filter(|r| r.event == event).map(|r| r.step).collect()
    }
}

/// Perplexity over held-out windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_nll: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Outcome of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub log: MetricLog,
    pub final_eval: EvalResult,
    /// Evaluation of the dense model at wrap time, for warm-started runs.
    pub warm_start_eval: Option<EvalResult>,
    pub wrap_report: Option<WrapReport>,
    pub control: Option<ControlMatch>,
    pub model_config: ModelConfig,
}

/// Mean next-token NLL of `model` over up to `max_windows` evaluation
/// windows (0 for all), accumulated in double precision.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, tokens: &[u8], max_windows: usize) -> Result<EvalResult> {
    let seq = model.config().seq_len;
    let windows = eval_windows(tokens, seq, max_windows)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in windows.chunks(16) {
        let inputs: Vec<usize> = chunk.iter().flat_map(|(i, _)| i.iter().copied()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let n = inputs.len();
        total += model.loss(&inputs, &targets, chunk.len(), seq)? * n as f64;
        count += n;
    }
    let mean_nll = total / count as f64;
    Ok(EvalResult {
        mean_nll,
        perplexity: mean_nll.exp(),
        tokens: count,
    })
}

/// Loads a checkpoint of either precision and evaluates it on the corpus'
/// held-out split.
pub fn evaluate_checkpoint(path: &Path, corpus: &Corpus, max_windows: usize) -> Result<EvalResult> {
    let archive = Archive::load(path)?;
    let cfg = checkpoint::read_model_config(&archive)?;
    if cfg.vocab != BYTE_VOCAB {
        return Err(Error::Data(format!(
            "checkpoint vocabulary {} does not match the byte tokenizer ({BYTE_VOCAB})",
            cfg.vocab
        )));
    }
    let dtype = archive.get("dtype").ok().and_then(DType::parse).unwrap_or(DType::F32);
    match dtype {
        DType::F32 => evaluate(&checkpoint::read_model::<f32>(&archive)?, corpus.eval(), max_windows),
        DType::F64 => evaluate(&checkpoint::read_model::<f64>(&archive)?, corpus.eval(), max_windows),
    }
}

/// Result of sizing the control baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMatch {
    pub config: ModelConfig,
    pub target: usize,
    pub achieved: usize,
    pub relative_gap: f64,
}

impl ControlMatch {
    pub fn within(&self, tolerance: f64) -> bool {
        self.relative_gap <= tolerance
    }
}

/// Largest head count not above `max_heads` giving an even head dimension.
fn control_heads(hidden: usize, max_heads: usize) -> usize {
    (1..=max_heads.max(1))
        .rev()
        .find(|&h| hidden.is_multiple_of(h) && (hidden / h).is_multiple_of(2))
        .unwrap_or(1)
}

/// Full-rank configuration, with layers fixed and hidden size searched over
/// even values up to the original, whose total parameter count (including
/// embeddings) is closest to the low-rank model's trainable count. Ties go
/// to the smaller hidden size.
pub fn match_control(cfg: &ModelConfig, rank: usize) -> ControlMatch {
    let target = relora_trainable_count(cfg, rank);
    let mut best: Option<(usize, ModelConfig)> = None;
    for hidden in (2..=cfg.hidden).step_by(2) {
        let mut c = cfg.clone();
        c.hidden = hidden;
        c.heads = control_heads(hidden, cfg.heads);
        c.ffn_hidden = ModelConfig::default_ffn_hidden(hidden);
        let gap = c.param_count().abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, c));
        }
    }
    let (gap, config) = best.expect("at least one candidate hidden size");
    ControlMatch {
        achieved: config.param_count(),
        relative_gap: gap as f64 / target as f64,
        config,
        target,
    }
}

/// Flags `(restarts, jagged schedule, optimizer reset, warm start)` of the
/// seven ablation rows.
pub fn ablation_row(row: usize) -> Result<(bool, bool, bool, bool)> {
    Ok(match row {
        1 => (false, false, false, false),
        2 => (true, false, false, false),
        3 => (true, false, true, false),
        4 => (true, true, false, false),
        5 => (true, true, true, false),
        6 => (false, false, false, true),
        7 => (true, true, true, true),
        _ => return Err(Error::Config(format!("ablation row {row} does not exist (expected 1-7)"))),
    })
}

/// SHA-256 over every frozen projection buffer.
pub fn frozen_fingerprint<T: Scalar>(model: &Transformer<T>) -> String {
    let mut h = Sha256::new();
    for (id, t) in model.params() {
        if !t.requires_grad() {
            h.update(id.to_string().as_bytes());
            h.update(&Buffer::from_tensor(t).bytes);
        }
    }
    hex::encode(h.finalize())
}

/// Single-run training state.
pub struct Session<'c, T: Scalar> {
    manifest: RunManifest,
    corpus: &'c Corpus,
    batcher: Batcher<'c>,
    schedule: JaggedSchedule,
    model: Transformer<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    step: usize,
    tokens_seen: u64,
    reference_loss: Option<f64>,
    recent: Vec<f64>,
    above: usize,
    resets_done: usize,
    frozen_hash: Option<String>,
    log: MetricLog,
    warm_start_eval: Option<EvalResult>,
    wrap_report: Option<WrapReport>,
    control: Option<ControlMatch>,
    metrics: Option<BufWriter<File>>,
}

impl<'c, T: Scalar> Session<'c, T> {
    /// Fresh run. For control mode the model is shrunk first.
    pub fn new(manifest: &RunManifest, corpus: &'c Corpus) -> Result<Self> {
        let mut manifest = normalize(manifest)?;
        manifest.validate()?;
        check_fingerprint(&manifest, corpus)?;
        let mut control = None;
        if manifest.mode == Mode::Control {
            let m = match_control(&manifest.model, manifest.relora.rank()?);
            if !m.within(0.05) {
                warn!(
                    "no control size within 5% of {} trainables; using hidden {} with {} parameters",
                    m.target, m.config.hidden, m.achieved
                );
            }
            info!(
                "control model: hidden {} heads {} ({} parameters, target {})",
                m.config.hidden, m.config.heads, m.achieved, m.target
            );
            manifest.model = m.config.clone();
            control = Some(m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
        let mut step = 0;
        let mut model = Transformer::<T>::new(manifest.model.clone(), &mut rng)?;
        let mut adam = AdamState::new();
        if let Some(path) = &manifest.warm_start_checkpoint {
            if manifest.mode != Mode::Relora || !manifest.relora.enable_warm_start {
                return Err(Error::Config("warm_start_checkpoint needs relora mode with warm start enabled".into()));
            }
            let archive = Archive::load(path)?;
            model = checkpoint::read_model_with_config(&archive, manifest.model.clone())?;
            if model.is_wrapped() {
                return Err(Error::Checkpoint("warm-start checkpoint must hold a dense model".into()));
            }
            adam = read_adam(&archive, &model).unwrap_or_default();
            step = manifest.relora.warm_start_steps;
        }
        model.shape_audit()?;
        let session = Self::assemble(manifest, corpus, model, adam, rng, step, control)?;
        Ok(session)
    }

    fn assemble(
        manifest: RunManifest,
        corpus: &'c Corpus,
        model: Transformer<T>,
        adam: AdamState<T>,
        rng: ChaCha8Rng,
        step: usize,
        control: Option<ControlMatch>,
    ) -> Result<Self> {
        if manifest.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "manifest asks for {} but the session runs in {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let batcher = Batcher::new(corpus.train(), manifest.batch_spec())?;
        let schedule = manifest.schedule();
        schedule.validate()?;
        Ok(Session {
            batcher,
            schedule,
            corpus,
            model,
            adam,
            rng,
            step,
            tokens_seen: 0,
            reference_loss: None,
            recent: Vec::new(),
            above: 0,
            resets_done: 0,
            frozen_hash: None,
            log: MetricLog::default(),
            warm_start_eval: None,
            wrap_report: None,
            control,
            metrics: None,
            manifest,
        })
    }

    /// Restores a run from a checkpoint written by [`Session::save`]. The
    /// model is validated against `manifest`, so a changed architecture is
    /// reported as a shape mismatch on the first offending tensor.
    pub fn resume(manifest: &RunManifest, corpus: &'c Corpus, path: &Path) -> Result<Self> {
        let mut manifest = normalize(manifest)?;
        manifest.validate()?;
        check_fingerprint(&manifest, corpus)?;
        let archive = Archive::load(path)?;
        let stored_mode: Mode = archive.parse("mode")?;
        if stored_mode != manifest.mode {
            return Err(Error::Config(format!(
                "checkpoint was written in {stored_mode} mode, config asks for {}",
                manifest.mode
            )));
        }
        let mut control = None;
        if manifest.mode == Mode::Control {
            let m = match_control(&manifest.model, manifest.relora.rank()?);
            manifest.model = m.config.clone();
            control = Some(m);
        }
        let model = checkpoint::read_model_with_config(&archive, manifest.model.clone())?;
        let adam = read_adam(&archive, &model)?;
        let seed: [u8; 32] = hex::decode(archive.get("rng.seed")?)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("manifest key `rng.seed` is malformed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(archive.parse("rng.stream")?);
        rng.set_word_pos(archive.parse("rng.word_pos")?);
        let step: usize = archive.parse("step")?;
        let mut s = Self::assemble(manifest, corpus, model, adam, rng, step, control)?;
        s.tokens_seen = archive.parse("tokens_seen")?;
        s.resets_done = archive.parse("resets_done")?;
        s.above = archive.parse("divergence.above")?;
        s.reference_loss = archive.manifest.get("divergence.reference").map(|v| v.parse()).transpose().map_err(|_| {
            Error::Checkpoint("manifest key `divergence.reference` is malformed".into())
        })?;
        s.recent = match archive.manifest.get("divergence.recent") {
            Some(v) if !v.is_empty() => v
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint("malformed recent losses".into())))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        if s.model.is_wrapped() {
            s.frozen_hash = Some(frozen_fingerprint(&s.model));
        }
        Ok(s)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    pub fn total_steps(&self) -> usize {
        self.manifest.total_steps()
    }

    fn low_rank(&self) -> bool {
        matches!(self.manifest.mode, Mode::Lora | Mode::Relora)
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.manifest.out_dir.as_ref().map(|d| d.join(name))
    }

    fn open_metrics(&mut self) -> Result<()> {
        let Some(dir) = self.manifest.out_dir.clone() else { return Ok(()) };
        if self.metrics.is_some() {
            return Ok(());
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest.to_text())?;
        let path = dir.join("metrics.csv");
        // Keep rows from before the current step so a resumed run continues
        // the original log.
        let mut kept = vec![METRICS_HEADER.to_string()];
        if self.step > 0 && path.exists() {
            for line in BufReader::new(File::open(&path)?).lines().skip(1) {
                let line = line?;
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < self.step) {
                    kept.push(line);
                }
            }
        }
        let mut w = BufWriter::new(File::create(&path)?);
        for line in kept {
            writeln!(w, "{line}")?;
        }
        self.metrics = Some(w);
        Ok(())
    }

    fn record(&mut self, row: MetricRow) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
        }
        self.log.rows.push(row);
        Ok(())
    }

    fn event(&mut self, event: Event) -> Result<()> {
        let lr = self.schedule.lr_at(self.step.min(self.total_steps()))?;
        self.record(MetricRow {
            step: self.step,
            lr,
            loss: None,
            tokens_seen: self.tokens_seen,
            event,
        })
    }

    fn wrap(&mut self) -> Result<()> {
        let rank = self.manifest.relora.rank()?;
        let scale = self.manifest.relora.scale()?;
        if let Some(path) = self.out_path(WARM_START_CHECKPOINT) {
            checkpoint::save_model(&path, &self.model)?;
        }
        if self.manifest.mode == Mode::Relora && self.manifest.relora.enable_warm_start {
            self.warm_start_eval = Some(evaluate(&self.model, self.corpus.eval(), self.manifest.eval_windows)?);
            self.reference_loss = self.recent_mean().or(self.reference_loss);
            self.event(Event::WarmStartEnd)?;
        }
        let report = wrap_model(&mut self.model, rank, scale, &mut self.rng)?;
        if !self.manifest.relora.enable_restarts {
            lora_only_init_all(&mut self.model, &mut self.rng, false)?;
        }
        // Moments of the now-frozen weights are dropped; the new factors
        // start from zero moments.
        let model = &self.model;
        self.adam.retain(|name| {
            name.parse::<ParamId>()
                .ok()
                .and_then(|id| model.param(id))
                .is_some_and(|t| t.requires_grad())
        });
        self.frozen_hash = Some(frozen_fingerprint(&self.model));
        info!(
            "step {}: wrapped {} projections at rank {rank}, {} trainable / {} frozen",
            self.step, report.layers_wrapped, report.trainable_param_count, report.frozen_param_count
        );
        self.wrap_report = Some(report);
        Ok(())
    }

    fn reset(&mut self) -> Result<()> {
        self.check_frozen()?;
        let merges = merge_and_reinit_all(&mut self.model, &mut self.rng)?;
        self.resets_done += 1;
        self.event(Event::MergeReset)?;
        let mut prune = None;
        if self.manifest.relora.enable_opt_reset {
            let report = prune_optimizer_state_with(
                &mut self.adam,
                self.manifest.relora.prune_ratio,
                self.manifest.relora.prune,
                |name| name.parse::<ParamId>().is_ok_and(|id| id.is_lora_factor()),
            )?;
            self.event(Event::Prune)?;
            prune = Some(report);
        }
        let norm: f64 = merges.iter().map(|(_, r)| r.delta_norm * r.delta_norm).sum::<f64>().sqrt();
        info!("step {}: reset {} merged updates of total norm {norm:.4e}", self.step, self.resets_done);
        self.log.resets.push(ResetEvent {
            step: self.step,
            merges,
            prune,
        });
        self.frozen_hash = Some(frozen_fingerprint(&self.model));
        if let Some(path) = self.out_path(&reset_checkpoint_name(self.resets_done)) {
            checkpoint::save_model(&path, &self.model)?;
        }
        Ok(())
    }

    fn check_frozen(&self) -> Result<()> {
        if let Some(expected) = &self.frozen_hash {
            if frozen_fingerprint(&self.model) != *expected {
                return Err(Error::Invariant(format!("frozen weights changed before step {}", self.step)));
            }
        }
        Ok(())
    }

    fn recent_mean(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }

    fn pending_reset(&self) -> bool {
        self.manifest.mode == Mode::Relora
            && self.model.is_wrapped()
            && self.manifest.relora.reset_steps().get(self.resets_done) == Some(&self.step)
    }

    /// Structural events due at the current step: wrapping and resets.
    fn boundary(&mut self) -> Result<()> {
        if self.low_rank() && !self.model.is_wrapped() && self.step >= self.manifest.relora.wrap_step() {
            self.wrap()?;
        }
        if self.pending_reset() {
            self.reset()?;
        }
        Ok(())
    }

    /// Runs one optimizer update and returns its training loss.
    pub fn step_once(&mut self) -> Result<f64> {
        if self.step >= self.total_steps() {
            return Err(Error::Config("run is already complete".into()));
        }
        self.open_metrics()?;
        self.boundary()?;
        let s = self.step;
        let lr = self.schedule.lr_at(s)?;
        let batch = self.batcher.batch(s);
        let diverged = |reason: String| Error::Diverged { step: s, reason };
        let loss = match self.model.loss_and_grad(&batch.inputs, &batch.targets, batch.batch_size, batch.seq_len) {
            Ok(l) => l,
            Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        let mut params: Vec<(String, &mut _)> =
            self.model.params_mut().into_iter().map(|(id, t)| (id.to_string(), t)).collect();
        if self.manifest.adam.max_grad_norm > 0.0 {
            clip_grad_norm(&mut params, self.manifest.adam.max_grad_norm).map_err(|e| match e {
                Error::NonFinite(what) => diverged(what),
                e => e,
            })?;
        }
        adam_step(&mut params, &mut self.adam, lr, &self.manifest.adam).map_err(|e| match e {
            Error::NonFinite(what) => diverged(what),
            e => e,
        })?;
        drop(params);
        self.model.clear_grads();
        self.step += 1;
        self.tokens_seen += (batch.batch_size * batch.seq_len) as u64;
        self.record(MetricRow {
            step: s,
            lr,
            loss: Some(loss),
            tokens_seen: self.tokens_seen,
            event: Event::None,
        })?;
        self.watch_divergence(s, loss)?;
        if self.manifest.log_every > 0 && self.step.is_multiple_of(self.manifest.log_every) {
            info!("step {s}: lr {lr:.3e} loss {loss:.4} ppl {:.2}", loss.exp());
            self.check_frozen()?;
        }
        if self.manifest.checkpoint_every > 0 && self.step.is_multiple_of(self.manifest.checkpoint_every) {
            if let Some(path) = self.out_path(&periodic_checkpoint_name(self.step)) {
                self.save(&path)?;
            }
        }
        Ok(loss)
    }

    fn watch_divergence(&mut self, step: usize, loss: f64) -> Result<()> {
        const WINDOW: usize = 50;
        self.recent.push(loss);
        if self.recent.len() > WINDOW {
            self.recent.remove(0);
        }
        let reference = *self.reference_loss.get_or_insert(loss);
        if loss > self.manifest.divergence_factor * reference {
            self.above += 1;
        } else {
            self.above = 0;
        }
        if self.above >= self.manifest.divergence_patience {
            return Err(Error::Diverged {
                step,
                reason: format!(
                    "loss above {}x the reference {reference:.4} for {} consecutive steps",
                    self.manifest.divergence_factor, self.above
                ),
            });
        }
        Ok(())
    }

    /// Runs to `total_steps`, applies a reset due at the very end, writes the
    /// final checkpoint and evaluates.
    pub fn run(mut self) -> Result<RunOutcome> {
        self.open_metrics()?;
        let result = self.run_inner();
        if let Some(w) = self.metrics.as_mut() {
            w.flush()?;
        }
        result?;
        let final_eval = evaluate(&self.model, self.corpus.eval(), self.manifest.eval_windows)?;
        info!(
            "{} run finished: eval ppl {:.3} over {} tokens",
            self.manifest.mode, final_eval.perplexity, final_eval.tokens
        );
        if let Some(dir) = self.manifest.out_dir.clone() {
            let mut summary = format!(
                "mode={}\nsteps={}\ntokens_seen={}\neval_nll={}\neval_ppl={}\n",
                self.manifest.mode, self.step, self.tokens_seen, final_eval.mean_nll, final_eval.perplexity
            );
            if let Some(w) = self.warm_start_eval {
                summary.push_str(&format!("warm_start_eval_ppl={}\n", w.perplexity));
            }
            fs::write(dir.join("summary.txt"), summary)?;
        }
        Ok(RunOutcome {
            log: self.log,
            final_eval,
            warm_start_eval: self.warm_start_eval,
            wrap_report: self.wrap_report,
            control: self.control,
            model_config: self.manifest.model,
        })
    }

    fn run_inner(&mut self) -> Result<()> {
        while self.step < self.total_steps() {
            self.step_once()?;
        }
        self.boundary()?;
        self.check_frozen()?;
        if let Some(path) = self.out_path(FINAL_CHECKPOINT) {
            self.save(&path)?;
        }
        Ok(())
    }

    /// Writes a resumable checkpoint: parameters, optimizer moments, step,
    /// random-generator position and divergence-detector state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.set("format_version", checkpoint::FORMAT_VERSION);
        a.set("mode", self.manifest.mode);
        a.set("step", self.step);
        a.set("tokens_seen", self.tokens_seen);
        a.set("resets_done", self.resets_done);
        a.set("rng.seed", hex::encode(self.rng.get_seed()));
        a.set("rng.stream", self.rng.get_stream());
        a.set("rng.word_pos", self.rng.get_word_pos());
        a.set("divergence.above", self.above);
        if let Some(r) = self.reference_loss {
            a.set("divergence.reference", r);
        }
        a.set(
            "divergence.recent",
            self.recent.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        a.set("corpus_fingerprint", self.corpus.fingerprint());
        for line in self.manifest.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                a.set(format!("config.{k}"), v);
            }
        }
        checkpoint::write_model(&mut a, &self.model);
        a.set("adam.t", self.adam.t);
        for (name, mom) in self.adam.iter() {
            a.set(format!("adam.step/{name}"), mom.step);
            a.put(format!("m/{name}"), Buffer::from_slice(&mom.shape, &mom.m));
            a.put(format!("v/{name}"), Buffer::from_slice(&mom.shape, &mom.v));
        }
        a.save(path)
    }
}

fn read_adam<T: Scalar>(archive: &Archive, model: &Transformer<T>) -> Result<AdamState<T>> {
    let mut adam = AdamState::new();
    adam.t = archive.parse("adam.t")?;
    for (key, value) in &archive.manifest {
        let Some(name) = key.strip_prefix("adam.step/") else { continue };
        let id: ParamId = name.parse()?;
        let param = model
            .param(id)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor `{name}`")))?;
        let m = archive.buffer(&format!("m/{name}"))?;
        let v = archive.buffer(&format!("v/{name}"))?;
        for buf in [m, v] {
            if buf.shape != param.shape() {
                return Err(Error::TensorShape {
                    name: format!("optimizer state of {name}"),
                    expected: param.shape().to_vec(),
                    found: buf.shape.clone(),
                });
            }
        }
        let step = value
            .parse()
            .map_err(|_| Error::Checkpoint(format!("manifest key `{key}` is malformed")))?;
        adam.insert(
            name.to_string(),
            Moments {
                shape: m.shape.clone(),
                m: m.to_vec(),
                v: v.to_vec(),
                step,
            },
        );
    }
    Ok(adam)
}

/// Plain low-rank mode is the restarted mode with every switch off.
fn normalize(manifest: &RunManifest) -> Result<RunManifest> {
    let mut m = manifest.clone();
    if m.mode == Mode::Lora {
        m.relora = m.relora.with_flags(false, false, false, false);
    }
    Ok(m)
}

fn check_fingerprint(manifest: &RunManifest, corpus: &Corpus) -> Result<()> {
    match &manifest.corpus_fingerprint {
        Some(f) if f != corpus.fingerprint() => Err(Error::Data(format!(
            "corpus fingerprint {} does not match the configured {f}",
            corpus.fingerprint()
        ))),
        _ => Ok(()),
    }
}

fn dispatch(manifest: &RunManifest, corpus: &Corpus, resume: Option<&Path>) -> Result<RunOutcome> {
    fn go<T: Scalar>(manifest: &RunManifest, corpus: &Corpus, resume: Option<&Path>) -> Result<RunOutcome> {
        match resume {
            Some(p) => Session::<T>::resume(manifest, corpus, p)?.run(),
            None => Session::<T>::new(manifest, corpus)?.run(),
        }
    }
    match manifest.dtype {
        DType::F32 => go::<f32>(manifest, corpus, resume),
        DType::F64 => go::<f64>(manifest, corpus, resume),
    }
}

/// Runs the manifest's mode to completion.
pub fn run(manifest: &RunManifest, corpus: &Corpus) -> Result<RunOutcome> {
    dispatch(manifest, corpus, None)
}

/// Continues a run from a checkpoint written by the same manifest.
pub fn resume(manifest: &RunManifest, corpus: &Corpus, checkpoint: &Path) -> Result<RunOutcome> {
    dispatch(manifest, corpus, Some(checkpoint))
}

fn expect_mode(manifest: &RunManifest, modes: &[Mode]) -> Result<()> {
    if !modes.contains(&manifest.mode) {
        return Err(Error::Config(format!("mode {} is not valid here", manifest.mode)));
    }
    Ok(())
}

pub fn train_full(manifest: &RunManifest, corpus: &Corpus) -> Result<RunOutcome> {
    expect_mode(manifest, &[Mode::Full])?;
    run(manifest, corpus)
}

pub fn train_relora(manifest: &RunManifest, corpus: &Corpus) -> Result<RunOutcome> {
    expect_mode(manifest, &[Mode::Relora, Mode::Lora])?;
    run(manifest, corpus)
}

pub fn train_control(manifest: &RunManifest, corpus: &Corpus) -> Result<RunOutcome> {
    expect_mode(manifest, &[Mode::Control])?;
    run(manifest, corpus)
}

/// Outcome of one ablation row; the error text when the run diverged.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: usize,
    pub flags: (bool, bool, bool, bool),
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Runs the given ablation rows in restarted mode. Diverged rows are
/// reported rather than propagated.
pub fn ablate(manifest: &RunManifest, corpus: &Corpus, rows: &[usize]) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for &row in rows {
        let flags = ablation_row(row)?;
        let mut m = manifest.clone();
        m.mode = Mode::Relora;
        m.relora = m.relora.with_flags(flags.0, flags.1, flags.2, flags.3);
        if let Some(dir) = &manifest.out_dir {
            m.out_dir = Some(dir.join(format!("row_{row}")));
        }
        let outcome = match run(&m, corpus) {
            Ok(o) => Ok(o),
            Err(e @ Error::Diverged { .. }) => {
                warn!("ablation row {row}: {e}");
                Err(e.to_string())
            }
            Err(e) => return Err(e),
        };
        results.push(AblationResult { row, flags, outcome });
    }
    Ok(results)
}
