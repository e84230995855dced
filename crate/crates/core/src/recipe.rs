//! Declarative compression recipes (TOML) and their compilation into a
//! per-step timeline of learning rates, prune events and phase tags.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{DEFAULT_BLOCK_SIZE, DEFAULT_DAMPENING, DEFAULT_NUM_GRADS};
use crate::harness::{DataConfig, KdConfig, ModelConfig, OptimizerConfig, QuantConfig};
use crate::pruner::SparsitySchedule;

/// Tolerance for comparing epoch positions.
const EPOCH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LayerDrop,
    Prune,
    Finetune,
    Quantize,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::LayerDrop => "layer_drop",
            Phase::Prune => "prune",
            Phase::Finetune => "finetune",
            Phase::Quantize => "quantize",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    LinearDecay,
    LinearDecayWithRewinds,
}

/// Rewind points in epochs: an explicit list and/or a periodic series
/// `start, start + every, …` below the run length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rewinds {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub at: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub every: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub schedule: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewinds: Option<Rewinds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GmpUniform,
    ObertsGlobal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    PerEpoch(usize),
    EveryEpochs(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub method: Method,
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub initial_sparsity: f64,
    pub target_sparsity: f64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Apply the optimal weight update (second-order method only).
    #[serde(default = "default_true")]
    pub compensate: bool,
    pub frequency: Frequency,
}

fn default_group_size() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherConfig {
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default = "default_grads")]
    pub num_grads: usize,
    #[serde(default = "default_dampening")]
    pub dampening: f64,
}

fn default_block() -> usize {
    DEFAULT_BLOCK_SIZE
}

fn default_grads() -> usize {
    DEFAULT_NUM_GRADS
}

fn default_dampening() -> f64 {
    DEFAULT_DAMPENING
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self { block_size: DEFAULT_BLOCK_SIZE, num_grads: DEFAULT_NUM_GRADS, dampening: DEFAULT_DAMPENING }
    }
}

/// Dense training of the teacher. The compressed student starts from the
/// finished teacher, or from the checkpoint taken after `student_from_epoch`
/// epochs of the same training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_from_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDropConfig {
    pub keep: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    #[serde(default = "default_bits")]
    pub bits: u32,
    pub epochs: usize,
    pub observer_epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
}

fn default_bits() -> u32 {
    8
}

impl QuantizeConfig {
    pub fn quant(&self) -> QuantConfig {
        QuantConfig { bits: self.bits, observer_epochs: self.observer_epochs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    /// Length of the prune + finetune run.
    pub epochs: usize,
    pub batch_size: usize,
    pub phases: Vec<Phase>,
    pub lr: LrConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    /// Distillation from the dense teacher; absent means plain cross-entropy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<KdConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub fisher: FisherConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_drop: Option<LayerDropConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantize: Option<QuantizeConfig>,
}

/// Parses and validates a recipe; errors name the offending key path.
pub fn parse(text: &str) -> Result<Recipe> {
    let de = toml::Deserializer::new(text);
    let recipe: Recipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::recipe(if path == "." { String::new() } else { path }, e.into_inner().message().trim().to_string())
    })?;
    recipe.validate()?;
    Ok(recipe)
}

pub fn render(recipe: &Recipe) -> Result<String> {
    toml::to_string(recipe).map_err(|e| Error::recipe("", e.to_string()))
}

fn check(ok: bool, path: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::recipe(path, message()))
    }
}

fn positive(v: f64, path: &str) -> Result<()> {
    check(v > 0.0 && v.is_finite(), path, || format!("must be positive and finite, got {v}"))
}

fn fraction(v: f64, path: &str) -> Result<()> {
    check((0.0..=1.0).contains(&v), path, || format!("must lie in [0, 1], got {v}"))
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        check(!self.id.is_empty(), "id", || "must not be empty".into())?;
        check(self.epochs >= 1, "epochs", || "must be at least 1".into())?;
        check(self.batch_size >= 1 && self.batch_size <= self.data.n_train, "batch_size", || {
            format!("must lie in [1, data.n_train = {}], got {}", self.data.n_train, self.batch_size)
        })?;
        self.validate_phases()?;

        positive(self.lr.initial, "lr.initial")?;
        positive(self.lr.final_, "lr.final")?;
        match (self.lr.schedule, &self.lr.rewinds) {
            (LrSchedule::LinearDecay, Some(_)) => {
                return Err(Error::recipe("lr.rewinds", "linear_decay takes no rewinds"));
            }
            (LrSchedule::LinearDecayWithRewinds, None) => {
                return Err(Error::recipe("lr.rewinds", "linear_decay_with_rewinds needs rewind points"));
            }
            (_, Some(r)) => {
                check(r.start.is_some() == r.every.is_some(), "lr.rewinds", || "start and every go together".into())?;
                if let Some(every) = r.every {
                    positive(every, "lr.rewinds.every")?;
                }
                for (i, &e) in r.at.iter().chain(&r.start).enumerate() {
                    let path = if i < r.at.len() { format!("lr.rewinds.at[{i}]") } else { "lr.rewinds.start".into() };
                    check(e > 0.0 && e < self.epochs as f64, &path, || format!("{e} is not inside (0, {})", self.epochs))?;
                }
            }
            _ => {}
        }

        if let Some(p) = &self.prune {
            check(p.start_epoch >= 0.0, "prune.start_epoch", || format!("must be non-negative, got {}", p.start_epoch))?;
            check(p.start_epoch < p.end_epoch, "prune.end_epoch", || {
                format!("must exceed start_epoch {}, got {}", p.start_epoch, p.end_epoch)
            })?;
            check(p.end_epoch <= self.epochs as f64, "prune.end_epoch", || {
                format!("{} exceeds the run length of {} epochs", p.end_epoch, self.epochs)
            })?;
            fraction(p.initial_sparsity, "prune.initial_sparsity")?;
            fraction(p.target_sparsity, "prune.target_sparsity")?;
            check(p.initial_sparsity <= p.target_sparsity, "prune.initial_sparsity", || {
                format!("{} exceeds target_sparsity {}", p.initial_sparsity, p.target_sparsity)
            })?;
            check(p.group_size >= 1, "prune.group_size", || "must be at least 1".into())?;
            if p.method == Method::ObertsGlobal {
                check(self.fisher.block_size % p.group_size == 0, "prune.group_size", || {
                    format!("{} does not divide fisher.block_size {}", p.group_size, self.fisher.block_size)
                })?;
            }
            match p.frequency {
                Frequency::PerEpoch(n) => check(n >= 1, "prune.frequency.per_epoch", || "must be at least 1".into())?,
                Frequency::EveryEpochs(k) => positive(k, "prune.frequency.every_epochs")?,
            }
        }
        if let Some(kd) = &self.kd {
            kd.validate().map_err(|e| Error::recipe("kd", e.to_string()))?;
        }
        check(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0, "optimizer.momentum", || {
            format!("must lie in [0, 1), got {}", self.optimizer.momentum)
        })?;
        check(self.optimizer.weight_decay >= 0.0, "optimizer.weight_decay", || "must be non-negative".into())?;
        check(self.fisher.block_size >= 1, "fisher.block_size", || "must be at least 1".into())?;
        check(self.fisher.num_grads >= 1, "fisher.num_grads", || "must be at least 1".into())?;
        positive(self.fisher.dampening, "fisher.dampening")?;

        check(self.data.features >= 1, "data.features", || "must be at least 1".into())?;
        check(self.data.classes >= 2, "data.classes", || "must be at least 2".into())?;
        check(self.data.n_test >= 1, "data.n_test", || "must be at least 1".into())?;
        check(self.data.spread >= 0.0, "data.spread", || "must be non-negative".into())?;
        check(self.model.inputs == self.data.features, "model.inputs", || {
            format!("{} differs from data.features {}", self.model.inputs, self.data.features)
        })?;
        check(self.model.classes == self.data.classes, "model.classes", || {
            format!("{} differs from data.classes {}", self.model.classes, self.data.classes)
        })?;
        check(self.model.hidden.iter().all(|&h| h > 0), "model.hidden", || "widths must be positive".into())?;
        self.model.layers().map_err(|e| Error::recipe("model.attention", e.to_string()))?;

        positive(self.teacher.lr_initial, "teacher.lr_initial")?;
        positive(self.teacher.lr_final, "teacher.lr_final")?;
        if let Some(e) = self.teacher.student_from_epoch {
            check(e <= self.teacher.epochs, "teacher.student_from_epoch", || {
                format!("{e} exceeds teacher.epochs {}", self.teacher.epochs)
            })?;
        }
        if let Some(ld) = &self.layer_drop {
            let depth = self.model.hidden.len() + usize::from(self.model.attention.is_some());
            check(ld.keep >= 1 && ld.keep <= depth, "layer_drop.keep", || format!("must lie in [1, {depth}], got {}", ld.keep))?;
            positive(ld.lr_initial, "layer_drop.lr_initial")?;
            positive(ld.lr_final, "layer_drop.lr_final")?;
        }
        if let Some(q) = &self.quantize {
            q.quant().levels().map_err(|e| Error::recipe("quantize.bits", e.to_string()))?;
            check(q.observer_epochs <= q.epochs, "quantize.observer_epochs", || {
                format!("{} exceeds quantize.epochs {}", q.observer_epochs, q.epochs)
            })?;
            positive(q.lr_initial, "quantize.lr_initial")?;
            positive(q.lr_final, "quantize.lr_final")?;
        }
        Ok(())
    }

    fn validate_phases(&self) -> Result<()> {
        for (i, pair) in self.phases.windows(2).enumerate() {
            check(pair[0] < pair[1], &format!("phases[{}]", i + 1), || {
                format!("`{}` cannot follow `{}`; order is layer_drop, prune, finetune, quantize", pair[1], pair[0])
            })?;
        }
        check(self.phases.contains(&Phase::Prune) || self.phases.contains(&Phase::Finetune), "phases", || {
            "needs `prune` or `finetune`".into()
        })?;
        let pairs = [
            (Phase::Prune, self.prune.is_some(), "prune"),
            (Phase::LayerDrop, self.layer_drop.is_some(), "layer_drop"),
            (Phase::Quantize, self.quantize.is_some(), "quantize"),
        ];
        for (phase, present, section) in pairs {
            check(self.phases.contains(&phase) == present, section, || {
                format!("section and `{phase}` phase must appear together")
            })?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.data.n_train / self.batch_size).max(1)
    }

    fn rewind_epochs(&self) -> Vec<f64> {
        let Some(r) = &self.lr.rewinds else { return Vec::new() };
        let mut points = r.at.clone();
        if let (Some(start), Some(every)) = (r.start, r.every) {
            let mut e = start;
            while e < self.epochs as f64 - EPOCH_EPS {
                points.push(e);
                e += every;
            }
        }
        points.sort_by(f64::total_cmp);
        points
    }

    /// Step indices (within the main run) where the LR rewinds.
    pub fn rewind_steps(&self, steps_per_epoch: usize) -> Vec<usize> {
        let total = self.epochs * steps_per_epoch;
        let mut steps: Vec<usize> = self
            .rewind_epochs()
            .into_iter()
            .map(|e| (e * steps_per_epoch as f64).round() as usize)
            .filter(|&s| s > 0 && s < total)
            .collect();
        steps.dedup();
        steps
    }

    /// Learning rate at `step` of the main run. Each segment between rewinds
    /// starts at `lr.initial` and decays linearly on a slope that would reach
    /// `lr.final` on the last step of the run; the last segment does.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let last = (self.epochs * steps_per_epoch).saturating_sub(1);
        let step = step.min(last);
        let seg = self.rewind_steps(steps_per_epoch).into_iter().filter(|&r| r <= step).last().unwrap_or(0);
        interpolate(self.lr.initial, self.lr.final_, step - seg, last.saturating_sub(seg))
    }

    /// Epoch positions of the prune events, before conversion to steps.
    pub fn prune_epochs(&self) -> Vec<f64> {
        let Some(p) = &self.prune else { return Vec::new() };
        let mut out = Vec::new();
        match p.frequency {
            Frequency::PerEpoch(n) => {
                let mut j = 0usize;
                loop {
                    let t = p.start_epoch + j as f64 / n as f64;
                    if t >= p.end_epoch - EPOCH_EPS {
                        break;
                    }
                    out.push(t);
                    j += 1;
                }
            }
            Frequency::EveryEpochs(k) => {
                let mut j = 0usize;
                loop {
                    let t = p.start_epoch + j as f64 * k;
                    if t > p.end_epoch + EPOCH_EPS {
                        break;
                    }
                    out.push(t);
                    j += 1;
                }
            }
        }
        out
    }
}

/// `a` at `pos = 0`, `b` at `pos = len`, linear between; endpoints exact.
fn interpolate(a: f64, b: f64, pos: usize, len: usize) -> f64 {
    if len == 0 {
        return b;
    }
    let alpha = pos as f64 / len as f64;
    a * (1.0 - alpha) + b * alpha
}

/// Per-step rates decaying linearly from `initial` to `final_` over `steps`.
pub fn linear_decay(initial: f64, final_: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|s| if s == 0 { initial } else { interpolate(initial, final_, s, steps - 1) }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRecord {
    /// Global optimizer-step index across all phases.
    pub step: usize,
    pub phase: Phase,
    /// Position within the phase, in epochs.
    pub epoch: f64,
    pub lr: f64,
    /// A prune step happens before this step's optimizer update.
    pub prune: bool,
    /// Scheduled sparsity after the most recent prune event.
    pub scheduled_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub steps_per_epoch: usize,
    pub records: Vec<TimelineRecord>,
}

impl Timeline {
    pub fn prune_events(&self) -> impl Iterator<Item = &TimelineRecord> {
        self.records.iter().filter(|r| r.prune)
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &TimelineRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One record per optimizer step: optional layer-drop retraining, the prune
/// and finetune run, then optional quantization-aware finetuning.
pub fn compile_timeline(recipe: &Recipe, steps_per_epoch: usize) -> Result<Timeline> {
    if steps_per_epoch == 0 {
        return Err(Error::Schedule("steps_per_epoch must be at least 1".into()));
    }
    let spe = steps_per_epoch as f64;
    let mut records = Vec::new();
    let mut push = |phase, local: usize, lr, prune, s| {
        let step = records.len();
        records.push(TimelineRecord { step, phase, epoch: local as f64 / spe, lr, prune, scheduled_sparsity: s });
    };

    if let Some(ld) = &recipe.layer_drop {
        for (i, lr) in linear_decay(ld.lr_initial, ld.lr_final, ld.epochs * steps_per_epoch).into_iter().enumerate() {
            push(Phase::LayerDrop, i, lr, false, 0.0);
        }
    }

    let total = recipe.epochs * steps_per_epoch;
    let events = prune_steps(recipe, steps_per_epoch)?;
    let sparsities = match (&recipe.prune, events.first(), events.last()) {
        (Some(p), Some(&first), Some(&last)) if first < last => {
            let sched = SparsitySchedule::new(p.initial_sparsity, p.target_sparsity, first as f64, last as f64)?;
            events.iter().map(|&s| sched.sparsity_at(s as f64)).collect()
        }
        (Some(p), Some(_), _) => vec![p.target_sparsity],
        _ => Vec::new(),
    };
    let window = recipe.prune.as_ref().map(|p| {
        ((p.start_epoch * spe).round() as usize, (p.end_epoch * spe).round() as usize)
    });
    let mut current = 0.0;
    let mut next = 0;
    for i in 0..total {
        let prune = events.get(next) == Some(&i);
        if prune {
            current = sparsities[next];
            next += 1;
        }
        let phase = match window {
            Some((a, b)) if i >= a && i <= b => Phase::Prune,
            _ => Phase::Finetune,
        };
        push(phase, i, recipe.lr_at(i, steps_per_epoch), prune, current);
    }

    if let Some(q) = &recipe.quantize {
        for (i, lr) in linear_decay(q.lr_initial, q.lr_final, q.epochs * steps_per_epoch).into_iter().enumerate() {
            push(Phase::Quantize, i, lr, false, current);
        }
    }
    Ok(Timeline { steps_per_epoch, records })
}

/// Main-run step indices of the prune events.
pub fn prune_steps(recipe: &Recipe, steps_per_epoch: usize) -> Result<Vec<usize>> {
    let Some(p) = &recipe.prune else { return Ok(Vec::new()) };
    if let Frequency::PerEpoch(n) = p.frequency {
        if n > steps_per_epoch {
            return Err(Error::Schedule(format!("{n} prune events per epoch exceed {steps_per_epoch} steps per epoch")));
        }
    }
    let total = recipe.epochs * steps_per_epoch;
    let mut steps: Vec<usize> = Vec::new();
    for e in recipe.prune_epochs() {
        let s = (e * steps_per_epoch as f64).round() as usize;
        if s >= total {
            return Err(Error::Schedule(format!("prune event at epoch {e} leaves no training step after it")));
        }
        if steps.last().is_some_and(|&prev| prev >= s) {
            return Err(Error::Schedule(format!("prune events collide at step {s}; frequency is too high")));
        }
        steps.push(s);
    }
    Ok(steps)
}
