//! End-to-end recipe execution: dense teacher, optional layer dropping,
//! gradual pruning with interleaved finetuning, optional quantization-aware
//! finetuning. Writes a JSON report plus CSV logs and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherInverse;
use crate::harness::{
    fake_quant_finetune, gradient_stream, synthesize, train_span, train_step, Batch, Batcher, Dataset, Kd, Metrics, Sgd,
    StepContext, ToyModel,
};
use crate::pruner::{apply_mask, gmp_step, oberts_step};
use crate::recipe::{compile_timeline, linear_decay, Method, Phase, Recipe, Timeline};
use crate::saliency::{GroupSpec, SaliencyReport};
use crate::scalar::to_vec;
use crate::store::Mask;

pub const REPORT_FILE: &str = "report.json";
pub const PRUNE_LOG_FILE: &str = "prune_log.csv";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const SALIENCY_FILE: &str = "saliency_last.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const MASK_FILE: &str = "mask.json";
pub const FISHER_FILE: &str = "fisher.bin";

/// Held-out rows used to measure loss around each prune step.
const PROBE_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub step: usize,
    pub epoch: f64,
    pub scheduled_sparsity: f64,
    pub achieved_sparsity: f64,
    /// Sum of saliencies of the newly pruned groups; empty for magnitude pruning.
    pub predicted_loss_increase: Option<f64>,
    pub measured_loss_before: f64,
    pub measured_loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorInfo {
    pub block_size: usize,
    pub num_grads: usize,
    pub dampening: f64,
    pub n_blocks: usize,
    /// `n_blocks · B² · 8`
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub recipe_id: String,
    pub seed: u64,
    pub completed: bool,
    pub error: Option<String>,
    pub method: Option<Method>,
    pub group_size: usize,
    pub target_sparsity: f64,
    pub prunable_weights: usize,
    pub steps_per_epoch: usize,
    pub timeline_prune_events: usize,
    pub prune_log: Vec<PruneRecord>,
    pub final_sparsity: f64,
    /// Held-out metrics of the dense teacher.
    pub dense_test: Option<Metrics>,
    pub final_train: Option<Metrics>,
    pub final_test: Option<Metrics>,
    pub estimator: Option<EstimatorInfo>,
    pub phase_seconds: Vec<PhaseTiming>,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new(recipe: &Recipe, seed: u64) -> Self {
        Self {
            recipe_id: recipe.id.clone(),
            seed,
            completed: false,
            error: None,
            method: recipe.prune.as_ref().map(|p| p.method),
            group_size: recipe.prune.as_ref().map_or(1, |p| p.group_size),
            target_sparsity: recipe.prune.as_ref().map_or(0.0, |p| p.target_sparsity),
            prunable_weights: 0,
            steps_per_epoch: recipe.steps_per_epoch(),
            timeline_prune_events: 0,
            prune_log: Vec::new(),
            final_sparsity: 0.0,
            dense_test: None,
            final_train: None,
            final_test: None,
            estimator: None,
            phase_seconds: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Writes `report.json` via a temporary file and rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{REPORT_FILE}.tmp"));
        serde_json::to_writer_pretty(BufWriter::new(File::create(&tmp)?), self)?;
        fs::rename(tmp, dir.join(REPORT_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(dir.join(REPORT_FILE))?)?)
    }

    /// Same report with wall-clock fields cleared.
    pub fn without_timings(&self) -> Self {
        Self { phase_seconds: Vec::new(), ..self.clone() }
    }
}

/// Independent 64-bit seed derivation (SplitMix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run_file(recipe_path: &Path, seed: u64, out: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(recipe_path)?;
    let recipe = crate::recipe::parse(&text)?;
    run(&recipe, seed, out)
}

/// Executes `recipe` with run seed `seed`, writing artifacts into `out`. On
/// failure the partial report and logs stay on disk and the error carries the
/// phase it occurred in.
pub fn run(recipe: &Recipe, seed: u64, out: &Path) -> Result<RunReport> {
    recipe.validate()?;
    fs::create_dir_all(out)?;
    let mut state = Runner { recipe, seed, out: out.to_path_buf(), report: RunReport::new(recipe, seed), phase: "setup" };
    match state.execute() {
        Ok(()) => {
            state.report.completed = true;
            state.report.write_atomic(out)?;
            Ok(state.report)
        }
        Err(e) => {
            state.report.error = Some(e.to_string());
            if let Err(w) = state.report.write_atomic(out) {
                log::error!("could not write partial report: {w}");
            }
            Err(e.in_phase(state.phase))
        }
    }
}

struct Runner<'a> {
    recipe: &'a Recipe,
    seed: u64,
    out: PathBuf,
    report: RunReport,
    phase: &'static str,
}

impl Runner<'_> {
    fn enter(&mut self, phase: &'static str) {
        log::info!("{}: entering {phase}", self.recipe.id);
        self.phase = phase;
    }

    fn finish_phase(&mut self, started: Instant) -> Result<()> {
        self.report.phase_seconds.push(PhaseTiming { phase: self.phase.into(), seconds: started.elapsed().as_secs_f64() });
        self.report.write_atomic(&self.out)
    }

    fn execute(&mut self) -> Result<()> {
        let recipe = self.recipe;
        let spe = recipe.steps_per_epoch();
        let t = Instant::now();
        let timeline = compile_timeline(recipe, spe)?;
        timeline.write_csv(BufWriter::new(File::create(self.out.join(TIMELINE_FILE))?))?;
        self.report.timeline_prune_events = timeline.prune_events().count();
        let (train, test) = synthesize::<f32>(&recipe.data, derive_seed(recipe.data.seed, self.seed))?;
        let probe = test.gather(&(0..test.len().min(PROBE_ROWS)).collect::<Vec<_>>(), 0);
        let mut batcher = Batcher::new(train.len(), recipe.batch_size, derive_seed(self.seed, 2))?;
        self.finish_phase(t)?;

        self.enter("teacher");
        let t = Instant::now();
        let mut teacher = ToyModel::<f32>::new(&recipe.model, derive_seed(self.seed, 1))?;
        let lrs = linear_decay(recipe.teacher.lr_initial, recipe.teacher.lr_final, recipe.teacher.epochs * spe);
        let mut opt = Sgd::new(recipe.optimizer, teacher.params().len());
        let split = recipe.teacher.student_from_epoch.map_or(lrs.len(), |e| e * spe);
        let mut ctx = StepContext { data: &train, batcher: &mut batcher, mask: None, kd: None };
        train_span(&mut teacher, &mut ctx, &mut opt, &lrs[..split])?;
        let mut student = teacher.clone();
        train_span(&mut teacher, &mut ctx, &mut opt, &lrs[split..])?;
        self.report.dense_test = Some(teacher.evaluate(&test)?);
        self.finish_phase(t)?;

        let kd = recipe.kd.map(|config| Kd { config, teacher: &teacher });
        if let Some(ld) = recipe.layer_drop {
            self.enter("layer_drop");
            let t = Instant::now();
            student = student.drop_layers(ld.keep)?;
            let lrs: Vec<f64> = timeline.phase(Phase::LayerDrop).map(|r| r.lr).collect();
            let mut opt = Sgd::new(recipe.optimizer, student.params().len());
            let mut ctx = StepContext { data: &train, batcher: &mut batcher, mask: None, kd: kd.as_ref() };
            train_span(&mut student, &mut ctx, &mut opt, &lrs)?;
            self.finish_phase(t)?;
        }
        self.report.prunable_weights = student.dim();

        self.enter(if recipe.prune.is_some() { "prune" } else { "finetune" });
        let t = Instant::now();
        let mask = self.prune_and_finetune(&mut student, &timeline, &train, &probe, &mut batcher, kd.as_ref())?;
        self.finish_phase(t)?;

        if let Some(q) = recipe.quantize {
            self.enter("quantize");
            let t = Instant::now();
            let lrs: Vec<f64> = timeline.phase(Phase::Quantize).map(|r| r.lr).collect();
            let mut opt = Sgd::new(recipe.optimizer, student.params().len());
            let mut ctx = StepContext { data: &train, batcher: &mut batcher, mask: Some(&mask), kd: kd.as_ref() };
            fake_quant_finetune(&mut student, &mut ctx, &mut opt, q.quant(), &lrs, spe)?;
            self.finish_phase(t)?;
        }

        self.enter("output");
        let t = Instant::now();
        self.report.final_sparsity = mask.sparsity();
        self.report.final_train = Some(student.evaluate(&train)?);
        self.report.final_test = Some(student.evaluate(&test)?);
        if let Some(p) = &recipe.prune {
            let granularity = p.group_size as f64 / student.dim() as f64;
            if (mask.sparsity() - p.target_sparsity).abs() > granularity + 1e-12 {
                self.report.warnings.push(format!(
                    "final sparsity {:.6} misses target {} by more than one group",
                    mask.sparsity(),
                    p.target_sparsity
                ));
            }
        }
        let pruned_nonzero = student.prunable().iter().zip(mask.bits()).filter(|(w, &k)| !k && **w != 0.0).count();
        if pruned_nonzero > 0 {
            return Err(Error::Shape(format!("{pruned_nonzero} masked weights are nonzero")));
        }
        student.write_to(BufWriter::new(File::create(self.out.join(MODEL_FILE))?))?;
        serde_json::to_writer(BufWriter::new(File::create(self.out.join(MASK_FILE))?), &mask)?;
        self.finish_phase(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn prune_and_finetune(
        &mut self,
        student: &mut ToyModel<f32>,
        timeline: &Timeline,
        train: &Dataset<f32>,
        probe: &Batch<f32>,
        batcher: &mut Batcher,
        kd: Option<&Kd<f32>>,
    ) -> Result<Mask> {
        let recipe = self.recipe;
        let spe = timeline.steps_per_epoch;
        let mut mask = Mask::dense(student.layout().clone());
        let mut opt = Sgd::new(recipe.optimizer, student.params().len());
        let prune = recipe.prune.as_ref();
        let spec = GroupSpec::new(prune.map_or(1, |p| p.group_size))?;
        let mut estimator = match prune {
            Some(p) if p.method == Method::ObertsGlobal => {
                spec.validate(student.layout(), recipe.fisher.block_size)?;
                let f = recipe.fisher;
                let est = FisherInverse::<f64>::new(student.dim(), f.block_size, f.dampening, f.num_grads)?;
                self.report.estimator = Some(EstimatorInfo {
                    block_size: f.block_size,
                    num_grads: f.num_grads,
                    dampening: f.dampening,
                    n_blocks: est.n_blocks(),
                    bytes: est.memory_bytes(),
                });
                Some(est)
            }
            _ => None,
        };

        let log_path = self.out.join(PRUNE_LOG_FILE);
        let mut log = csv::Writer::from_writer(OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?);
        let total_events = timeline.prune_events().count();
        let mut last_report: Option<SaliencyReport<f64>> = None;
        let main = timeline.records.iter().filter(|r| matches!(r.phase, Phase::Prune | Phase::Finetune));
        for (i, rec) in main.enumerate() {
            if rec.prune {
                let p = prune.expect("prune events imply a prune section");
                let before = f64::from(student.loss(probe, None)?);
                let predicted = match estimator.as_mut() {
                    None => {
                        mask = gmp_step(student.prunable(), &mask, rec.scheduled_sparsity)?;
                        apply_mask(student.prunable_mut(), &mask)?;
                        None
                    }
                    Some(est) => {
                        est.reset();
                        let ctx = StepContext { data: train, batcher: &mut *batcher, mask: Some(&mask), kd };
                        for g in gradient_stream(&*student, ctx, est.num_grads()) {
                            est.update(&to_vec::<f32, f64>(g?.values()))?;
                        }
                        if self.report.prune_log.len() + 1 == total_events {
                            est.write_to(BufWriter::new(File::create(self.out.join(FISHER_FILE))?))?;
                        }
                        let outcome = oberts_step(student.prunable_mut(), est, &mask, rec.scheduled_sparsity, spec, p.compensate)?;
                        mask = outcome.mask;
                        let predicted = outcome.report.predicted_loss_increase;
                        last_report = Some(outcome.report);
                        Some(predicted)
                    }
                };
                let record = PruneRecord {
                    step: rec.step,
                    epoch: i as f64 / spe as f64,
                    scheduled_sparsity: rec.scheduled_sparsity,
                    achieved_sparsity: mask.sparsity(),
                    predicted_loss_increase: predicted,
                    measured_loss_before: before,
                    measured_loss_after: f64::from(student.loss(probe, None)?),
                };
                log.serialize(&record)?;
                log.flush()?;
                self.report.prune_log.push(record);
            }
            let mut ctx = StepContext { data: train, batcher: &mut *batcher, mask: Some(&mask), kd };
            train_step(student, &mut ctx, &mut opt, rec.lr, rec.step)?;
        }
        if let Some(report) = last_report {
            report.write_csv(mask.layout(), BufWriter::new(File::create(self.out.join(SALIENCY_FILE))?))?;
        }
        Ok(mask)
    }
}

/// Reads a mask written by [`run`].
pub fn read_mask(dir: &Path) -> Result<Mask> {
    Ok(serde_json::from_reader(File::open(dir.join(MASK_FILE))?)?)
}

/// Reads the final model written by [`run`].
pub fn read_model(dir: &Path) -> Result<ToyModel<f32>> {
    ToyModel::read_from(std::io::BufReader::new(File::open(dir.join(MODEL_FILE))?))
}
