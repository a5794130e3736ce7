use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detector::{aux_image, Detector, DetectorConfig, Variant};
use crate::distill::{distill_step, supervised_step, StepMetrics, StepSample, TeacherStudentPair};
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::fogsim::{apply_fog, write_json, Annotation, Dataset, FogParams, Image, Sample, MANIFEST_FILE};
use crate::harness::config::{fog_level, RunConfig, TRAIN_SPLIT};
use crate::harness::eval::{evaluate_split, write_reports};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::rng::SeedStream;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// Stopped on a non-finite loss or gradient; the checkpoint holds the
    /// parameters from before the failing step.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub final_metrics: Option<StepMetrics>,
    pub divergence: Option<StepMetrics>,
    pub metrics_path: String,
    pub checkpoint_hash: String,
    pub teacher_checkpoint_hash: Option<String>,
    pub evaluations: Vec<EvalReport>,
    pub wall_clock_seconds: f64,
}

/// `manifest.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub variant: Variant,
    pub files: Vec<String>,
}

/// One prepared training input.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub clear: Image,
    pub input: Image,
    pub aux: Option<Image>,
    pub annotation: Annotation,
}

impl TrainItem {
    pub fn as_step_sample(&self) -> StepSample<'_> {
        StepSample {
            clear: &self.clear,
            input: &self.input,
            aux: self.aux.as_ref(),
            annotation: &self.annotation,
        }
    }
}

/// Fogs `sample` at `level` (from its depth map when present, otherwise the
/// stored foggy image is used as is) and builds the auxiliary input.
pub fn prepare_item(sample: &Sample, level: FogParams, model: &DetectorConfig) -> Result<TrainItem> {
    let (input, level) = match &sample.depth {
        Some(d) => (apply_fog(&sample.clear, d, level)?, level),
        None => (sample.foggy.clone(), sample.fog),
    };
    let aux = if model.variant.needs_fog_stream() {
        Some(aux_image(&input, sample.depth.as_ref(), level, model.aux_input)?)
    } else {
        None
    };
    Ok(TrainItem {
        clear: sample.clear.clone(),
        input,
        aux,
        annotation: sample.annotation.clone(),
    })
}

/// Deterministic batch stream: a fresh permutation of the data every epoch,
/// and a fog level per drawn sample.
pub struct BatchPlan {
    stream: SeedStream,
    n: usize,
    batch_size: usize,
    clear_fraction: f64,
    levels: Vec<FogParams>,
}

impl BatchPlan {
    pub fn new(stream: SeedStream, n: usize, batch_size: usize, clear_fraction: f64, levels: Vec<FogParams>) -> Self {
        BatchPlan {
            stream,
            n,
            batch_size,
            clear_fraction,
            levels,
        }
    }

    /// `(sample index, fog level)` pairs of 0-based step `step`.
    pub fn batch(&self, step: usize) -> Vec<(usize, FogParams)> {
        let mut fog_rng = self.stream.fork("fog").index(step as u64).rng();
        (0..self.batch_size.min(self.n))
            .map(|k| {
                let pos = step * self.batch_size.min(self.n) + k;
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut self.stream.fork("order").index((pos / self.n) as u64).rng());
                let level = if fog_rng.random_bool(self.clear_fraction) {
                    FogParams::clear()
                } else {
                    self.levels[fog_rng.random_range(0..self.levels.len())]
                };
                (perm[pos % self.n], level)
            })
            .collect()
    }
}

/// Result of a training loop: metrics of every completed step and the
/// diagnostics of the failing step, if any.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub metrics: Vec<StepMetrics>,
    pub divergence: Option<StepMetrics>,
}

pub enum Learner<'a> {
    Supervised(&'a mut Detector),
    Distill(&'a mut TeacherStudentPair, f64),
}

impl Learner<'_> {
    fn config(&self) -> &DetectorConfig {
        match self {
            Learner::Supervised(d) => &d.config,
            Learner::Distill(p, _) => &p.student.config,
        }
    }
}

/// Runs `steps` optimizer steps, streaming every step's metrics to `sink`.
/// A divergence ends the loop without error and leaves the parameters as they
/// were before the failing step.
pub fn train_loop(
    mut learner: Learner<'_>,
    opt: &mut Sgd,
    data: &[Sample],
    plan: &BatchPlan,
    steps: usize,
    sink: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    for step in 0..steps {
        let items = plan
            .batch(step)
            .into_iter()
            .map(|(i, level)| prepare_item(&data[i], level, learner.config()))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<StepSample<'_>> = items.iter().map(TrainItem::as_step_sample).collect();
        let result = match &mut learner {
            Learner::Supervised(det) => supervised_step(det, &batch, opt, step + 1),
            Learner::Distill(pair, w) => distill_step(pair, &batch, opt, step + 1, *w),
        };
        match result {
            Ok(m) => {
                sink(&m)?;
                log.metrics.push(m);
            }
            Err(Error::Diverged(m)) => {
                log::warn!("diverged at step {}: {:?}", m.step, m);
                sink(&m)?;
                log.divergence = Some(*m);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

fn seed_for(seed: u64, role: &str) -> u64 {
    SeedStream::new(seed).fork(role).rng().random()
}

/// Loads the training split, fails fast when the variant's fog stream cannot
/// be built from it, and applies `train.subset`.
pub fn load_training_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let dir = cfg.data.dir.join(TRAIN_SPLIT);
    let manifest = Dataset::read_manifest(&dir)?;
    if cfg.needs_depth() && !manifest.has_depth {
        return Err(Error::Config(format!(
            "variant {} needs the fog stream, but split {} has no depth maps",
            cfg.model.variant.name(),
            dir.display()
        )));
    }
    let mut ds = Dataset::load(&dir)?;
    if let Some(n) = cfg.train.subset {
        if n == 0 {
            return Err(Error::Config("train.subset must be positive".into()));
        }
        ds.samples.truncate(n);
    }
    Ok(ds.samples)
}

struct MetricsFile {
    path: PathBuf,
    file: fs::File,
}

impl MetricsFile {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsFile { path, file })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&self.path, e))
    }
}

fn teacher_config(model: &DetectorConfig) -> DetectorConfig {
    DetectorConfig {
        variant: Variant::Baseline,
        ..model.clone()
    }
}

/// Trains (or loads) the frozen teacher of a PL run. Trained teachers are
/// written under `out/teacher/`.
fn obtain_teacher(cfg: &RunConfig, data: &[Sample], out: &Path) -> Result<Detector> {
    let tcfg = teacher_config(&cfg.model);
    if let Some(p) = &cfg.distill.teacher_checkpoint {
        return Detector::from_params(tcfg, ParamStore::load(p)?);
    }
    let dir = out.join("teacher");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut teacher = Detector::new(tcfg, seed_for(cfg.seed, "teacher"))?;
    let plan = BatchPlan::new(
        SeedStream::new(cfg.seed).fork("teacher-data"),
        data.len(),
        cfg.train.batch_size,
        cfg.distill.teacher_clear_fraction,
        levels(cfg)?,
    );
    let mut opt = Sgd::new(cfg.optimizer);
    let mut metrics = MetricsFile::create(dir.join(METRICS_FILE))?;
    let log = train_loop(
        Learner::Supervised(&mut teacher),
        &mut opt,
        data,
        &plan,
        cfg.distill.teacher_steps,
        &mut |m| metrics.write(m),
    )?;
    if let Some(d) = log.divergence {
        return Err(Error::Diverged(Box::new(d)));
    }
    teacher.params.save(&dir.join(CHECKPOINT_DIR))?;
    Ok(teacher)
}

fn levels(cfg: &RunConfig) -> Result<Vec<FogParams>> {
    cfg.train.fog_levels.iter().map(|n| fog_level(n)).collect()
}

/// Trains the configured variant and writes the run directory.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_training_data(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let plan = BatchPlan::new(
        SeedStream::new(cfg.seed).fork("train-data"),
        data.len(),
        cfg.train.batch_size,
        cfg.train.clear_fraction,
        levels(cfg)?,
    );
    let mut opt = Sgd::new(cfg.optimizer);
    let mut metrics = MetricsFile::create(out.join(METRICS_FILE))?;
    let mut sink = |m: &StepMetrics| metrics.write(m);
    let (detector, log, teacher_hash) = if cfg.model.variant == Variant::Pl {
        let teacher = obtain_teacher(cfg, &data, out)?;
        let teacher_hash = teacher.params.content_hash();
        let student = Detector::new(cfg.model.clone(), cfg.seed)?;
        let mut pair = TeacherStudentPair::new(teacher, student, cfg.distill.perceptual.clone())?;
        let log = train_loop(
            Learner::Distill(&mut pair, cfg.distill.perc_weight),
            &mut opt,
            &data,
            &plan,
            cfg.train.steps,
            &mut sink,
        )?;
        (pair.student, log, Some(teacher_hash))
    } else {
        let mut det = Detector::new(cfg.model.clone(), cfg.seed)?;
        let log = train_loop(Learner::Supervised(&mut det), &mut opt, &data, &plan, cfg.train.steps, &mut sink)?;
        (det, log, None)
    };
    detector.params.save(&out.join(CHECKPOINT_DIR))?;

    let mut evaluations = Vec::new();
    if log.divergence.is_none() {
        for split in &cfg.train.eval_splits {
            evaluations.push(evaluate_split(&detector, &cfg.data.dir.join(split), split)?);
        }
    }
    let report = RunReport {
        command: "train".into(),
        config: cfg.clone(),
        status: if log.divergence.is_some() {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        },
        steps_completed: log.metrics.len(),
        final_metrics: log.metrics.last().cloned(),
        divergence: log.divergence,
        metrics_path: METRICS_FILE.into(),
        checkpoint_hash: detector.params.content_hash(),
        teacher_checkpoint_hash: teacher_hash,
        evaluations,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let name = cfg.eval.model_name.clone().unwrap_or_else(|| cfg.model.variant.name().to_string());
    write_reports(out, &report, &name)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            command: "train".into(),
            seed: cfg.seed,
            variant: cfg.model.variant,
            files: [METRICS_FILE, CHECKPOINT_DIR, REPORT_JSON, REPORT_TXT]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        },
    )?;
    Ok(report)
}
