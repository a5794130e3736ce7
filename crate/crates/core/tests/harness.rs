use std::fs;
use std::path::{Path, PathBuf};

use fogdetr::detector::{Detector, Variant};
use fogdetr::distill::StepMetrics;
use fogdetr::error::Error;
use fogdetr::fogsim::{snapshot_files, Dataset, MANIFEST_FILE};
use fogdetr::harness::{
    cmd_eval, cmd_generate, cmd_train, DatasetIndex, RunConfig, RunReport, RunStatus, CHECKPOINT_DIR, EVAL_SPLITS,
    METRICS_FILE, REPORT_JSON, REPORT_TXT,
};
use fogdetr::params::ParamStore;

fn tiny(seed: u64, data: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.data.dir = data.to_path_buf();
    cfg.data.train_count = 6;
    cfg.data.eval_count = 4;
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.distill.teacher_steps = 3;
    cfg
}

fn generated(seed: u64) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(seed, &dir.path().join("data"));
    cmd_generate(&cfg, &cfg.data.dir).unwrap();
    (dir, cfg)
}

fn metrics(dir: &Path) -> Vec<StepMetrics> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_writes_one_split_per_fog_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1, &dir.path().join("data"));
    cfg.data.eval_count = 10;
    let index = cmd_generate(&cfg, &cfg.data.dir).unwrap();
    let names: Vec<&str> = index.splits.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["train", "clear", "low", "mid", "high"]);
    for split in EVAL_SPLITS {
        let ds = Dataset::load(&cfg.data.dir.join(split)).unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!(ds.manifest.fog_levels.len(), 1);
    }
    let on_disk: DatasetIndex = serde_json::from_slice(&fs::read(cfg.data.dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, index);
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let snap = |name: &str, seed: u64| {
        let cfg = tiny(seed, &dir.path().join(name));
        cmd_generate(&cfg, &cfg.data.dir).unwrap();
        snapshot_files(&cfg.data.dir).unwrap()
    };
    let a = snap("a", 4);
    assert_eq!(a, snap("b", 4));
    assert_ne!(a, snap("c", 5));
}

#[test]
fn clear_split_pairs_are_identical() {
    let (_dir, cfg) = generated(2);
    let split = cfg.data.dir.join("clear");
    let ds = Dataset::load(&split).unwrap();
    for entry in &ds.manifest.samples {
        assert_eq!(fs::read(split.join(&entry.clear)).unwrap(), fs::read(split.join(&entry.foggy)).unwrap());
    }
    // the fogged splits share scenes with the clear one but differ in pixels
    let high = Dataset::load(&cfg.data.dir.join("high")).unwrap();
    for (c, h) in ds.samples.iter().zip(&high.samples) {
        assert_eq!(c.annotation, h.annotation);
        assert_eq!(c.clear.pixels, h.clear.pixels);
        assert_ne!(h.clear.pixels, h.foggy.pixels);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (dir, cfg) = generated(3);
    let run = |name: &str, cfg: &RunConfig| -> (RunReport, Vec<u8>) {
        let out = dir.path().join(name);
        let r = cmd_train(cfg, &out).unwrap();
        (r, fs::read(out.join(METRICS_FILE)).unwrap())
    };
    let (a, ma) = run("a", &cfg);
    let (b, mb) = run("b", &cfg);
    assert_eq!(a.status, RunStatus::Completed);
    assert_eq!(a.steps_completed, 4);
    assert_eq!(ma, mb);
    assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(run("c", &other).0.checkpoint_hash, a.checkpoint_hash);
}

#[test]
fn run_directory_has_the_fixed_layout() {
    let (dir, cfg) = generated(3);
    let out = dir.path().join("run");
    cmd_train(&cfg, &out).unwrap();
    for f in [MANIFEST_FILE, METRICS_FILE, REPORT_JSON, REPORT_TXT] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(out.join(CHECKPOINT_DIR).is_dir());
    let report: RunReport = serde_json::from_slice(&fs::read(out.join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report.config, cfg);
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let (dir, mut cfg) = generated(6);
    cfg.optimizer.lr = 0.0;
    let out = dir.path().join("run");
    cmd_train(&cfg, &out).unwrap();
    let saved = ParamStore::load(&out.join(CHECKPOINT_DIR)).unwrap();
    let init = Detector::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(saved.content_hash(), init.params.content_hash());
}

#[test]
fn fog_stream_variants_fail_fast_without_depth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(7, &dir.path().join("data"));
    cfg.data.write_depth = false;
    cmd_generate(&cfg, &cfg.data.dir).unwrap();
    for variant in [Variant::Waa, Variant::Wfe] {
        cfg.model.variant = variant;
        let out = dir.path().join(variant.name());
        assert!(matches!(cmd_train(&cfg, &out), Err(Error::Config(_))));
        assert!(!out.join(METRICS_FILE).exists());
    }
    // the baseline does not need depth
    cfg.model.variant = Variant::Baseline;
    cmd_train(&cfg, &dir.path().join("baseline")).unwrap();
}

#[test]
fn fog_stream_variants_train_with_depth() {
    let (dir, mut cfg) = generated(8);
    for variant in [Variant::Waa, Variant::Wfe] {
        cfg.model.variant = variant;
        let r = cmd_train(&cfg, &dir.path().join(variant.name())).unwrap();
        assert_eq!(r.status, RunStatus::Completed);
    }
}

fn checkpoint(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let out = dir.join("run");
    cmd_train(cfg, &out).unwrap();
    out.join(CHECKPOINT_DIR)
}

#[test]
fn eval_is_read_only_and_repeatable() {
    let (dir, cfg) = generated(9);
    let ckpt = checkpoint(dir.path(), &cfg);
    let data_before = snapshot_files(&cfg.data.dir).unwrap();
    let ckpt_before = snapshot_files(&ckpt).unwrap();
    let a = cmd_eval(&cfg, &ckpt, &dir.path().join("eval-a")).unwrap();
    let b = cmd_eval(&cfg, &ckpt, &dir.path().join("eval-b")).unwrap();
    assert_eq!(snapshot_files(&cfg.data.dir).unwrap(), data_before);
    assert_eq!(snapshot_files(&ckpt).unwrap(), ckpt_before);
    let splits: Vec<&str> = a.evaluations.iter().map(|e| e.split.as_str()).collect();
    assert_eq!(splits, EVAL_SPLITS);
    assert_eq!(a.evaluations, b.evaluations);
    let text = fs::read_to_string(dir.path().join("eval-a").join(REPORT_TXT)).unwrap();
    assert!(text.contains("mAP"));
}

#[test]
fn eval_rejects_a_mismatched_architecture() {
    let (dir, cfg) = generated(10);
    let ckpt = checkpoint(dir.path(), &cfg);
    let mut wide = cfg.clone();
    wide.model.token_dim *= 2;
    assert!(matches!(cmd_eval(&wide, &ckpt, &dir.path().join("eval")), Err(Error::Architecture(_))));
}

#[test]
fn untrained_model_scores_near_zero() {
    let (dir, mut cfg) = generated(11);
    cfg.optimizer.lr = 0.0;
    let ckpt = checkpoint(dir.path(), &cfg);
    let r = cmd_eval(&cfg, &ckpt, &dir.path().join("eval")).unwrap();
    for e in &r.evaluations {
        assert!(e.map50 < 0.1, "{}: {}", e.split, e.map50);
    }
}

#[test]
fn pl_with_tied_teacher_on_clear_data_starts_at_zero_perceptual_loss() {
    let (dir, mut cfg) = generated(12);
    cfg.model.variant = Variant::Pl;
    cfg.train.fog_levels = vec!["clear".into()];
    let teacher_dir = dir.path().join("teacher-init");
    let mut tcfg = cfg.model.clone();
    tcfg.variant = Variant::Baseline;
    Detector::new(tcfg, cfg.seed).unwrap().params.save(&teacher_dir).unwrap();
    cfg.distill.teacher_checkpoint = Some(teacher_dir);
    let out = dir.path().join("pl");
    let r = cmd_train(&cfg, &out).unwrap();
    assert!(r.teacher_checkpoint_hash.is_some());
    let m = metrics(&out);
    assert_eq!(m[0].l_perc, 0.0);
    assert!(m.iter().skip(1).any(|s| s.l_perc > 0.0));
}

#[test]
fn pl_trains_its_own_teacher_when_none_is_given() {
    let (dir, mut cfg) = generated(13);
    cfg.model.variant = Variant::Pl;
    let out = dir.path().join("pl");
    let r = cmd_train(&cfg, &out).unwrap();
    assert!(out.join("teacher").join(CHECKPOINT_DIR).is_dir());
    assert_eq!(metrics(&out.join("teacher")).len(), 3);
    let teacher = ParamStore::load(&out.join("teacher").join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(r.teacher_checkpoint_hash, Some(teacher.content_hash()));
    assert!(metrics(&out).iter().all(|m| m.l_perc >= 0.0));
}

#[test]
fn divergence_is_recorded_and_the_last_good_checkpoint_kept() {
    let (dir, mut cfg) = generated(14);
    cfg.model.variant = Variant::Waa;
    cfg.model.weather_activation = fogdetr::attention::WeatherActivation::Raw;
    cfg.optimizer.lr = 1e6;
    cfg.optimizer.grad_clip = None;
    cfg.train.steps = 50;
    cfg.train.eval_splits = vec!["high".into()];
    let out = dir.path().join("run");
    let r = cmd_train(&cfg, &out).unwrap();
    assert_eq!(r.status, RunStatus::Diverged);
    let d = r.divergence.as_ref().unwrap();
    assert!(!d.is_finite());
    assert_eq!(d.step, r.steps_completed + 1);
    assert!(r.evaluations.is_empty());
    let saved = ParamStore::load(&out.join(CHECKPOINT_DIR)).unwrap();
    assert!(saved.iter().all(|(_, t)| t.is_finite()));
    assert_eq!(saved.content_hash(), r.checkpoint_hash);
    assert!(fs::read_to_string(out.join(REPORT_TXT)).unwrap().contains("diverged"));
}

#[test]
fn subset_limits_training_data() {
    let (_dir, mut cfg) = generated(15);
    cfg.train.subset = Some(2);
    assert_eq!(fogdetr::harness::load_training_data(&cfg).unwrap().len(), 2);
}
