use std::fs;
use std::path::Path;

use crate::detector::{aux_image, AuxInput, Detector};
use crate::error::{Error, Result};
use crate::evalkit::{format_table, map50, predictions_from_queries, EvalReport};
use crate::fogsim::{write_json, Dataset, ShapeKind, MANIFEST_FILE};
use crate::harness::config::RunConfig;
use crate::harness::train::{RunManifest, RunReport, RunStatus, REPORT_JSON, REPORT_TXT};
use crate::params::ParamStore;

pub fn category_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| match ShapeKind::ALL.get(c) {
            Some(k) => k.name().to_string(),
            None => format!("class{c}"),
        })
        .collect()
}

/// mAP@50 of `det` on the stored foggy images of the split at `dir`.
pub fn evaluate_split(det: &Detector, dir: &Path, split: &str) -> Result<EvalReport> {
    let ds = Dataset::load(dir)?;
    if det.config.variant.needs_fog_stream() && det.config.aux_input == AuxInput::DensityMap && !ds.manifest.has_depth {
        return Err(Error::Config(format!("split {split} has no depth maps for the fog stream")));
    }
    let mut preds = Vec::new();
    let mut gts = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let aux = if det.config.variant.needs_fog_stream() {
            Some(aux_image(&s.foggy, s.depth.as_ref(), s.fog, det.config.aux_input)?)
        } else {
            None
        };
        preds.extend(predictions_from_queries(i, &det.predict(&s.foggy, aux.as_ref())?));
        gts.push(s.annotation.clone());
    }
    let result = map50(&preds, &gts, det.config.num_classes)?;
    let names = category_names(det.config.num_classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(EvalReport::new(&result, &names, split))
}

pub fn write_reports(out: &Path, report: &RunReport, model_name: &str) -> Result<()> {
    write_json(&out.join(REPORT_JSON), report)?;
    let names = category_names(report.config.model.num_classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows: Vec<(String, EvalReport)> = report
        .evaluations
        .iter()
        .map(|e| (model_name.to_string(), e.clone()))
        .collect();
    let mut text = format!("{} run, status {:?}\n", report.command, report.status);
    if let Some(d) = &report.divergence {
        text.push_str(&format!(
            "diverged at step {}: l_obj={} l_perc={} l_total={} grad_norm={:?}\n",
            d.step, d.l_obj, d.l_perc, d.l_total, d.grad_norm
        ));
    }
    if !rows.is_empty() {
        text.push_str(&format_table(&names, &rows));
    }
    fs::write(out.join(REPORT_TXT), text).map_err(|e| Error::io(out.join(REPORT_TXT), e))
}

/// Evaluates a checkpoint on every configured split. Reads the dataset and
/// the checkpoint only; all output goes to `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let params = ParamStore::load(checkpoint)?;
    let det = Detector::from_params(cfg.model.clone(), params)?;
    let mut evaluations = Vec::new();
    for split in cfg.eval_splits() {
        evaluations.push(evaluate_split(&det, &cfg.data.dir.join(split), split)?);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = RunReport {
        command: "eval".into(),
        config: cfg.clone(),
        status: RunStatus::Completed,
        steps_completed: 0,
        final_metrics: None,
        divergence: None,
        metrics_path: String::new(),
        checkpoint_hash: det.params.content_hash(),
        teacher_checkpoint_hash: None,
        evaluations,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let name = cfg.eval.model_name.clone().unwrap_or_else(|| cfg.model.variant.name().to_string());
    write_reports(out, &report, &name)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            command: "eval".into(),
            seed: cfg.seed,
            variant: cfg.model.variant,
            files: vec![REPORT_JSON.into(), REPORT_TXT.into()],
        },
    )?;
    Ok(report)
}
