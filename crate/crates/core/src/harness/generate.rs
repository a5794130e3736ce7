use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fogsim::{make_dataset, write_json, DatasetOptions, FogParams, MANIFEST_FILE};
use crate::harness::config::{fog_level, RunConfig, EVAL_SPLITS, TRAIN_SPLIT};
use crate::rng::SeedStream;

/// Top-level `manifest.json` of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub splits: Vec<SplitSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub dir: String,
    pub count: usize,
    pub fog_levels: Vec<FogParams>,
    pub has_depth: bool,
}

fn split_seed(seed: u64, name: &str) -> u64 {
    SeedStream::new(seed).fork("dataset").fork(name).rng().random()
}

/// Writes the training split (all fog presets, depth maps included) and one
/// evaluation split per fog level under `out`. Every evaluation split renders
/// the same scenes, so splits differ only in fog.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<DatasetIndex> {
    let mut splits = Vec::new();
    let mut emit = |name: &str, count: usize, levels: Vec<FogParams>, seed: u64| -> Result<()> {
        let opts = DatasetOptions {
            name: name.to_string(),
            sampler: cfg.data.sampler.clone(),
            write_depth: cfg.data.write_depth,
        };
        let m = make_dataset(&out.join(name), count, &levels, seed, &opts)?;
        log::info!("wrote split {name}: {count} samples");
        splits.push(SplitSummary {
            name: name.to_string(),
            dir: name.to_string(),
            count: m.count,
            fog_levels: m.fog_levels,
            has_depth: m.has_depth,
        });
        Ok(())
    };
    if cfg.data.train_count > 0 {
        let levels = EVAL_SPLITS.iter().map(|n| fog_level(n)).collect::<Result<Vec<_>>>()?;
        emit(TRAIN_SPLIT, cfg.data.train_count, levels, split_seed(cfg.seed, TRAIN_SPLIT))?;
    }
    let eval_seed = split_seed(cfg.seed, "eval");
    for name in &cfg.data.eval_splits {
        emit(name, cfg.data.eval_count, vec![fog_level(name)?], eval_seed)?;
    }
    let index = DatasetIndex { seed: cfg.seed, splits };
    write_json(&out.join(MANIFEST_FILE), &index)?;
    Ok(index)
}
