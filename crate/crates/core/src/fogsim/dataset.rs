use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::{apply_fog, random_scene, render_scene, Annotation, DepthMap, FogParams, Image, SceneSampler};
use crate::rng::SeedStream;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
    pub fog: FogParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub clear: String,
    pub foggy: String,
    pub depth: Option<String>,
    pub fog: FogParams,
}

/// Per-split manifest written next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub fog_levels: Vec<FogParams>,
    /// Depth maps were written, so the auxiliary fog stream can be built.
    pub has_depth: bool,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub name: String,
    pub sampler: SceneSampler,
    pub write_depth: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            name: "split".into(),
            sampler: SceneSampler::default(),
            write_depth: true,
        }
    }
}

/// A loaded sample: clear/foggy pair with its depth and labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub clear: Image,
    pub foggy: Image,
    pub depth: Option<DepthMap>,
    pub annotation: Annotation,
    pub fog: FogParams,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub samples: Vec<Sample>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Seed for the `i`-th scene of a dataset generated with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    let mut rng = SeedStream::new(seed).fork("scene").index(i as u64).rng();
    rng.random()
}

/// Renders `n` scenes, fogs each with a level drawn uniformly from
/// `fog_levels`, and writes the split under `dir`.
pub fn make_dataset(
    dir: &Path,
    n: usize,
    fog_levels: &[FogParams],
    seed: u64,
    opts: &DatasetOptions,
) -> Result<SplitManifest> {
    if n == 0 {
        return Err(Error::Param("dataset needs at least one sample".into()));
    }
    if fog_levels.is_empty() {
        return Err(Error::Param("at least one fog level is required".into()));
    }
    for p in fog_levels {
        p.validate()?;
    }
    for sub in ["clear", "foggy", "depth"] {
        if sub != "depth" || opts.write_depth {
            create_dir(&dir.join(sub))?;
        }
    }
    let level_stream = SeedStream::new(seed).fork("fog-level");
    let mut samples = Vec::with_capacity(n);
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann_file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    for i in 0..n {
        let id = format!("{i:06}");
        let spec = random_scene(&opts.sampler, scene_seed(seed, i));
        let (clear, depth, annotation) = render_scene(&spec)?;
        let level = fog_levels[level_stream.index(i as u64).rng().random_range(0..fog_levels.len())];
        let foggy = apply_fog(&clear, &depth, level)?;

        let entry = SampleEntry {
            clear: format!("clear/{id}.ppm"),
            foggy: format!("foggy/{id}.ppm"),
            depth: opts.write_depth.then(|| format!("depth/{id}.bin")),
            fog: level,
            id: id.clone(),
        };
        clear.save_ppm(&dir.join(&entry.clear))?;
        foggy.save_ppm(&dir.join(&entry.foggy))?;
        if let Some(p) = &entry.depth {
            depth.save(&dir.join(p))?;
        }
        let record = AnnotationRecord {
            id,
            boxes: annotation.boxes,
            labels: annotation.labels,
            fog: level,
        };
        writeln!(ann_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&ann_path, e))?;
        samples.push(entry);
    }
    let manifest = SplitManifest {
        name: opts.name.clone(),
        count: n,
        seed,
        image_size: opts.sampler.image_size,
        fog_levels: fog_levels.to_vec(),
        has_depth: opts.write_depth,
        samples,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl Dataset {
    pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let records: Vec<AnnotationRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                path: ann_path.clone(),
                reason: e.to_string(),
            })?;
        if records.len() != manifest.samples.len() {
            return Err(Error::Format {
                path: ann_path,
                reason: format!(
                    "{} annotation records for {} manifest samples",
                    records.len(),
                    manifest.samples.len()
                ),
            });
        }
        let mut samples = Vec::with_capacity(records.len());
        for (entry, rec) in manifest.samples.iter().zip(records) {
            if entry.id != rec.id {
                return Err(Error::Format {
                    path: ann_path,
                    reason: format!("annotation id {} does not match manifest id {}", rec.id, entry.id),
                });
            }
            let depth = match &entry.depth {
                Some(p) => Some(DepthMap::load(&dir.join(p))?),
                None => None,
            };
            samples.push(Sample {
                id: rec.id,
                clear: Image::load_ppm(&dir.join(&entry.clear))?,
                foggy: Image::load_ppm(&dir.join(&entry.foggy))?,
                depth,
                annotation: Annotation {
                    boxes: rec.boxes,
                    labels: rec.labels,
                },
                fog: rec.fog,
            });
        }
        Ok(Dataset { manifest, samples })
    }
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn snapshot_files(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).unwrap_or(&p).to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
