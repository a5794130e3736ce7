//! Synthetic scenes with depth, and fog via the atmospheric scattering model.

mod dataset;
mod fog;
mod image;
mod scene;

pub use dataset::{
    make_dataset, read_json, scene_seed, snapshot_files, write_json, AnnotationRecord, Dataset, DatasetOptions,
    Sample, SampleEntry, SplitManifest, ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use fog::{apply_fog, fog_density, transmission, FogParams, DEFAULT_ATMOSPHERIC_LIGHT};
pub use image::{DepthMap, Image, CHANNELS};
pub use scene::{
    random_scene, render_scene, Annotation, SceneObject, SceneSampler, SceneSpec, ShapeKind, FAR_DEPTH, NEAR_DEPTH,
};
