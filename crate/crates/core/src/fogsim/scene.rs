use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::{DepthMap, Image, CHANNELS};
use crate::rng::{normal_vec, SeedStream};

/// Background depth at the top and bottom rows of the canvas.
pub const FAR_DEPTH: f64 = 10.0;
pub const NEAR_DEPTH: f64 = 1.0;

/// Five synthetic shape categories; the discriminant is the label id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle = 0,
    Square = 1,
    Triangle = 2,
    Bar = 3,
    Cross = 4,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Cross,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Cross => "cross",
        }
    }

    // `dx`, `dy` are offsets from the center, `s` the half extent.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let thin = s / 3.0;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
            ShapeKind::Bar => dx.abs() <= s && dy.abs() <= thin,
            ShapeKind::Cross => {
                (dx.abs() <= s && dy.abs() <= thin) || (dx.abs() <= thin && dy.abs() <= s)
            }
        }
    }

    // Vertical half extent used for the inside-canvas check.
    fn half_height(self, s: f64) -> f64 {
        match self {
            ShapeKind::Bar => s / 3.0,
            _ => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Center in pixel units, `(x, y)`.
    pub center: (f64, f64),
    /// Half extent in pixels (radius for circles).
    pub size: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub background_top: [f64; 3],
    pub background_bottom: [f64; 3],
    /// Standard deviation of per-pixel texture noise.
    pub noise: f64,
    pub seed: u64,
}

/// Normalized `(cx, cy, w, h)` boxes with category labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl Annotation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Scene("a scene needs at least one object".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Scene("empty canvas".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (cx, cy) = o.center;
            let hh = o.kind.half_height(o.size);
            if o.size <= 0.0
                || cx - o.size < 0.0
                || cx + o.size > self.width as f64
                || cy - hh < 0.0
                || cy + hh > self.height as f64
            {
                return Err(Error::Scene(format!(
                    "object {i} ({:?} at {:?}, size {}) leaves the {}x{} canvas",
                    o.kind, o.center, o.size, self.width, self.height
                )));
            }
            if !(o.depth >= 0.0) {
                return Err(Error::Scene(format!("object {i} has negative depth")));
            }
        }
        Ok(())
    }
}

fn background_depth(y: usize, height: usize) -> f64 {
    if height <= 1 {
        return FAR_DEPTH;
    }
    FAR_DEPTH - (FAR_DEPTH - NEAR_DEPTH) * y as f64 / (height - 1) as f64
}

/// Rasterizes a scene; nearer objects are drawn over farther ones. Each
/// annotation box is the tight bounding box of that object's footprint.
pub fn render_scene(spec: &SceneSpec) -> Result<(Image, DepthMap, Annotation)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut noise_rng = SeedStream::new(spec.seed).fork("texture").rng();
    let noise = normal_vec(&mut noise_rng, h * w, spec.noise.max(0.0));

    let mut image = Image::filled(h, w, 0.0);
    let mut depth = DepthMap::uniform(h, w, 0.0);
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let px = (y * w + x) * CHANNELS;
            for c in 0..CHANNELS {
                image.pixels[px + c] =
                    spec.background_top[c] * (1.0 - t) + spec.background_bottom[c] * t;
            }
            depth.depth[y * w + x] = background_depth(y, h);
        }
    }

    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].depth.total_cmp(&spec.objects[a].depth));
    let mut boxes = vec![[0.0; 4]; spec.objects.len()];
    for &i in &order {
        let o = &spec.objects[i];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - o.center.0;
                let dy = y as f64 + 0.5 - o.center.1;
                if !o.kind.contains(dx, dy, o.size) {
                    continue;
                }
                let px = (y * w + x) * CHANNELS;
                image.pixels[px..px + CHANNELS].copy_from_slice(&o.color);
                depth.depth[y * w + x] = o.depth;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        if x0 == usize::MAX {
            return Err(Error::Scene(format!("object {i} covers no pixel centers")));
        }
        let (wf, hf) = (w as f64, h as f64);
        boxes[i] = [
            (x0 + x1) as f64 / 2.0 / wf,
            (y0 + y1) as f64 / 2.0 / hf,
            (x1 - x0) as f64 / wf,
            (y1 - y0) as f64 / hf,
        ];
    }
    for (p, n) in image.pixels.chunks_exact_mut(CHANNELS).zip(&noise) {
        for v in p {
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    let labels = spec.objects.iter().map(|o| o.kind.label()).collect();
    Ok((image, depth, Annotation { boxes, labels }))
}

/// Knobs for [`random_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub image_size: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub noise: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        SceneSampler {
            image_size: 32,
            max_objects: 3,
            min_size: 4.0,
            max_size: 7.0,
            min_depth: 2.0,
            max_depth: 9.0,
            noise: 0.02,
        }
    }
}

/// Draws a scene with 1..=max_objects non-overlapping shapes.
pub fn random_scene(sampler: &SceneSampler, seed: u64) -> SceneSpec {
    let stream = SeedStream::new(seed);
    let mut rng = stream.fork("layout").rng();
    let n_side = sampler.image_size as f64;
    let count = rng.random_range(1..=sampler.max_objects.max(1));
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let size = rng.random_range(sampler.min_size..=sampler.max_size);
        let margin = size + 0.5;
        if 2.0 * margin >= n_side {
            continue;
        }
        let center = (
            rng.random_range(margin..n_side - margin),
            rng.random_range(margin..n_side - margin),
        );
        let clear_of_others = objects.iter().all(|o| {
            (o.center.0 - center.0).abs() > o.size + size + 1.0
                || (o.center.1 - center.1).abs() > o.size + size + 1.0
        });
        if !clear_of_others {
            continue;
        }
        let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        // saturated color: one dominant channel, one dark
        let mut color = [0.0; 3];
        let hi = rng.random_range(0..3);
        for (c, v) in color.iter_mut().enumerate() {
            *v = if c == hi {
                rng.random_range(0.75..1.0)
            } else {
                rng.random_range(0.0..0.45)
            };
        }
        objects.push(SceneObject {
            kind,
            color,
            center,
            size,
            depth: rng.random_range(sampler.min_depth..=sampler.max_depth),
        });
    }
    let mut gray = |lo: f64, hi: f64| {
        let g = rng.random_range(lo..hi);
        [g, g, g * 0.95]
    };
    let background_top = gray(0.35, 0.55);
    let background_bottom = gray(0.2, 0.4);
    SceneSpec {
        height: sampler.image_size,
        width: sampler.image_size,
        objects,
        background_top,
        background_bottom,
        noise: sampler.noise,
        seed,
    }
}
