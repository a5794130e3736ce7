use crate::attention::{
    fog_aware_attention, fusion_encoder_layer, multi_head_attention, sinusoidal_positions, weather_scalar,
    AttentionParams, FusionParams, WeatherScalarParams, LAYER_NORM_EPS,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::backbone::{backbone_forward, BackboneParams, FeatureMap};
use crate::detector::{AuxInput, DetectorConfig, Variant};
use crate::error::{Error, Result};
use crate::fogsim::{fog_density, DepthMap, FogParams, Image, CHANNELS};
use crate::params::{Binding, ParamStore};
use crate::rng::SeedStream;

pub const PIXEL_MEAN: f64 = 0.5;

/// Per-query outputs recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DetectionOutput {
    /// `[m x 4]` sigmoid-normalized `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[m x (C + 1)]`; the last column is no-object.
    pub class_logits: Var,
}

/// Detached per-query prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub bbox: [f64; 4],
    pub probs: Vec<f64>,
}

impl DetectionOutput {
    pub fn detach(&self, tape: &Tape) -> Vec<QueryPrediction> {
        let (b, l) = (tape.value(self.boxes), tape.value(self.class_logits));
        (0..b.rows())
            .map(|i| {
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                QueryPrediction {
                    bbox: b.row(i).try_into().expect("4 box coordinates"),
                    probs: exps.iter().map(|e| e / z).collect(),
                }
            })
            .collect()
    }
}

pub struct Forward {
    pub features: Vec<FeatureMap>,
    pub memory: Var,
    pub output: DetectionOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
}

/// Builds the auxiliary-stream image for WAA/WFE.
pub fn aux_image(foggy: &Image, depth: Option<&DepthMap>, fog: FogParams, kind: AuxInput) -> Result<Image> {
    match kind {
        AuxInput::FoggyImage => Ok(foggy.clone()),
        AuxInput::DensityMap => {
            let depth = depth.ok_or_else(|| Error::Config("density-map fog stream needs a depth map".into()))?;
            let density = fog_density(depth, fog.beta)?;
            Ok(Image {
                height: depth.height,
                width: depth.width,
                pixels: density.iter().flat_map(|&v| [v; CHANNELS]).collect(),
            })
        }
    }
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) {
    store.init_normal(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn linear(tape: &mut Tape, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{name}.w"))?)?;
    tape.add_row_vector(y, b.get(&format!("{name}.b"))?)
}

fn add_norm(tape: &mut Tape, b: &Binding, name: &str, x: Var, update: Var) -> Result<Var> {
    let sum = tape.add(x, update)?;
    tape.layer_norm(
        sum,
        b.get(&format!("{name}.gain"))?,
        b.get(&format!("{name}.bias"))?,
        LAYER_NORM_EPS,
    )
}

fn init_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gain"), Tensor::ones(&[d]));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
}

/// Flattened last-stage features, projected to the token width, plus the
/// sinusoidal positional table.
pub fn tokens(tape: &mut Tape, b: &Binding, proj: &str, map: &FeatureMap) -> Result<Var> {
    let x = linear(tape, b, proj, map.var)?;
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let pe = tape.constant(sinusoidal_positions(n, d)?);
    tape.add(x, pe)
}

/// Dispatches to the encoder of the configured variant.
pub fn encode(tape: &mut Tape, cfg: &DetectorConfig, b: &Binding, clear: Var, fog: Option<Var>) -> Result<Var> {
    match (cfg.variant, fog) {
        (Variant::Baseline | Variant::Pl, _) => {
            let mut x = clear;
            for l in 0..cfg.encoder_layers {
                let p = AttentionParams::bind(b, &format!("enc{l}.att"), cfg.heads)?;
                let a = multi_head_attention(tape, x, x, x, &p)?;
                x = add_norm(tape, b, &format!("enc{l}.norm"), x, a)?;
            }
            Ok(x)
        }
        (Variant::Waa, Some(z)) => {
            let mut x = clear;
            for l in 0..cfg.encoder_layers {
                let w = WeatherScalarParams::bind(b, &format!("enc{l}.weather"))?;
                let v_w = weather_scalar(tape, z, &w, cfg.weather_activation)?;
                x = fog_aware_layer(tape, cfg, b, l, x, v_w)?;
            }
            Ok(x)
        }
        (Variant::Wfe, Some(z)) => {
            let mut x = clear;
            for l in 0..cfg.encoder_layers {
                let p = FusionParams::bind(b, &format!("enc{l}.wfe"), cfg.heads)?;
                x = fusion_encoder_layer(tape, x, z, &p)?;
            }
            Ok(x)
        }
        (v, None) => Err(Error::Config(format!("variant {} needs the fog stream", v.name()))),
    }
}

fn fog_aware_layer(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    b: &Binding,
    layer: usize,
    x: Var,
    v_w: Var,
) -> Result<Var> {
    let p = AttentionParams::bind(b, &format!("enc{layer}.att"), cfg.heads)?;
    let a = fog_aware_attention(tape, x, v_w, &p, cfg.weather_axis)?;
    add_norm(tape, b, &format!("enc{layer}.norm"), x, a)
}

/// WAA encoder with a caller-supplied weather scalar in every layer.
pub fn encode_with_weather(tape: &mut Tape, cfg: &DetectorConfig, b: &Binding, clear: Var, v_w: Var) -> Result<Var> {
    let mut x = clear;
    for l in 0..cfg.encoder_layers {
        x = fog_aware_layer(tape, cfg, b, l, x, v_w)?;
    }
    Ok(x)
}

/// Learned queries cross-attend the encoder memory, then a linear class head
/// and a two-layer box head with sigmoid.
pub fn decode(tape: &mut Tape, cfg: &DetectorConfig, b: &Binding, memory: Var) -> Result<DetectionOutput> {
    let q = b.get("decoder.queries")?;
    let p = AttentionParams::bind(b, "decoder.cross", cfg.heads)?;
    let a = multi_head_attention(tape, q, memory, memory, &p)?;
    let h = add_norm(tape, b, "decoder.norm", q, a)?;
    let class_logits = linear(tape, b, "head.class", h)?;
    let hidden = linear(tape, b, "head.box1", h)?;
    let hidden = tape.relu(hidden);
    let raw = linear(tape, b, "head.box2", hidden)?;
    let boxes = tape.sigmoid(raw);
    Ok(DetectionOutput { boxes, class_logits })
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeedStream::new(seed).fork("detector");
        let mut store = ParamStore::new();
        let (d, c3) = (config.token_dim, config.channels[2]);
        let d_k = config.key_dim();
        BackboneParams::init(&mut store, "backbone", CHANNELS, &config.channels, &mut root.fork("backbone").rng());
        init_linear(&mut store, "input_proj", c3, d, &mut root.fork("input_proj").rng());
        if config.variant.needs_fog_stream() {
            let mut rng = root.fork("aux").rng();
            BackboneParams::init(&mut store, "aux_backbone", CHANNELS, &config.channels, &mut rng);
            init_linear(&mut store, "aux_proj", c3, d, &mut rng);
        }
        for l in 0..config.encoder_layers {
            let mut rng = root.fork("encoder").index(l as u64).rng();
            match config.variant {
                Variant::Wfe => FusionParams::init(&mut store, &format!("enc{l}.wfe"), d, config.heads, d_k, &mut rng),
                v => {
                    AttentionParams::init(&mut store, &format!("enc{l}.att"), d, config.heads, d_k, &mut rng);
                    init_norm(&mut store, &format!("enc{l}.norm"), d);
                    if v == Variant::Waa {
                        WeatherScalarParams::init(&mut store, &format!("enc{l}.weather"), d, &mut rng);
                    }
                }
            }
        }
        let mut rng = root.fork("decoder").rng();
        store.insert("decoder.queries", Tensor::randn(&[config.queries, d], 1.0, &mut rng));
        AttentionParams::init(&mut store, "decoder.cross", d, config.heads, d_k, &mut rng);
        init_norm(&mut store, "decoder.norm", d);
        init_linear(&mut store, "head.class", d, config.num_classes + 1, &mut rng);
        init_linear(&mut store, "head.box1", d, config.box_hidden, &mut rng);
        init_linear(&mut store, "head.box2", config.box_hidden, 4, &mut rng);
        Ok(Detector { config, params: store })
    }

    /// Wraps loaded parameters after checking them against the config's layout.
    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        let reference = Detector::new(config.clone(), 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Detector { config, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.params.bind(tape, trainable)
    }

    fn image_var(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(Error::Config(format!(
                "image is {}x{}, detector expects {s}x{s}",
                image.height, image.width
            )));
        }
        // Center pixels around zero so the first ReLU sees signed input.
        let mut t = image.to_tensor();
        t.data_mut().iter_mut().for_each(|v| *v -= PIXEL_MEAN);
        Ok(tape.constant(t))
    }

    /// Backbone feature maps for `image`.
    pub fn features(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<Vec<FeatureMap>> {
        let x = self.image_var(tape, image)?;
        let p = BackboneParams::bind(b, "backbone")?;
        backbone_forward(tape, x, image.height, image.width, &p)
    }

    /// Fog-stream tokens `z` from the auxiliary image.
    pub fn fog_tokens(&self, tape: &mut Tape, b: &Binding, aux: &Image) -> Result<Var> {
        let x = self.image_var(tape, aux)?;
        let p = BackboneParams::bind(b, "aux_backbone")?;
        let maps = backbone_forward(tape, x, aux.height, aux.width, &p)?;
        tokens(tape, b, "aux_proj", &maps[2])
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, image: &Image, aux: Option<&Image>) -> Result<Forward> {
        let features = self.features(tape, b, image)?;
        let clear = tokens(tape, b, "input_proj", &features[2])?;
        let fog = match (self.config.variant.needs_fog_stream(), aux) {
            (true, Some(a)) => Some(self.fog_tokens(tape, b, a)?),
            (true, None) => {
                return Err(Error::Config(format!(
                    "variant {} needs the fog stream",
                    self.config.variant.name()
                )))
            }
            (false, _) => None,
        };
        let memory = encode(tape, &self.config, b, clear, fog)?;
        let output = decode(tape, &self.config, b, memory)?;
        Ok(Forward {
            features,
            memory,
            output,
        })
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Image, aux: Option<&Image>) -> Result<Vec<QueryPrediction>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &b, image, aux)?;
        Ok(f.output.detach(&tape))
    }
}

/// Forward pass, detached matching and loss for one annotated image.
pub struct SampleLoss {
    pub forward: Forward,
    pub matching: crate::detector::MatchResult,
    pub terms: crate::detector::LossTerms,
}

impl Detector {
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        b: &Binding,
        image: &Image,
        aux: Option<&Image>,
        gt: &crate::fogsim::Annotation,
    ) -> Result<SampleLoss> {
        let forward = self.forward(tape, b, image, aux)?;
        let preds = forward.output.detach(tape);
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let boxes: Vec<[f64; 4]> = preds.iter().map(|p| p.bbox).collect();
        let matching = crate::detector::hungarian_match(&probs, &boxes, gt, &self.config.loss)?;
        let terms = crate::detector::detection_loss(tape, &forward.output, gt, &matching, &self.config.loss)?;
        Ok(SampleLoss {
            forward,
            matching,
            terms,
        })
    }
}
