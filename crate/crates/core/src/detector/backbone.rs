use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;

pub const STAGES: usize = 3;

/// Token-major feature map: `[height*width, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    /// Per stage: kernel `[9*c_in, c_out]` and bias `[c_out]`.
    pub stages: Vec<(Var, Var)>,
}

impl BackboneParams {
    pub fn init(store: &mut ParamStore, prefix: &str, in_channels: usize, channels: &[usize; 3], rng: &mut Rng) {
        let mut c_in = in_channels;
        for (s, &c_out) in channels.iter().enumerate() {
            // He initialization keeps activation scale through the ReLUs.
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            store.insert(
                format!("{prefix}.conv{}.w", s + 1),
                crate::autodiff::Tensor::randn(&[9 * c_in, c_out], std, rng),
            );
            store.insert(
                format!("{prefix}.conv{}.b", s + 1),
                crate::autodiff::Tensor::zeros(&[c_out]),
            );
            c_in = c_out;
        }
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        let stages = (1..=STAGES)
            .map(|s| Ok((b.get(&format!("{prefix}.conv{s}.w"))?, b.get(&format!("{prefix}.conv{s}.b"))?)))
            .collect::<Result<_>>()?;
        Ok(BackboneParams { stages })
    }
}

/// Three 3x3 stride-2 convolutions with ReLU, halving resolution each stage.
pub fn backbone_forward(
    tape: &mut Tape,
    image: Var,
    height: usize,
    width: usize,
    p: &BackboneParams,
) -> Result<Vec<FeatureMap>> {
    if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "backbone input {height}x{width} must have dims divisible by 8"
        )));
    }
    let mut x = FeatureMap {
        var: image,
        height,
        width,
        channels: tape.shape(image).get(1).copied().unwrap_or(0),
    };
    if tape.shape(image) != [height * width, x.channels] {
        return Err(Error::shape("backbone input", tape.shape(image), &[height * width, x.channels]));
    }
    let mut maps = Vec::with_capacity(STAGES);
    for &(w, b) in &p.stages {
        let geom = ConvGeometry {
            height: x.height,
            width: x.width,
            channels: x.channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = tape.im2col(x.var, geom)?;
        let y = tape.matmul(cols, w)?;
        let y = tape.add_row_vector(y, b)?;
        let y = tape.relu(y);
        x = FeatureMap {
            var: y,
            height: geom.out_height(),
            width: geom.out_width(),
            channels: tape.shape(w)[1],
        };
        maps.push(x);
    }
    Ok(maps)
}
