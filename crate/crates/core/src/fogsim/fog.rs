use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogsim::{DepthMap, Image, CHANNELS};

pub const DEFAULT_ATMOSPHERIC_LIGHT: f64 = 0.9;

/// Scattering coefficient and airlight of the scattering model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta: f64,
    #[serde(rename = "A")]
    pub atmospheric_light: f64,
}

impl FogParams {
    pub fn new(beta: f64, atmospheric_light: f64) -> Result<Self> {
        let p = FogParams {
            beta,
            atmospheric_light,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn clear() -> Self {
        FogParams {
            beta: 0.0,
            atmospheric_light: DEFAULT_ATMOSPHERIC_LIGHT,
        }
    }

    pub fn low() -> Self {
        FogParams {
            beta: 0.04,
            ..Self::clear()
        }
    }

    pub fn mid() -> Self {
        FogParams {
            beta: 0.06,
            ..Self::clear()
        }
    }

    pub fn high() -> Self {
        FogParams {
            beta: 0.08,
            ..Self::clear()
        }
    }

    /// Named preset: `clear`, `low`, `mid` or `high`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "clear" => Some(Self::clear()),
            "low" => Some(Self::low()),
            "mid" => Some(Self::mid()),
            "high" => Some(Self::high()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Param(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.atmospheric_light) {
            return Err(Error::Param(format!(
                "atmospheric light must lie in [0, 1], got {}",
                self.atmospheric_light
            )));
        }
        Ok(())
    }
}

/// Per-pixel transmission `exp(-beta * d)`.
pub fn transmission(depth: &DepthMap, beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::Param(format!("beta must be >= 0, got {beta}")));
    }
    Ok(depth.depth.iter().map(|&d| (-beta * d).exp()).collect())
}

/// Per-pixel fog density `1 - exp(-beta * d)`.
pub fn fog_density(depth: &DepthMap, beta: f64) -> Result<Vec<f64>> {
    Ok(transmission(depth, beta)?.into_iter().map(|t| 1.0 - t).collect())
}

/// Applies the atmospheric scattering model to every pixel and channel:
/// `I_t = I_s * t + A * (1 - t)`.
pub fn apply_fog(clear: &Image, depth: &DepthMap, params: FogParams) -> Result<Image> {
    if clear.dims() != depth.dims() {
        return Err(Error::shape("apply_fog", &clear.dims(), &depth.dims()));
    }
    params.validate()?;
    let t = transmission(depth, params.beta)?;
    let a = params.atmospheric_light;
    let pixels = clear
        .pixels
        .chunks_exact(CHANNELS)
        .zip(&t)
        .flat_map(|(px, &t)| px.iter().map(move |&v| (v * t + a * (1.0 - t)).clamp(0.0, 1.0)))
        .collect();
    Ok(Image {
        height: clear.height,
        width: clear.width,
        pixels,
    })
}
