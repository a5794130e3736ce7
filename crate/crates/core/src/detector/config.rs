use serde::{Deserialize, Serialize};

use crate::attention::{ScaleAxis, WeatherActivation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    /// Perceptual-loss distillation; architecture identical to baseline.
    Pl,
    /// Weather-adaptive (fog-scaled) attention.
    Waa,
    /// Weather fusion encoder.
    Wfe,
}

impl Variant {
    pub fn needs_fog_stream(self) -> bool {
        matches!(self, Variant::Waa | Variant::Wfe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Pl => "pl",
            Variant::Waa => "waa",
            Variant::Wfe => "wfe",
        }
    }
}

/// What the auxiliary backbone sees for WAA/WFE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxInput {
    /// `1 - exp(-beta * d)` replicated over the three channels.
    #[default]
    DensityMap,
    FoggyImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the no-object class in the classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub image_size: usize,
    /// Output channels of the three stride-2 backbone stages.
    pub channels: [usize; 3],
    pub token_dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub encoder_layers: usize,
    pub num_classes: usize,
    pub box_hidden: usize,
    pub weather_activation: WeatherActivation,
    pub weather_axis: ScaleAxis,
    pub aux_input: AuxInput,
    pub loss: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            variant: Variant::Baseline,
            image_size: 32,
            channels: [8, 16, 32],
            token_dim: 32,
            heads: 2,
            queries: 10,
            encoder_layers: 1,
            num_classes: 5,
            box_hidden: 32,
            weather_activation: WeatherActivation::Sigmoid,
            weather_axis: ScaleAxis::Key,
            aux_input: AuxInput::DensityMap,
            loss: LossWeights::default(),
        }
    }
}

impl DetectorConfig {
    pub fn key_dim(&self) -> usize {
        self.token_dim / self.heads.max(1)
    }

    /// Tokens produced from the last backbone stage.
    pub fn token_count(&self) -> usize {
        let side = self.image_size / 8;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} must be divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if self.token_dim % 2 != 0 {
            return Err(Error::Config("token dim must be even for positional encoding".into()));
        }
        if self.queries == 0 || self.encoder_layers == 0 || self.num_classes == 0 {
            return Err(Error::Config("queries, encoder layers and classes must be >= 1".into()));
        }
        if self.channels.contains(&0) || self.box_hidden == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        let w = self.loss;
        if [w.class, w.l1, w.giou, w.no_object].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}
