//! The learnable residual-orientation regressor.
//!
//! A small convolutional network maps a patch volume to a flat residual
//! orientation vector. Parameters live in one flat `f64` vector whose layout
//! is fully determined by [`RegressorConfig`]; gradients share that layout.

mod adam;
mod net;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use net::{backward, forward, loss, predict, volume_input, Regressor};
pub use train::{
    batch_gradient, train, train_with_progress, EpochRecord, TrainExample, TrainOutcome, TrainingConfig,
    DESK_BASE_LR, FULL_SCALE_BASE_LR, PLATEAU_THRESHOLD,
};

pub const PARAMS_VERSION: u32 = 1;

/// One convolution stage: `kernel x kernel`, given stride, zero padding
/// `kernel / 2`, followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// How the last feature map becomes the first FC layer's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Per-channel spatial mean.
    #[default]
    Global,
    /// The whole map, channel-major; keeps where features are.
    Flatten,
}

/// Architecture: conv stages, pooling, hidden FC layers with ReLU, then a
/// linear output layer of width `output_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub input_channels: usize,
    pub patch_res: usize,
    pub conv: Vec<ConvSpec>,
    #[serde(default)]
    pub pool: Pooling,
    pub fc_widths: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl RegressorConfig {
    /// conv(16, 3x3, /2) -> conv(32, 3x3, /2) -> GAP -> FC(64) -> FC(3 * limbs).
    pub fn default_for(limbs: usize, patch_res: usize, seed: u64) -> Self {
        Self {
            input_channels: 6 * limbs,
            patch_res,
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
            ],
            pool: Pooling::Global,
            fc_widths: vec![64],
            output_dim: 3 * limbs,
            seed,
        }
    }

    /// conv(16, 3x3, /2) -> conv(32, 3x3, /2) -> conv(32, 3x3, /2) ->
    /// flatten -> FC(64) -> FC(3 * limbs).
    ///
    /// Keeping the coarse feature map lets the regressor see where in each
    /// patch a limb's ends and its neighbours lie, which global pooling drops.
    pub fn spatial_for(limbs: usize, patch_res: usize, seed: u64) -> Self {
        let mut cfg = Self::default_for(limbs, patch_res, seed);
        cfg.conv.push(ConvSpec {
            out_channels: 32,
            kernel: 3,
            stride: 2,
        });
        cfg.pool = Pooling::Flatten;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.patch_res == 0 || self.output_dim == 0 {
            return Err(Error::Invalid("regressor widths must be >= 1".into()));
        }
        if !self.input_channels.is_multiple_of(6) || self.output_dim != self.input_channels / 2 {
            return Err(Error::Invalid(format!(
                "output_dim {} must equal 3 * limbs for {} input channels",
                self.output_dim, self.input_channels
            )));
        }
        for c in &self.conv {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::Invalid(format!("invalid conv stage {c:?}")));
            }
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::Invalid("fc widths must be >= 1".into()));
        }
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<Vec<LayerSlot>> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let (mut channels, mut res) = (self.input_channels, self.patch_res);
        for c in &self.conv {
            let pad = c.kernel / 2;
            if res + 2 * pad < c.kernel {
                return Err(Error::Invalid(format!(
                    "conv kernel {} too large for {res}x{res} input",
                    c.kernel
                )));
            }
            let out_res = (res + 2 * pad - c.kernel) / c.stride + 1;
            let shape = LayerShape::Conv {
                in_channels: channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad,
                in_res: res,
                out_res,
            };
            slots.push(LayerSlot::new(shape, &mut offset));
            channels = c.out_channels;
            res = out_res;
        }
        let mut width = match self.pool {
            Pooling::Global => channels,
            Pooling::Flatten => channels * res * res,
        };
        for &out in self.fc_widths.iter().chain(std::iter::once(&self.output_dim)) {
            slots.push(LayerSlot::new(LayerShape::Fc { inputs: width, outputs: out }, &mut offset));
            width = out;
        }
        Ok(slots)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.last().map_or(0, |s| s.bias_offset + s.shape.outputs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerShape {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_res: usize,
        out_res: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerShape {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerShape::Fc { inputs, .. } => inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerShape::Conv { out_channels, .. } => out_channels,
            LayerShape::Fc { outputs, .. } => outputs,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.fan_in() * self.outputs()
    }
}

/// Where a layer's weights (`[out][fan_in]`, row-major) and biases sit in the
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub shape: LayerShape,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    fn new(shape: LayerShape, offset: &mut usize) -> Self {
        let weight_offset = *offset;
        let bias_offset = weight_offset + shape.weight_count();
        *offset = bias_offset + shape.outputs();
        Self {
            shape,
            weight_offset,
            bias_offset,
        }
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight_offset..self.bias_offset]
    }

    pub fn biases<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.shape.outputs()]
    }
}

/// Flat parameter vector plus its per-layer shape table.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub version: u32,
    pub layout: Vec<LayerSlot>,
    pub values: Vec<f64>,
}

impl RegressorParams {
    pub fn from_values(cfg: &RegressorConfig, values: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_count()?;
        if values.len() != expected {
            return Err(Error::Shape {
                what: "parameter vector",
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            version: PARAMS_VERSION,
            layout: cfg.layout()?,
            values,
        })
    }

    /// Sets the final layer's weights and biases to zero, so the network
    /// outputs an exactly-zero residual for every input.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layout.last().copied() {
            let end = last.bias_offset + last.shape.outputs();
            self.values[last.weight_offset..end].fill(0.0);
        }
    }
}

/// Weights uniform in `+-1 / sqrt(fan_in)` (variance `1 / (3 fan_in)`),
/// biases zero; deterministic in `cfg.seed`.
pub fn init_params(cfg: &RegressorConfig) -> Result<RegressorParams> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let mut values = vec![0.0; cfg.param_count()?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for slot in &layout {
        let bound = 1.0 / (slot.shape.fan_in() as f64).sqrt();
        for w in &mut values[slot.weight_offset..slot.bias_offset] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(RegressorParams {
        version: PARAMS_VERSION,
        layout,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_counts() {
        let cfg = RegressorConfig::default_for(16, 32, 0);
        cfg.validate().unwrap();
        let layout = cfg.layout().unwrap();
        assert_eq!(layout.len(), 4);
        assert_eq!(layout[0].shape.weight_count(), 16 * 96 * 9);
        match layout[1].shape {
            LayerShape::Conv { in_res, out_res, .. } => assert_eq!((in_res, out_res), (16, 8)),
            _ => panic!("expected conv"),
        }
        assert_eq!(layout[3].shape.outputs(), 48);
        let n = 16 * 96 * 9 + 16 + 32 * 16 * 9 + 32 + 64 * 32 + 64 + 48 * 64 + 48;
        assert_eq!(cfg.param_count().unwrap(), n);
    }

    #[test]
    fn spatial_layout_counts() {
        let cfg = RegressorConfig::spatial_for(16, 32, 0);
        let layout = cfg.layout().unwrap();
        assert_eq!(layout.len(), 5);
        assert_eq!(layout[3].shape, LayerShape::Fc { inputs: 32 * 4 * 4, outputs: 64 });
        assert_eq!(layout[4].shape.outputs(), 48);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = RegressorConfig::default_for(16, 32, 42);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a.values, b.values);
        for slot in &a.layout {
            assert!(slot.biases(&a.values).iter().all(|&v| v == 0.0));
        }
        let c = init_params(&RegressorConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = RegressorConfig::default_for(16, 32, 7);
        let p = init_params(&cfg).unwrap();
        for slot in p.layout.iter().filter(|s| s.shape.weight_count() >= 10_000) {
            let w = slot.weights(&p.values);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let expected = 1.0 / (3.0 * slot.shape.fan_in() as f64);
            assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RegressorConfig::default_for(16, 32, 0);
        cfg.output_dim = 47;
        assert!(cfg.validate().is_err());
        let mut cfg = RegressorConfig::default_for(16, 32, 0);
        cfg.fc_widths = vec![0];
        assert!(init_params(&cfg).is_err());
        let cfg = RegressorConfig::default_for(16, 32, 0);
        assert!(RegressorParams::from_values(&cfg, vec![0.0; 3]).is_err());
    }
}
