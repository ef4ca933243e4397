use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn one() -> usize {
    1
}

impl Conv2dSpec {
    pub fn output_h(&self) -> usize {
        (self.input_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn output_w(&self) -> usize {
        (self.input_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Columns of the stored weight matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("input_h", self.input_h),
            ("input_w", self.input_w),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(config(format!("conv2d {name} must be positive")));
            }
        }
        if self.input_h + 2 * self.padding < self.kernel_h
            || self.input_w + 2 * self.padding < self.kernel_w
        {
            return Err(config(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.input_h + 2 * self.padding,
                self.input_w + 2 * self.padding
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d(Conv2dSpec),
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } => *activation,
            LayerSpec::Conv2d(c) => c.activation,
        }
    }

    /// Flattened input width per sample (CHW order for convolutions).
    pub fn in_features(&self) -> usize {
        match self {
            LayerSpec::Dense { in_dim, .. } => *in_dim,
            LayerSpec::Conv2d(c) => c.in_channels * c.input_h * c.input_w,
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            LayerSpec::Conv2d(c) => c.out_channels * c.output_h() * c.output_w(),
        }
    }

    /// Shape of the stored weight matrix (the layer's linear operator).
    pub fn weight_shape(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => (*out_dim, *in_dim),
            LayerSpec::Conv2d(c) => (c.out_channels, c.patch_len()),
        }
    }

    pub fn bias_len(&self) -> usize {
        self.weight_shape().0
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape().1
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(config("dense dimensions must be positive"));
                }
                Ok(())
            }
            LayerSpec::Conv2d(c) => c.validate(),
        }
    }
}

/// Checks each layer and that adjacent layers conform.
pub fn validate_stack(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(config("model needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| config(format!("layer {i}: {e}")))?;
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_features() != pair[1].in_features() {
            return Err(config(format!(
                "layers {i} and {} do not conform: {} outputs {} features, {} expects {}",
                i + 1,
                pair[0].kind_name(),
                pair[0].out_features(),
                pair[1].kind_name(),
                pair[1].in_features()
            )));
        }
    }
    Ok(())
}
