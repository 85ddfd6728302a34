use serde::{Deserialize, Serialize};

use crate::dsp::N_MELS;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorFieldModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    #[serde(default = "default_bins")]
    pub d_feat: usize,
    #[serde(default = "default_bins")]
    pub d_cond: usize,
    pub use_skip_connections: bool,
    /// Zero disables the convolutional positional embedding.
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
    #[serde(default = "default_true")]
    pub alibi: bool,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub symbol_vocab_size: Option<usize>,
}

fn default_bins() -> usize {
    N_MELS
}

fn default_true() -> bool {
    true
}

impl Default for VectorFieldModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VectorFieldModelConfig {
    /// Full-size reference architecture (about 330M parameters).
    pub fn large() -> Self {
        VectorFieldModelConfig {
            n_layers: 24,
            n_heads: 16,
            d_model: 1024,
            d_ffn: 4096,
            ..Self::desk()
        }
    }

    /// Single-machine default.
    pub fn desk() -> Self {
        VectorFieldModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 256,
            d_ffn: 1024,
            d_feat: N_MELS,
            d_cond: N_MELS,
            use_skip_connections: true,
            conv_pos_kernel: 31,
            conv_pos_groups: 16,
            alibi: true,
            lora_rank: None,
            symbol_vocab_size: None,
        }
    }

    /// Small enough for unit tests and quick experiments.
    pub fn tiny() -> Self {
        VectorFieldModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ffn: 64,
            conv_pos_kernel: 7,
            conv_pos_groups: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.n_layers == 0 || c.n_heads == 0 || c.d_model == 0 || c.d_ffn == 0 {
            return Err(Error::config("layer, head, width and FFN sizes must be non-zero"));
        }
        if c.d_feat == 0 || c.d_cond == 0 {
            return Err(Error::config("feature and condition widths must be non-zero"));
        }
        if c.d_model % c.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                c.d_model, c.n_heads
            )));
        }
        if c.use_skip_connections && c.n_layers % 2 != 0 {
            return Err(Error::config("skip connections need an even number of layers"));
        }
        if c.conv_pos_kernel > 0 {
            if c.conv_pos_kernel % 2 == 0 {
                return Err(Error::config("positional convolution kernel must be odd"));
            }
            if c.conv_pos_groups == 0 || c.d_model % c.conv_pos_groups != 0 {
                return Err(Error::config(format!(
                    "d_model {} is not divisible by conv groups {}",
                    c.d_model, c.conv_pos_groups
                )));
            }
        }
        if let Some(r) = c.lora_rank {
            if r == 0 || r > c.d_model {
                return Err(Error::config(format!("LoRA rank {r} outside [1, {}]", c.d_model)));
            }
        }
        if c.symbol_vocab_size == Some(0) {
            return Err(Error::config("symbol vocabulary must be non-empty"));
        }
        Ok(())
    }
}

/// Number of adaptor weights added by rank-`rank` LoRA on q, k and v.
pub fn lora_parameter_count(config: &VectorFieldModelConfig, rank: usize) -> usize {
    config.n_layers * 3 * 2 * rank * config.d_model
}

/// Closed-form parameter count, including adaptors and symbol tables.
pub fn count_parameters(config: &VectorFieldModelConfig) -> usize {
    checked_count_parameters(config).expect("parameter count overflows usize")
}

/// [`count_parameters`], or `None` when the count overflows.
pub fn checked_count_parameters(config: &VectorFieldModelConfig) -> Option<usize> {
    let c = config;
    let d = c.d_model;
    let linear = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
    let mut n = linear(c.d_feat.checked_add(c.d_cond)?, d)?.checked_add(1)?;
    let mut add = |k: usize, x: Option<usize>| -> Option<()> {
        n = n.checked_add(k.checked_mul(x?)?)?;
        Some(())
    };
    if c.conv_pos_kernel > 0 {
        let fan = (d / c.conv_pos_groups.max(1)).checked_mul(c.conv_pos_kernel)?;
        add(1, linear(fan, d))?;
    }
    let layer = [
        d.checked_mul(4),
        linear(d, d)?.checked_mul(4),
        linear(d, c.d_ffn),
        linear(c.d_ffn, d),
    ]
    .into_iter()
    .try_fold(0usize, |acc, x| acc.checked_add(x?));
    add(c.n_layers, layer)?;
    if c.use_skip_connections {
        add(c.n_layers - c.n_layers / 2, linear(d.checked_mul(2)?, d))?;
    }
    add(2, Some(d))?;
    add(1, linear(d, c.d_feat))?;
    if let Some(r) = c.lora_rank {
        add(c.n_layers, r.checked_mul(d)?.checked_mul(6))?;
    }
    if let Some(v) = c.symbol_vocab_size {
        add(1, v.checked_mul(d)?.checked_add(1))?;
    }
    Some(n)
}
