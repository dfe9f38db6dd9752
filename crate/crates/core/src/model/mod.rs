//! The restoration network: a three-level U-Net of transformer blocks, each
//! block pairing dimension-reduced channel attention with a patch-wise
//! feed-forward network.

mod checkpoint;
mod layers;
mod network;
mod selfcheck;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, read_manifest, save_checkpoint, ManifestEntry};
pub use layers::{
    block_forward, drsa_forward, p2ffn_forward, BlockParams, DrsaParams, FfnParams,
};
pub use network::{build_model, build_model_with_dtype, model_forward, Model};
pub use selfcheck::{gradcheck_config, gradient_check, GradCheckReport, GradSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder levels; the bottleneck sits below the last one.
pub const LEVELS: usize = 3;

const VALID_RATIOS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarformerConfig {
    /// Feature width of the first level.
    pub base_channels: usize,
    /// P2FFN hidden width multiplier.
    pub expansion: f64,
    /// Depth-wise kernel size inside the P2FFN.
    pub ffn_kernel: usize,
    /// Query/key spatial reduction ratio inside the attention.
    pub spatial_ratio: usize,
    /// Key/value channel reduction ratio inside the attention.
    pub channel_ratio: usize,
    /// Transformer blocks per encoder/decoder level, then the bottleneck.
    pub blocks: [usize; 4],
    /// Attention heads per level, then the bottleneck.
    pub heads: [usize; 4],
    /// Keep every level at `base_channels` instead of doubling per level.
    pub fixed_width: bool,
}

impl Default for MarformerConfig {
    fn default() -> Self {
        preset("L").expect("L is a known preset")
    }
}

/// Width, depth and resolution of one level (index 3 is the bottleneck).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelPlan {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub divisor: usize,
}

/// `L`, `B` or `T` (case-insensitive).
pub fn preset(name: &str) -> Result<MarformerConfig> {
    let (blocks, heads, fixed_width) = match name.to_ascii_uppercase().as_str() {
        "L" => ([1, 2, 4, 8], [1, 2, 4, 8], false),
        "B" => ([1, 2, 3, 4], [1, 2, 4, 8], false),
        "T" => ([1, 2, 3, 4], [1, 1, 1, 1], true),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(MarformerConfig {
        base_channels: 48,
        expansion: 2.0,
        ffn_kernel: 7,
        spatial_ratio: 2,
        channel_ratio: 2,
        blocks,
        heads,
        fixed_width,
    })
}

/// Small configuration for tests and desk-scale experiments: one block and
/// one head per level, a 3×3 feed-forward kernel, width doubling from
/// `base_channels`.
pub fn reduced(base_channels: usize) -> MarformerConfig {
    MarformerConfig {
        base_channels,
        expansion: 2.0,
        ffn_kernel: 3,
        spatial_ratio: 2,
        channel_ratio: 2,
        blocks: [1, 1, 1, 1],
        heads: [1, 1, 1, 1],
        fixed_width: false,
    }
}

impl MarformerConfig {
    pub fn level_plan(&self) -> [LevelPlan; 4] {
        std::array::from_fn(|k| LevelPlan {
            channels: self.level_channels(k),
            blocks: self.blocks[k],
            heads: self.heads[k],
            divisor: 1 << k,
        })
    }

    /// Channel width at level `k` (0-based; 3 is the bottleneck).
    pub fn level_channels(&self, k: usize) -> usize {
        if self.fixed_width {
            self.base_channels
        } else {
            self.base_channels << k
        }
    }

    /// P2FFN hidden width for a level of width `c`.
    pub fn hidden_channels(&self, c: usize) -> usize {
        (self.expansion * c as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.ffn_kernel % 2 == 0 {
            return bad(format!("ffn_kernel must be odd, got {}", self.ffn_kernel));
        }
        for (name, r) in [("spatial_ratio", self.spatial_ratio), ("channel_ratio", self.channel_ratio)] {
            if !VALID_RATIOS.contains(&r) {
                return bad(format!("{name} must be one of {VALID_RATIOS:?}, got {r}"));
            }
        }
        if !(self.expansion > 0.0) {
            return bad(format!("expansion must be positive, got {}", self.expansion));
        }
        for lvl in self.level_plan() {
            let c = lvl.channels;
            let hidden = self.expansion * c as f64;
            if (hidden - hidden.round()).abs() > 1e-9 || hidden.round() < 1.0 {
                return bad(format!("expansion {} gives a fractional hidden width at {c} channels", self.expansion));
            }
            if lvl.heads == 0 || c % lvl.heads != 0 {
                return bad(format!("{c} channels not divisible by {} heads", lvl.heads));
            }
            if c % (self.channel_ratio * lvl.heads) != 0 {
                return bad(format!(
                    "{c} channels not divisible by channel_ratio × heads = {}",
                    self.channel_ratio * lvl.heads
                ));
            }
        }
        Ok(())
    }

    /// Rejects input extents the network cannot process without padding.
    pub fn check_input_extent(&self, h: usize, w: usize) -> Result<()> {
        let unit = 8 * self.spatial_ratio;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by 8")));
        }
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {unit} for spatial ratio {}",
                self.spatial_ratio
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MarformerConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("TOML: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
