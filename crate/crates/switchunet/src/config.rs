//! Switch configuration: five switches plus filter/level layout fully
//! determine a network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What produces a feature-map set: a stack of Conv-BN-ReLU units or an
/// unfolded recurrent unit. Exactly one of the two per set.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Cbr,
    Recurrent,
}

/// The five switches plus layout. A `SwitchConfig` is a complete recipe for
/// one encoder-decoder network.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SwitchConfig {
    /// SW_RS: 1x1 residual projection added around every level.
    pub residual: bool,
    /// SW_A: attention gates on the decoder skip connections.
    pub attention: bool,
    /// SW_FD: the second set of every level doubles its filters.
    pub filter_doubling: bool,
    /// Block kind of set A=1 (SW_C / SW_R for the first set).
    pub set1: BlockKind,
    /// Block kind of set A=2.
    pub set2: BlockKind,
    /// Recurrent unfolding depth t.
    #[serde(default = "default_steps")]
    pub recurrence_steps: usize,
    /// Per-level starting filter counts; the length sets the depth.
    pub base_filters: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_steps() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_input_channels() -> usize {
    1
}

/// The five named configurations.
pub const MODEL_NAMES: [&str; 5] = [
    "attention-unet",
    "r2u-net",
    "s-r2u-net",
    "s-r2f2u-net",
    "s-r2f2-attn-u-net",
];

/// Returns the switch settings of a named model.
pub fn named_config(name: &str) -> Result<SwitchConfig> {
    let large = vec![64, 128, 256, 512, 1024];
    let small = vec![32, 64, 128, 256, 512];
    let cfg = match name {
        "attention-unet" => SwitchConfig {
            residual: false,
            attention: true,
            filter_doubling: false,
            set1: BlockKind::Cbr,
            set2: BlockKind::Cbr,
            recurrence_steps: 2,
            base_filters: large,
            num_classes: 2,
            input_channels: 1,
        },
        "r2u-net" => SwitchConfig {
            residual: true,
            attention: false,
            filter_doubling: false,
            set1: BlockKind::Recurrent,
            set2: BlockKind::Recurrent,
            recurrence_steps: 2,
            base_filters: large,
            num_classes: 2,
            input_channels: 1,
        },
        "s-r2u-net" => SwitchConfig {
            residual: true,
            attention: false,
            filter_doubling: false,
            set1: BlockKind::Cbr,
            set2: BlockKind::Recurrent,
            recurrence_steps: 2,
            base_filters: large,
            num_classes: 2,
            input_channels: 1,
        },
        "s-r2f2u-net" => SwitchConfig {
            residual: true,
            attention: false,
            filter_doubling: true,
            set1: BlockKind::Cbr,
            set2: BlockKind::Recurrent,
            recurrence_steps: 2,
            base_filters: small,
            num_classes: 2,
            input_channels: 1,
        },
        "s-r2f2-attn-u-net" => SwitchConfig {
            residual: true,
            attention: true,
            filter_doubling: true,
            set1: BlockKind::Cbr,
            set2: BlockKind::Recurrent,
            recurrence_steps: 2,
            base_filters: small,
            num_classes: 2,
            input_channels: 1,
        },
        other => {
            return Err(Error::argument(format!(
                "unknown model `{other}`; expected one of {MODEL_NAMES:?}"
            )))
        }
    };
    Ok(cfg)
}

impl SwitchConfig {
    pub fn depth(&self) -> usize {
        self.base_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters.len() < 2 {
            return Err(Error::config("base_filters needs at least two levels"));
        }
        if self.base_filters[0] == 0 {
            return Err(Error::config("base filters must be positive"));
        }
        for pair in self.base_filters.windows(2) {
            if pair[1] != pair[0] * 2 {
                return Err(Error::config(format!(
                    "base_filters must double level to level, got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be >= 1"));
        }
        Ok(())
    }
}
