use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::Combine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Conv feature block → two BiLSTMs → attention → dense head.
    CnnBilstmAm,
    /// As above with mean pooling over time in place of attention.
    CnnBilstm,
    /// Conv feature block → dense head.
    #[serde(rename = "cnn")]
    CnnOnly,
    /// Two stacked unidirectional LSTMs → dense head.
    #[serde(rename = "lstm")]
    LstmOnly,
    /// Two sigmoid hidden layers.
    Mlp,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::CnnBilstmAm,
        Architecture::CnnBilstm,
        Architecture::CnnOnly,
        Architecture::LstmOnly,
        Architecture::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::CnnBilstmAm => "cnn-bilstm-am",
            Architecture::CnnBilstm => "cnn-bilstm",
            Architecture::CnnOnly => "cnn",
            Architecture::LstmOnly => "lstm",
            Architecture::Mlp => "mlp",
        }
    }

    pub fn has_conv(self) -> bool {
        matches!(self, Architecture::CnnBilstmAm | Architecture::CnnBilstm | Architecture::CnnOnly)
    }

    pub fn has_attention(self) -> bool {
        self == Architecture::CnnBilstmAm
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer widths shared by all architectures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTable {
    pub conv: Vec<ConvSpec>,
    pub pool_size: usize,
    /// Per-direction hidden sizes of the recurrent stack.
    pub recurrent: Vec<usize>,
    /// Dense head widths; the last must be 1.
    pub dense: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
}

impl Default for LayerTable {
    /// Conv(16,5,1) → Pool(2) → Conv(32,3,1) → Pool(2) → Conv(64,3,1) →
    /// Pool(2) → Conv(128,3,1) → Pool(2) → BiLSTM(128) → BiLSTM(64) →
    /// FC(32) → FC(10) → FC(1); MLP hidden layers 15, 15.
    fn default() -> Self {
        let conv = |filters, kernel| ConvSpec {
            filters,
            kernel,
            stride: 1,
        };
        LayerTable {
            conv: vec![conv(16, 5), conv(32, 3), conv(64, 3), conv(128, 3)],
            pool_size: 2,
            recurrent: vec![128, 64],
            dense: vec![32, 10, 1],
            mlp_hidden: vec![15, 15],
        }
    }
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Input window length in months.
    pub window: usize,
    pub dropout: f64,
    /// Stride of every max-pooling layer (1 keeps the sequence length).
    pub pool_stride: usize,
    pub combine: Combine,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub layers: LayerTable,
}

impl ModelSpec {
    pub const DEFAULT_WINDOW: usize = 12;
    pub const DEFAULT_DROPOUT: f64 = 0.2;

    pub fn new(architecture: Architecture) -> Self {
        ModelSpec {
            architecture,
            window: Self::DEFAULT_WINDOW,
            dropout: Self::DEFAULT_DROPOUT,
            pool_stride: 1,
            combine: Combine::Sum,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            layers: LayerTable::default(),
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    /// Sequence length after each conv/pool stage, starting from the window.
    pub fn feature_lengths(&self) -> Vec<usize> {
        let mut len = self.window;
        let mut out = vec![len];
        for c in &self.layers.conv {
            len = len.div_ceil(c.stride);
            len = len.div_ceil(self.pool_stride);
            out.push(len);
        }
        out
    }

    /// Smallest window for which every pooling layer sees at least
    /// `pool_size` real (unpadded) values.
    pub fn min_window(&self) -> usize {
        if !self.architecture.has_conv() {
            return 1;
        }
        (1usize..=4096)
            .find(|&w| {
                let mut len = w;
                for c in &self.layers.conv {
                    len = len.div_ceil(c.stride);
                    if len < self.layers.pool_size {
                        return false;
                    }
                    len = len.div_ceil(self.pool_stride);
                }
                true
            })
            .unwrap_or(usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 {
            return bad("window must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("batch norm eps must be > 0 and momentum in (0, 1)".into());
        }
        let t = &self.layers;
        if self.architecture.has_conv() {
            if t.conv.is_empty() || t.conv.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0) {
                return bad("conv layers need positive filters, kernel and stride".into());
            }
            if t.pool_size == 0 || self.pool_stride == 0 {
                return bad("pool size and stride must be ≥ 1".into());
            }
            let min = self.min_window();
            if self.window < min {
                return bad(format!(
                    "window {} is too short for the conv/pool stack (pool stride {}); minimum window is {min}",
                    self.window, self.pool_stride
                ));
            }
        }
        if matches!(
            self.architecture,
            Architecture::CnnBilstmAm | Architecture::CnnBilstm | Architecture::LstmOnly
        ) && (t.recurrent.is_empty() || t.recurrent.contains(&0))
        {
            return bad("recurrent stack needs positive hidden sizes".into());
        }
        if self.architecture == Architecture::Mlp {
            if t.mlp_hidden.contains(&0) {
                return bad("mlp hidden widths must be positive".into());
            }
        } else if t.dense.last() != Some(&1) || t.dense.contains(&0) {
            return bad(format!("dense head {:?} must be positive and end in width 1", t.dense));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_names_match_cli_names() {
        for a in Architecture::ALL {
            assert_eq!(serde_json::to_value(a).unwrap(), a.as_str());
            assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
        }
    }
}
