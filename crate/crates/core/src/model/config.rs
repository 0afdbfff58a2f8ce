use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions and ablation switches.
///
/// Serialized keys use the short symbols (`N`, `D`, `R`, ...) so that a
/// config file reads `model.D = 64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Landmark count.
    #[serde(rename = "N")]
    pub nodes: usize,
    /// Values per landmark.
    #[serde(rename = "F")]
    pub features: usize,
    /// Per-frame embedding dimension.
    #[serde(rename = "D")]
    pub embed_dim: usize,
    /// Width of the adjacency node embeddings.
    #[serde(rename = "c")]
    pub adj_dim: usize,
    /// Residual channels.
    #[serde(rename = "R")]
    pub channels: usize,
    /// Temporal filter taps.
    #[serde(rename = "k")]
    pub taps: usize,
    /// One dilation per stacked layer.
    pub dilations: Vec<usize>,
    /// Stacked layer count; must equal `dilations.len()`.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Graph block hidden width.
    #[serde(rename = "H")]
    pub hidden: usize,
    /// Output classes.
    #[serde(rename = "M")]
    pub classes: usize,
    /// Frames per sample.
    #[serde(rename = "S")]
    pub frames: usize,
    /// Multiplier applied to landmark x and y before fusion.
    pub coord_scale: f64,
    pub use_tcn: bool,
    pub use_gcn: bool,
    pub use_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 68,
            features: 3,
            embed_dim: 64,
            adj_dim: 10,
            channels: 32,
            taps: 2,
            dilations: vec![1, 2, 4, 8],
            layers: 4,
            hidden: 32,
            classes: 3,
            frames: 16,
            coord_scale: 0.01,
            use_tcn: true,
            use_gcn: true,
            use_embedding: true,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            nodes: 5,
            features: 3,
            embed_dim: 4,
            adj_dim: 2,
            channels: 3,
            taps: 2,
            dilations: vec![1, 2],
            layers: 2,
            hidden: 3,
            classes: 3,
            frames: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("N", self.nodes),
            ("F", self.features),
            ("D", self.embed_dim),
            ("c", self.adj_dim),
            ("R", self.channels),
            ("k", self.taps),
            ("L", self.layers),
            ("H", self.hidden),
            ("S", self.frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::shape(format!("model dimension {name} must be >= 1")));
        }
        if self.classes < 2 {
            return Err(Error::shape(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dilations.len() != self.layers {
            return Err(Error::shape(format!(
                "{} dilations given for {} layers",
                self.dilations.len(),
                self.layers
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::shape("dilations must be >= 1"));
        }
        if !self.coord_scale.is_finite() {
            return Err(Error::shape("coord_scale must be finite"));
        }
        Ok(())
    }

    /// Width of the fused feature matrix: `D`, or 1 when embeddings are off.
    pub fn fused_width(&self) -> usize {
        if self.use_embedding {
            self.embed_dim
        } else {
            1
        }
    }

    /// Exact parameter count for this configuration:
    ///
    /// ```text
    /// F + [gcn] 2Nc + R(De + 1)
    ///   + L ( [tcn] 2(R R k + R) | [no tcn] R R + R
    ///       + [gcn] 2 R H
    ///       + R R + R )
    ///   + M R + M
    /// ```
    ///
    /// with `De = D` when embeddings are used and 1 otherwise.
    pub fn parameter_count(&self) -> usize {
        let (n, f, c, r, k, h, m) = (
            self.nodes,
            self.features,
            self.adj_dim,
            self.channels,
            self.taps,
            self.hidden,
            self.classes,
        );
        let adjacency = if self.use_gcn { 2 * n * c } else { 0 };
        let temporal = if self.use_tcn {
            2 * (r * r * k + r)
        } else {
            r * r + r
        };
        let spatial = if self.use_gcn { r * h + h * r } else { 0 };
        let skip = r * r + r;
        f + adjacency
            + r * self.fused_width()
            + r
            + self.layers * (temporal + spatial + skip)
            + m * r
            + m
    }
}

pub fn count_parameters(config: &ModelConfig) -> usize {
    config.parameter_count()
}
