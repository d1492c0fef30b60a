//! Recurrent sparse decoder at toy scale.
//!
//! Instances are triples of anchor state, instance feature and anchor
//! embedding. Between frames only the anchor is projected (rigid ego motion
//! plus dead reckoning); the feature is carried bytewise and the embedding is
//! re-encoded from the projected anchor. Per frame: a bank of propagated
//! temporal instances joins the best of a fresh single-frame pass, and the
//! merged set runs through the multi-frame layers, so per-frame aggregation
//! work is constant in sequence length.

pub mod decoder;
pub mod depth;
pub mod encoders;
pub mod layers;
pub mod params;

pub use decoder::{
    select_and_merge, FrameCache, FrameOutput, FrameStats, InstanceBank, Model, PerLayerGrads,
    PerLayerRecord, SelectionInfo,
};
pub use depth::DepthLossResult;
pub use layers::{LayerKind, ANCHOR_COMPONENTS};
pub use params::{Grads, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anchors, features, embeddings and confidences of one instance set; the
/// four sequences always have equal length.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub anchors: Vec<crate::geometry::Anchor3D>,
    pub features: Tensor,   // M x D
    pub embeddings: Tensor, // M x D
    pub confidences: Vec<f64>,
}

impl InstanceSet {
    pub fn new(
        anchors: Vec<crate::geometry::Anchor3D>,
        features: Tensor,
        embeddings: Tensor,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        let m = anchors.len();
        if features.rank() != 2
            || embeddings.rank() != 2
            || features.shape()[0] != m
            || embeddings.shape()[0] != m
            || features.shape()[1] != embeddings.shape()[1]
            || confidences.len() != m
        {
            return Err(Error::InvalidArgument(format!(
                "inconsistent instance set: {m} anchors, features {:?}, embeddings {:?}, {} confidences",
                features.shape(),
                embeddings.shape(),
                confidences.len()
            )));
        }
        Ok(InstanceSet { anchors, features, embeddings, confidences })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> InstanceSet {
        let d = self.feature_dim();
        let mut anchors = Vec::with_capacity(indices.len());
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut embeddings = Vec::with_capacity(indices.len() * d);
        let mut confidences = Vec::with_capacity(indices.len());
        for &i in indices {
            anchors.push(self.anchors[i]);
            features.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            embeddings.extend_from_slice(&self.embeddings.data()[i * d..(i + 1) * d]);
            confidences.push(self.confidences[i]);
        }
        InstanceSet {
            anchors,
            features: Tensor::new(vec![indices.len(), d], features).unwrap(),
            embeddings: Tensor::new(vec![indices.len(), d], embeddings).unwrap(),
            confidences,
        }
    }
}

/// Indices of the top `k` confidences, ties broken toward the lower index.
pub fn top_k_by_confidence(confidences: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidences.len()).collect();
    idx.sort_by(|&a, &b| {
        confidences[b]
            .partial_cmp(&confidences[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Decoder topology and instance budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub num_single_frame_layers: usize,
    pub num_multi_frame_layers: usize,
    pub total_instances: usize,
    pub temporal_instances: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub k_learnable: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_single_frame_layers: 1,
            num_multi_frame_layers: 5,
            total_instances: 900,
            temporal_instances: 600,
            feature_dim: 256,
            heads: 8,
            k_learnable: 6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_instances >= self.total_instances {
            return Err(Error::InvalidConfig(format!(
                "temporal_instances ({}) must be < total_instances ({})",
                self.temporal_instances, self.total_instances
            )));
        }
        if self.num_single_frame_layers == 0 {
            return Err(Error::InvalidConfig("need >= 1 single-frame layer".to_string()));
        }
        if self.feature_dim == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} must be a positive multiple of heads {}",
                self.feature_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn keypoints(&self) -> usize {
        7 + self.k_learnable
    }
}

/// Rectangular ground-plane region fresh anchors are drawn from.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SceneBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds { x_min: -24.0, x_max: 24.0, y_min: -24.0, y_max: 24.0 }
    }
}

/// Full model configuration: decoder plus feature/pyramid dimensions and the
/// depth head.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub channels: usize,
    pub scales: usize,
    pub groups: usize,
    pub ffn_hidden: usize,
    pub equivalent_focal: f64,
    pub scene_bounds: SceneBounds,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            channels: 256,
            scales: 4,
            groups: 8,
            ffn_hidden: 512,
            equivalent_focal: 100.0,
            scene_bounds: SceneBounds::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults: every ratio of the full-size configuration at a
    /// tenth of the size (90 = 60 temporal + 30 fresh).
    pub fn desk_scale(seed: u64) -> Self {
        ModelConfig {
            decoder: DecoderConfig {
                num_single_frame_layers: 1,
                num_multi_frame_layers: 5,
                total_instances: 90,
                temporal_instances: 60,
                feature_dim: 64,
                heads: 4,
                k_learnable: 6,
            },
            channels: 32,
            scales: 2,
            groups: 4,
            ffn_hidden: 128,
            equivalent_focal: 50.0,
            scene_bounds: SceneBounds::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.channels == 0 || self.channels % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            )));
        }
        if self.scales == 0 {
            return Err(Error::InvalidConfig("need >= 1 scale".to_string()));
        }
        if !(self.equivalent_focal > 0.0) {
            return Err(Error::InvalidConfig("equivalent_focal must be positive".to_string()));
        }
        Ok(())
    }
}
