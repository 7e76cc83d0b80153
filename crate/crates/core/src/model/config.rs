use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NormMode;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
}

/// Widths inside each hyper-network branch: the first 1x1x1 convolution
/// maps `C -> C / reduction`, the second maps to `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperBranchConfig {
    pub reduction: usize,
    pub hidden: usize,
}

/// Whether predictor parameters are generated per input or trained once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorMode {
    Hyper,
    Fixed,
}

impl PredictorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorMode::Hyper => "hyper",
            PredictorMode::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for PredictorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyper" => Ok(PredictorMode::Hyper),
            "fixed" => Ok(PredictorMode::Fixed),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Architecture hyper-parameters of the whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub norm_mode: NormMode,
    /// `[d0, d1, d2, d3]`: predictor layer widths, `d0` = backbone channels
    /// and `d3 = 1`.
    pub predictor_dims: Vec<usize>,
    pub hyper_branch: HyperBranchConfig,
    pub dtype: DType,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized network: stages of 8/16/32 channels, one block each.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                stem: StemConfig {
                    channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                stages: vec![
                    StageConfig { channels: 8, num_blocks: 1, stride: 1 },
                    StageConfig { channels: 16, num_blocks: 1, stride: 2 },
                    StageConfig { channels: 32, num_blocks: 1, stride: 2 },
                ],
            },
            norm_mode: NormMode::Group,
            predictor_dims: vec![32, 8, 4, 1],
            hyper_branch: HyperBranchConfig {
                reduction: 2,
                hidden: 16,
            },
            dtype: DType::F32,
            init_seed: 0,
        }
    }

    /// Wider basic-block backbone (two blocks per stage) with the larger
    /// predictor head.
    pub fn full() -> Self {
        let stages = [(64, 1), (128, 2), (256, 2), (512, 2)]
            .into_iter()
            .map(|(channels, stride)| StageConfig { channels, num_blocks: 2, stride })
            .collect();
        ModelConfig {
            backbone: BackboneConfig {
                stem: StemConfig {
                    channels: 64,
                    kernel: 7,
                    stride: 2,
                },
                stages,
            },
            predictor_dims: vec![512, 32, 16, 1],
            hyper_branch: HyperBranchConfig {
                reduction: 2,
                hidden: 64,
            },
            ..Self::desk()
        }
    }

    /// Channel count of the final feature map.
    pub fn feature_channels(&self) -> usize {
        self.backbone
            .stages
            .last()
            .map_or(self.backbone.stem.channels, |s| s.channels)
    }

    /// Flat parameter count `d_{i+1} * (d_i + 1)` of each predictor layer.
    pub fn generated_layer_sizes(&self) -> Vec<usize> {
        self.predictor_dims
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .collect()
    }

    pub fn generated_total(&self) -> usize {
        self.generated_layer_sizes().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let b = &self.backbone;
        if b.stem.channels == 0 || b.stem.kernel == 0 || b.stem.stride == 0 {
            return bad(format!("stem extents must be positive: {:?}", b.stem));
        }
        for (i, s) in b.stages.iter().enumerate() {
            if s.channels == 0 || s.num_blocks == 0 || s.stride == 0 {
                return bad(format!("stage {i} extents must be positive: {s:?}"));
            }
        }
        if self.predictor_dims.len() != 4 {
            return bad(format!(
                "predictor needs exactly 3 layers (4 dims), got {:?}",
                self.predictor_dims
            ));
        }
        if self.predictor_dims.contains(&0) {
            return bad(format!("predictor dims must be positive: {:?}", self.predictor_dims));
        }
        if self.predictor_dims[3] != 1 {
            return bad(format!(
                "last predictor dim must be 1 (scalar score), got {}",
                self.predictor_dims[3]
            ));
        }
        let c = self.feature_channels();
        if self.predictor_dims[0] != c {
            return bad(format!(
                "predictor input width {} must equal backbone channels {c}",
                self.predictor_dims[0]
            ));
        }
        let h = &self.hyper_branch;
        if h.reduction == 0 || c % h.reduction != 0 {
            return bad(format!(
                "hyper-network reduction {} must divide feature channels {c}",
                h.reduction
            ));
        }
        if h.hidden == 0 {
            return bad("hyper-network hidden width must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents of the final feature map for a cubic patch of side
    /// `patch`. Every strided layer must divide its incoming extent.
    pub fn feature_extent(&self, patch: usize) -> Result<usize> {
        let stem = &self.backbone.stem;
        let stride_step = |extent: usize, stride: usize, what: String| -> Result<usize> {
            if extent == 0 || (stride > 1 && extent % stride != 0) {
                return Err(Error::Config(format!(
                    "patch extent {patch} is incompatible with the backbone: {what} \
                     receives extent {extent}, not divisible by stride {stride}"
                )));
            }
            Ok(extent.div_ceil(stride))
        };
        if stem.kernel > patch + 2 * (stem.kernel / 2) {
            return Err(Error::Config(format!(
                "patch extent {patch} is smaller than the stem kernel {}",
                stem.kernel
            )));
        }
        let mut extent = stride_step(patch, stem.stride, "stem".into())?;
        for (i, s) in self.backbone.stages.iter().enumerate() {
            extent = stride_step(extent, s.stride, format!("stage {i}"))?;
        }
        Ok(extent)
    }
}
