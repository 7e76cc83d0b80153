//! The quality-assessment network.
//!
//! Three parts share one tape per forward pass:
//!
//! * the spatial feature extractor ([`backbone_forward`]), a 3D residual
//!   network mapping a patch to a `C x D' x H' x W'` feature map;
//! * the content-adaptive hyper-network ([`hyper_generate`]), three branches
//!   that turn the feature map into the weights and biases of the predictor;
//! * the quality predictor ([`predictor_forward`]), three fully-connected
//!   layers applied to the pooled features with the generated parameters.
//!
//! [`fixed_predictor_forward`] is the same predictor with trained, shared
//! parameters, used as the ablation baseline.

mod config;
mod params;

use crate::error::{dim_err, Error, Result};
use crate::nn::{
    conv3d, fc_apply, fc_apply_per_sample, global_avg_pool, global_max_pool, maybe_norm,
    residual_block, BlockConfig, BlockParams, Conv3dSpec, LayerParams, NormMode,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use config::{
    BackboneConfig, HyperBranchConfig, ModelConfig, PredictorMode, StageConfig, StemConfig,
};
pub use params::{Bound, Model, ParamStore};

/// Backbone output: the final feature map and its global average pool.
#[derive(Clone, Copy)]
pub struct FeatureMap<'t, T> {
    pub map: Var<'t, T>,
    pub pooled: Var<'t, T>,
}

/// Per-sample predictor parameters produced by the hyper-network.
/// Layer `i` holds a weight of `N x d_{i+1} x d_i` and a bias of
/// `N x d_{i+1}`.
#[derive(Clone)]
pub struct GeneratedParams<'t, T> {
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<T: Scalar> GeneratedParams<'_, T> {
    pub fn batch_size(&self) -> usize {
        self.layers[0].0.dims()[0]
    }

    /// One row per sample: every layer's weight (row-major) then bias,
    /// layers in order.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let n = self.batch_size();
        let mut rows = vec![Vec::new(); n];
        for (w, b) in &self.layers {
            for t in [w.value(), b.value()] {
                let per = t.numel() / n;
                for (s, row) in rows.iter_mut().enumerate() {
                    row.extend(t.data()[s * per..(s + 1) * per].iter().map(|v| v.as_f64()));
                }
            }
        }
        rows
    }
}

pub(crate) fn stem_spec(config: &ModelConfig) -> Conv3dSpec {
    let s = &config.backbone.stem;
    Conv3dSpec::cubic(1, s.channels, s.kernel, s.stride, s.kernel / 2)
        .with_bias(config.norm_mode == NormMode::None)
}

/// Residual block shapes in forward order, paired with their parameter
/// name prefixes.
pub(crate) fn block_layout(config: &ModelConfig) -> Vec<(String, BlockConfig)> {
    let mut out = Vec::new();
    let mut channels = config.backbone.stem.channels;
    for (i, stage) in config.backbone.stages.iter().enumerate() {
        for j in 0..stage.num_blocks {
            out.push((
                format!("backbone.stage{i}.block{j}"),
                BlockConfig {
                    in_channels: channels,
                    out_channels: stage.channels,
                    stride: if j == 0 { stage.stride } else { 1 },
                    norm: config.norm_mode,
                },
            ));
            channels = stage.channels;
        }
    }
    out
}

pub(crate) fn hyper_specs(config: &ModelConfig, branch: usize) -> (Conv3dSpec, Conv3dSpec, [usize; 2]) {
    let c = config.feature_channels();
    let h = &config.hyper_branch;
    let mid = c / h.reduction;
    (
        Conv3dSpec::cubic(c, mid, 1, 1, 0).with_bias(true),
        Conv3dSpec::cubic(mid, h.hidden, 1, 1, 0).with_bias(true),
        [config.generated_layer_sizes()[branch], h.hidden],
    )
}

/// Spatial feature extractor: stem convolution, then residual stages.
pub fn backbone_forward<'t, T: Scalar>(
    patch: Var<'t, T>,
    config: &ModelConfig,
    params: &Bound<'t, T>,
) -> Result<FeatureMap<'t, T>> {
    let dims = patch.dims();
    let &[_, 1, d, h, w] = &dims[..] else {
        return Err(dim_err!("patch batch must be N x 1 x P x P x P, got {dims:?}"));
    };
    for e in [d, h, w] {
        config.feature_extent(e)?;
    }
    let norm = config.norm_mode;
    let x = conv3d(patch, &stem_spec(config), &params.layer("backbone.stem.conv")?)?;
    let mut x = maybe_norm(x, norm, params.norm("backbone.stem.norm", norm)?.as_ref())?.relu()?;
    for (prefix, block) in block_layout(config) {
        let bp = BlockParams {
            conv1: params.layer(&format!("{prefix}.conv1"))?,
            norm1: params.norm(&format!("{prefix}.norm1"), norm)?,
            conv2: params.layer(&format!("{prefix}.conv2"))?,
            norm2: params.norm(&format!("{prefix}.norm2"), norm)?,
            projection: if block.needs_projection() {
                Some((
                    params.layer(&format!("{prefix}.proj.conv"))?,
                    params.norm(&format!("{prefix}.proj.norm"), norm)?,
                ))
            } else {
                None
            },
        };
        x = residual_block(x, &bp, &block)?;
    }
    let pooled = global_avg_pool(x)?;
    Ok(FeatureMap { map: x, pooled })
}

/// Content-adaptive hyper-network: one branch per predictor layer, each
/// `conv1x1 -> relu -> conv1x1 -> global max pool -> fc`, with the fc
/// output reshaped into that layer's weight and bias.
pub fn hyper_generate<'t, T: Scalar>(
    feature: &FeatureMap<'t, T>,
    params: &Bound<'t, T>,
    config: &ModelConfig,
) -> Result<GeneratedParams<'t, T>> {
    let c = config.feature_channels();
    let dims = feature.map.dims();
    if dims.len() != 5 || dims[1] != c {
        return Err(dim_err!(
            "hyper-network expects N x {c} x D x H x W features, got {dims:?}"
        ));
    }
    if config.hyper_branch.reduction == 0 || c % config.hyper_branch.reduction != 0 {
        return Err(Error::Config(format!(
            "hyper-network reduction {} does not divide {c} channels",
            config.hyper_branch.reduction
        )));
    }
    let n = dims[0];
    let d = &config.predictor_dims;
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        let (s1, s2, _) = hyper_specs(config, i);
        let prefix = format!("hyper.branch{i}");
        let h = conv3d(feature.map, &s1, &params.layer(&format!("{prefix}.conv1"))?)?.relu()?;
        let h = conv3d(h, &s2, &params.layer(&format!("{prefix}.conv2"))?)?;
        let h = global_max_pool(h)?;
        let flat = fc_apply(h, &params.layer(&format!("{prefix}.fc"))?)?;
        let (fan_in, fan_out) = (d[i], d[i + 1]);
        let weight = flat
            .narrow(1, 0, fan_out * fan_in)?
            .reshape(&[n, fan_out, fan_in])?;
        let bias = flat.narrow(1, fan_out * fan_in, fan_out)?;
        layers.push((weight, bias));
    }
    Ok(GeneratedParams { layers })
}

/// Three-layer predictor where every sample uses its own parameters:
/// `relu(fc0) -> relu(fc1) -> fc2`. Returns one score per sample.
pub fn predictor_forward<'t, T: Scalar>(
    pooled: Var<'t, T>,
    generated: &GeneratedParams<'t, T>,
) -> Result<Var<'t, T>> {
    let n = pooled.dims()[0];
    if generated.layers.len() != 3 {
        return Err(Error::Contract(format!(
            "predictor needs 3 generated layers, got {}",
            generated.layers.len()
        )));
    }
    if generated.batch_size() != n {
        return Err(Error::Contract(format!(
            "{n} feature vectors but {} generated parameter sets",
            generated.batch_size()
        )));
    }
    let mut x = pooled;
    for (i, (w, b)) in generated.layers.iter().enumerate() {
        x = fc_apply_per_sample(x, *w, *b)?;
        if i < 2 {
            x = x.relu()?;
        }
    }
    x.reshape(&[n])
}

/// The same three-layer chain with one parameter set shared by all samples.
pub fn fixed_predictor_forward<'t, T: Scalar>(
    pooled: Var<'t, T>,
    layers: &[LayerParams<'t, T>],
) -> Result<Var<'t, T>> {
    if layers.len() != 3 {
        return Err(Error::Contract(format!(
            "predictor needs 3 layers, got {}",
            layers.len()
        )));
    }
    let n = pooled.dims()[0];
    let mut x = pooled;
    for (i, p) in layers.iter().enumerate() {
        x = fc_apply(x, p)?;
        if i < 2 {
            x = x.relu()?;
        }
    }
    x.reshape(&[n])
}

/// Outputs of one full forward pass.
pub struct Forward<'t, T> {
    pub feature: FeatureMap<'t, T>,
    pub generated: Option<GeneratedParams<'t, T>>,
    /// One score per sample, dims `[N]`.
    pub scores: Var<'t, T>,
}

/// Backbone once, then either the hyper-network plus adaptive predictor or
/// the fixed predictor, depending on `mode`.
pub fn hysnet_forward<'t, T: Scalar>(
    patches: Var<'t, T>,
    params: &Bound<'t, T>,
    config: &ModelConfig,
    mode: PredictorMode,
) -> Result<Forward<'t, T>> {
    let feature = backbone_forward(patches, config, params)?;
    match mode {
        PredictorMode::Hyper => {
            let generated = hyper_generate(&feature, params, config)?;
            let scores = predictor_forward(feature.pooled, &generated)?;
            Ok(Forward {
                feature,
                generated: Some(generated),
                scores,
            })
        }
        PredictorMode::Fixed => {
            let layers = (0..3)
                .map(|i| params.layer(&format!("predictor.fc{i}")))
                .collect::<Result<Vec<_>>>()?;
            let scores = fixed_predictor_forward(feature.pooled, &layers)?;
            Ok(Forward {
                feature,
                generated: None,
                scores,
            })
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Scores for a batch of patches (`N x 1 x P x P x P`), no gradients.
    pub fn predict(&self, patches: &Tensor<T>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind_constants(&tape)?;
        let x = tape.constant(patches.clone())?;
        let out = hysnet_forward(x, &bound, &self.config, self.mode)?;
        Ok(out.scores.value().to_f64_vec())
    }

    /// Flattened generated predictor parameters, one row per patch.
    pub fn generate(&self, patches: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        if self.mode != PredictorMode::Hyper {
            return Err(Error::Config(
                "fixed-mode models have no generated parameters".into(),
            ));
        }
        let tape = Tape::new();
        let bound = self.bind_constants(&tape)?;
        let x = tape.constant(patches.clone())?;
        let feature = backbone_forward(x, &self.config, &bound)?;
        Ok(hyper_generate(&feature, &bound, &self.config)?.flatten())
    }
}

#[cfg(test)]
mod tests;
