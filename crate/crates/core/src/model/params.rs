use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{block_layout, hyper_specs, stem_spec, ModelConfig, PredictorMode};
use crate::error::{Error, Result};
use crate::nn::{Conv3dSpec, LayerParams, NormMode};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    arrays: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            arrays: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count over all arrays.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
                .collect(),
        }
    }

    /// Elementwise `self += other` over matching names.
    pub fn accumulate(&mut self, other: &ParamStore<T>) {
        for (k, v) in self.arrays.iter_mut() {
            if let Some(o) = other.arrays.get(k) {
                v.accumulate(o);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

enum Init {
    /// Normal with std `gain * sqrt(2 / fan_in)`.
    He { fan_in: usize, gain: f64 },
    Ones,
    Zeros,
    /// Flat generated-layer layout: He normal over the `fan_out x fan_in`
    /// weight block, zeros over the trailing bias block.
    GeneratedBase { fan_out: usize, fan_in: usize },
}

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    init: Init,
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, spec: &Conv3dSpec) {
    let [_, ci, a, b, c] = spec.weight_dims();
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        dims: spec.weight_dims().to_vec(),
        init: Init::He {
            fan_in: ci * a * b * c,
            gain: 1.0,
        },
    });
    if spec.has_bias {
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            dims: vec![spec.out_channels],
            init: Init::Zeros,
        });
    }
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize, mode: NormMode) {
    if mode == NormMode::Group {
        out.push(ParamSpec {
            name: format!("{prefix}.weight"),
            dims: vec![channels],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            dims: vec![channels],
            init: Init::Zeros,
        });
    }
}

fn push_fc(out: &mut Vec<ParamSpec>, prefix: &str, fan_out: usize, fan_in: usize, gain: f64) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        dims: vec![fan_out, fan_in],
        init: Init::He { fan_in, gain },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        dims: vec![fan_out],
        init: Init::Zeros,
    });
}

/// Every parameter of the network in a fixed declaration order.
fn param_specs(config: &ModelConfig, mode: PredictorMode) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let norm = config.norm_mode;
    push_conv(&mut out, "backbone.stem.conv", &stem_spec(config));
    push_norm(&mut out, "backbone.stem.norm", config.backbone.stem.channels, norm);
    for (prefix, block) in block_layout(config) {
        let c = block.out_channels;
        push_conv(&mut out, &format!("{prefix}.conv1"), &block.conv1());
        push_norm(&mut out, &format!("{prefix}.norm1"), c, norm);
        push_conv(&mut out, &format!("{prefix}.conv2"), &block.conv2());
        push_norm(&mut out, &format!("{prefix}.norm2"), c, norm);
        if block.needs_projection() {
            push_conv(&mut out, &format!("{prefix}.proj.conv"), &block.projection());
            push_norm(&mut out, &format!("{prefix}.proj.norm"), c, norm);
        }
    }
    match mode {
        PredictorMode::Hyper => {
            for i in 0..3 {
                let (s1, s2, [fc_out, fc_in]) = hyper_specs(config, i);
                let prefix = format!("hyper.branch{i}");
                push_conv(&mut out, &format!("{prefix}.conv1"), &s1);
                push_conv(&mut out, &format!("{prefix}.conv2"), &s2);
                // Small input-dependent part on top of a bias that holds
                // ordinarily initialized predictor weights.
                push_fc(&mut out, &format!("{prefix}.fc"), fc_out, fc_in, 0.1);
                let d = &config.predictor_dims;
                out.last_mut().expect("fc bias just pushed").init = Init::GeneratedBase {
                    fan_out: d[i + 1],
                    fan_in: d[i],
                };
            }
        }
        PredictorMode::Fixed => {
            let d = &config.predictor_dims;
            for i in 0..3 {
                push_fc(&mut out, &format!("predictor.fc{i}"), d[i + 1], d[i], 1.0);
            }
        }
    }
    out
}

/// Network configuration, predictor mode and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub mode: PredictorMode,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// He (fan-in) normal weights, zero biases, unit norm scales; seeded by
    /// `config.init_seed`.
    pub fn init(config: ModelConfig, mode: PredictorMode) -> Result<Self> {
        config.validate()?;
        let mut rng: ChaCha8Rng = stream(config.init_seed, Stream::Init);
        let mut params = ParamStore::new();
        for spec in param_specs(&config, mode) {
            let numel: usize = spec.dims.iter().product();
            let data: Vec<T> = match spec.init {
                Init::He { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..numel)
                        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                        .collect()
                }
                Init::GeneratedBase { fan_out, fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..numel)
                        .map(|i| {
                            if i < fan_out * fan_in {
                                T::from_f64_lossy(normal.sample(&mut rng))
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                }
                Init::Ones => vec![T::one(); numel],
                Init::Zeros => vec![T::zero(); numel],
            };
            params.insert(spec.name, Tensor::from_vec(&spec.dims, data)?);
        }
        Ok(Model {
            config,
            mode,
            params,
        })
    }

    /// Wraps existing parameters after checking every expected name is
    /// present with the expected dims and nothing else is.
    pub fn from_params(config: ModelConfig, mode: PredictorMode, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, mode);
        let mut problems = Vec::new();
        for spec in &specs {
            match params.get(&spec.name) {
                None => problems.push(format!("missing {}", spec.name)),
                Some(t) if t.dims() != spec.dims => problems.push(format!(
                    "{}: dims {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )),
                Some(_) => {}
            }
        }
        for name in params.names() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Format(format!(
                "parameters do not match the {} model config: {}",
                mode.as_str(),
                problems.join("; ")
            )));
        }
        Ok(Model {
            config,
            mode,
            params,
        })
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<Bound<'t, T>> {
        let mut vars = BTreeMap::new();
        for (k, v) in self.params.iter() {
            vars.insert(k.clone(), tape.param(v.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_constants<'t>(&self, tape: &'t Tape<T>) -> Result<Bound<'t, T>> {
        let mut vars = BTreeMap::new();
        for (k, v) in self.params.iter() {
            vars.insert(k.clone(), tape.constant(v.clone())?);
        }
        Ok(Bound { vars })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            mode: self.mode,
            params: self.params.cast(),
        }
    }
}

/// Model parameters registered on one tape.
pub struct Bound<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    /// Swaps in another variable for `name`, e.g. to differentiate with
    /// respect to a single parameter.
    pub fn replace(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))?;
        if slot.dims() != var.dims() {
            return Err(Error::Dimension(format!(
                "replacement for {name} has dims {:?}, expected {:?}",
                var.dims(),
                slot.dims()
            )));
        }
        *slot = var;
        Ok(())
    }

    /// `{prefix}.weight` plus `{prefix}.bias` when it exists.
    pub fn layer(&self, prefix: &str) -> Result<LayerParams<'t, T>> {
        Ok(LayerParams {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.vars.get(&format!("{prefix}.bias")).copied(),
        })
    }

    pub fn norm(&self, prefix: &str, mode: NormMode) -> Result<Option<LayerParams<'t, T>>> {
        match mode {
            NormMode::None => Ok(None),
            NormMode::Group => self.layer(prefix).map(Some),
        }
    }

    /// Gradients after a backward sweep; parameters the root did not reach
    /// get zeros.
    pub fn grads(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.dims()));
            out.insert(k.clone(), g);
        }
        out
    }
}
