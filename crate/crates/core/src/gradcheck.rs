//! Finite-difference verification of every differentiable operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    hyper_generate, hysnet_forward, predictor_forward, BackboneConfig, FeatureMap, GeneratedParams,
    HyperBranchConfig, Model, ModelConfig, PredictorMode, StageConfig, StemConfig,
};
use crate::nn::{
    conv3d, default_groups, fc_apply, fc_apply_per_sample, global_avg_pool, global_max_pool, group_norm,
    residual_block, BlockConfig, BlockParams, Conv3dSpec, LayerParams, NormMode, GROUP_NORM_EPS,
};
use crate::rng::{indexed_stream, Stream};
use crate::tensor::{central_difference, finite_diff_check, DType, GradCheckReport, ReduceKind, Tape, Tensor, Var};
use crate::train::l1_loss;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Redraws allowed when the probe straddles a ReLU or max kink.
const MAX_ATTEMPTS: usize = 20;

/// Result of one check case.
#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Input draws used; more than one means earlier draws sat on a kink.
    pub attempts: usize,
}

pub enum Outcome {
    Pass(GradCheckReport),
    Fail(GradCheckReport),
    /// The numeric derivative changes with the step size: the probe crosses
    /// a non-differentiable point, so the comparison is meaningless.
    Kinked(GradCheckReport),
}

pub type CaseFn = fn(&mut ChaCha8Rng) -> Result<Outcome>;

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product::<usize>();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(dims, &v).expect("positive dims")
}

/// Gradient check of scalar `f` at `x`, with a second probe at half the step
/// to tell kinks from wrong gradients.
pub fn check<F>(x: &Tensor<f64>, f: F) -> Result<Outcome>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let r = finite_diff_check(&f, x, STEP, TOLERANCE)?;
    if r.passed {
        return Ok(Outcome::Pass(r));
    }
    let half = central_difference(&f, x, r.worst_index, STEP / 2.0)?;
    let drift = (half - r.worst_numeric).abs() / half.abs().max(r.worst_numeric.abs()).max(1e-2);
    Ok(if drift > TOLERANCE { Outcome::Kinked(r) } else { Outcome::Fail(r) })
}

/// Checks `<r, f(x)>` for a random weighting `r`, turning any output into
/// a scalar without symmetric cancellations.
fn check_weighted<F>(rng: &mut ChaCha8Rng, x: &Tensor<f64>, f: F) -> Result<Outcome>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let dims = {
        let tape = Tape::new();
        f(tape.constant(x.clone())?)?.dims()
    };
    let r = rand_t(rng, &dims);
    check(x, |v| {
        let y = f(v)?;
        let w = v.tape().constant(r.clone())?;
        y.mul(w)?.sum()
    })
}

fn layer<'t>(tape: &'t Tape<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Result<LayerParams<'t, f64>> {
    Ok(LayerParams {
        weight: tape.constant(w.clone())?,
        bias: b.map(|b| tape.constant(b.clone())).transpose()?,
    })
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, y) = (rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4]));
    check_weighted(rng, &x, |v| {
        let c = v.tape().constant(y.clone())?;
        v.add(c)?.sub(v.scale(0.5)?)
    })
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, y) = (rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4]));
    check_weighted(rng, &x, |v| {
        let c = v.tape().constant(y.clone())?;
        v.mul(c)?.mul(v)
    })
}

fn case_broadcast(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = Tensor::scalar(rng.random_range(0.5..1.5));
    let y = rand_t(rng, &[2, 3]);
    check_weighted(rng, &x, |v| {
        let c = v.tape().constant(y.clone())?;
        c.mul(v)?.add(v)
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, b, a) = (rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2]), rand_t(rng, &[5, 3]));
    check_weighted(rng, &x, |v| {
        let t = v.tape();
        t.constant(a.clone())?.matmul(v)?.matmul(t.constant(b.clone())?)
    })
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = rand_t(rng, &[4, 5]);
    check_weighted(rng, &x, |v| v.relu())
}

fn case_reduce(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = rand_t(rng, &[2, 3, 4]);
    check_weighted(rng, &x, |v| {
        let s = v.reduce(ReduceKind::Sum, &[0])?;
        let m = v.reduce(ReduceKind::Mean, &[0])?;
        let mx = v.reduce(ReduceKind::Max, &[0])?;
        s.add(m)?.add(mx)
    })
}

fn case_reshape_narrow(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = rand_t(rng, &[2, 6]);
    check_weighted(rng, &x, |v| v.reshape(&[3, 4])?.narrow(1, 1, 2)?.mul(v.narrow(1, 0, 4)?.reshape(&[4, 2])?.narrow(0, 0, 3)?))
}

fn conv_setup(rng: &mut ChaCha8Rng, spec: &Conv3dSpec) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let x = rand_t(rng, &[2, spec.in_channels, 3, 4, 3]);
    let w = rand_t(rng, &spec.weight_dims());
    let b = rand_t(rng, &[spec.out_channels]);
    (x, w, b)
}

fn case_conv_input(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let spec = Conv3dSpec::cubic(2, 3, 3, 1, 1).with_bias(true);
    let (x, w, b) = conv_setup(rng, &spec);
    check_weighted(rng, &x, |v| conv3d(v, &spec, &layer(v.tape(), &w, Some(&b))?))
}

fn case_conv_weight(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let spec = Conv3dSpec::cubic(2, 3, 3, 2, 1).with_bias(true);
    let (x, w, b) = conv_setup(rng, &spec);
    check_weighted(rng, &w, |v| {
        let t = v.tape();
        let p = LayerParams { weight: v, bias: Some(t.constant(b.clone())?) };
        conv3d(t.constant(x.clone())?, &spec, &p)
    })
}

fn case_conv_bias(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let spec = Conv3dSpec::cubic(2, 3, 2, 1, 0).with_bias(true);
    let (x, w, b) = conv_setup(rng, &spec);
    check_weighted(rng, &b, |v| {
        let t = v.tape();
        let p = LayerParams { weight: t.constant(w.clone())?, bias: Some(v) };
        conv3d(t.constant(x.clone())?, &spec, &p)
    })
}

fn case_max_pool(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = rand_t(rng, &[2, 3, 2, 3, 2]);
    check_weighted(rng, &x, global_max_pool)
}

fn case_avg_pool(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = rand_t(rng, &[2, 3, 2, 3, 2]);
    check_weighted(rng, &x, global_avg_pool)
}

fn norm_setup(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (rand_t(rng, &[2, 4, 2, 2, 3]), rand_t(rng, &[4]), rand_t(rng, &[4]))
}

fn case_norm_input(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, g, b) = norm_setup(rng);
    check_weighted(rng, &x, |v| group_norm(v, default_groups(4), &layer(v.tape(), &g, Some(&b))?, GROUP_NORM_EPS))
}

fn case_norm_affine(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, g, b) = norm_setup(rng);
    let gb = Tensor::from_f64(&[2, 4], &[g.to_f64_vec(), b.to_f64_vec()].concat())?;
    check_weighted(rng, &gb, |v| {
        let t = v.tape();
        let p = LayerParams {
            weight: v.narrow(0, 0, 1)?.reshape(&[4])?,
            bias: Some(v.narrow(0, 1, 1)?.reshape(&[4])?),
        };
        group_norm(t.constant(x.clone())?, 2, &p, GROUP_NORM_EPS)
    })
}

fn case_fc(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, w, b) = (rand_t(rng, &[3, 5]), rand_t(rng, &[4, 5]), rand_t(rng, &[4]));
    let wx = Tensor::from_f64(&[1, 35], &[x.to_f64_vec(), w.to_f64_vec()].concat())?;
    check_weighted(rng, &wx, |v| {
        let t = v.tape();
        let input = v.narrow(1, 0, 15)?.reshape(&[3, 5])?;
        let p = LayerParams {
            weight: v.narrow(1, 15, 20)?.reshape(&[4, 5])?,
            bias: Some(t.constant(b.clone())?),
        };
        fc_apply(input, &p)
    })
}

fn case_fc_per_sample(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (x, w, b) = (rand_t(rng, &[3, 4]), rand_t(rng, &[3, 2, 4]), rand_t(rng, &[3, 2]));
    let all = Tensor::from_f64(&[1, 42], &[x.to_f64_vec(), w.to_f64_vec(), b.to_f64_vec()].concat())?;
    check_weighted(rng, &all, |v| {
        let input = v.narrow(1, 0, 12)?.reshape(&[3, 4])?;
        let weight = v.narrow(1, 12, 24)?.reshape(&[3, 2, 4])?;
        let bias = v.narrow(1, 36, 6)?.reshape(&[3, 2])?;
        fc_apply_per_sample(input, weight, bias)
    })
}

struct BlockSetup {
    config: BlockConfig,
    x: Tensor<f64>,
    arrays: Vec<Tensor<f64>>,
}

fn block_setup(rng: &mut ChaCha8Rng, stride: usize, in_channels: usize) -> BlockSetup {
    let config = BlockConfig { in_channels, out_channels: 4, stride, norm: NormMode::Group };
    let x = rand_t(rng, &[1, in_channels, 4, 4, 4]);
    let mut arrays = vec![
        rand_t(rng, &config.conv1().weight_dims()),
        rand_t(rng, &[4]),
        rand_t(rng, &[4]),
        rand_t(rng, &config.conv2().weight_dims()),
        rand_t(rng, &[4]),
        rand_t(rng, &[4]),
    ];
    if config.needs_projection() {
        arrays.extend([rand_t(rng, &config.projection().weight_dims()), rand_t(rng, &[4]), rand_t(rng, &[4])]);
    }
    BlockSetup { config, x, arrays }
}

fn block_params<'t>(t: &'t Tape<f64>, s: &BlockSetup, conv1: Option<Var<'t, f64>>) -> Result<BlockParams<'t, f64>> {
    let a = &s.arrays;
    let mut p = BlockParams {
        conv1: layer(t, &a[0], None)?,
        norm1: Some(layer(t, &a[1], Some(&a[2]))?),
        conv2: layer(t, &a[3], None)?,
        norm2: Some(layer(t, &a[4], Some(&a[5]))?),
        projection: None,
    };
    if s.config.needs_projection() {
        p.projection = Some((layer(t, &a[6], None)?, Some(layer(t, &a[7], Some(&a[8]))?)));
    }
    if let Some(w) = conv1 {
        p.conv1.weight = w;
    }
    Ok(p)
}

fn case_block_identity(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let s = block_setup(rng, 1, 4);
    check_weighted(rng, &s.x, |v| residual_block(v, &block_params(v.tape(), &s, None)?, &s.config))
}

fn case_block_projection(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let s = block_setup(rng, 2, 2);
    check_weighted(rng, &s.x, |v| residual_block(v, &block_params(v.tape(), &s, None)?, &s.config))
}

fn case_block_weight(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let s = block_setup(rng, 2, 2);
    let w = s.arrays[0].clone();
    check_weighted(rng, &w, |v| {
        let t = v.tape();
        residual_block(t.constant(s.x.clone())?, &block_params(t, &s, Some(v))?, &s.config)
    })
}

/// Two-stage network small enough for exhaustive finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem: StemConfig { channels: 2, kernel: 3, stride: 1 },
            stages: vec![
                StageConfig { channels: 2, num_blocks: 1, stride: 1 },
                StageConfig { channels: 4, num_blocks: 1, stride: 2 },
            ],
        },
        norm_mode: NormMode::Group,
        predictor_dims: vec![4, 3, 2, 1],
        hyper_branch: HyperBranchConfig { reduction: 2, hidden: 3 },
        dtype: DType::F64,
        init_seed: 0,
    }
}

fn tiny_model(rng: &mut ChaCha8Rng, mode: PredictorMode) -> Result<Model<f64>> {
    let config = ModelConfig { init_seed: rng.random(), ..tiny_config() };
    Model::init(config, mode)
}

fn weighted_generated<'t>(g: &GeneratedParams<'t, f64>, r: &[Tensor<f64>]) -> Result<Var<'t, f64>> {
    let mut total: Option<Var<'t, f64>> = None;
    for ((w, b), pair) in g.layers.iter().zip(r.chunks(2)) {
        let t = w.tape();
        let s = w.mul(t.constant(pair[0].clone())?)?.sum()?.add(b.mul(t.constant(pair[1].clone())?)?.sum()?)?;
        total = Some(match total {
            None => s,
            Some(acc) => acc.add(s)?,
        });
    }
    Ok(total.expect("three layers"))
}

fn generated_weights(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> Vec<Tensor<f64>> {
    let d = &config.predictor_dims;
    (0..3)
        .flat_map(|i| [vec![n, d[i + 1], d[i]], vec![n, d[i + 1]]])
        .map(|dims| rand_t(rng, &dims))
        .collect()
}

fn case_hyper_features(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, PredictorMode::Hyper)?;
    let x = rand_t(rng, &[2, 4, 2, 2, 2]);
    let r = generated_weights(rng, &model.config, 2);
    check(&x, |v| {
        let bound = model.bind_constants(v.tape())?;
        let feature = FeatureMap { map: v, pooled: global_avg_pool(v)? };
        weighted_generated(&hyper_generate(&feature, &bound, &model.config)?, &r)
    })
}

fn case_hyper_params(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, PredictorMode::Hyper)?;
    let x = rand_t(rng, &[2, 4, 2, 2, 2]);
    let r = generated_weights(rng, &model.config, 2);
    let w = model.params.get("hyper.branch1.conv1.weight").expect("hyper param").clone();
    check(&w, |v| {
        let t = v.tape();
        let mut bound = model.bind_constants(t)?;
        bound.replace("hyper.branch1.conv1.weight", v)?;
        let map = t.constant(x.clone())?;
        let feature = FeatureMap { map, pooled: global_avg_pool(map)? };
        weighted_generated(&hyper_generate(&feature, &bound, &model.config)?, &r)
    })
}

fn case_predictor(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let dims = [4usize, 3, 2, 1];
    let total: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    let n = 2;
    let theta = rand_t(rng, &[n, total]);
    let pooled = rand_t(rng, &[n, 4]);
    check_weighted(rng, &theta, |v| {
        let mut layers = Vec::new();
        let mut off = 0;
        for w in dims.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            layers.push((v.narrow(1, off, fo * fi)?.reshape(&[n, fo, fi])?, v.narrow(1, off + fo * fi, fo)?));
            off += fo * (fi + 1);
        }
        predictor_forward(v.tape().constant(pooled.clone())?, &GeneratedParams { layers })
    })
}

fn case_fixed_predictor(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, PredictorMode::Fixed)?;
    let x = rand_t(rng, &[2, 1, 4, 4, 4]);
    let w = model.params.get("predictor.fc0.weight").expect("fixed param").clone();
    check_weighted(rng, &w, |v| {
        let t = v.tape();
        let mut bound = model.bind_constants(t)?;
        bound.replace("predictor.fc0.weight", v)?;
        Ok(hysnet_forward(t.constant(x.clone())?, &bound, &model.config, model.mode)?.scores)
    })
}

fn case_network(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, PredictorMode::Hyper)?;
    let x = rand_t(rng, &[2, 1, 4, 4, 4]);
    check_weighted(rng, &x, |v| {
        let bound = model.bind_constants(v.tape())?;
        Ok(hysnet_forward(v, &bound, &model.config, model.mode)?.scores)
    })
}

fn case_l1(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (p, t) = (rand_t(rng, &[6]), rand_t(rng, &[6]));
    check(&p, |v| l1_loss(v, v.tape().constant(t.clone())?))
}

/// The full suite: tensor primitives, layers, model pieces and the loss.
pub fn default_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add_sub_scale", case_add as CaseFn),
        ("mul", case_mul),
        ("broadcast_scalar", case_broadcast),
        ("matmul", case_matmul),
        ("relu", case_relu),
        ("reduce_sum_mean_max", case_reduce),
        ("reshape_narrow", case_reshape_narrow),
        ("conv3d.input", case_conv_input),
        ("conv3d.weight_strided", case_conv_weight),
        ("conv3d.bias", case_conv_bias),
        ("global_max_pool", case_max_pool),
        ("global_avg_pool", case_avg_pool),
        ("group_norm.input", case_norm_input),
        ("group_norm.affine", case_norm_affine),
        ("fc", case_fc),
        ("fc_per_sample", case_fc_per_sample),
        ("residual_block.identity", case_block_identity),
        ("residual_block.projection", case_block_projection),
        ("residual_block.conv_weight", case_block_weight),
        ("hyper_branch.features", case_hyper_features),
        ("hyper_branch.params", case_hyper_params),
        ("predictor.generated", case_predictor),
        ("fixed_predictor", case_fixed_predictor),
        ("hysnet.patch", case_network),
        ("l1_loss", case_l1),
    ]
}

/// Runs `cases`, each on its own seeded stream, redrawing inputs that land
/// on a kink.
pub fn run_cases(cases: &[(&'static str, CaseFn)], seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, case)) in cases.iter().enumerate() {
        let mut rng = indexed_stream(seed, Stream::Check, i as u64);
        let mut attempts = 0;
        let (passed, r) = loop {
            attempts += 1;
            match case(&mut rng)? {
                Outcome::Pass(r) => break (true, r),
                Outcome::Fail(r) => break (false, r),
                Outcome::Kinked(r) if attempts >= MAX_ATTEMPTS => break (false, r),
                Outcome::Kinked(_) => continue,
            }
        };
        out.push(OpCheck {
            name: name.to_string(),
            passed,
            max_rel_error: r.max_rel_error,
            worst_index: r.worst_index,
            worst_analytic: r.worst_analytic,
            worst_numeric: r.worst_numeric,
            attempts,
        });
    }
    Ok(out)
}

pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    run_cases(&default_cases(), seed)
}
