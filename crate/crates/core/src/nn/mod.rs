//! Differentiable 3D network layers.
//!
//! Every layer takes its parameters as [`Var`]s so the same code serves
//! trained parameters (tape leaves) and generated parameters (outputs of
//! another network on the same tape).

mod conv;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ReduceKind, Scalar, Tensor, Var};

pub use conv::{conv3d, Conv3dSpec};

/// Weight and optional bias of one layer.
#[derive(Clone, Copy)]
pub struct LayerParams<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Option<Var<'t, T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    Group,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest group count not above 4 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(4))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Per-sample, per-channel maximum over the three spatial axes.
pub fn global_max_pool<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    check_rank5("global_max_pool", &x)?;
    x.reduce(ReduceKind::Max, &[2, 3, 4])
}

/// Per-sample, per-channel mean over the three spatial axes.
pub fn global_avg_pool<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    check_rank5("global_avg_pool", &x)?;
    x.reduce(ReduceKind::Mean, &[2, 3, 4])
}

fn check_rank5<T: Scalar>(op: &str, x: &Var<'_, T>) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 5 {
        return Err(dim_err!("{op} expects N x C x D x H x W, got {dims:?}"));
    }
    Ok(())
}

/// Group normalization: standardize each (sample, group) block, then apply
/// a per-channel scale (`params.weight`) and shift (`params.bias`).
pub fn group_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    groups: usize,
    params: &LayerParams<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let dims = xv.dims().to_vec();
    if dims.len() < 2 {
        return Err(dim_err!("group_norm expects N x C x ..., got {dims:?}"));
    }
    let (n, c) = (dims[0], dims[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    let bias = params
        .bias
        .ok_or_else(|| Error::Contract("group_norm needs a shift parameter".into()))?;
    let gamma = params.weight.value();
    let beta = bias.value();
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(dim_err!(
            "group_norm affine dims {:?}/{:?}, expected [{c}]",
            gamma.dims(),
            beta.dims()
        ));
    }
    let spatial: usize = dims[2..].iter().product();
    let cpg = c / groups;
    let block = cpg * spatial;
    let eps = T::from_f64_lossy(eps);
    let count = T::from_usize(block).expect("block size fits");

    let mut xhat = vec![T::zero(); xv.numel()];
    let mut rstd = vec![T::zero(); n * groups];
    for (b, chunk) in xv.data().chunks(block).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / count;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let r = T::one() / (var + eps).sqrt();
        rstd[b] = r;
        for (o, &v) in xhat[b * block..(b + 1) * block].iter_mut().zip(chunk) {
            *o = (v - mean) * r;
        }
    }
    let out: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let ch = (i / spatial) % c;
            gamma.data()[ch] * h + beta.data()[ch]
        })
        .collect();
    let value = Tensor::from_vec(&dims, out)?;

    x.tape().record(
        "group_norm",
        &[x, params.weight, bias],
        value,
        Box::new(move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..n * groups {
                    let range = b * block..(b + 1) * block;
                    let ch0 = (b % groups) * cpg;
                    let start = range.start;
                    let dxhat = |i: usize| gd[i] * gamma.data()[ch0 + (i - start) / spatial];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in range.clone() {
                        let d = dxhat(i);
                        m1 = m1 + d;
                        m2 = m2 + d * xhat[i];
                    }
                    m1 = m1 / count;
                    m2 = m2 / count;
                    for i in range {
                        gx[i] = rstd[b] * (dxhat(i) - m1 - xhat[i] * m2);
                    }
                }
                Tensor::from_vec(&dims, gx).expect("input dims")
            });
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            if needs[1] || needs[2] {
                for (i, (&gv, &h)) in gd.iter().zip(&xhat).enumerate() {
                    let ch = (i / spatial) % c;
                    ggamma[ch] = ggamma[ch] + gv * h;
                    gbeta[ch] = gbeta[ch] + gv;
                }
            }
            vec![
                gx,
                needs[1].then(|| Tensor::from_vec(&[c], ggamma).expect("c")),
                needs[2].then(|| Tensor::from_vec(&[c], gbeta).expect("c")),
            ]
        }),
    )
}

/// Fully-connected layer with parameters shared across the batch:
/// `input (N x F) * weight^T (F x G) + bias (G)`.
pub fn fc_apply<'t, T: Scalar>(
    input: Var<'t, T>,
    params: &LayerParams<'t, T>,
) -> Result<Var<'t, T>> {
    let x = input.value();
    let w = params.weight.value();
    let (&[n, f], &[g, f2]) = (x.dims(), w.dims()) else {
        return Err(dim_err!(
            "fc_apply needs N x F input and G x F weight, got {:?} and {:?}",
            x.dims(),
            w.dims()
        ));
    };
    if f != f2 {
        return Err(dim_err!("fc_apply: input width {f}, weight expects {f2}"));
    }
    let b = params.bias.map(|b| b.value());
    if let Some(b) = &b {
        if b.dims() != [g] {
            return Err(dim_err!("fc_apply bias dims {:?}, expected [{g}]", b.dims()));
        }
    }
    let mut out = vec![T::zero(); n * g];
    T::gemm(n, f, g, x.data(), false, w.data(), true, &mut out, T::zero());
    if let Some(b) = &b {
        for row in out.chunks_mut(g) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o = *o + bv);
        }
    }
    let value = Tensor::from_vec(&[n, g], out)?;
    let mut inputs = vec![input, params.weight];
    inputs.extend(params.bias);
    input.tape().record(
        "fc_apply",
        &inputs,
        value,
        Box::new(move |up, needs| {
            let gx = needs[0].then(|| {
                let mut d = vec![T::zero(); n * f];
                T::gemm(n, g, f, up.data(), false, w.data(), false, &mut d, T::zero());
                Tensor::from_vec(&[n, f], d).expect("dims")
            });
            let gw = needs[1].then(|| {
                let mut d = vec![T::zero(); g * f];
                T::gemm(g, n, f, up.data(), true, x.data(), false, &mut d, T::zero());
                Tensor::from_vec(&[g, f], d).expect("dims")
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); g];
                    for row in up.data().chunks(g) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    Tensor::from_vec(&[g], d).expect("dims")
                }));
            }
            grads
        }),
    )
}

/// Fully-connected layer where sample `i` uses its own parameters:
/// `weight` is `N x G x F` and `bias` is `N x G`.
pub fn fc_apply_per_sample<'t, T: Scalar>(
    input: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let x = input.value();
    let w = weight.value();
    let b = bias.value();
    let (&[n, f], &[n2, g, f2], &[n3, g2]) = (x.dims(), w.dims(), b.dims()) else {
        return Err(dim_err!(
            "per-sample fc needs N x F, N x G x F, N x G; got {:?}, {:?}, {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        ));
    };
    if n != n2 || n != n3 {
        return Err(Error::Contract(format!(
            "per-sample fc: batch of {n} features but {n2} weight sets and {n3} bias sets"
        )));
    }
    if f != f2 || g != g2 {
        return Err(dim_err!(
            "per-sample fc: input width {f}, weight {g}x{f2}, bias {g2}"
        ));
    }
    let mut out = vec![T::zero(); n * g];
    for s in 0..n {
        let xs = &x.data()[s * f..(s + 1) * f];
        let ws = &w.data()[s * g * f..(s + 1) * g * f];
        for o in 0..g {
            let row = &ws[o * f..(o + 1) * f];
            let dot = row.iter().zip(xs).map(|(&a, &v)| a * v).sum::<T>();
            out[s * g + o] = dot + b.data()[s * g + o];
        }
    }
    let value = Tensor::from_vec(&[n, g], out)?;
    input.tape().record(
        "fc_apply_per_sample",
        &[input, weight, bias],
        value,
        Box::new(move |up, needs| {
            let u = up.data();
            let gx = needs[0].then(|| {
                let mut d = vec![T::zero(); n * f];
                for s in 0..n {
                    for o in 0..g {
                        let uo = u[s * g + o];
                        let row = &w.data()[(s * g + o) * f..(s * g + o + 1) * f];
                        for (dv, &wv) in d[s * f..(s + 1) * f].iter_mut().zip(row) {
                            *dv = *dv + uo * wv;
                        }
                    }
                }
                Tensor::from_vec(&[n, f], d).expect("dims")
            });
            let gw = needs[1].then(|| {
                let mut d = vec![T::zero(); n * g * f];
                for s in 0..n {
                    let xs = &x.data()[s * f..(s + 1) * f];
                    for o in 0..g {
                        let uo = u[s * g + o];
                        let row = &mut d[(s * g + o) * f..(s * g + o + 1) * f];
                        row.iter_mut().zip(xs).for_each(|(dv, &xv)| *dv = uo * xv);
                    }
                }
                Tensor::from_vec(&[n, g, f], d).expect("dims")
            });
            let gb = needs[2].then(|| up.clone());
            vec![gx, gw, gb]
        }),
    )
}

/// Shape of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub norm: NormMode,
}

impl BlockConfig {
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn conv1(&self) -> Conv3dSpec {
        Conv3dSpec::cubic(self.in_channels, self.out_channels, 3, self.stride, 1)
            .with_bias(self.norm == NormMode::None)
    }

    pub fn conv2(&self) -> Conv3dSpec {
        Conv3dSpec::cubic(self.out_channels, self.out_channels, 3, 1, 1)
            .with_bias(self.norm == NormMode::None)
    }

    pub fn projection(&self) -> Conv3dSpec {
        Conv3dSpec::cubic(self.in_channels, self.out_channels, 1, self.stride, 0)
            .with_bias(self.norm == NormMode::None)
    }
}

/// Parameters of a basic residual block. Norm entries are `None` when the
/// block runs without normalization.
#[derive(Clone, Copy)]
pub struct BlockParams<'t, T> {
    pub conv1: LayerParams<'t, T>,
    pub norm1: Option<LayerParams<'t, T>>,
    pub conv2: LayerParams<'t, T>,
    pub norm2: Option<LayerParams<'t, T>>,
    pub projection: Option<(LayerParams<'t, T>, Option<LayerParams<'t, T>>)>,
}

/// Applies group norm when configured, otherwise passes through.
pub fn maybe_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    norm: NormMode,
    params: Option<&LayerParams<'t, T>>,
) -> Result<Var<'t, T>> {
    match (norm, params) {
        (NormMode::None, _) => Ok(x),
        (NormMode::Group, Some(p)) => {
            let c = x.dims()[1];
            group_norm(x, default_groups(c), p, GROUP_NORM_EPS)
        }
        (NormMode::Group, None) => Err(Error::Contract("group norm parameters missing".into())),
    }
}

/// `relu(main(x) + skip(x))` with main = conv3 -> norm -> relu -> conv3 -> norm
/// and skip = identity or a strided 1x1x1 projection (followed by norm).
pub fn residual_block<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &BlockParams<'t, T>,
    config: &BlockConfig,
) -> Result<Var<'t, T>> {
    let h = conv3d(x, &config.conv1(), &params.conv1)?;
    let h = maybe_norm(h, config.norm, params.norm1.as_ref())?.relu()?;
    let h = conv3d(h, &config.conv2(), &params.conv2)?;
    let h = maybe_norm(h, config.norm, params.norm2.as_ref())?;
    let skip = match (&params.projection, config.needs_projection()) {
        (Some((conv, norm)), true) => {
            let s = conv3d(x, &config.projection(), conv)?;
            maybe_norm(s, config.norm, norm.as_ref())?
        }
        (None, false) => x,
        _ => {
            return Err(dim_err!(
                "residual block projection presence does not match {config:?}"
            ))
        }
    };
    if h.dims() != skip.dims() {
        return Err(dim_err!(
            "residual paths disagree: main {:?}, skip {:?}",
            h.dims(),
            skip.dims()
        ));
    }
    h.add(skip)?.relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
        let v: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor::from_f64(dims, &v).unwrap()
    }

    fn affine<'t>(tape: &'t Tape<f64>, c: usize, g: f64, b: f64) -> LayerParams<'t, f64> {
        LayerParams {
            weight: tape.constant(Tensor::full(&[c], g)).unwrap(),
            bias: Some(tape.constant(Tensor::full(&[c], b)).unwrap()),
        }
    }

    #[test]
    fn pools_on_simple_fields() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 2, 2, 2, 2], 3.5f64)).unwrap();
        assert_eq!(global_max_pool(c).unwrap().value().data(), &[3.5, 3.5]);
        assert_eq!(global_avg_pool(c).unwrap().value().data(), &[3.5, 3.5]);

        let single = tape.constant(Tensor::from_f64(&[1, 1, 1, 1, 1], &[-2.0]).unwrap()).unwrap();
        assert_eq!(global_max_pool(single).unwrap().value().data(), &[-2.0]);

        let two = tape.constant(Tensor::from_f64(&[1, 1, 1, 1, 2], &[1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(global_avg_pool(two).unwrap().value().data(), &[2.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_peak() {
        let tape = Tape::new();
        let mut field = vec![0.0; 8];
        field[5] = 7.0;
        let x = tape.param(Tensor::from_f64(&[1, 1, 2, 2, 2], &field).unwrap()).unwrap();
        let p = global_max_pool(x).unwrap();
        assert_eq!(p.value().data(), &[7.0]);
        p.sum().unwrap().scale(3.0).unwrap().backward().unwrap();
        let mut expect = vec![0.0; 8];
        expect[5] = 3.0;
        assert_eq!(x.grad().unwrap().data(), &expect[..]);
    }

    #[test]
    fn avg_pool_backward_is_uniform() {
        let tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[1, 1, 2, 2, 2])).unwrap();
        global_avg_pool(x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.125; 8]);
    }

    #[test]
    fn group_norm_constant_input_gives_shift() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4, 2, 2, 2], 5.0)).unwrap();
        let y = group_norm(x, 2, &affine(&tape, 4, 2.0, 0.75), GROUP_NORM_EPS).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&mut rng, &[2, 4, 3, 3, 3], 2.0);
        let tape = Tape::new();
        let y = group_norm(tape.constant(x.clone()).unwrap(), 2, &affine(&tape, 4, 1.0, 0.0), 1e-5)
            .unwrap()
            .value();
        let block = 2 * 27;
        for (chunk_in, chunk) in x.data().chunks(block).zip(y.data().chunks(block)) {
            // Oracle: moments of the raw block, computed directly.
            let m = chunk_in.iter().sum::<f64>() / block as f64;
            let v = chunk_in.iter().map(|a| (a - m).powi(2)).sum::<f64>() / block as f64;
            let mean = chunk.iter().sum::<f64>() / block as f64;
            let var = chunk.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / block as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - v / (v + 1e-5)).abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_with_c_groups_is_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&mut rng, &[1, 3, 2, 2, 2], 1.0);
        let tape = Tape::new();
        let y = group_norm(tape.constant(x.clone()).unwrap(), 3, &affine(&tape, 3, 1.0, 0.0), 1e-5)
            .unwrap()
            .value();
        for (ci, co) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let m = ci.iter().sum::<f64>() / 8.0;
            let v = ci.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            for (a, b) in ci.iter().zip(co) {
                assert!(((a - m) / (v + 1e-5).sqrt() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_t(&mut rng, &[1, 4, 3, 3, 3], 1.0);
        let tape = Tape::new();
        let p = affine(&tape, 4, 1.0, 0.0);
        let y1 = group_norm(tape.constant(x.clone()).unwrap(), 4, &p, 1e-5).unwrap().value();
        let y2 = group_norm(tape.constant(x.map(|v| v * 10.0)).unwrap(), 4, &p, 1e-5)
            .unwrap()
            .value();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 1, 1, 2])).unwrap();
        assert!(matches!(
            group_norm(x, 2, &affine(&tape, 3, 1.0, 0.0), 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t(&mut rng, &[2, 4, 2, 2, 2], 1.0);
        let gamma = rand_t(&mut rng, &[4], 1.0);
        let beta = rand_t(&mut rng, &[4], 1.0);
        let probe = rand_t(&mut rng, &[2, 4, 2, 2, 2], 1.0);
        fn loss<'t>(
            xv: Var<'t, f64>,
            gv: Var<'t, f64>,
            bv: Var<'t, f64>,
            probe: &Tensor<f64>,
        ) -> Result<Var<'t, f64>> {
            let t = xv.tape();
            let p = LayerParams { weight: gv, bias: Some(bv) };
            group_norm(xv, 2, &p, 1e-5)?.mul(t.constant(probe.clone())?)?.sum()
        }
        let rx = finite_diff_check(
            |v| {
                let t = v.tape();
                loss(v, t.constant(gamma.clone())?, t.constant(beta.clone())?, &probe)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(rx.passed, "{rx:?}");
        let rg = finite_diff_check(
            |v| {
                let t = v.tape();
                loss(t.constant(x.clone())?, v, t.constant(beta.clone())?, &probe)
            },
            &gamma,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(rg.passed, "{rg:?}");
    }

    #[test]
    fn fc_apply_identity_and_arithmetic() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()).unwrap();
        let eye = LayerParams {
            weight: tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap(),
            bias: Some(tape.constant(Tensor::zeros(&[2])).unwrap()),
        };
        assert_eq!(fc_apply(x, &eye).unwrap().value().data(), &[1.0, 2.0]);
        let p = LayerParams {
            weight: tape.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap()).unwrap(),
            bias: Some(tape.constant(Tensor::from_f64(&[1], &[10.0]).unwrap()).unwrap()),
        };
        assert_eq!(fc_apply(x, &p).unwrap().value().data(), &[21.0]);
        let bad = LayerParams {
            weight: tape.constant(Tensor::zeros(&[1, 3])).unwrap(),
            bias: None,
        };
        assert!(matches!(fc_apply(x, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fc_gradient_flows_into_generated_weights() {
        // The weight is produced by an upstream function of `v`.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_t(&mut rng, &[3, 4], 1.0);
        let v0 = rand_t(&mut rng, &[2, 4], 1.0);
        let r = finite_diff_check(
            |v| {
                let t = v.tape();
                let w = v.mul(v)?.add(v)?;
                let p = LayerParams {
                    weight: w,
                    bias: Some(t.constant(Tensor::from_f64(&[2], &[0.1, -0.2])?)?),
                };
                fc_apply(t.constant(x.clone())?, &p)?.relu()?.sum()
            },
            &v0,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn per_sample_fc_matches_shared_fc_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_t(&mut rng, &[2, 3], 1.0);
        let w = rand_t(&mut rng, &[2, 4, 3], 1.0);
        let b = rand_t(&mut rng, &[2, 4], 1.0);
        let tape = Tape::new();
        let y = fc_apply_per_sample(
            tape.constant(x.clone()).unwrap(),
            tape.constant(w.clone()).unwrap(),
            tape.constant(b.clone()).unwrap(),
        )
        .unwrap()
        .value();
        for s in 0..2 {
            let xs = tape.constant(Tensor::from_f64(&[1, 3], &x.to_f64_vec()[s * 3..s * 3 + 3]).unwrap()).unwrap();
            let p = LayerParams {
                weight: tape.constant(Tensor::from_f64(&[4, 3], &w.to_f64_vec()[s * 12..s * 12 + 12]).unwrap()).unwrap(),
                bias: Some(tape.constant(Tensor::from_f64(&[4], &b.to_f64_vec()[s * 4..s * 4 + 4]).unwrap()).unwrap()),
            };
            let ys = fc_apply(xs, &p).unwrap().value();
            for o in 0..4 {
                assert!((ys.data()[o] - y.data()[s * 4 + o]).abs() < 1e-12);
            }
        }
        let wrong = tape.constant(Tensor::<f64>::zeros(&[1, 4, 3])).unwrap();
        let wb = tape.constant(Tensor::<f64>::zeros(&[1, 4])).unwrap();
        assert!(matches!(
            fc_apply_per_sample(tape.constant(x).unwrap(), wrong, wb),
            Err(Error::Contract(_))
        ));
    }

    fn block_params<'t>(
        tape: &'t Tape<f64>,
        cfg: &BlockConfig,
        rng: &mut ChaCha8Rng,
        zero_main: bool,
    ) -> BlockParams<'t, f64> {
        let mut conv = |spec: Conv3dSpec, zero: bool| {
            let w = if zero {
                Tensor::zeros(&spec.weight_dims())
            } else {
                rand_t(rng, &spec.weight_dims(), 0.5)
            };
            LayerParams {
                weight: tape.param(w).unwrap(),
                bias: spec
                    .has_bias
                    .then(|| tape.param(Tensor::zeros(&[spec.out_channels])).unwrap()),
            }
        };
        let c = cfg.out_channels;
        let norm = || (cfg.norm == NormMode::Group).then(|| affine(tape, c, 1.0, 0.0));
        BlockParams {
            conv1: conv(cfg.conv1(), zero_main),
            norm1: norm(),
            conv2: conv(cfg.conv2(), zero_main),
            norm2: norm(),
            projection: cfg
                .needs_projection()
                .then(|| (conv(cfg.projection(), false), norm())),
        }
    }

    #[test]
    fn zeroed_main_path_with_identity_skip_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for norm in [NormMode::None, NormMode::Group] {
            let cfg = BlockConfig { in_channels: 2, out_channels: 2, stride: 1, norm };
            let tape = Tape::new();
            let params = block_params(&tape, &cfg, &mut rng, true);
            let x = rand_t(&mut rng, &[1, 2, 3, 3, 3], 1.0);
            let y = residual_block(tape.constant(x.clone()).unwrap(), &params, &cfg).unwrap();
            assert_eq!(*y.value(), x.map(|v| v.max(0.0)));
        }
    }

    #[test]
    fn stride_two_halves_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = BlockConfig { in_channels: 2, out_channels: 4, stride: 2, norm: NormMode::Group };
        let tape = Tape::new();
        let params = block_params(&tape, &cfg, &mut rng, false);
        let x = tape.constant(rand_t(&mut rng, &[1, 2, 8, 6, 4], 1.0)).unwrap();
        assert_eq!(residual_block(x, &params, &cfg).unwrap().dims(), vec![1, 4, 4, 3, 2]);
    }

    #[test]
    fn missing_projection_is_a_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cfg = BlockConfig { in_channels: 2, out_channels: 4, stride: 1, norm: NormMode::None };
        let tape = Tape::new();
        let mut params = block_params(&tape, &cfg, &mut rng, false);
        params.projection = None;
        let x = tape.constant(rand_t(&mut rng, &[1, 2, 3, 3, 3], 1.0)).unwrap();
        assert!(matches!(residual_block(x, &params, &cfg), Err(Error::Dimension(_))));
    }
}
