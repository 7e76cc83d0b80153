use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::LayerParams;
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Geometry of a 3D convolution over `N x C x D x H x W` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl Conv3dSpec {
    /// Cubic kernel `k`, stride `s`, padding `p` on every axis.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        let [a, b, c] = self.kernel;
        [self.out_channels, self.in_channels, a, b, c]
    }

    /// `floor((in + 2p - k) / s) + 1` per axis; errors when the kernel does
    /// not fit the padded extent.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            let (k, s, p) = (self.kernel[ax], self.stride[ax], self.padding[ax]);
            if k == 0 || s == 0 {
                return Err(dim_err!("conv3d kernel and stride must be positive: {self:?}"));
            }
            let padded = input[ax] + 2 * p;
            if padded < k {
                return Err(dim_err!(
                    "conv3d kernel {k} exceeds padded extent {padded} on axis {ax}"
                ));
            }
            out[ax] = (padded - k) / s + 1;
        }
        Ok(out)
    }
}

struct Geometry {
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k` on
    /// `axis`, or `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.inp[axis]).then_some(i as usize)
    }

    /// Visits every (column-matrix index, input index) pair that is not
    /// padding, for a single sample.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.inp;
        let [od, oh, ow] = self.out;
        let [kd, kh, kw] = self.kernel;
        let ncols = self.cols();
        let mut row = 0;
        for c in 0..self.c {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let base = row * ncols;
                        for z in 0..od {
                            let Some(iz) = self.source(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(iy) = self.source(1, y, b) else { continue };
                                let src_row = ((c * d + iz) * h + iy) * w;
                                let dst_row = base + (z * oh + y) * ow;
                                for x in 0..ow {
                                    if let Some(ix) = self.source(2, x, e) {
                                        f(dst_row + x, src_row + ix);
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, sample: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        self.for_each_tap(|dst, src| cols[dst] = sample[src]);
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        self.for_each_tap(|src, dst| sample[dst] = sample[dst] + cols[src]);
    }
}

/// 3D cross-correlation (no kernel flip) with zero padding.
pub fn conv3d<'t, T: Scalar>(
    input: Var<'t, T>,
    spec: &Conv3dSpec,
    params: &LayerParams<'t, T>,
) -> Result<Var<'t, T>> {
    let x = input.value();
    let &[n, c, d, h, w] = x.dims() else {
        return Err(dim_err!("conv3d input must be N x C x D x H x W, got {:?}", x.dims()));
    };
    if c != spec.in_channels {
        return Err(dim_err!(
            "conv3d expects {} input channels, got {c}",
            spec.in_channels
        ));
    }
    let weight = params.weight.value();
    if weight.dims() != spec.weight_dims() {
        return Err(dim_err!(
            "conv3d weight dims {:?}, expected {:?}",
            weight.dims(),
            spec.weight_dims()
        ));
    }
    let bias = match (&params.bias, spec.has_bias) {
        (Some(b), true) => {
            let bv = b.value();
            if bv.dims() != [spec.out_channels] {
                return Err(dim_err!(
                    "conv3d bias dims {:?}, expected [{}]",
                    bv.dims(),
                    spec.out_channels
                ));
            }
            Some(bv)
        }
        (None, false) => None,
        _ => return Err(dim_err!("conv3d bias presence does not match spec")),
    };

    let out = spec.output_extents([d, h, w])?;
    let geo = Rc::new(Geometry {
        c,
        inp: [d, h, w],
        out,
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
    });
    let co = spec.out_channels;
    let (k, p) = (geo.rows(), geo.cols());
    let in_len = c * d * h * w;

    let cols: Vec<Vec<T>> = (0..n)
        .map(|s| geo.im2col(&x.data()[s * in_len..(s + 1) * in_len]))
        .collect();
    let mut y = vec![T::zero(); n * co * p];
    for (s, col) in cols.iter().enumerate() {
        let dst = &mut y[s * co * p..(s + 1) * co * p];
        T::gemm(co, k, p, weight.data(), false, col, false, dst, T::zero());
        if let Some(b) = &bias {
            for (ch, chunk) in dst.chunks_mut(p).enumerate() {
                let bc = b.data()[ch];
                chunk.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
    }
    let value = Tensor::from_vec(&[n, co, out[0], out[1], out[2]], y)?;

    let mut inputs = vec![input, params.weight];
    if let Some(b) = params.bias.filter(|_| spec.has_bias) {
        inputs.push(b);
    }
    let in_dims = x.dims().to_vec();
    let wdims = weight.dims().to_vec();
    let has_bias = spec.has_bias;
    input.tape().record(
        "conv3d",
        &inputs,
        value,
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); n * in_len];
                let mut gcols = vec![T::zero(); k * p];
                for s in 0..n {
                    let gs = &g.data()[s * co * p..(s + 1) * co * p];
                    T::gemm(k, co, p, weight.data(), true, gs, false, &mut gcols, T::zero());
                    geo.col2im_add(&gcols, &mut gx[s * in_len..(s + 1) * in_len]);
                }
                Tensor::from_vec(&in_dims, gx).expect("input dims")
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); co * k];
                for (s, col) in cols.iter().enumerate() {
                    let gs = &g.data()[s * co * p..(s + 1) * co * p];
                    T::gemm(co, p, k, gs, false, col, true, &mut gw, T::one());
                }
                Tensor::from_vec(&wdims, gw).expect("weight dims")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); co];
                    for (i, chunk) in g.data().chunks(p).enumerate() {
                        let ch = i % co;
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec(&[co], gb).expect("bias dims")
                }));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-deep loop evaluation of the same cross-correlation.
    fn conv3d_oracle(
        x: &[f64],
        xd: [usize; 5],
        w: &[f64],
        b: Option<&[f64]>,
        spec: &Conv3dSpec,
    ) -> (Vec<f64>, [usize; 5]) {
        let [n, c, d, h, wd] = xd;
        let co = spec.out_channels;
        let [ka, kb, kc] = spec.kernel;
        let od = (d + 2 * spec.padding[0] - ka) / spec.stride[0] + 1;
        let oh = (h + 2 * spec.padding[1] - kb) / spec.stride[1] + 1;
        let ow = (wd + 2 * spec.padding[2] - kc) / spec.stride[2] + 1;
        let mut out = vec![0.0; n * co * od * oh * ow];
        for s in 0..n {
            for o in 0..co {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.map_or(0.0, |b| b[o]);
                            for i in 0..c {
                                for a in 0..ka {
                                    for bb in 0..kb {
                                        for e in 0..kc {
                                            let iz = (z * spec.stride[0] + a) as isize
                                                - spec.padding[0] as isize;
                                            let iy = (y * spec.stride[1] + bb) as isize
                                                - spec.padding[1] as isize;
                                            let ix = (xx * spec.stride[2] + e) as isize
                                                - spec.padding[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((s * c + i) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi = (((o * c + i) * ka + a) * kb + bb) * kc + e;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((s * co + o) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        (out, [n, co, od, oh, ow])
    }

    fn run<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: &Conv3dSpec,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let params = LayerParams {
            weight: tape.constant(w.clone())?,
            bias: b.map(|b| tape.constant(b.clone())).transpose()?,
        };
        let y = conv3d(xv, spec, &params)?;
        let v = y.value();
        Ok((*v).clone())
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let spec = Conv3dSpec::cubic(1, 1, 2, 1, 0);
        let x = Tensor::<f32>::ones(&[1, 1, 2, 2, 2]);
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2, 2]);
        let y = run(&x, &w, None, &spec).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn pointwise_identity_kernel() {
        let spec = Conv3dSpec::cubic(3, 3, 1, 1, 0).with_bias(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..2 * 3 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 3, 3, 3], &xs).unwrap();
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::<f64>::zeros(&[3]);
        let y = run(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn random_cases_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.random_range(1..=3);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=1);
            let dims = [
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(k.max(2)..=4),
                rng.random_range(k.max(2)..=4),
                rng.random_range(k.max(2)..=4),
            ];
            let co = rng.random_range(1..=3);
            let spec = Conv3dSpec::cubic(dims[1], co, k, s, p).with_bias(rng.random_bool(0.5));
            let xs: Vec<f64> = (0..dims.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let ws: Vec<f64> = (0..spec.weight_dims().iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let bs: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (expect, odims) =
                conv3d_oracle(&xs, dims, &ws, spec.has_bias.then_some(&bs[..]), &spec);
            let x = Tensor::<f32>::from_f64(&dims, &xs).unwrap();
            let w = Tensor::<f32>::from_f64(&spec.weight_dims(), &ws).unwrap();
            let b = Tensor::<f32>::from_f64(&[co], &bs).unwrap();
            let y = run(&x, &w, spec.has_bias.then_some(&b), &spec).unwrap();
            assert_eq!(y.dims(), &odims);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn extent_formula_and_errors() {
        for k in 1..=3 {
            for s in 1..=3 {
                for p in 0..=2 {
                    for l in 1..=9 {
                        let spec = Conv3dSpec::cubic(1, 1, k, s, p);
                        match spec.output_extents([l; 3]) {
                            Ok(o) => {
                                assert!(l + 2 * p >= k);
                                assert_eq!(o, [(l + 2 * p - k) / s + 1; 3]);
                            }
                            Err(_) => assert!(l + 2 * p < k),
                        }
                    }
                }
            }
        }
        let spec = Conv3dSpec::cubic(2, 1, 3, 1, 1);
        let x = Tensor::<f32>::ones(&[1, 3, 4, 4, 4]);
        let w = Tensor::<f32>::ones(&[1, 2, 3, 3, 3]);
        assert!(run(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = Conv3dSpec::cubic(2, 2, 3, 2, 1).with_bias(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_t = |dims: &[usize]| {
            let v: Vec<f64> = (0..dims.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Tensor::<f64>::from_f64(dims, &v).unwrap()
        };
        let x = rand_t(&[1, 2, 3, 4, 3]);
        let w = rand_t(&spec.weight_dims());
        let b = rand_t(&[2]);
        let probe = rand_t(&[1, 2, 2, 2, 2]);

        let r = finite_diff_check(
            |xv| {
                let t = xv.tape();
                let params = LayerParams {
                    weight: t.constant(w.clone())?,
                    bias: Some(t.constant(b.clone())?),
                };
                conv3d(xv, &spec, &params)?.mul(t.constant(probe.clone())?)?.sum()
            },
            &x,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "input: {r:?}");

        let r = finite_diff_check(
            |wv| {
                let t = wv.tape();
                let params = LayerParams {
                    weight: wv,
                    bias: Some(t.constant(b.clone())?),
                };
                conv3d(t.constant(x.clone())?, &spec, &params)?
                    .mul(t.constant(probe.clone())?)?
                    .sum()
            },
            &w,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "weight: {r:?}");

        let r = finite_diff_check(
            |bv| {
                let t = bv.tape();
                let params = LayerParams {
                    weight: t.constant(w.clone())?,
                    bias: Some(bv),
                };
                conv3d(t.constant(x.clone())?, &spec, &params)?
                    .mul(t.constant(probe.clone())?)?
                    .sum()
            },
            &b,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "bias: {r:?}");
    }
}
