//! Elementary differentiable operations on [`Var`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{strides, Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

/// Sums `g` down to the shape of an operand that may have been broadcast
/// from rank 0.
fn unbroadcast<T: Scalar>(g: Tensor<T>, target_rank0: bool) -> Tensor<T> {
    if target_rank0 && g.rank() != 0 {
        Tensor::scalar(g.data().iter().copied().sum())
    } else {
        g
    }
}

fn pick<T: Scalar>(t: &Tensor<T>, rank0: bool, i: usize) -> T {
    if rank0 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn binary<'t, T: Scalar>(kind: Binary, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let av = a.value();
    let bv = b.value();
    let (out_dims, a0, b0) = if av.dims() == bv.dims() {
        (av.dims().to_vec(), false, false)
    } else if bv.rank() == 0 {
        (av.dims().to_vec(), false, true)
    } else if av.rank() == 0 {
        (bv.dims().to_vec(), true, false)
    } else {
        return Err(dim_err!(
            "{}: operand dims {:?} and {:?} are not broadcastable",
            kind.name(),
            av.dims(),
            bv.dims()
        ));
    };
    let n: usize = out_dims.iter().product();
    let data: Vec<T> = (0..n)
        .map(|i| kind.apply(pick(&av, a0, i), pick(&bv, b0, i)))
        .collect();
    let value = Tensor::from_vec(&out_dims, data)?;

    let backward: super::BackwardFn<T> = Box::new(move |g, needs| {
        let ga = needs[0].then(|| {
            let local = match kind {
                Binary::Add | Binary::Sub => g.clone(),
                Binary::Mul => Tensor {
                    dims: g.dims.clone(),
                    data: (0..g.numel()).map(|i| g.data[i] * pick(&bv, b0, i)).collect(),
                },
            };
            unbroadcast(local, a0)
        });
        let gb = needs[1].then(|| {
            let local = match kind {
                Binary::Add => g.clone(),
                Binary::Sub => g.map(|v| -v),
                Binary::Mul => Tensor {
                    dims: g.dims.clone(),
                    data: (0..g.numel()).map(|i| g.data[i] * pick(&av, a0, i)).collect(),
                },
            };
            unbroadcast(local, b0)
        });
        vec![ga, gb]
    });
    a.tape().record(kind.name(), &[a, b], value, backward)
}

/// For every input flat index, the flat index of the output element it
/// reduces into.
fn reduce_map(dims: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_dims: Vec<usize> = dims
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_dims);
    // Stride each input axis contributes to the output index (0 if reduced).
    let mut contrib = vec![0; dims.len()];
    let mut k = 0;
    for (i, c) in contrib.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *c = out_strides[k];
            k += 1;
        }
    }
    let numel: usize = dims.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0; dims.len()];
    let mut out = 0;
    for _ in 0..numel {
        map.push(out);
        for ax in (0..dims.len()).rev() {
            idx[ax] += 1;
            out += contrib[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            out -= contrib[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
    (out_dims, map)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Binary::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Binary::Mul, self, other)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let value = self.value().map(|v| v * c);
        self.tape().record(
            "scale",
            &[self],
            value,
            Box::new(move |g, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    /// Matrix product of a `m x k` and a `k x n` operand.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (&[m, k], &[k2, n]) = (a.dims(), b.dims()) else {
            return Err(dim_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.dims(),
                b.dims()
            ));
        };
        if k != k2 {
            return Err(dim_err!("matmul inner dims differ: {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, T::zero());
        let value = Tensor::from_vec(&[m, n], out)?;
        self.tape().record(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, b.data(), true, &mut d, T::zero());
                    Tensor { dims: vec![m, k], data: d }
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g.data(), false, &mut d, T::zero());
                    Tensor { dims: vec![k, n], data: d }
                });
                vec![ga, gb]
            }),
        )
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().record(
            "relu",
            &[self],
            value,
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(Tensor { dims: g.dims.clone(), data })]
            }),
        )
    }

    /// Reduction over `axes`, which are removed from the output dims.
    /// Max routes its gradient to the first maximal element in flat order.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= rank {
                return Err(dim_err!("reduce axis {ax} out of range for rank {rank}"));
            }
            if axes[..i].contains(&ax) {
                return Err(dim_err!("reduce axis {ax} listed twice"));
            }
        }
        let (out_dims, map) = reduce_map(x.dims(), axes);
        let out_n: usize = out_dims.iter().product();
        let count = x.numel() / out_n;
        let map = Rc::new(map);
        let (value, argmax) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![T::zero(); out_n];
                for (&o, &v) in map.iter().zip(x.data()) {
                    acc[o] = acc[o] + v;
                }
                if kind == ReduceKind::Mean {
                    let c = T::from_usize(count).expect("count fits");
                    acc.iter_mut().for_each(|v| *v = *v / c);
                }
                (acc, Vec::new())
            }
            ReduceKind::Max => {
                let mut best: Vec<Option<usize>> = vec![None; out_n];
                for (i, (&o, &v)) in map.iter().zip(x.data()).enumerate() {
                    match best[o] {
                        Some(j) if x.data()[j] >= v => {}
                        _ => best[o] = Some(i),
                    }
                }
                let arg: Vec<usize> = best.into_iter().map(|b| b.expect("nonempty")).collect();
                (arg.iter().map(|&i| x.data()[i]).collect(), arg)
            }
        };
        let value = Tensor {
            dims: out_dims,
            data: value,
        };
        let in_dims = x.dims().to_vec();
        let name = match kind {
            ReduceKind::Sum => "reduce_sum",
            ReduceKind::Mean => "reduce_mean",
            ReduceKind::Max => "reduce_max",
        };
        self.tape().record(
            name,
            &[self],
            value,
            Box::new(move |g, _| {
                let numel = map.len();
                let data = match kind {
                    ReduceKind::Sum => map.iter().map(|&o| g.data[o]).collect(),
                    ReduceKind::Mean => {
                        let c = T::from_usize(count).expect("count fits");
                        map.iter().map(|&o| g.data[o] / c).collect()
                    }
                    ReduceKind::Max => {
                        let mut d = vec![T::zero(); numel];
                        for (o, &i) in argmax.iter().enumerate() {
                            d[i] = g.data[o];
                        }
                        d
                    }
                };
                vec![Some(Tensor {
                    dims: in_dims.clone(),
                    data,
                })]
            }),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.dims().len()).collect();
        self.reduce(ReduceKind::Sum, &axes)
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.dims().len()).collect();
        self.reduce(ReduceKind::Mean, &axes)
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.reshape(dims)?;
        let in_dims = x.dims().to_vec();
        self.tape().record(
            "reshape",
            &[self],
            value,
            Box::new(move |g, _| {
                vec![Some(Tensor {
                    dims: in_dims.clone(),
                    data: g.data.clone(),
                })]
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims().to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(dim_err!(
                "narrow(axis {axis}, start {start}, len {len}) invalid for dims {dims:?}"
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let span = dims[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * span + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_dims = dims.clone();
        out_dims[axis] = len;
        let value = Tensor::from_vec(&out_dims, out)?;
        self.tape().record(
            "narrow",
            &[self],
            value,
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); dims.iter().product()];
                for o in 0..outer {
                    let base = o * span + start * inner;
                    let src = &g.data[o * len * inner..(o + 1) * len * inner];
                    d[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(Tensor {
                    dims: dims.clone(),
                    data: d,
                })]
            }),
        )
    }
}
