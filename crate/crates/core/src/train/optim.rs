use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mean absolute error. The subgradient at an exact tie is 0.
pub fn l1_loss<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let (p, t) = (pred.value(), target.value());
    if p.dims() != t.dims() || p.rank() != 1 {
        return Err(Error::Contract(format!(
            "l1_loss needs equal rank-1 inputs, got {:?} and {:?}",
            p.dims(),
            t.dims()
        )));
    }
    let n = p.numel();
    let inv_n = T::one() / T::from_f64_lossy(n as f64);
    let loss = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() * inv_n;
    let (pc, tc) = (p.clone(), t.clone());
    pred.tape().record(
        "l1_loss",
        &[pred, target],
        Tensor::scalar(loss),
        Box::new(move |g, _| {
            let s = g.item() * inv_n;
            let sign: Vec<T> = pc
                .data()
                .iter()
                .zip(tc.data())
                .map(|(&a, &b)| {
                    if a > b {
                        s
                    } else if a < b {
                        -s
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let dp = Tensor::from_vec(pc.dims(), sign.clone()).expect("same dims");
            let dt = Tensor::from_vec(pc.dims(), sign.into_iter().map(|v| -v).collect()).expect("same dims");
            vec![Some(dp), Some(dt)]
        }),
    )
}

/// Plain-value L1 distance, used where no gradient is needed.
pub fn l1_value(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before any
/// state changes, so a failed step leaves everything untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
        if g.dims() != p.dims() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has dims {:?}, parameter {:?}",
                g.dims(),
                p.dims()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} for {name} at flat index {i}",
                g.data()[i]
            )));
        }
        if state.m.get(name).map(Tensor::dims) != Some(p.dims()) {
            return Err(Error::Contract(format!("optimizer state does not match parameter {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(state.beta1), c(state.beta2));
    let (one_b1, one_b2) = (c(1.0 - state.beta1), c(1.0 - state.beta2));
    let bc1 = c(1.0 - state.beta1.powi(t));
    let bc2 = c(1.0 - state.beta2.powi(t));
    let (lr_t, eps) = (c(lr), c(state.eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + one_b1 * gi;
        }
        let v = state.v.get_mut(name).expect("checked above");
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + one_b2 * gi * gi;
        }
        if lr == 0.0 {
            continue;
        }
        let (m, v) = (state.m.get(name).expect("present"), state.v.get(name).expect("present"));
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi = *pi - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate halved every `period` epochs.
pub fn lr_at(epoch: usize, base_lr: f64, period: usize) -> f64 {
    let halvings = epoch / period.max(1);
    base_lr / 2f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Tape-free convenience for tests and tools: `l1_loss` on plain tensors
/// with the gradient w.r.t. `pred`.
pub fn l1_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let tape = Tape::new();
    let p = tape.param(pred.clone())?;
    let t = tape.constant(target.clone())?;
    let loss = l1_loss(p, t)?;
    loss.backward()?;
    Ok((loss.value().item(), p.grad().expect("param reached")))
}
