use super::{NdArr, Scalar};

/// Per-parameter Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: NdArr<T>,
    pub v: NdArr<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: NdArr::zeros(shape), v: NdArr::zeros(shape), step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Scalar>(param: &mut NdArr<T>, grad: &NdArr<T>, state: &mut AdamState<T>, lr: f64) {
    assert_eq!(param.shape, grad.shape, "param/grad shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..param.data.len() {
        let g = grad.data[i].as_f64();
        let m = ADAM_BETA1 * state.m.data[i].as_f64() + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * state.v.data[i].as_f64() + (1.0 - ADAM_BETA2) * g * g;
        state.m.data[i] = T::from_f64(m);
        state.v.data[i] = T::from_f64(v);
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let p = param.data[i].as_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        param.data[i] = T::from_f64(p);
    }
}
