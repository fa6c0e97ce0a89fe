use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> PartialEq for AdamState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.m == other.m && self.v == other.v
    }
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn for_params<'a>(params: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .map(|p| Tensor::zeros(p.shape().to_vec()).expect("parameter shape is valid"))
            .collect();
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update. A parameter without an accumulated
/// gradient is treated as having a zero gradient.
pub fn adam_update<'a, T: Element>(
    params: impl Iterator<Item = &'a mut Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    let mut count = 0;
    for (i, p) in params.enumerate() {
        let (Some(m), Some(v)) = (state.m.get_mut(i), state.v.get_mut(i)) else {
            return Err(Error::invalid(format!("optimizer state has {} slots, got more parameters", state.m.len())));
        };
        if m.shape() != p.shape() {
            return Err(Error::shape("adam_update", p.shape(), m.shape()));
        }
        count += 1;
        let g = p
            .grad()
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); p.numel()]);
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(md).zip(vd) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if count != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer state has {} slots, got {count} parameters",
            state.m.len()
        )));
    }
    Ok(())
}
