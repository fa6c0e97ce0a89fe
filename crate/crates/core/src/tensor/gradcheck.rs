//! Central-difference gradient verification.

use super::{lit, Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Perturbation applied to each checked coordinate.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero compare in absolute terms.
    pub floor: f64,
    /// Check only the `n` coordinates with the largest analytic gradient.
    pub max_coords: Option<usize>,
}

impl CheckOptions {
    pub fn f64() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            max_coords: None,
        }
    }

    pub fn f32() -> Self {
        Self {
            eps: 1e-2,
            floor: 1e-3,
            max_coords: None,
        }
    }

    pub fn for_element<T: Element>() -> Self {
        if std::mem::size_of::<T>() >= 8 {
            Self::f64()
        } else {
            Self::f32()
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Indices ordered by decreasing `|g|`, truncated to `max`.
pub fn largest_coords(g: &[f64], max: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    if let Some(max) = max {
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// Central differences of a scalar function at the listed coordinates of
/// `x`. The step is measured on the perturbed values actually representable
/// in `T`.
pub fn central_differences<T: Element>(
    mut eval: impl FnMut(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.detached();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x.data()[i];
        let up = orig + lit::<T>(eps);
        let down = orig - lit::<T>(eps);
        probe.data_mut()[i] = up;
        let f_up = eval(&probe)?;
        probe.data_mut()[i] = down;
        let f_down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((f_up - f_down) / (up - down).as_f64());
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns the largest relative error.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let opts = CheckOptions {
        eps,
        ..CheckOptions::for_element::<T>()
    };
    finite_diff_check_with(f, x, &opts)
}

pub fn finite_diff_check_with<T, F>(f: F, x: &Tensor<T>, opts: &CheckOptions) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let leaf = x.detached().with_requires_grad(true);
    let mut g = Graph::new();
    let v = g.leaf(&leaf);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = match grads.get(v) {
        Some(a) => a.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    let coords = largest_coords(&analytic, opts.max_coords);
    let numeric = central_differences(
        |probe| {
            let mut g = Graph::new();
            let v = g.constant(probe.clone());
            let out = f(&mut g, v)?;
            Ok(g.value(out).item()?.as_f64())
        },
        x,
        &coords,
        opts.eps,
    )?;
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    Ok(max_relative_error(&picked, &numeric, opts.floor))
}
