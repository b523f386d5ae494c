//! Finite-difference checks of hand-written backward passes, in `f64`.

use super::param::{ParamGroup, Parameterized};
use super::tensor::Tensor;
use crate::error::Result;

/// Central differences of a scalar function.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let hi = f(&p);
            p[i] = x[i] - h;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradErrors {
    pub input: f64,
    pub weights: f64,
}

/// Compare the analytic gradients of `sum(probe * y)` with central differences,
/// for the input and for every weight of the module.
///
/// `forward` maps the input to the output; `backward` runs a forward pass, then
/// back-propagates `dy` (accumulating weight gradients) and returns the input gradient.
pub fn check_module<M: Parameterized<f64> + Clone>(
    module: &M,
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    h: f64,
    forward: impl Fn(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
    backward: impl Fn(&mut M, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradErrors> {
    let objective = |m: &mut M, x: &Tensor<f64>| -> Result<f64> {
        let y = forward(m, x)?;
        Ok(super::real::dot(y.data(), probe.data()))
    };

    let mut m = module.clone();
    m.zero_grad();
    let dx = backward(&mut m, x, probe)?;
    let mut analytic_w = Vec::new();
    m.visit_params(ParamGroup::Weights, &mut |p| analytic_w.extend_from_slice(&p.grad));

    let mut err = None;
    let numeric_x = central_difference(
        |v| {
            let xt = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
            objective(&mut module.clone(), &xt).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        },
        x.data(),
        h,
    );

    let w0 = module.clone().snapshot(ParamGroup::Weights);
    let numeric_w = central_difference(
        |v| {
            let mut mm = module.clone();
            let mut off = 0;
            mm.visit_params(ParamGroup::Weights, &mut |p| {
                let n = p.value.len();
                p.value.copy_from_slice(&v[off..off + n]);
                off += n;
            });
            objective(&mut mm, x).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        },
        &w0,
        h,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(GradErrors {
        input: relative_error(dx.data(), &numeric_x),
        weights: relative_error(&analytic_w, &numeric_w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-4);
        assert!(relative_error(&g, &[4.0, 3.0]) < 1e-10);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
