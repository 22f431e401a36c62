//! Central finite-difference gradient checks over every coordinate of a parameter store.

use candle_core::{DType, Tensor};
use figgen_core::nn::ParamStore;
use figgen_core::Result;

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;

#[derive(Debug)]
pub struct GradCheck {
    pub coordinates: usize,
    pub within_tolerance: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        self.within_tolerance as f64 / self.coordinates.max(1) as f64
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    // both derivatives negligible: treat as agreement
    if scale < 1e-7 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

fn value(loss: &Tensor) -> Result<f64> {
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares `d loss / d theta` from autograd with `(L(theta + h) - L(theta - h)) / 2h` for every
/// scalar parameter in `store`. Parameters are restored afterwards.
pub fn check(store: &ParamStore, loss: &dyn Fn() -> Result<Tensor>) -> Result<GradCheck> {
    let grads = store.collect_grads(&loss()?.backward()?);
    let mut out = GradCheck {
        coordinates: 0,
        within_tolerance: 0,
        worst: 0.0,
    };
    for (name, var) in store.named_vars() {
        let original = var.as_tensor().detach().copy()?;
        let shape = original.dims().to_vec();
        let base: Vec<f64> = original.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(&name) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        for i in 0..base.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), original.device())?)?;
                value(&loss()?)
            };
            let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            let err = relative_error(analytic[i], numeric);
            out.coordinates += 1;
            if err <= REL_TOL {
                out.within_tolerance += 1;
            }
            out.worst = out.worst.max(err);
        }
        var.set(&original)?;
    }
    Ok(out)
}
