use candle_core::Tensor;

use super::NoiseSchedule;
use crate::{Error, Result};

/// Uniformly strided, strictly decreasing timesteps `T-1, T-1-k, ...` with `k = T / steps`.
pub fn timestep_ladder(num_timesteps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > num_timesteps {
        return Err(Error::Config(format!(
            "sampler steps must lie in [1, {num_timesteps}], got {num_steps}"
        )));
    }
    let stride = num_timesteps / num_steps;
    Ok((0..num_steps)
        .map(|i| num_timesteps - 1 - i * stride)
        .collect())
}

/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_x0(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// One DDIM update from `t` to `t_prev` (`None` is the final step, where alpha_bar = 1).
///
/// With `eta = 0` the update is deterministic and `noise` is ignored; otherwise `noise` must be a
/// standard-normal tensor shaped like `x_t`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::Invalid(format!(
                "ddim step must move backwards, got {t} -> {p}"
            )));
        }
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let x0 = predict_x0(schedule, x_t, eps, t)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir = (eps * (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt())?;
    let mut out = ((x0 * ab_prev.sqrt())? + dir)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::Invalid("eta > 0 requires noise".into()))?;
        out = (out + (z * sigma)?)?;
    }
    Ok(out)
}

/// `uncond + scale * (cond - uncond)`. Scales 0 and 1 return the matching branch unchanged.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    if uncond.dims() != cond.dims() {
        return Err(Error::Shape("guidance branches differ in shape".into()));
    }
    if !(scale >= 0.0) {
        return Err(Error::Invalid(format!(
            "guidance scale must be >= 0, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok((uncond + ((cond - uncond)? * scale)?)?)
}
