use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{param_names, ModelParams};

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment buffers, allocated only for trainable tensors.
#[derive(Clone, Debug)]
pub struct OptState {
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams, mask: &[bool]) -> Self {
        let alloc = || {
            params
                .tensors()
                .iter()
                .zip(mask)
                .map(|(t, &m)| m.then(|| vec![0.0; t.len()]))
                .collect::<Vec<_>>()
        };
        Self {
            first: alloc(),
            second: alloc(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.first[index].is_some()
    }
}

/// Decoupled-weight-decay Adam update of every trainable tensor.
///
/// A tensor without a gradient is treated as having a zero gradient. Any
/// non-finite gradient aborts the step before anything is modified.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    opt: &mut OptState,
    hp: &AdamW,
) -> Result<()> {
    let names = param_names(params.config());
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !opt.is_trainable(i) {
            return Err(Error::InvalidArgument {
                op: "adamw_step",
                reason: format!("gradient supplied for frozen parameter {}", names[i]),
            });
        }
        if g.shape() != params.get(i).shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: g.shape().to_vec(),
                rhs: params.get(i).shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: names[i].clone(),
            });
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
        let (Some(m), Some(v)) = (opt.first[i].as_mut(), opt.second[i].as_mut()) else {
            continue;
        };
        let g = grads.get(i).and_then(|g| g.as_ref());
        for (k, w) in theta.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *w);
        }
    }
    Ok(())
}
