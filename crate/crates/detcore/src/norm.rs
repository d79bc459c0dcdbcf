//! Batch normalization (with eval and frozen variants) and group
//! normalization, forward and backward, on small dense tensors.
//!
//! Batch norm operates on `[n, c]` tensors (rows are samples, columns are
//! channels); group norm on `[n, c, s]` tensors where `s` is the spatial
//! extent. Forward passes return a context caching the normalized values
//! and inverse standard deviations that the matching backward pass needs.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("expected a rank-{expected} input, got shape {got:?}")]
    BadRank { expected: usize, got: Vec<usize> },
    #[error("{channels} channels are not divisible into {groups} groups")]
    NotDivisible { channels: usize, groups: usize },
    #[error("gradient shape {got:?} does not match forward shape {expected:?}")]
    GradShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Batch-norm state: running statistics, affine parameters, and the flags
/// that select the statistics source and gradient behavior.
///
/// Batch statistics are used only when the forward call is in training mode
/// and `eval` is false; in every other combination the running statistics
/// are used and left untouched. `requires_grad` gates the affine-parameter
/// gradients. A frozen layer is simply `eval = true, requires_grad = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub eval: bool,
    pub requires_grad: bool,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            eval: false,
            requires_grad: true,
        }
    }

    pub fn frozen(channels: usize) -> Self {
        Self {
            eval: true,
            requires_grad: false,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Cached forward intermediates for [`bn_backward`].
#[derive(Debug, Clone)]
pub struct BnContext {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    batch_mode: bool,
}

/// Gradients from a normalization backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub x: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Batch-norm forward on an `[n, c]` tensor.
///
/// In batch mode the running statistics are updated in place with momentum
/// `m`: `running = (1 - m) * running + m * stat`, where the variance
/// statistic is the unbiased one when `n > 1`. Normalization itself always
/// uses the biased variance.
pub fn bn_forward(
    x: &Tensor,
    state: &mut NormState,
    training: bool,
) -> Result<(Tensor, BnContext), NormError> {
    if x.shape.len() != 2 {
        return Err(NormError::BadRank {
            expected: 2,
            got: x.shape.clone(),
        });
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    if c != state.channels() {
        return Err(NormError::ChannelMismatch {
            expected: state.channels(),
            got: c,
        });
    }

    let batch_mode = training && !state.eval;
    let (mean, var) = if batch_mode {
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += x.data[i * c + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                let d = x.data[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let m = state.momentum;
        for j in 0..c {
            let var_stat = if n > 1 {
                var[j] * n as f64 / (n as f64 - 1.0)
            } else {
                var[j]
            };
            state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
            state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var_stat;
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; n * c];
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..n {
        for j in 0..c {
            let h = (x.data[i * c + j] - mean[j]) * inv_std[j];
            x_hat[i * c + j] = h;
            out.data[i * c + j] = state.gamma[j] * h + state.beta[j];
        }
    }
    let ctx = BnContext {
        shape: x.shape.clone(),
        x_hat,
        inv_std,
        gamma: state.gamma.clone(),
        batch_mode,
    };
    Ok((out, ctx))
}

/// Batch-norm backward.
///
/// In batch mode the gradient accounts for the dependence of the batch
/// statistics on the input; with running statistics the map is a fixed
/// affine transform per channel. Affine-parameter gradients are zero unless
/// `state.requires_grad` is set.
pub fn bn_backward(
    grad_out: &Tensor,
    ctx: &BnContext,
    state: &NormState,
) -> Result<NormGrads, NormError> {
    if grad_out.shape != ctx.shape {
        return Err(NormError::GradShapeMismatch {
            expected: ctx.shape.clone(),
            got: grad_out.shape.clone(),
        });
    }
    let (n, c) = (ctx.shape[0], ctx.shape[1]);

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            let g = grad_out.data[i * c + j];
            grad_gamma[j] += g * ctx.x_hat[i * c + j];
            grad_beta[j] += g;
        }
    }

    let mut grad_x = Tensor::zeros(&ctx.shape);
    if ctx.batch_mode {
        for j in 0..c {
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for i in 0..n {
                let dh = grad_out.data[i * c + j] * ctx.gamma[j];
                sum_dh += dh;
                sum_dh_h += dh * ctx.x_hat[i * c + j];
            }
            let inv_n = 1.0 / n as f64;
            for i in 0..n {
                let dh = grad_out.data[i * c + j] * ctx.gamma[j];
                grad_x.data[i * c + j] = ctx.inv_std[j]
                    * (dh - sum_dh * inv_n - ctx.x_hat[i * c + j] * sum_dh_h * inv_n);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..c {
                grad_x.data[i * c + j] =
                    grad_out.data[i * c + j] * ctx.gamma[j] * ctx.inv_std[j];
            }
        }
    }

    if !state.requires_grad {
        grad_gamma.iter_mut().for_each(|g| *g = 0.0);
        grad_beta.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(NormGrads {
        x: grad_x,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

/// Group-norm parameters: channel groups share statistics, affine
/// parameters stay per-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormSpec {
    pub num_groups: usize,
    pub eps: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GroupNormSpec {
    pub fn new(num_groups: usize, channels: usize) -> Self {
        Self {
            num_groups,
            eps: 1e-5,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Cached forward intermediates for [`gn_backward`].
#[derive(Debug, Clone)]
pub struct GnContext {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    num_groups: usize,
}

/// Group-norm forward on an `[n, c, s]` tensor.
///
/// Statistics are computed independently per sample and group over the
/// group's `(c / num_groups) * s` elements, with biased variance.
pub fn gn_forward(x: &Tensor, spec: &GroupNormSpec) -> Result<(Tensor, GnContext), NormError> {
    if x.shape.len() != 3 {
        return Err(NormError::BadRank {
            expected: 3,
            got: x.shape.clone(),
        });
    }
    let (n, c, s) = (x.shape[0], x.shape[1], x.shape[2]);
    if c != spec.channels() {
        return Err(NormError::ChannelMismatch {
            expected: spec.channels(),
            got: c,
        });
    }
    if spec.num_groups == 0 || c % spec.num_groups != 0 {
        return Err(NormError::NotDivisible {
            channels: c,
            groups: spec.num_groups,
        });
    }
    let cpg = c / spec.num_groups;
    let m = (cpg * s) as f64;

    let mut x_hat = vec![0.0; n * c * s];
    let mut inv_std = vec![0.0; n * spec.num_groups];
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..n {
        for g in 0..spec.num_groups {
            let mut mean = 0.0;
            for cc in g * cpg..(g + 1) * cpg {
                for k in 0..s {
                    mean += x.data[(i * c + cc) * s + k];
                }
            }
            mean /= m;
            let mut var = 0.0;
            for cc in g * cpg..(g + 1) * cpg {
                for k in 0..s {
                    let d = x.data[(i * c + cc) * s + k] - mean;
                    var += d * d;
                }
            }
            var /= m;
            let istd = 1.0 / (var + spec.eps).sqrt();
            inv_std[i * spec.num_groups + g] = istd;
            for cc in g * cpg..(g + 1) * cpg {
                for k in 0..s {
                    let idx = (i * c + cc) * s + k;
                    let h = (x.data[idx] - mean) * istd;
                    x_hat[idx] = h;
                    out.data[idx] = spec.gamma[cc] * h + spec.beta[cc];
                }
            }
        }
    }
    let ctx = GnContext {
        shape: x.shape.clone(),
        x_hat,
        inv_std,
        gamma: spec.gamma.clone(),
        num_groups: spec.num_groups,
    };
    Ok((out, ctx))
}

/// Group-norm backward. Affine-parameter gradients are always produced.
pub fn gn_backward(grad_out: &Tensor, ctx: &GnContext) -> Result<NormGrads, NormError> {
    if grad_out.shape != ctx.shape {
        return Err(NormError::GradShapeMismatch {
            expected: ctx.shape.clone(),
            got: grad_out.shape.clone(),
        });
    }
    let (n, c, s) = (ctx.shape[0], ctx.shape[1], ctx.shape[2]);
    let cpg = c / ctx.num_groups;
    let m = (cpg * s) as f64;

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for i in 0..n {
        for cc in 0..c {
            for k in 0..s {
                let idx = (i * c + cc) * s + k;
                grad_gamma[cc] += grad_out.data[idx] * ctx.x_hat[idx];
                grad_beta[cc] += grad_out.data[idx];
            }
        }
    }

    let mut grad_x = Tensor::zeros(&ctx.shape);
    for i in 0..n {
        for g in 0..ctx.num_groups {
            let istd = ctx.inv_std[i * ctx.num_groups + g];
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for cc in g * cpg..(g + 1) * cpg {
                for k in 0..s {
                    let idx = (i * c + cc) * s + k;
                    let dh = grad_out.data[idx] * ctx.gamma[cc];
                    sum_dh += dh;
                    sum_dh_h += dh * ctx.x_hat[idx];
                }
            }
            for cc in g * cpg..(g + 1) * cpg {
                for k in 0..s {
                    let idx = (i * c + cc) * s + k;
                    let dh = grad_out.data[idx] * ctx.gamma[cc];
                    grad_x.data[idx] =
                        istd * (dh - sum_dh / m - ctx.x_hat[idx] * sum_dh_h / m);
                }
            }
        }
    }
    Ok(NormGrads {
        x: grad_x,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}
