use super::{Mode, OpError};
use crate::tensor::{Element, Tensor, TensorError};

/// Per-channel batch normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    /// Weight of the old running statistic in the moving average.
    pub momentum: f64,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn identity(channels: usize, epsilon: f64, momentum: f64) -> Result<Self, TensorError> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            epsilon,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<(), OpError> {
        for v in [&self.gamma, &self.beta, &self.running_mean, &self.running_var] {
            if v.dims() != [channels] {
                return Err(OpError::ChannelMismatch {
                    expected: v.len(),
                    got: channels,
                });
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Invalid("negative running variance".into()).into());
        }
        Ok(())
    }
}

/// What the backward pass and the running-stat update need from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Element> {
    pub mode: Mode,
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Running statistics after this batch (Train mode only).
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` per channel of an NHWC tensor.
///
/// Train mode uses the biased batch variance over N, H, W and returns the
/// moved running statistics in the cache; Infer mode reads the running ones.
pub fn batchnorm_forward<T: Element>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>), OpError> {
    let [_, _, _, c] = input.nhwc()?;
    params.check(c)?;
    let x = input.data();
    let rows = x.len() / c;
    let eps = T::from_f64_lossy(params.epsilon);

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m = *m + v;
                }
            }
            let inv_rows = T::one() / T::from_f64_lossy(rows as f64);
            mean.iter_mut().for_each(|m| *m = *m * inv_rows);
            let mut var = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s * inv_rows);
            (mean, var)
        }
        Mode::Infer => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    let mut x_hat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (px[ch] - mean[ch]) * inv_std[ch];
            x_hat.push(xh);
            out.push(gamma[ch] * xh + beta[ch]);
        }
    }

    let (running_mean, running_var) = match mode {
        Mode::Train => {
            let mom = T::from_f64_lossy(params.momentum);
            let keep = T::one() - mom;
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_parts(
                    vec![c],
                    old.data().iter().zip(new).map(|(&o, &n)| mom * o + keep * n).collect(),
                )
            };
            (
                Some(blend(&params.running_mean, &mean)),
                Some(blend(&params.running_var, &var)),
            )
        }
        Mode::Infer => (None, None),
    };

    Ok((
        Tensor::from_parts(input.dims().to_vec(), out),
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            running_mean,
            running_var,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), OpError> {
    let [_, _, _, c] = grad_out.nhwc()?;
    if gamma.dims() != [c] || cache.inv_std.len() != c || cache.x_hat.len() != grad_out.len() {
        return Err(OpError::ChannelMismatch {
            expected: gamma.len(),
            got: c,
        });
    }
    let gy = grad_out.data();
    let rows = gy.len() / c;
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for (py, px) in gy.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
        for ch in 0..c {
            g_beta[ch] = g_beta[ch] + py[ch];
            g_gamma[ch] = g_gamma[ch] + py[ch] * px[ch];
        }
    }
    let g = gamma.data();
    let mut gx = Vec::with_capacity(gy.len());
    match cache.mode {
        Mode::Infer => {
            for py in gy.chunks_exact(c) {
                for ch in 0..c {
                    gx.push(py[ch] * g[ch] * cache.inv_std[ch]);
                }
            }
        }
        Mode::Train => {
            let m = T::from_f64_lossy(rows as f64);
            for (py, px) in gy.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
                for ch in 0..c {
                    let scale = g[ch] * cache.inv_std[ch] / m;
                    gx.push(scale * (m * py[ch] - g_beta[ch] - px[ch] * g_gamma[ch]));
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.dims().to_vec(), gx),
        Tensor::from_parts(vec![c], g_gamma),
        Tensor::from_parts(vec![c], g_beta),
    ))
}
