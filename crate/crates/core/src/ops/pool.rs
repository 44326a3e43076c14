use super::{Geometry, OpError, PoolMode, PoolSpec};
use crate::tensor::{Element, Tensor};

fn geometry<T: Element>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(usize, usize, Geometry), OpError> {
    let [n, h, w, c] = input.nhwc()?;
    Ok((n, c, spec.window().resolve(h, w)?))
}

/// Visits the in-bounds taps of one window. Padded cells are skipped, so Same
/// average pooling divides by the number of real cells.
#[inline]
fn for_window(g: &Geometry, oh: usize, ow: usize, mut f: impl FnMut(usize, usize)) {
    for kh in 0..g.window.kernel_h {
        let Some(ih) = g.input_row(oh, kh) else { continue };
        for kw in 0..g.window.kernel_w {
            let Some(iw) = g.input_col(ow, kw) else { continue };
            f(ih, iw);
        }
    }
}

/// Max or average pooling over NHWC input.
pub fn pool2d<T: Element>(input: &Tensor<T>, mode: PoolMode, spec: &PoolSpec) -> Result<Tensor<T>, OpError> {
    let (n, c, g) = geometry(input, spec)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * g.out_h * g.out_w * c);
    let mut acc = vec![T::zero(); c];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let init = match mode {
                    PoolMode::Max => T::neg_infinity(),
                    PoolMode::Avg => T::zero(),
                };
                acc.iter_mut().for_each(|a| *a = init);
                let mut count = 0usize;
                for_window(&g, oh, ow, |ih, iw| {
                    count += 1;
                    let px = &x[((b * g.in_h + ih) * g.in_w + iw) * c..][..c];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a = match mode {
                            PoolMode::Max => {
                                if v > *a {
                                    v
                                } else {
                                    *a
                                }
                            }
                            PoolMode::Avg => *a + v,
                        };
                    }
                });
                if mode == PoolMode::Avg {
                    let inv = T::one() / T::from_f64_lossy(count as f64);
                    acc.iter_mut().for_each(|a| *a = *a * inv);
                }
                out.extend_from_slice(&acc);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, g.out_h, g.out_w, c], out))
}

/// Gradient of [`pool2d`] with respect to its input. Max pooling routes each
/// output gradient to the first maximal tap in row-major window order.
pub fn pool2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    mode: PoolMode,
    spec: &PoolSpec,
) -> Result<Tensor<T>, OpError> {
    let (n, c, g) = geometry(saved_input, spec)?;
    let expected = [n, g.out_h, g.out_w, c];
    if grad_out.dims() != expected {
        return Err(crate::tensor::TensorError::ShapeMismatch(grad_out.dims().to_vec(), expected.to_vec()).into());
    }
    let x = saved_input.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut best = vec![T::zero(); c];
    let mut best_at = vec![0usize; c];
    let mut taps = Vec::with_capacity(g.window.kernel_h * g.window.kernel_w);
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let go = &gy[((b * g.out_h + oh) * g.out_w + ow) * c..][..c];
                taps.clear();
                for_window(&g, oh, ow, |ih, iw| taps.push(((b * g.in_h + ih) * g.in_w + iw) * c));
                match mode {
                    PoolMode::Avg => {
                        let inv = T::one() / T::from_f64_lossy(taps.len() as f64);
                        for &base in &taps {
                            for ch in 0..c {
                                gx[base + ch] = gx[base + ch] + go[ch] * inv;
                            }
                        }
                    }
                    PoolMode::Max => {
                        best.iter_mut().for_each(|v| *v = T::neg_infinity());
                        for &base in &taps {
                            for ch in 0..c {
                                if x[base + ch] > best[ch] {
                                    best[ch] = x[base + ch];
                                    best_at[ch] = base + ch;
                                }
                            }
                        }
                        for ch in 0..c {
                            gx[best_at[ch]] = gx[best_at[ch]] + go[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(saved_input.dims().to_vec(), gx))
}
