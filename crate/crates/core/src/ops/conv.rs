use rayon::prelude::*;

use super::{Activation, ConvSpec, Geometry, OpError};
use crate::tensor::{Element, Tensor};

struct ConvShape {
    n: usize,
    cin: usize,
    cout: usize,
    geo: Geometry,
}

impl ConvShape {
    /// Rows of the lowered matrix: one per output pixel.
    fn rows(&self) -> usize {
        self.n * self.geo.out_h * self.geo.out_w
    }

    /// Columns of the lowered matrix: one per (kh, kw, cin) tap.
    fn taps(&self) -> usize {
        self.geo.window.kernel_h * self.geo.window.kernel_w * self.cin
    }

    fn is_pointwise(&self) -> bool {
        let w = &self.geo.window;
        w.kernel_h == 1 && w.kernel_w == 1 && w.stride_h == 1 && w.stride_w == 1
    }
}

fn check<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvShape, OpError> {
    let [n, h, w, cin] = input.nhwc()?;
    if spec.out_channels == 0 {
        return Err(OpError::NonPositive("out_channels"));
    }
    let expected = [spec.kernel_h, spec.kernel_w, cin, spec.out_channels];
    if weights.dims() != expected {
        if weights.rank() == 4 && weights.dims()[2] != cin {
            return Err(OpError::ChannelMismatch {
                expected: weights.dims()[2],
                got: cin,
            });
        }
        return Err(crate::tensor::TensorError::ShapeMismatch(
            weights.dims().to_vec(),
            expected.to_vec(),
        )
        .into());
    }
    let geo = spec.window().resolve(h, w)?;
    Ok(ConvShape {
        n,
        cin,
        cout: spec.out_channels,
        geo,
    })
}

fn check_bias<T: Element>(bias: &Tensor<T>, cout: usize) -> Result<(), OpError> {
    if bias.dims() != [cout] {
        return Err(crate::tensor::TensorError::ShapeMismatch(bias.dims().to_vec(), vec![cout]).into());
    }
    Ok(())
}

/// Lowers the input into a `rows x taps` matrix (one row per output pixel).
fn im2col<T: Element>(input: &[T], s: &ConvShape) -> Vec<T> {
    let g = &s.geo;
    let (kh_n, kw_n, cin) = (g.window.kernel_h, g.window.kernel_w, s.cin);
    let taps = s.taps();
    let per_image_rows = g.out_h * g.out_w;
    let image_len = g.in_h * g.in_w * cin;
    let mut col = vec![T::zero(); s.rows() * taps];
    col.par_chunks_mut(per_image_rows * taps)
        .enumerate()
        .for_each(|(n, block)| {
            let img = &input[n * image_len..(n + 1) * image_len];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let row = &mut block[(oh * g.out_w + ow) * taps..][..taps];
                    for kh in 0..kh_n {
                        let Some(ih) = g.input_row(oh, kh) else { continue };
                        for kw in 0..kw_n {
                            let Some(iw) = g.input_col(ow, kw) else { continue };
                            let src = &img[(ih * g.in_w + iw) * cin..][..cin];
                            row[(kh * kw_n + kw) * cin..][..cin].copy_from_slice(src);
                        }
                    }
                }
            }
        });
    col
}

/// Scatter-adds a `rows x taps` gradient matrix back onto the input grid.
fn col2im<T: Element>(col: &[T], s: &ConvShape) -> Vec<T> {
    let g = &s.geo;
    let (kh_n, kw_n, cin) = (g.window.kernel_h, g.window.kernel_w, s.cin);
    let taps = s.taps();
    let per_image_rows = g.out_h * g.out_w;
    let image_len = g.in_h * g.in_w * cin;
    let mut out = vec![T::zero(); s.n * image_len];
    out.par_chunks_mut(image_len)
        .enumerate()
        .for_each(|(n, img)| {
            let block = &col[n * per_image_rows * taps..][..per_image_rows * taps];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let row = &block[(oh * g.out_w + ow) * taps..][..taps];
                    for kh in 0..kh_n {
                        let Some(ih) = g.input_row(oh, kh) else { continue };
                        for kw in 0..kw_n {
                            let Some(iw) = g.input_col(ow, kw) else { continue };
                            let dst = &mut img[(ih * g.in_w + iw) * cin..][..cin];
                            let src = &row[(kh * kw_n + kw) * cin..][..cin];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// 2-D cross-correlation over NHWC input with `[Kh, Kw, Cin, Cout]` weights,
/// plus per-channel bias and optional fused ReLU.
///
/// Lowered to a single matrix multiply (im2col). [`conv2d_forward_direct`] is
/// the loop-nest reference it is tested against.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, OpError> {
    let s = check(input, weights, spec)?;
    check_bias(bias, s.cout)?;
    let (m, k, n) = (s.rows(), s.taps(), s.cout);
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias.data());
    }
    let lowered;
    let a: &[T] = if s.is_pointwise() {
        input.data()
    } else {
        lowered = im2col(input.data(), &s);
        &lowered
    };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        weights.data(),
        (n as isize, 1),
        T::one(),
        &mut out,
        (n as isize, 1),
    );
    if spec.activation == Activation::Relu {
        for v in &mut out {
            *v = v.max(T::zero());
        }
    }
    Ok(Tensor::from_parts(
        vec![s.n, s.geo.out_h, s.geo.out_w, s.cout],
        out,
    ))
}

/// Direct loop-nest convolution with the same contract as [`conv2d_forward`].
pub fn conv2d_forward_direct<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, OpError> {
    let s = check(input, weights, spec)?;
    check_bias(bias, s.cout)?;
    let g = s.geo;
    let (x, wt, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![T::zero(); s.n * g.out_h * g.out_w * s.cout];
    for n in 0..s.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                for co in 0..s.cout {
                    let mut acc = b[co];
                    for kh in 0..spec.kernel_h {
                        let Some(ih) = g.input_row(oh, kh) else { continue };
                        for kw in 0..spec.kernel_w {
                            let Some(iw) = g.input_col(ow, kw) else { continue };
                            for ci in 0..s.cin {
                                let xv = x[((n * g.in_h + ih) * g.in_w + iw) * s.cin + ci];
                                let wv = wt[((kh * spec.kernel_w + kw) * s.cin + ci) * s.cout + co];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    if spec.activation == Activation::Relu {
                        acc = acc.max(T::zero());
                    }
                    out[((n * g.out_h + oh) * g.out_w + ow) * s.cout + co] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![s.n, g.out_h, g.out_w, s.cout], out))
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d_forward`].
///
/// `saved_output` is the forward result; it is only read when the spec fuses a
/// ReLU, to mask `grad_out` where the activation was clamped.
pub fn conv2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    saved_output: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>, OpError> {
    let s = check(saved_input, weights, spec)?;
    let out_dims = [s.n, s.geo.out_h, s.geo.out_w, s.cout];
    if grad_out.dims() != out_dims {
        return Err(crate::tensor::TensorError::ShapeMismatch(
            grad_out.dims().to_vec(),
            out_dims.to_vec(),
        )
        .into());
    }
    let masked;
    let g: &[T] = if spec.activation == Activation::Relu {
        grad_out.expect_same_dims(saved_output)?;
        masked = grad_out
            .data()
            .iter()
            .zip(saved_output.data())
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect::<Vec<_>>();
        &masked
    } else {
        grad_out.data()
    };
    let (m, k, n) = (s.rows(), s.taps(), s.cout);

    let mut grad_bias = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (acc, &v) in grad_bias.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let lowered;
    let a: &[T] = if s.is_pointwise() {
        saved_input.data()
    } else {
        lowered = im2col(saved_input.data(), &s);
        &lowered
    };
    // dW = A^T * G  (k x m) * (m x n)
    let mut grad_w = vec![T::zero(); k * n];
    T::gemm(
        k,
        m,
        n,
        T::one(),
        a,
        (1, k as isize),
        g,
        (n as isize, 1),
        T::zero(),
        &mut grad_w,
        (n as isize, 1),
    );
    // dA = G * W^T  (m x n) * (n x k)
    let mut grad_col = vec![T::zero(); m * k];
    T::gemm(
        m,
        n,
        k,
        T::one(),
        g,
        (n as isize, 1),
        weights.data(),
        (1, n as isize),
        T::zero(),
        &mut grad_col,
        (k as isize, 1),
    );
    let grad_in = if s.is_pointwise() {
        grad_col
    } else {
        col2im(&grad_col, &s)
    };
    Ok(ConvGrads {
        input: Tensor::from_parts(saved_input.dims().to_vec(), grad_in),
        weights: Tensor::from_parts(weights.dims().to_vec(), grad_w),
        bias: Tensor::from_parts(vec![n], grad_bias),
    })
}
