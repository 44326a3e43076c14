use super::OpError;
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward<T: Element>(grad_out: &Tensor<T>, saved_output: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    Ok(grad_out.zip_map(saved_output, |g, y| if y > T::zero() { g } else { T::zero() })?)
}

/// `shortcut + alpha * residual`, elementwise.
///
/// With `alpha == 1` this is exactly `shortcut + residual`: the multiply by one
/// is exact in IEEE arithmetic.
pub fn add_scaled<T: Element>(shortcut: &Tensor<T>, residual: &Tensor<T>, alpha: T) -> Result<Tensor<T>, OpError> {
    Ok(shortcut.zip_map(residual, |s, r| s + alpha * r)?)
}

/// Returns `(grad_shortcut, grad_residual)`.
pub fn add_scaled_backward<T: Element>(grad_out: &Tensor<T>, alpha: T) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.map(|g| g * alpha))
}

/// Channel-wise concatenation in list order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, OpError> {
    let first = inputs.first().ok_or(OpError::NonPositive("concat input count"))?;
    let [n, h, w, _] = first.nhwc()?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let [tn, th, tw, tc] = t.nhwc()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(OpError::GridMismatch(first.dims().to_vec(), t.dims().to_vec()));
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for px in 0..n * h * w {
        for (t, &c) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[px * c..(px + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![n, h, w, total], out))
}

/// Splits a concatenated gradient back into per-input pieces of the given widths.
pub fn concat_channels_backward<T: Element>(grad_out: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>, OpError> {
    let [n, h, w, c] = grad_out.nhwc()?;
    let total: usize = widths.iter().sum();
    if total != c {
        return Err(OpError::ChannelMismatch { expected: total, got: c });
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(n * h * w * wd)).collect();
    for px in grad_out.data().chunks_exact(c) {
        let mut off = 0;
        for (part, &wd) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + wd]);
            off += wd;
        }
    }
    Ok(parts
        .into_iter()
        .zip(widths)
        .map(|(data, &wd)| Tensor::from_parts(vec![n, h, w, wd], data))
        .collect())
}
