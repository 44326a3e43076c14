//! Classifier head: global average pooling, dropout, dense layer, softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, OpError};
use crate::tensor::{Element, Tensor, TensorError};

/// Mean over H and W. Output is `N x 1 x 1 x C`.
pub fn global_avgpool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    let [n, h, w, c] = input.nhwc()?;
    let inv = T::one() / T::from_f64_lossy((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for (b, img) in input.data().chunks_exact(h * w * c).enumerate() {
        let acc = &mut out[b * c..(b + 1) * c];
        for px in img.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a = *a + v;
            }
        }
        acc.iter_mut().for_each(|a| *a = *a * inv);
    }
    Ok(Tensor::from_parts(vec![n, 1, 1, c], out))
}

pub fn global_avgpool_backward<T: Element>(grad_out: &Tensor<T>, input_dims: &[usize]) -> Result<Tensor<T>, OpError> {
    let &[n, h, w, c] = input_dims else {
        return Err(TensorError::BadRank(input_dims.len()).into());
    };
    if grad_out.dims() != [n, 1, 1, c] {
        return Err(TensorError::ShapeMismatch(grad_out.dims().to_vec(), vec![n, 1, 1, c]).into());
    }
    let inv = T::one() / T::from_f64_lossy((h * w) as f64);
    let mut gx = Vec::with_capacity(n * h * w * c);
    for g in grad_out.data().chunks_exact(c) {
        for _ in 0..h * w {
            gx.extend(g.iter().map(|&v| v * inv));
        }
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), gx))
}

/// Survivor scale per element: `0` (dropped) or `1/keep`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Element> {
    pub scale: Vec<T>,
}

/// Inverted dropout. Train mode zeroes each unit with probability `1 - keep`
/// and scales survivors by `1/keep`; Infer mode and `keep == 1` are identity.
pub fn dropout<T: Element>(
    input: &Tensor<T>,
    keep: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>), OpError> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(OpError::BadKeepProb(keep));
    }
    if mode == Mode::Infer || keep == 1.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = T::from_f64_lossy(1.0 / keep);
    let scale: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < keep { up } else { T::zero() })
        .collect();
    let out = input.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
    Ok((
        Tensor::from_parts(input.dims().to_vec(), out),
        Some(DropoutMask { scale }),
    ))
}

pub fn dropout_backward<T: Element>(grad_out: &Tensor<T>, mask: Option<&DropoutMask<T>>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => Tensor::from_parts(
            grad_out.dims().to_vec(),
            grad_out.data().iter().zip(&m.scale).map(|(&g, &s)| g * s).collect(),
        ),
    }
}

/// Dense layer over the flattened per-sample features.
///
/// `weights` is `[in_features, out_features]`; the output is `N x 1 x 1 x out`.
pub fn fully_connected<T: Element>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    let (n, fin) = flat(input)?;
    let &[win, fout] = weights.dims() else {
        return Err(TensorError::BadRank(weights.rank()).into());
    };
    if win != fin {
        return Err(OpError::ChannelMismatch { expected: win, got: fin });
    }
    if bias.dims() != [fout] {
        return Err(TensorError::ShapeMismatch(bias.dims().to_vec(), vec![fout]).into());
    }
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        input.data(),
        (fin as isize, 1),
        weights.data(),
        (fout as isize, 1),
        T::one(),
        &mut out,
        (fout as isize, 1),
    );
    Ok(Tensor::from_parts(vec![n, 1, 1, fout], out))
}

#[derive(Debug, Clone)]
pub struct FcGrads<T: Element> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Element>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<FcGrads<T>, OpError> {
    let (n, fin) = flat(saved_input)?;
    let &[_, fout] = weights.dims() else {
        return Err(TensorError::BadRank(weights.rank()).into());
    };
    if grad_out.len() != n * fout {
        return Err(TensorError::ShapeMismatch(grad_out.dims().to_vec(), vec![n, 1, 1, fout]).into());
    }
    let g = grad_out.data();
    let mut gb = vec![T::zero(); fout];
    for row in g.chunks_exact(fout) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let mut gw = vec![T::zero(); fin * fout];
    T::gemm(
        fin,
        n,
        fout,
        T::one(),
        saved_input.data(),
        (1, fin as isize),
        g,
        (fout as isize, 1),
        T::zero(),
        &mut gw,
        (fout as isize, 1),
    );
    let mut gx = vec![T::zero(); n * fin];
    T::gemm(
        n,
        fout,
        fin,
        T::one(),
        g,
        (fout as isize, 1),
        weights.data(),
        (1, fout as isize),
        T::zero(),
        &mut gx,
        (fin as isize, 1),
    );
    Ok(FcGrads {
        input: Tensor::from_parts(saved_input.dims().to_vec(), gx),
        weights: Tensor::from_parts(weights.dims().to_vec(), gw),
        bias: Tensor::from_parts(vec![fout], gb),
    })
}

fn flat<T: Element>(t: &Tensor<T>) -> Result<(usize, usize), OpError> {
    match t.rank() {
        2 | 4 => Ok((t.dims()[0], t.len() / t.dims()[0])),
        r => Err(TensorError::BadRank(r).into()),
    }
}

/// Row-wise softmax over the flattened per-sample features, max-shifted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    let (_, k) = flat(logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|p| *p = *p / total);
    }
    Ok(Tensor::from_parts(logits.dims().to_vec(), out))
}

/// Vector-Jacobian product of softmax: `p * (g - <g, p>)` per row.
pub fn softmax_backward<T: Element>(grad_out: &Tensor<T>, saved_output: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    grad_out.expect_same_dims(saved_output)?;
    let (_, k) = flat(saved_output)?;
    let mut gx = Vec::with_capacity(grad_out.len());
    for (g, p) in grad_out.data().chunks_exact(k).zip(saved_output.data().chunks_exact(k)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        gx.extend(g.iter().zip(p).map(|(&a, &b)| b * (a - dot)));
    }
    Ok(Tensor::from_parts(grad_out.dims().to_vec(), gx))
}

/// Mean cross-entropy over the batch and its exact gradient `(p - onehot) / N`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), OpError> {
    let (n, k) = flat(logits)?;
    if labels.len() != n {
        return Err(TensorError::Invalid(format!("{} labels for batch of {n}", labels.len())).into());
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(OpError::LabelOutOfRange { label, classes: k });
    }
    let inv_n = T::one() / T::from_f64_lossy(n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        loss = loss + (log_z - row[label]);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_parts(logits.dims().to_vec(), grad)))
}
