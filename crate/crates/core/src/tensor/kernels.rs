//! Pure forward kernels and their exact reverse-mode counterparts.
//!
//! Every function here is a pure function of its tensor arguments: no hidden
//! state, no mutation of inputs, safe to call from concurrent workers. The
//! heavy kernels (convolution and its gradients) parallelize over the batch
//! axis with disjoint output slices, and cross-example reductions sum
//! per-example partials in a fixed order, so results are bit-stable for a
//! given thread-pool-independent input.
//!
//! Layout convention: image batches are `[N, H, W, C]`; convolution kernels
//! are `[kh, kw, Cin, Cout]`; matrices are `[rows, cols]`, row-major.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

fn dims4(t: &Tensor<impl Scalar>, op: &str, role: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(
            op,
            format!("{role} must be rank 4, got shape {:?}", t.shape()),
        )),
    }
}

fn check_vec(t: &Tensor<impl Scalar>, op: &str, role: &str, len: usize) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::shape(
            op,
            format!("{role} must have shape [{len}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Dot product with eight running sums so the loop vectorizes; a single
/// carried accumulator would serialize every lane on the previous add.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let mut a_rest = a;
    let mut b_rest = b;
    while a_rest.len() >= 8 {
        for l in 0..8 {
            lanes[l] += a_rest[l] * b_rest[l];
        }
        a_rest = &a_rest[8..];
        b_rest = &b_rest[8..];
    }
    let mut tail = S::zero();
    for (&x, &y) in a_rest.iter().zip(b_rest) {
        tail += x * y;
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

/// 2-D cross-correlation (no kernel flip) with optional bias broadcast.
///
/// `input` is `[N, H, W, Cin]`, `kernel` is `[kh, kw, Cin, Cout]`, `bias` is
/// `[Cout]`. Output is `[N, H', W', Cout]` with `H'` given by the padding
/// rule.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    strides: (usize, usize),
    padding: Padding,
) -> Result<Tensor<S>> {
    let (n, h, w, cin) = dims4(input, "conv2d", "input")?;
    let (kh, kw, kcin, cout) = dims4(kernel, "conv2d", "kernel")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kcin} input channels but input has {cin} (channel axis)"),
        ));
    }
    if let Some(b) = bias {
        check_vec(b, "conv2d", "bias", cout)?;
    }
    let (sh, sw) = strides;
    let oh = padding.out_dim(h, kh, sh)?;
    let ow = padding.out_dim(w, kw, sw)?;
    let ph = padding.pad_before(h, kh, sh)?;
    let pw = padding.pad_before(w, kw, sw)?;

    let mut out = Tensor::zeros(vec![n, oh, ow, cout]);
    let in_stride = h * w * cin;
    let out_stride = oh * ow * cout;
    let in_data = input.data();
    let k_data = kernel.data();
    out.data_mut()
        .par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let in_n = &in_data[ni * in_stride..(ni + 1) * in_stride];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (oy * ow + ox) * cout;
                    if let Some(b) = bias {
                        out_n[base..base + cout].copy_from_slice(b.data());
                    }
                    for i in 0..kh {
                        let iy = oy * sh + i;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for j in 0..kw {
                            let ix = ox * sw + j;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let ix = ix - pw;
                            let in_base = (iy * w + ix) * cin;
                            let k_base = (i * kw + j) * cin * cout;
                            for ci in 0..cin {
                                let x = in_n[in_base + ci];
                                let k_row = &k_data[k_base + ci * cout..k_base + (ci + 1) * cout];
                                let acc = &mut out_n[base..base + cout];
                                for (o, &kv) in acc.iter_mut().zip(k_row) {
                                    *o += x * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    strides: (usize, usize),
    padding: Padding,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, h, w, cin) = dims4(input, "conv2d_backward", "input")?;
    let (kh, kw, _, cout) = dims4(kernel, "conv2d_backward", "kernel")?;
    let (sh, sw) = strides;
    let oh = padding.out_dim(h, kh, sh)?;
    let ow = padding.out_dim(w, kw, sw)?;
    let ph = padding.pad_before(h, kh, sh)?;
    let pw = padding.pad_before(w, kw, sw)?;
    if grad_out.shape() != [n, oh, ow, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                grad_out.shape(),
                [n, oh, ow, cout]
            ),
        ));
    }

    let in_stride = h * w * cin;
    let out_stride = oh * ow * cout;
    let in_data = input.data();
    let k_data = kernel.data();
    let go_data = grad_out.data();

    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    // Each batch element owns a disjoint grad_in slice and produces private
    // kernel/bias partials; the partials are then summed in batch order so
    // the result does not depend on thread scheduling.
    let partials: Vec<(Vec<S>, Vec<S>)> = grad_in
        .data_mut()
        .par_chunks_mut(in_stride)
        .enumerate()
        .map(|(ni, gin_n)| {
            let in_n = &in_data[ni * in_stride..(ni + 1) * in_stride];
            let go_n = &go_data[ni * out_stride..(ni + 1) * out_stride];
            let mut gk = vec![S::zero(); k_data.len()];
            let mut gb = vec![S::zero(); cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (oy * ow + ox) * cout;
                    let go = &go_n[base..base + cout];
                    for (b, &g) in gb.iter_mut().zip(go) {
                        *b += g;
                    }
                    for i in 0..kh {
                        let iy = oy * sh + i;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for j in 0..kw {
                            let ix = ox * sw + j;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let ix = ix - pw;
                            let in_base = (iy * w + ix) * cin;
                            let k_base = (i * kw + j) * cin * cout;
                            for ci in 0..cin {
                                let x = in_n[in_base + ci];
                                let k_row = &k_data[k_base + ci * cout..k_base + (ci + 1) * cout];
                                let gk_row = &mut gk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                // Two passes: the axpy has independent lanes
                                // and the dot uses split accumulators, so
                                // both vectorize; the fused form would
                                // serialize on the dot's carried sum.
                                for (gkv, &g) in gk_row.iter_mut().zip(go) {
                                    *gkv += x * g;
                                }
                                gin_n[in_base + ci] += dot(go, k_row);
                            }
                        }
                    }
                }
            }
            (gk, gb)
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape().to_vec());
    let mut grad_bias = Tensor::zeros(vec![cout]);
    for (gk, gb) in &partials {
        for (a, &b) in grad_kernel.data_mut().iter_mut().zip(gk) {
            *a += b;
        }
        for (a, &b) in grad_bias.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok((grad_in, grad_kernel, grad_bias))
}

/// Max pooling over spatial windows.
///
/// Returns the pooled tensor and, per output element, the flat index of the
/// selected input element (first maximum wins on ties). Padded cells act as
/// −∞ and are never selected.
pub fn maxpool2d<S: Scalar>(
    input: &Tensor<S>,
    ksize: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (n, h, w, c) = dims4(input, "maxpool2d", "input")?;
    let (kh, kw) = ksize;
    if kh == 0 || kw == 0 {
        return Err(Error::Config("pooling window extents must be ≥ 1".into()));
    }
    let (sh, sw) = strides;
    let oh = padding.out_dim(h, kh, sh)?;
    let ow = padding.out_dim(w, kw, sw)?;
    let ph = padding.pad_before(h, kh, sh)?;
    let pw = padding.pad_before(w, kw, sw)?;

    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let mut argmax = vec![0usize; out.len()];
    let data = input.data();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(S, usize)> = None;
                    for i in 0..kh {
                        let iy = oy * sh + i;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for j in 0..kw {
                            let ix = ox * sw + j;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let ix = ix - pw;
                            let idx = ((ni * h + iy) * w + ix) * c + ch;
                            let v = data[idx];
                            match best {
                                Some((bv, _)) if v <= bv => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    // SAME windows always overlap the input, and VALID
                    // windows fit entirely inside it, so a best cell exists.
                    let (v, idx) = best.expect("pooling window overlaps input");
                    let out_idx = ((ni * oh + oy) * ow + ox) * c + ch;
                    out.data_mut()[out_idx] = v;
                    argmax[out_idx] = idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Gradient of [`maxpool2d`]: routes each upstream element to its argmax cell.
pub fn maxpool2d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "argmax record has {} entries but upstream gradient has {} elements",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[idx] += g;
    }
    Ok(grad_in)
}

/// Elementwise `max(x, 0)`.
pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|x| if x > S::zero() { x } else { S::zero() })
}

/// Gradient of [`relu`]: passes upstream where the input was positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    input.zip_map(grad_out, |x, g| if x > S::zero() { g } else { S::zero() })
}

/// Maxout: maximum over each consecutive group of `group_size` channels.
///
/// The channel axis is the last one; output shape matches the input except the
/// channel extent shrinks to `C / group_size`. Returns the flat argmax record
/// for backward (first maximum wins on ties).
pub fn maxout<S: Scalar>(
    input: &Tensor<S>,
    group_size: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    if group_size == 0 {
        return Err(Error::Config("maxout group_size must be ≥ 1".into()));
    }
    let c = *input.shape().last().ok_or_else(|| {
        Error::shape("maxout", "input must have a channel axis (rank ≥ 1)".to_string())
    })?;
    if c % group_size != 0 {
        return Err(Error::Config(format!(
            "maxout group_size {group_size} does not divide channel count {c}"
        )));
    }
    let groups = c / group_size;
    let mut out_shape = input.shape().to_vec();
    *out_shape.last_mut().unwrap() = groups;
    let rows = input.len() / c;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out.len()];
    let data = input.data();
    for r in 0..rows {
        for u in 0..groups {
            let start = r * c + u * group_size;
            let mut best_idx = start;
            let mut best = data[start];
            for t in 1..group_size {
                let v = data[start + t];
                if v > best {
                    best = v;
                    best_idx = start + t;
                }
            }
            let o = r * groups + u;
            out.data_mut()[o] = best;
            argmax[o] = best_idx;
        }
    }
    Ok((out, argmax))
}

/// Gradient of [`maxout`]: routes each upstream element to its argmax channel.
pub fn maxout_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxout_backward",
            format!(
                "argmax record has {} entries but upstream gradient has {} elements",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[idx] += g;
    }
    Ok(grad_in)
}

/// Flattened extent of everything after the batch axis.
fn flat_features(t: &Tensor<impl Scalar>, op: &str) -> Result<(usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::shape(
            op,
            format!("input needs an explicit batch axis (rank ≥ 2), got {:?}", t.shape()),
        ));
    }
    let n = t.shape()[0];
    Ok((n, t.len() / n))
}

/// Fully connected layer: `x · W + b`.
///
/// Inputs of rank > 2 are flattened to `[N, D]` first.
pub fn inner_product<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (n, d) = flat_features(input, "inner_product")?;
    let (wd, k) = match *weight.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::shape(
                "inner_product",
                format!("weight must be rank 2 [D,K], got {:?}", weight.shape()),
            ))
        }
    };
    if wd != d {
        return Err(Error::shape(
            "inner_product",
            format!("weight expects {wd} input features but input flattens to {d}"),
        ));
    }
    if let Some(b) = bias {
        check_vec(b, "inner_product", "bias", k)?;
    }
    let mut out = Tensor::zeros(vec![n, k]);
    let x = input.data();
    let w = weight.data();
    for ni in 0..n {
        let row = &mut out.data_mut()[ni * k..(ni + 1) * k];
        if let Some(b) = bias {
            row.copy_from_slice(b.data());
        }
        for di in 0..d {
            let xv = x[ni * d + di];
            let w_row = &w[di * k..(di + 1) * k];
            for (o, &wv) in row.iter_mut().zip(w_row) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`inner_product`] w.r.t. input (in its original shape),
/// weight, and bias.
pub fn inner_product_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, d) = flat_features(input, "inner_product_backward")?;
    let k = weight.shape()[1];
    if grad_out.shape() != [n, k] {
        return Err(Error::shape(
            "inner_product_backward",
            format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                grad_out.shape(),
                [n, k]
            ),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    let mut grad_w = Tensor::zeros(weight.shape().to_vec());
    let mut grad_b = Tensor::zeros(vec![k]);
    for ni in 0..n {
        let go_row = &go[ni * k..(ni + 1) * k];
        for (b, &g) in grad_b.data_mut().iter_mut().zip(go_row) {
            *b += g;
        }
        for di in 0..d {
            let w_row = &w[di * k..(di + 1) * k];
            let gw_row = &mut grad_w.data_mut()[di * k..(di + 1) * k];
            let xv = x[ni * d + di];
            let mut acc = S::zero();
            for ((&g, &wv), gw) in go_row.iter().zip(w_row).zip(gw_row) {
                acc += g * wv;
                *gw += xv * g;
            }
            grad_in.data_mut()[ni * d + di] = acc;
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// Per-channel batch statistics and normalized output for train mode.
pub struct BatchNormTrain<S> {
    pub output: Tensor<S>,
    /// Per-channel batch mean, shape `[C]`.
    pub mean: Tensor<S>,
    /// Per-channel biased batch variance, shape `[C]`.
    pub var: Tensor<S>,
}

fn channel_extent(t: &Tensor<impl Scalar>, op: &str) -> Result<usize> {
    t.shape().last().copied().ok_or_else(|| {
        Error::shape(op, "input must have a channel axis (rank ≥ 1)".to_string())
    })
}

/// Batch normalization in train mode: normalize by per-channel batch
/// mean/variance (biased), then scale by `gamma` and shift by `beta`.
///
/// Channels are the last axis; statistics reduce over all other axes.
pub fn batch_norm_train<S: Scalar>(
    input: &Tensor<S>,
    gamma: Option<&Tensor<S>>,
    beta: Option<&Tensor<S>>,
    epsilon: S,
) -> Result<BatchNormTrain<S>> {
    let c = channel_extent(input, "batch_norm")?;
    if let Some(g) = gamma {
        check_vec(g, "batch_norm", "gamma", c)?;
    }
    if let Some(b) = beta {
        check_vec(b, "batch_norm", "beta", c)?;
    }
    let rows = input.len() / c;
    let m = S::from_usize(rows).unwrap();
    let data = input.data();
    let mut mean = Tensor::zeros(vec![c]);
    for r in 0..rows {
        for ch in 0..c {
            mean.data_mut()[ch] += data[r * c + ch];
        }
    }
    for v in mean.data_mut() {
        *v /= m;
    }
    let mut var = Tensor::zeros(vec![c]);
    for r in 0..rows {
        for ch in 0..c {
            let d = data[r * c + ch] - mean.data()[ch];
            var.data_mut()[ch] += d * d;
        }
    }
    for v in var.data_mut() {
        *v /= m;
    }
    let output = normalize(input, &mean, &var, gamma, beta, epsilon);
    Ok(BatchNormTrain { output, mean, var })
}

/// Batch normalization in inference mode: normalize by running statistics.
pub fn batch_norm_infer<S: Scalar>(
    input: &Tensor<S>,
    gamma: Option<&Tensor<S>>,
    beta: Option<&Tensor<S>>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    epsilon: S,
) -> Result<Tensor<S>> {
    let c = channel_extent(input, "batch_norm")?;
    check_vec(running_mean, "batch_norm", "running mean", c)?;
    check_vec(running_var, "batch_norm", "running variance", c)?;
    if let Some(g) = gamma {
        check_vec(g, "batch_norm", "gamma", c)?;
    }
    if let Some(b) = beta {
        check_vec(b, "batch_norm", "beta", c)?;
    }
    Ok(normalize(input, running_mean, running_var, gamma, beta, epsilon))
}

fn normalize<S: Scalar>(
    input: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    gamma: Option<&Tensor<S>>,
    beta: Option<&Tensor<S>>,
    epsilon: S,
) -> Tensor<S> {
    let c = mean.len();
    let inv_std: Vec<S> = var.data().iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
    let mut out = Tensor::zeros(input.shape().to_vec());
    let rows = input.len() / c;
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            let mut v = (input.data()[idx] - mean.data()[ch]) * inv_std[ch];
            if let Some(g) = gamma {
                v = v * g.data()[ch];
            }
            if let Some(b) = beta {
                v = v + b.data()[ch];
            }
            out.data_mut()[idx] = v;
        }
    }
    out
}

/// Gradients of train-mode batch normalization w.r.t. input, gamma, and beta.
///
/// `mean`/`var` must be the batch statistics saved from the forward pass.
pub fn batch_norm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: Option<&Tensor<S>>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    epsilon: S,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "batch_norm_backward",
            format!(
                "upstream gradient shape {:?} does not match input shape {:?}",
                grad_out.shape(),
                input.shape()
            ),
        ));
    }
    let c = mean.len();
    let rows = input.len() / c;
    let m = S::from_usize(rows).unwrap();
    let inv_std: Vec<S> = var.data().iter().map(|&v| (v + epsilon).sqrt().recip()).collect();

    // Per-channel sums of dy and dy·x̂ give both the parameter gradients and
    // the correction terms of the input gradient.
    let mut sum_dy = vec![S::zero(); c];
    let mut sum_dy_xhat = vec![S::zero(); c];
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            let xhat = (input.data()[idx] - mean.data()[ch]) * inv_std[ch];
            sum_dy[ch] += grad_out.data()[idx];
            sum_dy_xhat[ch] += grad_out.data()[idx] * xhat;
        }
    }

    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            let xhat = (input.data()[idx] - mean.data()[ch]) * inv_std[ch];
            let scale = match gamma {
                Some(g) => g.data()[ch] * inv_std[ch],
                None => inv_std[ch],
            };
            let dy = grad_out.data()[idx];
            grad_in.data_mut()[idx] =
                scale * (dy - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m);
        }
    }
    let grad_gamma = Tensor::new(vec![c], sum_dy_xhat)?;
    let grad_beta = Tensor::new(vec![c], sum_dy)?;
    Ok((grad_in, grad_gamma, grad_beta))
}

/// Inverted dropout for train mode.
///
/// Kept elements are scaled by `1 / keep_prob` so the expectation matches the
/// identity that inference mode applies. `keep_prob = 1` keeps everything and
/// consumes no randomness.
pub fn dropout_train<S: Scalar>(
    input: &Tensor<S>,
    keep_prob: f64,
    rng: &mut super::Pcg32,
) -> Result<(Tensor<S>, Vec<bool>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "dropout keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    if keep_prob == 1.0 {
        return Ok((input.clone(), vec![true; input.len()]));
    }
    let scale = S::from_f64_lossy(1.0 / keep_prob);
    let mask: Vec<bool> = (0..input.len()).map(|_| rng.next_f64() <= keep_prob).collect();
    let mut out = Tensor::zeros(input.shape().to_vec());
    for (i, (&x, &keep)) in input.data().iter().zip(&mask).enumerate() {
        if keep {
            out.data_mut()[i] = x * scale;
        }
    }
    Ok((out, mask))
}

/// Gradient of [`dropout_train`]: same mask and scaling as forward.
pub fn dropout_backward<S: Scalar>(
    mask: &[bool],
    keep_prob: f64,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if mask.len() != grad_out.len() {
        return Err(Error::shape(
            "dropout_backward",
            format!(
                "mask has {} entries but upstream gradient has {} elements",
                mask.len(),
                grad_out.len()
            ),
        ));
    }
    let scale = S::from_f64_lossy(1.0 / keep_prob);
    let mut out = Tensor::zeros(grad_out.shape().to_vec());
    for (i, (&g, &keep)) in grad_out.data().iter().zip(mask).enumerate() {
        if keep {
            out.data_mut()[i] = g * scale;
        }
    }
    Ok(out)
}

/// Loss and cached probabilities from [`softmax_cross_entropy`].
pub struct SoftmaxXent<S> {
    /// Mean negative log-likelihood over the batch.
    pub loss: S,
    /// Softmax probabilities, shape `[N, K]`, cached for backward.
    pub probs: Tensor<S>,
}

/// Softmax followed by mean cross-entropy against integer labels.
///
/// Numerically stabilized by subtracting the per-row maximum before
/// exponentiation.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<SoftmaxXent<S>> {
    let (n, k) = match *logits.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be rank 2 [N,K], got {:?}", logits.shape()),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    let mut probs = Tensor::zeros(vec![n, k]);
    let mut total = S::zero();
    for ni in 0..n {
        let label = labels[ni];
        if label >= k {
            return Err(Error::Config(format!(
                "label {label} out of range for {k} classes (example {ni})"
            )));
        }
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().copied().fold(row[0], S::max);
        let mut sum = S::zero();
        let p_row = &mut probs.data_mut()[ni * k..(ni + 1) * k];
        for (p, &z) in p_row.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum += *p;
        }
        for p in p_row.iter_mut() {
            *p /= sum;
        }
        total += sum.ln() + max - row[label];
    }
    Ok(SoftmaxXent {
        loss: total / S::from_usize(n).unwrap(),
        probs,
    })
}

/// Gradient of [`softmax_cross_entropy`] w.r.t. the logits.
pub fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[usize],
    upstream: S,
) -> Tensor<S> {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    let inv_n = upstream / S::from_usize(n).unwrap();
    let mut grad = probs.clone();
    for ni in 0..n {
        let row = &mut grad.data_mut()[ni * k..(ni + 1) * k];
        row[labels[ni]] -= S::one();
        for g in row.iter_mut() {
            *g *= inv_n;
        }
    }
    grad
}

/// Per-row argmax class; ties resolve to the lowest class index.
pub fn predictions<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<usize>> {
    let (n, k) = match *logits.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::shape(
                "predictions",
                format!("logits must be rank 2 [N,K], got {:?}", logits.shape()),
            ))
        }
    };
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len() as f64
}

/// Elementwise sum of two same-shaped tensors (residual merge).
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, |x, y| x + y)
}

/// `scale · Σ x²` — the L2 weight-decay penalty.
pub fn scaled_sum_squares<S: Scalar>(x: &Tensor<S>, scale: S) -> S {
    scale * x.data().iter().map(|&v| v * v).sum::<S>()
}

/// Gradient of [`scaled_sum_squares`]: `2 · scale · x · upstream`.
pub fn scaled_sum_squares_backward<S: Scalar>(x: &Tensor<S>, scale: S, upstream: S) -> Tensor<S> {
    let two = S::one() + S::one();
    x.map(|v| two * scale * v * upstream)
}
