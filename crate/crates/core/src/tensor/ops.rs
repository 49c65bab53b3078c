//! The closed kernel set. Every kernel accumulates in a fixed order, so
//! repeated evaluation on identical inputs is bit-identical.

use super::Tensor;
use crate::error::{Error, Result};

/// Row-major operand layout for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Stored as the logical `[rows, cols]`.
    Plain,
    /// Stored as `[cols, rows]`; read transposed.
    Transposed,
}

/// `c[m,n] = a[m,k] · b[k,n]`, with `c` fully overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the slices are exactly m·k, k·n and m·n long (asserted above)
    // and the strides address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch count and per-batch `(m, k, n)` for a product of `a` and `b`.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        (sa, sb) => Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}"))),
    }
}

/// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            Layout::Plain,
            &b.data()[i * k * n..(i + 1) * k * n],
            Layout::Plain,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoints of `c = a · b` given `dc`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n) = matmul_dims(a, b).expect("shapes checked in forward");
    let mut da = vec![0.0; batch * m * k];
    let mut db = vec![0.0; batch * k * n];
    for i in 0..batch {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        let dc_i = &dc.data()[i * m * n..(i + 1) * m * n];
        // da = dc · bᵀ, db = aᵀ · dc
        gemm(
            m,
            n,
            k,
            dc_i,
            Layout::Plain,
            b_i,
            Layout::Transposed,
            &mut da[i * m * k..(i + 1) * m * k],
        );
        gemm(
            k,
            m,
            n,
            a_i,
            Layout::Transposed,
            dc_i,
            Layout::Plain,
            &mut db[i * k * n..(i + 1) * k * n],
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op} of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Elementwise product with a constant.
pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect())
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; absolute error near 1e-16, which is
/// all GELU needs, at a fraction of libm's cost.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Tanh-approximated GELU.
pub fn gelu(a: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| 0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x))))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| {
            let t = tanh(GELU_C * (x + GELU_A * x * x * x));
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Ok(x.clone());
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric("softmax over non-finite row".into()));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            let d = *v - max;
            // exp underflows to exactly 0 below -745; masked entries land here.
            *v = if d < -746.0 { 0.0 } else { d.exp() };
            total += *v;
        }
        if !total.is_finite() {
            return Err(Error::Numeric("softmax over non-finite row".into()));
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut dx = vec![0.0; y.numel()];
    for ((yr, gr), dr) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

fn check_norm_args(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<usize> {
    let c = x.last_dim();
    if x.rank() < 1 || c < 2 {
        return Err(Error::Shape(format!(
            "layer_norm needs at least 2 channels, got {:?}",
            x.shape()
        )));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "layer_norm affine {:?}/{:?} for {c} channels",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    Ok(c)
}

/// Layer norm over the last axis; also returns the per-row reciprocal
/// standard deviation needed by the adjoint.
pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let c = check_norm_args(x, gain, bias, eps)?;
    let rows = x.numel() / c;
    let mut out = vec![0.0; x.numel()];
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (i, (y, &v)) in yr.iter_mut().zip(xr).enumerate() {
            *y = (v - mean) * rstd * gain.data()[i] + bias.data()[i];
        }
        rstds.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), rstds))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

/// Adjoints `(dx, dgain, dbias)` of layer norm.
pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    rstds: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.last_dim();
    let g = gain.data();
    let mut dx = vec![0.0; x.numel()];
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (((xr, gr), dr), &rstd) in x
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
        .zip(rstds)
    {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..c {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * g[i];
            dgain[i] += gr[i] * xhat[i];
            dbias[i] += gr[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat /= c as f64;
        mean_dxhat_xhat /= c as f64;
        for i in 0..c {
            dr[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgain),
        Tensor::from_parts(vec![c], dbias),
    )
}

/// Gathers rows `ids` of a `[n, c]` table into `[ids.len(), c]`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let [n, c] = *table.shape() else {
        return Err(Error::Shape(format!(
            "gather from non-matrix {:?}",
            table.shape()
        )));
    };
    let mut out = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        if id >= n {
            return Err(Error::Index(format!("row {id} of table with {n} rows")));
        }
        out.extend_from_slice(&table.data()[id * c..(id + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), c], out))
}

pub(crate) fn gather_rows_backward(table_shape: &[usize], ids: &[usize], dy: &Tensor) -> Tensor {
    let c = table_shape[1];
    let mut dt = Tensor::zeros(table_shape);
    for (i, &id) in ids.iter().enumerate() {
        let src = &dy.data()[i * c..(i + 1) * c];
        for (d, s) in dt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(src) {
            *d += s;
        }
    }
    dt
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::Shape(format!(
            "reshape {:?} to {shape:?}",
            x.shape()
        )));
    }
    Ok(Tensor::from_parts(shape.to_vec(), x.data().to_vec()))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!(
            "permutation {perm:?} for rank {rank}"
        )));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // Trailing axes left in place are copied as contiguous blocks.
    let mut keep = rank;
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = in_shape[keep..].iter().product();
    let strides: Vec<usize> = perm[..keep].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    if x.numel() > 0 {
        let src = x.data();
        if keep == 0 {
            out.extend_from_slice(src);
        } else {
            let mut index = vec![0usize; keep];
            let mut offset = 0usize;
            'outer: loop {
                out.extend_from_slice(&src[offset..offset + block]);
                let mut axis = keep;
                loop {
                    if axis == 0 {
                        break 'outer;
                    }
                    axis -= 1;
                    index[axis] += 1;
                    offset += strides[axis];
                    if index[axis] < out_shape[axis] {
                        break;
                    }
                    offset -= strides[axis] * out_shape[axis];
                    index[axis] = 0;
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` factorisation of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Shape(format!(
            "concat axis {axis} for rank {}",
            first.rank()
        )));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Shape(format!(
                "concat of {:?} with {:?} along {axis}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Takes `len` entries starting at `start` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::Shape(format!(
            "slice {start}..{} along {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adds `part` into `target` at `start` along `axis` (adjoint of [`slice`]).
pub(crate) fn slice_accumulate(target: &mut Tensor, part: &Tensor, axis: usize, start: usize) {
    let (outer, n, inner) = split_at_axis(target.shape(), axis);
    let len = part.shape()[axis];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        let src = &part.data()[o * len * inner..(o + 1) * len * inner];
        for (d, s) in target.data_mut()[base..base + len * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let [t, v] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "cross-entropy logits must be [t, V], got {:?}",
            logits.shape()
        )));
    };
    if targets.len() != t {
        return Err(Error::Shape(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
        return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
    }
    Ok((t, v))
}

/// `Σ_i weights[i] · (−log softmax(logits_i)[targets_i])`, plus the row
/// probabilities kept for the adjoint.
pub(crate) fn weighted_nll(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let (t, _) = check_targets(logits, targets)?;
    if weights.len() != t {
        return Err(Error::Shape(format!("{} weights for {t} rows", weights.len())));
    }
    let probs = softmax_rows(logits)?;
    let v = logits.last_dim();
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks(v).enumerate() {
        if weights[i] == 0.0 {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += weights[i] * (lse - row[targets[i]]);
    }
    Ok((loss, probs))
}

pub(crate) fn weighted_nll_backward(
    probs: &Tensor,
    targets: &[usize],
    weights: &[f64],
    upstream: f64,
) -> Tensor {
    let v = probs.last_dim();
    let mut d = probs.data().to_vec();
    for (i, row) in d.chunks_mut(v).enumerate() {
        let w = weights[i] * upstream;
        for x in row.iter_mut() {
            *x *= w;
        }
        row[targets[i]] -= w;
    }
    Tensor::from_parts(probs.shape().to_vec(), d)
}

/// Mean token cross-entropy of `[t, V]` logits against `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (t, _) = check_targets(logits, targets)?;
    let weights = vec![1.0 / t.max(1) as f64; t];
    weighted_nll(logits, targets, &weights).map(|(l, _)| Tensor::scalar(l))
}
