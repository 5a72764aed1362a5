//! Forward and backward math for every graph operation. Kernels are pure
//! functions of their input tensors; the graph decides which gradients are
//! needed and how they are accumulated.

use super::{Result, Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the logical dimensions and
    // every stride addresses inside those slices.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct MatmulDims {
    lead: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && lead_a != &b[..b.len() - 2] {
        return Err(err());
    }
    let mut out = lead_a.to_vec();
    out.extend([m, n]);
    Ok((
        MatmulDims {
            lead: lead_a.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.lead * d.m * d.n];
    if d.shared_rhs {
        gemm(d.lead * d.m, d.k, d.n, a.data(), false, b.data(), false, &mut out, 0.0);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for l in 0..d.lead {
            gemm(
                d.m,
                d.k,
                d.n,
                &a.data()[l * sa..(l + 1) * sa],
                false,
                &b.data()[l * sb..(l + 1) * sb],
                false,
                &mut out[l * sc..(l + 1) * sc],
                0.0,
            );
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, gy: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let (d, _) = matmul_dims(a.shape(), b.shape())?;
    let mut da = None;
    let mut db = None;
    if needs[0] {
        let mut g = vec![0.0; a.numel()];
        if d.shared_rhs {
            gemm(d.lead * d.m, d.n, d.k, gy.data(), false, b.data(), true, &mut g, 0.0);
        } else {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for l in 0..d.lead {
                gemm(
                    d.m,
                    d.n,
                    d.k,
                    &gy.data()[l * sc..(l + 1) * sc],
                    false,
                    &b.data()[l * sb..(l + 1) * sb],
                    true,
                    &mut g[l * sa..(l + 1) * sa],
                    0.0,
                );
            }
        }
        da = Some(Tensor::new(a.shape().to_vec(), g)?);
    }
    if needs[1] {
        let mut g = vec![0.0; b.numel()];
        if d.shared_rhs {
            gemm(d.k, d.lead * d.m, d.n, a.data(), true, gy.data(), false, &mut g, 0.0);
        } else {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for l in 0..d.lead {
                gemm(
                    d.k,
                    d.m,
                    d.n,
                    &a.data()[l * sa..(l + 1) * sa],
                    true,
                    &gy.data()[l * sc..(l + 1) * sc],
                    false,
                    &mut g[l * sb..(l + 1) * sb],
                    0.0,
                );
            }
        }
        db = Some(Tensor::new(b.shape().to_vec(), g)?);
    }
    Ok(vec![da, db])
}

pub(crate) fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(TensorError::Shape {
            op: "add",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `a + b` where `b`'s shape is a suffix of `a`'s.
pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_broadcast(a.shape(), b.shape())?;
    let bn = b.numel();
    let mut out = a.data().to_vec();
    if bn > 0 {
        for chunk in out.chunks_mut(bn) {
            for (o, v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub(crate) fn add_backward(b: &Tensor, gy: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let da = needs[0].then(|| gy.clone());
    let db = if needs[1] {
        let bn = b.numel();
        let mut g = vec![0.0; bn];
        if bn > 0 {
            for chunk in gy.data().chunks(bn) {
                for (o, v) in g.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        }
        Some(Tensor::new(b.shape().to_vec(), g)?)
    } else {
        None
    };
    Ok(vec![da, db])
}

pub(crate) fn scale(a: &Tensor, factor: f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|v| v * factor).collect(),
    }
}

/// Swaps axes `i < j`.
pub(crate) fn swap_axes(x: &Tensor, i: usize, j: usize) -> Result<Tensor> {
    let shape = x.shape();
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    if j >= shape.len() {
        return Err(TensorError::InvalidArgument(format!(
            "transpose axes ({i}, {j}) out of range for rank {}",
            shape.len()
        )));
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    if i == j {
        return Tensor::new(out_shape, x.data().to_vec());
    }
    let pre: usize = shape[..i].iter().product();
    let (si, sj) = (shape[i], shape[j]);
    let mid: usize = shape[i + 1..j].iter().product();
    let post: usize = shape[j + 1..].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..pre {
        for a in 0..sj {
            for m in 0..mid {
                for b in 0..si {
                    let s = (((p * si + b) * mid + m) * sj + a) * post;
                    let d = (((p * sj + a) * mid + m) * si + b) * post;
                    out[d..d + post].copy_from_slice(&src[s..s + post]);
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gathers rows along the second-to-last axis. `idx` holds `k` row indices
/// for every leading position.
pub(crate) fn gather_rows(x: &Tensor, idx: &[usize], k: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::InvalidArgument("gather_rows needs rank >= 2".into()));
    }
    let (l, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let lead: usize = shape[..shape.len() - 2].iter().product();
    if idx.len() != lead * k {
        return Err(TensorError::InvalidArgument(format!(
            "gather_rows expects {} indices, got {}",
            lead * k,
            idx.len()
        )));
    }
    let mut out = Vec::with_capacity(lead * k * d);
    for p in 0..lead {
        for &r in &idx[p * k..(p + 1) * k] {
            if r >= l {
                return Err(TensorError::Index { index: r, len: l });
            }
            let s = (p * l + r) * d;
            out.extend_from_slice(&x.data()[s..s + d]);
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = k;
    Tensor::new(out_shape, out)
}

pub(crate) fn gather_rows_backward(x_shape: &[usize], idx: &[usize], k: usize, gy: &Tensor) -> Result<Tensor> {
    let (l, d) = (x_shape[x_shape.len() - 2], x_shape[x_shape.len() - 1]);
    let lead: usize = x_shape[..x_shape.len() - 2].iter().product();
    let mut g = vec![0.0; lead * l * d];
    for p in 0..lead {
        for (q, &r) in idx[p * k..(p + 1) * k].iter().enumerate() {
            let s = (p * k + q) * d;
            let t = (p * l + r) * d;
            for (o, v) in g[t..t + d].iter_mut().zip(&gy.data()[s..s + d]) {
                *o += v;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), g)
}

pub(crate) fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let err = || TensorError::Shape {
        op: "concat_rows",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(err());
    }
    let r = sa.len();
    if sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
        return Err(err());
    }
    let d = sa[r - 1];
    let (la, lb) = (sa[r - 2], sb[r - 2]);
    let lead: usize = sa[..r - 2].iter().product();
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for p in 0..lead {
        out.extend_from_slice(&a.data()[p * la * d..(p + 1) * la * d]);
        out.extend_from_slice(&b.data()[p * lb * d..(p + 1) * lb * d]);
    }
    let mut shape = sa.to_vec();
    shape[r - 2] = la + lb;
    Tensor::new(shape, out)
}

pub(crate) fn concat_rows_backward(a: &Tensor, b: &Tensor, gy: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let sa = a.shape();
    let r = sa.len();
    let d = sa[r - 1];
    let (la, lb) = (sa[r - 2], b.shape()[r - 2]);
    let lead: usize = sa[..r - 2].iter().product();
    let mut ga = Vec::with_capacity(a.numel());
    let mut gb = Vec::with_capacity(b.numel());
    let stride = (la + lb) * d;
    for p in 0..lead {
        let row = &gy.data()[p * stride..(p + 1) * stride];
        ga.extend_from_slice(&row[..la * d]);
        gb.extend_from_slice(&row[la * d..]);
    }
    Ok(vec![
        if needs[0] { Some(Tensor::new(sa.to_vec(), ga)?) } else { None },
        if needs[1] { Some(Tensor::new(b.shape().to_vec(), gb)?) } else { None },
    ])
}

fn last_dim(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "layer_norm")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = row_stats(row);
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let d = last_dim(x, "layer_norm")?;
    let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, (row, g)) in x.data().chunks(d).zip(gy.data().chunks(d)).enumerate() {
        let (mean, rstd) = row_stats(row);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dgamma[j] += g[j] * xhat[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
        }
        if let Some(dx) = dx.as_mut() {
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let o = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
    }
    Ok(vec![
        dx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        if needs[1] { Some(Tensor::new(vec![d], dgamma)?) } else { None },
        if needs[2] { Some(Tensor::new(vec![d], dbeta)?) } else { None },
    ])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub(crate) fn gelu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub(crate) fn softmax(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "softmax")?;
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - max).exp();
            sum += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let d = last_dim(y, "softmax")?;
    let mut out = vec![0.0; y.numel()];
    for ((yr, gr), o) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(out.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            o[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn reduced_shape(x: &Tensor) -> Vec<usize> {
    x.shape()[..x.rank() - 1].to_vec()
}

pub(crate) fn mean_last(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "mean")?;
    let out = x.data().chunks(d).map(|r| r.iter().sum::<f64>() / d as f64).collect();
    Tensor::new(reduced_shape(x), out)
}

pub(crate) fn mean_last_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "mean")?;
    let inv = 1.0 / d as f64;
    let mut out = Vec::with_capacity(x.numel());
    for &g in gy.data() {
        out.extend(std::iter::repeat(g * inv).take(d));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn sum_sq_last(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "sum_sq")?;
    let out = x.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    Tensor::new(reduced_shape(x), out)
}

pub(crate) fn sum_sq_last_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "sum_sq")?;
    let mut out = Vec::with_capacity(x.numel());
    for (row, &g) in x.data().chunks(d).zip(gy.data()) {
        out.extend(row.iter().map(|v| 2.0 * v * g));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise `logsumexp(x) - x[label]`.
pub(crate) fn softmax_cross_entropy(x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let d = last_dim(x, "softmax_cross_entropy")?;
    if labels.len() * d != x.numel() {
        return Err(TensorError::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            x.numel() / d
        )));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in x.data().chunks(d).zip(labels) {
        if y >= d {
            return Err(TensorError::Index { index: y, len: d });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(lse - row[y]);
    }
    Tensor::new(reduced_shape(x), out)
}

pub(crate) fn softmax_cross_entropy_backward(x: &Tensor, labels: &[usize], gy: &Tensor) -> Result<Tensor> {
    let p = softmax(x)?;
    let d = last_dim(x, "softmax_cross_entropy")?;
    let mut out = p.into_data();
    for (r, (row, &y)) in out.chunks_mut(d).zip(labels).enumerate() {
        row[y] -= 1.0;
        let g = gy.data()[r];
        for v in row.iter_mut() {
            *v *= g;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
