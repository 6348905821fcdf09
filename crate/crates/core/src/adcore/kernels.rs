//! Forward and reverse kernels used by the tape.

use super::{AdError, Tensor};

type Result<T> = std::result::Result<T, AdError>;

/// `c = a · b (+ beta·c)` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || AdError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() == 0 || b.rank() != 2 {
        return Err(mismatch());
    }
    let k = a.shape()[a.rank() - 1];
    if b.shape()[0] != k {
        return Err(mismatch());
    }
    let n = b.shape()[1];
    let m = leading(a.shape());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// `g · bᵀ`, reshaped to `a_shape`.
pub(crate) fn matmul_grad_lhs(g: &Tensor, b: &Tensor, a_shape: &[usize]) -> Tensor {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let m = leading(a_shape);
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut out);
    Tensor::from_parts(a_shape.to_vec(), out)
}

/// `aᵀ · g` with the leading axes of `a` flattened.
pub(crate) fn matmul_grad_rhs(a: &Tensor, g: &Tensor) -> Tensor {
    let k = a.shape()[a.rank() - 1];
    let m = leading(a.shape());
    let n = g.shape()[g.rank() - 1];
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut out);
    Tensor::from_parts(vec![k, n], out)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce_axis(x: &Tensor, axis: usize, scale: f64, op: &'static str) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(AdError::InvalidArgument(format!(
            "{op}: axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..len {
            let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        if scale != 1.0 {
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Inverse of [`reduce_axis`]: repeats `g` along a reinserted `axis`.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    let gd = g.data();
    for o in 0..outer {
        let src = &gd[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend(src.iter().map(|v| v * scale));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(AdError::InvalidArgument(format!(
            "concat: axis {axis} out of range for {first:?}"
        )));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        let conforms = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !conforms {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

/// Zero-pads a slice gradient back to the full `shape`.
pub(crate) fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = split_axis(shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn cumsum_exclusive(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.numel()];
    if n > 0 {
        for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let mut acc = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn cumsum_exclusive_grad(g: &Tensor) -> Tensor {
    let n = *g.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; g.numel()];
    if n > 0 {
        for (src, dst) in g.data().chunks(n).zip(out.chunks_mut(n)) {
            let mut acc = 0.0;
            for j in (0..n).rev() {
                dst[j] = acc;
                acc += src[j];
            }
        }
    }
    Tensor::from_parts(g.shape().to_vec(), out)
}

pub(crate) fn gather_rows(x: &Tensor, rows: &[[u32; 4]], weights: &[[f64; 4]]) -> Result<Tensor> {
    if x.rank() != 2 || rows.len() != weights.len() {
        return Err(AdError::InvalidArgument(format!(
            "gather_rows: source {:?}, {} index rows, {} weight rows",
            x.shape(),
            rows.len(),
            weights.len()
        )));
    }
    let (n_rows, c) = (x.shape()[0], x.shape()[1]);
    if rows.iter().flatten().any(|&r| r as usize >= n_rows) {
        return Err(AdError::InvalidArgument("gather_rows: row index out of range".into()));
    }
    let xd = x.data();
    let mut out = vec![0.0; rows.len() * c];
    for ((idx, w), dst) in rows.iter().zip(weights).zip(out.chunks_mut(c.max(1))) {
        for q in 0..4 {
            if w[q] == 0.0 {
                continue;
            }
            let src = &xd[idx[q] as usize * c..(idx[q] as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w[q] * s;
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows.len(), c], out))
}

pub(crate) fn gather_rows_grad(
    g: &Tensor,
    shape: &[usize],
    rows: &[[u32; 4]],
    weights: &[[f64; 4]],
) -> Tensor {
    let c = shape[1];
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for ((idx, w), src) in rows.iter().zip(weights).zip(g.data().chunks(c.max(1))) {
        for q in 0..4 {
            if w[q] == 0.0 {
                continue;
            }
            let dst = &mut od[idx[q] as usize * c..(idx[q] as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w[q] * s;
            }
        }
    }
    out
}

struct ConvDims {
    batch: usize,
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<ConvDims> {
    let (xs, ws) = (x.shape(), w.shape());
    let ok = xs.len() == 4
        && ws.len() == 4
        && ws[0] == ws[1]
        && ws[0] % 2 == 1
        && ws[2] == xs[3];
    if !ok {
        return Err(AdError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    Ok(ConvDims {
        batch: xs[0],
        height: xs[1],
        width: xs[2],
        c_in: xs[3],
        c_out: ws[3],
        kernel: ws[0],
    })
}

/// Same-padded patch matrix: one row per output pixel, columns ordered
/// `(dy, dx, channel)` to match a `[k, k, Cin, Cout]` kernel.
fn im2col(x: &Tensor, d: &ConvDims) -> Vec<f64> {
    let cols = d.kernel * d.kernel * d.c_in;
    let half = (d.kernel / 2) as isize;
    let mut out = vec![0.0; d.batch * d.height * d.width * cols];
    let xd = x.data();
    let mut row = 0;
    for b in 0..d.batch {
        for y in 0..d.height {
            for xx in 0..d.width {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for dy in 0..d.kernel {
                    let sy = y as isize + dy as isize - half;
                    if sy < 0 || sy >= d.height as isize {
                        continue;
                    }
                    for dx in 0..d.kernel {
                        let sx = xx as isize + dx as isize - half;
                        if sx < 0 || sx >= d.width as isize {
                            continue;
                        }
                        let src = ((b * d.height + sy as usize) * d.width + sx as usize) * d.c_in;
                        let at = (dy * d.kernel + dx) * d.c_in;
                        dst[at..at + d.c_in].copy_from_slice(&xd[src..src + d.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let n_cols = d.kernel * d.kernel * d.c_in;
    let half = (d.kernel / 2) as isize;
    let mut out = vec![0.0; d.batch * d.height * d.width * d.c_in];
    let mut row = 0;
    for b in 0..d.batch {
        for y in 0..d.height {
            for xx in 0..d.width {
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for dy in 0..d.kernel {
                    let sy = y as isize + dy as isize - half;
                    if sy < 0 || sy >= d.height as isize {
                        continue;
                    }
                    for dx in 0..d.kernel {
                        let sx = xx as isize + dx as isize - half;
                        if sx < 0 || sx >= d.width as isize {
                            continue;
                        }
                        let dst = ((b * d.height + sy as usize) * d.width + sx as usize) * d.c_in;
                        let at = (dy * d.kernel + dx) * d.c_in;
                        for c in 0..d.c_in {
                            out[dst + c] += src[at + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Output and the patch matrix, which the backward pass reuses.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = conv_dims(x, w)?;
    let cols = im2col(x, &d);
    let m = d.batch * d.height * d.width;
    let k = d.kernel * d.kernel * d.c_in;
    let mut out = vec![0.0; m * d.c_out];
    gemm(m, k, d.c_out, &cols, (k, 1), w.data(), (d.c_out, 1), 0.0, &mut out);
    Ok((Tensor::from_parts(vec![d.batch, d.height, d.width, d.c_out], out), cols))
}

/// Returns (grad wrt input if requested, grad wrt kernel).
pub(crate) fn conv2d_grad(
    x: &Tensor,
    w: &Tensor,
    cols: &[f64],
    g: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor) {
    let d = conv_dims(x, w).expect("validated in forward");
    let m = d.batch * d.height * d.width;
    let k = d.kernel * d.kernel * d.c_in;
    let mut gw = vec![0.0; k * d.c_out];
    gemm(k, m, d.c_out, cols, (1, k), g.data(), (d.c_out, 1), 0.0, &mut gw);
    let gx = want_input.then(|| {
        let mut gcols = vec![0.0; m * k];
        gemm(m, d.c_out, k, g.data(), (d.c_out, 1), w.data(), (1, d.c_out), 0.0, &mut gcols);
        Tensor::from_parts(x.shape().to_vec(), col2im(&gcols, &d))
    });
    (gx, Tensor::from_parts(w.shape().to_vec(), gw))
}
