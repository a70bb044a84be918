//! Forward/backward kernels. Backward functions accumulate parameter
//! gradients into the buffers they are handed and return the input gradient.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y[r, :] += x[r, :] · w` for a row-major `[rows, inp]` x and `[inp, out]` w.
fn matmul_acc(x: &[f64], inp: usize, w: &[f64], out: usize, y: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
        for (&xi, wrow) in xr.iter().zip(w.chunks_exact(out)) {
            if xi == 0.0 {
                continue;
            }
            for (yo, &wo) in yr.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
}

/// `dx[r, i] += Σ_o dy[r, o] · w[i, o]`
fn matmul_t_acc(dy: &[f64], out: usize, w: &[f64], inp: usize, dx: &mut [f64]) {
    for (dyr, dxr) in dy.chunks_exact(out).zip(dx.chunks_exact_mut(inp)) {
        for (dxi, wrow) in dxr.iter_mut().zip(w.chunks_exact(out)) {
            *dxi += wrow.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `dw[i, o] += Σ_r x[r, i] · dy[r, o]`
fn outer_acc(x: &[f64], inp: usize, dy: &[f64], out: usize, dw: &mut [f64]) {
    for (xr, dyr) in x.chunks_exact(inp).zip(dy.chunks_exact(out)) {
        for (&xi, dwrow) in xr.iter().zip(dw.chunks_exact_mut(out)) {
            if xi == 0.0 {
                continue;
            }
            for (d, &g) in dwrow.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
    }
}

fn last_dim(x: &Tensor, what: &str) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid(format!("{what}: scalar input")))
}

/// `y = x·W + b` over the last axis of `x`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let inp = last_dim(x, "dense")?;
    if w.shape().len() != 2 || w.shape()[0] != inp {
        return Err(Error::invalid(format!(
            "dense: input width {inp} does not match weight shape {:?}",
            w.shape()
        )));
    }
    let out = w.shape()[1];
    b.expect_shape(&[out], "dense bias")?;
    let rows = x.len() / inp.max(1);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b.data());
    }
    matmul_acc(x.data(), inp, w.data(), out, &mut y);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::from_vec(&shape, y)
}

pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let inp = w.shape()[0];
    let out = w.shape()[1];
    outer_acc(x.data(), inp, dy.data(), out, dw.data_mut());
    for row in dy.data().chunks_exact(out) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    matmul_t_acc(dy.data(), out, w.data(), inp, dx.data_mut());
    dx
}

fn seq_dims(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, t, c] => Ok((b, t, c)),
        s => Err(Error::invalid(format!(
            "{what}: expected [batch, frames, channels], got {s:?}"
        ))),
    }
}

/// Time convolution with additive skip and tanh:
/// `y[t] = tanh(Σ_j x[t + j - k/2] · K[j] + bias + x[t])`, zero-padded.
///
/// `kernel` is `[k, ch, ch]`.
pub fn tc_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, t, c) = seq_dims(x, "tc")?;
    let k = check_tc_kernel(kernel, c)?;
    bias.expect_shape(&[c], "tc bias")?;
    let half = (k / 2) as isize;
    let mut y = x.clone();
    for s in 0..b {
        let xs = &x.data()[s * t * c..(s + 1) * t * c];
        let ys = &mut y.data_mut()[s * t * c..(s + 1) * t * c];
        for ti in 0..t {
            let yr = &mut ys[ti * c..(ti + 1) * c];
            for (yo, bo) in yr.iter_mut().zip(bias.data()) {
                *yo += bo;
            }
            for j in 0..k {
                let src = ti as isize + j as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let kj = &kernel.data()[j * c * c..(j + 1) * c * c];
                matmul_acc(&xs[src * c..(src + 1) * c], c, kj, c, yr);
            }
            for v in yr.iter_mut() {
                *v = v.tanh();
            }
        }
    }
    Ok(y)
}

fn check_tc_kernel(kernel: &Tensor, c: usize) -> Result<usize> {
    match kernel.shape() {
        &[k, ci, co] if ci == c && co == c => {
            if k % 2 == 0 {
                Err(Error::invalid(format!(
                    "tc kernel width must be odd, got {k}"
                )))
            } else {
                Ok(k)
            }
        }
        s => Err(Error::invalid(format!(
            "tc kernel shape {s:?} incompatible with {c} channels (skip requires in = out)"
        ))),
    }
}

/// Backward of [`tc_forward`] given its output `y`.
pub fn tc_backward(
    x: &Tensor,
    kernel: &Tensor,
    y: &Tensor,
    dy: &Tensor,
    dkernel: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[0];
    let half = (k / 2) as isize;
    // pre-activation gradient; also the skip-path input gradient
    let dpre: Vec<f64> = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &g)| g * (1.0 - yv * yv))
        .collect();
    let mut dx = Tensor::from_vec(x.shape(), dpre.clone()).expect("shape preserved");
    for row in dpre.chunks_exact(c) {
        for (d, g) in dbias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    for s in 0..b {
        let xs = &x.data()[s * t * c..(s + 1) * t * c];
        let ds = &dpre[s * t * c..(s + 1) * t * c];
        for ti in 0..t {
            let g = &ds[ti * c..(ti + 1) * c];
            for j in 0..k {
                let src = ti as isize + j as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let range = j * c * c..(j + 1) * c * c;
                outer_acc(
                    &xs[src * c..(src + 1) * c],
                    c,
                    g,
                    c,
                    &mut dkernel.data_mut()[range.clone()],
                );
                let dxs = &mut dx.data_mut()[s * t * c + src * c..s * t * c + (src + 1) * c];
                matmul_t_acc(g, c, &kernel.data()[range], c, dxs);
            }
        }
    }
    dx
}

/// Per-step activations kept for backprop through time.
#[derive(Debug, Clone)]
pub struct GruTrace {
    /// `[batch, frames, hidden]` outputs.
    pub h: Tensor,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

/// One GRU layer over full sequences with zero initial state.
///
/// Gates are packed `[z | r | n]` along the last axis of `w` (`[in, 3H]`),
/// `u` (`[H, 3H]`) and `b` (`[3H]`):
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + (r⊙h)U_n + b_n)`, `h' = (1-z)⊙h + z⊙n`.
pub fn gru_layer_forward(x: &Tensor, w: &Tensor, u: &Tensor, b: &Tensor) -> Result<GruTrace> {
    let (batch, t, inp) = seq_dims(x, "gru")?;
    if w.shape().len() != 2 || w.shape()[0] != inp || !w.shape()[1].is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "gru: input width {inp} incompatible with weight shape {:?}",
            w.shape()
        )));
    }
    let h3 = w.shape()[1];
    let hid = h3 / 3;
    if hid == 0 {
        return Err(Error::invalid("gru: hidden size must be >= 1"));
    }
    u.expect_shape(&[hid, h3], "gru recurrent weights")?;
    b.expect_shape(&[h3], "gru bias")?;

    // input contributions for every frame at once
    let mut xw = Vec::with_capacity(batch * t * h3);
    for _ in 0..batch * t {
        xw.extend_from_slice(b.data());
    }
    matmul_acc(x.data(), inp, w.data(), h3, &mut xw);

    let total = batch * t * hid;
    let mut h = vec![0.0; total];
    let mut z = vec![0.0; total];
    let mut r = vec![0.0; total];
    let mut n = vec![0.0; total];
    let (u_zr, u_n) = split_cols(u.data(), hid);
    let mut hu = vec![0.0; 2 * hid];
    let mut rh = vec![0.0; hid];
    let mut rhu = vec![0.0; hid];
    let zeros = vec![0.0; hid];
    for s in 0..batch {
        for ti in 0..t {
            let idx = (s * t + ti) * hid;
            let prev: &[f64] = if ti == 0 { &zeros } else { &h[idx - hid..idx] };
            hu.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(prev, hid, &u_zr, 2 * hid, &mut hu);
            let a = &xw[(s * t + ti) * h3..(s * t + ti + 1) * h3];
            for j in 0..hid {
                z[idx + j] = sigmoid(a[j] + hu[j]);
                r[idx + j] = sigmoid(a[hid + j] + hu[hid + j]);
                rh[j] = r[idx + j] * prev[j];
            }
            rhu.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&rh, hid, &u_n, hid, &mut rhu);
            let mut next = vec![0.0; hid];
            for j in 0..hid {
                let nv = (a[2 * hid + j] + rhu[j]).tanh();
                n[idx + j] = nv;
                next[j] = (1.0 - z[idx + j]) * prev[j] + z[idx + j] * nv;
            }
            h[idx..idx + hid].copy_from_slice(&next);
        }
    }
    Ok(GruTrace {
        h: Tensor::from_vec(&[batch, t, hid], h)?,
        z,
        r,
        n,
    })
}

// Splits packed `[H, 3H]` recurrent weights into `[H, 2H]` (z|r) and `[H, H]` (n).
fn split_cols(u: &[f64], hid: usize) -> (Vec<f64>, Vec<f64>) {
    let mut zr = Vec::with_capacity(hid * 2 * hid);
    let mut nn = Vec::with_capacity(hid * hid);
    for row in u.chunks_exact(3 * hid) {
        zr.extend_from_slice(&row[..2 * hid]);
        nn.extend_from_slice(&row[2 * hid..]);
    }
    (zr, nn)
}

/// Backprop through time for one GRU layer. `dh` is the gradient w.r.t.
/// every output frame.
#[allow(clippy::too_many_arguments)]
pub fn gru_layer_backward(
    x: &Tensor,
    w: &Tensor,
    u: &Tensor,
    trace: &GruTrace,
    dh: &Tensor,
    dw: &mut Tensor,
    du: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let (batch, t, inp) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h3 = w.shape()[1];
    let hid = h3 / 3;
    let h = trace.h.data();
    // packed pre-activation gradients for every frame
    let mut da = vec![0.0; batch * t * h3];
    let zeros = vec![0.0; hid];
    let mut carry = vec![0.0; hid];
    let mut rh = vec![0.0; hid];
    for s in 0..batch {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for ti in (0..t).rev() {
            let idx = (s * t + ti) * hid;
            let prev: &[f64] = if ti == 0 { &zeros } else { &h[idx - hid..idx] };
            let g: Vec<f64> = (0..hid).map(|j| dh.data()[idx + j] + carry[j]).collect();
            let a = &mut da[(s * t + ti) * h3..(s * t + ti + 1) * h3];
            let mut dprev = vec![0.0; hid];
            for j in 0..hid {
                let (zv, nv) = (trace.z[idx + j], trace.n[idx + j]);
                let dz = g[j] * (nv - prev[j]);
                let dn = g[j] * zv;
                dprev[j] = g[j] * (1.0 - zv);
                a[j] = dz * zv * (1.0 - zv);
                a[2 * hid + j] = dn * (1.0 - nv * nv);
                rh[j] = trace.r[idx + j] * prev[j];
            }
            // candidate path through r⊙h
            let mut drh = vec![0.0; hid];
            for (i, d) in drh.iter_mut().enumerate() {
                let urow = &u.data()[i * h3 + 2 * hid..(i + 1) * h3];
                *d = urow.iter().zip(&a[2 * hid..]).map(|(p, q)| p * q).sum();
            }
            for j in 0..hid {
                let rv = trace.r[idx + j];
                let dr = drh[j] * prev[j];
                dprev[j] += drh[j] * rv;
                a[hid + j] = dr * rv * (1.0 - rv);
            }
            // recurrent weight grads and h_prev grads through z and r
            let dun = du.data_mut();
            for i in 0..hid {
                let row = &mut dun[i * h3..(i + 1) * h3];
                let (p, q) = (prev[i], rh[i]);
                for j in 0..2 * hid {
                    row[j] += p * a[j];
                }
                for j in 0..hid {
                    row[2 * hid + j] += q * a[2 * hid + j];
                }
                let urow = &u.data()[i * h3..(i + 1) * h3];
                dprev[i] += urow[..2 * hid]
                    .iter()
                    .zip(&a[..2 * hid])
                    .map(|(p, q)| p * q)
                    .sum::<f64>();
            }
            carry.copy_from_slice(&dprev);
        }
    }
    outer_acc(x.data(), inp, &da, h3, dw.data_mut());
    for row in da.chunks_exact(h3) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    matmul_t_acc(&da, h3, w.data(), inp, dx.data_mut());
    dx
}

/// Mean over the first `lengths[b]` frames of each sequence.
pub fn mean_pool_time(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (b, t, c) = seq_dims(x, "mean pool")?;
    if lengths.len() != b {
        return Err(Error::invalid(format!(
            "mean pool: {} lengths for batch of {b}",
            lengths.len()
        )));
    }
    let mut out = vec![0.0; b * c];
    for (s, &len) in lengths.iter().enumerate() {
        if len == 0 || len > t {
            return Err(Error::invalid(format!(
                "mean pool: valid length {len} outside 1..={t}"
            )));
        }
        let o = &mut out[s * c..(s + 1) * c];
        for row in x.data()[s * t * c..(s * t + len) * c].chunks_exact(c) {
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= len as f64);
    }
    Tensor::from_vec(&[b, c], out)
}

pub fn mean_pool_time_backward(dy: &Tensor, lengths: &[usize], frames: usize) -> Tensor {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(&[b, frames, c]);
    for (s, &len) in lengths.iter().enumerate() {
        let g = &dy.data()[s * c..(s + 1) * c];
        for ti in 0..len {
            let row = &mut dx.data_mut()[(s * frames + ti) * c..(s * frames + ti + 1) * c];
            for (d, v) in row.iter_mut().zip(g) {
                *d = v / len as f64;
            }
        }
    }
    dx
}

pub fn tanh_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.tanh()).collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(yv, g)| g * (1.0 - yv * yv))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("shape preserved")
}
