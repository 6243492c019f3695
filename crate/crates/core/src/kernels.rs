//! Raw numeric kernels on row-major buffers. No shape checking here; the
//! tape validates shapes before calling in.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// `c[m x p] += a[m x k] * b[k x p]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    // Four output rows share each pass over a row of `b`.
    let blocks = m / 4;
    for ib in 0..blocks {
        let i = ib * 4;
        let (c0, rest) = c[i * p..(i + 4) * p].split_at_mut(p);
        let (c1, rest) = rest.split_at_mut(p);
        let (c2, c3) = rest.split_at_mut(p);
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for i in blocks * 4..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
}

/// `c[m x p] += a[m x k] * b[p x k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    if m >= 4 {
        // Transposing once lets the blocked kernel run with contiguous rows.
        let mut bt = vec![0.0; k * p];
        for j in 0..p {
            for kk in 0..k {
                bt[kk * p + j] = b[j * k + kk];
            }
        }
        gemm_nn(a, &bt, c, m, k, p);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            c[i * p + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m x p] += a[k x m]^T * b[k x p]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for kk in 0..k {
        let brow = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            c[i * p..(i + 1) * p]
                .iter_mut()
                .zip(brow)
                .for_each(|(c, b)| *c += av * b);
        }
    }
}

/// Output axis `i` takes input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        data.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub fn softmax_last(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap();
    let mut data = t.data().to_vec();
    for row in data.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

pub fn log_softmax_last(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap();
    let mut data = t.data().to_vec();
    for row in data.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Unfolds one `[cin, h, w]` image into `[cin * 9, h * w]` patch columns
/// for a padded 3x3 window.
fn im2col(img: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                // Valid output columns: 0 <= x + kx - 1 < w.
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    out[x0..x1].copy_from_slice(&src[x0 + kx - 1..x1 + kx - 1]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, img: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            img[(c * h + sy as usize) * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (batch, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[0];
    let hw = h * wd;
    let mut cols = vec![0.0; cin * 9 * hw];
    let mut out = vec![0.0; batch * cout * hw];
    for n in 0..batch {
        im2col(&x.data()[n * cin * hw..(n + 1) * cin * hw], cin, h, wd, &mut cols);
        let o = &mut out[n * cout * hw..(n + 1) * cout * hw];
        for (co, chunk) in o.chunks_exact_mut(hw).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm_nn(w.data(), &cols, o, cout, cin * 9, hw);
    }
    Tensor::from_parts(vec![batch, cout, h, wd], out)
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv3x3_backward(x: &Tensor, w: &Tensor, g: &[f64], want_dx: bool) -> ConvGrads {
    let s = x.shape();
    let (batch, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[0];
    let hw = h * wd;
    let k = cin * 9;
    let mut cols = vec![0.0; k * hw];
    let mut dcols = vec![0.0; k * hw];
    let mut dw = vec![0.0; cout * k];
    let mut db = vec![0.0; cout];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    for n in 0..batch {
        let gn = &g[n * cout * hw..(n + 1) * cout * hw];
        for (co, chunk) in gn.chunks_exact(hw).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[n * cin * hw..(n + 1) * cin * hw], cin, h, wd, &mut cols);
        gemm_nt(gn, &cols, &mut dw, cout, hw, k);
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            gemm_tn(w.data(), gn, &mut dcols, k, cout, hw);
            col2im(&dcols, cin, h, wd, &mut dx[n * cin * hw..(n + 1) * cin * hw]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Returns the pooled tensor and, per output element, the flat input index
/// that won the max (first maximum on ties).
pub fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(batch * ch * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * ch {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_parts(vec![batch, ch, oh, ow], out), arg)
}
