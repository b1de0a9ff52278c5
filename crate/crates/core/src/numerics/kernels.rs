//! Raw loops behind the graph operations. Shapes are validated by the caller.

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + k - pad < len`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let (k, pad, stride, len) = (k as isize, pad as isize, stride as isize, len as isize);
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let top = len - 1 + pad - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / stride + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

#[cfg(test)]
fn conv2d_direct(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let src = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_in = &src[iy * g.w..][..g.w];
                            let row_out = &mut dst[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let a = (ox0 as isize + off) as usize;
                                let len = ox1 - ox0;
                                for (o, i) in row_out[ox0..ox1].iter_mut().zip(&row_in[a..a + len]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_direct`] with respect to its input.
#[cfg(test)]
fn conv2d_input_grad_direct(gy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.n * g.cin * g.h * g.w];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let src = &gy[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let dst = &mut gx[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_g = &src[oy * g.ow..][..g.ow];
                            let row_x = &mut dst[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let a = (ox0 as isize + off) as usize;
                                let len = ox1 - ox0;
                                for (xv, gv) in row_x[a..a + len].iter_mut().zip(&row_g[ox0..ox1]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_x[ox * g.stride + kx - g.pad] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d_direct`] with respect to its kernel.
#[cfg(test)]
fn conv2d_weight_grad_direct(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let src_g = &gy[(n * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let src_x = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_x = &src_x[iy * g.w..][..g.w];
                            let row_g = &src_g[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let a = (ox0 as isize + off) as usize;
                                let len = ox1 - ox0;
                                acc += row_x[a..a + len]
                                    .iter()
                                    .zip(&row_g[ox0..ox1])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += row_x[ox * g.stride + kx - g.pad] * row_g[ox];
                                }
                            }
                        }
                        gw[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 kernel with unit stride and no padding unfolds to the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample (`[Cin, H, W]`) into columns `[Cin*KH*KW, OH*OW]`.
///
/// Only in-bounds taps are written, so a zeroed buffer can be reused across
/// samples with the same geometry.
fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                let dst = &mut out[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let d = &mut dst[oy * g.ow..][..g.ow];
                    let s = &src[iy * g.w..][..g.w];
                    for ox in ox0..ox1 {
                        d[ox] = s[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one `[Cin, H, W]` sample.
fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut out[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                let src = &cols[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.ow..][..g.ow];
                    let d = &mut dst[iy * g.w..][..g.w];
                    for ox in ox0..ox1 {
                        d[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (`[N, Cin, H, W]`) with `wt` (`[Cout, Cin, KH, KW]`).
pub(crate) fn conv2d(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    for n in 0..g.n {
        let xs = &x[n * in_len..][..in_len];
        let dst = &mut out[n * g.cout * p..][..g.cout * p];
        if g.is_pointwise() {
            matmul_into(wt, xs, g.cout, k, p, dst);
        } else {
            im2col(xs, g, &mut cols);
            matmul_into(wt, &cols, g.cout, k, p, dst);
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_input_grad(gy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.h * g.w;
    let wt_t = transpose(wt, g.cout, k);
    let mut out = vec![0.0; g.n * in_len];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.n {
        let gs = &gy[n * g.cout * p..][..g.cout * p];
        let dst = &mut out[n * in_len..][..in_len];
        if g.is_pointwise() {
            matmul_into(&wt_t, gs, k, g.cout, p, dst);
        } else {
            matmul_into(&wt_t, gs, k, g.cout, p, &mut cols);
            col2im(&cols, g, dst);
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.cout * k];
    let mut part = vec![0.0; g.cout * k];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.n {
        let xs = &x[n * in_len..][..in_len];
        let gs = &gy[n * g.cout * p..][..g.cout * p];
        let cols_t = if g.is_pointwise() {
            transpose(xs, k, p)
        } else {
            im2col(xs, g, &mut cols);
            transpose(&cols, k, p)
        };
        matmul_into(gs, &cols_t, g.cout, p, k, &mut part);
        for (o, v) in out.iter_mut().zip(&part) {
            *o += v;
        }
    }
    out
}

/// `[m, k] x [k, n] -> [m, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

/// Writes `a x b` into `out`, overwriting it.
///
/// Register-blocked over 4x8 output tiles. Every output element is summed
/// over `k` in increasing order, so the result does not depend on blocking.
const MR: usize = 4;
const NR: usize = 8;

/// One `MR x NR` output tile from packed `k x MR` and `k x NR` panels.
#[inline(always)]
fn micro_kernel(a_panel: &[f64], b_panel: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (ac, bc) in a_panel.chunks_exact(MR).zip(b_panel.chunks_exact(NR)) {
        let av: &[f64; MR] = ac.try_into().expect("MR-wide chunk");
        let bv: &[f64; NR] = bc.try_into().expect("NR-wide chunk");
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] += av[r] * bv[c];
            }
        }
    }
    acc
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let m_main = m / MR * MR;
    let n_main = n / NR * NR;
    // Row blocks of `a` interleaved so each step of the kernel reads MR adjacent values.
    let mut a_pack = vec![0.0; m_main * k];
    for (blk, dst) in a_pack.chunks_exact_mut(MR * k).enumerate() {
        for p in 0..k {
            for r in 0..MR {
                dst[p * MR + r] = a[(blk * MR + r) * k + p];
            }
        }
    }
    let mut b_pack = vec![0.0; k * NR];
    for j in (0..n_main).step_by(NR) {
        for (p, dst) in b_pack.chunks_exact_mut(NR).enumerate() {
            dst.copy_from_slice(&b[p * n + j..][..NR]);
        }
        for (blk, a_panel) in a_pack.chunks_exact(MR * k).enumerate() {
            let acc = micro_kernel(a_panel, &b_pack);
            for (r, row) in acc.iter().enumerate() {
                out[(blk * MR + r) * n + j..][..NR].copy_from_slice(row);
            }
        }
    }
    // Leftover columns of the blocked rows, then leftover rows in full.
    if n_main < n {
        for i in 0..m_main {
            for jj in n_main..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + jj];
                }
                out[i * n + jj] = s;
            }
        }
    }
    for i in m_main..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bb) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bb;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of `[planes, h, w]`.
pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// 2x2 sum pooling of `[planes, h, w]` with even `h`, `w`.
pub(crate) fn sumpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * ow + xx / 2] += src[y * w + xx];
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
