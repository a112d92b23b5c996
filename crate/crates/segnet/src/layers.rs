//! Forward and backward kernels. Parameters live in one flat `f32` buffer;
//! each layer stores the offset of its block.

use crate::direct;
use crate::tensor::Tensor;
use cosmosseg_core::Shape3;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 21;
const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAK: f32 = 0.01;

/// `C = A·B + beta·C` with arbitrary positive strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output positions `o` with `0 <= o*stride + k - 1 < input`.
fn valid_span(k: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if input + 1 > k { ((input + 1 - k - 1) / stride + 1).min(output) } else { 0 };
    (lo.min(hi), hi)
}

/// 3×3×3 convolution, padding 1, no bias (a norm always follows).
#[derive(Debug, Clone)]
pub(crate) struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub offset: usize,
}

impl Conv3 {
    pub fn len(&self) -> usize {
        self.cout * self.cin * 27
    }

    pub fn fan_in(&self) -> usize {
        self.cin * 27
    }

    pub fn out_shape(&self, s: Shape3) -> Shape3 {
        let f = |d: usize| (d - 1) / self.stride + 1;
        Shape3::new(f(s.z), f(s.y), f(s.x))
    }

    fn planes_per_chunk(&self, out: Shape3) -> usize {
        (COL_BUDGET / (self.cin * 27 * out.plane_len())).clamp(1, out.z)
    }

    fn im2col(&self, x: &Tensor, out: Shape3, z0: usize, z1: usize, col: &mut [f32]) {
        let si = x.shape;
        let s = self.stride;
        let nc = (z1 - z0) * out.plane_len();
        for ci in 0..self.cin {
            let xin = x.channel(ci);
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                        let dst = &mut col[row * nc..(row + 1) * nc];
                        let (lo, hi) = valid_span(kx, s, si.x, out.x);
                        for oz in z0..z1 {
                            let iz = (oz * s + kz) as isize - 1;
                            for oy in 0..out.y {
                                let iy = (oy * s + ky) as isize - 1;
                                let d = &mut dst[((oz - z0) * out.y + oy) * out.x..][..out.x];
                                if iz < 0 || iz >= si.z as isize || iy < 0 || iy >= si.y as isize {
                                    d.fill(0.0);
                                    continue;
                                }
                                let src = &xin[(iz as usize * si.y + iy as usize) * si.x..][..si.x];
                                d[..lo].fill(0.0);
                                d[hi..].fill(0.0);
                                if s == 1 {
                                    let ix0 = lo + kx - 1;
                                    d[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                                } else {
                                    for (ox, v) in d[lo..hi].iter_mut().enumerate() {
                                        *v = src[(ox + lo) * s + kx - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], out: Shape3, z0: usize, z1: usize, dx: &mut Tensor) {
        let si = dx.shape;
        let s = self.stride;
        let nc = (z1 - z0) * out.plane_len();
        for ci in 0..self.cin {
            let dxin = dx.channel_mut(ci);
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                        let src = &col[row * nc..(row + 1) * nc];
                        let (lo, hi) = valid_span(kx, s, si.x, out.x);
                        for oz in z0..z1 {
                            let iz = (oz * s + kz) as isize - 1;
                            if iz < 0 || iz >= si.z as isize {
                                continue;
                            }
                            for oy in 0..out.y {
                                let iy = (oy * s + ky) as isize - 1;
                                if iy < 0 || iy >= si.y as isize {
                                    continue;
                                }
                                let c = &src[((oz - z0) * out.y + oy) * out.x..][..out.x];
                                let d = &mut dxin[(iz as usize * si.y + iy as usize) * si.x..][..si.x];
                                for ox in lo..hi {
                                    d[ox * s + kx - 1] += c[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn use_direct(&self) -> bool {
        self.stride == 1 && self.cout == direct::L
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.cin);
        if self.use_direct() {
            direct::conv3_forward(self.cin, self.cout, &params[self.offset..self.offset + self.len()], x)
        } else {
            self.forward_gemm(params, x)
        }
    }

    pub(crate) fn forward_gemm(&self, params: &[f32], x: &Tensor) -> Tensor {
        let out_shape = self.out_shape(x.shape);
        let mut out = Tensor::zeros(self.cout, out_shape);
        let w = &params[self.offset..self.offset + self.len()];
        let k = self.cin * 27;
        let pl = out_shape.plane_len();
        let n_all = out_shape.len();
        let zc = self.planes_per_chunk(out_shape);
        let mut col = vec![0.0f32; k * zc * pl];
        for z0 in (0..out_shape.z).step_by(zc) {
            let z1 = (z0 + zc).min(out_shape.z);
            let nc = (z1 - z0) * pl;
            self.im2col(x, out_shape, z0, z1, &mut col);
            // out^T[n, co] = col^T[n, k] · w^T[k, co]
            gemm(nc, k, self.cout, &col, (1, nc), w, (1, k), 0.0, &mut out.data[z0 * pl..], (1, n_all));
        }
        out
    }

    /// Accumulates `dw` only, through im2col + GEMM.
    pub(crate) fn weight_grad_gemm(&self, x: &Tensor, dout: &Tensor, dw: &mut [f32]) {
        let out_shape = dout.shape;
        let k = self.cin * 27;
        let pl = out_shape.plane_len();
        let n_all = out_shape.len();
        let zc = self.planes_per_chunk(out_shape);
        let mut col = vec![0.0f32; k * zc * pl];
        for z0 in (0..out_shape.z).step_by(zc) {
            let z1 = (z0 + zc).min(out_shape.z);
            let nc = (z1 - z0) * pl;
            self.im2col(x, out_shape, z0, z1, &mut col);
            // dw[co, k] += dout[co, n] · col^T[n, k]
            gemm(self.cout, nc, k, &dout.data[z0 * pl..], (n_all, 1), &col, (1, nc), 1.0, dw, (k, 1));
        }
    }

    /// Accumulates weight gradients; returns the input gradient if requested.
    pub fn backward(&self, params: &[f32], x: &Tensor, dout: &Tensor, grad: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let w = &params[self.offset..self.offset + self.len()];
        let dw = &mut grad[self.offset..self.offset + self.len()];
        if self.stride == 1 {
            if self.use_direct() {
                direct::conv3_weight_grad(self.cin, self.cout, x, dout, dw);
            } else {
                self.weight_grad_gemm(x, dout, dw);
            }
            if !need_dx {
                return None;
            }
            // the input gradient is a convolution of dout with the flipped,
            // channel-transposed kernel
            let mut flipped = vec![0.0f32; self.len()];
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    for t in 0..27 {
                        flipped[(ci * self.cout + co) * 27 + 26 - t] = w[(co * self.cin + ci) * 27 + t];
                    }
                }
            }
            let adjoint = Conv3 {
                cin: self.cout,
                cout: self.cin,
                stride: 1,
                offset: 0,
            };
            return Some(adjoint.forward(&flipped, dout));
        }

        let out_shape = dout.shape;
        let k = self.cin * 27;
        let pl = out_shape.plane_len();
        let n_all = out_shape.len();
        let zc = self.planes_per_chunk(out_shape);
        let mut col = vec![0.0f32; k * zc * pl];
        let mut dcol = if need_dx { vec![0.0f32; k * zc * pl] } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(self.cin, x.shape));
        for z0 in (0..out_shape.z).step_by(zc) {
            let z1 = (z0 + zc).min(out_shape.z);
            let nc = (z1 - z0) * pl;
            let dchunk = &dout.data[z0 * pl..];
            self.im2col(x, out_shape, z0, z1, &mut col);
            gemm(self.cout, nc, k, dchunk, (n_all, 1), &col, (1, nc), 1.0, dw, (k, 1));
            if let Some(dx) = dx.as_mut() {
                // dcol[k, n] = w^T[k, co] · dout[co, n]
                gemm(k, self.cout, nc, w, (1, k), dchunk, (n_all, 1), 0.0, &mut dcol, (nc, 1));
                self.col2im(&dcol, out_shape, z0, z1, dx);
            }
        }
        dx
    }
}

/// Per-channel statistics saved by [`NormAct::forward`].
#[derive(Debug, Clone)]
pub(crate) struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Affine instance norm followed by leaky ReLU. Parameters: `gamma[ch]`, `beta[ch]`.
#[derive(Debug, Clone)]
pub(crate) struct NormAct {
    pub ch: usize,
    pub offset: usize,
}

impl NormAct {
    pub fn len(&self) -> usize {
        2 * self.ch
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> (Tensor, NormStats) {
        let (gamma, beta) = params[self.offset..self.offset + 2 * self.ch].split_at(self.ch);
        let mut y = x.clone();
        let mut stats = NormStats {
            mean: Vec::with_capacity(self.ch),
            rstd: Vec::with_capacity(self.ch),
        };
        let n = x.voxels() as f64;
        for c in 0..self.ch {
            let xc = x.channel(c);
            let mean = xc.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = xc.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            let (m, r) = (mean as f32, rstd as f32);
            let (g, b) = (gamma[c] * r, beta[c] - gamma[c] * r * m);
            for v in y.channel_mut(c) {
                let z = g * *v + b;
                *v = if z > 0.0 { z } else { LEAK * z };
            }
            stats.mean.push(m);
            stats.rstd.push(r);
        }
        (y, stats)
    }

    pub fn backward(&self, params: &[f32], x: &Tensor, stats: &NormStats, dy: &Tensor, grad: &mut [f32]) -> Tensor {
        let (gamma, beta) = params[self.offset..self.offset + 2 * self.ch].split_at(self.ch);
        let (dgamma, dbeta) = grad[self.offset..self.offset + 2 * self.ch].split_at_mut(self.ch);
        let mut dx = Tensor::zeros(self.ch, x.shape);
        let n = x.voxels();
        let mut dxhat = vec![0.0f32; n];
        for c in 0..self.ch {
            let (m, r) = (stats.mean[c], stats.rstd[c]);
            let (xc, dyc) = (x.channel(c), dy.channel(c));
            let (mut sg, mut sb, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                let xh = (xc[i] - m) * r;
                let z = gamma[c] * xh + beta[c];
                let dz = if z > 0.0 { dyc[i] } else { LEAK * dyc[i] };
                sg += (dz * xh) as f64;
                sb += dz as f64;
                let dh = dz * gamma[c];
                dxhat[i] = dh;
                s1 += dh as f64;
                s2 += (dh * xh) as f64;
            }
            dgamma[c] += sg as f32;
            dbeta[c] += sb as f32;
            let (mean1, mean2) = ((s1 / n as f64) as f32, (s2 / n as f64) as f32);
            for (i, d) in dx.channel_mut(c).iter_mut().enumerate() {
                let xh = (xc[i] - m) * r;
                *d = r * (dxhat[i] - mean1 - xh * mean2);
            }
        }
        dx
    }
}

/// Transposed convolution, kernel 2, stride 2, no bias. Weights `[cin][cout·8]`.
#[derive(Debug, Clone)]
pub(crate) struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

impl UpConv {
    pub fn len(&self) -> usize {
        self.cin * self.cout * 8
    }

    /// Fan-in as computed for transposed-conv weights of shape `(cin, cout, 2, 2, 2)`.
    pub fn fan_in(&self) -> usize {
        self.cout * 8
    }

    fn scatter(&self, tmp: &[f32], si: Shape3, out: &mut Tensor) {
        let so = out.shape;
        let nin = si.len();
        for co in 0..self.cout {
            let dst = out.channel_mut(co);
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let j = co * 8 + kz * 4 + ky * 2 + kx;
                        let src = &tmp[j * nin..(j + 1) * nin];
                        for z in 0..si.z {
                            for y in 0..si.y {
                                let row = &src[(z * si.y + y) * si.x..][..si.x];
                                let d = &mut dst[((2 * z + kz) * so.y + 2 * y + ky) * so.x..][..so.x];
                                for (x, &v) in row.iter().enumerate() {
                                    d[2 * x + kx] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather(&self, dout: &Tensor, si: Shape3, tmp: &mut [f32]) {
        let so = dout.shape;
        let nin = si.len();
        for co in 0..self.cout {
            let src = dout.channel(co);
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let j = co * 8 + kz * 4 + ky * 2 + kx;
                        let dst = &mut tmp[j * nin..(j + 1) * nin];
                        for z in 0..si.z {
                            for y in 0..si.y {
                                let d = &mut dst[(z * si.y + y) * si.x..][..si.x];
                                let s = &src[((2 * z + kz) * so.y + 2 * y + ky) * so.x..][..so.x];
                                for (x, v) in d.iter_mut().enumerate() {
                                    *v = s[2 * x + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> Tensor {
        let si = x.shape;
        let nin = si.len();
        let j = self.cout * 8;
        let w = &params[self.offset..self.offset + self.len()];
        let mut tmp = vec![0.0f32; j * nin];
        // tmp[j, n] = w^T[j, ci] · x[ci, n]
        gemm(j, self.cin, nin, w, (1, j), &x.data, (nin, 1), 0.0, &mut tmp, (nin, 1));
        let mut out = Tensor::zeros(self.cout, Shape3::new(2 * si.z, 2 * si.y, 2 * si.x));
        self.scatter(&tmp, si, &mut out);
        out
    }

    pub fn backward(&self, params: &[f32], x: &Tensor, dout: &Tensor, grad: &mut [f32]) -> Tensor {
        let si = x.shape;
        let nin = si.len();
        let j = self.cout * 8;
        let w = &params[self.offset..self.offset + self.len()];
        let mut dtmp = vec![0.0f32; j * nin];
        self.gather(dout, si, &mut dtmp);
        let dw = &mut grad[self.offset..self.offset + self.len()];
        // dw[ci, j] += x[ci, n] · dtmp^T[n, j]
        gemm(self.cin, nin, j, &x.data, (nin, 1), &dtmp, (1, nin), 1.0, dw, (j, 1));
        let mut dx = Tensor::zeros(self.cin, si);
        // dx[ci, n] = w[ci, j] · dtmp[j, n]
        gemm(self.cin, j, nin, w, (j, 1), &dtmp, (nin, 1), 0.0, &mut dx.data, (nin, 1));
        dx
    }
}

/// 1×1×1 convolution with bias. Parameters: `w[cout][cin]`, then `b[cout]`.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

impl Head {
    pub fn len(&self) -> usize {
        self.cout * (self.cin + 1)
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> Tensor {
        let n = x.voxels();
        let w = &params[self.offset..self.offset + self.cout * self.cin];
        let b = &params[self.offset + self.cout * self.cin..self.offset + self.len()];
        let mut out = Tensor::zeros(self.cout, x.shape);
        gemm(self.cout, self.cin, n, w, (self.cin, 1), &x.data, (n, 1), 0.0, &mut out.data, (n, 1));
        for (c, &bc) in b.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v += bc);
        }
        out
    }

    pub fn backward(&self, params: &[f32], x: &Tensor, dout: &Tensor, grad: &mut [f32]) -> Tensor {
        let n = x.voxels();
        let nw = self.cout * self.cin;
        let w = &params[self.offset..self.offset + nw];
        {
            let (dw, db) = grad[self.offset..self.offset + self.len()].split_at_mut(nw);
            gemm(self.cout, n, self.cin, &dout.data, (n, 1), &x.data, (1, n), 1.0, dw, (self.cin, 1));
            for (c, d) in db.iter_mut().enumerate() {
                *d += dout.channel(c).iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        let mut dx = Tensor::zeros(self.cin, x.shape);
        gemm(self.cin, self.cout, n, w, (1, self.cin), &dout.data, (n, 1), 0.0, &mut dx.data, (n, 1));
        dx
    }
}
