//! Direct stride-1 3×3×3 convolution for layers with few output channels,
//! where im2col + GEMM is memory bound. Output channels are processed in
//! blocks of `L`, which the compiler maps onto one SIMD register.

use crate::tensor::Tensor;
use cosmosseg_core::Shape3;

pub(crate) const L: usize = 8;
const XB: usize = 8;

#[inline(always)]
fn fma<const F: bool>(a: f32, b: f32, c: f32) -> f32 {
    if F {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Zero-pads every channel by one voxel, with slack at the end so register
/// blocks may read past the last row.
fn pad(x: &Tensor) -> Vec<f32> {
    let s = x.shape;
    let (py, px) = (s.y + 2, s.x + 2);
    let pch = (s.z + 2) * py * px;
    let mut out = vec![0.0f32; x.channels * pch + XB + 2];
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..s.z {
            for y in 0..s.y {
                let d = c * pch + ((z + 1) * py + y + 1) * px + 1;
                out[d..d + s.x].copy_from_slice(&src[(z * s.y + y) * s.x..][..s.x]);
            }
        }
    }
    out
}

#[inline(always)]
fn forward_kernel<const F: bool>(cin: usize, cout: usize, wt: &[f32], xp: &[f32], s: Shape3, out: &mut [f32]) {
    let (py, px) = (s.y + 2, s.x + 2);
    let pplane = py * px;
    let pch = (s.z + 2) * pplane;
    let n = s.len();
    let block = cin * 27 * L;
    for cb in 0..cout / L {
        let wcb = &wt[cb * block..(cb + 1) * block];
        for oz in 0..s.z {
            for oy in 0..s.y {
                let mut x0 = 0;
                while x0 < s.x {
                    let mut acc = [[0.0f32; L]; XB];
                    for ci in 0..cin {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                let r0 = ci * pch + (oz + kz) * pplane + (oy + ky) * px + x0;
                                let row = &xp[r0..r0 + XB + 2];
                                for kx in 0..3 {
                                    let t = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                                    let w: [f32; L] = wcb[t * L..(t + 1) * L].try_into().unwrap();
                                    for (i, a) in acc.iter_mut().enumerate() {
                                        let v = row[i + kx];
                                        for j in 0..L {
                                            a[j] = fma::<F>(v, w[j], a[j]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let xb = (s.x - x0).min(XB);
                    let o = (oz * s.y + oy) * s.x + x0;
                    for (i, a) in acc.iter().enumerate().take(xb) {
                        for j in 0..L {
                            out[(cb * L + j) * n + o + i] = a[j];
                        }
                    }
                    x0 += XB;
                }
            }
        }
    }
}

#[inline(always)]
fn weight_grad_kernel<const F: bool>(cin: usize, xp: &[f32], dt: &[f32], s: Shape3, acc: &mut [[f32; L]]) {
    let (py, px) = (s.y + 2, s.x + 2);
    let pplane = py * px;
    let pch = (s.z + 2) * pplane;
    for oz in 0..s.z {
        for oy in 0..s.y {
            let drow = &dt[(oz * s.y + oy) * s.x * L..][..s.x * L];
            for ci in 0..cin {
                for kz in 0..3 {
                    for ky in 0..3 {
                        let r0 = ci * pch + (oz + kz) * pplane + (oy + ky) * px;
                        let row = &xp[r0..r0 + s.x + 2];
                        let mut a = [[[0.0f32; L]; 3]; 2];
                        let pairs = s.x / 2;
                        for p in 0..pairs {
                            for (u, au) in a.iter_mut().enumerate() {
                                let ox = 2 * p + u;
                                let d: [f32; L] = drow[ox * L..(ox + 1) * L].try_into().unwrap();
                                for (kx, ak) in au.iter_mut().enumerate() {
                                    let v = row[ox + kx];
                                    for j in 0..L {
                                        ak[j] = fma::<F>(v, d[j], ak[j]);
                                    }
                                }
                            }
                        }
                        if s.x % 2 == 1 {
                            let ox = s.x - 1;
                            let d: [f32; L] = drow[ox * L..(ox + 1) * L].try_into().unwrap();
                            for (kx, ak) in a[0].iter_mut().enumerate() {
                                let v = row[ox + kx];
                                for j in 0..L {
                                    ak[j] = fma::<F>(v, d[j], ak[j]);
                                }
                            }
                        }
                        for kx in 0..3 {
                            let dst = &mut acc[((ci * 3 + kz) * 3 + ky) * 3 + kx];
                            for j in 0..L {
                                dst[j] += a[0][kx][j] + a[1][kx][j];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_avx2(cin: usize, cout: usize, wt: &[f32], xp: &[f32], s: Shape3, out: &mut [f32]) {
    forward_kernel::<true>(cin, cout, wt, xp, s, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_avx2(cin: usize, xp: &[f32], dt: &[f32], s: Shape3, acc: &mut [[f32; L]]) {
    weight_grad_kernel::<true>(cin, xp, dt, s, acc)
}

fn has_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Same-size convolution; `w` is laid out `[co][ci][27]` and `cout % L == 0`.
pub(crate) fn conv3_forward(cin: usize, cout: usize, w: &[f32], x: &Tensor) -> Tensor {
    debug_assert_eq!(cout % L, 0);
    let s = x.shape;
    // regroup weights as [cb][ci][tap][lane]
    let mut wt = vec![0.0f32; w.len()];
    for co in 0..cout {
        let (cb, j) = (co / L, co % L);
        for ci in 0..cin {
            for t in 0..27 {
                wt[((cb * cin + ci) * 27 + t) * L + j] = w[(co * cin + ci) * 27 + t];
            }
        }
    }
    let xp = pad(x);
    let mut out = Tensor::zeros(cout, s);
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the CPU supports the enabled features (checked above).
        unsafe { forward_avx2(cin, cout, &wt, &xp, s, &mut out.data) };
        return out;
    }
    forward_kernel::<false>(cin, cout, &wt, &xp, s, &mut out.data);
    out
}

/// Accumulates `dw[co][ci][tap]` for a same-size convolution.
pub(crate) fn conv3_weight_grad(cin: usize, cout: usize, x: &Tensor, dout: &Tensor, dw: &mut [f32]) {
    debug_assert_eq!(cout % L, 0);
    let s = x.shape;
    let n = s.len();
    let xp = pad(x);
    let mut dt = vec![0.0f32; n * L];
    let mut acc = vec![[0.0f32; L]; cin * 27];
    for cb in 0..cout / L {
        for j in 0..L {
            for (v, &d) in dout.channel(cb * L + j).iter().enumerate() {
                dt[v * L + j] = d;
            }
        }
        acc.iter_mut().for_each(|a| *a = [0.0; L]);
        #[cfg(target_arch = "x86_64")]
        let done = if has_avx2_fma() {
            // SAFETY: the CPU supports the enabled features (checked above).
            unsafe { weight_grad_avx2(cin, &xp, &dt, s, &mut acc) };
            true
        } else {
            false
        };
        #[cfg(not(target_arch = "x86_64"))]
        let done = false;
        if !done {
            weight_grad_kernel::<false>(cin, &xp, &dt, s, &mut acc);
        }
        for (it, a) in acc.iter().enumerate() {
            for j in 0..L {
                dw[(cb * L + j) * cin * 27 + it] += a[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conv3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cin: usize, cout: usize, s: Shape3, seed: u64) -> (Vec<f32>, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..cout * cin * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = Tensor::zeros(cin, s);
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut d = Tensor::zeros(cout, s);
        d.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        (w, x, d)
    }

    #[test]
    fn direct_forward_matches_portable_and_gemm_paths() {
        for (cin, cout, s) in [(3, 8, Shape3::new(3, 5, 11)), (2, 16, Shape3::new(2, 4, 8)), (1, 8, Shape3::new(1, 1, 3))] {
            let (w, x, _) = setup(cin, cout, s, 1);
            let direct = conv3_forward(cin, cout, &w, &x);
            let gemm = Conv3 { cin, cout, stride: 1, offset: 0 }.forward_gemm(&w, &x);
            let mut portable = Tensor::zeros(cout, s);
            let mut wt = vec![0.0; w.len()];
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..27 {
                        wt[(((co / L) * cin + ci) * 27 + t) * L + co % L] = w[(co * cin + ci) * 27 + t];
                    }
                }
            }
            forward_kernel::<false>(cin, cout, &wt, &pad(&x), s, &mut portable.data);
            for ((a, b), c) in direct.data.iter().zip(&gemm.data).zip(&portable.data) {
                assert!((a - b).abs() < 1e-4 && (a - c).abs() < 1e-4, "{a} {b} {c}");
            }
        }
    }

    #[test]
    fn direct_weight_grad_matches_gemm_path() {
        for (cin, cout, s) in [(3, 8, Shape3::new(3, 5, 11)), (2, 16, Shape3::new(2, 4, 8))] {
            let (w, x, d) = setup(cin, cout, s, 2);
            let mut g1 = vec![0.0; w.len()];
            conv3_weight_grad(cin, cout, &x, &d, &mut g1);
            let mut g2 = vec![0.0; w.len()];
            Conv3 { cin, cout, stride: 1, offset: 0 }.weight_grad_gemm(&x, &d, &mut g2);
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }
}
