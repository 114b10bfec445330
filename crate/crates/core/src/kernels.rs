//! Numeric kernels behind the autodiff graph.
//!
//! 3x3 convolutions are computed directly on zero-padded planes laid out as
//! `[channels][(h + 2) * (w + 2)]`, followed by a zero tail. A plane is
//! walked as one flat row of stride `w + 2`: output `(y, x)` sits at flat
//! index `y * (w + 2) + x` and tap `(ky, kx)` adds `ky * (w + 2) + kx`, so
//! the two right-hand columns of every row are junk and are dropped when
//! copying out. Small planes thus vectorize as well as large ones.
//!
//! All kernels are single-threaded and visit elements in a fixed order, so
//! results are bitwise reproducible on a given machine.

use crate::tensor::Scalar;

/// Zero floats after the last plane; covers the widest vector block.
const TAIL: usize = 64;

/// Geometry of one 3x3, stride-1, pad-1 correlation over a single image.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3Plan {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    /// Row stride of the padded planes.
    pub pw: usize,
}

impl Conv3x3Plan {
    pub fn new(cin: usize, cout: usize, h: usize, w: usize) -> Self {
        Conv3x3Plan { cin, cout, h, w, pw: w + 2 }
    }

    pub fn ph(&self) -> usize {
        self.h + 2
    }

    pub fn plane(&self) -> usize {
        self.ph() * self.pw
    }

    /// Flat output positions per plane, junk columns included.
    pub fn span(&self) -> usize {
        self.h * self.pw
    }

    pub fn padded_len(&self, channels: usize) -> usize {
        channels * self.plane() + TAIL
    }

    /// The same geometry with input and output roles swapped.
    pub fn transposed(&self) -> Self {
        Conv3x3Plan {
            cin: self.cout,
            cout: self.cin,
            ..*self
        }
    }

    fn tap(&self, k: usize) -> usize {
        (k / 3) * self.pw + k % 3
    }
}

/// Copy `channels` planes of `h x w` into a zeroed padded buffer.
pub fn pad_planes<T: Scalar>(plan: &Conv3x3Plan, src: &[T], channels: usize) -> Vec<T> {
    let (h, w, pw) = (plan.h, plan.w, plan.pw);
    let mut out = vec![T::zero(); plan.padded_len(channels)];
    for c in 0..channels {
        for y in 0..h {
            let s = c * h * w + y * w;
            let d = c * plan.plane() + (y + 1) * pw + 1;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Swap the channel axes and rotate each kernel by 180 degrees, turning a
/// forward weight `[cout][cin][3][3]` into the input-gradient weight.
pub fn flip_transpose<T: Scalar>(weight: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..9 {
                out[(ci * cout + co) * 9 + (8 - k)] = weight[(co * cin + ci) * 9 + k];
            }
        }
    }
    out
}

pub fn conv3x3_planes_generic<T: Scalar>(plan: &Conv3x3Plan, padded: &[T], weight: &[T], out: &mut [T]) {
    let (h, w, pw) = (plan.h, plan.w, plan.pw);
    debug_assert!(padded.len() >= plan.padded_len(plan.cin));
    debug_assert_eq!(out.len(), plan.cout * h * w);
    out.iter_mut().for_each(|v| *v = T::zero());
    for co in 0..plan.cout {
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..plan.cin {
            let base = ci * plan.plane();
            for k in 0..9 {
                let wv = weight[(co * plan.cin + ci) * 9 + k];
                if wv == T::zero() {
                    continue;
                }
                for y in 0..h {
                    let row = &padded[base + y * pw + plan.tap(k)..][..w];
                    let orow = &mut oplane[y * w..(y + 1) * w];
                    for (o, &v) in orow.iter_mut().zip(row) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
}

pub fn conv3x3_weight_grad_generic<T: Scalar>(plan: &Conv3x3Plan, padded: &[T], dy: &[T], dw: &mut [T]) {
    let (h, w, pw) = (plan.h, plan.w, plan.pw);
    for co in 0..plan.cout {
        let dplane = &dy[co * h * w..(co + 1) * h * w];
        for ci in 0..plan.cin {
            let base = ci * plan.plane();
            for k in 0..9 {
                let mut acc = T::zero();
                for y in 0..h {
                    let row = &padded[base + y * pw + plan.tap(k)..][..w];
                    let drow = &dplane[y * w..(y + 1) * w];
                    for (&d, &v) in drow.iter().zip(row) {
                        acc += d * v;
                    }
                }
                dw[(co * plan.cin + ci) * 9 + k] += acc;
            }
        }
    }
}

pub fn conv3x3_planes_f32(plan: &Conv3x3Plan, padded: &[f32], weight: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if simd::avx512_available() {
            // SAFETY: feature presence checked at runtime; buffer extents are
            // asserted inside.
            unsafe { simd::conv3x3_planes_512(plan, padded, weight, out) };
            return;
        }
        if simd::avx2_available() {
            // SAFETY: as above.
            unsafe { simd::conv3x3_planes_256(plan, padded, weight, out) };
            return;
        }
    }
    conv3x3_planes_generic(plan, padded, weight, out);
}

pub fn conv3x3_weight_grad_f32(plan: &Conv3x3Plan, padded: &[f32], dy: &[f32], dw: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if simd::avx512_available() {
            // SAFETY: as above.
            unsafe { simd::conv3x3_weight_grad_512(plan, padded, dy, dw) };
            return;
        }
        if simd::avx2_available() {
            // SAFETY: as above.
            unsafe { simd::conv3x3_weight_grad_256(plan, padded, dy, dw) };
            return;
        }
    }
    conv3x3_weight_grad_generic(plan, padded, dy, dw);
}

/// Output gradient spread onto the flat padded stride with zero junk
/// columns, each plane `lq` long.
fn widen_rows(plan: &Conv3x3Plan, dy: &[f32], lq: usize) -> Vec<f32> {
    let (h, w, pw) = (plan.h, plan.w, plan.pw);
    let mut out = vec![0f32; plan.cout * lq];
    for co in 0..plan.cout {
        for y in 0..h {
            let s = co * h * w + y * w;
            let d = co * lq + y * pw;
            out[d..d + w].copy_from_slice(&dy[s..s + w]);
        }
    }
    out
}

/// Drop the junk columns of `cb` flat planes of length `lq`.
fn narrow_rows(plan: &Conv3x3Plan, flat: &[f32], lq: usize, co0: usize, cb: usize, out: &mut [f32]) {
    let (h, w, pw) = (plan.h, plan.w, plan.pw);
    for j in 0..cb {
        for y in 0..h {
            let s = j * lq + y * pw;
            let d = (co0 + j) * h * w + y * w;
            out[d..d + w].copy_from_slice(&flat[s..s + w]);
        }
    }
}

/// Weights of output channels `co0..co0 + CB` as `[cin][9][CB]`, zero past `cout`.
fn pack_weights<const CB: usize>(weight: &[f32], cin: usize, cout: usize, co0: usize, packed: &mut [f32]) {
    for ci in 0..cin {
        for k in 0..9 {
            for j in 0..CB {
                packed[(ci * 9 + k) * CB + j] = if co0 + j < cout {
                    weight[((co0 + j) * cin + ci) * 9 + k]
                } else {
                    0.0
                };
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{narrow_rows, pack_weights, widen_rows, Conv3x3Plan, TAIL};
    use std::arch::x86_64::*;

    pub fn avx2_available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    pub fn avx512_available() -> bool {
        is_x86_feature_detected!("avx512f")
    }

    fn check(plan: &Conv3x3Plan, padded: &[f32], channels: usize, block: usize) {
        assert!(block + 2 <= TAIL);
        assert!(padded.len() >= plan.padded_len(channels));
        assert_eq!(plan.pw, plan.w + 2);
    }

    const XB_512: usize = 48;
    const CO_512: usize = 8;

    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv3x3_planes_512(plan: &Conv3x3Plan, padded: &[f32], weight: &[f32], out: &mut [f32]) {
        let Conv3x3Plan { cin, cout, h, w, .. } = *plan;
        check(plan, padded, cin, XB_512);
        assert_eq!(out.len(), cout * h * w);
        assert_eq!(weight.len(), cout * cin * 9);
        let plane = plan.plane();
        let lq = plan.span().div_ceil(XB_512) * XB_512;
        let taps: [usize; 9] = std::array::from_fn(|k| plan.tap(k));
        let mut packed = vec![0f32; cin * 9 * CO_512];
        let mut flat = vec![0f32; CO_512 * lq];
        let src = padded.as_ptr();
        for co0 in (0..cout).step_by(CO_512) {
            pack_weights::<CO_512>(weight, cin, cout, co0, &mut packed);
            let wp = packed.as_ptr();
            let fp = flat.as_mut_ptr();
            for q0 in (0..lq).step_by(XB_512) {
                let mut acc = [[_mm512_setzero_ps(); 3]; CO_512];
                for ci in 0..cin {
                    let base = src.add(ci * plane + q0);
                    let wb = wp.add(ci * 9 * CO_512);
                    for (k, &tap) in taps.iter().enumerate() {
                        let p = base.add(tap);
                        let v0 = _mm512_loadu_ps(p);
                        let v1 = _mm512_loadu_ps(p.add(16));
                        let v2 = _mm512_loadu_ps(p.add(32));
                        let wk = wb.add(k * CO_512);
                        for (j, a) in acc.iter_mut().enumerate() {
                            let wv = _mm512_set1_ps(*wk.add(j));
                            a[0] = _mm512_fmadd_ps(wv, v0, a[0]);
                            a[1] = _mm512_fmadd_ps(wv, v1, a[1]);
                            a[2] = _mm512_fmadd_ps(wv, v2, a[2]);
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    let o = fp.add(j * lq + q0);
                    _mm512_storeu_ps(o, a[0]);
                    _mm512_storeu_ps(o.add(16), a[1]);
                    _mm512_storeu_ps(o.add(32), a[2]);
                }
            }
            narrow_rows(plan, &flat, lq, co0, (cout - co0).min(CO_512), out);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv3x3_weight_grad_512(plan: &Conv3x3Plan, padded: &[f32], dy: &[f32], dw: &mut [f32]) {
        let Conv3x3Plan { cin, cout, h, w, .. } = *plan;
        check(plan, padded, cin, 16);
        assert_eq!(dy.len(), cout * h * w);
        assert_eq!(dw.len(), cout * cin * 9);
        let lq = plan.span().div_ceil(16) * 16;
        let dyq = widen_rows(plan, dy, lq);
        let mut co0 = 0;
        while co0 < cout {
            if cout - co0 >= 3 {
                weight_grad_block_512::<3>(plan, padded, &dyq, lq, co0, dw);
                co0 += 3;
            } else {
                weight_grad_block_512::<1>(plan, padded, &dyq, lq, co0, dw);
                co0 += 1;
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn weight_grad_block_512<const CB: usize>(
        plan: &Conv3x3Plan,
        padded: &[f32],
        dyq: &[f32],
        lq: usize,
        co0: usize,
        dw: &mut [f32],
    ) {
        let cin = plan.cin;
        let plane = plan.plane();
        let taps: [usize; 9] = std::array::from_fn(|k| plan.tap(k));
        let src = padded.as_ptr();
        let dp = dyq.as_ptr().add(co0 * lq);
        for ci in 0..cin {
            let base = src.add(ci * plane);
            let mut acc = [[_mm512_setzero_ps(); 9]; CB];
            for q in (0..lq).step_by(16) {
                let d: [__m512; CB] = std::array::from_fn(|j| _mm512_loadu_ps(dp.add(j * lq + q)));
                for (k, &tap) in taps.iter().enumerate() {
                    let v = _mm512_loadu_ps(base.add(q + tap));
                    for j in 0..CB {
                        acc[j][k] = _mm512_fmadd_ps(d[j], v, acc[j][k]);
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let o = ((co0 + j) * cin + ci) * 9;
                for (k, v) in a.iter().enumerate() {
                    dw[o + k] += _mm512_reduce_add_ps(*v);
                }
            }
        }
    }

    const XB_256: usize = 24;
    const CO_256: usize = 4;

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv3x3_planes_256(plan: &Conv3x3Plan, padded: &[f32], weight: &[f32], out: &mut [f32]) {
        let Conv3x3Plan { cin, cout, h, w, .. } = *plan;
        check(plan, padded, cin, XB_256);
        assert_eq!(out.len(), cout * h * w);
        assert_eq!(weight.len(), cout * cin * 9);
        let plane = plan.plane();
        let lq = plan.span().div_ceil(XB_256) * XB_256;
        let taps: [usize; 9] = std::array::from_fn(|k| plan.tap(k));
        let mut packed = vec![0f32; cin * 9 * CO_256];
        let mut flat = vec![0f32; CO_256 * lq];
        let src = padded.as_ptr();
        for co0 in (0..cout).step_by(CO_256) {
            pack_weights::<CO_256>(weight, cin, cout, co0, &mut packed);
            let wp = packed.as_ptr();
            let fp = flat.as_mut_ptr();
            for q0 in (0..lq).step_by(XB_256) {
                let mut acc = [[_mm256_setzero_ps(); 3]; CO_256];
                for ci in 0..cin {
                    let base = src.add(ci * plane + q0);
                    let wb = wp.add(ci * 9 * CO_256);
                    for (k, &tap) in taps.iter().enumerate() {
                        let p = base.add(tap);
                        let v0 = _mm256_loadu_ps(p);
                        let v1 = _mm256_loadu_ps(p.add(8));
                        let v2 = _mm256_loadu_ps(p.add(16));
                        let wk = wb.add(k * CO_256);
                        for (j, a) in acc.iter_mut().enumerate() {
                            let wv = _mm256_broadcast_ss(&*wk.add(j));
                            a[0] = _mm256_fmadd_ps(wv, v0, a[0]);
                            a[1] = _mm256_fmadd_ps(wv, v1, a[1]);
                            a[2] = _mm256_fmadd_ps(wv, v2, a[2]);
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    let o = fp.add(j * lq + q0);
                    _mm256_storeu_ps(o, a[0]);
                    _mm256_storeu_ps(o.add(8), a[1]);
                    _mm256_storeu_ps(o.add(16), a[2]);
                }
            }
            narrow_rows(plan, &flat, lq, co0, (cout - co0).min(CO_256), out);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let mut lanes = [0f32; 8];
        _mm256_storeu_ps(lanes.as_mut_ptr(), v);
        lanes.iter().sum()
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv3x3_weight_grad_256(plan: &Conv3x3Plan, padded: &[f32], dy: &[f32], dw: &mut [f32]) {
        let Conv3x3Plan { cin, cout, h, w, .. } = *plan;
        check(plan, padded, cin, 8);
        assert_eq!(dy.len(), cout * h * w);
        assert_eq!(dw.len(), cout * cin * 9);
        let plane = plan.plane();
        let lq = plan.span().div_ceil(8) * 8;
        let taps: [usize; 9] = std::array::from_fn(|k| plan.tap(k));
        let dyq = widen_rows(plan, dy, lq);
        let src = padded.as_ptr();
        for co in 0..cout {
            let dp = dyq.as_ptr().add(co * lq);
            for ci in 0..cin {
                let base = src.add(ci * plane);
                let mut acc = [_mm256_setzero_ps(); 9];
                for q in (0..lq).step_by(8) {
                    let d = _mm256_loadu_ps(dp.add(q));
                    for (a, &tap) in acc.iter_mut().zip(&taps) {
                        *a = _mm256_fmadd_ps(d, _mm256_loadu_ps(base.add(q + tap)), *a);
                    }
                }
                let o = (co * cin + ci) * 9;
                for (k, a) in acc.iter().enumerate() {
                    dw[o + k] += hsum(*a);
                }
            }
        }
    }

    #[cfg(test)]
    pub(super) fn force_256(plan: &Conv3x3Plan, padded: &[f32], weight: &[f32], dy: &[f32], out: &mut [f32], dw: &mut [f32]) -> bool {
        if !avx2_available() {
            return false;
        }
        unsafe {
            conv3x3_planes_256(plan, padded, weight, out);
            conv3x3_weight_grad_256(plan, padded, dy, dw);
        }
        true
    }
}
