//! Slice-level primitives shared by the tensor ops and the model layers.
//!
//! Matrices are row-major `[rows × cols]`; vectors are treated as row vectors,
//! so an affine map is `y = x · W + b` with `W: [in × out]`.

/// `out += x · w` where `w` is `[x.len() × out.len()]`.
#[inline]
pub fn vec_mat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `dx += w · dy`, the input gradient of [`vec_mat_acc`].
#[inline]
pub fn mat_vec_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dy.len();
    debug_assert_eq!(w.len(), dx.len() * n);
    for (d, row) in dx.iter_mut().zip(w.chunks_exact(n)) {
        let mut s = 0.0;
        for (wij, g) in row.iter().zip(dy) {
            s += wij * g;
        }
        *d += s;
    }
}

/// `dw += xᵀ · dy`, the weight gradient of [`vec_mat_acc`].
#[inline]
pub fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let n = dy.len();
    debug_assert_eq!(dw.len(), x.len() * n);
    for (xi, row) in x.iter().zip(dw.chunks_exact_mut(n)) {
        if *xi == 0.0 {
            continue;
        }
        for (d, g) in row.iter_mut().zip(dy) {
            *d += xi * g;
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(x)` for `x ≤ 0`, branch-free so slice loops vectorise. Arguments
/// below -708 are clamped. Agrees with libm to a few ulp.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2^52 rounds to an integer and leaves it in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 0.0);
    let kf = x * LOG2E + SHIFT;
    let k = kf - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = kf.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Applies [`tanh`] elementwise.
pub fn tanh_in_place(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpositive(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

/// Numerically stable softmax written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `dx += J_softmaxᵀ · dy` given the softmax output `p`.
pub fn softmax_backward_acc(p: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner = dot(p, dy);
    for ((d, pi), g) in dx.iter_mut().zip(p).zip(dy) {
        *d += pi * (g - inner);
    }
}

/// `log(Σ exp(x))` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Geometry of a same-padded 2-D cross-correlation over an `h × w × c_in` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.in_h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.in_w.div_ceil(self.stride)
    }

    fn pad(input: usize, out: usize, k: usize, stride: usize) -> usize {
        let total = ((out - 1) * stride + k).saturating_sub(input);
        total / 2
    }

    pub fn pad_top(&self) -> usize {
        Self::pad(self.in_h, self.out_h(), self.k_h, self.stride)
    }

    pub fn pad_left(&self) -> usize {
        Self::pad(self.in_w, self.out_w(), self.k_w, self.stride)
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.c_in
    }

    pub fn kernel_len(&self) -> usize {
        self.k_h * self.k_w * self.c_in * self.c_out
    }

    pub fn output_len(&self) -> usize {
        self.out_h() * self.out_w() * self.c_out
    }

    /// Calls `f(out_index, in_index, kernel_row_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (pt, pl) = (self.pad_top() as isize, self.pad_left() as isize);
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = (oy * ow + ox) * self.c_out;
                for ky in 0..self.k_h {
                    let iy = (oy * self.stride + ky) as isize - pt;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k_w {
                        let ix = (ox * self.stride + kx) as isize - pl;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * self.in_w + ix as usize) * self.c_in;
                        let k_base = (ky * self.k_w + kx) * self.c_in * self.c_out;
                        f(out_base, in_base, k_base);
                    }
                }
            }
        }
    }
}

/// Same-padded strided cross-correlation, channels-last. `kernel` is
/// `[k_h × k_w × c_in × c_out]`. Overwrites `out`.
pub fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let c_out = g.c_out;
    match bias {
        Some(b) => out.chunks_exact_mut(c_out).for_each(|o| o.copy_from_slice(b)),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
    g.for_each_tap(|ob, ib, kb| {
        let o = &mut out[ob..ob + c_out];
        for ci in 0..g.c_in {
            let v = input[ib + ci];
            if v == 0.0 {
                continue;
            }
            let krow = &kernel[kb + ci * c_out..kb + (ci + 1) * c_out];
            for (oo, kk) in o.iter_mut().zip(krow) {
                *oo += v * kk;
            }
        }
    });
}

/// Accumulates input, kernel and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) {
    let c_out = g.c_out;
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks_exact(c_out) {
            for (b, d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
    }
    g.for_each_tap(|ob, ib, kb| {
        let dout = &grad_out[ob..ob + c_out];
        for ci in 0..g.c_in {
            let v = input[ib + ci];
            let range = kb + ci * c_out..kb + (ci + 1) * c_out;
            if v != 0.0 {
                for (gk, d) in grad_kernel[range.clone()].iter_mut().zip(dout) {
                    *gk += v * d;
                }
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                gi[ib + ci] += dot(&kernel[range], dout);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry {
            in_h: 5,
            in_w: 6,
            c_in: 1,
            k_h: 3,
            k_w: 3,
            c_out: 1,
            stride: 2,
        };
        assert_eq!((g.out_h(), g.out_w()), (3, 3));
        // total pad rows = (3-1)*2+3-5 = 2, cols = (3-1)*2+3-6 = 1
        assert_eq!((g.pad_top(), g.pad_left()), (1, 0));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = [0.3, -1.2, 2.0];
        let y: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        softmax_into(&x, &mut a);
        softmax_into(&y, &mut b);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_and_sigmoid_match_libm() {
        let mut worst_t: f64 = 0.0;
        let mut worst_s: f64 = 0.0;
        for i in -40_000..=40_000 {
            let x = i as f64 * 1e-3 + 1e-7;
            let t = x.tanh();
            // Absolute near zero, where 1 - e cancels.
            worst_t = worst_t.max((tanh(x) - t).abs() / t.abs().max(0.1));
            let s = 1.0 / (1.0 + (-x).exp());
            worst_s = worst_s.max((sigmoid(x) - s).abs() / s);
        }
        assert!(worst_t < 1e-14, "tanh {worst_t:e}");
        assert!(worst_s < 1e-14, "sigmoid {worst_s:e}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(-30.0), -1.0);
        assert!(tanh(1e-300) >= 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
