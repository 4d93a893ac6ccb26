//! 2-D convolution and transposed convolution as candle custom ops.
//!
//! Both directions lower to im2col plus a single GEMM per batch element, and
//! the backward passes reuse the same three kernels: forward, gradient with
//! respect to the input, and gradient with respect to the weight. Padding may
//! differ between the leading and trailing edge so that even kernels can
//! keep the spatial size at stride 1.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self { stride, pad_lo, pad_hi }
    }

    /// Output size of a convolution over `n` input samples with kernel `k`.
    pub fn conv_out(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + self.pad_lo + self.pad_hi;
        if padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    /// Output size of the transposed convolution over `n` input samples.
    pub fn transpose_out(&self, n: usize, k: usize) -> Option<usize> {
        ((n - 1) * self.stride + k).checked_sub(self.pad_lo + self.pad_hi)
    }
}

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    fn zero() -> Self {
        Self::default()
    }
    fn one() -> Self;
}

impl Elem for f32 {
    fn one() -> Self {
        1.0
    }
}

impl Elem for f64 {
    fn one() -> Self {
        1.0
    }
}

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Elem>(x: &[T], d: Dims, g: ConvGeom, cols: &mut [T]) {
    let n = d.spatial_out();
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * n;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    let dst = &mut cols[row + oy * d.wo..row + (oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(cols: &[T], d: Dims, g: ConvGeom, x: &mut [T]) {
    let n = d.spatial_out();
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * n;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            x[base + ix as usize] += cols[row + oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `dst[m×n] = (accumulate ? dst : 0) + lhs·rhs` where `lhs` and
/// `rhs` are given by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: every index touched is bounded by the (m, n, k) extents and
    // strides above, which the callers derive from the buffer shapes.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn conv_forward<T: Elem>(x: &[T], batch: usize, d: Dims, w: &[T], out_c: usize, g: ConvGeom) -> Vec<T> {
    let (ckk, n) = (d.ckk(), d.spatial_out());
    let mut cols = vec![T::zero(); ckk * n];
    let mut y = vec![T::zero(); batch * out_c * n];
    let in_len = d.c * d.h * d.w;
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], d, g, &mut cols);
        matmul(out_c, n, ckk, &mut y[b * out_c * n..], false, w, ckk, 1, &cols, n, 1);
    }
    y
}

fn conv_backward_input<T: Elem>(dy: &[T], batch: usize, d: Dims, w: &[T], out_c: usize, g: ConvGeom) -> Vec<T> {
    let (ckk, n) = (d.ckk(), d.spatial_out());
    let mut cols = vec![T::zero(); ckk * n];
    let in_len = d.c * d.h * d.w;
    let mut dx = vec![T::zero(); batch * in_len];
    for b in 0..batch {
        matmul(ckk, n, out_c, &mut cols, false, w, 1, ckk, &dy[b * out_c * n..], n, 1);
        col2im(&cols, d, g, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    dx
}

fn conv_backward_weight<T: Elem>(x: &[T], batch: usize, d: Dims, dy: &[T], out_c: usize, g: ConvGeom) -> Vec<T> {
    let (ckk, n) = (d.ckk(), d.spatial_out());
    let mut cols = vec![T::zero(); ckk * n];
    let in_len = d.c * d.h * d.w;
    let mut dw = vec![T::zero(); out_c * ckk];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], d, g, &mut cols);
        matmul(out_c, ckk, n, &mut dw, b > 0, &dy[b * out_c * n..], n, 1, &cols, 1, n);
    }
    dw
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv ops need contiguous inputs"),
    }
}

fn dims4(l: &Layout, what: &str) -> Result<[usize; 4]> {
    match *l.dims() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => candle_core::bail!("{what} must be rank 4, got {:?}", l.dims()),
    }
}

/// Runs `f` on the two storages with matching dtypes.
macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (slice(x, $l1)?, slice(y, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (slice(x, $l1)?, slice(y, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv ops support matching f32 or f64 inputs"),
        }
    };
}

/// `y = conv(x, w)` with `x: [N, C, H, W]` and `w: [O, C, kh, kw]`.
struct Conv2d(ConvGeom);

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "textwipe-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let [nb, c, h, w] = dims4(l1, "conv input")?;
        let [o, wc, kh, kw] = dims4(l2, "conv weight")?;
        if wc != c {
            candle_core::bail!("conv weight expects {wc} input channels, got {c}");
        }
        let g = self.0;
        let (Some(ho), Some(wo)) = (g.conv_out(h, kh), g.conv_out(w, kw)) else {
            candle_core::bail!("conv input {h}x{w} smaller than kernel {kh}x{kw}");
        };
        let d = Dims { c, h, w, kh, kw, ho, wo };
        let out = dispatch!(s1, l1, s2, l2, |x, wt| conv_forward(x, nb, d, wt, o, g));
        Ok((out, Shape::from((nb, o, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, dy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let dx = dy.apply_op2_no_bwd(w, &ConvBackwardInput { geom: self.0, in_hw: (h, wd) })?;
        let dw = x.apply_op2_no_bwd(&dy, &ConvBackwardWeight { geom: self.0, k: (kh, kw) })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Gradient of [`Conv2d`] with respect to its input: `(dy, w) -> dx`. This is
/// also the forward pass of the transposed convolution.
struct ConvBackwardInput {
    geom: ConvGeom,
    in_hw: (usize, usize),
}

impl CustomOp2 for ConvBackwardInput {
    fn name(&self) -> &'static str {
        "textwipe-conv2d-bwd-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let [nb, o, ho, wo] = dims4(l1, "output gradient")?;
        let [wo_c, c, kh, kw] = dims4(l2, "conv weight")?;
        if wo_c != o {
            candle_core::bail!("conv weight has {wo_c} output channels, gradient has {o}");
        }
        let (h, w) = self.in_hw;
        let g = self.geom;
        if g.conv_out(h, kh) != Some(ho) || g.conv_out(w, kw) != Some(wo) {
            candle_core::bail!("gradient {ho}x{wo} does not match input {h}x{w}");
        }
        let d = Dims { c, h, w, kh, kw, ho, wo };
        let out = dispatch!(s1, l1, s2, l2, |dy, wt| conv_backward_input(dy, nb, d, wt, o, g));
        Ok((out, Shape::from((nb, c, h, w))))
    }
}

/// Gradient of [`Conv2d`] with respect to its weight: `(x, dy) -> dw`.
struct ConvBackwardWeight {
    geom: ConvGeom,
    k: (usize, usize),
}

impl CustomOp2 for ConvBackwardWeight {
    fn name(&self) -> &'static str {
        "textwipe-conv2d-bwd-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let [nb, c, h, w] = dims4(l1, "conv input")?;
        let [nb2, o, ho, wo] = dims4(l2, "output gradient")?;
        if nb != nb2 {
            candle_core::bail!("batch mismatch {nb} vs {nb2}");
        }
        let (kh, kw) = self.k;
        let d = Dims { c, h, w, kh, kw, ho, wo };
        let g = self.geom;
        let out = dispatch!(s1, l1, s2, l2, |x, dy| conv_backward_weight(x, nb, d, dy, o, g));
        Ok((out, Shape::from((o, c, kh, kw))))
    }
}

/// Transposed convolution with `x: [N, Cin, H, W]` and
/// `w: [Cin, Cout, kh, kw]`.
struct ConvTranspose2d(ConvGeom);

impl CustomOp2 for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "textwipe-conv-transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let [_, _, h, w] = dims4(l1, "transposed conv input")?;
        let [_, _, kh, kw] = dims4(l2, "transposed conv weight")?;
        let g = self.0;
        let (Some(ho), Some(wo)) = (g.transpose_out(h, kh), g.transpose_out(w, kw)) else {
            candle_core::bail!("transposed conv padding exceeds output size");
        };
        ConvBackwardInput { geom: g, in_hw: (ho, wo) }.cpu_fwd(s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, dy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let (_, _, kh, kw) = w.dims4()?;
        let dx = dy.apply_op2_no_bwd(w, &Conv2d(self.0))?;
        let dw = dy.apply_op2_no_bwd(x, &ConvBackwardWeight { geom: self.0, k: (kh, kw) })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// `log(1 + exp(x))`, evaluated stably for any input.
struct Softplus;

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "textwipe-softplus"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(slice(v, l)?.iter().map(|&x| softplus_scalar(x as f64) as f32).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(slice(v, l)?.iter().map(|&x| softplus_scalar(x)).collect()),
            _ => candle_core::bail!("softplus supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, dy: &Tensor) -> Result<Option<Tensor>> {
        let sig = (x * 0.5)?.tanh()?.affine(0.5, 0.5)?;
        Ok(Some((dy * sig)?))
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softplus)
}

pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2d(geom))
}

pub fn conv_transpose2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvTranspose2d(geom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], (o, kh, kw): (usize, usize, usize), g: ConvGeom) -> Vec<f64> {
        let ho = g.conv_out(h, kh).unwrap();
        let wo = g.conv_out(w, kw).unwrap();
        let mut y = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                            * wt[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        y[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * k).sin() * 0.7).collect()
    }

    #[test]
    fn forward_matches_naive() {
        let dev = Device::Cpu;
        for g in [ConvGeom::new(1, 1, 1), ConvGeom::new(2, 1, 1), ConvGeom::new(1, 1, 2), ConvGeom::new(1, 0, 0)] {
            let (n, c, h, w, o, k) = (2, 3, 7, 6, 4, if g.pad_hi == 2 { 4 } else { 3 });
            let xv = ramp(n * c * h * w, 0.37);
            let wv = ramp(o * c * k * k, 1.13);
            let x = Tensor::from_vec(xv.clone(), (n, c, h, w), &dev).unwrap();
            let wt = Tensor::from_vec(wv.clone(), (o, c, k, k), &dev).unwrap();
            let y = conv2d(&x, &wt, g).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = naive_conv(&xv, (n, c, h, w), &wv, (o, k, k), g);
            assert_eq!(y.len(), want.len());
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_even_kernel_keeps_size() {
        let g = ConvGeom::new(1, 1, 2);
        assert_eq!(g.conv_out(16, 4), Some(16));
        let t = ConvGeom::new(2, 1, 1);
        assert_eq!(t.conv_out(16, 4), Some(8));
        assert_eq!(t.transpose_out(8, 4), Some(16));
    }

    fn fd_check(transpose: bool, g: ConvGeom) {
        let dev = Device::Cpu;
        let (n, ci, h, w, co, k) = (2, 2, 5, 4, 3, 4);
        let xv = ramp(n * ci * h * w, 0.41);
        let wshape = if transpose { (ci, co, k, k) } else { (co, ci, k, k) };
        let wv = ramp(ci * co * k * k, 0.93);
        let x = Var::from_vec(xv.clone(), (n, ci, h, w), &dev).unwrap();
        let wt = Var::from_vec(wv.clone(), wshape, &dev).unwrap();
        let f = |x: &Tensor, wt: &Tensor| -> Tensor {
            let y = if transpose { conv_transpose2d(x, wt, g) } else { conv2d(x, wt, g) }.unwrap();
            let probe = Tensor::arange(0.0f64, y.elem_count() as f64, &dev)
                .unwrap()
                .affine(0.01, -0.2)
                .unwrap()
                .cos()
                .unwrap()
                .reshape(y.shape())
                .unwrap();
            (y * probe).unwrap().sum_all().unwrap()
        };
        let loss = f(x.as_tensor(), wt.as_tensor());
        let grads = loss.backward().unwrap();
        let eps = 1e-6;
        for (var, vals) in [(&x, &xv), (&wt, &wv)] {
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in (0..vals.len()).step_by(3) {
                let mut plus = vals.clone();
                plus[i] += eps;
                let mut minus = vals.clone();
                minus[i] -= eps;
                let shape = var.shape().clone();
                let eval = |v: Vec<f64>| {
                    let t = Tensor::from_vec(v, shape.clone(), &dev).unwrap();
                    let out = if std::ptr::eq(var, &x) { f(&t, wt.as_tensor()) } else { f(x.as_tensor(), &t) };
                    out.to_scalar::<f64>().unwrap()
                };
                let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
                assert!((numeric - analytic[i]).abs() < 1e-6, "index {i}: {numeric} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        fd_check(false, ConvGeom::new(1, 1, 2));
        fd_check(false, ConvGeom::new(2, 1, 1));
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        fd_check(true, ConvGeom::new(2, 1, 1));
        fd_check(true, ConvGeom::new(1, 1, 2));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let dev = Device::Cpu;
        let g = ConvGeom::new(2, 1, 1);
        let x = Tensor::from_vec(ramp(2 * 3 * 8 * 8, 0.3), (2, 3, 8, 8), &dev).unwrap();
        let wt = Tensor::from_vec(ramp(5 * 3 * 4 * 4, 0.7), (5, 3, 4, 4), &dev).unwrap();
        let u = Tensor::from_vec(ramp(2 * 5 * 4 * 4, 1.9), (2, 5, 4, 4), &dev).unwrap();
        let lhs = (conv2d(&x, &wt, g).unwrap() * &u).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        // conv weight [O, C] read as transposed weight [Cin = O, Cout = C]
        let rhs = (conv_transpose2d(&u, &wt, g).unwrap() * &x).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn f32_matches_f64() {
        let dev = Device::Cpu;
        let g = ConvGeom::new(1, 1, 1);
        let x = Tensor::from_vec(ramp(3 * 9 * 9, 0.2), (1, 3, 9, 9), &dev).unwrap();
        let wt = Tensor::from_vec(ramp(2 * 3 * 9, 0.5), (2, 3, 3, 3), &dev).unwrap();
        let a = conv2d(&x, &wt, g).unwrap();
        let b = conv2d(&x.to_dtype(DType::F32).unwrap(), &wt.to_dtype(DType::F32).unwrap(), g)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn softplus_values_and_gradient() {
        let dev = Device::Cpu;
        let x = Var::new(&[-800.0f64, -2.0, 0.0, 3.0, 800.0], &dev).unwrap();
        let y = softplus(x.as_tensor()).unwrap();
        let v = y.to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[4], 800.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let want = [0.0, 1.0 / (1.0 + 2f64.exp()), 0.5, 1.0 / (1.0 + (-3f64).exp()), 1.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
