//! CPU convolution kernels (im2col + GEMM) registered as candle custom ops.
//!
//! candle's native conv backward is several times slower than a plain
//! im2col formulation on a single core, which dominated training time.
//! Three kernels cover everything: the forward convolution, its gradient
//! with respect to the input (which is also the transposed convolution) and
//! its gradient with respect to the weight.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

trait Elem: Copy + Default + std::ops::AddAssign + Send + Sync + 'static {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn one() -> Self;
    fn zero() -> Self;
}

impl Elem for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn one() -> Self {
        1.0
    }
    fn zero() -> Self {
        0.0
    }
}

impl Elem for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn one() -> Self {
        1.0
    }
    fn zero() -> Self {
        0.0
    }
}

/// Shapes of one convolution `x (n,c,h,w) * w (co,c,k,k) -> (n,co,ho,wo)`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(n: usize, c: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> CResult<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            candle_core::bail!("conv: kernel {k} does not fit input {h}x{w} with padding {pad}")
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source offset within one image plane for output `(oy, ox)` and tap
    /// `(ki, kj)`, or `None` when it lands in the zero padding.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }

    /// Unfolds one image `(c,h,w)` into `(c*k*k, ho*wo)`.
    fn im2col<T: Elem>(&self, x: &[T], cols: &mut [T]) {
        let (p, hw) = (self.p(), self.h * self.w);
        for ci in 0..self.c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.src(oy, ox, ki, kj) {
                                Some(s) => plane[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: folds columns back, summing overlaps.
    fn col2im<T: Elem>(&self, cols: &[T], x: &mut [T]) {
        let (p, hw) = (self.p(), self.h * self.w);
        for ci in 0..self.c {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.src(oy, ox, ki, kj) {
                                plane[s] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Elem>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (p, ckk) = (self.p(), self.ckk());
        let mut cols = vec![T::zero(); ckk * p];
        let mut out = vec![T::zero(); self.n * self.co * p];
        for b in 0..self.n {
            self.im2col(&x[b * self.c * self.h * self.w..], &mut cols);
            let y = &mut out[b * self.co * p..(b + 1) * self.co * p];
            // y (co, p) = w (co, ckk) * cols (ckk, p)
            unsafe {
                T::gemm(
                    self.co,
                    ckk,
                    p,
                    w.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        out
    }

    fn grad_input<T: Elem>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let (p, ckk, chw) = (self.p(), self.ckk(), self.c * self.h * self.w);
        let mut cols = vec![T::zero(); ckk * p];
        let mut dx = vec![T::zero(); self.n * chw];
        for b in 0..self.n {
            let gb = &g[b * self.co * p..];
            // cols (ckk, p) = w^T (ckk, co) * g_b (co, p)
            unsafe {
                T::gemm(
                    ckk,
                    self.co,
                    p,
                    w.as_ptr(),
                    1,
                    ckk as isize,
                    gb.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            self.col2im(&cols, &mut dx[b * chw..(b + 1) * chw]);
        }
        dx
    }

    fn grad_weight<T: Elem>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let (p, ckk) = (self.p(), self.ckk());
        let mut cols = vec![T::zero(); ckk * p];
        let mut dw = vec![T::zero(); self.co * ckk];
        for b in 0..self.n {
            self.im2col(&x[b * self.c * self.h * self.w..], &mut cols);
            let gb = &g[b * self.co * p..];
            // dw (co, ckk) += g_b (co, p) * cols^T (p, ckk)
            unsafe {
                T::gemm(
                    self.co,
                    p,
                    ckk,
                    gb.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
        }
        dw
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv: {what} must be contiguous"),
    }
}

fn dims4(layout: &Layout, what: &str) -> CResult<(usize, usize, usize, usize)> {
    layout
        .shape()
        .dims4()
        .map_err(|_| candle_core::Error::Msg(format!("conv: {what} must be 4-d, got {:?}", layout.dims())))
}

/// Dispatches a two-operand kernel on f32 or f64 storage.
fn run2(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    f32_op: impl FnOnce(&[f32], &[f32]) -> Vec<f32>,
    f64_op: impl FnOnce(&[f64], &[f64]) -> Vec<f64>,
) -> CResult<CpuStorage> {
    match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => {
            Ok(CpuStorage::F32(f32_op(slice(a, l1, "lhs")?, slice(b, l2, "rhs")?)))
        }
        (CpuStorage::F64(a), CpuStorage::F64(b)) => {
            Ok(CpuStorage::F64(f64_op(slice(a, l1, "lhs")?, slice(b, l2, "rhs")?)))
        }
        _ => candle_core::bail!("conv: operands must both be f32 or both be f64"),
    }
}

/// `x (n,c,h,w)`, `w (co,c,k,k)` -> `(n,co,ho,wo)`.
struct Conv {
    stride: usize,
    pad: usize,
}

/// `g (n,co,ho,wo)`, `w (co,c,k,k)` -> `(n,c,h,w)`; the output size must
/// be given since strided convolutions lose it.
struct ConvGradInput {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

/// `x (n,c,h,w)`, `g (n,co,ho,wo)` -> `(co,c,k,k)`.
struct ConvGradWeight {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1, "input")?;
        let (co, cw, k, k2) = dims4(l2, "weight")?;
        if cw != c || k != k2 {
            candle_core::bail!("conv: weight {:?} does not match input {:?}", l2.dims(), l1.dims())
        }
        let g = Geom::new(n, c, h, w, co, k, self.stride, self.pad)?;
        let out = run2(s1, l1, s2, l2, |x, w| g.forward(x, w), |x, w| g.forward(x, w))?;
        Ok((out, Shape::from((n, co, g.ho, g.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let k = w.dim(2)?;
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &ConvGradInput {
                stride: self.stride,
                pad: self.pad,
                h,
                w: wd,
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &ConvGradWeight {
                stride: self.stride,
                pad: self.pad,
                k,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, co, ho, wo) = dims4(l1, "gradient")?;
        let (cw, c, k, _) = dims4(l2, "weight")?;
        let g = Geom::new(n, c, self.h, self.w, co, k, self.stride, self.pad)?;
        if cw != co || g.ho != ho || g.wo != wo {
            candle_core::bail!(
                "conv: gradient {:?} inconsistent with weight {:?}",
                l1.dims(),
                l2.dims()
            )
        }
        let out = run2(s1, l1, s2, l2, |gr, w| g.grad_input(gr, w), |gr, w| g.grad_input(gr, w))?;
        Ok((out, Shape::from((n, c, self.h, self.w))))
    }

    /// Needed when this op serves as the transposed convolution.
    fn bwd(&self, g: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dg = grad.apply_op2_no_bwd(
            w,
            &Conv {
                stride: self.stride,
                pad: self.pad,
            },
        )?;
        let dw = grad.apply_op2_no_bwd(
            g,
            &ConvGradWeight {
                stride: self.stride,
                pad: self.pad,
                k: w.dim(2)?,
            },
        )?;
        Ok((Some(dg), Some(dw)))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1, "input")?;
        let (_, co, ho, wo) = dims4(l2, "gradient")?;
        let g = Geom::new(n, c, h, w, co, self.k, self.stride, self.pad)?;
        if g.ho != ho || g.wo != wo {
            candle_core::bail!("conv: gradient {:?} inconsistent with input {:?}", l2.dims(), l1.dims())
        }
        let out = run2(
            s1,
            l1,
            s2,
            l2,
            |x, gr| g.grad_weight(x, gr),
            |x, gr| g.grad_weight(x, gr),
        )?;
        Ok((out, Shape::from((co, c, self.k, self.k))))
    }
}

/// Zero-padded convolution without bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv { stride, pad })
}

/// Transposed convolution without bias; `weight` is `(c_in, c_out, k, k)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let k = weight.dim(2)?;
    let out = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
    let (Some(ho), Some(wo)) = (out(h), out(w)) else {
        candle_core::bail!("conv_transpose: padding {pad} too large for kernel {k}")
    };
    x.contiguous()?.apply_op2(
        &weight.contiguous()?,
        ConvGradInput {
            stride,
            pad,
            h: ho,
            w: wo,
        },
    )
}

/// Reflection padding of the last two axes; the backward pass folds the
/// mirrored border gradients back onto their source pixels.
struct ReflectPad {
    pad: usize,
}

struct ReflectPadGrad {
    pad: usize,
    h: usize,
    w: usize,
}

fn reflect_map(h: usize, w: usize, pad: usize) -> Vec<usize> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut map = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        let sy = super::layers::reflect_index(y as i64 - pad as i64, h);
        for x in 0..wp {
            map.push(sy * w + super::layers::reflect_index(x as i64 - pad as i64, w));
        }
    }
    map
}

fn pad_planes<T: Copy>(src: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let map = reflect_map(h, w, pad);
    let mut out = Vec::with_capacity(planes * map.len());
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        out.extend(map.iter().map(|&i| plane[i]));
    }
    out
}

fn fold_planes<T: Elem>(src: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let map = reflect_map(h, w, pad);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let (dst, g) = (&mut out[p * h * w..(p + 1) * h * w], &src[p * map.len()..]);
        for (j, &i) in map.iter().enumerate() {
            dst[i] += g[j];
        }
    }
    out
}

impl CustomOp1 for ReflectPad {
    fn name(&self) -> &'static str {
        "reflect-pad2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l, "input")?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(pad_planes(slice(v, l, "input")?, n * c, h, w, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(pad_planes(slice(v, l, "input")?, n * c, h, w, self.pad)),
            _ => candle_core::bail!("reflect pad: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, h + 2 * self.pad, w + 2 * self.pad))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&ReflectPadGrad {
            pad: self.pad,
            h,
            w,
        })?))
    }
}

impl CustomOp1 for ReflectPadGrad {
    fn name(&self) -> &'static str {
        "reflect-pad2d-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, _, _) = dims4(l, "gradient")?;
        let (h, w, pad) = (self.h, self.w, self.pad);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(fold_planes(slice(v, l, "gradient")?, n * c, h, w, pad)),
            CpuStorage::F64(v) => CpuStorage::F64(fold_planes(slice(v, l, "gradient")?, n * c, h, w, pad)),
            _ => candle_core::bail!("reflect pad: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

pub fn reflect_pad2d(x: &Tensor, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(ReflectPad { pad })
}
