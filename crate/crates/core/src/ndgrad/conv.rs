//! im2col + gemm cross-correlation.

use super::array::{DenseArray, Real};
use crate::error::{Error, Result};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(input: &DenseArray<T>, kernel: &DenseArray<T>, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = input.dims4()?;
        let [cout, kcin, kh, kw] = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: h + 2 * padding - kh + 1,
            wo: w + 2 * padding - kw + 1,
            pad: padding,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Fills `cols` (`patch x out_plane`) from sample `b` of `src`.
    fn im2col<T: Real>(&self, src: &[T], b: usize, cols: &mut [T]) {
        let plane = self.h * self.w;
        let opl = self.out_plane();
        for ci in 0..self.cin {
            let img = &src[(b * self.cin + ci) * plane..][..plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * opl..(row + 1) * opl];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &img[ii as usize * self.w..][..self.w];
                        for (oj, out) in line.iter_mut().enumerate() {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            *out = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                srow[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into sample `b` of `dst`.
    fn col2im<T: Real>(&self, cols: &[T], b: usize, dst: &mut [T]) {
        let plane = self.h * self.w;
        let opl = self.out_plane();
        for ci in 0..self.cin {
            let img = &mut dst[(b * self.cin + ci) * plane..][..plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * opl..(row + 1) * opl];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let drow = &mut img[ii as usize * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                drow[jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    bias: &DenseArray<T>,
    padding: usize,
) -> Result<DenseArray<T>> {
    let g = Geometry::new(input, kernel, padding)?;
    if bias.shape() != [g.cout] {
        return Err(Error::shape("conv2d bias", bias.shape(), &[g.cout]));
    }
    let (patch, opl) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.cout * opl];
    let mut cols = vec![T::zero(); patch * opl];
    for b in 0..g.n {
        g.im2col(input.data(), b, &mut cols);
        let dst = &mut out[b * g.cout * opl..(b + 1) * g.cout * opl];
        for (plane, &bv) in dst.chunks_mut(opl).zip(bias.data()) {
            plane.fill(bv);
        }
        T::gemm(
            g.cout,
            patch,
            opl,
            kernel.data(),
            (patch, 1),
            &cols,
            (opl, 1),
            T::one(),
            dst,
            (opl, 1),
        );
    }
    DenseArray::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    grad_out: &[T],
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, kernel, padding)?;
    let (patch, opl) = (g.patch(), g.out_plane());
    let mut gk = vec![T::zero(); g.cout * patch];
    let mut gb = vec![T::zero(); g.cout];
    let mut gi = need_input.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); patch * opl];
    let mut dcols = vec![T::zero(); patch * opl];
    for b in 0..g.n {
        let go = &grad_out[b * g.cout * opl..(b + 1) * g.cout * opl];
        for (acc, plane) in gb.iter_mut().zip(go.chunks(opl)) {
            *acc += plane.iter().copied().sum::<T>();
        }
        g.im2col(input.data(), b, &mut cols);
        // dK += dOut * cols^T
        T::gemm(g.cout, opl, patch, go, (opl, 1), &cols, (1, opl), T::one(), &mut gk, (patch, 1));
        if let Some(gi) = gi.as_mut() {
            // dcols = K^T * dOut
            T::gemm(
                patch,
                g.cout,
                opl,
                kernel.data(),
                (1, patch),
                go,
                (opl, 1),
                T::zero(),
                &mut dcols,
                (opl, 1),
            );
            g.col2im(&dcols, b, gi);
        }
    }
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}
