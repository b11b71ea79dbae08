use super::array::{DenseArray, Real};
use crate::error::{Error, Result};

/// A linear map on `[H, W]` planes: every output pixel is a weighted sum of
/// at most a few source pixels, or zero when it has no source.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    h: usize,
    w: usize,
    offsets: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
    valid: Vec<bool>,
}

impl ResamplePlan {
    /// Builds a plan from a per-output-pixel tap generator. `taps(i, j)`
    /// returns `None` for pixels outside the source domain.
    pub fn from_taps(
        h: usize,
        w: usize,
        mut taps: impl FnMut(usize, usize) -> Option<Vec<(usize, f64)>>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(h * w + 1);
        let mut src = Vec::new();
        let mut weight = Vec::new();
        let mut valid = Vec::with_capacity(h * w);
        offsets.push(0);
        for i in 0..h {
            for j in 0..w {
                match taps(i, j) {
                    Some(list) => {
                        for (s, wt) in list {
                            debug_assert!(s < h * w);
                            src.push(s as u32);
                            weight.push(wt);
                        }
                        valid.push(true);
                    }
                    None => valid.push(false),
                }
                offsets.push(src.len());
            }
        }
        Self {
            h,
            w,
            offsets,
            src,
            weight,
            valid,
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Row-major `H x W` flags: true where the output has a source.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    fn check<T: Real>(&self, x: &DenseArray<T>) -> Result<()> {
        if x.spatial()? != (self.h, self.w) {
            return Err(Error::shape("resample", x.shape(), &[self.h, self.w]));
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, x: &DenseArray<T>) -> Result<DenseArray<T>> {
        self.check(x)?;
        let hw = self.h * self.w;
        let mut out = DenseArray::zeros(x.shape());
        for (dst, src) in out.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)) {
            for (o, d) in dst.iter_mut().enumerate() {
                let mut acc = T::zero();
                for t in self.offsets[o]..self.offsets[o + 1] {
                    acc += T::from_f64(self.weight[t]) * src[self.src[t] as usize];
                }
                *d = acc;
            }
        }
        Ok(out)
    }

    /// `acc += Aᵀ g` for every plane.
    pub(crate) fn transpose_accumulate<T: Real>(&self, g: &[T], acc: &mut [T]) {
        let hw = self.h * self.w;
        for (dst, gp) in acc.chunks_mut(hw).zip(g.chunks(hw)) {
            for (o, &gv) in gp.iter().enumerate() {
                for t in self.offsets[o]..self.offsets[o + 1] {
                    dst[self.src[t] as usize] += T::from_f64(self.weight[t]) * gv;
                }
            }
        }
    }
}
