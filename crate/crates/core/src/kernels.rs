//! Raw numeric kernels shared by the graph ops.

use crate::error::{Error, Result};

/// `c ← alpha·op(a)·op(b) + beta·c` for row-major storage.
///
/// `op(a)` is `m×k`; when `trans_a` is set, `a` is stored as `k×m`. Same for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    gemm_strided(
        m,
        n,
        k,
        alpha,
        Strided::new(a, rsa, csa),
        Strided::new(b, rsb, csb),
        beta,
        c,
        n,
    );
}

/// A read-only matrix view with explicit row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// General strided product `c ← alpha·a·b + beta·c`, `a: m×k`, `b: k×n`,
/// `c` row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
#[allow(unsafe_code)]
pub(crate) fn gemm_strided(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: Strided<'_>,
    b: Strided<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.fits(m, k) && b.fits(k, n));
    assert!((m - 1) * rsc + n <= c.len() && rsc >= n);
    if k == 0 {
        for i in 0..m {
            c[i * rsc..i * rsc + n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside `a`, `b`
    // and `c`, and `c` is exclusively borrowed so it aliases neither input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Geometry of one `k×k` convolution over `h×w×c_in` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::config(alloc::format!("conv2d kernel size {k} not in {{1, 3}}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(alloc::format!("conv2d stride {stride} not in {{1, 2}}")));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::config(alloc::format!(
                "conv2d input {h}x{w} with padding {padding} smaller than kernel {k}"
            )));
        }
        Ok(Self {
            h,
            w,
            c_in,
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1 stride-1 unpadded convolution reads the image as its own patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds one image into `out_pixels × patch_len` rows ordered `(ky, kx, ci)`.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let plen = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * plen..][..plen];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        let dst = &mut row[(ky * self.k + kx) * self.c_in..][..self.c_in];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.c_in;
                            dst.copy_from_slice(&image[src..src + self.c_in]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back into the image.
    pub fn col2im_add(&self, cols: &[f64], image_grad: &mut [f64]) {
        let plen = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * plen..][..plen];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.k + kx) * self.c_in..][..self.c_in];
                        let dst = (iy as usize * self.w + ix as usize) * self.c_in;
                        image_grad[dst..dst + self.c_in]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, s)| *g += s);
                    }
                }
            }
        }
    }
}

/// Splits a shape into `(outer, len, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeometry::new(4, 5, 2, 3, 2, 1).unwrap();
        let image: vec::Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_probe: vec::Vec<f64> = (0..g.out_pixels() * g.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        g.im2col(&image, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; image.len()];
        g.col2im_add(&cols_probe, &mut back);
        let rhs: f64 = image.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsupported_geometry() {
        assert!(ConvGeometry::new(8, 8, 1, 5, 1, 0).is_err());
        assert!(ConvGeometry::new(8, 8, 1, 3, 3, 0).is_err());
    }
}
