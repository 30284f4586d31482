//! NCHW tensors and the im2col lowering used by every convolution.

use crate::error::{Error, Result};
use crate::gemm::Matrix;
use crate::real::Real;

/// Dense 4-D tensor, row-major over `(n, c, h, w)`.
///
/// Holds both weights (`n` = filters) and activations (`n` = batch).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4D<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for dims {:?} (expected {expected})", data.len(), dims),
            ));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per leading index (`c * h * w`).
    #[inline]
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Weight-matrix view: one row per filter, one column per `(c, h, w)` position.
    pub fn as_im2col(&self) -> Im2colMatrix<'_, T> {
        Im2colMatrix { rows: self.dims[0], cols: self.item_len(), hw: self.dims[2] * self.dims[3], w: self.dims[3], data: &self.data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4D<U> {
        Tensor4D { dims: self.dims, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Copies leading-index items `[start, start + count)` into a new tensor.
    pub fn slice_items(&self, start: usize, count: usize) -> Self {
        let item = self.item_len();
        let mut dims = self.dims;
        dims[0] = count;
        Self { dims, data: self.data[start * item..(start + count) * item].to_vec() }
    }
}

/// Borrowed `N x (C*H*W)` view of a weight tensor.
///
/// Element `(i, j)` is weight `(i, j / (H*W), (j % (H*W)) / W, j % W)`, which in
/// row-major storage is simply `data[i * cols + j]`.
#[derive(Debug, Clone, Copy)]
pub struct Im2colMatrix<'a, T> {
    rows: usize,
    cols: usize,
    hw: usize,
    w: usize,
    data: &'a [T],
}

impl<'a, T: Real> Im2colMatrix<'a, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Maps an im2col column back to its `(channel, ky, kx)` position.
    pub fn column_position(&self, j: usize) -> (usize, usize, usize) {
        (j / self.hw, (j % self.hw) / self.w, j % self.w)
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_vec(self.rows, self.cols, self.data.to_vec()).expect("view dims are consistent")
    }
}

/// Kernel size, stride and zero padding of a 2-D convolution or patch extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kh: kernel, kw: kernel, stride, pad }
    }

    /// Output spatial dims for an `h x w` input, or `None` if they would not be positive.
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return None;
        }
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Unrolls input patches into a `(C*kh*kw) x (batch*out_h*out_w)` matrix.
///
/// Row `c*kh*kw + ky*kw + kx` lines up with weight im2col column of the same
/// index; column `b*out_h*out_w + oy*out_w + ox` is one output position.
pub fn im2col<T: Real>(input: &Tensor4D<T>, geom: ConvGeometry) -> Result<Matrix<T>> {
    let [batch, channels, h, w] = input.dims();
    let (oh, ow) = geom
        .output_dims(h, w)
        .ok_or_else(|| Error::shape("im2col", format!("kernel {geom:?} does not fit a {h}x{w} input")))?;
    let positions = oh * ow;
    let rows = channels * geom.kh * geom.kw;
    let cols = batch * positions;
    let mut out = vec![T::zero(); rows * cols];
    let src = input.data();
    for c in 0..channels {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let dst_row = &mut out[r * cols..(r + 1) * cols];
                for b in 0..batch {
                    let plane = &src[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = b * positions + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[base + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Matrix::from_vec(rows, cols, out)
}

/// Adjoint of [`im2col`]: scatters (and sums) patch-matrix entries back into
/// an input-shaped tensor.
pub fn col2im<T: Real>(cols: &Matrix<T>, input_dims: [usize; 4], geom: ConvGeometry) -> Result<Tensor4D<T>> {
    let [batch, channels, h, w] = input_dims;
    let (oh, ow) = geom
        .output_dims(h, w)
        .ok_or_else(|| Error::shape("col2im", format!("kernel {geom:?} does not fit a {h}x{w} input")))?;
    let positions = oh * ow;
    if cols.rows() != channels * geom.kh * geom.kw || cols.cols() != batch * positions {
        return Err(Error::shape(
            "col2im",
            format!("patch matrix {}x{} does not match input {:?}", cols.rows(), cols.cols(), input_dims),
        ));
    }
    let mut out = Tensor4D::zeros(input_dims);
    let dst = out.data_mut();
    let ncols = cols.cols();
    for c in 0..channels {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let src_row = &cols.data()[r * ncols..(r + 1) * ncols];
                for b in 0..batch {
                    let plane_off = (b * channels + c) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[plane_off + iy as usize * w + ix as usize] += src_row[b * positions + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_two_by_two_gives_four_patches() {
        let x = Tensor4D::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let m = im2col(&x, ConvGeometry::square(2, 1, 0)).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        // Columns are the patches [1 2 4 5], [2 3 5 6], [4 5 7 8], [5 6 8 9].
        let expected = [
            1.0, 2.0, 4.0, 5.0, //
            2.0, 3.0, 5.0, 6.0, //
            4.0, 5.0, 7.0, 8.0, //
            5.0, 6.0, 8.0, 9.0,
        ];
        assert_eq!(m.data(), &expected);
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let x = Tensor4D::from_vec([1, 1, 2, 2], vec![0.5f32, -1.0, 2.0, 3.0]).unwrap();
        let m = im2col(&x, ConvGeometry::square(2, 1, 0)).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 1));
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn kernel_larger_than_input_is_a_shape_error() {
        let x = Tensor4D::<f32>::zeros([1, 1, 2, 2]);
        assert!(matches!(im2col(&x, ConvGeometry::square(3, 1, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn im2col_view_index_formula() {
        let t = Tensor4D::from_vec([4, 3, 2, 2], (0..48).map(|v| v as f64).collect()).unwrap();
        let v = t.as_im2col();
        assert_eq!((v.rows(), v.cols()), (4, 12));
        for i in 0..4 {
            for j in 0..12 {
                let (c, y, x) = v.column_position(j);
                assert_eq!(v.get(i, j), t.get(i, c, y, x));
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = [2, 2, 5, 4];
        let geom = ConvGeometry { kh: 3, kw: 2, stride: 2, pad: 1 };
        let x = Tensor4D::from_vec(dims, (0..80).map(|v| ((v * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let px = im2col(&x, geom).unwrap();
        let y = Matrix::from_vec(px.rows(), px.cols(), (0..px.data().len()).map(|v| (v % 7) as f64 - 3.0).collect())
            .unwrap();
        let lhs: f64 = px.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, dims, geom).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
