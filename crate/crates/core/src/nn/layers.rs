//! Stateless layer kernels shared by the training engine and compacted models.

use crate::error::Result;
use crate::gemm::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::real::Real;
use crate::tensor::{col2im, im2col, ConvGeometry, Tensor4D};

/// Convolution as `weights (N x K) * patches (K x B*P)`.
///
/// With `gather`, only the listed patch rows are kept before the GEMM, so
/// `weights` has one column per gathered row. Returns the output and the
/// (possibly gathered) patch matrix.
pub fn conv_forward<T: Real>(
    x: &Tensor4D<T>,
    weights: &Matrix<T>,
    bias: &[T],
    geom: ConvGeometry,
    gather: Option<&[usize]>,
) -> Result<(Tensor4D<T>, Matrix<T>)> {
    let [batch, _, h, w] = x.dims();
    let (oh, ow) = geom.output_dims(h, w).expect("validated by im2col");
    let mut cols = im2col(x, geom)?;
    if let Some(rows) = gather {
        cols = cols.gather_rows(rows);
    }
    let out = matmul(weights, &cols)?;
    let filters = weights.rows();
    let positions = oh * ow;
    let mut y = Tensor4D::zeros([batch, filters, oh, ow]);
    let yd = y.data_mut();
    for n in 0..filters {
        let src = out.row(n);
        let b_n = bias[n];
        for b in 0..batch {
            let dst = &mut yd[(b * filters + n) * positions..(b * filters + n + 1) * positions];
            for (d, &s) in dst.iter_mut().zip(&src[b * positions..(b + 1) * positions]) {
                *d = s + b_n;
            }
        }
    }
    Ok((y, cols))
}

/// Returns `(dW, db, dX)`; `dX` is skipped when `need_dx` is false.
pub fn conv_backward<T: Real>(
    dy: &Tensor4D<T>,
    cols: &Matrix<T>,
    weights: &Matrix<T>,
    input_dims: [usize; 4],
    geom: ConvGeometry,
    need_dx: bool,
) -> Result<(Matrix<T>, Vec<T>, Option<Tensor4D<T>>)> {
    let [batch, filters, oh, ow] = dy.dims();
    let positions = oh * ow;
    let mut dy_mat = Matrix::zeros(filters, batch * positions);
    let mut db = vec![T::zero(); filters];
    {
        let dm = dy_mat.data_mut();
        let src = dy.data();
        for b in 0..batch {
            for n in 0..filters {
                let s = &src[(b * filters + n) * positions..(b * filters + n + 1) * positions];
                let dst = &mut dm[n * batch * positions + b * positions..n * batch * positions + (b + 1) * positions];
                dst.copy_from_slice(s);
                for &v in s {
                    db[n] += v;
                }
            }
        }
    }
    let dw = matmul_nt(&dy_mat, cols)?;
    let dx = if need_dx {
        let dcols = matmul_tn(weights, &dy_mat)?;
        Some(col2im(&dcols, input_dims, geom)?)
    } else {
        None
    };
    Ok((dw, db, dx))
}

pub fn relu_forward<T: Real>(x: &Tensor4D<T>) -> (Tensor4D<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    (Tensor4D::from_vec(x.dims(), data).expect("same dims"), mask)
}

pub fn relu_backward<T: Real>(dy: &Tensor4D<T>, mask: &[bool]) -> Tensor4D<T> {
    let data = dy.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
    Tensor4D::from_vec(dy.dims(), data).expect("same dims")
}

/// Max-pooling without padding. The returned argmax holds, for each output
/// element, the flat input index of the first maximum in scan order.
pub fn maxpool_forward<T: Real>(x: &Tensor4D<T>, size: usize, stride: usize) -> (Tensor4D<T>, Vec<usize>) {
    let [batch, channels, h, w] = x.dims();
    let (oh, ow) = ConvGeometry::square(size, stride, 0).output_dims(h, w).expect("validated shape");
    let mut y = Tensor4D::zeros([batch, channels, oh, ow]);
    let mut argmax = vec![0usize; batch * channels * oh * ow];
    let src = x.data();
    let mut o = 0;
    for bc in 0..batch * channels {
        let plane = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = plane + (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                y.data_mut()[o] = src[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    (y, argmax)
}

pub fn maxpool_backward<T: Real>(dy: &Tensor4D<T>, argmax: &[usize], input_dims: [usize; 4]) -> Tensor4D<T> {
    let mut dx = Tensor4D::zeros(input_dims);
    let d = dx.data_mut();
    for (&g, &idx) in dy.data().iter().zip(argmax) {
        d[idx] += g;
    }
    dx
}

/// `x (B x in) * W^T + b` for `W (out x in)`.
pub fn fc_forward<T: Real>(x: &Matrix<T>, weights: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    let mut y = matmul_nt(x, weights)?;
    let out = y.cols();
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

/// Returns `(dW, db, dX)`.
pub fn fc_backward<T: Real>(dy: &Matrix<T>, x: &Matrix<T>, weights: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let dw = matmul_tn(dy, x)?;
    let mut db = vec![T::zero(); dy.cols()];
    for row in dy.data().chunks(dy.cols()) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = matmul(dy, weights)?;
    Ok((dw, db, dx))
}

/// Mean softmax cross-entropy over the batch and the row-wise probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> (T, Matrix<T>) {
    let k = logits.cols();
    let mut probs = Matrix::zeros(logits.rows(), k);
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs.set(b, j, e);
            z += e;
        }
        for j in 0..k {
            probs.set(b, j, probs.get(b, j) / z);
        }
        total += z.ln() + max - row[label];
    }
    (total / T::of(labels.len() as f64), probs)
}
