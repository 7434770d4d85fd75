use crate::error::{Result, SruError};
use crate::numerics::{Real, Tensor};

/// Inner product with eight interleaved partial sums, so the loop
/// vectorizes; the summation order is fixed.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let split = n - n % 8;
    for (xa, xb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        acc += *x * *y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out = x · W` for a row vector `x` and an `in × out` matrix `W`.
pub fn vec_mat<T: Real>(x: &[T], w: &Tensor<T>, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    vec_mat_acc(x, w, out);
}

/// `out += x · W`
pub fn vec_mat_acc<T: Real>(x: &[T], w: &Tensor<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, w.row(i), out);
        }
    }
}

/// `out = W · y`, i.e. the gradient of `x · W` with respect to `x`.
pub fn mat_vec<T: Real>(w: &Tensor<T>, y: &[T], out: &mut [T]) {
    debug_assert_eq!(y.len(), w.cols());
    debug_assert_eq!(out.len(), w.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(i), y);
    }
}

/// `W += x ⊗ y`
pub fn add_outer<T: Real>(w: &mut Tensor<T>, x: &[T], y: &[T]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(y.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, y, w.row_mut(i));
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Gradients of an affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// `y = x·W + b` for `x` of shape `(n, in)` or `(in,)`, `W` of shape
/// `(in, out)` and `b` of shape `(out,)`.
///
/// When `upstream` (shaped like `y`) is supplied the analytic gradients are
/// returned alongside.
pub fn linear_forward_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    upstream: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<LinearGrads<T>>)> {
    if w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(SruError::dim("linear", x.shape(), w.shape()));
    }
    if b.shape().len() != 1 || b.len() != w.cols() {
        return Err(SruError::dim("linear bias", w.shape(), b.shape()));
    }
    let n = x.rows();
    let out_shape: Vec<usize> = if x.shape().len() == 1 {
        vec![w.cols()]
    } else {
        vec![n, w.cols()]
    };
    let mut y = Tensor::zeros(&out_shape);
    for r in 0..n {
        let yr = y.row_mut(r);
        yr.copy_from_slice(b.data());
        vec_mat_acc(x.row(r), w, yr);
    }
    let grads = match upstream {
        None => None,
        Some(g) => {
            if g.shape() != y.shape() {
                return Err(SruError::dim("linear upstream", y.shape(), g.shape()));
            }
            let mut dx = Tensor::zeros(x.shape());
            let mut dw = Tensor::zeros(w.shape());
            let mut db = Tensor::zeros(b.shape());
            for r in 0..n {
                mat_vec(w, g.row(r), dx.row_mut(r));
                add_outer(&mut dw, x.row(r), g.row(r));
                axpy(T::one(), g.row(r), db.data_mut());
            }
            Some(LinearGrads { dx, dw, db })
        }
    };
    Ok((y, grads))
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(SruError::dim("softmax", &[0], &[1]));
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p = *p / total);
    Ok(out)
}

/// Softmax cross-entropy against a class index.
///
/// Returns `-log softmax(logits)[target]` and its gradient
/// `softmax(logits) - onehot(target)`.
pub fn cross_entropy_with_grad<T: Real>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(SruError::Index {
            what: "cross-entropy target",
            index: target,
            bound: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = grad.iter().copied().sum();
    let loss = total.ln() + max - logits[target];
    grad.iter_mut().for_each(|p| *p = *p / total);
    grad[target] -= T::one();
    Ok((loss, grad))
}
