//! Forward and backward passes of the aggregation layers, one function pair
//! per layer. Backward functions add parameter gradients into the supplied
//! buffers and return gradients with respect to their inputs.

use crate::error::{Result, SruError};
use crate::numerics::{add_outer, axpy, dot, mat_vec, relu, softmax, vec_mat_acc, Real, Tensor};

/// Attention parameters: `W'` (`d × f`), `b'` (`f`) and `g` (`f`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'a, T> {
    pub w: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub g: &'a Tensor<T>,
}

pub struct AttentionGrads<'a, T> {
    pub w: &'a mut Tensor<T>,
    pub b: &'a mut Tensor<T>,
    pub g: &'a mut Tensor<T>,
}

/// Two-layer feed-forward head: `W1` (`d × d_ff`), `b1`, `W2` (`d_ff × |V|`), `b2`.
#[derive(Clone, Copy, Debug)]
pub struct OutputParams<'a, T> {
    pub w1: &'a Tensor<T>,
    pub b1: &'a Tensor<T>,
    pub w2: &'a Tensor<T>,
    pub b2: &'a Tensor<T>,
}

pub struct OutputGrads<'a, T> {
    pub w1: &'a mut Tensor<T>,
    pub b1: &'a mut Tensor<T>,
    pub w2: &'a mut Tensor<T>,
    pub b2: &'a mut Tensor<T>,
}

fn affine<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let mut y = b.data().to_vec();
    vec_mat_acc(x, w, &mut y);
    y
}

fn check_affine(op: &'static str, x: usize, w: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if w.shape().len() != 2 || w.rows() != x || b.len() != w.cols() {
        return Err(SruError::dim(op, &[x, b.len()], w.shape()));
    }
    Ok(())
}

/// Shared affine map of a shard's session state and centroid:
/// `h' = h·W_k + b_k`, `c' = c·W_k + b_k`.
pub fn project<T: Real>(h: &[T], c: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    check_affine("project", h.len(), w, b)?;
    if c.len() != h.len() {
        return Err(SruError::dim("project centroid", &[h.len()], &[c.len()]));
    }
    Ok((affine(h, w, b), affine(c, w, b)))
}

/// Backward of [`project`]; returns `(dh, dc)`.
pub fn project_backward<T: Real>(
    h: &[T],
    c: &[T],
    w: &Tensor<T>,
    dhp: &[T],
    dcp: &[T],
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    add_outer(dw, h, dhp);
    add_outer(dw, c, dcp);
    axpy(T::one(), dhp, db.data_mut());
    axpy(T::one(), dcp, db.data_mut());
    let mut dh = vec![T::zero(); h.len()];
    let mut dc = vec![T::zero(); c.len()];
    mat_vec(w, dhp, &mut dh);
    mat_vec(w, dcp, &mut dc);
    (dh, dc)
}

/// Pre-activations `z_k = (h'_k ⊙ c'_k)·W' + b'` for every shard.
fn attention_pre<T: Real>(hp: &[Vec<T>], cp: &[Vec<T>], p: &AttentionParams<'_, T>) -> Vec<Vec<T>> {
    hp.iter()
        .zip(cp)
        .map(|(h, c)| {
            let u: Vec<T> = h.iter().zip(c).map(|(&a, &b)| a * b).collect();
            affine(&u, p.w, p.b)
        })
        .collect()
}

fn check_attention<T: Real>(hp: &[Vec<T>], cp: &[Vec<T>], p: &AttentionParams<'_, T>) -> Result<()> {
    if hp.is_empty() || hp.len() != cp.len() {
        return Err(SruError::dim("attention shards", &[hp.len()], &[cp.len()]));
    }
    let d = hp[0].len();
    if hp.iter().chain(cp).any(|v| v.len() != d) {
        return Err(SruError::contract("attention inputs have mixed dimensions"));
    }
    check_affine("attention", d, p.w, p.b)?;
    if p.g.len() != p.b.len() {
        return Err(SruError::dim("attention g", p.b.shape(), p.g.shape()));
    }
    Ok(())
}

/// Attention over shards: `s_k = g · ReLU((h'_k ⊙ c'_k)·W' + b')`,
/// `a = softmax(s)`.
pub fn attention_scores<T: Real>(
    hp: &[Vec<T>],
    cp: &[Vec<T>],
    p: &AttentionParams<'_, T>,
) -> Result<Vec<T>> {
    check_attention(hp, cp, p)?;
    let scores: Vec<T> = attention_pre(hp, cp, p)
        .iter()
        .map(|z| {
            z.iter()
                .zip(p.g.data())
                .map(|(&zi, &gi)| gi * relu(zi))
                .sum()
        })
        .collect();
    softmax(&scores)
}

/// Backward of [`attention_scores`] given the upstream gradient on `a`;
/// returns `(dh'_k, dc'_k)` per shard.
#[allow(clippy::type_complexity)]
pub fn attention_backward<T: Real>(
    hp: &[Vec<T>],
    cp: &[Vec<T>],
    p: &AttentionParams<'_, T>,
    a: &[T],
    da: &[T],
    grads: &mut AttentionGrads<'_, T>,
) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let mean: T = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
    let pre = attention_pre(hp, cp, p);
    let f = p.b.len();
    let mut dhp = Vec::with_capacity(hp.len());
    let mut dcp = Vec::with_capacity(hp.len());
    for k in 0..hp.len() {
        let ds = a[k] * (da[k] - mean);
        let z = &pre[k];
        let mut dz = vec![T::zero(); f];
        for i in 0..f {
            let r = relu(z[i]);
            grads.g.data_mut()[i] += ds * r;
            if z[i] > T::zero() {
                dz[i] = ds * p.g.data()[i];
            }
        }
        let u: Vec<T> = hp[k].iter().zip(&cp[k]).map(|(&x, &y)| x * y).collect();
        add_outer(grads.w, &u, &dz);
        axpy(T::one(), &dz, grads.b.data_mut());
        let mut du = vec![T::zero(); u.len()];
        mat_vec(p.w, &dz, &mut du);
        dhp.push(du.iter().zip(&cp[k]).map(|(&g, &c)| g * c).collect());
        dcp.push(du.iter().zip(&hp[k]).map(|(&g, &h)| g * h).collect());
    }
    (dhp, dcp)
}

/// `h^f = Σ_k a_k h'_k`
pub fn fuse<T: Real>(a: &[T], hp: &[Vec<T>]) -> Result<Vec<T>> {
    if a.len() != hp.len() || hp.is_empty() {
        return Err(SruError::dim("fuse", &[a.len()], &[hp.len()]));
    }
    let mut out = vec![T::zero(); hp[0].len()];
    for (&ak, h) in a.iter().zip(hp) {
        if h.len() != out.len() {
            return Err(SruError::dim("fuse", &[out.len()], &[h.len()]));
        }
        axpy(ak, h, &mut out);
    }
    Ok(out)
}

/// Backward of [`fuse`]; returns `(da, dh'_k)`.
pub fn fuse_backward<T: Real>(a: &[T], hp: &[Vec<T>], dhf: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
    let da = hp.iter().map(|h| dot(h, dhf)).collect();
    let dhp = a
        .iter()
        .map(|&ak| dhf.iter().map(|&g| ak * g).collect())
        .collect();
    (da, dhp)
}

/// Hidden activation of the output network, kept for backward.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputCache<T> {
    pub pre: Vec<T>,
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
}

pub fn predict_cached<T: Real>(hf: &[T], p: &OutputParams<'_, T>) -> Result<OutputCache<T>> {
    check_affine("predict layer 1", hf.len(), p.w1, p.b1)?;
    check_affine("predict layer 2", p.b1.len(), p.w2, p.b2)?;
    let pre = affine(hf, p.w1, p.b1);
    let hidden: Vec<T> = pre.iter().map(|&x| relu(x)).collect();
    let logits = affine(&hidden, p.w2, p.b2);
    Ok(OutputCache { pre, hidden, logits })
}

/// Item logits `ReLU(h^f·W1 + b1)·W2 + b2`.
pub fn predict<T: Real>(hf: &[T], p: &OutputParams<'_, T>) -> Result<Vec<T>> {
    predict_cached(hf, p).map(|c| c.logits)
}

/// Backward of [`predict`]; returns `dh^f`.
pub fn predict_backward<T: Real>(
    hf: &[T],
    cache: &OutputCache<T>,
    p: &OutputParams<'_, T>,
    dlogits: &[T],
    grads: &mut OutputGrads<'_, T>,
) -> Vec<T> {
    add_outer(grads.w2, &cache.hidden, dlogits);
    axpy(T::one(), dlogits, grads.b2.data_mut());
    let mut dhidden = vec![T::zero(); cache.hidden.len()];
    mat_vec(p.w2, dlogits, &mut dhidden);
    for (g, &pre) in dhidden.iter_mut().zip(&cache.pre) {
        if pre <= T::zero() {
            *g = T::zero();
        }
    }
    add_outer(grads.w1, hf, &dhidden);
    axpy(T::one(), &dhidden, grads.b1.data_mut());
    let mut dhf = vec![T::zero(); hf.len()];
    mat_vec(p.w1, &dhidden, &mut dhf);
    dhf
}
