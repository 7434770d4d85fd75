use crate::corpus::{ItemId, PAD};
use crate::error::{Result, SruError};
use crate::evaluation::Recommender;
use crate::numerics::{
    add_outer, axpy, cross_entropy_with_grad, dot, mat_vec, sigmoid, vec_mat_acc,
    xavier_uniform, ParamId, ParamStore, Real, RngStream, Tensor,
};

const EMBEDDING: &str = "embedding";
const GATES: [&str; 9] = [
    "gru.w_z", "gru.u_z", "gru.b_z", "gru.w_r", "gru.u_r", "gru.b_r", "gru.w_n", "gru.u_n",
    "gru.b_n",
];

#[derive(Clone, Copy, Debug, PartialEq)]
struct GruIds {
    emb: ParamId,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

impl GruIds {
    fn lookup<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let g = |i: usize| store.id(GATES[i]);
        Ok(GruIds {
            emb: store.id(EMBEDDING)?,
            w_z: g(0)?,
            u_z: g(1)?,
            b_z: g(2)?,
            w_r: g(3)?,
            u_r: g(4)?,
            b_r: g(5)?,
            w_n: g(6)?,
            u_n: g(7)?,
            b_n: g(8)?,
        })
    }
}

/// GRU encoder over item embeddings.
///
/// Row vectors throughout: `z = σ(x·W_z + h·U_z + b_z)`,
/// `r = σ(x·W_r + h·U_r + b_r)`, `n = tanh(x·W_n + (r⊙h)·U_n + b_n)`,
/// `h' = (1−z)⊙h + z⊙n`. Item logits are `h·E[v]` for `v` in `1..=|V|`;
/// the padding row `E[0]` never takes part.
#[derive(Clone, Debug, PartialEq)]
pub struct GruModel<T = f32> {
    params: ParamStore<T>,
    ids: GruIds,
    num_items: usize,
    dim: usize,
    max_len: usize,
}

/// Intermediate values of one GRU step, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCache<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub n: Vec<T>,
    rh: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Real> GruModel<T> {
    /// Freshly initialized model: Glorot-uniform weights, zero biases and a
    /// zero padding row.
    pub fn new(num_items: usize, dim: usize, max_len: usize, rng: &mut RngStream) -> Self {
        let mut entries = vec![(EMBEDDING.to_string(), xavier_uniform(num_items + 1, dim, rng))];
        for name in GATES {
            let t = if name.contains(".b_") {
                Tensor::zeros(&[dim])
            } else {
                xavier_uniform(dim, dim, rng)
            };
            entries.push((name.to_string(), t));
        }
        entries[0].1.row_mut(0).fill(T::zero());
        let params = ParamStore::new(entries).expect("names are unique");
        Self::from_params(params, max_len).expect("shapes are consistent")
    }

    /// Model with every parameter zero.
    pub fn zeroed(num_items: usize, dim: usize, max_len: usize) -> Self {
        let mut entries = vec![(EMBEDDING.to_string(), Tensor::zeros(&[num_items + 1, dim]))];
        for name in GATES {
            let shape: &[usize] = if name.contains(".b_") { &[dim] } else { &[dim, dim] };
            entries.push((name.to_string(), Tensor::zeros(shape)));
        }
        Self::from_params(ParamStore::new(entries).expect("unique"), max_len).expect("consistent")
    }

    /// Wraps a parameter store, validating names and shapes.
    pub fn from_params(params: ParamStore<T>, max_len: usize) -> Result<Self> {
        let ids = GruIds::lookup(&params)?;
        let emb = params.value(ids.emb);
        if emb.shape().len() != 2 || emb.rows() < 2 {
            return Err(SruError::dim("gru embedding", emb.shape(), &[2, 1]));
        }
        let dim = emb.cols();
        let num_items = emb.rows() - 1;
        for name in GATES {
            let t = params.value(params.id(name)?);
            let expected: &[usize] = if name.contains(".b_") { &[dim] } else { &[dim, dim] };
            if t.shape() != expected {
                return Err(SruError::dim("gru gate", expected, t.shape()));
            }
        }
        if params.len() != GATES.len() + 1 {
            return Err(SruError::contract("unexpected parameters in GRU store"));
        }
        Ok(GruModel {
            params,
            ids,
            num_items,
            dim,
            max_len,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn embedding(&self) -> &Tensor<T> {
        self.params.value(self.ids.emb)
    }

    fn check_item(&self, item: ItemId) -> Result<()> {
        if item as usize > self.num_items {
            return Err(SruError::Index {
                what: "item",
                index: item as usize,
                bound: self.num_items + 1,
            });
        }
        Ok(())
    }

    fn effective_prefix<'a>(&self, prefix: &'a [ItemId]) -> &'a [ItemId] {
        &prefix[prefix.len().saturating_sub(self.max_len)..]
    }

    /// Final hidden state after consuming the last `max_len` ids of `prefix`
    /// from a zero initial state. Padding ids are skipped.
    pub fn encode(&self, prefix: &[ItemId]) -> Result<Vec<T>> {
        let mut h = vec![T::zero(); self.dim];
        for &item in self.effective_prefix(prefix) {
            self.check_item(item)?;
            if item == PAD {
                continue;
            }
            h = self.step(self.embedding().row(item as usize), &h).h;
        }
        Ok(h)
    }

    /// Hidden state after each item of `items`, consumed left to right.
    ///
    /// Entry `t` equals `encode(&items[..=t])` while `t < max_len`.
    pub fn encode_steps(&self, items: &[ItemId]) -> Result<Vec<Vec<T>>> {
        let mut h = vec![T::zero(); self.dim];
        let mut out = Vec::with_capacity(items.len());
        for &item in items {
            self.check_item(item)?;
            if item != PAD {
                h = self.step(self.embedding().row(item as usize), &h).h;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Logits over items `1..=|V|`; entry `i` scores item `i + 1`.
    pub fn score(&self, h: &[T]) -> Result<Vec<T>> {
        if h.len() != self.dim {
            return Err(SruError::dim("score", &[self.dim], &[h.len()]));
        }
        let e = self.embedding();
        Ok((1..=self.num_items).map(|v| dot(h, e.row(v))).collect())
    }

    fn step(&self, x: &[T], h_prev: &[T]) -> CellCache<T> {
        let v = self.params.values();
        let ids = &self.ids;
        let d = self.dim;
        let gate = |w: ParamId, u: ParamId, b: ParamId, hin: &[T]| {
            let mut a = v[b.0].data().to_vec();
            vec_mat_acc(x, &v[w.0], &mut a);
            vec_mat_acc(hin, &v[u.0], &mut a);
            a
        };
        let z: Vec<T> = gate(ids.w_z, ids.u_z, ids.b_z, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<T> = gate(ids.w_r, ids.u_r, ids.b_r, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
        let n: Vec<T> = gate(ids.w_n, ids.u_n, ids.b_n, &rh)
            .into_iter()
            .map(|a| a.tanh())
            .collect();
        let mut h = vec![T::zero(); d];
        for i in 0..d {
            h[i] = (T::one() - z[i]) * h_prev[i] + z[i] * n[i];
        }
        CellCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            rh,
            h,
        }
    }

    /// Backward through one step. Parameter gradients are added to the
    /// store's (already zeroed) gradient buffers; returns `(dx, dh_prev)`.
    fn step_backward(&mut self, c: &CellCache<T>, dh: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.dim;
        let ids = self.ids;
        let (v, g) = self.params.split_mut();
        let one = T::one();
        let mut dx = vec![T::zero(); c.x.len()];
        let mut dh_prev = vec![T::zero(); d];
        let mut da_n = vec![T::zero(); d];
        let mut da_z = vec![T::zero(); d];
        for i in 0..d {
            dh_prev[i] = dh[i] * (one - c.z[i]);
            let dn = dh[i] * c.z[i];
            da_n[i] = dn * (one - c.n[i] * c.n[i]);
            let dz = dh[i] * (c.n[i] - c.h_prev[i]);
            da_z[i] = dz * c.z[i] * (one - c.z[i]);
        }
        // candidate
        add_outer(&mut g[ids.w_n.0], &c.x, &da_n);
        add_outer(&mut g[ids.u_n.0], &c.rh, &da_n);
        axpy(one, &da_n, g[ids.b_n.0].data_mut());
        let mut tmp = vec![T::zero(); d];
        mat_vec(&v[ids.w_n.0], &da_n, &mut tmp);
        axpy(one, &tmp, &mut dx);
        let mut drh = vec![T::zero(); d];
        mat_vec(&v[ids.u_n.0], &da_n, &mut drh);
        let mut da_r = vec![T::zero(); d];
        for i in 0..d {
            dh_prev[i] += drh[i] * c.r[i];
            let dr = drh[i] * c.h_prev[i];
            da_r[i] = dr * c.r[i] * (one - c.r[i]);
        }
        // update and reset gates
        for (w, u, b, da) in [
            (ids.w_z, ids.u_z, ids.b_z, &da_z),
            (ids.w_r, ids.u_r, ids.b_r, &da_r),
        ] {
            add_outer(&mut g[w.0], &c.x, da);
            add_outer(&mut g[u.0], &c.h_prev, da);
            axpy(one, da, g[b.0].data_mut());
            mat_vec(&v[w.0], da, &mut tmp);
            axpy(one, &tmp, &mut dx);
            mat_vec(&v[u.0], da, &mut tmp);
            axpy(one, &tmp, &mut dh_prev);
        }
        (dx, dh_prev)
    }

    /// Summed next-item cross-entropy over every position of `items`,
    /// accumulating gradients into the store. Call
    /// [`ParamStore::zero_grads`] before the first sequence of a batch.
    pub fn sequence_loss_and_grad(&mut self, items: &[ItemId]) -> Result<T> {
        for &item in items {
            self.check_item(item)?;
            if item == PAD {
                return Err(SruError::contract("training sequence contains padding"));
            }
        }
        if items.len() < 2 {
            return Ok(T::zero());
        }
        let d = self.dim;
        let steps = items.len() - 1;
        let mut caches = Vec::with_capacity(steps);
        let mut dlogits = Vec::with_capacity(steps);
        let mut loss = T::zero();
        let mut h = vec![T::zero(); d];
        for t in 0..steps {
            let cache = self.step(self.embedding().row(items[t] as usize), &h);
            h = cache.h.clone();
            let logits = self.score(&h)?;
            let (l, dl) = cross_entropy_with_grad(&logits, items[t + 1] as usize - 1)?;
            loss += l;
            caches.push(cache);
            dlogits.push(dl);
        }
        let emb = self.ids.emb;
        let mut dh_next = vec![T::zero(); d];
        for t in (0..steps).rev() {
            let cache = &caches[t];
            let mut dh = dh_next;
            {
                let (v, g) = self.params.split_mut();
                let e = &v[emb.0];
                let ge = &mut g[emb.0];
                for (i, &dl) in dlogits[t].iter().enumerate() {
                    let row = i + 1;
                    axpy(dl, e.row(row), &mut dh);
                    axpy(dl, &cache.h, ge.row_mut(row));
                }
            }
            let (dx, dh_prev) = self.step_backward(cache, &dh);
            let (_, g) = self.params.split_mut();
            axpy(T::one(), &dx, g[emb.0].row_mut(items[t] as usize));
            dh_next = dh_prev;
        }
        Ok(loss)
    }

    /// Summed next-item loss without gradients.
    pub fn sequence_loss(&self, items: &[ItemId]) -> Result<T> {
        let mut loss = T::zero();
        let states = self.encode_steps(&items[..items.len().saturating_sub(1)])?;
        for (t, h) in states.iter().enumerate() {
            let logits = self.score(h)?;
            loss += cross_entropy_with_grad(&logits, items[t + 1] as usize - 1)?.0;
        }
        Ok(loss)
    }

    pub fn cast<U: Real>(&self) -> GruModel<U> {
        GruModel::from_params(self.params.cast(), self.max_len).expect("same layout")
    }
}

/// One GRU step on an input embedding `x` and previous state `h_prev`.
pub fn gru_cell<T: Real>(model: &GruModel<T>, x: &[T], h_prev: &[T]) -> Result<CellCache<T>> {
    if x.len() != model.dim || h_prev.len() != model.dim {
        return Err(SruError::dim("gru_cell", &[x.len(), h_prev.len()], &[model.dim, model.dim]));
    }
    Ok(model.step(x, h_prev))
}

/// Backward pass of [`gru_cell`]: adds the nine gate-parameter gradients to
/// `model`'s gradient buffers and returns `(dx, dh_prev)`.
pub fn gru_cell_backward<T: Real>(
    model: &mut GruModel<T>,
    cache: &CellCache<T>,
    dh_new: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    if dh_new.len() != model.dim {
        return Err(SruError::dim("gru_cell_backward", &[model.dim], &[dh_new.len()]));
    }
    Ok(model.step_backward(cache, dh_new))
}

impl<T: Real> Recommender for GruModel<T> {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn logits(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let h = self.encode(prefix)?;
        Ok(self.score(&h)?.into_iter().map(Real::as_f64).collect())
    }

    fn prefix_logits(&self, items: &[ItemId]) -> Result<Vec<Vec<f64>>> {
        if items.len() < 2 {
            return Ok(Vec::new());
        }
        let inputs = &items[..items.len() - 1];
        if inputs.len() > self.max_len {
            return (1..items.len()).map(|t| self.logits(&items[..t])).collect();
        }
        self.encode_steps(inputs)?
            .iter()
            .map(|h| Ok(self.score(h)?.into_iter().map(Real::as_f64).collect()))
            .collect()
    }
}
