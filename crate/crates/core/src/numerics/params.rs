use crate::error::{Result, SruError};
use crate::numerics::{Real, RngStream, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters and their gradients, kept in lexicographic name order.
///
/// Iteration, optimizer updates and checkpoint layout all follow that order,
/// which keeps training bitwise reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    populated: Vec<bool>,
}

impl<T: Real> ParamStore<T> {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor<T>)>,
        S: Into<String>,
    {
        let mut entries: Vec<(String, Tensor<T>)> =
            entries.into_iter().map(|(n, t)| (n.into(), t)).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(SruError::contract(format!(
                    "duplicate parameter name `{}`",
                    pair[0].0
                )));
            }
        }
        let grads = entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let populated = vec![false; entries.len()];
        let (names, values) = entries.into_iter().unzip();
        Ok(ParamStore {
            names,
            values,
            grads,
            populated,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map(ParamId)
            .map_err(|_| SruError::Lookup {
                what: "parameter",
                key: name.to_string(),
            })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).ok().map(|id| self.value(id))
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.populated[id.0].then(|| &self.grads[id.0])
    }

    /// Replaces a value, checking that the shape is unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(SruError::dim(
                "set_value",
                self.values[id.0].shape(),
                value.shape(),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.values[id.0].shape() {
            return Err(SruError::dim(
                "set_grad",
                self.values[id.0].shape(),
                grad.shape(),
            ));
        }
        self.grads[id.0] = grad;
        self.populated[id.0] = true;
        Ok(())
    }

    /// Zeroes every gradient and marks it populated.
    pub fn zero_grads(&mut self) {
        for (g, p) in self.grads.iter_mut().zip(self.populated.iter_mut()) {
            g.fill_zero();
            *p = true;
        }
    }

    /// Marks every gradient as missing.
    pub fn clear_grads(&mut self) {
        self.populated.iter_mut().for_each(|p| *p = false);
    }

    pub fn scale_grads(&mut self, factor: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub(crate) fn is_populated(&self, id: ParamId) -> bool {
        self.populated[id.0]
    }

    /// Simultaneous read access to values and write access to gradients.
    ///
    /// Callers are expected to have called [`ParamStore::zero_grads`] first.
    pub fn split_mut(&mut self) -> (&[Tensor<T>], &mut [Tensor<T>]) {
        (&self.values, &mut self.grads)
    }

    pub(crate) fn values_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            populated: self.populated.clone(),
        }
    }

    /// Bitwise equality of names, shapes and values (gradients ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Glorot-uniform matrix in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.uniform(-bound, bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_orders_names_and_rejects_duplicates() {
        let store = ParamStore::<f64>::new([
            ("b", Tensor::zeros(&[2])),
            ("a", Tensor::zeros(&[1])),
        ])
        .unwrap();
        assert_eq!(store.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(store.value(store.id("b").unwrap()).shape(), &[2]);
        assert!(store.id("c").is_err());

        let dup = ParamStore::<f64>::new([("a", Tensor::zeros(&[1])), ("a", Tensor::zeros(&[1]))]);
        assert!(dup.is_err());
    }

    #[test]
    fn grads_keep_parameter_shapes() {
        let mut store = ParamStore::<f32>::new([("w", Tensor::zeros(&[2, 3]))]).unwrap();
        let id = store.id("w").unwrap();
        assert!(store.grad(id).is_none());
        assert!(store.set_grad(id, Tensor::zeros(&[3, 2])).is_err());
        store.zero_grads();
        assert_eq!(store.grad(id).unwrap().shape(), &[2, 3]);
    }
}
