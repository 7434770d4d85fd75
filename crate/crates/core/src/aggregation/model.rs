use crate::aggregation::layers::{
    attention_backward, attention_scores, fuse, fuse_backward, predict_backward, predict_cached,
    AttentionGrads, AttentionParams, OutputCache, OutputGrads, OutputParams,
};
use crate::error::{Result, SruError};
use crate::numerics::{
    add_outer, axpy, cross_entropy_with_grad, vec_mat_acc, xavier_uniform, ParamId, ParamStore,
    Real, RngStream, Tensor,
};

/// Per-shard centroid vectors in the space the attention compares against.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardCentroids<T> {
    pub vectors: Vec<Vec<T>>,
}

impl<T: Real> ShardCentroids<T> {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AggIds {
    proj_w: Vec<ParamId>,
    proj_b: Vec<ParamId>,
    att_w: ParamId,
    att_b: ParamId,
    att_g: ParamId,
    out_w1: ParamId,
    out_b1: ParamId,
    out_w2: ParamId,
    out_b2: ParamId,
}

fn proj_name(k: usize, part: &str) -> String {
    format!("proj.{k:03}.{part}")
}

/// Sizes of an aggregation model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregationShape {
    pub shards: usize,
    pub dim: usize,
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub num_items: usize,
}

/// Projection, centroid-conditioned attention, fusion and output network.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationModel<T = f32> {
    params: ParamStore<T>,
    ids: AggIds,
    shape: AggregationShape,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct AggForward<T> {
    pub projected: Vec<Vec<T>>,
    pub attention: Vec<T>,
    pub fused: Vec<T>,
    output: OutputCache<T>,
}

impl<T> AggForward<T> {
    pub fn logits(&self) -> &[T] {
        &self.output.logits
    }
}

impl<T: Real> AggregationModel<T> {
    /// Projections start at identity plus uniform noise of amplitude
    /// `init_noise` with zero bias; other weights are Glorot-uniform.
    pub fn new(shape: AggregationShape, init_noise: f64, rng: &mut RngStream) -> Self {
        let AggregationShape { shards, dim, attention_dim, hidden_dim, num_items } = shape;
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
        for k in 0..shards {
            let mut w = Tensor::<T>::identity(dim);
            for x in w.data_mut() {
                *x += T::of(rng.uniform(-init_noise, init_noise));
            }
            entries.push((proj_name(k, "w"), w));
            entries.push((proj_name(k, "b"), Tensor::zeros(&[dim])));
        }
        entries.push(("att.w".into(), xavier_uniform(dim, attention_dim, rng)));
        entries.push(("att.b".into(), Tensor::zeros(&[attention_dim])));
        let g = xavier_uniform::<T>(1, attention_dim, rng).into_data();
        entries.push(("att.g".into(), Tensor::vector(g)));
        entries.push(("out.w1".into(), xavier_uniform(dim, hidden_dim, rng)));
        entries.push(("out.b1".into(), Tensor::zeros(&[hidden_dim])));
        entries.push(("out.w2".into(), xavier_uniform(hidden_dim, num_items, rng)));
        entries.push(("out.b2".into(), Tensor::zeros(&[num_items])));
        let params = ParamStore::new(entries).expect("unique names");
        Self::from_params(params).expect("consistent shapes")
    }

    /// Wraps a parameter store, inferring and validating the model shape.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let mut shards = 0;
        while params.id(&proj_name(shards, "w")).is_ok() {
            shards += 1;
        }
        if shards == 0 {
            return Err(SruError::contract("aggregation model has no shard projections"));
        }
        let ids = AggIds {
            proj_w: (0..shards).map(|k| params.id(&proj_name(k, "w"))).collect::<Result<_>>()?,
            proj_b: (0..shards).map(|k| params.id(&proj_name(k, "b"))).collect::<Result<_>>()?,
            att_w: params.id("att.w")?,
            att_b: params.id("att.b")?,
            att_g: params.id("att.g")?,
            out_w1: params.id("out.w1")?,
            out_b1: params.id("out.b1")?,
            out_w2: params.id("out.w2")?,
            out_b2: params.id("out.b2")?,
        };
        let att_w = params.value(ids.att_w);
        let w1 = params.value(ids.out_w1);
        let w2 = params.value(ids.out_w2);
        let shape = AggregationShape {
            shards,
            dim: att_w.rows(),
            attention_dim: att_w.cols(),
            hidden_dim: w1.cols(),
            num_items: w2.cols(),
        };
        let d = shape.dim;
        let expect = |id: ParamId, s: &[usize]| -> Result<()> {
            let got = params.value(id).shape();
            if got != s {
                return Err(SruError::dim("aggregation parameter", s, got));
            }
            Ok(())
        };
        for k in 0..shards {
            expect(ids.proj_w[k], &[d, d])?;
            expect(ids.proj_b[k], &[d])?;
        }
        expect(ids.att_b, &[shape.attention_dim])?;
        expect(ids.att_g, &[shape.attention_dim])?;
        expect(ids.out_w1, &[d, shape.hidden_dim])?;
        expect(ids.out_b1, &[shape.hidden_dim])?;
        expect(ids.out_w2, &[shape.hidden_dim, shape.num_items])?;
        expect(ids.out_b2, &[shape.num_items])?;
        if params.len() != 2 * shards + 7 {
            return Err(SruError::contract("unexpected parameters in aggregation store"));
        }
        Ok(AggregationModel { params, ids, shape })
    }

    pub fn shape(&self) -> AggregationShape {
        self.shape
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn attention_params(&self) -> AttentionParams<'_, T> {
        AttentionParams {
            w: self.params.value(self.ids.att_w),
            b: self.params.value(self.ids.att_b),
            g: self.params.value(self.ids.att_g),
        }
    }

    fn output_params(&self) -> OutputParams<'_, T> {
        OutputParams {
            w1: self.params.value(self.ids.out_w1),
            b1: self.params.value(self.ids.out_b1),
            w2: self.params.value(self.ids.out_w2),
            b2: self.params.value(self.ids.out_b2),
        }
    }

    fn check_inputs(&self, states: &[Vec<T>]) -> Result<()> {
        if states.len() != self.shape.shards {
            return Err(SruError::dim("aggregation shards", &[self.shape.shards], &[states.len()]));
        }
        if let Some(bad) = states.iter().find(|h| h.len() != self.shape.dim) {
            return Err(SruError::dim("aggregation state", &[self.shape.dim], &[bad.len()]));
        }
        Ok(())
    }

    fn affine_k(&self, k: usize, x: &[T]) -> Vec<T> {
        let mut y = self.params.value(self.ids.proj_b[k]).data().to_vec();
        vec_mat_acc(x, self.params.value(self.ids.proj_w[k]), &mut y);
        y
    }

    /// `c'_k = c_k·W_k + b_k` for every shard.
    pub fn project_centroids(&self, centroids: &ShardCentroids<T>) -> Result<Vec<Vec<T>>> {
        self.check_inputs(&centroids.vectors)?;
        Ok(centroids
            .vectors
            .iter()
            .enumerate()
            .map(|(k, c)| self.affine_k(k, c))
            .collect())
    }

    /// Forward pass from per-shard session states and projected centroids.
    pub fn forward(&self, states: &[Vec<T>], projected_centroids: &[Vec<T>]) -> Result<AggForward<T>> {
        self.check_inputs(states)?;
        let projected: Vec<Vec<T>> = states
            .iter()
            .enumerate()
            .map(|(k, h)| self.affine_k(k, h))
            .collect();
        let attention = attention_scores(&projected, projected_centroids, &self.attention_params())?;
        let fused = fuse(&attention, &projected)?;
        let output = predict_cached(&fused, &self.output_params())?;
        Ok(AggForward { projected, attention, fused, output })
    }

    pub fn logits(&self, states: &[Vec<T>], centroids: &ShardCentroids<T>) -> Result<Vec<T>> {
        let cp = self.project_centroids(centroids)?;
        Ok(self.forward(states, &cp)?.output.logits)
    }

    /// Backward pass for one example. Adds parameter gradients (except the
    /// centroid path through `W_k, b_k`) into the store and accumulates the
    /// gradient on each projected centroid into `dcp`; finish with
    /// [`AggregationModel::apply_centroid_grads`].
    pub fn backward(
        &mut self,
        states: &[Vec<T>],
        projected_centroids: &[Vec<T>],
        fwd: &AggForward<T>,
        dlogits: &[T],
        dcp: &mut [Vec<T>],
    ) {
        let ids = self.ids.clone();
        let (values, grads) = self.params.split_mut();
        let out_p = OutputParams {
            w1: &values[ids.out_w1.0],
            b1: &values[ids.out_b1.0],
            w2: &values[ids.out_w2.0],
            b2: &values[ids.out_b2.0],
        };
        let [w1, b1, w2, b2] = grads
            .get_disjoint_mut([ids.out_w1.0, ids.out_b1.0, ids.out_w2.0, ids.out_b2.0])
            .expect("distinct ids");
        let dhf = predict_backward(
            &fwd.fused,
            &fwd.output,
            &out_p,
            dlogits,
            &mut OutputGrads { w1, b1, w2, b2 },
        );
        let (da, mut dhp) = fuse_backward(&fwd.attention, &fwd.projected, &dhf);
        let att_p = AttentionParams {
            w: &values[ids.att_w.0],
            b: &values[ids.att_b.0],
            g: &values[ids.att_g.0],
        };
        let [gw, gb, gg] = grads
            .get_disjoint_mut([ids.att_w.0, ids.att_b.0, ids.att_g.0])
            .expect("distinct ids");
        let (dhp_att, dcp_att) = attention_backward(
            &fwd.projected,
            projected_centroids,
            &att_p,
            &fwd.attention,
            &da,
            &mut AttentionGrads { w: gw, b: gb, g: gg },
        );
        for k in 0..states.len() {
            axpy(T::one(), &dhp_att[k], &mut dhp[k]);
            axpy(T::one(), &dcp_att[k], &mut dcp[k]);
            let [pw, pb] = grads
                .get_disjoint_mut([ids.proj_w[k].0, ids.proj_b[k].0])
                .expect("distinct ids");
            add_outer(pw, &states[k], &dhp[k]);
            axpy(T::one(), &dhp[k], pb.data_mut());
        }
    }

    /// Pushes accumulated projected-centroid gradients through `W_k, b_k`.
    pub fn apply_centroid_grads(&mut self, centroids: &ShardCentroids<T>, dcp: &[Vec<T>]) {
        let ids = self.ids.clone();
        let (_, grads) = self.params.split_mut();
        for (k, c) in centroids.vectors.iter().enumerate() {
            add_outer(&mut grads[ids.proj_w[k].0], c, &dcp[k]);
            axpy(T::one(), &dcp[k], grads[ids.proj_b[k].0].data_mut());
        }
    }

    /// Cross-entropy of one example; gradients are added to the store.
    pub fn loss_and_grad(
        &mut self,
        states: &[Vec<T>],
        centroids: &ShardCentroids<T>,
        target_index: usize,
    ) -> Result<T> {
        let cp = self.project_centroids(centroids)?;
        let fwd = self.forward(states, &cp)?;
        let (loss, dl) = cross_entropy_with_grad(fwd.logits(), target_index)?;
        let mut dcp = vec![vec![T::zero(); self.shape.dim]; self.shape.shards];
        self.backward(states, &cp, &fwd, &dl, &mut dcp);
        self.apply_centroid_grads(centroids, &dcp);
        Ok(loss)
    }

    pub fn loss(&self, states: &[Vec<T>], centroids: &ShardCentroids<T>, target_index: usize) -> Result<T> {
        let logits = self.logits(states, centroids)?;
        Ok(cross_entropy_with_grad(&logits, target_index)?.0)
    }

    pub fn cast<U: Real>(&self) -> AggregationModel<U> {
        AggregationModel::from_params(self.params.cast()).expect("same layout")
    }
}
