use rand::Rng;

use super::{check_ranks, BackwardPlacement, BlockSync, INIT_STD};
use crate::collectives::{CommLedger, PartialReduceSpec, RankMask, RankSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_backward, linear, matmul_nt, matmul_tn, Tensor};

/// Two-layer GeLU MLP, `h → 4h → h`, sharded over ranks.
///
/// Rank `m` holds a column block of the up projection (`h × 4h/M`) and the
/// matching row block of the down projection (`4h/M × h`). The down block's
/// leading `shared` columns feed the synchronized channels and the rest the
/// rank's private channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedMlp<T> {
    up: Vec<Tensor<T>>,
    down: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub up: Vec<Tensor<T>>,
    pub down: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    input: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    act: Vec<Tensor<T>>,
    out_shape: Vec<usize>,
    mask: Option<RankMask>,
    sync: BlockSync,
}

impl<T: Scalar> ShardedMlp<T> {
    pub fn new(up: Vec<Tensor<T>>, down: Vec<Tensor<T>>) -> Result<Self> {
        if up.is_empty() || up.len() != down.len() {
            return Err(Error::Config(
                "MLP needs one up and one down shard per rank".into(),
            ));
        }
        let (h, f) = (up[0].rows(), up[0].cols());
        for (u, d) in up.iter().zip(&down) {
            if u.shape() != [h, f] || d.shape() != [f, h] {
                return Err(Error::ShapeMismatch {
                    op: "ShardedMlp::new",
                    lhs: u.shape().to_vec(),
                    rhs: d.shape().to_vec(),
                });
            }
        }
        Ok(Self { up, down })
    }

    /// Shards full weights `a: h×f` by columns and `b: f×h` by rows.
    pub fn from_full(a: &Tensor<T>, b: &Tensor<T>, ranks: usize) -> Result<Self> {
        let f = a.cols();
        if ranks == 0 || !f.is_multiple_of(ranks) || b.rows() != f || b.cols() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "ShardedMlp::from_full",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let w = f / ranks;
        let up = (0..ranks)
            .map(|m| a.slice_cols(m * w, (m + 1) * w))
            .collect();
        let down = (0..ranks)
            .map(|m| b.slice_rows(m * w, (m + 1) * w))
            .collect();
        Self::new(up, down)
    }

    /// Normal initialization of the full `h × 4h` and `4h × h` weights,
    /// then sharded, so the same generator state yields the same logical
    /// model for any rank count.
    pub fn init<R: Rng + ?Sized>(hidden: usize, ranks: usize, rng: &mut R) -> Result<Self> {
        let a = Tensor::randn(&[hidden, 4 * hidden], INIT_STD, rng);
        let b = Tensor::randn(&[4 * hidden, hidden], INIT_STD, rng);
        Self::from_full(&a, &b, ranks)
    }

    pub fn to_full(&self) -> (Tensor<T>, Tensor<T>) {
        (
            Tensor::concat_cols(&self.up).expect("consistent shards"),
            Tensor::concat_rows(&self.down).expect("consistent shards"),
        )
    }

    pub fn ranks(&self) -> usize {
        self.up.len()
    }

    pub fn hidden(&self) -> usize {
        self.up[0].rows()
    }

    pub fn up(&self, m: usize) -> &Tensor<T> {
        &self.up[m]
    }

    pub fn down(&self, m: usize) -> &Tensor<T> {
        &self.down[m]
    }

    pub fn shards_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &mut Tensor<T>)> {
        self.up.iter_mut().zip(self.down.iter_mut())
    }

    /// Down-projection columns writing the synchronized channels.
    pub fn shared_block(&self, m: usize, spec: &PartialReduceSpec) -> Option<Tensor<T>> {
        (spec.shared_count() > 0).then(|| self.down[m].slice_cols(0, spec.shared_count()))
    }

    /// Down-projection columns writing rank `m`'s private channels.
    pub fn private_block(&self, m: usize, spec: &PartialReduceSpec) -> Option<Tensor<T>> {
        (spec.private_count() > 0)
            .then(|| self.down[m].slice_cols(spec.shared_count(), spec.hidden()))
    }

    /// Rank `m`'s unsynchronized contribution `σ(x A_m) B_m`.
    pub fn rank_partial(&self, m: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pre = linear(x, &self.up[m])?;
        linear(&gelu(&pre), &self.down[m])
    }
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(mlp: &ShardedMlp<T>) -> Self {
        Self {
            up: mlp.up.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            down: mlp.down.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Per-rank `Z̃_m = σ(X_m A_m) B_m`, then the block's output sync.
pub fn mlp_forward<T: Scalar>(
    x: &RankSet<T>,
    mlp: &ShardedMlp<T>,
    sync: &BlockSync,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, MlpCache<T>)> {
    check_ranks(x, mlp.ranks(), mlp.hidden(), "mlp_forward")?;
    let mut input = Vec::with_capacity(x.ranks());
    let mut pre = Vec::with_capacity(x.ranks());
    let mut act = Vec::with_capacity(x.ranks());
    let mut partial = Vec::with_capacity(x.ranks());
    for (m, xm) in x.iter().enumerate() {
        let xm = xm.as_matrix();
        let u = linear(&xm, &mlp.up[m])?;
        let y = gelu(&u);
        partial.push(linear(&y, &mlp.down[m])?.reshape(x.shape())?);
        input.push(xm);
        pre.push(u);
        act.push(y);
    }
    let (z, mask) = sync.forward(&RankSet::new(partial)?, ledger)?;
    let cache = MlpCache {
        input,
        pre,
        act,
        out_shape: x.shape().to_vec(),
        mask,
        sync: *sync,
    };
    Ok((z, cache))
}

/// Gradients of the weights and of the per-rank inputs.
pub fn mlp_backward<T: Scalar>(
    upstream: &RankSet<T>,
    cache: &MlpCache<T>,
    mlp: &ShardedMlp<T>,
    placement: BackwardPlacement,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, MlpGrads<T>)> {
    if upstream.shape() != cache.out_shape.as_slice() || upstream.ranks() != cache.input.len() {
        return Err(Error::CacheMismatch(format!(
            "upstream {:?} on {} ranks, cached output {:?} on {} ranks",
            upstream.shape(),
            upstream.ranks(),
            cache.out_shape,
            cache.input.len()
        )));
    }
    let g = cache
        .sync
        .backward(upstream, cache.mask.as_ref(), placement, ledger)?;
    let mut grads = MlpGrads {
        up: Vec::with_capacity(mlp.ranks()),
        down: Vec::with_capacity(mlp.ranks()),
    };
    let mut dx = Vec::with_capacity(mlp.ranks());
    for m in 0..mlp.ranks() {
        let gm = g[m].as_matrix();
        grads.down.push(matmul_tn(&cache.act[m], &gm)?);
        let dy = matmul_nt(&gm, &mlp.down[m])?;
        let du = gelu_backward(&cache.pre[m], &dy);
        grads.up.push(matmul_tn(&cache.input[m], &du)?);
        dx.push(matmul_nt(&du, &mlp.up[m])?.reshape(&cache.out_shape)?);
    }
    let dx = cache
        .sync
        .input_grad_reduce(RankSet::new(dx)?, placement, ledger);
    Ok((dx, grads))
}
