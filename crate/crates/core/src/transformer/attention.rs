use rand::Rng;

use super::{check_ranks, BackwardPlacement, BlockSync, INIT_STD};
use crate::collectives::{CommLedger, PartialReduceSpec, RankMask, RankSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear, matmul, matmul_nt, matmul_tn, Tensor};

/// Causal multi-head self-attention with heads split evenly across ranks.
///
/// Rank `m` owns heads `[m·n/M, (m+1)·n/M)`: a column block of each of the
/// query, key and value projections (`h × h/M`) and the matching row block
/// of the output projection (`h/M × h`).
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedAttention<T> {
    heads: usize,
    wq: Vec<Tensor<T>>,
    wk: Vec<Tensor<T>>,
    wv: Vec<Tensor<T>>,
    wo: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnGrads<T> {
    pub wq: Vec<Tensor<T>>,
    pub wk: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct RankActivations<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Causal attention weights, `[batch][head][query][key]`, zero above the
    /// diagonal.
    probs: Vec<T>,
    heads_out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    ranks: Vec<RankActivations<T>>,
    out_shape: Vec<usize>,
    batch: usize,
    seq: usize,
    mask: Option<RankMask>,
    sync: BlockSync,
}

impl<T: Scalar> ShardedAttention<T> {
    pub fn new(
        heads: usize,
        wq: Vec<Tensor<T>>,
        wk: Vec<Tensor<T>>,
        wv: Vec<Tensor<T>>,
        wo: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let ranks = wq.len();
        if ranks == 0 || wk.len() != ranks || wv.len() != ranks || wo.len() != ranks {
            return Err(Error::Config(
                "attention needs four projections per rank".into(),
            ));
        }
        if heads == 0 || !heads.is_multiple_of(ranks) {
            return Err(Error::Config(format!(
                "{heads} heads cannot be split evenly over {ranks} ranks"
            )));
        }
        let h = wq[0].rows();
        if !h.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {h} is not divisible by {heads} heads"
            )));
        }
        let w = h / ranks;
        for m in 0..ranks {
            for proj in [&wq[m], &wk[m], &wv[m]] {
                if proj.shape() != [h, w] {
                    return Err(Error::ShapeMismatch {
                        op: "ShardedAttention::new",
                        lhs: proj.shape().to_vec(),
                        rhs: vec![h, w],
                    });
                }
            }
            if wo[m].shape() != [w, h] {
                return Err(Error::ShapeMismatch {
                    op: "ShardedAttention::new",
                    lhs: wo[m].shape().to_vec(),
                    rhs: vec![w, h],
                });
            }
        }
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    /// Shards full `h × h` projections; head `j` occupies columns
    /// `[j·d, (j+1)·d)` of the query, key and value matrices.
    pub fn from_full(
        heads: usize,
        wq: &Tensor<T>,
        wk: &Tensor<T>,
        wv: &Tensor<T>,
        wo: &Tensor<T>,
        ranks: usize,
    ) -> Result<Self> {
        let h = wq.rows();
        if ranks == 0 || !heads.is_multiple_of(ranks.max(1)) || !h.is_multiple_of(ranks) {
            return Err(Error::Config(format!(
                "{heads} heads and hidden size {h} cannot be split over {ranks} ranks"
            )));
        }
        let w = h / ranks;
        let cols = |t: &Tensor<T>| {
            (0..ranks)
                .map(|m| t.slice_cols(m * w, (m + 1) * w))
                .collect()
        };
        let rows = (0..ranks)
            .map(|m| wo.slice_rows(m * w, (m + 1) * w))
            .collect();
        Self::new(heads, cols(wq), cols(wk), cols(wv), rows)
    }

    pub fn init<R: Rng + ?Sized>(
        hidden: usize,
        heads: usize,
        ranks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wq = Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        let wk = Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        let wv = Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        let wo = Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        Self::from_full(heads, &wq, &wk, &wv, &wo, ranks)
    }

    /// Full `(wq, wk, wv, wo)`.
    pub fn to_full(&self) -> [Tensor<T>; 4] {
        [
            Tensor::concat_cols(&self.wq).expect("consistent shards"),
            Tensor::concat_cols(&self.wk).expect("consistent shards"),
            Tensor::concat_cols(&self.wv).expect("consistent shards"),
            Tensor::concat_rows(&self.wo).expect("consistent shards"),
        ]
    }

    pub fn ranks(&self) -> usize {
        self.wq.len()
    }

    pub fn hidden(&self) -> usize {
        self.wq[0].rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.heads
    }

    /// `(wq, wk, wv, wo)` of rank `m`.
    pub fn rank_weights(&self, m: usize) -> [&Tensor<T>; 4] {
        [&self.wq[m], &self.wk[m], &self.wv[m], &self.wo[m]]
    }

    /// Mutable `(wq, wk, wv, wo)` of every rank, in rank order.
    pub fn shards_mut(&mut self) -> impl Iterator<Item = [&mut Tensor<T>; 4]> {
        self.wq
            .iter_mut()
            .zip(self.wk.iter_mut())
            .zip(self.wv.iter_mut())
            .zip(self.wo.iter_mut())
            .map(|(((q, k), v), o)| [q, k, v, o])
    }

    /// Output-projection columns writing the synchronized channels.
    pub fn shared_block(&self, m: usize, spec: &PartialReduceSpec) -> Option<Tensor<T>> {
        (spec.shared_count() > 0).then(|| self.wo[m].slice_cols(0, spec.shared_count()))
    }

    pub fn private_block(&self, m: usize, spec: &PartialReduceSpec) -> Option<Tensor<T>> {
        (spec.private_count() > 0)
            .then(|| self.wo[m].slice_cols(spec.shared_count(), spec.hidden()))
    }

    /// Rank `m`'s unsynchronized output for input `x` (`[t, h]` or `[b, t, h]`).
    pub fn rank_partial(&self, m: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, seq) = batch_and_seq(x)?;
        let acts = self.rank_forward(m, x, batch, seq)?;
        linear(&acts.heads_out, &self.wo[m])?.reshape(x.shape())
    }

    fn rank_forward(
        &self,
        m: usize,
        x: &Tensor<T>,
        batch: usize,
        seq: usize,
    ) -> Result<RankActivations<T>> {
        let input = x.as_matrix();
        let q = matmul(&input, &self.wq[m])?;
        let k = matmul(&input, &self.wk[m])?;
        let v = matmul(&input, &self.wv[m])?;
        let local_heads = self.heads / self.ranks();
        let d = self.head_dim();
        let w = q.cols();
        let scale = T::one() / T::cst(d as f64).sqrt();
        let mut probs = vec![T::zero(); batch * local_heads * seq * seq];
        let mut heads_out = Tensor::zeros(&[batch * seq, w]);
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for j in 0..local_heads {
                let off = j * d;
                let pbase = (b * local_heads + j) * seq * seq;
                for s in 0..seq {
                    let qrow = &q.row(b * seq + s)[off..off + d];
                    let mut max = T::neg_infinity();
                    for (u, sc) in scores[..=s].iter_mut().enumerate() {
                        let krow = &k.row(b * seq + u)[off..off + d];
                        let dot = qrow
                            .iter()
                            .zip(krow)
                            .fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut denom = T::zero();
                    for sc in &mut scores[..=s] {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    let prow = &mut probs[pbase + s * seq..pbase + s * seq + seq];
                    for u in 0..=s {
                        prow[u] = scores[u] / denom;
                    }
                    let out = &mut heads_out.row_mut(b * seq + s)[off..off + d];
                    for (u, &pw) in prow[..=s].iter().enumerate() {
                        let vrow = &v.row(b * seq + u)[off..off + d];
                        for (o, &vv) in out.iter_mut().zip(vrow) {
                            *o += pw * vv;
                        }
                    }
                }
            }
        }
        Ok(RankActivations {
            input,
            q,
            k,
            v,
            probs,
            heads_out,
        })
    }
}

impl<T: Scalar> AttnGrads<T> {
    pub fn zeros_like(attn: &ShardedAttention<T>) -> Self {
        let z = |ws: &Vec<Tensor<T>>| ws.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            wq: z(&attn.wq),
            wk: z(&attn.wk),
            wv: z(&attn.wv),
            wo: z(&attn.wo),
        }
    }
}

/// `[t, h]` is one sequence; `[b, t, h]` is a batch of `b`.
fn batch_and_seq<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [t, _] => Ok((1, *t)),
        [b, t, _] => Ok((*b, *t)),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: "attention expects [t, h] or [b, t, h]".into(),
        }),
    }
}

pub fn attention_forward<T: Scalar>(
    x: &RankSet<T>,
    attn: &ShardedAttention<T>,
    sync: &BlockSync,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, AttnCache<T>)> {
    check_ranks(x, attn.ranks(), attn.hidden(), "attention_forward")?;
    let (batch, seq) = batch_and_seq(x.rank(0))?;
    let mut ranks = Vec::with_capacity(x.ranks());
    let mut partial = Vec::with_capacity(x.ranks());
    for (m, xm) in x.iter().enumerate() {
        let acts = attn.rank_forward(m, xm, batch, seq)?;
        partial.push(matmul(&acts.heads_out, &attn.wo[m])?.reshape(x.shape())?);
        ranks.push(acts);
    }
    let (z, mask) = sync.forward(&RankSet::new(partial)?, ledger)?;
    Ok((
        z,
        AttnCache {
            ranks,
            out_shape: x.shape().to_vec(),
            batch,
            seq,
            mask,
            sync: *sync,
        },
    ))
}

pub fn attention_backward<T: Scalar>(
    upstream: &RankSet<T>,
    cache: &AttnCache<T>,
    attn: &ShardedAttention<T>,
    placement: BackwardPlacement,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, AttnGrads<T>)> {
    if upstream.shape() != cache.out_shape.as_slice() || upstream.ranks() != cache.ranks.len() {
        return Err(Error::CacheMismatch(format!(
            "upstream {:?} on {} ranks, cached output {:?} on {} ranks",
            upstream.shape(),
            upstream.ranks(),
            cache.out_shape,
            cache.ranks.len()
        )));
    }
    let g = cache
        .sync
        .backward(upstream, cache.mask.as_ref(), placement, ledger)?;
    let (batch, seq) = (cache.batch, cache.seq);
    let local_heads = attn.heads / attn.ranks();
    let d = attn.head_dim();
    let scale = T::one() / T::cst(d as f64).sqrt();
    let mut grads = AttnGrads {
        wq: Vec::new(),
        wk: Vec::new(),
        wv: Vec::new(),
        wo: Vec::new(),
    };
    let mut dxs = Vec::with_capacity(attn.ranks());
    let mut dp = vec![T::zero(); seq];
    for (m, acts) in cache.ranks.iter().enumerate() {
        let gm = g[m].as_matrix();
        grads.wo.push(matmul_tn(&acts.heads_out, &gm)?);
        let dheads = matmul_nt(&gm, &attn.wo[m])?;
        let w = dheads.cols();
        let mut dq = Tensor::zeros(&[batch * seq, w]);
        let mut dk = Tensor::zeros(&[batch * seq, w]);
        let mut dv = Tensor::zeros(&[batch * seq, w]);
        for b in 0..batch {
            for j in 0..local_heads {
                let off = j * d;
                let pbase = (b * local_heads + j) * seq * seq;
                for s in 0..seq {
                    let prow = &acts.probs[pbase + s * seq..pbase + s * seq + seq];
                    let dout = &dheads.row(b * seq + s)[off..off + d];
                    let mut weighted = T::zero();
                    for u in 0..=s {
                        let vrow = &acts.v.row(b * seq + u)[off..off + d];
                        dp[u] = dout
                            .iter()
                            .zip(vrow)
                            .fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                        weighted += prow[u] * dp[u];
                        let dvrow = &mut dv.row_mut(b * seq + u)[off..off + d];
                        for (o, &go) in dvrow.iter_mut().zip(dout) {
                            *o += prow[u] * go;
                        }
                    }
                    let qrow = &acts.q.row(b * seq + s)[off..off + d];
                    for u in 0..=s {
                        let ds = prow[u] * (dp[u] - weighted) * scale;
                        let krow = &acts.k.row(b * seq + u)[off..off + d];
                        let dqrow = &mut dq.row_mut(b * seq + s)[off..off + d];
                        for (o, &kv) in dqrow.iter_mut().zip(krow) {
                            *o += ds * kv;
                        }
                        let dkrow = &mut dk.row_mut(b * seq + u)[off..off + d];
                        for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        grads.wq.push(matmul_tn(&acts.input, &dq)?);
        grads.wk.push(matmul_tn(&acts.input, &dk)?);
        grads.wv.push(matmul_tn(&acts.input, &dv)?);
        let mut dx = matmul_nt(&dq, &attn.wq[m])?;
        dx.add_assign(&matmul_nt(&dk, &attn.wk[m])?);
        dx.add_assign(&matmul_nt(&dv, &attn.wv[m])?);
        dxs.push(dx.reshape(&cache.out_shape)?);
    }
    let dx = cache
        .sync
        .input_grad_reduce(RankSet::new(dxs)?, placement, ledger);
    Ok((dx, grads))
}
