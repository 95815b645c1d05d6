use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::collectives::{
    reduce_values, sync_replicated_grad, CollectiveKind, CommLedger, MaskSpec, PartialReduceSpec,
    Pass, RankSet,
};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::scalar::Scalar;
use crate::tensor::{
    linear, matmul_nt, matmul_tn, rmsnorm, rmsnorm_backward, softmax_ce_loss, Tensor,
};
use crate::transformer::{
    layer_backward, layer_forward, BackwardPlacement, CaatLayer, LayerCache, LayerGrads, LayerSync,
    INIT_STD,
};

/// Architecture of a [`CaatModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Tensor-parallel degree `M`.
    pub ranks: usize,
    /// Longest sequence the positional table covers.
    pub max_seq: usize,
    pub p: f64,
    pub scale_private: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!(
                "vocabulary must hold at least 2 tokens, got {}",
                self.vocab
            )));
        }
        if self.layers == 0 || self.max_seq == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "layers, hidden size and sequence length must be positive".into(),
            ));
        }
        if self.ranks == 0 || self.heads == 0 || !self.heads.is_multiple_of(self.ranks) {
            return Err(Error::Config(format!(
                "{} heads cannot be split evenly over {} ranks",
                self.heads, self.ranks
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<PartialReduceSpec> {
        PartialReduceSpec::new(self.p, self.hidden, self.scale_private, self.ranks)
    }
}

/// A window of token ids and their next-token targets, `batch × seq` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(inputs: Vec<usize>, targets: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(Error::Data(format!(
                "batch of {batch}×{seq} needs {} inputs and targets, got {} and {}",
                batch * seq,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            batch,
            seq,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Per-step synchronization choices.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    pub placement: BackwardPlacement,
    pub grad_precision: PrecisionMode,
    pub mask: Option<MaskSpec>,
    pub step: u64,
}

impl StepOptions {
    fn layer_sync(&self, layer: usize) -> LayerSync {
        LayerSync {
            grad_precision: self.grad_precision,
            mask: self.mask.map(|m| m.derive(layer as u64)),
            step: self.step,
        }
    }
}

/// Decoder-only language model whose layers run on `M` simulated ranks.
///
/// Embeddings, the final gain and the head are replicated. The last layer's
/// per-rank streams are all-reduced and divided by `M`, so the head sees the
/// single-device hidden state whenever every channel is synchronized.
#[derive(Clone, Debug, PartialEq)]
pub struct CaatModel<T> {
    config: ModelConfig,
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<CaatLayer<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    batch: Batch,
    layers: Vec<LayerCache<T>>,
    merged: Tensor<T>,
    normed: Tensor<T>,
    dlogits: Tensor<T>,
    opts: StepOptions,
}

impl<T: Scalar> CaatModel<T> {
    /// Draws every full weight from `seed`, then shards it; the logical model
    /// depends on `seed` and the shapes only, not on `M` or `p`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h) = (config.vocab, config.hidden);
        let embed = Tensor::randn(&[v, h], INIT_STD, &mut rng);
        let pos = Tensor::randn(&[config.max_seq, h], INIT_STD, &mut rng);
        let layers = (0..config.layers)
            .map(|_| CaatLayer::init(h, config.heads, config.ranks, spec, &mut rng))
            .collect::<Result<_>>()?;
        let head = Tensor::randn(&[h, v], INIT_STD, &mut rng);
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            final_norm: Tensor::ones(&[h]),
            head,
        })
    }

    /// Assembles a model from parts; shapes are checked against `config`.
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor<T>,
        pos: Tensor<T>,
        layers: Vec<CaatLayer<T>>,
        final_norm: Tensor<T>,
        head: Tensor<T>,
    ) -> Result<Self> {
        config.validate()?;
        let (v, h) = (config.vocab, config.hidden);
        let expect = |t: &Tensor<T>, shape: &[usize], op: &'static str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        };
        expect(&embed, &[v, h], "embedding")?;
        expect(&pos, &[config.max_seq, h], "positions")?;
        expect(&final_norm, &[h], "final norm")?;
        expect(&head, &[h, v], "head")?;
        let spec = config.spec()?;
        if layers.len() != config.layers
            || layers
                .iter()
                .any(|l| l.spec != spec || l.ranks() != config.ranks || l.hidden() != h)
        {
            return Err(Error::Config(
                "layers disagree with the model configuration".into(),
            ));
        }
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ranks(&self) -> usize {
        self.config.ranks
    }

    pub fn spec(&self) -> PartialReduceSpec {
        self.layers[0].spec
    }

    /// Token plus position embedding, `[b, t, h]`.
    pub fn embed_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        if seq > self.config.max_seq {
            return Err(Error::Data(format!(
                "sequence of {seq} tokens exceeds the model's {} positions",
                self.config.max_seq
            )));
        }
        if tokens.len() != batch * seq {
            return Err(Error::Data(format!(
                "expected {} tokens, got {}",
                batch * seq,
                tokens.len()
            )));
        }
        let h = self.config.hidden;
        let mut x = Tensor::zeros(&[batch, seq, h]);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= self.config.vocab {
                return Err(Error::TargetOutOfRange {
                    position: i,
                    target: tok,
                    vocab: self.config.vocab,
                });
            }
            let s = i % seq;
            for ((o, &e), &q) in x
                .row_mut(i)
                .iter_mut()
                .zip(self.embed.row(tok))
                .zip(self.pos.row(s))
            {
                *o = e + q;
            }
        }
        Ok(x)
    }

    /// Final norm and head applied to the merged hidden state.
    fn head_logits(&self, merged: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let normed = rmsnorm(merged, &self.final_norm)?;
        let logits = linear(&normed.as_matrix(), &self.head)?;
        Ok((normed, logits))
    }

    /// Mean training loss of `batch`, with everything the backward needs.
    pub fn forward(
        &self,
        batch: &Batch,
        opts: &StepOptions,
        ledger: &mut CommLedger,
    ) -> Result<(T, ModelCache<T>)> {
        let x = self.embed_tokens(&batch.inputs, batch.batch, batch.seq)?;
        let mut xs = RankSet::replicate(&x, self.ranks());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer_forward(&xs, layer, &opts.layer_sync(i), ledger)?;
            xs = out;
            caches.push(cache);
        }
        let merged = merge_ranks(&xs, Some(ledger));
        let (normed, logits) = self.head_logits(&merged)?;
        let (loss, dlogits) = softmax_ce_loss(&logits, &batch.targets)?;
        Ok((
            loss,
            ModelCache {
                batch: batch.clone(),
                layers: caches,
                merged,
                normed,
                dlogits,
                opts: *opts,
            },
        ))
    }

    /// Gradients of the loss cached by [`CaatModel::forward`], with every
    /// replicated parameter's gradient synchronized.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        ledger: &mut CommLedger,
    ) -> Result<ModelGrads<T>> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch(
                "cache belongs to a model of different depth".into(),
            ));
        }
        let opts = cache.opts;
        let ranks = self.ranks();
        let head = matmul_tn(&cache.normed.as_matrix(), &cache.dlogits)?;
        let dnormed = matmul_nt(&cache.dlogits, &self.head)?.reshape(cache.merged.shape())?;
        let (dmerged, final_norm) = rmsnorm_backward(&cache.merged, &self.final_norm, &dnormed)?;
        let mut dx = match opts.placement {
            BackwardPlacement::HAfterNorm if ranks > 1 => {
                RankSet::replicate(&dmerged.scale(T::one() / T::cst(ranks as f64)), ranks)
            }
            _ => RankSet::replicate(&dmerged, ranks),
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let (d, mut g) = layer_backward(&dx, lc, layer, opts.placement, ledger)?;
            g.sync_norms(opts.grad_precision, ledger);
            dx = d;
            layers.push(g);
        }
        layers.reverse();
        let dx0 = match opts.placement {
            BackwardPlacement::HAfterNorm => {
                sync_replicated_grad(&dx, CollectiveKind::Boundary, opts.grad_precision, ledger)
            }
            BackwardPlacement::GBeforeNorm => dx.rank(0).clone(),
        };
        let mut embed = Tensor::zeros(self.embed.shape());
        let mut pos = Tensor::zeros(self.pos.shape());
        let seq = cache.batch.seq;
        for (i, &tok) in cache.batch.inputs.iter().enumerate() {
            let row = dx0.row(i);
            for (e, &g) in embed.row_mut(tok).iter_mut().zip(row) {
                *e += g;
            }
            for (q, &g) in pos.row_mut(i % seq).iter_mut().zip(row) {
                *q += g;
            }
        }
        Ok(ModelGrads {
            embed,
            pos,
            layers,
            final_norm,
            head,
        })
    }

    /// Forward and backward in one call.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        opts: &StepOptions,
        ledger: &mut CommLedger,
    ) -> Result<(T, ModelGrads<T>)> {
        let (loss, cache) = self.forward(batch, opts, ledger)?;
        let grads = self.backward(&cache, ledger)?;
        Ok((loss, grads))
    }

    /// Mean loss of `batch` without keeping activations.
    pub fn loss(&self, batch: &Batch, opts: &StepOptions, ledger: &mut CommLedger) -> Result<T> {
        self.forward(batch, opts, ledger).map(|(loss, _)| loss)
    }

    /// Next-token logits `[t, V]` for one sequence, executed on `M`
    /// simulated ranks without masks.
    pub fn logits(&self, tokens: &[usize], ledger: &mut CommLedger) -> Result<Tensor<T>> {
        let x = self.embed_tokens(tokens, 1, tokens.len())?;
        let mut xs = RankSet::replicate(&x, self.ranks());
        for layer in &self.layers {
            xs = layer_forward(&xs, layer, &LayerSync::default(), ledger)?.0;
        }
        let merged = merge_ranks(&xs, Some(ledger));
        Ok(self.head_logits(&merged)?.1)
    }

    /// Parameter names in [`CaatModel::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "pos".to_string()];
        for (i, layer) in self.layers.iter().enumerate() {
            names.push(format!("layers.{i}.attn_norm"));
            for m in 0..layer.ranks() {
                for w in ["wq", "wk", "wv", "wo"] {
                    names.push(format!("layers.{i}.attn.{w}.{m}"));
                }
            }
            names.push(format!("layers.{i}.mlp_norm"));
            for m in 0..layer.ranks() {
                names.push(format!("layers.{i}.mlp.up.{m}"));
                names.push(format!("layers.{i}.mlp.down.{m}"));
            }
        }
        names.push("final_norm".into());
        names.push("head".into());
        names
    }

    /// Every parameter, each rank's shard listed separately.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed, &self.pos];
        for layer in &self.layers {
            out.push(&layer.attn_norm);
            for m in 0..layer.ranks() {
                out.extend(layer.attn.rank_weights(m));
            }
            out.push(&layer.mlp_norm);
            for m in 0..layer.ranks() {
                out.push(layer.mlp.up(m));
                out.push(layer.mlp.down(m));
            }
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.extend(layer.attn.shards_mut().flatten());
            out.push(&mut layer.mlp_norm);
            for (up, down) in layer.mlp.shards_mut() {
                out.push(up);
                out.push(down);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

impl<T: Scalar> ModelGrads<T> {
    /// Gradients in [`CaatModel::params`] order. Panics if a normalization
    /// gradient was never synchronized.
    pub fn flat(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed, &self.pos];
        for layer in &self.layers {
            out.push(layer.attn_norm.synced());
            for m in 0..layer.attn.wq.len() {
                out.extend([
                    &layer.attn.wq[m],
                    &layer.attn.wk[m],
                    &layer.attn.wv[m],
                    &layer.attn.wo[m],
                ]);
            }
            out.push(layer.mlp_norm.synced());
            for (up, down) in layer.mlp.up.iter().zip(&layer.mlp.down) {
                out.push(up);
                out.push(down);
            }
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|t| t.is_finite())
    }
}

/// Mean of the per-rank streams. With a ledger it is logged as the boundary
/// all-reduce; without one it is the same arithmetic done locally.
pub(crate) fn merge_ranks<T: Scalar>(
    xs: &RankSet<T>,
    ledger: Option<&mut CommLedger>,
) -> Tensor<T> {
    let ranks = xs.ranks();
    if ranks == 1 {
        return xs.rank(0).clone();
    }
    let inv = T::one() / T::cst(ranks as f64);
    let n = xs.rank(0).len();
    let data = (0..n)
        .map(|i| reduce_values(PrecisionMode::Full64, xs.iter().map(|t| t.data()[i])) * inv)
        .collect();
    if let Some(ledger) = ledger {
        ledger.record(
            CollectiveKind::Boundary,
            Pass::Forward,
            PrecisionMode::Full64.wire_bits(),
            2 * n as u64,
        );
    }
    Tensor::new(xs.shape().to_vec(), data).expect("shape preserved")
}
