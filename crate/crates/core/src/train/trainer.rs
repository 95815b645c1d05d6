use std::path::Path;

use super::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use super::config::{DataSource, TrainConfig};
use super::data::{ingest_corpus, synth_data, Dataset};
use super::model::{Batch, CaatModel, StepOptions};
use super::optim::AdamW;
use crate::collectives::{CollectiveKind, CommLedger, MaskSpec, Pass};
use crate::error::{Error, Result};
use crate::rng::mix_all;
use crate::scalar::Scalar;

const SYNTH_SALT: u64 = 0x7379_6e74_6800_0001;
/// Step index used for the masks of evaluation passes.
const EVAL_STEP: u64 = u64::MAX;

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    model: &mut CaatModel<T>,
    optimizer: &mut AdamW<T>,
    batch: &Batch,
    opts: &StepOptions,
    ledger: &mut CommLedger,
) -> Result<T> {
    let (loss, grads) = model.loss_and_grads(batch, opts, ledger)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opts.step,
            loss: loss.to_f64_lossless(),
        });
    }
    let flat = grads.flat();
    optimizer.step(&mut model.params_mut(), &flat)?;
    Ok(loss)
}

/// Token-weighted mean loss over `batches`. Communication is not recorded.
pub fn evaluate<T: Scalar>(
    model: &CaatModel<T>,
    batches: &[Batch],
    mask: Option<MaskSpec>,
) -> Result<T> {
    if batches.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let opts = StepOptions {
        mask,
        step: EVAL_STEP,
        ..StepOptions::default()
    };
    let mut scratch = CommLedger::new();
    let mut total = T::zero();
    let mut tokens = 0usize;
    for b in batches {
        total += model.loss(b, &opts, &mut scratch)? * T::cst(b.tokens() as f64);
        tokens += b.tokens();
    }
    Ok(total / T::cst(tokens as f64))
}

/// One line of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Cumulative tensor-parallel elements per rank, forward pass.
    pub comm_fwd: u64,
    /// Cumulative tensor-parallel elements per rank, backward pass.
    pub comm_bwd: u64,
    pub norm_sync: u64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,train_loss,val_loss,comm_fwd_elems,comm_bwd_elems,norm_sync_elems";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.train_loss.map_or(String::new(), |l| l.to_string()),
            self.val_loss,
            self.comm_fwd,
            self.comm_bwd,
            self.norm_sync
        )
    }
}

/// A model, its optimizer and data, advanced one step at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    config: TrainConfig,
    model: CaatModel<T>,
    optimizer: AdamW<T>,
    data: Dataset,
    val: Vec<Batch>,
    mask: Option<MaskSpec>,
    ledger: CommLedger,
    step: u64,
}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let tokens = match &config.data {
        DataSource::Synthetic => synth_data(
            mix_all(&[config.seed, SYNTH_SALT]),
            config.vocab,
            config.synth_len,
        ),
        DataSource::Corpus(path) => ingest_corpus(path)?,
    };
    let ds = Dataset::split(tokens, config.seq_len)?;
    if ds.vocab_bound() > config.vocab {
        return Err(Error::Config(format!(
            "data holds token {} but the vocabulary has {} entries",
            ds.vocab_bound() - 1,
            config.vocab
        )));
    }
    Ok(ds)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CaatModel::init(config.model_config(), config.seed)?;
        let optimizer = AdamW::new(config.adam(), &model.params());
        Self::assemble(config, model, optimizer, CommLedger::new(), 0)
    }

    /// Continues from a checkpoint written by [`Trainer::save`] under the
    /// same configuration.
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let ckpt = load_checkpoint::<T>(dir)?;
        if ckpt.model.config() != &config.model_config() {
            return Err(Error::Config(
                "checkpoint model differs from the configuration".into(),
            ));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::checkpoint(dir, "no optimizer state to resume from"))?;
        Self::assemble(config, ckpt.model, optimizer, ckpt.ledger, ckpt.step)
    }

    fn assemble(
        config: TrainConfig,
        model: CaatModel<T>,
        optimizer: AdamW<T>,
        ledger: CommLedger,
        step: u64,
    ) -> Result<Self> {
        let data = load_dataset(&config)?;
        let val = data.val_batches(config.batch, config.seq_len, config.eval_windows)?;
        let mask = config.mask_spec()?;
        Ok(Self {
            config,
            model,
            optimizer,
            data,
            val,
            mask,
            ledger,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CaatModel<T> {
        &self.model
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            placement: self.config.placement,
            grad_precision: self.config.accum,
            mask: self.mask,
            step: self.step,
        }
    }

    /// Runs the next training step and returns its loss.
    pub fn step(&mut self) -> Result<T> {
        let batch = self.data.sample_batch(
            self.config.batch,
            self.config.seq_len,
            self.config.seed,
            self.step,
        )?;
        let opts = self.step_options();
        let loss = train_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            &opts,
            &mut self.ledger,
        )?;
        self.step += 1;
        Ok(loss)
    }

    pub fn evaluate(&self) -> Result<T> {
        evaluate(&self.model, &self.val, self.mask)
    }

    fn metrics(&self, train_loss: Option<T>) -> Result<MetricsRow> {
        Ok(MetricsRow {
            step: self.step,
            train_loss: train_loss.map(|l| l.to_f64_lossless()),
            val_loss: self.evaluate()?.to_f64_lossless(),
            comm_fwd: self.ledger.tensor_parallel_elements(Some(Pass::Forward)),
            comm_bwd: self.ledger.tensor_parallel_elements(Some(Pass::Backward)),
            norm_sync: self
                .ledger
                .kind_elements(CollectiveKind::NormSync, Pass::Backward),
        })
    }

    /// Trains up to `config.steps`, emitting a metrics row before the first
    /// step of a fresh run, every `eval_every` steps and after the last one.
    /// The configured checkpoint directory is rewritten at every row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        if self.step == 0 {
            self.emit(None, &mut on_row)?;
        }
        while self.step < self.config.steps {
            let loss = self.step()?;
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps {
                self.emit(Some(loss), &mut on_row)?;
            }
        }
        Ok(())
    }

    fn emit(
        &self,
        loss: Option<T>,
        on_row: &mut impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<()> {
        let row = self.metrics(loss)?;
        on_row(&row)?;
        if let Some(dir) = &self.config.checkpoint_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut extra = Manifest::default();
        for (k, v) in self.config.to_pairs() {
            extra.set(format!("config.{k}"), v);
        }
        extra.set(
            "rng",
            format!("counter:seed={},step={}", self.config.seed, self.step),
        );
        save_checkpoint(
            dir,
            &self.model,
            Some(&self.optimizer),
            self.step,
            &self.ledger,
            &extra,
        )
    }
}
