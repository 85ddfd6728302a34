//! Pre-training and fine-tuning loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, TrainMode, lr_schedule};
use super::optim::{Adam, clip_grad_norm};
use crate::autodiff::{Grads, Tape};
use crate::dsp::{FRAME_RATE, MelSpectrogram};
use crate::error::{Error, Result};
use crate::flow::{FlowPathConfig, FlowSample, sample_time};
use crate::masking::{apply_mask, sample_mask_plan};
use crate::model::{ConditionBundle, FeatureNorm, VectorFieldModel, VectorFieldModelConfig};
use crate::tasks::{PairedExample, multitask_mixer};
use crate::tensor::Mat;

/// One training example as the loop sees it.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub target: Mat,
    pub cond: ConditionBundle,
    pub loss_region: Vec<bool>,
}

impl TrainItem {
    pub fn duration_s(&self) -> f64 {
        self.target.rows() as f64 / FRAME_RATE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Tab-separated loss log, one line per step. Values use the shortest
/// round-trip representation, so identical runs give identical bytes.
pub fn loss_log_tsv(log: &[LossEntry]) -> String {
    let mut out = String::from("step\tloss\tlr\tgrad_norm\n");
    for e in log {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.step, e.loss, e.lr, e.grad_norm));
    }
    out
}

/// Groups a stream into batches whose summed duration stays at or below
/// `target_s`; a batch holds at least one item, and the first item that did
/// not fit opens the next batch.
#[derive(Debug)]
pub struct Batcher<I: Iterator> {
    source: I,
    pending: Option<I::Item>,
    target_s: f64,
}

impl<I: Iterator> Batcher<I> {
    pub fn new(source: I, target_s: f64) -> Self {
        Batcher {
            source,
            pending: None,
            target_s,
        }
    }

    pub fn next_batch(&mut self, duration: impl Fn(&I::Item) -> f64) -> Vec<I::Item> {
        let mut batch = Vec::new();
        let mut total = 0.0;
        while let Some(item) = self.pending.take().or_else(|| self.source.next()) {
            let d = duration(&item);
            if !batch.is_empty() && total + d > self.target_s {
                self.pending = Some(item);
                break;
            }
            total += d;
            batch.push(item);
        }
        batch
    }
}

/// Optimisation state for one run.
pub struct Trainer {
    model: VectorFieldModel,
    cfg: TrainConfig,
    flow: FlowPathConfig,
    adam: Adam,
    step: usize,
    rng: ChaCha8Rng,
    log: Vec<LossEntry>,
}

impl Trainer {
    /// Start (or resume) at `start_step`; the schedule continues from there.
    pub fn new(model: VectorFieldModel, cfg: TrainConfig, start_step: usize) -> Result<Self> {
        cfg.validate()?;
        let flow = FlowPathConfig::new(cfg.sigma_min)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (start_step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Trainer {
            model,
            cfg,
            flow,
            adam: Adam::default(),
            step: start_step,
            rng,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &VectorFieldModel {
        &self.model
    }

    pub fn into_model(self) -> VectorFieldModel {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LossEntry] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Gradient of the mean batch loss at freshly drawn `t` and `x0`.
    fn batch_gradient(&mut self, batch: &[TrainItem]) -> Result<(f64, Grads)> {
        let mut grads = Grads::zeros_like(self.model.params());
        let mut total = 0.0;
        let w = 1.0 / batch.len() as f64;
        for item in batch {
            let t = sample_time(&mut self.rng);
            let fs = FlowSample::draw(item.target.clone(), t, &self.flow, &mut self.rng)?;
            let mut tape = Tape::new(self.model.params());
            let out = self.model.forward_on_tape(&mut tape, &fs.x_t, t, &item.cond)?;
            let loss = tape.masked_mse(out, &fs.u_target, &item.loss_region)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step + 1,
                    context: format!("training loss {value}"),
                });
            }
            total += value * w;
            grads.merge(&tape.backward(loss, w));
        }
        Ok((total, grads))
    }

    /// Loss of `batch` at fixed draws, without updating anything.
    pub fn evaluate_loss(&self, batch: &[TrainItem], seed: u64) -> Result<f64> {
        frozen_loss(&self.model, batch, &self.flow, seed)
    }

    /// One optimiser update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<LossEntry> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (loss, mut grads) = self.batch_gradient(batch)?;
        let grad_norm = clip_grad_norm(self.model.params(), &mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                context: "gradient norm".into(),
            });
        }
        let lr = lr_schedule(self.step + 1, &self.cfg);
        self.adam.update(self.model.params_mut(), &grads, lr);
        if !self.model.params().all_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                context: "parameters after update".into(),
            });
        }
        self.step += 1;
        let entry = LossEntry {
            step: self.step,
            loss,
            lr,
            grad_norm,
        };
        self.log.push(entry);
        Ok(entry)
    }
}

/// Mean loss with `t` and `x0` drawn from `seed`, so repeated calls on the
/// same batch are comparable across training.
pub fn frozen_loss(model: &VectorFieldModel, batch: &[TrainItem], flow: &FlowPathConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for item in batch {
        let t = sample_time(&mut rng);
        let fs = FlowSample::draw(item.target.clone(), t, flow, &mut rng)?;
        let pred = model.forward(&fs.x_t, t, &item.cond)?;
        total += crate::flow::masked_mse(&pred, &fs.u_target, &item.loss_region)?;
    }
    Ok(total / batch.len() as f64)
}

/// A pre-training item: optional random crop, then a mask plan drawn from
/// the policy. The loss covers masked frames only.
pub fn pretrain_item<R: Rng + ?Sized>(x1: &Mat, cfg: &TrainConfig, rng: &mut R) -> Result<TrainItem> {
    let target = match cfg.max_frames {
        Some(max) if x1.rows() > max => {
            let start = rng.random_range(0..=x1.rows() - max);
            x1.slice_rows(start, max)
        }
        _ => x1.clone(),
    };
    let plan = sample_mask_plan(target.rows(), &cfg.mask_policy, rng);
    let cond = ConditionBundle::new(apply_mask(&target, &plan)?);
    Ok(TrainItem {
        loss_region: plan.frame_mask().to_vec(),
        target,
        cond,
    })
}

/// A fine-tuning item with the condition drop re-drawn.
pub fn finetune_item<R: Rng + ?Sized>(ex: &PairedExample, drop_prob: f64, rng: &mut R) -> TrainItem {
    TrainItem {
        target: ex.target.clone(),
        cond: ex.training_condition(drop_prob, rng),
        loss_region: ex.loss_region.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VectorFieldModel,
    pub log: Vec<LossEntry>,
    pub step: usize,
}

/// Called after every step with the trainer state; an error aborts the run.
pub type StepHook<'a> = dyn FnMut(&Trainer, &LossEntry) -> Result<()> + 'a;

/// Randomly initialised model with the given normalisation.
pub fn fresh_model(config: &VectorFieldModelConfig, norm: FeatureNorm, seed: u64) -> Result<VectorFieldModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VectorFieldModel::new(config.clone(), &mut rng)?;
    model.set_norm(norm);
    Ok(model)
}

fn shuffled_epochs(n: usize, seed: u64) -> impl Iterator<Item = usize> {
    multitask_mixer(&[n], &[1], seed)
        .expect("non-empty dataset")
        .map(|(_, i)| i)
}

/// Masked-condition pre-training on normalised features from a fresh
/// model whose feature statistics are fitted on `corpus`.
pub fn pretrain(
    corpus: &[MelSpectrogram],
    model_cfg: &VectorFieldModelConfig,
    cfg: &TrainConfig,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let norm = FeatureNorm::fit(corpus);
    let model = fresh_model(model_cfg, norm.clone(), cfg.seed)?;
    let data: Vec<Mat> = corpus.iter().map(|m| norm.normalize(m)).collect();
    pretrain_from(model, &data, cfg, 0, hook)
}

/// Continue pre-training `model` from `start_step` on normalised features.
pub fn pretrain_from(
    model: VectorFieldModel,
    data: &[Mat],
    cfg: &TrainConfig,
    start_step: usize,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let mut trainer = Trainer::new(model, cfg.clone(), start_step)?;
    let order_seed = trainer.rng().random();
    let crop = cfg.max_frames.unwrap_or(usize::MAX);
    let mut batcher = Batcher::new(shuffled_epochs(data.len(), order_seed), cfg.batch_seconds);
    while !trainer.done() {
        let idx = batcher.next_batch(|&i| data[i].rows().min(crop) as f64 / FRAME_RATE);
        let batch = idx
            .iter()
            .map(|&i| pretrain_item(&data[i], cfg, trainer.rng()))
            .collect::<Result<Vec<_>>>()?;
        let entry = trainer.train_step(&batch)?;
        hook(&trainer, &entry)?;
    }
    Ok(TrainOutcome {
        step: trainer.step(),
        log: trainer.log().to_vec(),
        model: trainer.into_model(),
    })
}

/// Prepare `model` for the fine-tuning `mode`: attach LoRA adaptors and
/// enable symbol conditioning when the data carries symbols.
pub fn prepare_for_finetune(
    mut model: VectorFieldModel,
    sets: &[Vec<PairedExample>],
    cfg: &TrainConfig,
) -> Result<VectorFieldModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let max_symbol = sets
        .iter()
        .flatten()
        .filter_map(|ex| ex.cond.symbol_ids.as_ref())
        .flat_map(|ids| ids.iter().copied())
        .max();
    if let Some(max) = max_symbol {
        if model.config().symbol_vocab_size.is_none() {
            let vocab = cfg.symbol_vocab_size.unwrap_or(max + 1);
            if vocab <= max {
                return Err(Error::config(format!("symbol_vocab_size {vocab} does not cover symbol {max}")));
            }
            model.enable_symbols(vocab, &mut rng)?;
        }
    }
    if cfg.mode == TrainMode::Lora && model.config().lora_rank.is_none() {
        model.apply_lora(cfg.lora_rank, &mut rng)?;
    }
    Ok(model)
}

/// Task fine-tuning. With one set the stream is a per-epoch shuffle; in
/// multitask mode set `i` is upsampled by `multitask_factors[i]`.
pub fn finetune(
    model: VectorFieldModel,
    sets: &[Vec<PairedExample>],
    cfg: &TrainConfig,
    start_step: usize,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutcome> {
    if sets.is_empty() || sets.iter().any(Vec::is_empty) {
        return Err(Error::invalid("fine-tuning needs non-empty task sets"));
    }
    if cfg.mode == TrainMode::Pretrain {
        return Err(Error::config("fine-tuning needs mode finetune, lora or multitask"));
    }
    let model = prepare_for_finetune(model, sets, cfg)?;
    let mut trainer = Trainer::new(model, cfg.clone(), start_step)?;
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let factors = if cfg.mode == TrainMode::Multitask {
        if cfg.multitask_factors.len() != sets.len() {
            return Err(Error::config(format!(
                "{} multitask factors for {} task sets",
                cfg.multitask_factors.len(),
                sets.len()
            )));
        }
        cfg.multitask_factors.clone()
    } else {
        vec![1; sets.len()]
    };
    let mixer = multitask_mixer(&sizes, &factors, trainer.rng().random())?;
    let mut batcher = Batcher::new(mixer, cfg.batch_seconds);
    while !trainer.done() {
        let idx = batcher.next_batch(|&(d, i)| sets[d][i].len() as f64 / FRAME_RATE);
        let batch: Vec<TrainItem> = idx
            .iter()
            .map(|&(d, i)| finetune_item(&sets[d][i], cfg.drop_prob, trainer.rng()))
            .collect();
        let entry = trainer.train_step(&batch)?;
        hook(&trainer, &entry)?;
    }
    Ok(TrainOutcome {
        step: trainer.step(),
        log: trainer.log().to_vec(),
        model: trainer.into_model(),
    })
}
