use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::synth::video_seed;
use crate::data::{pad_or_clip, VideoRecord};
use crate::model::{forward, HyperParams, ModelInput, ModelParameters};
use crate::tensor::Tensor;

use super::adam::{adam_step, OptimizerState};
use super::checkpoint::Checkpoint;
use super::loss::compute_loss;
use super::{TrainConfig, TrainError};

/// What the optimizer sees of a video: features and the video-level label.
/// Interval annotations never reach training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub input: ModelInput,
    pub label: Vec<bool>,
}

pub fn examples_from_records(records: &[VideoRecord], max_len: usize) -> Vec<TrainingExample> {
    records
        .iter()
        .map(|r| {
            let p = pad_or_clip(r, max_len);
            TrainingExample {
                id: p.id,
                input: p.input,
                label: p.label,
            }
        })
        .collect()
}

/// Visiting order for `epoch`. Depends only on the seed and epoch number so
/// a resumed run replays the same batches.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(seed, epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub hp: HyperParams,
    pub config: TrainConfig,
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub loss_curve: Vec<f64>,
}

impl Trainer {
    pub fn new(hp: HyperParams, config: TrainConfig) -> Result<Self, TrainError> {
        hp.validate()?;
        config.validate()?;
        let params = ModelParameters::init(&hp, config.seed);
        let optimizer = OptimizerState::new(&params);
        Ok(Self {
            hp,
            config,
            params,
            optimizer,
            epoch: 0,
            loss_curve: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.hp.validate()?;
        ck.train.validate()?;
        Ok(Self {
            hp: ck.hp,
            config: ck.train,
            params: ck.params,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            loss_curve: ck.loss_curve,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            hp: self.hp.clone(),
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            loss_curve: self.loss_curve.clone(),
        }
    }

    /// Loss and parameter gradients for one video.
    pub fn loss_and_grads(&self, ex: &TrainingExample) -> Result<(f64, Vec<Tensor>), TrainError> {
        if ex.label.len() != self.hp.num_classes {
            return Err(TrainError::Contract(format!(
                "video {} has {} labels, model expects {}",
                ex.id,
                ex.label.len(),
                self.hp.num_classes
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let out = forward(&mut tape, &vars, &self.hp, &ex.input)?;
        let loss = compute_loss(&mut tape, &out.vars, &ex.label, &self.config.loss_weights)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss(ex.id.clone()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, vars.collect_grads(&grads)))
    }

    /// One Adam step on the batch-mean gradient. Returns the mean loss.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Contract("empty batch".into()));
        }
        let mut sorted: Vec<&TrainingExample> = batch.to_vec();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for ex in sorted {
            let (loss, grads) = self.loss_and_grads(ex)?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (dst, g) in a.iter_mut().zip(&grads) {
                        for (x, y) in dst.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = acc.unwrap_or_default();
        for g in &mut grads {
            for x in g.data_mut() {
                *x /= n;
            }
        }
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.adam())?;
        Ok(total / n)
    }

    /// Runs the next epoch and appends its mean loss to the curve.
    pub fn run_epoch(&mut self, examples: &[TrainingExample]) -> Result<f64, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::Contract("no training examples".into()));
        }
        let order = epoch_order(examples.len(), self.config.seed, self.epoch);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            total += self.train_step(&batch)? * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        self.epoch += 1;
        self.loss_curve.push(mean);
        log::info!("epoch {} mean loss {:.6}", self.epoch, mean);
        Ok(mean)
    }

    /// Trains until `config.epochs` epochs are complete. `on_epoch` runs
    /// after every epoch and may write checkpoints.
    pub fn fit<F>(&mut self, examples: &[TrainingExample], mut on_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer) -> Result<(), TrainError>,
    {
        while self.epoch < self.config.epochs {
            self.run_epoch(examples)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}
