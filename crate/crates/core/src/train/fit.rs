use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use super::{adam_step, optimizer_for, save_checkpoint, AdamState, TrainError, DEFAULT_LR};
use crate::data::{normalize, Dataset, ImageRecord, Split};
use crate::model::{Mode, Model};
use crate::rng;
use crate::tensor::{LabelMap, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Background and tumor loss weights.
    pub class_weights: Option<[f64; 2]>,
    pub seed: u64,
    /// Rewritten after every epoch when set.
    pub checkpoint_path: Option<PathBuf>,
    /// Report every n-th step; the last step of each epoch is always reported.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            lr: DEFAULT_LR,
            class_weights: None,
            seed: 42,
            checkpoint_path: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.log_every == 0 {
            return bad("log interval must be at least 1".into());
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
                return bad(format!("class weights must be non-negative and not all zero, got {w:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based global step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub loss: f64,
    pub pixel_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Pixel-weighted mean of the step losses.
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn total_steps(&self) -> usize {
        self.steps.last().map_or(0, |s| s.step)
    }

    /// `step,epoch,loss,pixel_acc` rows with a header.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,pixel_acc\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", s.step, s.epoch, s.loss, s.pixel_acc));
        }
        out
    }
}

/// Stacks records into a normalized `(N, 3, H, W)` input and its label map.
pub fn batch_tensors(records: &[&ImageRecord]) -> Result<(Tensor<f32>, LabelMap), TrainError> {
    let first = records.first().ok_or(TrainError::EmptyDataset)?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(records.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(records.len() * h * w);
    for r in records {
        check_size(r, w, h)?;
        data.extend_from_slice(normalize(&r.image).data());
        labels.extend_from_slice(r.mask.as_slice());
    }
    let input = Tensor::from_vec([records.len(), 3, h, w], data)?;
    Ok((input, LabelMap::new(records.len(), h, w, labels)?))
}

fn check_size(r: &ImageRecord, want_w: usize, want_h: usize) -> Result<(), TrainError> {
    if (r.width(), r.height()) != (want_w, want_h) {
        return Err(TrainError::NonUniformSizes {
            id: r.id.clone(),
            got_w: r.width(),
            got_h: r.height(),
            want_w,
            want_h,
        });
    }
    Ok(())
}

/// Number of pixels whose argmax class equals the label (ties → class 0).
fn correct_pixels(logits: &Tensor<f32>, labels: &LabelMap) -> usize {
    let s = logits.shape();
    let plane = s.h * s.w;
    let data = logits.data();
    let mut correct = 0;
    for n in 0..s.n {
        for i in 0..plane {
            let at = |c: usize| data[(n * s.c + c) * plane + i];
            let best = (1..s.c).fold(0, |b, c| if at(c) > at(b) { c } else { b });
            correct += usize::from(best == labels.data[n * plane + i] as usize);
        }
    }
    correct
}

/// Trains on the dataset's train split with a fresh optimizer.
pub fn fit(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let records: Vec<&ImageRecord> = dataset.split(Split::Train).collect();
    let mut state = optimizer_for(model, config.lr)?;
    fit_with(model, &records, config, &mut state, |_| {})
}

/// Training loop over explicit records and optimizer state. `observe` sees
/// every reported step as it happens. The model is left in training mode.
pub fn fit_with(
    model: &mut Model,
    records: &[&ImageRecord],
    config: &TrainConfig,
    state: &mut AdamState<f32>,
    mut observe: impl FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let first = records.first().ok_or(TrainError::EmptyDataset)?;
    for r in records {
        check_size(r, first.width(), first.height())?;
    }
    model.check_input([1, 3, first.height(), first.width()].into())?;
    model.set_mode(Mode::Training);
    let trainable: Vec<usize> = (0..model.params().len()).filter(|&i| model.params()[i].trainable).collect();
    if state.m.len() != trainable.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "optimizer has {} moments for {} trainable parameters",
            state.m.len(),
            trainable.len()
        )));
    }
    let weights = config.class_weights.map(|w| w.to_vec());

    let mut rng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        rng::shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            step += 1;
            let batch: Vec<&ImageRecord> = idx.iter().map(|&i| records[i]).collect();
            let (input, labels) = batch_tensors(&batch)?;

            let mut tape = Tape::new();
            let x = tape.constant(input);
            let fwd = model.forward_on(&mut tape, x)?;
            let loss_var = tape.cross_entropy(fwd.logits, &labels, weights.as_deref())?;
            let loss = tape.value(loss_var).item() as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(step));
            }
            let batch_correct = correct_pixels(tape.value(fwd.logits), &labels);
            tape.backward(loss_var)?;
            let mut grads: Vec<Tensor<f32>> = trainable
                .iter()
                .map(|&i| {
                    tape.take_grad(fwd.params[i])
                        .unwrap_or_else(|| Tensor::zeros(model.params()[i].tensor.shape()))
                })
                .collect();
            drop(tape);
            let mut params: Vec<&mut Tensor<f32>> = model
                .params_mut()
                .iter_mut()
                .filter(|p| p.trainable)
                .map(|p| &mut p.tensor)
                .collect();
            adam_step(&mut params, &mut grads, state)?;

            let n_pix = labels.data.len();
            loss_sum += loss * n_pix as f64;
            correct += batch_correct;
            pixels += n_pix;
            if step % config.log_every == 0 || b + 1 == batches.len() {
                let log = StepLog {
                    step,
                    epoch,
                    loss,
                    pixel_acc: batch_correct as f64 / n_pix as f64,
                };
                observe(&log);
                report.steps.push(log);
            }
        }
        report.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / pixels as f64,
            pixel_accuracy: correct as f64 / pixels as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(model, state, path)?;
        }
    }
    Ok(report)
}
