use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{
    apply_augmentation, center_crop, random_crop, images_to_tensor, tencrop, ClassLabel, DataError, DatasetManifest, GrayImage, Split,
};
use crate::metrics::{per_class_metrics, ClassMetrics, ConfusionMatrix, MacroMetrics};
use crate::model::{cross_entropy, softmax, Mode, Network, NetworkProfile};
use crate::optim::{scaled_step, EmaState, LossScaler, Optimizer};
use crate::rng::{substream, Stream};
use crate::tensor::Graph;

use super::{TrainConfig, TrainError};

/// Images of one split with their labels, in manifest order.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<Arc<GrayImage>>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    /// Requires materialized images (see [`DatasetManifest::materialize`]).
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self, TrainError> {
        let mut out = Self::default();
        for r in manifest.records.iter().filter(|r| r.split == split) {
            let img = r.image.clone().ok_or_else(|| DataError::ImageUnavailable(r.id.clone()))?;
            out.ids.push(r.id.clone());
            out.images.push(img);
            out.labels.push(r.label.index());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Model plus everything the optimizer stack carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub opt: Optimizer,
    pub ema: Option<EmaState>,
    pub scaler: LossScaler,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, profile: &NetworkProfile) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = Network::build(profile, cfg.seed)?;
        let opt = Optimizer::new(cfg.optimizer, cfg.adamw, net.params(), cfg.exclude_norm_bias_decay)?;
        let ema = cfg
            .ema_decay
            .map(|d| EmaState::new(net.params(), d).map(|e| e.with_warmup(cfg.ema_warmup)))
            .transpose()?;
        let scaler = if cfg.scaler.enabled {
            LossScaler::new(cfg.scaler)?
        } else {
            LossScaler::disabled()
        };
        Ok(Self { net, opt, ema, scaler })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub loss_scale: f64,
}

/// Index batches of a seeded permutation; a trailing batch of one joins its predecessor.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Shuffle, &[epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// One pass over `data`: a loss-scaled optimizer step and an EMA update per batch.
pub fn train_one_epoch(
    state: &mut TrainState,
    data: &LabeledImages,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::empty(Split::Train));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut skipped = 0usize;
    let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
    for batch in &batches {
        let images: Vec<GrayImage> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = substream(cfg.seed, Stream::Augment, &[epoch as u64, i as u64]);
                let img = match &cfg.augmentation {
                    Some(policy) => apply_augmentation(&data.images[i], policy, &mut rng),
                    None => (*data.images[i]).clone(),
                };
                if cfg.train_crop {
                    random_crop(&img, cfg.crop_fraction, &mut rng)
                } else {
                    Ok(img)
                }
            })
            .collect::<Result<_, DataError>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let refs: Vec<&GrayImage> = images.iter().collect();

        let mut g = Graph::new();
        let vars = state.net.bind(&mut g, true);
        let x = g.constant(images_to_tensor(&refs)?);
        let out = state.net.forward(&mut g, x, &vars, Mode::Train)?;
        let loss = cross_entropy(&mut g, out.logits, &labels)?;
        loss_sum += g.value(loss).item().expect("scalar loss") * batch.len() as f64;
        let classes = g.shape(out.logits)[1];
        for (row, &y) in g.value(out.logits).data().chunks(classes).zip(&labels) {
            correct += (argmax(row) == y) as usize;
        }
        let outcome = scaled_step(&mut g, loss, &vars, state.net.params_mut(), &mut state.opt, &mut state.scaler, lr)?;
        if outcome.stepped {
            state.net.commit_batch_stats(&out.batch_stats);
            if let Some(ema) = &mut state.ema {
                ema.update(state.net.params())?;
            }
        } else {
            skipped += 1;
        }
    }
    Ok(EpochStats {
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        steps: batches.len(),
        skipped_steps: skipped,
        loss_scale: state.scaler.scale,
    })
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub metrics: MacroMetrics,
    pub per_class: Vec<ClassMetrics>,
    /// Mean `−ln p̄(y)` of the view-averaged probabilities.
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Evaluation-mode predictions: softmax probabilities averaged over the ten
/// TenCrop views (or the single centre crop), argmax as the label.
///
/// With `use_ema` the shadow weights are swapped in for the duration of the
/// call and the live weights are restored afterwards, also on error.
pub fn evaluate(
    state: &mut TrainState,
    data: &LabeledImages,
    cfg: &TrainConfig,
    use_ema: bool,
    split: Split,
) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::empty(split));
    }
    let swap = match (&mut state.ema, use_ema) {
        (Some(ema), true) => Some(ema.apply(state.net.params_mut())?),
        _ => None,
    };
    let result = predict(&state.net, data, cfg);
    if let Some(swap) = swap {
        state
            .ema
            .as_mut()
            .expect("swap implies EMA")
            .restore(state.net.params_mut(), swap)?;
    }
    let probabilities = result?;
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let loss = probabilities
        .iter()
        .zip(&data.labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / data.len() as f64;
    let confusion = ConfusionMatrix::from_labels(&data.labels, &predictions, ClassLabel::names())?;
    Ok(EvalResult {
        metrics: MacroMetrics::from_matrix(&confusion)?,
        per_class: per_class_metrics(&confusion),
        confusion,
        loss,
        predictions,
        probabilities,
    })
}

fn predict(net: &Network, data: &LabeledImages, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut probs = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(cfg.eval_batch_size) {
        let views: Vec<Vec<GrayImage>> = chunk
            .par_iter()
            .map(|img| {
                if cfg.tencrop {
                    tencrop(img, cfg.crop_fraction)
                } else {
                    center_crop(img, cfg.crop_fraction).map(|c| vec![c])
                }
            })
            .collect::<Result<_, DataError>>()?;
        let per_sample = views[0].len();
        let refs: Vec<&GrayImage> = views.iter().flatten().collect();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let x = g.constant(images_to_tensor(&refs)?);
        let out = net.forward(&mut g, x, &vars, Mode::Eval)?;
        let classes = g.shape(out.logits)[1];
        let rows: Vec<Vec<f64>> = g
            .value(out.logits)
            .data()
            .chunks(classes)
            .map(softmax)
            .collect::<Result<_, _>>()?;
        for sample in rows.chunks(per_sample) {
            let mut avg = vec![0.0; classes];
            for r in sample {
                avg.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            avg.iter_mut().for_each(|a| *a /= per_sample as f64);
            probs.push(avg);
        }
    }
    Ok(probs)
}
