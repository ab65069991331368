//! Training loop, evaluation metrics and the reference classifiers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::augment::augment;
use crate::config::TrainConfig;
use crate::data::{upsample_balance, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{argmax_rows, TransFer};
use crate::optim::{clip_grad_norm, Sgd};
use crate::regularizers::Mode;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Stream ids for the generators derived from the run seed.
const SHUFFLE_STREAM: u64 = 0x5eed;
const AUGMENT_STREAM: u64 = 0xa06;
const BALANCE_STREAM: u64 = 0xba1;
const DROP_STREAM: u64 = 0xd50;

/// Evaluation batch size; bounded so graph memory stays small.
pub const EVAL_BATCH: usize = 64;

/// Anything that maps a batch of images to class indices.
pub trait Classifier {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>>;
}

impl Classifier for TransFer {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        TransFer::predict(self, images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Unweighted mean over the classes present in the data.
    pub mean_class_accuracy: f64,
    /// `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub loss_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("metrics", &[predictions.len()], &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let mut total = vec![0usize; num_classes];
        let mut hits = vec![0usize; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= num_classes {
                return Err(Error::Index {
                    index: l,
                    len: num_classes,
                });
            }
            total[l] += 1;
            hits[l] += usize::from(p == l);
        }
        let per_class: Vec<Option<f64>> = total
            .iter()
            .zip(&hits)
            .map(|(&t, &h)| (t > 0).then(|| h as f64 / t as f64))
            .collect();
        let absent: Vec<usize> = (0..num_classes).filter(|&c| per_class[c].is_none()).collect();
        if !absent.is_empty() {
            log::warn!("classes {absent:?} have no samples; excluded from the mean class accuracy");
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(Self {
            overall_accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
            mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            per_class_accuracy: per_class,
            loss_curve: Vec::new(),
        })
    }
}

/// Runs `model` over `data` in batches of [`EVAL_BATCH`].
pub fn evaluate(model: &impl Classifier, data: &Dataset) -> Result<Metrics> {
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        predictions.extend(model.predict(&images)?);
    }
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&predictions, &labels, data.num_classes())
}

/// Predicts the class whose mean training image is closest in L2.
#[derive(Debug, Clone)]
pub struct NearestCentroid {
    pub centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let size = data.image_size().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let len = size * size * 3;
        let mut centroids = vec![vec![0.0; len]; data.num_classes()];
        let counts = data.class_counts();
        for s in &data.samples {
            for (c, v) in centroids[s.label].iter_mut().zip(s.image.data()) {
                *c += v;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        Ok(Self { centroids })
    }
}

impl Classifier for NearestCentroid {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let len = self.centroids[0].len();
        if images.len() % len != 0 {
            return Err(Error::shape("nearest centroid", images.shape(), &[len]));
        }
        Ok(images
            .data()
            .chunks(len)
            .map(|img| {
                let dist = |c: &Vec<f64>| c.iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (0..self.centroids.len())
                    .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
                    .unwrap_or(0)
            })
            .collect())
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub mean_class_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropSite {
    Local,
    Block(usize),
}

/// One logged MAD / MSAD decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropRecord {
    pub step: usize,
    pub site: DropSite,
    pub sample: usize,
    pub dropped_index: Option<usize>,
}

/// Model, optimizer state and generators of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TransFer,
    sgd: Sgd,
    shuffle_rng: Rng,
    drop_rng: Rng,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub step_losses: Vec<f64>,
    pub drops: Vec<DropRecord>,
}

/// Loss and accuracy of one pass over the training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let seed = config.seed;
        let model = TransFer::new(config)?;
        let sgd = Sgd::new(&model.params, model.config.momentum);
        Ok(Self {
            model,
            sgd,
            shuffle_rng: rng::derive(seed, SHUFFLE_STREAM),
            drop_rng: rng::derive(seed, DROP_STREAM),
            epoch: 0,
            step: 0,
            step_losses: Vec::new(),
            drops: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Forward, backward and one SGD step; returns the batch loss and the
    /// number of correct training-mode predictions.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.model.forward(&mut g, x, Mode::Training, &mut self.drop_rng)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                step: self.step,
                loss: value,
            });
        }
        let correct = argmax_rows(g.value(out.logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        if self.model.config.log_drops {
            let (local, blocks) = out.decisions();
            let sites = core::iter::once((DropSite::Local, local))
                .chain(blocks.into_iter().enumerate().map(|(i, d)| (DropSite::Block(i), d)));
            for (site, decisions) in sites {
                for (sample, d) in decisions.iter().enumerate() {
                    self.drops.push(DropRecord {
                        step: self.step,
                        site,
                        sample,
                        dropped_index: d.dropped_index,
                    });
                }
            }
        }
        g.backward(loss)?;
        self.model.params.accumulate_grads(&g);
        clip_grad_norm(self.model.params.tensors_mut(), self.model.config.grad_clip);
        self.sgd.step(&mut self.model.params, lr)?;
        self.step += 1;
        self.step_losses.push(value);
        Ok((value, correct))
    }

    /// One shuffled, augmented pass over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let cfg = &self.model.config;
        let (lr, batch_size, use_augment, seed) = (self.model.config.lr_at(self.epoch), cfg.batch_size, cfg.augment, cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let (mut images, labels) = data.batch(chunk)?;
            if use_augment {
                let per = images.len() / chunk.len();
                let shape = data.samples[0].image.shape().to_vec();
                for (i, slot) in images.data_mut().chunks_mut(per).enumerate() {
                    let stream = ((self.epoch as u64) << 40) | ((b as u64) << 20) | i as u64;
                    let mut aug_rng = rng::derive(rng::mix(seed, AUGMENT_STREAM), stream);
                    let img = Tensor::new(&shape, slot.to_vec())?;
                    slot.copy_from_slice(augment(&img, &mut aug_rng).data());
                }
            }
            let (loss, hits) = self.train_step(&images, &labels, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        self.epoch += 1;
        Ok(EpochStats {
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransFer,
    pub history: Vec<EpochRecord>,
    /// Test metrics after the last epoch; `loss_curve` holds per-epoch training loss.
    pub metrics: Option<Metrics>,
    pub step_losses: Vec<f64>,
    pub drops: Vec<DropRecord>,
}

/// Balances the training set with a seed-derived generator.
pub fn balanced(config: &TrainConfig, data: &Dataset) -> Result<Dataset> {
    upsample_balance(data, &mut rng::derive(config.seed, BALANCE_STREAM))
}

/// Trains for `config.epochs`, evaluating on `test` after every epoch.
/// `on_epoch` may stop the run early by returning `false`.
pub fn train_with(
    config: TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut evaluator: impl FnMut(&TransFer, &Dataset) -> Result<Metrics>,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome> {
    let data = balanced(&config, train)?;
    if data.num_classes() != config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, config expects {}",
            data.num_classes(),
            config.num_classes
        )));
    }
    let epochs = config.epochs;
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::with_capacity(epochs);
    let mut metrics = None;
    for _ in 0..epochs {
        let stats = trainer.run_epoch(&data)?;
        let eval = test.map(|t| evaluator(&trainer.model, t)).transpose()?;
        let record = EpochRecord {
            epoch: trainer.epoch,
            lr: stats.lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            test_acc: eval.as_ref().map(|m| m.overall_accuracy),
            mean_class_acc: eval.as_ref().map(|m| m.mean_class_accuracy),
        };
        log::info!(
            "epoch {} lr {:.4} loss {:.4} train {:.3} test {:?}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.train_acc,
            record.test_acc
        );
        metrics = eval.or(metrics);
        history.push(record);
        if !on_epoch(history.last().expect("just pushed")) {
            break;
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.loss_curve = history.iter().map(|r| r.train_loss).collect();
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
        metrics,
        step_losses: trainer.step_losses,
        drops: trainer.drops,
    })
}

/// [`train_with`] using the serial [`evaluate`] and no early stop.
pub fn train(config: TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with(config, train, test, |m, d| evaluate(m, d), |_| true)
}

/// Predictor returning uniformly random classes; a chance-level reference.
#[derive(Debug)]
pub struct RandomClassifier {
    pub num_classes: usize,
    rng: core::cell::RefCell<Rng>,
}

impl RandomClassifier {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self {
            num_classes,
            rng: core::cell::RefCell::new(rng::seeded(seed)),
        }
    }
}

impl Classifier for RandomClassifier {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut rng = self.rng.borrow_mut();
        Ok((0..n).map(|_| rng.gen_range(0..self.num_classes)).collect())
    }
}
