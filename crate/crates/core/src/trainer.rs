//! Optimization loop, dataset evaluation and the Adam optimizer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::siamese_features;
use crate::data_io::{iterate_training_pairs, DataError, Dataset, ImageSource, InstanceAnnotation, TrainingSample};
use crate::geometry::{split_components, BBox, Component, Contour, GeometryError, InstanceMode, MultiPolygon};
use crate::head::deform;
use crate::image::Image;
use crate::loss::{modulation_loss, total_loss, vertex_loss, LossError};
use crate::metrics::{score_instance, EvalRecord, EvalReport, MetricsError};
use crate::model::{HeadConfig, Model, ModelConfig, ModelError, Params};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError};

/// Boundary-F tolerances reported by [`evaluate_dataset`].
pub const EVAL_TOLERANCES: [u32; 2] = [1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the vertex term.
    pub alpha: f64,
    #[serde(alias = "s")]
    pub search_scale: f64,
    #[serde(alias = "K")]
    pub k: usize,
    pub mode: InstanceMode,
    /// Random horizontal flips.
    pub flip: bool,
    /// Inaccuracy threshold of the attention target, relative to the box side.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            alpha: 10.0,
            search_scale: 1.5,
            k: 128,
            mode: InstanceMode::PerComponent,
            flip: false,
            tau: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.validate_schedule()?;
        self.model_config().validate()?;
        Ok(())
    }

    fn validate_schedule(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batchSize must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learningRate must be a finite non-negative number");
        }
        if !(self.alpha > 0.0 && self.tau > 0.0) {
            return bad("alpha and tau must be positive");
        }
        Ok(())
    }

    /// Architecture implied by `search_scale` and `k`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            search_scale: self.search_scale,
            head: HeadConfig { k: self.k, ..Default::default() },
            ..Default::default()
        }
    }
}

/// What went into a batch whose loss was not finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDump {
    pub epoch: usize,
    pub batch: usize,
    pub instance_ids: Vec<u64>,
    pub components: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
    /// `(vertex, dice)` per sample; `null` in JSON where not finite.
    pub losses: Vec<(f64, f64)>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("no prediction for instance {0}")]
    MissingPrediction(u64),
    #[error("non-finite loss in epoch {} batch {} (instances {:?})", .0.epoch, .0.batch, .0.instance_ids)]
    NonFinite(Box<BatchDump>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Per-epoch means over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub vertex: f64,
    pub dice: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One update of every tensor of `params` from gradients in storage order.
    pub fn step<T: Scalar>(&mut self, params: &mut Params<T>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in params.tensor_mut(i).data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
    }
}

/// Loss terms and parameter gradients of one sample.
pub struct SampleGrad {
    pub vertex: f64,
    pub dice: f64,
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward pass of one sample: vertex loss averaged over the
/// deformation rounds, Dice on the attention of every attentive round.
pub fn sample_gradient<T: Scalar>(
    model: &Model<T>,
    sample: &TrainingSample<T>,
    alpha: f64,
    tau: f64,
) -> Result<SampleGrad, TrainError> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let fused = siamese_features(&mut tape, &p, cfg, &sample.crop)?;
    let cb = sample.crop.crop_box;
    let d = match deform(&mut tape, &p, cfg, &fused, &sample.initial, &cb, cfg.head.iterations) {
        Ok(d) => d,
        Err(ModelError::NonFinite { .. }) => {
            return Ok(SampleGrad { vertex: f64::NAN, dice: f64::NAN, loss: f64::NAN, grads: Vec::new() });
        }
        Err(e) => return Err(e.into()),
    };
    let w = cb.width().max(cb.height());
    let targets = &sample.matched.targets;

    let mut vsum = None;
    for &r in &d.rounds {
        let l = vertex_loss(&mut tape, r, targets, w)?;
        vsum = Some(match vsum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    let lv = tape.scale(vsum.expect("at least one round"), 1.0 / d.rounds.len() as f64);
    let mut dsum = None;
    for (i, &beta) in d.betas.iter().enumerate() {
        let l = modulation_loss(&mut tape, beta, &d.inputs[i + 1], targets, w, tau)?;
        dsum = Some(match dsum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    let ld = match dsum {
        Some(s) => tape.scale(s, 1.0 / d.betas.len() as f64),
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let vertex = tape.value(lv).item()?.as_f64();
    let dice = tape.value(ld).item()?.as_f64();
    let total = match total_loss(&mut tape, lv, ld, alpha) {
        Ok(t) => t,
        Err(LossError::NonFinite { .. }) => {
            return Ok(SampleGrad { vertex, dice, loss: f64::NAN, grads: Vec::new() });
        }
        Err(e) => return Err(e.into()),
    };
    let loss = tape.value(total).item()?.as_f64();
    tape.backward(total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params.entries())
        .map(|(&v, (_, t))| match tape.grad(v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    Ok(SampleGrad { vertex, dice, loss, grads })
}

/// Trained weights and the per-epoch loss history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<EpochStats>,
}

/// Builds every training sample of `ds` up front.
pub fn prepare_samples<T: Scalar>(
    ds: &Dataset,
    images: &dyn ImageSource,
    cfg: &TrainConfig,
) -> Result<Vec<TrainingSample<T>>, TrainError> {
    let mc = cfg.model_config();
    Ok(iterate_training_pairs::<T>(ds, images, cfg.mode, cfg.search_scale, cfg.k, mc.crop_size).collect::<Result<_, _>>()?)
}

/// Adam on the total loss over shuffled mini-batches. Samples of a batch
/// are processed in parallel and their gradients summed in batch order, so
/// results do not depend on the thread count. `on_epoch` sees each epoch's
/// statistics as soon as it finishes.
pub fn train(
    ds: &Dataset,
    images: &dyn ImageSource,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let samples = prepare_samples::<f32>(ds, images, cfg)?;
    let model = Model::<f32>::init(cfg.model_config(), cfg.seed)?;
    train_samples(model, &samples, cfg, on_epoch)
}

/// [`train`] from an initial model and prepared samples.
pub fn train_samples(
    mut model: Model<f32>,
    samples: &[TrainingSample<f32>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate_schedule()?;
    model.config.validate()?;
    if model.config.head.k != cfg.k {
        return Err(TrainError::Config(format!("K = {} but the model has {} vertices", cfg.k, model.config.head.k)));
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut adam = Adam::new(cfg.learning_rate, model.params.entries().iter().map(|(_, t)| t.numel()));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut lsum, mut vsum, mut dsum) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Vec<bool> = idx.iter().map(|_| cfg.flip && rng.gen_bool(0.5)).collect();
            let results: Vec<Result<SampleGrad, TrainError>> = idx
                .par_iter()
                .zip(&flips)
                .map(|(&i, &flip)| {
                    if flip {
                        sample_gradient(&model, &samples[i].flipped()?, cfg.alpha, cfg.tau)
                    } else {
                        sample_gradient(&model, &samples[i], cfg.alpha, cfg.tau)
                    }
                })
                .collect();
            let results: Vec<SampleGrad> = results.into_iter().collect::<Result<_, _>>()?;
            let finite = results.iter().all(|r| r.loss.is_finite() && r.grads.iter().flatten().all(|g| g.is_finite()));
            if !finite {
                return Err(TrainError::NonFinite(Box::new(BatchDump {
                    epoch,
                    batch,
                    instance_ids: idx.iter().map(|&i| samples[i].instance_id).collect(),
                    components: idx.iter().map(|&i| samples[i].component).collect(),
                    boxes: idx.iter().map(|&i| box_array(&samples[i].image_box)).collect(),
                    losses: results.iter().map(|r| (r.vertex, r.dice)).collect(),
                })));
            }
            let mut grads: Vec<Vec<f64>> = results[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            for r in &results {
                lsum += r.loss;
                vsum += r.vertex;
                dsum += r.dice;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / idx.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            adam.step(&mut model.params, &grads);
        }
        let n = samples.len() as f64;
        let stats = EpochStats { epoch, loss: lsum / n, vertex: vsum / n, dice: dsum / n };
        log::info!("epoch {epoch}: loss {:.5} vertex {:.5} dice {:.5}", stats.loss, stats.vertex, stats.dice);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

fn box_array(b: &BBox) -> [f64; 4] {
    [b.x0, b.y0, b.x1, b.y1]
}

/// Scores one contour per component of every instance against the full
/// ground truth; the rings predicted for one instance are merged before
/// scoring. `predict` receives the image, the instance and the component.
pub fn evaluate_with(
    ds: &Dataset,
    images: &dyn ImageSource,
    mode: InstanceMode,
    predict: impl Fn(&Image, &InstanceAnnotation, &Component) -> Result<Contour, TrainError> + Sync,
) -> Result<EvalReport, TrainError> {
    let mut by_image: BTreeMap<u64, Vec<&InstanceAnnotation>> = BTreeMap::new();
    for inst in &ds.instances {
        by_image.entry(inst.image_id).or_default().push(inst);
    }
    let groups: Vec<(u64, Vec<&InstanceAnnotation>)> = by_image.into_iter().collect();
    let per_image: Vec<Result<Vec<(u64, EvalRecord)>, TrainError>> = groups
        .par_iter()
        .map(|(image_id, insts)| {
            let img = images.load(*image_id)?;
            insts
                .iter()
                .map(|inst| {
                    let rings = split_components(&inst.polygons, mode)?
                        .iter()
                        .map(|c| predict(&img, inst, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    let pred = MultiPolygon::new(rings)?;
                    let (iou, f_scores) = score_instance(&pred, &inst.polygons, img.width(), img.height(), &EVAL_TOLERANCES)?;
                    let record = EvalRecord { instance_id: inst.id.to_string(), category: inst.category.clone(), iou, f_scores };
                    Ok((inst.id, record))
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(ds.instances.len());
    for r in per_image {
        records.extend(r?);
    }
    // report in manifest order
    let rank: BTreeMap<u64, usize> = ds.instances.iter().enumerate().map(|(i, inst)| (inst.id, i)).collect();
    records.sort_by_key(|(id, _)| rank[id]);
    Ok(EvalReport::from_records(records.into_iter().map(|(_, r)| r).collect())?)
}

/// Predicts a contour from each component box and scores it.
pub fn evaluate_dataset(
    model: &Model<f32>,
    ds: &Dataset,
    images: &dyn ImageSource,
    mode: InstanceMode,
) -> Result<EvalReport, TrainError> {
    evaluate_with(ds, images, mode, |img, _, comp| Ok(model.predict_contour(img, &comp.bbox)?))
}

/// Scores given polygons against the ground truth, matched by instance id.
pub fn evaluate_polygons(ds: &Dataset, predictions: &BTreeMap<u64, MultiPolygon>) -> Result<EvalReport, TrainError> {
    let records = ds
        .instances
        .par_iter()
        .map(|inst| {
            let pred = predictions.get(&inst.id).ok_or(TrainError::MissingPrediction(inst.id))?;
            let img = ds.image(inst.image_id).ok_or(DataError::MissingImage { instance: inst.id, image_id: inst.image_id })?;
            let (iou, f_scores) = score_instance(pred, &inst.polygons, img.width, img.height, &EVAL_TOLERANCES)?;
            Ok(EvalRecord { instance_id: inst.id.to_string(), category: inst.category.clone(), iou, f_scores })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(EvalReport::from_records(records)?)
}
