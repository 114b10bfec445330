//! Dense supervision loss, Adam and the training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Level;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_tiles, MetricsReport};
use crate::geodata::{batch_tensors, RegionRasters, TileSample, TileSampler};
use crate::graph::{Gradients, Graph, Var};
use crate::model::{DualMapper, ModelConfig};
use crate::nn::Mode;
use crate::params::{read_checkpoint, save_checkpoint, ParamId, ParamKind, ParamStore};
use crate::refiner::{build_label_pyramid, LabelPyramid, PredictionSet, Stream};
use crate::tensor::{s, Scalar, Tensor};

/// Probability clamp of the cross entropy.
pub const CE_EPS: f64 = 1e-7;

/// Mean binary cross entropy with `p` clamped to `[eps, 1 - eps]`,
/// accumulated in `f64`.
pub fn pixel_ce_value<T: Scalar>(p: &[T], y: &[T], eps: f64) -> T {
    if p.is_empty() {
        return T::zero();
    }
    let mut acc = 0.0f64;
    for (&pv, &yv) in p.iter().zip(y) {
        let p = pv.to_f64().unwrap_or(f64::NAN).clamp(eps, 1.0 - eps);
        let y = yv.to_f64().unwrap_or(f64::NAN);
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    T::from_f64_lossy(acc / p.len() as f64)
}

/// [`pixel_ce_value`] on tensors of equal shape.
pub fn pixel_ce<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    if p.shape() != y.shape() {
        return Err(Error::shape("pixel_ce", y.shape(), p.shape()));
    }
    Ok(pixel_ce_value(p.data(), y.data(), CE_EPS))
}

/// Weights of the four supervised streams, shared by all levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub image: f64,
    pub traj: f64,
    pub fused: f64,
    pub refined: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            image: 0.5,
            traj: 0.5,
            fused: 0.5,
            refined: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, stream: Stream) -> f64 {
        match stream {
            Stream::Image => self.image,
            Stream::Traj => self.traj,
            Stream::Fused => self.fused,
            Stream::Refined => self.refined,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            image: self.image * k,
            traj: self.traj * k,
            fused: self.fused * k,
            refined: self.refined * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.image, self.traj, self.fused, self.refined];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss of every stream at every level (coarsest first).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamLosses {
    pub image: [f64; 5],
    pub traj: [f64; 5],
    pub fused: [f64; 5],
    pub refined: [f64; 5],
}

impl StreamLosses {
    pub fn get(&self, stream: Stream, level: Level) -> f64 {
        self.row(stream)[level.index()]
    }

    fn row(&self, stream: Stream) -> &[f64; 5] {
        match stream {
            Stream::Image => &self.image,
            Stream::Traj => &self.traj,
            Stream::Fused => &self.fused,
            Stream::Refined => &self.refined,
        }
    }

    fn set(&mut self, stream: Stream, level: Level, v: f64) {
        let row = match stream {
            Stream::Image => &mut self.image,
            Stream::Traj => &mut self.traj,
            Stream::Fused => &mut self.fused,
            Stream::Refined => &mut self.refined,
        };
        row[level.index()] = v;
    }

    pub fn all_finite(&self) -> bool {
        Stream::ALL.iter().all(|&s| self.row(s).iter().all(|v| v.is_finite()))
    }
}

/// The 20-term objective: every stream at every level against the label
/// pyramid, weighted per stream and summed.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, preds: &PredictionSet, pyramid: &LabelPyramid<T>, w: &LossWeights) -> Result<(Var, StreamLosses)> {
    if preds.levels.len() != Level::COUNT {
        return Err(Error::Invalid(format!("prediction set has {} levels, expected {}", preds.levels.len(), Level::COUNT)));
    }
    let mut terms = Vec::with_capacity(20);
    let mut losses = StreamLosses::default();
    for level in Level::ALL {
        let target = pyramid.at(level);
        for stream in Stream::ALL {
            let l = g.bce(preds.at(level).get(stream), target, CE_EPS)?;
            losses.set(stream, level, g.value(l).value().to_f64().unwrap_or(f64::NAN));
            terms.push((l, s::<T>(w.get(stream))));
        }
    }
    Ok((g.weighted_sum(&terms)?, losses))
}

/// Adam with bias correction; moments exist only for parameters that have
/// received a gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2): (T, T) = (s(self.beta1), s(self.beta2));
        let (nb1, nb2): (T, T) = (s(1.0 - self.beta1), s(1.0 - self.beta2));
        let (step, eps, rc2): (T, T, T) = (s(self.lr / c1), s(self.eps), s(1.0 / c2));
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let value = store.value_mut(id);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((p, m), v), &g) in value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + nb1 * g;
                *v = b2 * *v + nb2 * g * g;
                *p -= step * *m / ((*v * rc2).sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors for a checkpoint.
    pub fn state<'a>(&'a self, store: &ParamStore<T>) -> Vec<(String, ParamKind, &'a Tensor<T>)> {
        let mut out = Vec::new();
        for (i, mv) in self.moments.iter().enumerate() {
            if let Some((m, v)) = mv {
                let name = store.name(ParamId(i));
                out.push((format!("adam.m.{name}"), ParamKind::OptimizerState, m));
                out.push((format!("adam.v.{name}"), ParamKind::OptimizerState, v));
            }
        }
        out
    }

    fn restore(&mut self, store: &ParamStore<T>, extra: &std::collections::HashMap<String, Tensor<f32>>) -> Result<()> {
        self.moments = vec![None; store.len()];
        for id in store.ids() {
            let name = store.name(id);
            match (extra.get(&format!("adam.m.{name}")), extra.get(&format!("adam.v.{name}"))) {
                (Some(m), Some(v)) => {
                    if m.shape() != store.value(id).shape() || v.shape() != m.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state of {name} has the wrong shape")));
                    }
                    self.moments[id.index()] = Some((m.cast(), v.cast()));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Override of the derived steps per epoch.
    pub steps_per_epoch: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: None,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Invalid("steps per epoch must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimizer steps that scan `samples` tiles once.
    pub fn steps_for(&self, samples: u64) -> u64 {
        self.steps_per_epoch.unwrap_or_else(|| samples.div_ceil(self.batch_size as u64).max(1))
    }
}

/// Supplies the tiles of each optimizer step.
pub trait BatchSource {
    /// The batch of global step `step`; must depend only on the step.
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<TileSample>>;

    /// Tiles per epoch.
    fn samples_per_epoch(&self) -> u64;
}

/// Random crops of a region, drawn from the seeded sampler stream.
pub struct RegionSource {
    pub rasters: RegionRasters,
    pub sampler: TileSampler,
    pub seed: u64,
    pub epoch_samples: u64,
}

impl BatchSource for RegionSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<TileSample>> {
        let base = step * batch_size as u64;
        Ok((0..batch_size as u64)
            .map(|j| self.sampler.sample_tile(self.seed, base + j, &self.rasters))
            .collect())
    }

    fn samples_per_epoch(&self) -> u64 {
        self.epoch_samples
    }
}

/// A fixed tile set visited in a seeded random order, reshuffled every pass.
pub struct TileSetSource {
    pub tiles: Vec<TileSample>,
    pub seed: u64,
}

impl TileSetSource {
    fn order(&self, pass: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tiles.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(pass);
        idx.shuffle(&mut rng);
        idx
    }
}

impl BatchSource for TileSetSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<Vec<TileSample>> {
        let n = self.tiles.len() as u64;
        if n == 0 {
            return Err(Error::Invalid("empty tile set".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        for j in 0..batch_size as u64 {
            let k = step * batch_size as u64 + j;
            out.push(self.tiles[self.order(k / n)[(k % n) as usize]].clone());
        }
        Ok(out)
    }

    fn samples_per_epoch(&self) -> u64 {
        self.tiles.len() as u64
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub total_loss: f64,
    pub stream_losses: StreamLosses,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub non_finite: usize,
}

impl RangeStats {
    fn of(t: &Tensor<f32>) -> Self {
        let mut r = RangeStats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            non_finite: 0,
        };
        for &v in t.data() {
            if v.is_finite() {
                r.min = r.min.min(v as f64);
                r.max = r.max.max(v as f64);
            } else {
                r.non_finite += 1;
            }
        }
        r
    }
}

/// What is known about a batch whose loss was not finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostic {
    pub step: u64,
    pub origins: Vec<(usize, usize)>,
    pub stream_losses: StreamLosses,
    pub image: RangeStats,
    pub traj: RangeStats,
    pub label: RangeStats,
}

/// Validation result at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub checkpoint: Option<String>,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_loss: Option<f64>,
    /// Mean validation IoU and F1 over the last ten completed epochs.
    pub last10_val_iou: Option<f64>,
    pub last10_val_f1: Option<f64>,
}

pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const EPOCH_LOG: &str = "epochs.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DIAGNOSTIC_FILE: &str = "nonfinite_batch.json";

/// Where `run` writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_stem(&self, name: &str) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(name)
    }
}

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch:03}")
}

/// Model, optimizer and step counter.
pub struct Trainer {
    pub model: DualMapper<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: DualMapper<f32>, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            model,
            adam,
            config,
            weights,
            step: 0,
        })
    }

    /// Forward, loss and gradients of a batch without updating anything
    /// but batch-norm running statistics.
    pub fn loss_and_grads(&mut self, tiles: &[TileSample]) -> Result<(f64, StreamLosses, Gradients<f32>)> {
        let (image, traj, label) = batch_tensors(tiles)?;
        let pyramid = build_label_pyramid(&label)?;
        let mut g = Graph::new();
        let out = self.model.forward_full(&mut g, &image, &traj, Mode::Train)?;
        let (loss, losses) = total_loss(&mut g, &out.predictions, &pyramid, &self.weights)?;
        let total = g.value(loss).value() as f64;
        if !total.is_finite() || !losses.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostic: Box::new(BatchDiagnostic {
                    step: self.step,
                    origins: tiles.iter().map(|t| t.origin).collect(),
                    stream_losses: losses,
                    image: RangeStats::of(&image),
                    traj: RangeStats::of(&traj),
                    label: RangeStats::of(&label),
                }),
            });
        }
        Ok((total, losses, g.backward(loss)?))
    }

    /// One Adam update on `tiles`.
    pub fn train_step(&mut self, tiles: &[TileSample], steps_per_epoch: u64) -> Result<StepRecord> {
        let (total, losses, grads) = self.loss_and_grads(tiles)?;
        self.adam.step(&mut self.model.store, &grads);
        let rec = StepRecord {
            step: self.step,
            epoch: self.step / steps_per_epoch.max(1),
            total_loss: total,
            stream_losses: losses,
            lr: self.config.learning_rate,
        };
        self.step += 1;
        Ok(rec)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model.config,
            "train": self.config,
            "weights": self.weights,
            "step": self.step,
            "adam_t": self.adam.t,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_checkpoint(stem, &self.model.store, &self.adam.state(&self.model.store), self.meta())
    }

    /// Continue from a checkpoint written by [`save`](Self::save).
    pub fn resume(stem: &Path) -> Result<Self> {
        let ck = read_checkpoint(stem)?;
        let meta = &ck.manifest.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("meta lacks {k}")));
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let model_cfg: ModelConfig = serde_json::from_value(field("model")?).map_err(bad)?;
        let config: TrainConfig = serde_json::from_value(field("train")?).map_err(bad)?;
        let weights: LossWeights = serde_json::from_value(field("weights")?).map_err(bad)?;
        let step: u64 = serde_json::from_value(field("step")?).map_err(bad)?;
        let adam_t: u64 = serde_json::from_value(field("adam_t")?).map_err(bad)?;
        let mut model = DualMapper::new(model_cfg);
        model.load_checkpoint(&ck)?;
        let mut t = Trainer::new(model, config, weights)?;
        t.adam.restore(&t.model.store, &ck.extra)?;
        t.adam.t = adam_t;
        t.step = step;
        Ok(t)
    }

    /// Train until `config.epochs` epochs (or `max_steps`) are done. With an
    /// output directory, log every step, checkpoint every epoch and write the
    /// offending batch description if the loss turns non-finite.
    pub fn run(&mut self, source: &mut dyn BatchSource, out: Option<&RunOutput>, validation: Option<&[TileSample]>) -> Result<TrainSummary> {
        let spe = self.config.steps_for(source.samples_per_epoch());
        let mut end = self.config.epochs * spe;
        if let Some(m) = self.config.max_steps {
            end = end.min(m);
        }
        let mut log = match out {
            Some(o) => Some(open_log(&o.dir.join(TRAIN_LOG), self.step > 0)?),
            None => None,
        };
        let mut epoch_log = match out {
            Some(o) => Some(open_log(&o.dir.join(EPOCH_LOG), self.step > 0)?),
            None => None,
        };
        let mut epochs = Vec::new();
        let mut final_loss = None;
        while self.step < end {
            let tiles = source.batch(self.step, self.config.batch_size)?;
            let rec = match self.train_step(&tiles, spe) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { step, diagnostic }) => {
                    if let Some(o) = out {
                        crate::geodata::io::write_json(&o.dir.join(DIAGNOSTIC_FILE), &diagnostic)?;
                    }
                    return Err(Error::NonFiniteLoss { step, diagnostic });
                }
                Err(e) => return Err(e),
            };
            final_loss = Some(rec.total_loss);
            if let (Some(w), Some(o)) = (log.as_mut(), out) {
                write_line(w, &o.dir.join(TRAIN_LOG), &rec)?;
            }
            if self.step % spe == 0 {
                let epoch = self.step / spe;
                let checkpoint = match out {
                    Some(o) => {
                        let name = epoch_checkpoint_name(epoch);
                        self.save(&o.checkpoint_stem(&name))?;
                        Some(name)
                    }
                    None => None,
                };
                let val = match validation {
                    Some(v) if !v.is_empty() => Some(MetricsReport::new(&evaluate_tiles(&mut self.model, v)?)),
                    _ => None,
                };
                let er = EpochRecord {
                    epoch,
                    step: self.step,
                    checkpoint,
                    val,
                };
                if let (Some(w), Some(o)) = (epoch_log.as_mut(), out) {
                    write_line(w, &o.dir.join(EPOCH_LOG), &er)?;
                }
                epochs.push(er);
            }
        }
        if let Some(o) = out {
            self.save(&o.checkpoint_stem("last"))?;
        }
        let vals: Vec<&MetricsReport> = epochs.iter().rev().filter_map(|e| e.val.as_ref()).take(10).collect();
        let mean = |f: fn(&MetricsReport) -> f64| (!vals.is_empty()).then(|| vals.iter().map(|m| f(m)).sum::<f64>() / vals.len() as f64);
        Ok(TrainSummary {
            steps: self.step,
            final_loss,
            last10_val_iou: mean(|m| m.iou),
            last10_val_f1: mean(|m| m.f1),
            epochs,
        })
    }
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<S: Serialize>(w: &mut BufWriter<File>, path: &Path, rec: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn ce_reference_values() {
        let ones = [1.0f64; 8];
        assert!(pixel_ce_value(&ones, &ones, CE_EPS) < 1e-6);
        let half = [0.5f64; 4];
        for y in [[0.0, 1.0, 0.25, 0.9], [1.0; 4]] {
            assert!((pixel_ce_value(&half, &y, CE_EPS) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let p = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(pixel_ce(&p, &Tensor::zeros(Shape::new(1, 1, 2, 3))).is_err());
        assert!(pixel_ce_value(&[0.0f64], &[1.0], CE_EPS).is_finite());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.image, w.traj, w.fused, w.refined), (0.5, 0.5, 0.5, 1.0));
        assert!(w.scaled(-1.0).validate().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.beta1, c.beta2, c.adam_eps), (1e-4, 16, 0.9, 0.999, 1e-8));
        assert_eq!(c.steps_for(33), 3);
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Weight, Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let obj = g.dot_const(w, &Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, -3.0, 0.0]).unwrap()).unwrap();
        let grads = g.backward(obj).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] - 1.1).abs() < 1e-6 && v[2] == 1.0);
    }

    #[test]
    fn tile_set_order_is_a_permutation_per_pass() {
        let tile = |i: usize| crate::geodata::RegionRasters {
            image: std::array::from_fn(|_| crate::geodata::RasterGrid::zeros(16, 16, crate::geodata::RasterKind::ImageChannel)),
            traj: crate::geodata::RasterGrid::zeros(16, 16, crate::geodata::RasterKind::TrajScaled),
            label: None,
        }
        .crop(i as isize, 0, 16);
        let mut src = TileSetSource {
            tiles: (0..5).map(tile).collect(),
            seed: 3,
        };
        let mut seen: Vec<usize> = (0..5u64).flat_map(|s| src.batch(s, 1).unwrap()).map(|t| t.origin.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(src.batch(7, 2).unwrap(), src.batch(7, 2).unwrap());
    }
}
