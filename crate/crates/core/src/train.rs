//! Training loop, evaluation and the metrics log.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, Batch, ChannelStats, Dataset};
use crate::decoder::default_recon_multiplier;
use crate::error::{Error, Result};
use crate::model::{Masking, Model, ModelSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Bound;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate factor.
    pub decay: f64,
    #[serde(skip, default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 0.0005 * 784 / output pixels.
    pub recon_multiplier: Option<f64>,
    pub routing_iters: Option<usize>,
    pub seed: u64,
    pub head_isolation: Option<bool>,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            decay: 0.9,
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 128,
            recon_multiplier: None,
            routing_iters: None,
            seed: 0,
            head_isolation: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if matches!(self.routing_iters, Some(0)) {
            return Err(Error::config("routing iterations must be at least 1"));
        }
        if matches!(self.recon_multiplier, Some(m) if m.is_nan() || m <= 0.0) {
            return Err(Error::config("reconstruction multiplier must be positive"));
        }
        Ok(())
    }

    /// `lr0 * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }

    /// The spec with this config's overrides applied.
    pub fn apply_to(&self, spec: &ModelSpec) -> ModelSpec {
        let mut s = spec.clone();
        if let Some(r) = self.routing_iters {
            s.routing_iters = r;
        }
        if let Some(h) = self.head_isolation {
            s.head_isolation = h;
        }
        s
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub margin_loss: f64,
    pub recon_loss: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub seconds: f64,
    /// Mean margin loss of each routing head (hierarchical models).
    pub head_losses: Vec<f64>,
}

pub const CSV_HEADER: &str = "epoch,lr,margin_loss,recon_loss,total_loss,train_acc,test_acc,seconds";

pub fn csv_header(num_heads: usize) -> String {
    let mut h = CSV_HEADER.to_string();
    if num_heads > 1 {
        for i in 0..num_heads {
            let _ = write!(h, ",head{}_margin_loss", i + 1);
        }
    }
    h
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let test = self.test_acc.map(|a| a.to_string()).unwrap_or_default();
        let mut row = format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, self.margin_loss, self.recon_loss, self.total_loss, self.train_acc, test, self.seconds
        );
        if self.head_losses.len() > 1 {
            for l in &self.head_losses {
                let _ = write!(row, ",{l}");
            }
        }
        row
    }
}

/// Sums produced by one training or evaluation step.
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub samples: usize,
    pub correct: usize,
    pub margin: f64,
    pub recon: f64,
    pub total: f64,
    pub heads: Vec<f64>,
}

impl StepStats {
    fn absorb(&mut self, other: &StepStats) {
        let n = other.samples as f64;
        self.samples += other.samples;
        self.correct += other.correct;
        self.margin += other.margin * n;
        self.recon += other.recon * n;
        self.total += other.total * n;
        self.heads.resize(other.heads.len(), 0.0);
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            *a += b * n;
        }
    }

    fn mean(mut self) -> StepStats {
        let n = self.samples.max(1) as f64;
        self.margin /= n;
        self.recon /= n;
        self.total /= n;
        self.heads.iter_mut().for_each(|h| *h /= n);
        self
    }
}

fn non_finite_report(g: &Graph<f32>, bound: &Bound) -> Error {
    match g.first_non_finite() {
        Some(v) => {
            let name = bound
                .iter()
                .find(|(_, b)| *b == v)
                .map(|(n, _)| format!("parameter {n}"))
                .unwrap_or_else(|| format!("tensor #{} ({})", v.id(), g.op_name(v)));
            Error::Numerical(format!("non-finite values first appear in {name} of shape {:?}", g.shape(v)))
        }
        None => Error::Numerical("non-finite loss".into()),
    }
}

/// Drives optimization of one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub cfg: TrainConfig,
    /// Per-channel input normalization; reconstruction targets stay in [0,1].
    pub input_stats: Option<ChannelStats>,
    recon_multiplier: f64,
}

impl Trainer {
    pub fn new(spec: &ModelSpec, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::build(cfg.apply_to(spec), cfg.seed)?;
        let adam = AdamState::new(&model.params);
        Self::assemble(model, adam, 0, cfg)
    }

    pub fn resume(spec: &ModelSpec, ck: Checkpoint, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let spec = cfg.apply_to(spec);
        spec.init_params(0)?.check_compatible(&ck.params)?;
        let model = Model {
            spec,
            params: ck.params,
        };
        Self::assemble(model, ck.adam, ck.epoch as usize, cfg)
    }

    fn assemble(model: Model, adam: AdamState, epoch: usize, cfg: TrainConfig) -> Result<Trainer> {
        let recon_multiplier = cfg.recon_multiplier.unwrap_or_else(|| {
            model
                .spec
                .decoder
                .as_ref()
                .map_or(1.0, |d| default_recon_multiplier(d.pixels()))
        });
        Ok(Trainer {
            model,
            adam,
            epoch,
            cfg,
            input_stats: None,
            recon_multiplier,
        })
    }

    pub fn recon_multiplier(&self) -> f64 {
        self.recon_multiplier
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch as u32,
        }
    }

    /// Forward + backward + one Adam step on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let spec = &self.model.spec;
        let mut g = Graph::<f32>::new();
        let bound = self.model.params.bind(&mut g);
        let x = g.constant(model_input(&batch.images, self.input_stats.as_ref())?);
        let out = spec.forward(&mut g, &bound, x, Masking::Labels(&batch.labels))?;
        let target = spec.recon_target(&batch.images).map(|t| g.constant(t));
        let losses = spec.losses(&mut g, &out, &batch.labels, target, self.recon_multiplier)?;
        let total = g.value(losses.total).data()[0];
        if !total.is_finite() {
            return Err(non_finite_report(&g, &bound));
        }
        g.backward(losses.total)?;
        let grads = self.model.params.collect_grads(&g, &bound);
        if let Some((name, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        Ok(step_stats(&g, &out.predicted, &batch.labels, &losses))
    }

    /// One pass over `train` in a seeded shuffled order.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(StepStats, f64)> {
        if train.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let lr = self.cfg.lr_at(self.epoch);
        let shuffle = self.cfg.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut acc = StepStats::default();
        for batch in data::batches(train, self.cfg.batch_size, Some(shuffle))? {
            let s = self.step(&batch, lr)?;
            acc.absorb(&s);
        }
        self.epoch += 1;
        Ok((acc.mean(), lr))
    }

    /// Trains for `cfg.epochs` more epochs, evaluating on `test` after each.
    /// With `out_dir`, appends to `metrics.csv` and writes checkpoints there.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let heads = self.model.spec.plan()?.num_heads;
        let log = match out_dir {
            Some(dir) => Some(MetricsLog::open(&dir.join("metrics.csv"), heads)?),
            None => None,
        };
        let mut rows = Vec::new();
        for _ in 0..self.cfg.epochs {
            let start = Instant::now();
            let (stats, lr) = self.train_epoch(train)?;
            let test_acc = match test {
                Some(t) => Some(evaluate(&self.model, t, self.cfg.batch_size, self.input_stats.as_ref())?.accuracy),
                None => None,
            };
            let row = EpochMetrics {
                epoch: self.epoch - 1,
                lr,
                margin_loss: stats.margin,
                recon_loss: stats.recon,
                total_loss: stats.total,
                train_acc: stats.correct as f64 / stats.samples as f64,
                test_acc,
                seconds: start.elapsed().as_secs_f64(),
                head_losses: stats.heads,
            };
            if let Some(log) = &log {
                log.append(&row)?;
            }
            if let (Some(dir), Some(every)) = (out_dir, self.cfg.checkpoint_every) {
                let last = rows.len() + 1 == self.cfg.epochs;
                if every > 0 && (self.epoch.is_multiple_of(every) || last) {
                    checkpoint::save(&dir.join("checkpoint.cdck"), &self.checkpoint(), &self.model.spec)?;
                }
            }
            on_epoch(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

fn model_input(images: &Tensor<f32>, stats: Option<&ChannelStats>) -> Result<Tensor<f32>> {
    let mut x = images.clone();
    if let Some(s) = stats {
        s.normalize_images(&mut x)?;
    }
    Ok(x)
}

fn step_stats(g: &Graph<f32>, predicted: &[usize], labels: &[usize], losses: &crate::model::Losses) -> StepStats {
    let val = |v: Var| g.value(v).data()[0] as f64;
    StepStats {
        samples: labels.len(),
        correct: predicted.iter().zip(labels).filter(|(p, l)| p == l).count(),
        margin: val(losses.margin),
        recon: losses.recon.map_or(0.0, val),
        total: val(losses.total),
        heads: losses.head_margins.iter().map(|&h| val(h)).collect(),
    }
}

/// Appends rows to a CSV metrics file, writing the header when new.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path, num_heads: usize) -> Result<MetricsLog> {
        let header = csv_header(num_heads);
        match fs::read_to_string(path) {
            Ok(existing) => {
                if existing.lines().next() != Some(header.as_str()) {
                    return Err(Error::config(format!(
                        "{} exists with a different header",
                        path.display()
                    )));
                }
            }
            Err(_) => fs::write(path, format!("{header}\n"))?,
        }
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    pub fn append(&self, row: &EpochMetrics) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", row.csv_row())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean margin loss (summed over heads).
    pub margin_loss: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != labels.len() {
        return Err(Error::contract("predictions and labels differ in length"));
    }
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::contract(format!("class index out of range for {k} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn report_from_predictions(predicted: &[usize], labels: &[usize], k: usize, margin_loss: f64) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let confusion = confusion_matrix(predicted, labels, k)?;
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        samples: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        margin_loss,
        per_class_accuracy,
        confusion,
    })
}

/// Accuracy by longest class capsule, without recording gradients.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize, stats: Option<&ChannelStats>) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let spec = &model.spec;
    let mut predicted = Vec::with_capacity(ds.len());
    let mut margin = 0.0;
    for batch in data::batches(ds, batch_size, None)? {
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind_frozen(&mut g);
        let x = g.constant(model_input(&batch.images, stats)?);
        let out = spec.forward(&mut g, &bound, x, Masking::Predicted)?;
        let losses = spec.losses(&mut g, &out, &batch.labels, None, 1.0)?;
        margin += g.value(losses.margin).data()[0] as f64 * batch.labels.len() as f64;
        predicted.extend(out.predicted);
    }
    report_from_predictions(&predicted, &ds.labels, ds.num_classes, margin / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert!((cfg.lr_at(1) - 0.0009).abs() < 1e-15);
        assert_eq!(cfg.lr_at(3), 0.001 * 0.9f64.powi(3));
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn confusion_counts() {
        let r = report_from_predictions(&[0, 1, 1, 2], &[0, 1, 2, 2], 3, 0.0).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(1.0), Some(0.5)]);
        assert!(report_from_predictions(&[], &[], 3, 0.0).is_err());
    }

    #[test]
    fn header_per_head_columns() {
        assert_eq!(csv_header(1), CSV_HEADER);
        assert!(csv_header(4).ends_with("head4_margin_loss"));
    }
}
