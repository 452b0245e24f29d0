//! The training loop.
//!
//! Randomness: the root generator is `ChaCha8(seed)` on stream 0 and drives
//! augmentation only. The batch sampler uses streams `1 + dataset index` of
//! the same seed, and synthetic data is drawn from its own generator, so
//! the order in which work is done cannot change a result.

pub mod config;
pub mod optim;

use std::io;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capacity::{Beta, CapacityError, WeightTable};
use crate::data::{self, augment, MixedBatchSampler, Sample, SamplerError, SynthFace};
use crate::heatmap::{decode, encode, HeatmapError, HeatmapStack, LandmarkSet};
use crate::loss::{fmb_batch_loss_with_grad, AWingParams, LossBreakdown, LossError};
use crate::nn::{output_to_stacks, stacks_to_tensor, write_checkpoint, Mode, NnError, Network, Tensor};
use crate::protocol::{DatasetId, ProtocolError, ProtocolTable};

pub use config::{TrainConfig, SEED_ENV};
pub use optim::{Adam, LrSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

/// Cropped samples of every dataset, indexed like [`DatasetId::ALL`].
#[derive(Debug, Clone, Default)]
pub struct DataPool {
    pub samples: [Vec<Sample>; 4],
}

impl DataPool {
    /// `count` synthetic faces per dataset, drawn at twice the crop size.
    pub fn synthetic(table: &ProtocolTable, count: usize, image_size: usize, seed: u64) -> Result<Self, TrainError> {
        let gen = SynthFace::new(table, 2 * image_size)?;
        let mut pool = DataPool::default();
        for ds in DatasetId::ALL {
            pool.samples[ds.index()] = gen.samples(ds, count, image_size, seed)?;
        }
        Ok(pool)
    }

    /// Every dataset directory under `root`, named like [`DatasetId::name`].
    pub fn load(root: &Path, image_size: usize) -> Result<Self, TrainError> {
        let mut pool = DataPool::default();
        for ds in DatasetId::ALL {
            pool.samples[ds.index()] = data::load_cropped(&root.join(ds.name()), ds, image_size)?;
        }
        Ok(pool)
    }

    pub fn sizes(&self) -> [usize; 4] {
        self.samples.each_ref().map(Vec::len)
    }

    pub fn get(&self, ds: DatasetId, k: usize) -> &Sample {
        &self.samples[ds.index()][k]
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().flatten()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Mean sample loss of each dataset in the batch, [`DatasetId::ALL`] order.
    pub per_dataset: [f64; 4],
    pub lr: f64,
    pub wall_time_s: f64,
}

pub fn log_header() -> String {
    let cols: Vec<String> = DatasetId::ALL.iter().map(|d| format!("loss_{d}")).collect();
    format!("iteration,loss,{},lr,wall_time_s", cols.join(","))
}

impl TrainLogRecord {
    /// CSV row. Without wall time the row is a pure function of the
    /// configuration.
    pub fn to_csv_row(&self, with_wall_time: bool) -> String {
        let per: Vec<String> = self.per_dataset.iter().map(|v| v.to_string()).collect();
        let wall = if with_wall_time { format!("{:.3}", self.wall_time_s) } else { String::new() };
        format!("{},{},{},{},{}", self.iteration, self.loss, per.join(","), self.lr, wall)
    }
}

pub fn log_to_csv(records: &[TrainLogRecord], with_wall_time: bool) -> String {
    let mut s = log_header();
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv_row(with_wall_time));
        s.push('\n');
    }
    s
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        for g in grads.iter_mut() {
            g.scale(max_norm / norm);
        }
    }
    norm
}

pub struct Trainer {
    pub config: TrainConfig,
    pub table: ProtocolTable,
    pub net: Network,
    pub weights: WeightTable,
    pub awing: AWingParams,
    optimizer: Adam,
    schedule: LrSchedule,
    sampler: MixedBatchSampler,
    rng: ChaCha8Rng,
    pool: DataPool,
    iteration: usize,
    log: Vec<TrainLogRecord>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, table: ProtocolTable, pool: DataPool) -> Result<Self, TrainError> {
        config.validate()?;
        let mut net_cfg = config.net.clone();
        net_cfg.seed = config.seed;
        net_cfg.num_outputs = table.num_unified();
        let net = Network::new(net_cfg)?;
        let weights = WeightTable::build(&table, Beta::new(config.beta)?);
        let mut optimizer = Adam::new(net.params().values().iter().map(Tensor::shape));
        optimizer.weight_decay = config.weight_decay;
        let schedule = LrSchedule { initial: config.lr, factor: config.lr_decay, milestones: config.milestone_iterations() };
        let sampler = MixedBatchSampler::new(pool.sizes(), config.per_dataset, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        Ok(Trainer {
            config,
            table,
            net,
            weights,
            awing: AWingParams::default(),
            optimizer,
            schedule,
            sampler,
            rng,
            pool,
            iteration: 0,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Synthetic data when no data root is configured.
    pub fn from_config(config: TrainConfig) -> Result<Self, TrainError> {
        let table = match &config.protocol {
            Some(p) => ProtocolTable::load(&std::fs::read_to_string(p)?)?,
            None => ProtocolTable::default_table(),
        };
        let pool = match &config.data_root {
            Some(root) => DataPool::load(root, config.net.image_size)?,
            None => DataPool::synthetic(&table, config.synth_per_dataset, config.net.image_size, config.seed)?,
        };
        Trainer::new(config, table, pool)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[TrainLogRecord] {
        &self.log
    }

    pub fn pool(&self) -> &DataPool {
        &self.pool
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Network inputs and loss targets for a list of samples.
    pub fn prepare(&self, samples: &[&Sample]) -> Result<(Tensor, Tensor, Vec<HeatmapStack>), TrainError> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let x = self.net.images_to_tensor(&images)?;
        let hf = self.net.high_frequency(&x)?;
        let size = self.config.net.image_size;
        let targets = samples
            .iter()
            .map(|s| encode(&s.landmarks, &self.table, (size, size), self.config.stride, self.config.kernel_sigma))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((x, hf, targets))
    }

    /// One optimization step on the next mixed batch.
    pub fn step(&mut self) -> Result<TrainLogRecord, TrainError> {
        let batch = self.sampler.next_batch();
        let mut samples = Vec::with_capacity(batch.len());
        for &(ds, k) in &batch.items {
            let s = self.pool.get(ds, k);
            samples.push(if self.config.augment { augment(s, &mut self.rng, &self.table)? } else { s.clone() });
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let (x, hf, targets) = self.prepare(&refs)?;
        let out = self.net.forward(&x, &hf, Mode::Train)?;
        let preds = output_to_stacks(&out, self.config.stride);
        let (breakdown, grads) = fmb_batch_loss_with_grad(&targets, &preds, &self.table, &self.weights, &self.awing, true)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: self.iteration, value: breakdown.total });
        }
        let grad_out = stacks_to_tensor(&grads.expect("gradient requested"))?;
        let mut grads = self.net.backward(&grad_out)?;
        clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.schedule.lr_at(self.iteration);
        self.optimizer.step(self.net.params_mut().values_mut(), &grads, lr)?;

        let comp = batch.composition();
        let record = TrainLogRecord {
            iteration: self.iteration,
            loss: breakdown.total,
            per_dataset: per_dataset_means(&breakdown, comp),
            lr,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Run until the configured iteration count; `each` sees every record.
    pub fn run(&mut self, mut each: impl FnMut(&TrainLogRecord)) -> Result<(), TrainError> {
        while self.iteration < self.config.iterations {
            let r = self.step()?;
            each(&r);
        }
        Ok(())
    }

    /// Batch loss of `samples` without augmentation or a parameter update.
    /// Uses batch statistics for normalization and leaves the running
    /// statistics untouched, so it is comparable across training.
    pub fn evaluate_loss(&mut self, samples: &[&Sample]) -> Result<LossBreakdown, TrainError> {
        let (x, hf, targets) = self.prepare(samples)?;
        let saved = self.net.buffers().to_vec();
        let out = self.net.forward(&x, &hf, Mode::Train);
        self.net.buffers_mut().clone_from_slice(&saved);
        let preds = output_to_stacks(&out?, self.config.stride);
        Ok(fmb_batch_loss_with_grad(&targets, &preds, &self.table, &self.weights, &self.awing, false)?.0)
    }

    /// Loss over the whole data pool as in [`Trainer::evaluate_loss`].
    pub fn pool_loss(&mut self) -> Result<f64, TrainError> {
        let all: Vec<Sample> = self.pool.all().cloned().collect();
        let refs: Vec<&Sample> = all.iter().collect();
        Ok(self.evaluate_loss(&refs)?.total)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.net.state())?;
        Ok(buf)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn save_optimizer(&self, path: &Path) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        self.optimizer.write_state(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

fn per_dataset_means(b: &LossBreakdown, composition: [usize; 4]) -> [f64; 4] {
    DatasetId::ALL.map(|ds| {
        let n = composition[ds.index()];
        if n == 0 {
            0.0
        } else {
            b.per_dataset.get(&ds).copied().unwrap_or(0.0) / n as f64
        }
    })
}

/// Landmarks predicted by `net` in inference mode, in each sample's own
/// dataset indexing.
pub fn predict(net: &mut Network, samples: &[&Sample], stride: usize, table: &ProtocolTable) -> Result<Vec<LandmarkSet>, TrainError> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = net.images_to_tensor(&images)?;
    let hf = net.high_frequency(&x)?;
    let out = net.forward(&x, &hf, Mode::Eval)?;
    let mut stacks = output_to_stacks(&out, stride);
    samples
        .iter()
        .zip(stacks.iter_mut())
        .map(|(s, stack)| {
            stack.present.fill(true);
            Ok(decode(stack)?.to_dataset(table, s.dataset())?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig { iterations: 6, synth_per_dataset: 3, augment: true, ..TrainConfig::default() };
        c.net.image_size = 32;
        c.net.widths = [4, 8, 8, 8];
        c.net.heads = [1, 1, 1, 1];
        c.net.decoder_width = 8;
        c.net.set_prompt_width(4);
        c
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = |seed| {
            let mut c = tiny();
            c.seed = seed;
            let mut t = Trainer::from_config(c).unwrap();
            t.run(|_| {}).unwrap();
            (t.checkpoint_bytes().unwrap(), log_to_csv(t.log(), false))
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_ne!(a.0, run(4).0);
    }

    #[test]
    fn log_rows() {
        let mut t = Trainer::from_config(tiny()).unwrap();
        t.run(|_| {}).unwrap();
        let csv = log_to_csv(t.log(), true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,loss,loss_AFLW,loss_WFLW,loss_COFW,loss_300W,lr,wall_time_s");
        assert_eq!(lines.len(), 7);
        for (k, r) in t.log().iter().enumerate() {
            assert_eq!(r.iteration, k);
            assert!(r.loss.is_finite() && r.loss > 0.0);
            let mean: f64 = r.per_dataset.iter().sum::<f64>() / 4.0;
            assert!((mean - r.loss).abs() < 1e-12 * r.loss.max(1.0));
        }
    }

    #[test]
    fn schedule_uses_milestone_fractions() {
        let mut c = tiny();
        c.iterations = 10;
        let t = Trainer::from_config(c).unwrap();
        assert_eq!(t.schedule().milestones, vec![4, 7, 9]);
        assert_eq!(t.schedule().lr_at(4), 0.8 * 2.5e-4);
    }

    #[test]
    fn clip_scales_to_limit() {
        let mut g = vec![Tensor::filled([1, 1, 1, 1], 3.0), Tensor::filled([1, 1, 1, 1], 4.0)];
        assert_eq!(clip_global_norm(&mut g, 0.0), 5.0);
        assert_eq!(g[0].data(), &[3.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_loss_reports_iteration() {
        let mut t = Trainer::from_config(tiny()).unwrap();
        t.step().unwrap();
        for v in t.net.params_mut().values_mut() {
            v.data_mut().fill(f64::NAN);
        }
        match t.step() {
            Err(TrainError::NonFiniteLoss { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluation_leaves_state() {
        let mut t = Trainer::from_config(tiny()).unwrap();
        let before = t.checkpoint_bytes().unwrap();
        let a = t.pool_loss().unwrap();
        assert_eq!(a, t.pool_loss().unwrap());
        assert_eq!(before, t.checkpoint_bytes().unwrap());
    }
}
