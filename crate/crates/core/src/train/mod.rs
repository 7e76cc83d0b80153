//! L1 training with Adam, the step-halving schedule and checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_manifest, normalize, read_volume, sample_random_starts, stack_patches, write_manifest, ManifestRecord,
    Patch, Volume,
};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::{hysnet_forward, Model, ModelConfig, ParamStore, PredictorMode};
use crate::parallel::{map_indexed, with_threads};
use crate::rng::{indexed_stream, stream, Stream};
use crate::tensor::{DType, Scalar, Tape, Tensor};

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, l1_loss, l1_value, l1_with_grad, lr_at, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Optimization and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: PredictorMode,
    pub patch: usize,
    /// Grid stride used when scoring whole volumes.
    pub stride: usize,
    pub patches_per_volume: usize,
    pub val_fraction: f64,
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            base_lr: 1e-4,
            halving_period: 10,
            batch_size: 4,
            seed: 0,
            mode: PredictorMode::Hyper,
            patch: 16,
            stride: 8,
            patches_per_volume: 4,
            val_fraction: 0.5,
            strict_deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("halving_period", self.halving_period),
            ("batch_size", self.batch_size),
            ("patch", self.patch),
            ("stride", self.stride),
            ("patches_per_volume", self.patches_per_volume),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("train.base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "train.val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.base_lr, self.halving_period)
    }
}

/// One row of `log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
    /// NaN when the validation set is too small or degenerate.
    pub val_srocc: f64,
    pub val_plcc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_l1,val_srocc,val_plcc";

/// Everything a training run produced besides the files it wrote.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Mean L1 of the first epoch's samples before any update.
    pub initial_train_l1: f64,
    pub best_epoch: Option<usize>,
    pub train_paths: Vec<PathBuf>,
    pub val_paths: Vec<PathBuf>,
    pub final_checkpoint: Checkpoint,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_train_l1(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.train_l1)
    }
}

struct Dataset {
    volumes: Vec<Volume>,
    scores: Vec<f64>,
    paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    volume: usize,
    start: [usize; 3],
}

/// Seeded train/validation split of `n` items: `(train, val)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn epoch_samples(data: &Dataset, train: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Sample>> {
    let mut rng = indexed_stream(cfg.seed, Stream::Shuffle, epoch as u64);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(order.len() * cfg.patches_per_volume);
    for v in order {
        let seed: u64 = rng.random();
        for start in sample_random_starts(data.volumes[v].dims(), cfg.patch, cfg.patches_per_volume, seed)? {
            out.push(Sample { volume: v, start });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn center_patch(v: &Volume, p: usize) -> Result<Patch> {
    let d = v.dims();
    Patch::extract(v, [(d[0].saturating_sub(p)) / 2, (d[1].saturating_sub(p)) / 2, (d[2].saturating_sub(p)) / 2], p)
}

/// Loss and parameter gradients for one sample on its own tape.
fn sample_grad<T: Scalar>(model: &Model<T>, patch: &Patch, target: f64) -> Result<(f64, ParamStore<T>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let x = tape.constant(stack_patches::<T>(&[patch])?)?;
    let out = hysnet_forward(x, &bound, &model.config, model.mode)?;
    let t = tape.constant(Tensor::from_vec(&[1], vec![T::from_f64_lossy(target)])?)?;
    let loss = l1_loss(out.scores, t)?;
    loss.backward()?;
    Ok((loss.value().item().as_f64(), bound.grads()))
}

fn predict_one<T: Scalar>(model: &Model<T>, patch: &Patch) -> Result<f64> {
    Ok(model.predict(&stack_patches::<T>(&[patch])?)?[0])
}

fn with_step<T>(r: Result<T>, epoch: usize, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    })
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "{LOG_HEADER}").map_err(io)?;
    for l in log {
        writeln!(f, "{},{},{},{},{}", l.epoch, l.lr, l.train_l1, l.val_srocc, l.val_plcc).map_err(io)?;
    }
    f.flush().map_err(io)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Trains a model on the volumes listed in `manifest`, writing
/// `final.hckp`, `best.hckp`, `log.csv` and the split manifests to `out`.
pub fn train(manifest: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.feature_extent(cfg.patch)?;
    let threads = cfg.strict_deterministic.then_some(1);
    with_threads(threads, || match model_cfg.dtype {
        DType::F32 => train_typed::<f32>(manifest, model_cfg, cfg, out),
        DType::F64 => train_typed::<f64>(manifest, model_cfg, cfg, out),
    })?
}

fn train_typed<T: Scalar>(manifest: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainReport> {
    let started = Instant::now();
    let m = load_manifest(manifest)?;
    if m.is_empty() {
        return Err(Error::Data(format!("{} lists no volumes", manifest.display())));
    }
    let volumes = map_indexed(m.len(), |i| normalize(&read_volume(&m.records[i].path)?))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for (v, r) in volumes.iter().zip(&m.records) {
        if v.dims().iter().any(|&l| l < cfg.patch) {
            return Err(Error::Config(format!(
                "{}: extents {:?} are smaller than the patch extent {}",
                r.path.display(),
                v.dims(),
                cfg.patch
            )));
        }
    }
    let data = Dataset {
        volumes,
        scores: m.scores(),
        paths: m.records.iter().map(|r| absolute(&r.path)).collect(),
    };
    let (train_idx, val_idx) = split_indices(m.len(), cfg.val_fraction, cfg.seed);

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let split_records = |idx: &[usize]| -> Vec<ManifestRecord> {
        idx.iter()
            .map(|&i| ManifestRecord { path: data.paths[i].clone(), score: data.scores[i] })
            .collect()
    };
    write_manifest(&out.join("train_manifest.csv"), &split_records(&train_idx))?;
    write_manifest(&out.join("val_manifest.csv"), &split_records(&val_idx))?;

    let mut model = Model::<T>::init(model_cfg.clone(), cfg.mode)?;
    let mut optim = OptimState::new(&model.params);
    let val_patches = val_idx
        .iter()
        .map(|&i| center_patch(&data.volumes[i], cfg.patch))
        .collect::<Result<Vec<_>>>()?;
    let val_scores: Vec<f64> = val_idx.iter().map(|&i| data.scores[i]).collect();

    let checkpoint = |model: &Model<T>, optim: &OptimState<T>, epoch: usize| Checkpoint {
        model: model.cast(),
        train: cfg.clone(),
        epoch,
        optim: Some(OptimState {
            m: optim.m.cast(),
            v: optim.v.cast(),
            t: optim.t,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
        }),
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut initial_train_l1 = f64::NAN;
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let samples = epoch_samples(&data, &train_idx, cfg, epoch)?;
        let patches = map_indexed(samples.len(), |i| {
            let s = samples[i];
            Patch::extract(&data.volumes[s.volume], s.start, cfg.patch)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        if epoch == 0 {
            let preds = map_indexed(patches.len(), |i| predict_one(&model, &patches[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = samples.iter().map(|s| data.scores[s.volume]).collect();
            initial_train_l1 = l1_value(&preds, &targets);
        }
        let mut loss_sum = 0.0;
        for (batch_samples, batch_patches) in samples.chunks(cfg.batch_size).zip(patches.chunks(cfg.batch_size)) {
            let results = map_indexed(batch_samples.len(), |i| {
                sample_grad(&model, &batch_patches[i], data.scores[batch_samples[i].volume])
            });
            let mut grads = model.params.zeros_like();
            for r in results {
                let (loss, g) = with_step(r, epoch, step)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("epoch {epoch}, step {step}: loss is {loss}")));
                }
                loss_sum += loss;
                grads.accumulate(&g);
            }
            let inv = T::from_f64_lossy(1.0 / batch_samples.len() as f64);
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }
            with_step(adam_step(&mut model.params, &grads, &mut optim, lr), epoch, step)?;
            step += 1;
        }
        let train_l1 = loss_sum / samples.len() as f64;

        let (mut val_srocc, mut val_plcc) = (f64::NAN, f64::NAN);
        if val_patches.len() >= 3 {
            let preds = map_indexed(val_patches.len(), |i| predict_one(&model, &val_patches[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            if let Ok(r) = MetricReport::compute(&preds, &val_scores) {
                (val_srocc, val_plcc) = (r.srocc, r.plcc);
            }
        }
        log.push(EpochLog { epoch, lr, train_l1, val_srocc, val_plcc });
        write_log(&out.join("log.csv"), &log)?;
        if val_srocc.is_finite() && best.is_none_or(|(_, s)| val_srocc > s) {
            best = Some((epoch, val_srocc));
            checkpoint(&model, &optim, epoch).save(&out.join("best.hckp"))?;
        }
    }

    let last_epoch = cfg.epochs - 1;
    let final_checkpoint = checkpoint(&model, &optim, last_epoch);
    final_checkpoint.save(&out.join("final.hckp"))?;
    if best.is_none() {
        final_checkpoint.save(&out.join("best.hckp"))?;
    }
    Ok(TrainReport {
        log,
        initial_train_l1,
        best_epoch: best.map(|(e, _)| e),
        train_paths: train_idx.iter().map(|&i| data.paths[i].clone()).collect(),
        val_paths: val_idx.iter().map(|&i| data.paths[i].clone()).collect(),
        final_checkpoint,
        seconds: started.elapsed().as_secs_f64(),
    })
}
