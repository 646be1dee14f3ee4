//! The training loop: Adam with step decay, periodic step-size retuning and
//! per-epoch metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use mondeq::checkpoint::save_model;
use mondeq::model::loss_softmax_ce;
use mondeq::solvers::tune_alpha;
use mondeq::{MonDEQModel, MonDeqError, SolverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::config::TrainConfig;
use crate::data::{augment_pad_crop_flip, epoch_batches, prefetch, Dataset, Normalization, Splits};
use crate::error::{Result, TrainError};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,mean_fwd_iters,mean_bwd_iters,alpha";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_fwd_iters: f64,
    pub mean_bwd_iters: f64,
    pub alpha: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.3},{:.3},{}",
            self.epoch, self.split, self.loss, self.accuracy, self.mean_fwd_iters, self.mean_bwd_iters, self.alpha
        )
    }
}

/// Loss, accuracy and solver effort over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_fwd_iters: f64,
    /// Batches whose forward solve stopped at `max_iter`.
    pub unconverged_batches: usize,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Evaluates with frozen parameters, batches in parallel. A batch that does
/// not converge still contributes its last iterate.
pub fn evaluate(model: &MonDEQModel, data: &Dataset, cfg: &SolverConfig, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty dataset".into()));
    }
    let prep = model.prepare_for(cfg)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let run = |chunk: &&[usize]| -> Result<(f64, usize, usize, bool)> {
        let (x, y) = data.gather(chunk);
        let state = model.solve_equilibrium(&prep, &x, cfg)?;
        let logits = model.head(&state.z);
        let (loss, _) = loss_softmax_ce(&logits, &y, model.classes())?;
        Ok((
            loss * y.len() as f64,
            count_correct(&logits, &y, model.classes()),
            state.stats.iterations,
            state.stats.converged,
        ))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = chunks.iter().map(run).collect::<Result<_>>()?;
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: parts.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: parts.iter().map(|p| p.1).sum::<usize>() as f64 / n,
        mean_fwd_iters: parts.iter().map(|p| p.2 as f64).sum::<f64>() / parts.len() as f64,
        unconverged_batches: parts.iter().filter(|p| !p.3).count(),
    })
}

/// Result of a step-size retune on the probe batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retune {
    pub previous_alpha: f64,
    pub alpha: f64,
    pub previous_iters: usize,
    pub iters: usize,
}

/// Mutable training state: model, optimizer, current α and RNG.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MonDEQModel,
    pub adam: Adam,
    pub alpha: f64,
    rng: ChaCha8Rng,
    probe: Vec<f64>,
}

impl Trainer {
    /// Initializes the model from `cfg.seed`; the first `probe_size` training
    /// examples become the fixed α-tuning probe batch.
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let spec = cfg.model_spec();
        if train.channels != spec.input.channels || train.side != spec.input.side {
            return Err(TrainError::Config(format!(
                "preset {} expects {}x{}x{} inputs, dataset has {}x{}x{}",
                cfg.preset,
                spec.input.channels,
                spec.input.side,
                spec.input.side,
                train.channels,
                train.side,
                train.side
            )));
        }
        let model = MonDEQModel::new(&spec, &mut rng)?;
        let adam = Adam::new(&model, AdamConfig::default());
        let probe_idx: Vec<usize> = (0..cfg.probe_size.min(train.len())).collect();
        let (probe, _) = train.gather(&probe_idx);
        Ok(Self {
            alpha: cfg.alpha,
            cfg,
            model,
            adam,
            rng,
            probe,
        })
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig::new(self.cfg.method, self.alpha)
            .with_epsilon(self.cfg.epsilon_train)
            .with_max_iter(self.cfg.max_iter)
    }

    fn probe_iterations(&self, alpha: f64) -> mondeq::Result<mondeq::SolveStats> {
        let cfg = self.solver().with_alpha(alpha);
        let prep = self.model.prepare_for(&cfg)?;
        Ok(self.model.solve_equilibrium(&prep, &self.probe, &cfg)?.stats)
    }

    /// Picks the candidate (or the current α) with the fewest forward
    /// iterations on the probe batch.
    pub fn retune_alpha(&mut self) -> Result<Retune> {
        let before = self.probe_iterations(self.alpha)?;
        let mut candidates = self.cfg.alpha_candidates.clone();
        if !candidates.contains(&self.alpha) {
            candidates.push(self.alpha);
        }
        let mut measured = Vec::new();
        let alpha = tune_alpha(&candidates, |a| {
            let s = self.probe_iterations(a)?;
            measured.push((a, s.iterations, s.converged));
            Ok(s)
        })?;
        let iters = measured
            .iter()
            .find(|m| m.0 == alpha)
            .map_or(before.iterations, |m| m.1);
        let out = Retune {
            previous_alpha: self.alpha,
            alpha,
            previous_iters: before.iterations,
            iters,
        };
        info!("alpha retune: {} ({} iters) -> {} ({} iters)", out.previous_alpha, out.previous_iters, alpha, iters);
        self.alpha = alpha;
        Ok(out)
    }

    /// Forward, backward and one Adam step. On forward or backward
    /// non-convergence α is halved and the batch retried once.
    fn step(&mut self, x: &[f64], y: &[usize], lr: f64) -> Result<(f64, usize, usize, usize)> {
        let mut attempt = 0;
        loop {
            let cfg = self.solver();
            let prep = self.model.prepare_for(&cfg)?;
            match self.model.loss_and_grad(&prep, x, y, &cfg) {
                Ok((loss, grads, out)) => {
                    let correct = count_correct(&out.logits, y, self.model.classes());
                    match self.adam.step(&mut self.model, &grads, lr) {
                        Ok(()) => {}
                        Err(TrainError::NonFiniteGradient(name)) => {
                            warn!("non-finite gradient for {name}; batch skipped");
                        }
                        Err(e) => return Err(e),
                    }
                    return Ok((loss, correct, out.state.stats.iterations, grads.backward_stats.iterations));
                }
                Err(MonDeqError::NotConverged { phase, stats }) if attempt == 0 => {
                    warn!(
                        "{phase} solve stalled at alpha={} after {} iterations (residual {:.3e}); retrying with alpha={}",
                        self.alpha,
                        stats.iterations,
                        stats.last_residual(),
                        self.alpha / 2.0
                    );
                    self.alpha /= 2.0;
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// One pass over `data`. Returns the training record; if a batch fails
    /// twice the epoch ends early and the record covers the batches done.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
        let lr = self.cfg.lr_at(epoch);
        let batches = epoch_batches(data.len(), self.cfg.batch_size, &mut self.rng);
        let (mut loss, mut correct, mut seen, mut fwd, mut bwd, mut steps) = (0.0, 0, 0, 0, 0, 0);
        let augment = self.cfg.augment;
        let (channels, side) = (data.channels, data.side);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        prefetch(data, batches, 2, |(mut x, y)| {
            if augment {
                augment_pad_crop_flip(&mut x, channels, side, 4, &mut aug_rng);
            }
            match self.step(&x, &y, lr) {
                Ok((l, c, f, b)) => {
                    loss += l * y.len() as f64;
                    correct += c;
                    seen += y.len();
                    fwd += f;
                    bwd += b;
                    steps += 1;
                    Ok(true)
                }
                Err(TrainError::Model(e @ MonDeqError::NotConverged { .. })) => {
                    warn!("epoch {epoch} aborted after {steps} batches: {e}");
                    Ok(false)
                }
                Err(e) => Err(e),
            }
        })?;
        let per = |v: usize| if steps == 0 { 0.0 } else { v as f64 / steps as f64 };
        Ok(EpochRecord {
            epoch,
            split: Split::Train,
            loss: if seen == 0 { f64::NAN } else { loss / seen as f64 },
            accuracy: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            mean_fwd_iters: per(fwd),
            mean_bwd_iters: per(bwd),
            alpha: self.alpha,
        })
    }

    pub fn evaluate(&self, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
        let ev = evaluate(&self.model, data, &self.solver(), self.cfg.batch_size)?;
        if ev.unconverged_batches > 0 {
            warn!("{} evaluation batches hit max_iter", ev.unconverged_batches);
        }
        Ok(EpochRecord {
            epoch,
            split: Split::Test,
            loss: ev.loss,
            accuracy: ev.accuracy,
            mean_fwd_iters: ev.mean_fwd_iters,
            mean_bwd_iters: 0.0,
            alpha: self.alpha,
        })
    }
}

/// What a finished run produced.
pub struct TrainOutcome {
    pub model: MonDEQModel,
    pub records: Vec<EpochRecord>,
    pub alpha: f64,
    pub retunes: Vec<Retune>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find(|r| r.split == Split::Test).map(|r| r.accuracy)
    }
}

/// Trains for `cfg.epochs` epochs, logging one train and one test record
/// per epoch (epoch 0 is the untrained model's test record). With
/// `write_outputs` the metrics log and final checkpoint go to `cfg.out_dir`.
pub fn run_training(cfg: &TrainConfig, splits: &Splits, write_outputs: bool) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), &splits.train)?;
    let mut log: Option<BufWriter<File>> = None;
    let (mut ckpt_path, mut metrics_path) = (None, None);
    if write_outputs {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| TrainError::io(&cfg.out_dir, e))?;
        let p = cfg.out_dir.join("metrics.csv");
        let mut w = BufWriter::new(File::create(&p).map_err(|e| TrainError::io(&p, e))?);
        writeln!(w, "{METRICS_HEADER}").map_err(|e| TrainError::io(&p, e))?;
        log = Some(w);
        metrics_path = Some(p);
    }
    let mut records = Vec::new();
    let mut retunes = Vec::new();
    let mut emit = |r: EpochRecord, log: &mut Option<BufWriter<File>>| -> Result<()> {
        info!("{}", r.to_line());
        if let (Some(w), Some(p)) = (log.as_mut(), metrics_path.as_ref()) {
            writeln!(w, "{}", r.to_line())
                .and_then(|_| w.flush())
                .map_err(|e| TrainError::io(p, e))?;
        }
        records.push(r);
        Ok(())
    };

    emit(trainer.evaluate(&splits.test, 0)?, &mut log)?;
    for epoch in 0..cfg.epochs {
        if cfg.alpha_retune_every > 0 && epoch % cfg.alpha_retune_every == 0 {
            retunes.push(trainer.retune_alpha()?);
        }
        let train = trainer.train_epoch(&splits.train, epoch)?;
        emit(
            EpochRecord {
                epoch: epoch + 1,
                ..train
            },
            &mut log,
        )?;
        emit(trainer.evaluate(&splits.test, epoch + 1)?, &mut log)?;
    }
    if write_outputs {
        let p = cfg.out_dir.join("model.ckpt");
        save_checkpoint(&p, &trainer, splits)?;
        ckpt_path = Some(p);
    }
    Ok(TrainOutcome {
        alpha: trainer.alpha,
        model: trainer.model,
        records,
        retunes,
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}

/// Reads the normalization stored in checkpoint metadata.
pub fn normalization_from_metadata(meta: &BTreeMap<String, String>) -> Result<Normalization> {
    let field = |key: &str| -> Result<Vec<f64>> {
        let text = meta
            .get(key)
            .ok_or_else(|| TrainError::Format(format!("checkpoint has no {key}")))?;
        text.split(',')
            .map(|v| v.parse().map_err(|_| TrainError::Format(format!("{key}: bad value {v:?}"))))
            .collect()
    };
    let (mean, std) = (field("norm_mean")?, field("norm_std")?);
    if mean.len() != std.len() {
        return Err(TrainError::Format("norm_mean and norm_std differ in length".into()));
    }
    Ok(Normalization { mean, std })
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn save_checkpoint(path: &Path, trainer: &Trainer, splits: &Splits) -> Result<()> {
    let extra = [
        ("preset", trainer.cfg.preset.to_string()),
        ("method", trainer.cfg.method.to_string()),
        ("alpha", trainer.alpha.to_string()),
        ("epochs", trainer.cfg.epochs.to_string()),
        ("norm_mean", join(&splits.normalization.mean)),
        ("norm_std", join(&splits.normalization.std)),
    ];
    save_model(path, &trainer.model, &extra)?;
    Ok(())
}
