//! Mini-batch training with per-epoch logging, validation and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtg_core::autograd::Graph;
use vtg_core::losses::LossTerms;
use vtg_core::model::Model;
use vtg_core::nn::Ctx;
use vtg_core::params::ParamStore;
use vtg_core::types::GroundingSample;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::evaluate::{evaluate_samples, EvalMode, EvalReport};
use crate::optim::{global_norm, step_lr, AdamW, AdamWConfig};

/// One line of `log.jsonl`. Losses are means over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_map: f64,
    pub model: Model,
    pub store: ParamStore,
    pub out_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn last_val(&self) -> Option<&EvalReport> {
        self.log.iter().rev().find_map(|e| e.val.as_ref())
    }

    pub fn best_val(&self) -> Option<&EvalReport> {
        let best = self.best_epoch?;
        self.log.iter().find(|e| e.epoch == best)?.val.as_ref()
    }
}

/// Where a run writes its artifacts. `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Echo one line per epoch to stderr.
    pub verbose: bool,
    /// Ends training after the first validation report that satisfies it.
    pub stop_when: Option<fn(&EvalReport) -> bool>,
}

fn first_non_finite(terms: &LossTerms<f64>, total: f64) -> Option<&'static str> {
    [
        ("margin", terms.margin),
        ("rank", terms.rank),
        ("mr", terms.mr),
        ("clip", terms.clip),
        ("frame", terms.frame),
        ("total", total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

fn add_terms(acc: &mut LossTerms<f64>, t: &LossTerms<f64>) {
    acc.margin += t.margin;
    acc.rank += t.rank;
    acc.mr += t.mr;
    acc.clip += t.clip;
    acc.frame += t.frame;
}

fn scale_terms(t: &mut LossTerms<f64>, k: f64) {
    t.margin *= k;
    t.rank *= k;
    t.mr *= k;
    t.clip *= k;
    t.frame *= k;
}

/// Trains on `train`, validating on `val` when it is non-empty.
pub fn train(cfg: &RunConfig, train: &[GroundingSample], val: &[GroundingSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| HarnessError::Config("training split is empty".into()))?;
    let model_cfg = cfg.model_config(first.video.dim(), first.text.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = Model::new(model_cfg.clone(), &mut rng)?;
    let t = &cfg.train;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            ..Default::default()
        },
        &store,
    );

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            let cfg_path = dir.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| HarnessError::io(&cfg_path, e))?;
            let log_path = dir.join("log.jsonl");
            let f = File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
            Some((log_path, BufWriter::new(f)))
        }
        None => None,
    };

    let checkpoint = |store: &ParamStore, epoch: usize, val: Option<EvalReport>, path: &Path| {
        Checkpoint {
            run: cfg.clone(),
            model: model_cfg.clone(),
            epoch,
            params: store.clone(),
            val,
        }
        .save(path)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(t.epochs);
    let mut best_epoch = None;
    let mut best_map = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let lr = step_lr(t.lr, epoch, t.lr_decay_epoch, t.lr_decay_factor);
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut total_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<&GroundingSample> = chunk.iter().map(|&i| &train[i]).collect();
            let g = if cfg.model.dropout > 0.0 {
                Graph::training(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64))
            } else {
                Graph::new()
            };
            let loss = model.batch_loss(Ctx::new(&g, &store), &batch, &cfg.loss, &mut rng)?;
            let terms = loss.values(&g);
            let total = g.scalar(loss.total);
            if let Some(component) = first_non_finite(&terms, total) {
                return Err(HarnessError::NonFinite {
                    component,
                    epoch: epoch + 1,
                    step,
                });
            }
            let grads = g.backward(loss.total);
            if !global_norm(&grads).is_finite() {
                return Err(HarnessError::NonFiniteGradient { epoch: epoch + 1, step });
            }
            let info = opt.step(&mut store, &grads, lr);
            add_terms(&mut sums, &terms);
            total_sum += total;
            norm_sum += info.grad_norm;
            batches += 1;
            step += 1;
        }
        let k = 1.0 / batches as f64;
        scale_terms(&mut sums, k);
        let done = epoch + 1;
        let validate = !val.is_empty() && ((t.eval_every > 0 && done % t.eval_every == 0) || done == t.epochs);
        let report = if validate {
            Some(evaluate_samples(&model, &store, val, EvalMode::Standard, t.nms_iou)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: done,
            lr,
            loss: total_sum * k,
            terms: sums,
            grad_norm: norm_sum * k,
            seconds: started.elapsed().as_secs_f64(),
            val: report.clone(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4} lr {:.2e} loss {:.5} (margin {:.4} rank {:.4} mr {:.4} clip {:.4} frame {:.4}){}",
                entry.epoch,
                entry.lr,
                entry.loss,
                sums.margin,
                sums.rank,
                sums.mr,
                sums.clip,
                sums.frame,
                report
                    .as_ref()
                    .map(|r| format!(
                        " val mAP {:.4} R1@0.5 {:.4} HD mAP {:.4}",
                        r.map_avg(),
                        r.mr.as_ref().map_or(0.0, |m| m.r1_at_0_5),
                        r.hd.as_ref().map_or(0.0, |h| h.map)
                    ))
                    .unwrap_or_default()
            );
        }
        if let Some((path, w)) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(|e| HarnessError::format(path, e))?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| HarnessError::io(path, e))?;
        }
        if let Some(r) = &report {
            if r.map_avg() > best_map {
                best_map = r.map_avg();
                best_epoch = Some(done);
                if let Some(dir) = &opts.out_dir {
                    checkpoint(&store, done, report.clone(), &dir.join("best.json"))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
                checkpoint(&store, done, report.clone(), &dir.join(format!("epoch_{done:04}.json")))?;
            }
            if done == t.epochs {
                checkpoint(&store, done, report.clone(), &dir.join("last.json"))?;
            }
        }
        log.push(entry);
        if let (Some(stop), Some(r)) = (opts.stop_when, &report) {
            if stop(r) {
                if let Some(dir) = opts.out_dir.as_ref().filter(|_| done < t.epochs) {
                    checkpoint(&store, done, report.clone(), &dir.join("last.json"))?;
                }
                break;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_map: if best_epoch.is_some() { best_map } else { 0.0 },
        model,
        store,
        out_dir: opts.out_dir.clone(),
    })
}

/// Reads a `log.jsonl` back.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::format(path, e)))
        .collect()
}
