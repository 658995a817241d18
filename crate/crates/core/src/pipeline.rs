//! Training loop, batched multimodal inference and velocity integration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{LossParts, Model, ModelConfig};
use crate::nn::{clip_global_norm, Adam, Graph, ParamId, ParamStore, Tensor};
use crate::preprocess::{normalize, NormStats};
use crate::social_graph::AblationFlags;
use crate::types::{Point, PredictionSet, TrajectorySample, HORIZON};

/// Samples per gradient chunk. Chunks are the unit of parallel work and
/// are summed in a fixed order, so results do not depend on the worker
/// count.
pub const TRAIN_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub k_samples: usize,
    pub kl_warmup_epochs: usize,
    pub grad_clip: f64,
    /// Execution setting only; results do not depend on it, so it is not
    /// stored with checkpoints.
    #[serde(skip)]
    pub workers: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_decay: 0.5,
            decay_every: 10,
            epochs: 50,
            batch: 64,
            seed: 0,
            k_samples: 20,
            kl_warmup_epochs: 5,
            grad_clip: 5.0,
            workers: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String| Err(Error::InvalidConfigValue { key: key.into(), value });
        if self.batch < 1 {
            return bad("batch", self.batch.to_string());
        }
        if self.epochs < 1 {
            return bad("epochs", self.epochs.to_string());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", self.lr0.to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", self.lr_decay.to_string());
        }
        if self.decay_every < 1 {
            return bad("decay_every", self.decay_every.to_string());
        }
        if self.k_samples < 1 {
            return bad("k_samples", self.k_samples.to_string());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", self.grad_clip.to_string());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("dropout", self.model.dropout.to_string());
        }
        if self.model.max_neighbors < 1 {
            return bad("max_neighbors", self.model.max_neighbors.to_string());
        }
        Ok(())
    }

    /// Step decay; `epoch` counts from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    /// Linear KL warmup from 0 at epoch 0 to 1 at `kl_warmup_epochs`.
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Mean per-sample objective as optimized (KL weighted).
    pub loss: f64,
    pub waypoint_nll: f64,
    pub waypoint_kl: f64,
    pub goal_nll: f64,
    pub goal_kl: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
}

/// `p_t = start + dt * sum_{tau <= t} v_tau`.
pub fn integrate_positions(start: Point, velocities: &[Point], dt: f64) -> Result<Vec<Point>> {
    if velocities.len() != HORIZON {
        return Err(Error::LengthMismatch { expected: HORIZON, got: velocities.len() });
    }
    let mut p = start;
    Ok(velocities
        .iter()
        .map(|v| {
            p = [p[0] + v[0] * dt, p[1] + v[1] * dt];
            p
        })
        .collect())
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len()).step_by(workers).map(|i| (i, f(i, &items[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Independent RNG seed for stream `(a, b)` under `seed`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn chunk_gradients(
    model: &Model,
    store: &ParamStore,
    chunk: &[&TrajectorySample],
    kl_weight: f64,
    scale: f64,
    seed: u64,
) -> Result<(f64, LossParts, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, parts) = model.loss(&mut g, store, chunk, kl_weight, scale, &mut rng)?;
    let value = g.value(loss).item();
    if !value.is_finite() || !parts.is_finite() {
        return Ok((value, parts, Vec::new()));
    }
    let grads = g.backward(loss);
    Ok((value, parts, g.param_grads(&grads)))
}

/// Trains from raw (unnormalized) samples. Normalization statistics are
/// fitted on `dataset`.
pub fn train(dataset: &[TrajectorySample], cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochLog>)> {
    train_with(dataset, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    dataset: &[TrajectorySample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = NormStats::fit(dataset)?;
    let data: Vec<TrajectorySample> = dataset.iter().map(|s| normalize(s, &stats)).collect();
    for s in &data {
        s.validate()?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, &mut init_rng);
    let mut adam = Adam::new(&store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let kl_weight = cfg.kl_weight_at(epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut epoch_parts = LossParts::default();
        let mut objective = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let samples: Vec<&TrajectorySample> = batch.iter().map(|&i| &data[i]).collect();
            let chunks: Vec<&[&TrajectorySample]> = samples.chunks(TRAIN_CHUNK).collect();
            let scale = 1.0 / samples.len() as f64;
            let key = (epoch as u64) << 32 | bi as u64;
            let results = parallel_map(&chunks, cfg.workers, |ci, chunk| {
                chunk_gradients(&model, &store, chunk, kl_weight, scale, stream_seed(cfg.seed, key, ci as u64 + 2))
            });
            let mut grads: Vec<(ParamId, Tensor)> = Vec::new();
            let mut batch_parts = LossParts::default();
            let mut batch_value = 0.0;
            for r in results {
                let (value, parts, g) = r?;
                batch_value += value;
                batch_parts.add(&parts);
                for (id, t) in g {
                    match grads.iter_mut().find(|(i, _)| *i == id) {
                        Some((_, acc)) => acc.add_assign(&t),
                        None => grads.push((id, t)),
                    }
                }
            }
            if !batch_value.is_finite() || !batch_parts.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "loss {batch_value}, waypoint nll {}, waypoint kl {}, goal nll {}, goal kl {}",
                        batch_parts.waypoint_nll, batch_parts.waypoint_kl, batch_parts.goal_nll, batch_parts.goal_kl
                    ),
                });
            }
            grads.sort_by_key(|(id, _)| id.index());
            norm_sum += clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut store, &grads, lr);
            epoch_parts.add(&batch_parts);
            objective += batch_value * samples.len() as f64;
            batches += 1;
        }
        let n = data.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            kl_weight,
            loss: objective / n,
            waypoint_nll: epoch_parts.waypoint_nll / n,
            waypoint_kl: epoch_parts.waypoint_kl / n,
            goal_nll: epoch_parts.goal_nll / n,
            goal_kl: epoch_parts.goal_kl / n,
            grad_norm: norm_sum / batches as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((Checkpoint::new(*cfg, stats, store, model), logs))
}

/// Predicts `k` futures for each sample. Sample `i` draws from its own
/// stream derived from `seed` and `i`, so the result does not depend on
/// `workers`.
pub fn predict_all(
    ckpt: &Checkpoint,
    samples: &[TrajectorySample],
    k: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PredictionSet>> {
    parallel_map(samples, workers, |i, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 7, i as u64));
        ckpt.predict(s, k, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Rows of the ablation table, from the plain CVAE to the full model.
pub const LADDER: [(&str, AblationFlags); 5] = [
    ("none", AblationFlags { rg: false, g: false, n: false, s: false }),
    ("+RG", AblationFlags { rg: true, g: false, n: false, s: false }),
    ("+RG+G", AblationFlags { rg: true, g: true, n: false, s: false }),
    ("+RG+G+N", AblationFlags { rg: true, g: true, n: true, s: false }),
    ("+RG+G+N+S", AblationFlags { rg: true, g: true, n: true, s: true }),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub label: String,
    pub flags: AblationFlags,
    /// `(seed, minADE, minFDE)` per training seed.
    pub runs: Vec<(u64, f64, f64)>,
    pub min_ade: f64,
    pub min_fde: f64,
}

/// Trains every ladder row once per seed on `train_set` and scores it on
/// `eval` with best-of-`base.k_samples`. `progress` receives one line per
/// finished run.
pub fn ablation_ladder(
    train_set: &[TrajectorySample],
    eval: &[TrajectorySample],
    base: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<LadderRow>> {
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(LADDER.len());
    for (label, flags) in LADDER {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = TrainConfig { seed, ..*base };
            cfg.model.flags = flags;
            let (ckpt, _) = train(train_set, &cfg)?;
            let preds = predict_all(&ckpt, eval, cfg.k_samples, stream_seed(seed, 3, 0), cfg.workers)?;
            let report = evaluate(&preds, eval, "eval", label)?;
            progress(&format!("{label}\tseed {seed}\tminADE {:.4}\tminFDE {:.4}", report.min_ade, report.min_fde));
            runs.push((seed, report.min_ade, report.min_fde));
        }
        let n = runs.len() as f64;
        rows.push(LadderRow {
            label: label.to_string(),
            flags,
            min_ade: runs.iter().map(|r| r.1).sum::<f64>() / n,
            min_fde: runs.iter().map(|r| r.2).sum::<f64>() / n,
            runs,
        });
    }
    Ok(rows)
}

/// Tab-separated ladder table with on/off marks per component.
pub fn ladder_table(rows: &[LadderRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut out = String::from("config\tRG\tG\tN\tS\tminADE\tminFDE\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            r.label,
            mark(r.flags.rg),
            mark(r.flags.g),
            mark(r.flags.n),
            mark(r.flags.s),
            r.min_ade,
            r.min_fde
        ));
    }
    out
}
