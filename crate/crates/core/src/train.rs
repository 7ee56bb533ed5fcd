//! AdamW training loop over prepared samples.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BatchContext, Detector, Sample};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = (b1 * *mj as f64 + (1.0 - b1) * gj as f64) as f32;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = (b2 * *vj as f64 + (1.0 - b2) * (gj as f64) * (gj as f64)) as f32;
            }
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mj as f64 / c1;
                let vhat = vj as f64 / c2;
                let x = *pj as f64;
                *pj = (x - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * x)) as f32;
            }
        }
    }
}

/// Step size after linear warm-up.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.learning_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Mean Hungarian loss over the batch.
    pub hungarian: f64,
    /// Batch weighted BCE.
    pub patch: f64,
    pub weight: f64,
}

pub struct BatchGradients {
    pub grads: Vec<Tensor<f32>>,
    pub log: StepLog,
}

/// Loss and summed gradients of one batch. Per-image gradients are reduced
/// in batch order, so the result does not depend on the thread count.
pub fn batch_gradients(
    model: &Detector,
    store: &ParamStore<f32>,
    batch: &[&Sample<f32>],
    cfg: &TrainConfig,
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchGradients> {
    let ctx = BatchContext::new(batch, cfg.patch_loss_weight)?;
    let one = |s: &Sample<f32>| -> Result<(Vec<Tensor<f32>>, f64, f64)> {
        let g = Graph::new();
        let p = store.bind(&g);
        let (loss, _) = model.sample_loss(&g, &p, s, &ctx, &cfg.loss)?;
        let mut grads = g.backward(loss.total)?;
        let per_param = p
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((per_param, loss.hungarian, loss.patch))
    };
    let parts: Vec<Result<_>> = match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(|s| one(s)).collect()),
        None => batch.iter().map(|s| one(s)).collect(),
    };
    let mut total: Option<Vec<Tensor<f32>>> = None;
    let (mut hungarian, mut patch) = (0.0, 0.0);
    for part in parts {
        let (grads, h, p) = part?;
        hungarian += h;
        patch += p;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    Ok(BatchGradients {
        grads: total.expect("batch is not empty"),
        log: StepLog {
            step,
            hungarian: hungarian / ctx.images as f64,
            patch,
            weight: ctx.patch_weight,
        },
    })
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Deterministic batch order: a fresh shuffle per epoch from the run seed.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA7C),
            order: (0..len).collect(),
            cursor: len,
            batch: batch.min(len),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
}

/// Where training writes its artefacts.
pub struct TrainSinks<'a> {
    pub checkpoint: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

pub const LOG_HEADER: &str = "step,l_hungarian,l_patch,w";

/// Runs `cfg.steps` optimiser steps. On a non-finite loss the parameters from
/// before that step are written to the checkpoint path and the step is reported.
pub fn train(
    model: &Detector,
    store: &mut ParamStore<f32>,
    samples: &[Sample<f32>],
    cfg: &TrainConfig,
    seed: u64,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutcome> {
    let mut sampler = BatchSampler::new(samples.len(), cfg.batch_size, seed)?;
    let mut opt = AdamW::new(store, cfg);
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    if let Some(w) = sinks.log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(Path::new("<train log>"), e))?;
    }
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Sample<f32>> = idx.iter().map(|&i| &samples[i]).collect();
        let mut bg = batch_gradients(model, store, &batch, cfg, step, pool.as_ref())?;
        let finite = bg.log.hungarian.is_finite()
            && bg.log.patch.is_finite()
            && bg
                .grads
                .iter()
                .all(|t| t.data().iter().all(|x| x.is_finite()));
        if !finite {
            if let Some(path) = sinks.checkpoint {
                checkpoint::save(store, path)?;
            }
            return Err(Error::NumericAbort { step });
        }
        clip_gradients(&mut bg.grads, cfg.grad_clip);
        opt.step(store, &bg.grads, learning_rate(cfg, step));
        if let Some(w) = sinks.log.as_mut() {
            let l = &bg.log;
            writeln!(w, "{},{},{},{}", l.step, l.hungarian, l.patch, l.weight)
                .map_err(|e| Error::io(Path::new("<train log>"), e))?;
        }
        log::info!(
            "step {step}: l_hungarian {:.4} l_patch {:.4} w {:.3}",
            bg.log.hungarian,
            bg.log.patch,
            bg.log.weight
        );
        logs.push(bg.log);
    }
    if let Some(path) = sinks.checkpoint {
        checkpoint::save(store, path)?;
    }
    Ok(TrainOutcome { logs })
}
