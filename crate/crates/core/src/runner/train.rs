//! Training loop.
//!
//! Batch composition and augmentation are pure functions of `(seed, iteration)`:
//! sample `k = iteration · B + j` is position `k mod N` of the permutation for
//! epoch `k div N`. A resumed run therefore sees exactly the batches an
//! uninterrupted run would.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{augment, generate_patch_labels, AugmentFlags, BiTemporalSample, PatchLabelGrid};
use crate::error::{Error, Result};
use crate::model::{batch_images, MsFormer};
use crate::nn::ParamStore;
use crate::optim::{poly_lr, AdamState};
use crate::runner::checkpoint::Checkpoint;
use crate::supervision::{supervision_losses, LossBundle, Targets};

const STREAM_PERMUTATION: u64 = 1 << 56;
const STREAM_AUGMENT: u64 = 2 << 56;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub losses: LossBundle,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: MsFormer,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed steps.
    pub iteration: u64,
    samples: Vec<BiTemporalSample>,
    labels: Vec<PatchLabelGrid>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<BiTemporalSample>) -> Result<Self> {
        config.validate()?;
        let (model, store) = MsFormer::new(&config.model, &config.ablation, config.seed)?;
        let adam = AdamState::new(&store);
        let labels = derive_labels(&samples, &config)?;
        Ok(Self { config, model, store, adam, iteration: 0, samples, labels })
    }

    /// Continues from a checkpoint; `config` must agree on every architecture field.
    pub fn resume(config: TrainConfig, checkpoint: &Checkpoint<f32>, samples: Vec<BiTemporalSample>) -> Result<Self> {
        checkpoint.check_compatible(&config)?;
        let mut t = Self::new(config, samples)?;
        checkpoint.restore_params(&mut t.store)?;
        t.adam = checkpoint.adam.clone();
        t.iteration = checkpoint.header.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint::capture(&self.config, self.iteration, &self.store, &self.adam)
    }

    /// Sample indices of the batch for `iteration`.
    pub fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        let n = self.samples.len() as u64;
        let b = self.config.optim.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|j| {
                let k = iteration * b + j;
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.samples.len()).collect();
                    perm.shuffle(&mut stream_rng(self.config.seed, STREAM_PERMUTATION | epoch));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[(k % n) as usize]
            })
            .collect()
    }

    /// Runs one optimisation step and returns its losses.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let it = self.iteration;
        let lr = poly_lr(it, &cfg.optim)?;
        let indices = self.batch_indices(it);
        let mut aug_rng = stream_rng(cfg.seed, STREAM_AUGMENT | it);
        let batch: Vec<(BiTemporalSample, PatchLabelGrid)> = indices
            .iter()
            .map(|&i| {
                let flags = if cfg.data.augment { AugmentFlags::sample(&mut aug_rng) } else { AugmentFlags::default() };
                augment(&self.samples[i], &self.labels[i], flags)
            })
            .collect();
        let samples: Vec<_> = batch.iter().map(|(s, _)| s).collect();
        let grids: Vec<_> = batch.iter().map(|(_, l)| &l.grid).collect();
        let (a, b) = batch_images::<f32>(&samples, cfg.data.mean, cfg.data.std)?;
        let targets = Targets::from_grids(&grids, cfg.patch_h, cfg.patch_w)?;

        let mut g = Graph::new();
        let x1 = g.constant(a);
        let x2 = g.constant(b);
        let out = self.model.forward(&mut g, &self.store, x1, x2, cfg.patch_h, cfg.patch_w, true)?;
        let loss = supervision_losses(
            &mut g,
            out.change_map,
            &out.aux,
            &targets,
            cfg.patch_h,
            cfg.patch_w,
            &cfg.loss,
            &cfg.ablation,
        )?;
        let losses = loss.bundle(&g, &cfg.loss);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it}: total {} pcl {} upcl {} sp {:?} direct {}",
                losses.total, losses.l_pcl, losses.l_upcl, losses.l_sp, losses.l_direct
            )));
        }
        let grads = g.backward(loss.total)?;
        self.adam.step(&mut self.store, &g, &grads, lr, &cfg.optim)?;
        for update in g.take_buffer_updates() {
            self.store.get_mut(update.id).value = update.value;
        }
        self.iteration += 1;
        Ok(StepLog { iteration: it, lr, losses })
    }

    /// Trains up to `until` completed steps (at most `max_iteration`), writing
    /// periodic checkpoints into `out_dir` when given.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let until = until.min(self.config.optim.max_iteration);
        let mut logs = Vec::new();
        while self.iteration < until {
            let log = self.step()?;
            if self.config.log_every > 0 && (log.iteration % self.config.log_every == 0 || self.iteration == until) {
                info!(
                    "iter {:>6} lr {:.3e} total {:.4} pcl {:.4} upcl {:.4} sp {:?}",
                    log.iteration, log.lr, log.losses.total, log.losses.l_pcl, log.losses.l_upcl, log.losses.l_sp
                );
            }
            logs.push(log);
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, self.iteration))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&final_checkpoint_path(dir))?;
        }
        Ok(logs)
    }

    pub fn samples(&self) -> &[BiTemporalSample] {
        &self.samples
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.msf"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.msf")
}

fn derive_labels(samples: &[BiTemporalSample], cfg: &TrainConfig) -> Result<Vec<PatchLabelGrid>> {
    if samples.is_empty() {
        return Err(Error::Dataset(vec!["training split is empty".into()]));
    }
    let mut problems = Vec::new();
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let result = match &s.pixel_mask {
            Some(mask) => generate_patch_labels(mask, cfg.patch_h, cfg.patch_w),
            None => Err(Error::InvalidValue("no change mask".into())),
        };
        match result {
            Ok(l) => labels.push(l),
            Err(e) => problems.push(format!("{}: {e}", s.id)),
        }
    }
    if problems.is_empty() {
        Ok(labels)
    } else {
        Err(Error::Dataset(problems))
    }
}
