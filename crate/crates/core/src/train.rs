//! Alternating generator/discriminator optimization, the epoch loop,
//! checkpointing, logging, and size-transfer fine-tuning.
//!
//! Per batch: (1) the discriminator scores real targets and detached
//! generator outputs under the hinge objective and takes one Adam step;
//! (2) the generator takes one Adam step on the combined loss, with the
//! adversarial term flowing through the (already updated) discriminator.
//! Spectral estimates use one power iteration per training step; the same
//! estimates serve every pass of that step.

use crate::adam::{adam_step, AdamParams, AdamState, GradMap};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::config::TrainConfig;
use crate::data::{batches, DataError, Dataset, TexturePair};
use crate::graph::{Graph, TensorId};
use crate::losses::{
    build_discriminator, discriminate_on_graph, gan_g_on_graph, hinge_d_on_graph, perceptual_on_graph, spectral_sigmas,
    style_on_graph, Discriminator, FrozenExtractor, LossReport, SpectralStates,
};
use crate::model::{build_model, forward, forward_on_graph, leaf_params, ForwardOptions, ModelError, ModelWeights};
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("NaN/Inf in {tensor} at step {step}; aborting")]
    NanAbort { tensor: String, step: u64 },
    #[error("adversarial loss needs batches of >= 2, got {0}")]
    BatchTooSmallForGan(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub losses: LossReport<f32>,
    pub d_loss: f32,
}

/// Live training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub gen: ModelWeights<f32>,
    pub disc: Discriminator<f32>,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
    pub spectral: SpectralStates<f32>,
    pub fx: FrozenExtractor<f32>,
    /// Completed training steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        let gen = build_model::<f32>(config.variant, config.input_hw, config.seed_model)?;
        let disc = build_discriminator::<f32>(config.seed_model ^ 0xD15C);
        // Generator and discriminator parameter names never overlap.
        debug_assert!(gen.params.keys().all(|k| !disc.params.contains_key(k)));
        let spectral = SpectralStates::new(&disc, config.seed_model ^ 0x5EED);
        let fx = FrozenExtractor::new(config.seed_extractor);
        Ok(Trainer { config, gen, disc, opt_g: AdamState::new(), opt_d: AdamState::new(), spectral, fx, step: 0 })
    }

    /// Restore from a checkpoint; `config` may differ from the stored one
    /// (fine-tuning changes size and epoch count, never tensor shapes).
    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        let fx = FrozenExtractor::new(config.seed_extractor);
        Ok(Trainer {
            config,
            gen: ckpt.gen,
            disc: ckpt.disc,
            opt_g: ckpt.opt_g,
            opt_d: ckpt.opt_d,
            spectral: ckpt.spectral,
            fx,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            gen: self.gen.clone(),
            disc: self.disc.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            spectral: self.spectral.clone(),
        }
    }

    fn adam(&self) -> AdamParams {
        AdamParams { lr: self.config.lr, ..AdamParams::default() }
    }

    fn nan_abort(&self, e: impl Into<TrainError>) -> TrainError {
        match e.into() {
            TrainError::Tensor(TensorError::NonFinite { op, node, label }) => TrainError::NanAbort {
                tensor: format!("{op} (node {node}{})", if label.is_empty() { String::new() } else { format!(" {label}") }),
                step: self.step + 1,
            },
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op, node, label })) => TrainError::NanAbort {
                tensor: format!("{op} (node {node}{})", if label.is_empty() { String::new() } else { format!(" {label}") }),
                step: self.step + 1,
            },
            TrainError::Tensor(TensorError::NanGradient(name)) => {
                TrainError::NanAbort { tensor: format!("gradient of {name}"), step: self.step + 1 }
            }
            other => other,
        }
    }

    /// One optimization step over a batch of pairs.
    pub fn train_step(&mut self, batch: &[TexturePair]) -> Result<StepReport, TrainError> {
        let use_gan = self.config.use_gan;
        if use_gan && batch.len() < 2 {
            return Err(TrainError::BatchTooSmallForGan(batch.len()));
        }
        let hw = self.config.input_hw;
        for pair in batch {
            if pair.target.shape() != [3, hw, hw] {
                return Err(TrainError::Model(ModelError::BadInput(format!(
                    "pair shape {:?} does not match configured size {hw}",
                    pair.target.shape()
                ))));
            }
        }

        // Spectral estimates for this step: one power iteration, shared by
        // the discriminator and generator passes.
        let sigmas = if use_gan {
            Some(spectral_sigmas(&self.disc, &mut self.spectral, 1).map_err(|e| self.nan_abort(e))?)
        } else {
            None
        };

        let mut d_loss = 0.0f32;
        if use_gan {
            // Detached generator outputs for the discriminator step.
            let fakes: Vec<Tensor<f32>> = batch
                .iter()
                .map(|p| forward(&p.input, &self.gen, ForwardOptions::default()).map(|r| r.output))
                .collect::<Result<_, _>>()
                .map_err(|e| self.nan_abort(e))?;
            let sigmas = sigmas.as_ref().expect("computed above");

            let mut g: Graph<f32> = Graph::new();
            let disc_ids: crate::model::LeafMap =
                self.disc.params.iter().map(|(n, t)| (n.clone(), g.leaf_labeled(t.clone(), true, n))).collect();
            let real_ids: Vec<TensorId> = batch
                .iter()
                .map(|p| {
                    let t = p.target.clone().reshaped(vec![1, 3, hw, hw]).expect("validated");
                    g.leaf(t, false)
                })
                .collect();
            let fake_ids: Vec<TensorId> = fakes
                .iter()
                .map(|f| {
                    let t = f.clone().reshaped(vec![1, 3, hw, hw]).expect("generator output");
                    g.leaf(t, false)
                })
                .collect();
            let run = |g: &mut Graph<f32>| -> Result<TensorId, TrainError> {
                let real_vol = g.stack_temporal(&real_ids)?;
                let fake_vol = g.stack_temporal(&fake_ids)?;
                let real_scores = discriminate_on_graph(g, &disc_ids, sigmas, real_vol)?;
                let fake_scores = discriminate_on_graph(g, &disc_ids, sigmas, fake_vol)?;
                Ok(hinge_d_on_graph(g, real_scores, fake_scores)?)
            };
            let d_id = run(&mut g).map_err(|e| self.nan_abort(e))?;
            d_loss = g.item(d_id);
            if !d_loss.is_finite() {
                return Err(TrainError::NanAbort { tensor: "d_loss".into(), step: self.step + 1 });
            }
            g.backward(d_id).map_err(|e| self.nan_abort(e))?;
            let grads: GradMap<f32> = disc_ids
                .iter()
                .filter_map(|(n, &id)| g.grad(id).map(|gr| (n.clone(), gr.to_vec())))
                .collect();
            let hp = self.adam();
            adam_step(&mut self.disc.params, &grads, &mut self.opt_d, &hp).map_err(|e| {
                let step = self.step + 1;
                match e {
                    TensorError::NanGradient(name) => TrainError::NanAbort { tensor: format!("gradient of {name}"), step },
                    other => TrainError::Tensor(other),
                }
            })?;
        }

        // Generator step.
        let mut g: Graph<f32> = Graph::new();
        let gen_ids = leaf_params(&mut g, &self.gen, true);
        let fx_ids = self.fx.leafs(&mut g);
        let disc_ids: crate::model::LeafMap = if use_gan {
            self.disc.params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), false))).collect()
        } else {
            crate::model::LeafMap::new()
        };

        let run = |g: &mut Graph<f32>, trainer: &Trainer| -> Result<(TensorId, TensorId, TensorId, Option<TensorId>), TrainError> {
            let mut outs = Vec::with_capacity(batch.len());
            let mut l1_acc: Option<TensorId> = None;
            let mut p_acc: Option<TensorId> = None;
            let mut s_acc: Option<TensorId> = None;
            for pair in batch {
                let img = g.leaf(pair.input.clone().reshaped(vec![1, 3, hw, hw])?, false);
                let tgt = g.leaf(pair.target.clone().reshaped(vec![1, 3, hw, hw])?, false);
                let built = forward_on_graph(g, &gen_ids, trainer.gen.variant, img, ForwardOptions::default())?;
                let l1 = g.mean_abs_diff(built.output, tgt)?;
                let p = perceptual_on_graph(g, &fx_ids, &trainer.fx, built.output, tgt)?;
                let s = style_on_graph(g, &fx_ids, &trainer.fx, built.output, tgt)?;
                let join = |g: &mut Graph<f32>, acc: Option<TensorId>, v: TensorId| -> Result<TensorId, TrainError> {
                    Ok(match acc {
                        Some(prev) => g.add(prev, v)?,
                        None => v,
                    })
                };
                l1_acc = Some(join(g, l1_acc, l1)?);
                p_acc = Some(join(g, p_acc, p)?);
                s_acc = Some(join(g, s_acc, s)?);
                outs.push(built.output);
            }
            let inv_b = 1.0 / batch.len() as f64;
            let l1 = g.scale(l1_acc.expect("nonempty batch"), inv_b)?;
            let p = g.scale(p_acc.expect("nonempty batch"), inv_b)?;
            let s = g.scale(s_acc.expect("nonempty batch"), inv_b)?;
            let gan = if use_gan {
                let fake_vol = g.stack_temporal(&outs)?;
                let scores = discriminate_on_graph(g, &disc_ids, sigmas.as_ref().expect("use_gan"), fake_vol)?;
                Some(gan_g_on_graph(g, scores)?)
            } else {
                None
            };
            Ok((l1, p, s, gan))
        };
        let (l1_id, p_id, s_id, gan_id) = run(&mut g, self).map_err(|e| self.nan_abort(e))?;

        let w = &self.config.loss;
        let total_id = {
            let run = |g: &mut Graph<f32>| -> Result<TensorId, TrainError> {
                let t = g.scale(l1_id, w.l1)?;
                let tp = g.scale(p_id, w.perceptual)?;
                let t = g.add(t, tp)?;
                let ts = g.scale(s_id, w.style)?;
                let t = g.add(t, ts)?;
                Ok(match gan_id {
                    Some(gid) => {
                        let tg = g.scale(gid, w.gan)?;
                        g.add(t, tg)?
                    }
                    None => t,
                })
            };
            run(&mut g).map_err(|e| self.nan_abort(e))?
        };

        g.backward(total_id).map_err(|e| self.nan_abort(e))?;
        let grads: GradMap<f32> =
            gen_ids.iter().filter_map(|(n, &id)| g.grad(id).map(|gr| (n.clone(), gr.to_vec()))).collect();
        let hp = self.adam();
        adam_step(&mut self.gen.params, &grads, &mut self.opt_g, &hp).map_err(|e| {
            let step = self.step + 1;
            match e {
                TensorError::NanGradient(name) => TrainError::NanAbort { tensor: format!("gradient of {name}"), step },
                other => TrainError::Tensor(other),
            }
        })?;

        let gan_g = gan_id.map(|id| g.item(id)).unwrap_or(0.0);
        let losses = LossReport::from_components(g.item(l1_id), g.item(p_id), g.item(s_id), gan_g, w);
        if !losses.total.is_finite() {
            return Err(TrainError::NanAbort { tensor: "total loss".into(), step: self.step + 1 });
        }
        self.step += 1;
        Ok(StepReport { losses, d_loss })
    }
}

/// Plain-text metrics log: documented header, one whitespace-separated
/// record per step.
pub struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

pub const LOG_HEADER: &str = "# step l1 perceptual style gan_g total d_loss wall_ms";

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut file =
            std::fs::File::create(path).map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        writeln!(file, "{LOG_HEADER}").map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        Ok(MetricsLog { file, path: path.to_path_buf() })
    }

    pub fn record(&mut self, step: u64, rep: &StepReport, wall_ms: u128) -> Result<(), TrainError> {
        writeln!(
            self.file,
            "{step} {} {} {} {} {} {} {wall_ms}",
            rep.losses.l1, rep.losses.perceptual, rep.losses.style, rep.losses.gan_g, rep.losses.total, rep.d_loss
        )
        .map_err(|e| TrainError::Io { path: self.path.display().to_string(), source: e })
    }
}

fn ckpt_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:06}.bin"))
}

/// Epoch loop with periodic checkpoints and a metrics log. Returns the
/// final checkpoint (also written to `out_dir`). With `resume`, continues
/// the interrupted schedule from the stored step.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path, resume: Option<Checkpoint>) -> Result<Checkpoint, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, config.clone())?,
        None => Trainer::new(config.clone())?,
    };
    let mut log = MetricsLog::create(&out_dir.join("train.log"))?;

    let steps_per_epoch = dataset.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(TrainError::Data(DataError::BatchTooLarge { batch: config.batch_size, len: dataset.len() }));
    }
    let start_epoch = (trainer.step as usize) / steps_per_epoch;
    let mut skip = (trainer.step as usize) % steps_per_epoch;

    let mut last_saved: Option<u64> = None;
    for epoch in start_epoch..config.epochs {
        let order = batches(dataset.len(), config.batch_size, config.seed_data.wrapping_add(epoch as u64))?;
        for batch_indices in order {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            let pairs: Vec<TexturePair> = batch_indices.iter().map(|&i| dataset.pair(i)).collect::<Result<_, _>>()?;
            let t0 = std::time::Instant::now();
            let rep = trainer.train_step(&pairs)?;
            log.record(trainer.step, &rep, t0.elapsed().as_millis())?;
            if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every as u64 == 0 {
                save_checkpoint(&trainer.checkpoint(), &ckpt_path(out_dir, trainer.step))?;
                last_saved = Some(trainer.step);
            }
        }
    }
    let final_ckpt = trainer.checkpoint();
    if last_saved != Some(trainer.step) {
        save_checkpoint(&final_ckpt, &ckpt_path(out_dir, trainer.step))?;
    }
    Ok(final_ckpt)
}

/// Continue training a checkpoint at a new input size (weight shapes are
/// size-independent). Epoch counting restarts at the new size.
pub fn fine_tune(
    ckpt: Checkpoint,
    new_input_hw: usize,
    epochs: usize,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Checkpoint, TrainError> {
    let mut config = ckpt.config.clone();
    config.input_hw = new_input_hw;
    config.epochs = epochs;
    crate::model::stage_schedule(config.variant, new_input_hw).map_err(ModelError::Geom)?;
    let mut start = ckpt;
    start.step = 0;
    start.config = config.clone();
    if epochs == 0 {
        std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io { path: out_dir.display().to_string(), source: e })?;
        save_checkpoint(&start, &ckpt_path(out_dir, 0))?;
        return Ok(start);
    }
    train(&config, dataset, out_dir, Some(start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_pair, ProceduralSpec, TextureKind};
    use crate::model::ArchVariant;

    fn tiny_config(use_gan: bool) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.input_hw = 32;
        c.batch_size = 2;
        c.epochs = 1;
        c.use_gan = use_gan;
        c.checkpoint_every = 0;
        c
    }

    fn tiny_dataset(n: usize, size: usize) -> Dataset {
        let specs: Vec<ProceduralSpec> = (0..n)
            .map(|i| ProceduralSpec::new(if i % 2 == 0 { TextureKind::Checker } else { TextureKind::Stripes }, i as u64, 8))
            .collect();
        crate::data::generate_corpus(&specs, size).unwrap()
    }

    fn pairs_of(ds: &Dataset, idx: &[usize]) -> Vec<TexturePair> {
        idx.iter().map(|&i| ds.pair(i).unwrap()).collect()
    }

    #[test]
    fn no_gan_step_leaves_discriminator_untouched() {
        let mut t = Trainer::new(tiny_config(false)).unwrap();
        let ds = tiny_dataset(2, 32);
        let before = t.disc.clone();
        t.train_step(&pairs_of(&ds, &[0, 1])).unwrap();
        assert_eq!(t.disc, before);
        assert_eq!(t.opt_d.step, 0);
    }

    #[test]
    fn gan_needs_batch_of_two() {
        let mut t = Trainer::new(tiny_config(true)).unwrap();
        let ds = tiny_dataset(2, 32);
        assert!(matches!(t.train_step(&pairs_of(&ds, &[0])), Err(TrainError::BatchTooSmallForGan(1))));
    }

    #[test]
    fn loss_sequences_are_deterministic() {
        let ds = tiny_dataset(4, 32);
        let run = || {
            let mut t = Trainer::new(tiny_config(false)).unwrap();
            let mut seq = Vec::new();
            for step in 0..20 {
                let order = batches(ds.len(), 2, step as u64).unwrap();
                let rep = t.train_step(&pairs_of(&ds, &order[0])).unwrap();
                seq.push((rep.losses.l1, rep.losses.total));
            }
            seq
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gan_step_updates_both_networks() {
        let mut t = Trainer::new(tiny_config(true)).unwrap();
        let ds = tiny_dataset(2, 32);
        let disc_before = t.disc.clone();
        let gen_before = t.gen.clone();
        let rep = t.train_step(&pairs_of(&ds, &[0, 1])).unwrap();
        assert!(rep.d_loss.is_finite());
        assert_ne!(t.disc, disc_before);
        assert_ne!(t.gen, gen_before);
        assert_eq!(t.opt_d.step, 1);
        assert_eq!(t.opt_g.step, 1);
        // Disjoint parameter namespaces.
        assert!(t.gen.params.keys().all(|k| !t.disc.params.contains_key(k)));
    }

    #[test]
    fn pure_l1_training_descends_on_single_pair() {
        let mut cfg = tiny_config(false);
        cfg.batch_size = 1;
        cfg.loss.perceptual = 0.0;
        cfg.loss.style = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let target = generate(&ProceduralSpec::new(TextureKind::Checker, 3, 8), 32).unwrap();
        let pair = make_pair(&target).unwrap();
        let mut l1s = Vec::new();
        for _ in 0..60 {
            let rep = t.train_step(&[pair.clone()]).unwrap();
            l1s.push(rep.losses.l1);
        }
        // Non-increasing within a factor-of-two tolerance for optimizer
        // transients, and clearly lower at the end of the window.
        let mut running_min = f32::INFINITY;
        for &v in &l1s {
            running_min = running_min.min(v);
            assert!(v <= 2.0 * running_min + 1e-6, "l1 spiked: {v} vs min {running_min}");
        }
        assert!(l1s[59] < l1s[9], "no descent: {} -> {}", l1s[9], l1s[59]);
    }

    #[test]
    fn epochs_zero_saves_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(false);
        cfg.epochs = 0;
        let ds = tiny_dataset(2, 32);
        let ckpt = train(&cfg, &ds, dir.path(), None).unwrap();
        assert_eq!(ckpt.step, 0);
        let loaded = crate::checkpoint::load_checkpoint(&dir.path().join("ckpt-000000.bin")).unwrap();
        let fresh = build_model::<f32>(ArchVariant::UAttention, 32, cfg.seed_model).unwrap();
        assert_eq!(loaded.gen, fresh);
    }

    #[test]
    fn checkpoint_schedule_10_20_25() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(false);
        cfg.batch_size = 2;
        cfg.epochs = 25;
        cfg.checkpoint_every = 10;
        let ds = tiny_dataset(2, 32); // 1 step per epoch -> 25 steps
        let ckpt = train(&cfg, &ds, dir.path(), None).unwrap();
        assert_eq!(ckpt.step, 25);
        for step in [10u64, 20, 25] {
            assert!(dir.path().join(format!("ckpt-{step:06}.bin")).exists(), "missing step {step}");
        }
        assert!(!dir.path().join("ckpt-000015.bin").exists());
        // Log has header plus one record per step.
        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 26);
    }

    #[test]
    fn resume_continues_identically() {
        let ds = tiny_dataset(4, 32);
        let mut cfg = tiny_config(false);
        cfg.epochs = 3; // 2 steps per epoch -> 6 steps
        let dir_a = tempfile::tempdir().unwrap();
        let full = train(&cfg, &ds, dir_a.path(), None).unwrap();

        // Interrupted run: stop after 1 epoch (2 steps), then resume.
        let mut cfg_short = cfg.clone();
        cfg_short.epochs = 1;
        let dir_b = tempfile::tempdir().unwrap();
        let mid = train(&cfg_short, &ds, dir_b.path(), None).unwrap();
        assert_eq!(mid.step, 2);
        let dir_c = tempfile::tempdir().unwrap();
        let resumed = train(&cfg, &ds, dir_c.path(), Some(mid)).unwrap();

        assert_eq!(resumed.step, full.step);
        assert_eq!(crate::checkpoint::encode_checkpoint(&resumed), crate::checkpoint::encode_checkpoint(&full));
    }

    #[test]
    fn reloaded_weights_forward_identically() {
        let mut t = Trainer::new(tiny_config(false)).unwrap();
        let ds = tiny_dataset(2, 32);
        t.train_step(&pairs_of(&ds, &[0, 1])).unwrap();
        let ckpt = t.checkpoint();
        let bytes = crate::checkpoint::encode_checkpoint(&ckpt);
        let back = crate::checkpoint::decode_checkpoint(&bytes).unwrap();
        let img = ds.pair(0).unwrap().input;
        let a = forward(&img, &ckpt.gen, ForwardOptions::default()).unwrap().output;
        let b = forward(&img, &back.gen, ForwardOptions::default()).unwrap().output;
        assert_eq!(a, b);
    }

    #[test]
    fn fine_tune_zero_epochs_preserves_weight_bytes() {
        let t = Trainer::new(tiny_config(false)).unwrap();
        let ckpt = t.checkpoint();
        let ds64 = tiny_dataset(2, 64);
        let dir = tempfile::tempdir().unwrap();
        let tuned = fine_tune(ckpt.clone(), 64, 0, &ds64, dir.path()).unwrap();
        assert_eq!(tuned.gen, ckpt.gen);
        assert_eq!(tuned.disc, ckpt.disc);
        assert_eq!(tuned.config.input_hw, 64);

        // Weight shapes are input-size independent.
        let w128 = build_model::<f32>(ArchVariant::UAttention, 128, 1).unwrap();
        let w256 = build_model::<f32>(ArchVariant::UAttention, 256, 1).unwrap();
        for (name, t) in &w128.params {
            assert_eq!(t.shape(), w256.params[name].shape(), "{name}");
        }
        assert_eq!(w128, w256);
    }

    #[test]
    fn fine_tune_trains_at_new_size() {
        let mut cfg = tiny_config(false);
        cfg.epochs = 1;
        let t = Trainer::new(cfg).unwrap();
        let ckpt = t.checkpoint();
        let ds64 = tiny_dataset(2, 64);
        let dir = tempfile::tempdir().unwrap();
        let tuned = fine_tune(ckpt.clone(), 64, 1, &ds64, dir.path()).unwrap();
        assert_eq!(tuned.step, 1);
        assert_ne!(tuned.gen, ckpt.gen);
        assert!(fine_tune(tuned, 33, 1, &ds64, dir.path()).is_err());
    }
}
