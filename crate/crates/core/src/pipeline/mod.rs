//! Two-phase training driver: phase 1 fits the backbone, latent encoders, and
//! harmonizer on all raters jointly; phase 2 freezes those and fits only the
//! personalizer against per-rater annotations. Both phases are deterministic
//! per seed, checkpoint after every epoch, and abort with a pointer to the
//! last good checkpoint if the loss turns non-finite.

pub mod checkpoint;
pub mod evaluate;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA};
pub use evaluate::{
    evaluate, final_decoder_feature, ged_vs_samples, CaseMetrics, GedCurveRow, MetricsReport,
    DEFAULT_K_LIST, ECE_BINS,
};

use crate::error::{Error, Result};
use crate::losses::{phase2_loss, total_loss_phase1, LossReport, LossWeights};
use crate::metrics::{dice_binary, binarize, PredictionSet};
use crate::model::{HarmonizerModel, ModelConfig};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::synthdata::{consensus_of, MultiRaterSample};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::params::ParamSet;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

/// Number of probe images used for the per-epoch per-rater Dice log in
/// phase 2.
const DICE_PROBE_LIMIT: usize = 16;

/// Where and how often training writes checkpoints. The last-good snapshot
/// is refreshed after every epoch regardless; `every = Some(n)` additionally
/// keeps a numbered snapshot each `n` epochs.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointPolicy<'a> {
    pub dir: &'a Path,
    pub every: Option<usize>,
}

impl<'a> CheckpointPolicy<'a> {
    /// Last-good snapshots only.
    pub fn dir(dir: &'a Path) -> Self {
        CheckpointPolicy { dir, every: None }
    }
}

/// Everything that shapes a training run. Stored verbatim (as JSON) inside
/// every checkpoint, so a run can be reproduced from the file alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Phase-1 learning rate.
    pub lr_phase1: f64,
    /// Phase-2 learning rate. Conventionally below `lr_phase1` — the
    /// personalizer fine-tunes against a frozen backbone — but the ordering
    /// is a documented default, not an enforced constraint.
    pub lr_phase2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Prior draws per step feeding the distribution-matching term
    /// (>= 2 whenever `ged_enabled`; the term needs distinct pairs).
    pub k_train: usize,
    /// Capacity of the FIFO buffer of prior latent draws kept during
    /// phase 1 (one draw per optimization step, oldest evicted first).
    pub memory_size: usize,
    /// Prior draws per image for the phase-2 objective.
    pub phase2_draws: usize,
    pub seed: u64,
    /// Toggles feature harmonization in every forward pass (ablation).
    pub harmonizer_enabled: bool,
    /// Toggles the distribution-matching loss term (ablation).
    pub ged_enabled: bool,
    pub model: ModelConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 100,
            phase2_epochs: 150,
            lr_phase1: 1e-4,
            lr_phase2: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            batch_size: 8,
            k_train: 4,
            memory_size: 100,
            phase2_draws: 3,
            seed: 7,
            harmonizer_enabled: true,
            ged_enabled: true,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig::validate";
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid(OP, "batch_size must be >= 1".to_string()));
        }
        if self.memory_size == 0 {
            return Err(Error::invalid(OP, "memory_size must be >= 1".to_string()));
        }
        if self.phase2_draws == 0 {
            return Err(Error::invalid(OP, "phase2_draws must be >= 1".to_string()));
        }
        if self.ged_enabled && self.k_train < 2 {
            return Err(Error::invalid(
                OP,
                format!(
                    "the distribution-matching term needs k_train >= 2 draws, got {}",
                    self.k_train
                ),
            ));
        }
        if !(self.lr_phase1.is_finite() && self.lr_phase1 >= 0.0)
            || !(self.lr_phase2.is_finite() && self.lr_phase2 >= 0.0)
        {
            return Err(Error::invalid(
                OP,
                "learning rates must be finite and >= 0".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(OP, "betas must lie in [0, 1)".to_string()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                OP,
                "weight_decay must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }

    fn adam_for(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-epoch record of phase-1 training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Log {
    /// Mean loss report per epoch, in order.
    pub epochs: Vec<LossReport>,
    /// FIFO of the most recent prior latent draws (oldest first, at most
    /// `memory_size` entries, one per optimization step).
    pub prior_memory: Vec<Vec<f64>>,
}

/// Per-epoch record of phase-2 training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Epoch {
    pub mean_loss: f64,
    /// Mean per-rater loss over the epoch's samples.
    pub per_rater_loss: Vec<f64>,
    /// Per-rater Dice of personalized predictions on a fixed probe subset.
    pub per_rater_dice: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Log {
    pub epochs: Vec<Phase2Epoch>,
}

fn non_finite_abort(phase: u8, epoch: usize, index: usize, last_good: &Option<std::path::PathBuf>) -> Error {
    Error::Numeric {
        msg: format!("non-finite loss in phase {phase}, epoch {epoch}, sample {index}"),
        last_good: last_good.clone(),
    }
}

/// Numeric failures raised inside a training step (overflowed activations,
/// degenerate attention, ...) get the last-good checkpoint path attached so
/// the run can be resumed.
fn with_last_good(e: Error, last_good: &Option<std::path::PathBuf>) -> Error {
    match e {
        Error::Numeric { msg, .. } => Error::Numeric {
            msg,
            last_good: last_good.clone(),
        },
        other => other,
    }
}

/// Phase 1: trains backbone, prior/posterior encoders, and (when enabled)
/// the harmonizer on every rater's annotations jointly. Gradients are
/// averaged over each shuffled mini-batch. Runs identically for identical
/// seeds, keeps a FIFO of recent prior draws, writes `phase1_last_good.hzck`
/// into `checkpoint_dir` after every epoch, and aborts with a pointer to
/// that file if the loss turns non-finite.
pub fn train_phase1(
    model: &HarmonizerModel,
    params: &mut ParamSet,
    samples: &[&MultiRaterSample],
    cfg: &TrainConfig,
    ckpt: Option<CheckpointPolicy>,
) -> Result<Phase1Log> {
    const OP: &str = "train_phase1";
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid(OP, "need at least one training sample".to_string()));
    }
    let mut adam = AdamState::new(params, cfg.adam_for(cfg.lr_phase1));
    let active = if cfg.harmonizer_enabled {
        model.phase1_param_ids(params)
    } else {
        // With harmonization off its parameters never enter the tape, so
        // they must not be stepped either.
        params.ids_with_prefix(&["backbone.", "prior.", "posterior."])
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[1]));
    let latent = model.config.backbone.latent_dim;
    let last_good = ckpt.map(|c| c.dir.join("phase1_last_good.hzck"));
    if let Some(path) = &last_good {
        Checkpoint::capture(1, cfg, params, &adam, &rng).save(path)?;
    }

    let mut memory: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory_size);
    let mut epochs = Vec::with_capacity(cfg.phase1_epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.phase1_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossReport { seg: 0.0, kl: 0.0, harm: 0.0, ged: 0.0, total: 0.0 };
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grads();
            for &i in batch {
                let s = samples[i];
                let rater_k = rng.gen_range(0..s.masks.len());
                let eps_recon = Tensor::new(vec![latent], normal_vec(&mut rng, latent))?;
                let eps_ged: Vec<Tensor> = if cfg.ged_enabled {
                    (0..cfg.k_train)
                        .map(|_| Tensor::new(vec![latent], normal_vec(&mut rng, latent)))
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                let mut tape = Tape::new();
                let (loss, report) = total_loss_phase1(
                    &mut tape,
                    model,
                    params,
                    &cfg.weights,
                    &s.image,
                    &s.masks,
                    rater_k,
                    &eps_recon,
                    &eps_ged,
                    cfg.harmonizer_enabled,
                )
                .map_err(|e| with_last_good(e, &last_good))?;
                if !report.total.is_finite() {
                    return Err(non_finite_abort(1, epoch, s.index, &last_good));
                }
                tape.backward(loss)?;
                tape.export_grads(params)?;
                sum.seg += report.seg;
                sum.kl += report.kl;
                sum.harm += report.harm;
                sum.ged += report.ged;
                sum.total += report.total;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            adam.step(params, &active)?;
            params.zero_grads();

            // One fresh prior draw per step feeds the latent memory.
            let (snap, _) = model
                .prior_bank(params, &samples[batch[0]].image, 1, &mut rng)
                .map_err(|e| with_last_good(e, &last_good))?;
            if memory.len() == cfg.memory_size {
                memory.pop_front();
            }
            memory.push_back(snap.sample(&mut rng).data().to_vec());
        }
        let n = samples.len() as f64;
        epochs.push(LossReport {
            seg: sum.seg / n,
            kl: sum.kl / n,
            harm: sum.harm / n,
            ged: sum.ged / n,
            total: sum.total / n,
        });
        if let Some(path) = &last_good {
            Checkpoint::capture(1, cfg, params, &adam, &rng).save(path)?;
        }
        if let Some(policy) = &ckpt {
            if let Some(every) = policy.every {
                if every > 0 && (epoch + 1) % every == 0 {
                    let numbered = policy.dir.join(format!("phase1_epoch_{:04}.hzck", epoch + 1));
                    Checkpoint::capture(1, cfg, params, &adam, &rng).save(&numbered)?;
                }
            }
        }
    }
    Ok(Phase1Log { epochs, prior_memory: memory.into_iter().collect() })
}

/// Phase 2: freezes everything from phase 1 and fits the personalizer alone.
/// Each image gets a fresh prior bank; the objective averages personalized
/// reconstruction loss over `phase2_draws` prior draws and all raters. After
/// every optimization step the frozen parameters are checked to carry no
/// gradient. Zero epochs is an exact passthrough: parameters are untouched.
pub fn train_phase2(
    model: &HarmonizerModel,
    params: &mut ParamSet,
    samples: &[&MultiRaterSample],
    cfg: &TrainConfig,
    ckpt: Option<CheckpointPolicy>,
) -> Result<Phase2Log> {
    const OP: &str = "train_phase2";
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid(OP, "need at least one training sample".to_string()));
    }
    if cfg.phase2_epochs == 0 {
        return Ok(Phase2Log { epochs: Vec::new() });
    }
    let num_raters = model.config.backbone.num_raters;
    let mut adam = AdamState::new(params, cfg.adam_for(cfg.lr_phase2));
    let active = model.phase2_param_ids(params);
    let frozen = model.phase1_param_ids(params);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[2]));
    let latent = model.config.backbone.latent_dim;
    let last_good = ckpt.map(|c| c.dir.join("phase2_last_good.hzck"));
    if let Some(path) = &last_good {
        Checkpoint::capture(2, cfg, params, &adam, &rng).save(path)?;
    }

    let probe = &samples[..samples.len().min(DICE_PROBE_LIMIT)];
    let mut epochs = Vec::with_capacity(cfg.phase2_epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.phase2_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rater_sum = vec![0.0; num_raters];
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grads();
            for &i in batch {
                let s = samples[i];
                let (_, bank) = model
                    .prior_bank(params, &s.image, model.config.bank_size, &mut rng)
                    .map_err(|e| with_last_good(e, &last_good))?;
                let eps_draws: Vec<Tensor> = (0..cfg.phase2_draws)
                    .map(|_| Tensor::new(vec![latent], normal_vec(&mut rng, latent)))
                    .collect::<Result<_>>()?;
                let mut tape = Tape::new();
                let (loss, per_rater) = phase2_loss(
                    &mut tape,
                    model,
                    params,
                    &cfg.weights,
                    &s.image,
                    &s.masks,
                    &bank,
                    &eps_draws,
                    cfg.harmonizer_enabled,
                )
                .map_err(|e| with_last_good(e, &last_good))?;
                let total = tape.value(loss).item()?;
                if !total.is_finite() {
                    return Err(non_finite_abort(2, epoch, s.index, &last_good));
                }
                tape.backward(loss)?;
                tape.export_grads(params)?;
                loss_sum += total;
                for (acc, v) in rater_sum.iter_mut().zip(&per_rater) {
                    *acc += v;
                }
            }
            // Freeze soundness: a gradient on any phase-1 parameter means
            // the freeze leaked.
            for &id in &frozen {
                if params.grad(id).is_some() {
                    return Err(Error::Autodiff(format!(
                        "{OP}: frozen parameter '{}' received a gradient",
                        params.name(id)
                    )));
                }
            }
            params.scale_grads(1.0 / batch.len() as f64);
            adam.step(params, &active)?;
            params.zero_grads();
        }

        let mut per_rater_dice = vec![0.0; num_raters];
        for (p, s) in probe.iter().enumerate() {
            for rater in 0..num_raters {
                let seed = derive_seed(cfg.seed, &[3, epoch as u64, p as u64, rater as u64]);
                let probs = model.predict_personalized(
                    params,
                    &s.image,
                    rater,
                    seed,
                    cfg.harmonizer_enabled,
                )?;
                let pred = binarize(&probs, 0.5);
                per_rater_dice[rater] += dice_binary(&pred, &s.masks[rater])?;
            }
        }
        let n = samples.len() as f64;
        let p = probe.len() as f64;
        epochs.push(Phase2Epoch {
            mean_loss: loss_sum / n,
            per_rater_loss: rater_sum.iter().map(|v| v / n).collect(),
            per_rater_dice: per_rater_dice.iter().map(|v| v / p).collect(),
        });
        if let Some(path) = &last_good {
            Checkpoint::capture(2, cfg, params, &adam, &rng).save(path)?;
        }
        if let Some(policy) = &ckpt {
            if let Some(every) = policy.every {
                if every > 0 && (epoch + 1) % every == 0 {
                    let numbered = policy.dir.join(format!("phase2_epoch_{:04}.hzck", epoch + 1));
                    Checkpoint::capture(2, cfg, params, &adam, &rng).save(&numbered)?;
                }
            }
        }
    }
    Ok(Phase2Log { epochs })
}

/// A fully trained model with its parameters and both training logs.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: HarmonizerModel,
    pub params: ParamSet,
    pub phase1: Phase1Log,
    pub phase2: Phase2Log,
}

/// End-to-end training: builds the model from `cfg.model`, runs phase 1 on
/// `samples`, then phase 2 on the same set. When `checkpoint_dir` is given,
/// per-epoch last-good checkpoints plus `final.hzck` land there.
pub fn run_training(
    samples: &[&MultiRaterSample],
    cfg: &TrainConfig,
    ckpt: Option<CheckpointPolicy>,
) -> Result<TrainOutcome> {
    let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), derive_seed(cfg.seed, &[0]))?;
    let phase1 = train_phase1(&model, &mut params, samples, cfg, ckpt)?;
    let phase2 = train_phase2(&model, &mut params, samples, cfg, ckpt)?;
    if let Some(policy) = ckpt {
        Checkpoint::for_inference(2, cfg, &params).save(&policy.dir.join("final.hzck"))?;
    }
    Ok(TrainOutcome { model, params, phase1, phase2 })
}

/// Trains a single-rater baseline on majority-vote consensus masks: the
/// model config is reduced to one rater, every sample's annotation stack is
/// replaced by its consensus, and phase 1 runs unchanged (phase 2 is
/// meaningless with one rater and is skipped).
pub fn train_consensus_baseline(
    samples: &[&MultiRaterSample],
    cfg: &TrainConfig,
    ckpt: Option<CheckpointPolicy>,
) -> Result<(HarmonizerModel, ParamSet, Phase1Log)> {
    let mut baseline_cfg = cfg.clone();
    baseline_cfg.model.backbone.num_raters = 1;
    let consensus: Vec<MultiRaterSample> = samples
        .iter()
        .map(|s| MultiRaterSample {
            index: s.index,
            image: s.image.clone(),
            masks: vec![consensus_of(&s.masks)],
            scene: s.scene.clone(),
            split: s.split,
        })
        .collect();
    let refs: Vec<&MultiRaterSample> = consensus.iter().collect();
    let (model, mut params) =
        HarmonizerModel::new(baseline_cfg.model.clone(), derive_seed(cfg.seed, &[0]))?;
    let log = train_phase1(&model, &mut params, &refs, &baseline_cfg, ckpt)?;
    Ok((model, params, log))
}

/// Draws a set of `k` diverse segmentation hypotheses for one image.
/// Deterministic per seed; `k = 1` yields a singleton set.
pub fn infer_sample_set(
    model: &HarmonizerModel,
    params: &ParamSet,
    x: &Tensor,
    k: usize,
    seed: u64,
    harmonize: bool,
) -> Result<PredictionSet> {
    PredictionSet::new(model.predict_set(params, x, k, seed, harmonize)?, seed)
}

/// One personalized probability mask for a named rater. Errors when the
/// rater index is outside the model's rater range.
pub fn infer_personalized(
    model: &HarmonizerModel,
    params: &ParamSet,
    x: &Tensor,
    rater: usize,
    seed: u64,
    harmonize: bool,
) -> Result<Tensor> {
    let n = model.config.backbone.num_raters;
    if rater >= n {
        return Err(Error::invalid(
            "infer_personalized",
            format!("rater {rater} out of range (model has {n} raters)"),
        ));
    }
    model.predict_personalized(params, x, rater, seed, harmonize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{default_profiles, synthesize_sample, Split};

    fn tiny_model_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.input_h = 16;
        cfg.input_w = 16;
        cfg.backbone.base_width = 4;
        cfg.backbone.depth = 2;
        cfg.backbone.latent_dim = 4;
        cfg.bank_size = 4;
        cfg.num_tokens = 2;
        cfg.token_dim = 8;
        cfg.token_hidden = 8;
        cfg.num_prompts = 2;
        cfg
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            phase1_epochs: 1,
            phase2_epochs: 1,
            batch_size: 2,
            k_train: 2,
            memory_size: 5,
            phase2_draws: 2,
            seed: 11,
            model: tiny_model_config(),
            ..TrainConfig::default()
        }
    }

    fn tiny_samples(n: usize) -> Vec<MultiRaterSample> {
        let profiles = default_profiles();
        (0..n)
            .map(|i| {
                let (scene, image, masks) =
                    synthesize_sample(1000 + i as u64, 16, i % 3, &profiles).unwrap();
                MultiRaterSample {
                    index: i,
                    image,
                    masks,
                    scene,
                    split: Split::Train,
                }
            })
            .collect()
    }

    fn refs(samples: &[MultiRaterSample]) -> Vec<&MultiRaterSample> {
        samples.iter().collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            lr_phase1: 0.0,
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let before = params.clone();
        train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        assert!(params.values_identical(&before));
    }

    #[test]
    fn same_seed_reproduces_the_same_run_bitwise() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(3);
        let mut outcomes = Vec::new();
        for _ in 0..2 {
            let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
            let log = train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
            outcomes.push((params, log));
        }
        assert!(outcomes[0].0.values_identical(&outcomes[1].0));
        let (a, b) = (&outcomes[0].1, &outcomes[1].1);
        assert_eq!(a.epochs.len(), b.epochs.len());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        assert_eq!(a.prior_memory, b.prior_memory);
    }

    #[test]
    fn training_reduces_the_loss_on_a_small_set() {
        let cfg = TrainConfig {
            phase1_epochs: 4,
            lr_phase1: 3e-3,
            ..tiny_train_config()
        };
        let samples = tiny_samples(4);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let log = train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        let first = log.epochs.first().unwrap().total;
        let last = log.epochs.last().unwrap().total;
        assert!(
            last < first,
            "loss should fall: first epoch {first}, last epoch {last}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_and_points_at_the_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            phase1_epochs: 30,
            lr_phase1: 1e155, // one step distorts the parameters beyond overflow
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let err = train_phase1(&model, &mut params, &refs(&samples), &cfg, Some(CheckpointPolicy::dir(dir.path())))
            .unwrap_err();
        match err {
            Error::Numeric { last_good, .. } => {
                let path = last_good.expect("a last-good checkpoint path");
                let ck = Checkpoint::load(&path).unwrap();
                assert_eq!(ck.phase, 1);
            }
            other => panic!("expected a numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn memory_buffer_respects_capacity_and_latent_width() {
        let cfg = TrainConfig {
            phase1_epochs: 2,
            memory_size: 3,
            ..tiny_train_config()
        };
        let samples = tiny_samples(4);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let log = train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        // 2 epochs x 2 steps = 4 draws through a capacity-3 FIFO.
        assert_eq!(log.prior_memory.len(), 3);
        for z in &log.prior_memory {
            assert_eq!(z.len(), cfg.model.backbone.latent_dim);
        }
    }

    #[test]
    fn phase2_trains_only_the_personalizer() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let before = params.clone();
        let log = train_phase2(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        assert_eq!(log.epochs.len(), 1);

        let phase1_ids = model.phase1_param_ids(&params);
        for id in phase1_ids {
            assert_eq!(
                params.value(id).data(),
                before.value(id).data(),
                "frozen parameter '{}' moved",
                params.name(id)
            );
        }
        let changed = model
            .phase2_param_ids(&params)
            .iter()
            .any(|&id| params.value(id).data() != before.value(id).data());
        assert!(changed, "no personalizer parameter moved");
    }

    #[test]
    fn phase2_with_zero_epochs_is_an_exact_passthrough() {
        let cfg = TrainConfig {
            phase2_epochs: 0,
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let before = params.clone();
        let log = train_phase2(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        assert!(log.epochs.is_empty());
        assert!(params.values_identical(&before));
    }

    #[test]
    fn phase2_logs_per_rater_dice_for_every_rater() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let log = train_phase2(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        let epoch = &log.epochs[0];
        assert_eq!(epoch.per_rater_dice.len(), 4);
        assert_eq!(epoch.per_rater_loss.len(), 4);
        for &d in &epoch.per_rater_dice {
            assert!((0.0..=1.0).contains(&d));
        }
        assert!(epoch.mean_loss.is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_and_restores_the_forward_pass() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();

        let adam = AdamState::new(&params, cfg.adam_for(cfg.lr_phase1));
        let rng = rng_from_seed(99);
        let ck = Checkpoint::capture(1, &cfg, &params, &adam, &rng);
        let path = dir.path().join("snap.hzck");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, loaded);

        let (model2, params2, adam2, rng2) = loaded.restore().unwrap();
        assert!(params.values_identical(&params2));
        assert_eq!(adam2.step, adam.step);
        assert_eq!(rng2.get_seed(), rng.get_seed());
        assert_eq!(rng2.get_word_pos(), rng.get_word_pos());

        let x = &samples[0].image;
        let a = model.predict_set(&params, x, 2, 5, true).unwrap();
        let b = model2.predict_set(&params2, x, 2, 5, true).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn checkpoint_rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hzck");
        std::fs::write(&path, b"HZXX rest").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let cfg = tiny_train_config();
        let (_, params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let adam = AdamState::new(&params, cfg.adam_for(cfg.lr_phase1));
        let ck = Checkpoint::capture(1, &cfg, &params, &adam, &rng_from_seed(1));
        let good = dir.path().join("good.hzck");
        ck.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn inference_wrappers_are_deterministic_and_validated() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(1);
        let (model, params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let x = &samples[0].image;

        let one = infer_sample_set(&model, &params, x, 1, 7, true).unwrap();
        assert_eq!(one.k(), 1);
        let a = infer_sample_set(&model, &params, x, 3, 7, true).unwrap();
        let b = infer_sample_set(&model, &params, x, 3, 7, true).unwrap();
        for (p, q) in a.masks().iter().zip(b.masks()) {
            assert_eq!(p.data(), q.data());
        }
        for m in a.masks() {
            assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        assert!(infer_personalized(&model, &params, x, 4, 7, true).is_err());
        let r0 = infer_personalized(&model, &params, x, 0, 7, true).unwrap();
        let r1 = infer_personalized(&model, &params, x, 1, 7, true).unwrap();
        assert_ne!(r0.data(), r1.data(), "raters should separate");
    }

    #[test]
    fn run_training_produces_checkpoints_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let outcome = run_training(&refs(&samples), &cfg, Some(CheckpointPolicy::dir(dir.path()))).unwrap();
        assert_eq!(outcome.phase1.epochs.len(), 1);
        assert_eq!(outcome.phase2.epochs.len(), 1);
        for name in ["phase1_last_good.hzck", "phase2_last_good.hzck", "final.hzck"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let ck = Checkpoint::load(&dir.path().join("final.hzck")).unwrap();
        let (m2, p2, _, _) = ck.restore().unwrap();
        let a = outcome
            .model
            .predict_set(&outcome.params, &samples[0].image, 2, 5, true)
            .unwrap();
        let b = m2.predict_set(&p2, &samples[0].image, 2, 5, true).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn checkpoint_cadence_keeps_numbered_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            phase1_epochs: 4,
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let policy = CheckpointPolicy { dir: dir.path(), every: Some(2) };
        train_phase1(&model, &mut params, &refs(&samples), &cfg, Some(policy)).unwrap();
        assert!(dir.path().join("phase1_epoch_0002.hzck").exists());
        assert!(dir.path().join("phase1_epoch_0004.hzck").exists());
        assert!(!dir.path().join("phase1_epoch_0001.hzck").exists());
        assert!(!dir.path().join("phase1_epoch_0003.hzck").exists());
        assert!(dir.path().join("phase1_last_good.hzck").exists());
    }

    #[test]
    fn consensus_baseline_trains_a_single_rater_model() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let (model, params, log) =
            train_consensus_baseline(&refs(&samples), &cfg, None).unwrap();
        assert_eq!(model.config.backbone.num_raters, 1);
        assert_eq!(log.epochs.len(), 1);
        let set = infer_sample_set(&model, &params, &samples[0].image, 2, 5, true).unwrap();
        assert_eq!(set.k(), 2);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let good = tiny_train_config();
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..good.clone() },
            TrainConfig { memory_size: 0, ..good.clone() },
            TrainConfig { phase2_draws: 0, ..good.clone() },
            TrainConfig { k_train: 1, ged_enabled: true, ..good.clone() },
            TrainConfig { lr_phase1: -1.0, ..good.clone() },
            TrainConfig { beta1: 1.0, ..good.clone() },
            TrainConfig { weight_decay: f64::NAN, ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        // A single draw is fine when the distribution term is off.
        let off = TrainConfig { k_train: 1, ged_enabled: false, ..good };
        assert!(off.validate().is_ok());
    }

    #[test]
    fn ged_ablation_removes_the_distribution_term() {
        let cfg = TrainConfig {
            ged_enabled: false,
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let log = train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        assert_eq!(log.epochs[0].ged, 0.0);
    }

    #[test]
    fn harmonizer_ablation_trains_without_harmonizer_parameters() {
        let cfg = TrainConfig {
            harmonizer_enabled: false,
            ..tiny_train_config()
        };
        let samples = tiny_samples(2);
        let (model, mut params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let before = params.clone();
        let log = train_phase1(&model, &mut params, &refs(&samples), &cfg, None).unwrap();
        assert_eq!(log.epochs[0].harm, 0.0);
        let harm_ids = params.ids_with_prefix(&["harmonizer."]);
        assert!(!harm_ids.is_empty());
        for id in harm_ids {
            assert_eq!(params.value(id).data(), before.value(id).data());
        }
    }

    #[test]
    fn evaluation_report_covers_every_case_and_rater() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(3);
        let (model, params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let report = evaluate(&model, &params, &refs(&samples), 2, 21, true).unwrap();
        assert_eq!(report.cases.len(), 3);
        for case in &report.cases {
            assert!(case.ged.is_finite() && case.ged >= 0.0);
            assert_eq!(case.per_rater_dice.len(), 4);
            assert!((0.0..=1.0).contains(&case.ece));
            assert!((0.0..=1.0).contains(&case.dice_match));
            assert!(case.consensus_area >= 0.0);
        }
        assert_eq!(report.mean_per_rater_dice.len(), 4);
        assert!((0.0..=1.0).contains(&report.pooled_ece));
        let binned: usize = report.size_bins.iter().map(|b| b.count).sum();
        assert_eq!(binned, 3);
        assert_eq!(
            report.correctness.total_pixels,
            3 * 16 * 16,
            "every pixel of every case is classified"
        );
    }

    #[test]
    fn final_decoder_feature_is_deterministic_and_rater_sensitive() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(1);
        let (model, params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let x = &samples[0].image;
        let plain = final_decoder_feature(&model, &params, x, None, 5, true).unwrap();
        assert_eq!(plain.shape(), [4, 16, 16]);
        let again = final_decoder_feature(&model, &params, x, None, 5, true).unwrap();
        assert_eq!(plain.data(), again.data());
        let personalized = final_decoder_feature(&model, &params, x, Some(0), 5, true).unwrap();
        assert_eq!(personalized.shape(), plain.shape());
        assert_ne!(plain.data(), personalized.data());
    }

    #[test]
    fn sample_curve_has_one_row_per_count_and_flags_singletons() {
        let cfg = tiny_train_config();
        let samples = tiny_samples(2);
        let (model, params) = HarmonizerModel::new(cfg.model.clone(), 3).unwrap();
        let rows = ged_vs_samples(&model, &params, &refs(&samples), &[1, 2, 4], 31, true).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].k1_fallback);
        assert!(!rows[1].k1_fallback);
        for row in &rows {
            assert!(row.mean.is_finite() && row.std >= 0.0 && row.stderr <= row.std + 1e-12);
        }
        let again = ged_vs_samples(&model, &params, &refs(&samples), &[1, 2, 4], 31, true).unwrap();
        assert_eq!(rows[2].mean.to_bits(), again[2].mean.to_bits());
    }
}
