//! Full model composition: probabilistic U-Net backbone, feature harmonizer,
//! and rater personalizer, wired together with phase-aware parameter modes.
//!
//! The decoder is split into a latent-independent trunk and a latent-consuming
//! head so a single trunk evaluation can serve many latent draws (the GED
//! term samples several hypotheses per image). The personalizer conditions on
//! the finest harmonized trunk feature — the last map computed before the
//! latent enters — which breaks the circularity of personalizing the latent
//! that the decoder itself consumes.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, EncoderFeatures, GaussianLatent, LatentVars, ParamMode};
use crate::error::{Error, Result};
use crate::harmonizer::{Harmonizer, HarmonizerConfig, ModulationRecord};
use crate::personalizer::{Personalizer, PersonalizerConfig, PriorBank};
use crate::rng::{rng_from_seed, Prng};
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub backbone: BackboneConfig,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub token_hidden: usize,
    pub num_prompts: usize,
    /// Prior-bank size used by personalized inference.
    pub bank_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 32,
            input_w: 32,
            backbone: BackboneConfig::default(),
            num_tokens: 4,
            token_dim: 16,
            token_hidden: 32,
            num_prompts: 4,
            bank_size: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone.validate_input(self.input_h, self.input_w)?;
        self.harmonizer_config().validate()?;
        self.personalizer_config().validate()?;
        if self.bank_size == 0 {
            return Err(Error::invalid("ModelConfig::validate", "bank_size must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn harmonizer_config(&self) -> HarmonizerConfig {
        HarmonizerConfig {
            num_tokens: self.num_tokens,
            token_dim: self.token_dim,
            hidden_dim: self.token_hidden,
            layer_channels: self.backbone.decoder_stage_channels(),
        }
    }

    pub fn personalizer_config(&self) -> PersonalizerConfig {
        PersonalizerConfig {
            feature_channels: self.backbone.base_width,
            feature_h: self.input_h / 2,
            feature_w: self.input_w / 2,
            num_prompts: self.num_prompts,
            num_raters: self.backbone.num_raters,
            latent_dim: self.backbone.latent_dim,
        }
    }
}

/// Parameter modes per module family for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelModes {
    pub backbone: ParamMode,
    pub harmonizer: ParamMode,
    pub personalizer: ParamMode,
}

impl ModelModes {
    /// Phase 1: backbone (with prior/posterior) and harmonizer train.
    pub fn phase1() -> Self {
        ModelModes {
            backbone: ParamMode::Trainable,
            harmonizer: ParamMode::Trainable,
            personalizer: ParamMode::Frozen,
        }
    }

    /// Phase 2: only the personalizer trains; everything else is constant.
    pub fn phase2() -> Self {
        ModelModes {
            backbone: ParamMode::Frozen,
            harmonizer: ParamMode::Frozen,
            personalizer: ParamMode::Trainable,
        }
    }

    /// Inference: nothing trains.
    pub fn frozen() -> Self {
        ModelModes {
            backbone: ParamMode::Frozen,
            harmonizer: ParamMode::Frozen,
            personalizer: ParamMode::Frozen,
        }
    }
}

/// Latent-independent decoder pass: runs every trunk stage (with optional
/// harmonization) down to the finest pre-latent feature map.
#[derive(Debug, Clone)]
pub struct TrunkOut {
    /// Finest harmonized trunk feature, `[base_width, H/2, W/2]`.
    pub finest: Var,
    /// Harmonizer corrections recorded on the trunk stages (coarse to fine).
    pub records: Vec<ModulationRecord>,
}

/// Latent-consuming decoder pass.
#[derive(Debug, Clone)]
pub struct HeadOut {
    /// Segmentation logits `[1, H, W]`.
    pub logits: Var,
    /// Final decoder feature map `[base_width, H, W]` (spectral probe input).
    pub feature: Var,
    /// Harmonizer correction of the final stage, when harmonization is on.
    pub record: Option<ModulationRecord>,
}

#[derive(Debug, Clone)]
pub struct HarmonizerModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub harmonizer: Harmonizer,
    pub personalizer: Personalizer,
}

impl HarmonizerModel {
    /// Builds the model and registers every parameter, seeded and in a fixed
    /// order so identical seeds give identical parameter sets.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_from_seed(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut params, &mut rng)?;
        let harmonizer = Harmonizer::new(config.harmonizer_config(), &mut params, &mut rng)?;
        let personalizer = Personalizer::new(config.personalizer_config(), &mut params, &mut rng)?;
        Ok((
            HarmonizerModel {
                config,
                backbone,
                harmonizer,
                personalizer,
            },
            params,
        ))
    }

    /// Parameters trained in Phase 1 (backbone, prior, posterior, harmonizer).
    pub fn phase1_param_ids(&self, params: &ParamSet) -> Vec<ParamId> {
        params.ids_with_prefix(&["backbone.", "prior.", "posterior.", "harmonizer."])
    }

    /// Parameters trained in Phase 2 (personalizer only).
    pub fn phase2_param_ids(&self, params: &ParamSet) -> Vec<ParamId> {
        params.ids_with_prefix(&["personalizer."])
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        x: Var,
    ) -> Result<EncoderFeatures> {
        self.backbone.encode(tape, params, modes.backbone, x)
    }

    pub fn prior(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        x: Var,
    ) -> Result<LatentVars> {
        self.backbone.prior(tape, params, modes.backbone, x)
    }

    pub fn posterior(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        x: Var,
        mask: Var,
    ) -> Result<LatentVars> {
        self.backbone.posterior(tape, params, modes.backbone, x, mask)
    }

    /// Runs the decoder trunk from the encoder features to the finest
    /// pre-latent stage, harmonizing each trunk stage when `harmonize` is on.
    pub fn decode_trunk(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        features: &EncoderFeatures,
        harmonize: bool,
    ) -> Result<TrunkOut> {
        let depth = self.config.backbone.depth;
        let mut records = Vec::new();
        let mut cur = features.coarsest();
        for (i, s) in (1..depth).rev().enumerate() {
            let skip = features.stages[s - 1];
            cur = self
                .backbone
                .decode_trunk_stage(tape, params, modes.backbone, i, cur, skip)?;
            if harmonize {
                let (modded, rec) =
                    self.harmonizer
                        .modulate(tape, params, modes.harmonizer, s, cur)?;
                cur = modded;
                records.push(rec);
            }
        }
        Ok(TrunkOut { finest: cur, records })
    }

    /// Consumes one latent draw: final decoder stage (optionally harmonized)
    /// plus the logit head.
    pub fn decode_head(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        trunk: &TrunkOut,
        z: Var,
        rater: Option<usize>,
        harmonize: bool,
    ) -> Result<HeadOut> {
        let mut feat = self.backbone.decode_final_stage(
            tape,
            params,
            modes.backbone,
            trunk.finest,
            z,
            rater,
        )?;
        let mut record = None;
        if harmonize {
            let (modded, rec) = self
                .harmonizer
                .modulate(tape, params, modes.harmonizer, 0, feat)?;
            feat = modded;
            record = Some(rec);
        }
        let logits = self.backbone.logit_head(tape, params, modes.backbone, feat)?;
        Ok(HeadOut {
            logits,
            feature: feat,
            record,
        })
    }

    /// Rater-adaptive latent from the finest harmonized trunk feature.
    pub fn personalize(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        modes: ModelModes,
        trunk: &TrunkOut,
        z: Var,
        rater: usize,
        bank: &PriorBank,
    ) -> Result<Var> {
        self.personalizer.personalize_latent(
            tape,
            params,
            modes.personalizer,
            trunk.finest,
            z,
            rater,
            bank,
        )
    }

    // ---- value-level inference ---------------------------------------------

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [
            self.config.backbone.in_channels,
            self.config.input_h,
            self.config.input_w,
        ];
        if x.shape() != want {
            return Err(Error::shape(
                "HarmonizerModel::infer",
                format!("{want:?}"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Draws `k` segmentation hypotheses from the image-conditioned prior
    /// (no personalization, rater channels zero). Deterministic per seed.
    pub fn predict_set(
        &self,
        params: &ParamSet,
        x: &Tensor,
        k: usize,
        seed: u64,
        harmonize: bool,
    ) -> Result<Vec<Tensor>> {
        if k == 0 {
            return Err(Error::invalid("predict_set", "k must be >= 1".to_string()));
        }
        self.check_image(x)?;
        let mut rng = rng_from_seed(seed);
        let mut tape = Tape::new();
        let modes = ModelModes::frozen();
        let xv = tape.constant(x.clone());
        let features = self.encode(&mut tape, params, modes, xv)?;
        let prior = self.prior(&mut tape, params, modes, xv)?;
        let trunk = self.decode_trunk(&mut tape, params, modes, &features, harmonize)?;
        let d = self.config.backbone.latent_dim;
        let mut masks = Vec::with_capacity(k);
        for _ in 0..k {
            let eps = Tensor::new(vec![d], crate::rng::normal_vec(&mut rng, d))?;
            let z = self.backbone.sample_latent(&mut tape, &prior, &eps)?;
            let head = self.decode_head(&mut tape, params, modes, &trunk, z, None, harmonize)?;
            let probs = tape.sigmoid(head.logits)?;
            let t = tape.value(probs).clone();
            masks.push(t.reshaped(vec![self.config.input_h, self.config.input_w])?);
        }
        Ok(masks)
    }

    /// Snapshot of the prior for an image plus a fresh bank of draws.
    pub fn prior_bank(
        &self,
        params: &ParamSet,
        x: &Tensor,
        m: usize,
        rng: &mut Prng,
    ) -> Result<(GaussianLatent, PriorBank)> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let modes = ModelModes::frozen();
        let xv = tape.constant(x.clone());
        let prior = self.prior(&mut tape, params, modes, xv)?;
        let snap = self.backbone.snapshot_latent(&tape, &prior);
        let bank = PriorBank::from_latent(&snap, m, rng)?;
        Ok((snap, bank))
    }

    /// One personalized mask for a named rater: harmonized trunk, one prior
    /// draw, personalization against a fresh prior bank, rater-conditioned
    /// decode. Deterministic per seed (draw order: latent, then bank).
    pub fn predict_personalized(
        &self,
        params: &ParamSet,
        x: &Tensor,
        rater: usize,
        seed: u64,
        harmonize: bool,
    ) -> Result<Tensor> {
        self.check_image(x)?;
        let mut rng = rng_from_seed(seed);
        let mut tape = Tape::new();
        let modes = ModelModes::frozen();
        let xv = tape.constant(x.clone());
        let features = self.encode(&mut tape, params, modes, xv)?;
        let prior = self.prior(&mut tape, params, modes, xv)?;
        let trunk = self.decode_trunk(&mut tape, params, modes, &features, harmonize)?;

        let d = self.config.backbone.latent_dim;
        let eps = Tensor::new(vec![d], crate::rng::normal_vec(&mut rng, d))?;
        let z = self.backbone.sample_latent(&mut tape, &prior, &eps)?;
        let snap = self.backbone.snapshot_latent(&tape, &prior);
        let bank = PriorBank::from_latent(&snap, self.config.bank_size, &mut rng)?;
        let z_p = self.personalize(&mut tape, params, modes, &trunk, z, rater, &bank)?;
        let head = self.decode_head(&mut tape, params, modes, &trunk, z_p, Some(rater), harmonize)?;
        let probs = tape.sigmoid(head.logits)?;
        tape.value(probs)
            .clone()
            .reshaped(vec![self.config.input_h, self.config.input_w])
    }
}
