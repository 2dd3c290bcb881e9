//! Probabilistic U-Net backbone: a deterministic encoder/decoder trunk plus
//! two small Gaussian conditioning networks.
//!
//! The prior net sees only the image; the posterior net sees image and one
//! annotation. Both emit a diagonal Gaussian over a low-dimensional latent
//! space. A latent draw is broadcast over space and concatenated at the
//! finest decoder stage — optionally together with a one-hot rater block — so
//! a single decoder realizes a distribution over segmentation hypotheses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Leaky-ReLU slope used throughout the trunk.
pub const LEAK: f64 = 0.01;

/// Log-sigma outputs are clamped to this symmetric range before use.
pub const LOG_SIGMA_CLAMP: f64 = 10.0;

/// How module parameters enter a tape: trainable leaves that receive
/// gradients, or frozen constants that do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

impl Tape {
    pub fn load_param(&mut self, params: &ParamSet, id: ParamId, mode: ParamMode) -> Var {
        match mode {
            ParamMode::Trainable => self.param(params, id),
            ParamMode::Frozen => self.frozen_param(params, id),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel width of the finest stage; stage `s` uses `base_width << (s-1)`.
    pub base_width: usize,
    /// Number of down/up-sampling stages; stage `s` lives at `H / 2^s`.
    pub depth: usize,
    pub latent_dim: usize,
    pub num_raters: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            base_width: 8,
            depth: 3,
            latent_dim: 6,
            num_raters: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "BackboneConfig::validate";
        if self.depth < 2 {
            return Err(Error::invalid(OP, format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_width < 4 {
            return Err(Error::invalid(
                OP,
                format!("base_width must be >= 4, got {}", self.base_width),
            ));
        }
        if self.in_channels == 0 || self.latent_dim == 0 || self.num_raters == 0 {
            return Err(Error::invalid(
                OP,
                "in_channels, latent_dim, and num_raters must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Checks that a spatial extent survives `depth` halvings.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "BackboneConfig::validate_input",
                format!("input {h}x{w} must be divisible by 2^depth = {div}"),
            ));
        }
        Ok(())
    }

    /// Channel width of encoder/decoder stage `s` (1-based; finest is 1).
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    /// Channel widths of the decoder feature maps the harmonizer modulates,
    /// indexed by decoder stage id (0 = finest/final stage).
    pub fn decoder_stage_channels(&self) -> Vec<usize> {
        let mut out = vec![self.base_width]; // final stage 0
        for s in 1..self.depth {
            out.push(self.stage_width(s));
        }
        out
    }
}

/// Conv weight + bias pair.
#[derive(Debug, Clone)]
pub(crate) struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
}

/// Two 3x3 convolutions with leaky-ReLU after each.
#[derive(Debug, Clone)]
pub(crate) struct BlockP {
    pub c1: ConvP,
    pub c2: ConvP,
}

/// Encoder-shaped trunk plus a Gaussian affine head.
#[derive(Debug, Clone)]
pub(crate) struct GaussHeadP {
    pub trunk: Vec<BlockP>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Latent distribution on a tape (both tensors `[D]`).
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Value-level snapshot of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    /// One reparameterized draw: `z = mu + exp(log_sigma) * eps`.
    pub fn sample(&self, rng: &mut Prng) -> Tensor {
        let data: Vec<f64> = self
            .mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .map(|(&m, &ls)| m + ls.exp() * crate::rng::standard_normal(rng))
            .collect();
        Tensor::new(vec![self.dim()], data).expect("same length as mu")
    }
}

/// Encoder features on a tape, one per stage, finest first. `stages[s-1]`
/// has `stage_width(s)` channels at `H / 2^s`.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub stages: Vec<Var>,
}

impl EncoderFeatures {
    pub fn coarsest(&self) -> Var {
        *self.stages.last().expect("at least one stage")
    }
}

fn register_conv(
    params: &mut ParamSet,
    rng: &mut Prng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<ConvP> {
    let fan_in = (c_in * k * k) as f64;
    let s = 1.0 / fan_in.sqrt();
    let w = Tensor::new(
        vec![c_out, c_in, k, k],
        crate::rng::uniform_vec(rng, c_out * c_in * k * k, -s, s),
    )?;
    Ok(ConvP {
        w: params.register(format!("{name}.w"), w)?,
        b: params.register(format!("{name}.b"), Tensor::zeros(&[c_out]))?,
    })
}

fn register_block(
    params: &mut ParamSet,
    rng: &mut Prng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<BlockP> {
    Ok(BlockP {
        c1: register_conv(params, rng, &format!("{name}.conv1"), c_out, c_in, 3)?,
        c2: register_conv(params, rng, &format!("{name}.conv2"), c_out, c_out, 3)?,
    })
}

fn register_linear(
    params: &mut ParamSet,
    rng: &mut Prng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<(ParamId, ParamId)> {
    let s = 1.0 / (d_in as f64).sqrt();
    let w = Tensor::new(vec![d_in, d_out], crate::rng::uniform_vec(rng, d_in * d_out, -s, s))?;
    Ok((
        params.register(format!("{name}.w"), w)?,
        params.register(format!("{name}.b"), Tensor::zeros(&[d_out]))?,
    ))
}

/// The parameterized backbone. Construction registers every tensor under the
/// prefixes `backbone.`, `prior.`, and `posterior.`; forward methods replay
/// the architecture on a tape.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    enc: Vec<BlockP>,
    /// Decoder trunk blocks for stages depth-1 .. 1, stored coarse to fine.
    dec_trunk: Vec<BlockP>,
    dec_final: BlockP,
    head: ConvP,
    prior: GaussHeadP,
    posterior: GaussHeadP,
}

impl Backbone {
    pub fn new(config: BackboneConfig, params: &mut ParamSet, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let d = config.depth;

        let mut enc = Vec::with_capacity(d);
        let mut c_in = config.in_channels;
        for s in 1..=d {
            let c_out = config.stage_width(s);
            enc.push(register_block(params, rng, &format!("backbone.enc.{s}"), c_in, c_out)?);
            c_in = c_out;
        }

        // Trunk stage s consumes upsample(stage s+1) ++ skip(stage s).
        let mut dec_trunk = Vec::with_capacity(d - 1);
        for s in (1..d).rev() {
            let c_in = config.stage_width(s + 1) + config.stage_width(s);
            let c_out = config.stage_width(s);
            dec_trunk.push(register_block(params, rng, &format!("backbone.dec.{s}"), c_in, c_out)?);
        }

        // Final stage consumes upsample(stage 1) ++ z ++ one-hot rater block.
        let c_fin = config.base_width + config.latent_dim + config.num_raters;
        let dec_final = register_block(params, rng, "backbone.dec.0", c_fin, config.base_width)?;
        let head = register_conv(params, rng, "backbone.head", 1, config.base_width, 1)?;

        let prior = Self::register_gauss(params, rng, "prior", &config, config.in_channels)?;
        let posterior =
            Self::register_gauss(params, rng, "posterior", &config, config.in_channels + 1)?;

        Ok(Backbone {
            config,
            enc,
            dec_trunk,
            dec_final,
            head,
            prior,
            posterior,
        })
    }

    fn register_gauss(
        params: &mut ParamSet,
        rng: &mut Prng,
        prefix: &str,
        config: &BackboneConfig,
        in_channels: usize,
    ) -> Result<GaussHeadP> {
        // Same topology as the encoder at half width.
        let w0 = (config.base_width / 2).max(2);
        let mut trunk = Vec::with_capacity(config.depth);
        let mut c_in = in_channels;
        for s in 1..=config.depth {
            let c_out = w0 << (s - 1);
            trunk.push(register_block(params, rng, &format!("{prefix}.enc.{s}"), c_in, c_out)?);
            c_in = c_out;
        }
        let (head_w, head_b) =
            register_linear(params, rng, &format!("{prefix}.head"), c_in, 2 * config.latent_dim)?;
        Ok(GaussHeadP {
            trunk,
            head_w,
            head_b,
        })
    }

    fn conv(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        p: &ConvP,
        x: Var,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let w = tape.load_param(params, p.w, mode);
        let b = tape.load_param(params, p.b, mode);
        tape.conv2d(x, w, Some(b), spec)
    }

    fn block(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        p: &BlockP,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv(tape, params, mode, &p.c1, x, Conv2dSpec::padded(1))?;
        let y = tape.leaky_relu(y, LEAK)?;
        let y = self.conv(tape, params, mode, &p.c2, y, Conv2dSpec::padded(1))?;
        tape.leaky_relu(y, LEAK)
    }

    /// Runs the encoder. `x` is `[in_channels, H, W]` with both extents
    /// divisible by `2^depth`; stage `s` of the result sits at `H / 2^s`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x: Var,
    ) -> Result<EncoderFeatures> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::shape(
                "Backbone::encode",
                format!("[{}, H, W]", self.config.in_channels),
                format!("{shape:?}"),
            ));
        }
        self.config.validate_input(shape[1], shape[2])?;
        let mut stages = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for p in &self.enc {
            let pooled = tape.avg_pool2(cur)?;
            cur = self.block(tape, params, mode, p, pooled)?;
            stages.push(cur);
        }
        Ok(EncoderFeatures { stages })
    }

    fn gauss_forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        head: &GaussHeadP,
        x: Var,
    ) -> Result<LatentVars> {
        let mut cur = x;
        for p in &head.trunk {
            let pooled = tape.avg_pool2(cur)?;
            cur = self.block(tape, params, mode, p, pooled)?;
        }
        let pooled = tape.global_avg_pool(cur)?;
        let w = tape.load_param(params, head.head_w, mode);
        let b = tape.load_param(params, head.head_b, mode);
        let out = tape.linear_vec(pooled, w, b)?;
        let d = self.config.latent_dim;
        let mu = tape.slice_c(out, 0, d)?;
        let ls_raw = tape.slice_c(out, d, 2 * d)?;
        let log_sigma = tape.clamp(ls_raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
        Ok(LatentVars { mu, log_sigma })
    }

    /// Image-conditioned prior `p(z | x)`.
    pub fn prior(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x: Var,
    ) -> Result<LatentVars> {
        self.gauss_forward(tape, params, mode, &self.prior, x)
    }

    /// Annotation-conditioned posterior `q(z | x, y)`; `mask` is `[1, H, W]`.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x: Var,
        mask: Var,
    ) -> Result<LatentVars> {
        let (sx, sm) = (tape.shape(x).to_vec(), tape.shape(mask).to_vec());
        if sm.len() != 3 || sm[0] != 1 || sm[1..] != sx[1..] {
            return Err(Error::shape(
                "Backbone::posterior",
                format!("mask [1, {}, {}]", sx[1], sx[2]),
                format!("{sm:?}"),
            ));
        }
        let joint = tape.concat_c(&[x, mask])?;
        self.gauss_forward(tape, params, mode, &self.posterior, joint)
    }

    /// Reparameterized draw `z = mu + exp(log_sigma) * eps` with caller-
    /// supplied noise, keeping every source of randomness outside the graph.
    pub fn sample_latent(&self, tape: &mut Tape, latent: &LatentVars, eps: &Tensor) -> Result<Var> {
        if eps.shape() != [self.config.latent_dim] {
            return Err(Error::shape(
                "Backbone::sample_latent",
                format!("eps [{}]", self.config.latent_dim),
                format!("{:?}", eps.shape()),
            ));
        }
        let sigma = tape.exp(latent.log_sigma)?;
        let e = tape.constant(eps.clone());
        let scaled = tape.mul(sigma, e)?;
        tape.add(latent.mu, scaled)
    }

    /// Closed-form KL between diagonal Gaussians,
    /// `KL(q || p) = sum_d [ log s_p - log s_q + (s_q^2 + (mu_q - mu_p)^2) / (2 s_p^2) - 1/2 ]`.
    pub fn kl_divergence(&self, tape: &mut Tape, q: &LatentVars, p: &LatentVars) -> Result<Var> {
        let diff_ls = tape.sub(q.log_sigma, p.log_sigma)?;
        let var_ratio = {
            let two = tape.mul_const(diff_ls, 2.0)?;
            tape.exp(two)?
        };
        let dmu = tape.sub(q.mu, p.mu)?;
        let dmu2 = tape.mul(dmu, dmu)?;
        let inv_var_p = {
            let m = tape.mul_const(p.log_sigma, -2.0)?;
            tape.exp(m)?
        };
        let mahal = tape.mul(dmu2, inv_var_p)?;
        let inner = tape.add(var_ratio, mahal)?;
        let half = tape.mul_const(inner, 0.5)?;
        let neg_diff = tape.mul_const(diff_ls, -1.0)?;
        let per_dim = {
            let s = tape.add(neg_diff, half)?;
            tape.add_const(s, -0.5)?
        };
        tape.sum_all(per_dim)
    }

    /// Value-level snapshot of a tape latent.
    pub fn snapshot_latent(&self, tape: &Tape, latent: &LatentVars) -> GaussianLatent {
        GaussianLatent {
            mu: tape.value(latent.mu).clone(),
            log_sigma: tape.value(latent.log_sigma).clone(),
        }
    }

    // ---- decoder pieces (orchestrated by the model layer) ------------------

    /// Number of decoder trunk stages (`depth - 1`).
    pub fn trunk_stage_count(&self) -> usize {
        self.dec_trunk.len()
    }

    /// Decoder trunk stage. `idx` counts coarse to fine (0 consumes the
    /// coarsest feature); `up_from` is the previous decoder output, `skip`
    /// the matching encoder stage.
    pub fn decode_trunk_stage(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        idx: usize,
        up_from: Var,
        skip: Var,
    ) -> Result<Var> {
        let up = tape.upsample_nearest2(up_from)?;
        let cat = tape.concat_c(&[up, skip])?;
        self.block(tape, params, mode, &self.dec_trunk[idx], cat)
    }

    /// Final decoder stage: consumes the upsampled finest trunk feature
    /// together with the conditioning block (z and rater), producing the
    /// finest decoder feature map at input resolution.
    pub fn decode_final_stage(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        finest_trunk: Var,
        z: Var,
        rater: Option<usize>,
    ) -> Result<Var> {
        let up = tape.upsample_nearest2(finest_trunk)?;
        let (h, w) = {
            let s = tape.shape(up);
            (s[1], s[2])
        };
        let mut cond = condition_block(tape, z, rater, self.config.num_raters, h, w)?;
        if rater.is_none() {
            // Absent rater: the one-hot block is all zeros so the stage sees a
            // fixed channel count either way.
            let zeros = tape.constant(Tensor::zeros(&[self.config.num_raters, h, w]));
            cond = tape.concat_c(&[cond, zeros])?;
        }
        let cat = tape.concat_c(&[up, cond])?;
        self.block(tape, params, mode, &self.dec_final, cat)
    }

    /// 1x1 projection from the finest decoder feature to one logit channel.
    pub fn logit_head(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        feature: Var,
    ) -> Result<Var> {
        self.conv(tape, params, mode, &self.head, feature, Conv2dSpec::default())
    }
}

/// Spatial conditioning block for the finest decoder stage: the latent vector
/// broadcast over the plane, plus — when a rater is named — a one-hot channel
/// block marking it. Channel count is `latent_dim` without a rater and
/// `latent_dim + num_raters` with one.
pub fn condition_block(
    tape: &mut Tape,
    z: Var,
    rater: Option<usize>,
    num_raters: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let zb = tape.broadcast_chw(z, h, w)?;
    match rater {
        None => Ok(zb),
        Some(r) => {
            if r >= num_raters {
                return Err(Error::invalid(
                    "condition_block",
                    format!("rater index {r} out of range for {num_raters} raters"),
                ));
            }
            let mut onehot = Tensor::zeros(&[num_raters, h, w]);
            let start = r * h * w;
            onehot.data_mut()[start..start + h * w].fill(1.0);
            let oh = tape.constant(onehot);
            tape.concat_c(&[zb, oh])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn desk() -> (Backbone, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = rng_from_seed(42);
        let bb = Backbone::new(BackboneConfig::default(), &mut params, &mut rng).unwrap();
        (bb, params)
    }

    #[test]
    fn encoder_stage_geometry() {
        // 1x32x32 at depth 3 -> stages at 16^2, 8^2, 4^2 with doubling widths.
        let (bb, params) = desk();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 32, 32]));
        let f = bb.encode(&mut tape, &params, ParamMode::Frozen, x).unwrap();
        let shapes: Vec<Vec<usize>> = f.stages.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16], vec![16, 8, 8], vec![32, 4, 4]]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (bb, params) = desk();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 20, 20])); // 20 not divisible by 8
        assert!(bb.encode(&mut tape, &params, ParamMode::Frozen, x).is_err());
    }

    #[test]
    fn condition_block_channel_law() {
        // Naming a rater adds exactly num_raters channels.
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[6]));
        let without = condition_block(&mut tape, z, None, 4, 8, 8).unwrap();
        let with = condition_block(&mut tape, z, Some(2), 4, 8, 8).unwrap();
        assert_eq!(tape.shape(without)[0], 6);
        assert_eq!(tape.shape(with)[0], 10);
        // The one-hot block marks exactly plane 2.
        let v = tape.value(with);
        let hw = 64;
        for r in 0..4 {
            let plane: f64 = v.data()[(6 + r) * hw..(7 + r) * hw].iter().sum();
            assert_eq!(plane, if r == 2 { hw as f64 } else { 0.0 });
        }
    }

    #[test]
    fn out_of_range_rater_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[6]));
        assert!(condition_block(&mut tape, z, Some(4), 4, 8, 8).is_err());
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let (bb, _params) = desk();
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![6], vec![0.3; 6]).unwrap());
        let ls = tape.constant(Tensor::new(vec![6], vec![-0.2; 6]).unwrap());
        let q = LatentVars { mu, log_sigma: ls };
        let kl = bb.kl_divergence(&mut tape, &q, &q).unwrap();
        assert!(tape.value(kl).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_scalar_closed_form() {
        // KL(N(1, e^0.4) || N(0, 1)) per dimension, standard formula.
        let (bb, _params) = desk();
        let mut tape = Tape::new();
        let muq = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let lsq = tape.constant(Tensor::new(vec![2], vec![0.2, 0.2]).unwrap());
        let mup = tape.constant(Tensor::zeros(&[2]));
        let lsp = tape.constant(Tensor::zeros(&[2]));
        let q = LatentVars { mu: muq, log_sigma: lsq };
        let p = LatentVars { mu: mup, log_sigma: lsp };
        let kl = bb.kl_divergence(&mut tape, &q, &p).unwrap();
        let per_dim = -0.2 + ((0.4f64).exp() + 1.0) / 2.0 - 0.5;
        assert!((tape.value(kl).item().unwrap() - 2.0 * per_dim).abs() < 1e-12);
    }

    #[test]
    fn sample_latent_is_mu_plus_scaled_noise() {
        let (bb, _params) = desk();
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![6], vec![0.5; 6]).unwrap());
        let ls = tape.constant(Tensor::new(vec![6], vec![(2.0f64).ln(); 6]).unwrap());
        let latent = LatentVars { mu, log_sigma: ls };
        let eps = Tensor::new(vec![6], vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.25]).unwrap();
        let z = bb.sample_latent(&mut tape, &latent, &eps).unwrap();
        let zv = tape.value(z).data();
        for (i, &e) in eps.data().iter().enumerate() {
            assert!((zv[i] - (0.5 + 2.0 * e)).abs() < 1e-12);
        }
    }

    /// sigma -> 0 limit: with log-sigma pinned far below the clamp floor the
    /// draw collapses to mu within 1e-4 * |eps|.
    #[test]
    fn collapsed_sigma_returns_mu() {
        let (bb, _params) = desk();
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![6], vec![0.7; 6]).unwrap());
        let raw = tape.constant(Tensor::new(vec![6], vec![-50.0; 6]).unwrap());
        let ls = tape.clamp(raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).unwrap();
        let latent = LatentVars { mu, log_sigma: ls };
        let eps = Tensor::new(vec![6], vec![3.0; 6]).unwrap();
        let z = bb.sample_latent(&mut tape, &latent, &eps).unwrap();
        for &v in tape.value(z).data() {
            assert!((v - 0.7).abs() <= 1e-4 * 3.0);
        }
    }
}
