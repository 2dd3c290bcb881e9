//! Frequency-domain rater personalization.
//!
//! The module conditions on the finest harmonized decoder feature map,
//! projects it to a quarter of its channels, and splits it into Haar
//! frequency bands. The three high-frequency bands drive a rater-aware
//! prompt: a softmax-weighted, style-scaled sum over a bank of learnable
//! prompt maps. A small large-kernel-attention branch (depthwise 3x3 →
//! dilated depthwise 3x3 → zero-initialized 1x1 gate) recalibrates the
//! high-frequency content, a local-context conv pools everything into a
//! query vector, and cross-attention over a bank of frozen prior draws
//! anchors the result to the image's latent distribution. Inverse-transform
//! pooling plus a final affine over the incoming latent yields the
//! rater-adaptive latent `z'` that replaces `z` at the decoder.

use serde::{Deserialize, Serialize};

use crate::backbone::{GaussianLatent, ParamMode};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PersonalizerConfig {
    /// Channel count `D` of the conditioning feature map; divisible by 4.
    pub feature_channels: usize,
    /// Spatial extent of the conditioning map (both even).
    pub feature_h: usize,
    pub feature_w: usize,
    /// Number of prompt components `N`.
    pub num_prompts: usize,
    pub num_raters: usize,
    pub latent_dim: usize,
}

impl Default for PersonalizerConfig {
    fn default() -> Self {
        PersonalizerConfig {
            feature_channels: 8,
            feature_h: 16,
            feature_w: 16,
            num_prompts: 4,
            num_raters: 4,
            latent_dim: 6,
        }
    }
}

impl PersonalizerConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "PersonalizerConfig::validate";
        if self.feature_channels == 0 || self.feature_channels % 4 != 0 {
            return Err(Error::invalid(
                OP,
                format!("feature_channels must be a positive multiple of 4, got {}", self.feature_channels),
            ));
        }
        if self.feature_h % 2 != 0 || self.feature_w % 2 != 0 || self.feature_h == 0 || self.feature_w == 0 {
            return Err(Error::invalid(
                OP,
                format!("feature extent {}x{} must be even and positive", self.feature_h, self.feature_w),
            ));
        }
        if self.num_prompts < 2 {
            return Err(Error::invalid(OP, format!("num_prompts must be >= 2, got {}", self.num_prompts)));
        }
        if self.num_raters == 0 || self.latent_dim == 0 {
            return Err(Error::invalid(OP, "num_raters and latent_dim must be positive".to_string()));
        }
        Ok(())
    }

    /// Channels after the reducing projection (`D/4`).
    pub fn reduced_channels(&self) -> usize {
        self.feature_channels / 4
    }

    /// Channels of the concatenated high-frequency bands (`3D/4`).
    pub fn highfreq_channels(&self) -> usize {
        3 * self.reduced_channels()
    }

    /// Spatial extent of the frequency bands.
    pub fn band_extent(&self) -> (usize, usize) {
        (self.feature_h / 2, self.feature_w / 2)
    }
}

/// Latent draws from the frozen image-conditioned prior, used as keys and
/// values in personalization cross-attention. Rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBank {
    samples: Tensor, // [M, latent_dim]
}

impl PriorBank {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.rank() != 2 || samples.shape()[0] == 0 {
            return Err(Error::shape("PriorBank::new", "[M >= 1, D]", format!("{:?}", samples.shape())));
        }
        if !samples.is_all_finite() {
            return Err(Error::invalid("PriorBank::new", "bank entries must be finite".to_string()));
        }
        Ok(PriorBank { samples })
    }

    /// Draws `m` fresh samples from a frozen prior snapshot.
    pub fn from_latent(latent: &GaussianLatent, m: usize, rng: &mut Prng) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("PriorBank::from_latent", "bank size must be >= 1".to_string()));
        }
        let d = latent.dim();
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            data.extend_from_slice(latent.sample(rng).data());
        }
        Ok(PriorBank { samples: Tensor::new(vec![m, d], data)? })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }
}

#[derive(Debug, Clone)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

/// The parameterized personalization module. All tensors register under the
/// `personalizer.` prefix so phase-2 training can select exactly this family.
#[derive(Debug, Clone)]
pub struct Personalizer {
    pub config: PersonalizerConfig,
    reduce: ConvP,
    pwc: ConvP,
    prompts: ParamId,
    styles: ParamId,
    compose: ConvP,
    lka_dw1: ConvP,
    lka_dw2: ConvP,
    lka_gate: ConvP,
    lka_out: ConvP,
    ctx: ConvP,
    pool_w: ParamId,
    pool_b: ParamId,
    final_w: ParamId,
    final_b: ParamId,
}

fn conv_init(
    params: &mut ParamSet,
    rng: &mut Prng,
    name: &str,
    c_out: usize,
    c_in_g: usize,
    k: usize,
) -> Result<ConvP> {
    let fan_in = (c_in_g * k * k) as f64;
    let s = 1.0 / fan_in.sqrt();
    let w = Tensor::new(
        vec![c_out, c_in_g, k, k],
        crate::rng::uniform_vec(rng, c_out * c_in_g * k * k, -s, s),
    )?;
    Ok(ConvP {
        w: params.register(format!("{name}.w"), w)?,
        b: params.register(format!("{name}.b"), Tensor::zeros(&[c_out]))?,
    })
}

impl Personalizer {
    pub fn new(config: PersonalizerConfig, params: &mut ParamSet, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_channels;
        let r = config.reduced_channels();
        let hf = config.highfreq_channels();
        let n = config.num_prompts;
        let (bh, bw) = config.band_extent();
        let lat = config.latent_dim;

        let reduce = conv_init(params, rng, "personalizer.reduce", r, d, 1)?;
        let pwc = conv_init(params, rng, "personalizer.pwc", n, hf, 1)?;
        let prompts = params.register(
            "personalizer.prompts".to_string(),
            Tensor::new(vec![n, hf, bh, bw], crate::rng::uniform_vec(rng, n * hf * bh * bw, -0.25, 0.25))?,
        )?;
        // Style rows start near one with per-rater jitter so raters separate
        // from the first step.
        let styles = params.register(
            "personalizer.styles".to_string(),
            Tensor::new(
                vec![config.num_raters, n],
                crate::rng::uniform_vec(rng, config.num_raters * n, 0.75, 1.25),
            )?,
        )?;
        let compose = conv_init(params, rng, "personalizer.compose", hf, hf, 3)?;

        let lka_dw1 = conv_init(params, rng, "personalizer.lka.dw1", hf, 1, 3)?;
        let lka_dw2 = conv_init(params, rng, "personalizer.lka.dw2", hf, 1, 3)?;
        // Unit-bias gate: the attention map starts near 1 (gating close to
        // identity) while small weights keep the prompt path live, so rater
        // styles already separate outputs at initialization.
        let gs = 1.0 / (hf as f64).sqrt();
        let gate_w = params.register(
            "personalizer.lka.gate.w".to_string(),
            Tensor::new(vec![hf, hf, 1, 1], crate::rng::uniform_vec(rng, hf * hf, -gs, gs))?,
        )?;
        let gate_b = params.register("personalizer.lka.gate.b".to_string(), Tensor::full(&[hf], 1.0))?;
        let lka_gate = ConvP { w: gate_w, b: gate_b };
        let lka_out = conv_init(params, rng, "personalizer.lka.out", hf, hf, 1)?;

        let ctx = conv_init(params, rng, "personalizer.ctx", lat, hf + r, 3)?;

        let s = 1.0 / (r as f64).sqrt();
        let pool_w = params.register(
            "personalizer.pool.w".to_string(),
            Tensor::new(vec![r, lat], crate::rng::uniform_vec(rng, r * lat, -s, s))?,
        )?;
        let pool_b = params.register("personalizer.pool.b".to_string(), Tensor::zeros(&[lat]))?;

        let sf = 1.0 / ((2 * lat) as f64).sqrt();
        let final_w = params.register(
            "personalizer.final.w".to_string(),
            Tensor::new(vec![2 * lat, lat], crate::rng::uniform_vec(rng, 2 * lat * lat, -sf, sf))?,
        )?;
        let final_b = params.register("personalizer.final.b".to_string(), Tensor::zeros(&[lat]))?;

        Ok(Personalizer {
            config,
            reduce,
            pwc,
            prompts,
            styles,
            compose,
            lka_dw1,
            lka_dw2,
            lka_gate,
            lka_out,
            ctx,
            pool_w,
            pool_b,
            final_w,
            final_b,
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

    /// Channel-reducing 1x1 projection `D -> D/4`.
    pub fn project_reduce(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.config.feature_channels {
            return Err(Error::shape(
                "Personalizer::project_reduce",
                format!("[{}, H, W]", self.config.feature_channels),
                format!("{shape:?}"),
            ));
        }
        self.conv(tape, params, mode, &self.reduce, x, Conv2dSpec::default())
    }

    /// Softmax simplex weights over prompt components: 1x1 conv to `N`
    /// channels, global average pool, softmax.
    pub fn prompt_weights(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x_h: Var,
    ) -> Result<Var> {
        let scored = self.conv(tape, params, mode, &self.pwc, x_h, Conv2dSpec::default())?;
        let pooled = tape.global_avg_pool(scored)?;
        tape.softmax(pooled, 0)
    }

    /// Context-conditioned, style-scaled prompt:
    /// `Conv3x3( sum_c w_c * styles[rater, c] * P_c )`.
    pub fn compose_prompt(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        rater: usize,
        w: Var,
    ) -> Result<Var> {
        const OP: &str = "Personalizer::compose_prompt";
        let n = self.config.num_prompts;
        if rater >= self.config.num_raters {
            return Err(Error::invalid(
                OP,
                format!("rater index {rater} out of range for {} raters", self.config.num_raters),
            ));
        }
        if tape.shape(w) != [n] {
            return Err(Error::shape(OP, format!("[{n}]"), format!("{:?}", tape.shape(w))));
        }
        let styles = tape.load_param(params, self.styles, mode);
        let row = tape.slice_c(styles, rater, rater + 1)?; // [1, N]
        let row = tape.reshape(row, vec![n])?;
        let coeffs = tape.mul(w, row)?; // [N]

        let prompts = tape.load_param(params, self.prompts, mode);
        let hf = self.config.highfreq_channels();
        let (bh, bw) = self.config.band_extent();
        let mut acc: Option<Var> = None;
        for c in 0..n {
            let comp = tape.slice_c(prompts, c, c + 1)?; // [1, hf, bh, bw]
            let comp = tape.reshape(comp, vec![hf, bh, bw])?;
            let coef = tape.slice_c(coeffs, c, c + 1)?; // [1]
            let scaled = tape.scale_by_scalar(comp, coef)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        let summed = acc.expect("num_prompts >= 2");
        self.conv(tape, params, mode, &self.compose, summed, Conv2dSpec::padded(1))
    }

    /// Large-kernel-attention recalibration of the high-frequency stack:
    /// `a = Conv1x1(DWConv_dil2(DWConv(X_H + P)))`, `X'_H = Conv1x1(a ⊙ X_H)`.
    pub fn lka_recalibrate(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x_h: Var,
        prompt: Var,
    ) -> Result<Var> {
        if tape.shape(x_h) != tape.shape(prompt) {
            return Err(Error::shape(
                "Personalizer::lka_recalibrate",
                format!("{:?}", tape.shape(x_h)),
                format!("{:?}", tape.shape(prompt)),
            ));
        }
        let hf = self.config.highfreq_channels();
        let u = tape.add(x_h, prompt)?;
        let dw_spec = Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: hf };
        let dw2_spec = Conv2dSpec { stride: 1, padding: 2, dilation: 2, groups: hf };
        let a = self.conv(tape, params, mode, &self.lka_dw1, u, dw_spec)?;
        let a = self.conv(tape, params, mode, &self.lka_dw2, a, dw2_spec)?;
        let a = self.conv(tape, params, mode, &self.lka_gate, a, Conv2dSpec::default())?;
        let gated = tape.mul(a, x_h)?;
        self.conv(tape, params, mode, &self.lka_out, gated, Conv2dSpec::default())
    }

    /// Pools recalibrated high-frequency content and the low-frequency band
    /// into a compact context vector of width `latent_dim`.
    pub fn local_context(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        x_hp: Var,
        x_ll: Var,
    ) -> Result<Var> {
        let (sh, sl) = (tape.shape(x_hp).to_vec(), tape.shape(x_ll).to_vec());
        if sh[1..] != sl[1..] {
            return Err(Error::shape(
                "Personalizer::local_context",
                format!("matching extents, lhs {sh:?}"),
                format!("{sl:?}"),
            ));
        }
        let cat = tape.concat_c(&[x_hp, x_ll])?;
        let feat = self.conv(tape, params, mode, &self.ctx, cat, Conv2dSpec::padded(1))?;
        tape.global_avg_pool(feat)
    }

    /// Scaled dot-product attention of the context query over the prior
    /// bank; bank rows serve as both keys and values.
    pub fn prior_cross_attend(&self, tape: &mut Tape, x_d: Var, bank: &PriorBank) -> Result<Var> {
        const OP: &str = "Personalizer::prior_cross_attend";
        if bank.is_empty() {
            return Err(Error::invalid(OP, "prior bank is empty".to_string()));
        }
        let lat = self.config.latent_dim;
        if bank.latent_dim() != lat || tape.shape(x_d) != [lat] {
            return Err(Error::shape(
                OP,
                format!("query [{lat}] and bank [M, {lat}]"),
                format!("query {:?}, bank {:?}", tape.shape(x_d), bank.samples.shape()),
            ));
        }
        let q = tape.reshape(x_d, vec![1, lat])?;
        let kv = tape.constant(bank.samples.clone());
        let out = tape.scaled_dot_attention(q, kv, kv)?;
        tape.reshape(out, vec![lat])
    }

    /// Full personalization chain from the finest harmonized decoder feature
    /// map to the rater-adaptive latent `z'`.
    pub fn personalize_latent(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        cond_feat: Var,
        z: Var,
        rater: usize,
        bank: &PriorBank,
    ) -> Result<Var> {
        let lat = self.config.latent_dim;
        if tape.shape(z) != [lat] {
            return Err(Error::shape(
                "Personalizer::personalize_latent",
                format!("z [{lat}]"),
                format!("{:?}", tape.shape(z)),
            ));
        }
        let reduced = self.project_reduce(tape, params, mode, cond_feat)?;
        let bands = tape.dwt2(reduced)?; // [4r, bh, bw], LL|LH|HL|HH
        let r = self.config.reduced_channels();
        let x_ll = tape.slice_c(bands, 0, r)?;
        let x_h = tape.slice_c(bands, r, 4 * r)?; // LH|HL|HH stacked

        let w = self.prompt_weights(tape, params, mode, x_h)?;
        let prompt = self.compose_prompt(tape, params, mode, rater, w)?;
        let x_hp = self.lka_recalibrate(tape, params, mode, x_h, prompt)?;
        let x_d = self.local_context(tape, params, mode, x_hp, x_ll)?;
        let attended = self.prior_cross_attend(tape, x_d, bank)?;

        // Resynthesize with the recalibrated high-frequency bands and pool.
        let resynth_bands = tape.concat_c(&[x_ll, x_hp])?;
        let resynth = tape.idwt2(resynth_bands)?;
        let pooled = tape.global_avg_pool(resynth)?; // [r]
        let pw = tape.load_param(params, self.pool_w, mode);
        let pb = tape.load_param(params, self.pool_b, mode);
        let pooled_lat = tape.linear_vec(pooled, pw, pb)?; // [lat]

        let fused = tape.add(pooled_lat, attended)?;
        let cat = tape.concat_c(&[fused, z])?; // [2 lat]
        let fw = tape.load_param(params, self.final_w, mode);
        let fb = tape.load_param(params, self.final_b, mode);
        tape.linear_vec(cat, fw, fb)
    }
}
