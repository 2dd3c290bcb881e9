//! Attention-based feature harmonizer.
//!
//! A small bank of learnable tokens cross-attends into each modulated decoder
//! feature map (tokens as queries, flattened spatial positions as keys and
//! values), the attended tokens are pooled and passed through a shared MLP,
//! and a per-layer zero-initialized head emits a channel-wise affine
//! correction `(gamma, beta)` with `gamma = 1 + delta_gamma`. Zero heads make
//! the module an exact identity at initialization, so enabling it never
//! perturbs a fresh model; a quadratic penalty on `(gamma - 1, beta)` keeps
//! the corrections small during training.

use serde::{Deserialize, Serialize};

use crate::backbone::ParamMode;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HarmonizerConfig {
    /// Number of learnable tokens in the bank.
    pub num_tokens: usize,
    /// Dimension of tokens and of the shared attention space.
    pub token_dim: usize,
    /// Hidden width of the shared MLP.
    pub hidden_dim: usize,
    /// Channel count of each decoder feature map the harmonizer touches,
    /// indexed by decoder stage id (0 = finest).
    pub layer_channels: Vec<usize>,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        HarmonizerConfig {
            num_tokens: 4,
            token_dim: 16,
            hidden_dim: 32,
            layer_channels: vec![8, 8, 16],
        }
    }
}

impl HarmonizerConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "HarmonizerConfig::validate";
        if self.num_tokens == 0 || self.token_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(OP, "token bank dimensions must be positive".to_string()));
        }
        if self.layer_channels.is_empty() || self.layer_channels.contains(&0) {
            return Err(Error::invalid(OP, "layer_channels must be non-empty and positive".to_string()));
        }
        Ok(())
    }
}

/// Per-application record of the emitted correction, kept so the loss can
/// penalize deviations from identity.
#[derive(Debug, Clone, Copy)]
pub struct ModulationRecord {
    pub delta_gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct Harmonizer {
    pub config: HarmonizerConfig,
    tokens: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    /// Per-layer input projection (weight `[C_l, token_dim]`, bias).
    proj: Vec<(ParamId, ParamId)>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    /// Per-layer affine head (weight `[token_dim, 2 C_l]`, bias), zero-init.
    heads: Vec<(ParamId, ParamId)>,
}

fn register_matrix(
    params: &mut ParamSet,
    rng: &mut Prng,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<ParamId> {
    let s = 1.0 / (rows as f64).sqrt();
    let t = Tensor::new(vec![rows, cols], crate::rng::uniform_vec(rng, rows * cols, -s, s))?;
    params.register(name.to_string(), t)
}

impl Harmonizer {
    pub fn new(config: HarmonizerConfig, params: &mut ParamSet, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let tokens = register_matrix(params, rng, "harmonizer.tokens", config.num_tokens, d)?;
        let wq = register_matrix(params, rng, "harmonizer.wq", d, d)?;
        let wk = register_matrix(params, rng, "harmonizer.wk", d, d)?;
        let wv = register_matrix(params, rng, "harmonizer.wv", d, d)?;

        let mut proj = Vec::with_capacity(config.layer_channels.len());
        let mut heads = Vec::with_capacity(config.layer_channels.len());
        for (l, &c) in config.layer_channels.iter().enumerate() {
            let w = register_matrix(params, rng, &format!("harmonizer.proj.{l}.w"), c, d)?;
            let b = params.register(format!("harmonizer.proj.{l}.b"), Tensor::zeros(&[d]))?;
            proj.push((w, b));
            // Zero head: the module starts as an exact identity.
            let hw = params.register(format!("harmonizer.head.{l}.w"), Tensor::zeros(&[d, 2 * c]))?;
            let hb = params.register(format!("harmonizer.head.{l}.b"), Tensor::zeros(&[2 * c]))?;
            heads.push((hw, hb));
        }

        let f1w = register_matrix(params, rng, "harmonizer.mlp.fc1.w", d, config.hidden_dim)?;
        let f1b = params.register("harmonizer.mlp.fc1.b".to_string(), Tensor::zeros(&[config.hidden_dim]))?;
        let f2w = register_matrix(params, rng, "harmonizer.mlp.fc2.w", config.hidden_dim, d)?;
        let f2b = params.register("harmonizer.mlp.fc2.b".to_string(), Tensor::zeros(&[d]))?;

        Ok(Harmonizer {
            config,
            tokens,
            wq,
            wk,
            wv,
            proj,
            fc1: (f1w, f1b),
            fc2: (f2w, f2b),
            heads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.layer_channels.len()
    }

    /// Applies the harmonizer to one decoder feature map `[C_l, H, W]`,
    /// returning the modulated map and the correction record.
    pub fn modulate(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        mode: ParamMode,
        layer: usize,
        feat: Var,
    ) -> Result<(Var, ModulationRecord)> {
        const OP: &str = "Harmonizer::modulate";
        if layer >= self.num_layers() {
            return Err(Error::invalid(
                OP,
                format!("layer {layer} out of range for {} layers", self.num_layers()),
            ));
        }
        let c = self.config.layer_channels[layer];
        let shape = tape.shape(feat).to_vec();
        if shape.len() != 3 || shape[0] != c {
            return Err(Error::shape(OP, format!("[{c}, H, W]"), format!("{shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);

        // Flatten spatial positions into tokens of dim C, project to the
        // shared attention space.
        let flat = tape.reshape(feat, vec![c, h * w])?;
        let pos = tape.transpose2d(flat)?; // [L, C]
        let (pw, pb) = self.proj[layer];
        let pw = tape.load_param(params, pw, mode);
        let pb = tape.load_param(params, pb, mode);
        let x = tape.linear(pos, pw, pb)?; // [L, D]

        let tokens = tape.load_param(params, self.tokens, mode);
        let wq = tape.load_param(params, self.wq, mode);
        let wk = tape.load_param(params, self.wk, mode);
        let wv = tape.load_param(params, self.wv, mode);
        let q = tape.matmul(tokens, wq)?; // [M, D]
        let k = tape.matmul(x, wk)?; // [L, D]
        let v = tape.matmul(x, wv)?; // [L, D]
        let attended = tape.scaled_dot_attention(q, k, v)?; // [M, D]
        let pooled = tape.mean_rows(attended)?; // [D]

        let (f1w, f1b) = self.fc1;
        let (f2w, f2b) = self.fc2;
        let f1w = tape.load_param(params, f1w, mode);
        let f1b = tape.load_param(params, f1b, mode);
        let f2w = tape.load_param(params, f2w, mode);
        let f2b = tape.load_param(params, f2b, mode);
        let hid = tape.linear_vec(pooled, f1w, f1b)?;
        let hid = tape.leaky_relu(hid, crate::backbone::LEAK)?;
        let emb = tape.linear_vec(hid, f2w, f2b)?; // [D]

        let (hw_id, hb_id) = self.heads[layer];
        let hw = tape.load_param(params, hw_id, mode);
        let hb = tape.load_param(params, hb_id, mode);
        let out = tape.linear_vec(emb, hw, hb)?; // [2C]
        let delta_gamma = tape.slice_c(out, 0, c)?;
        let beta = tape.slice_c(out, c, 2 * c)?;

        let gamma = tape.add_const(delta_gamma, 1.0)?;
        let scaled = tape.mul_chan(feat, gamma)?;
        let modulated = tape.add_chan(scaled, beta)?;
        Ok((modulated, ModulationRecord { delta_gamma, beta }))
    }

    /// Quadratic deviation-from-identity penalty
    /// `sum_l (||gamma_l - 1||^2 + ||beta_l||^2)` over the recorded
    /// applications. Empty input yields a constant zero.
    pub fn penalty(&self, tape: &mut Tape, records: &[ModulationRecord]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for r in records {
            let dg2 = tape.mul(r.delta_gamma, r.delta_gamma)?;
            let b2 = tape.mul(r.beta, r.beta)?;
            let s1 = tape.sum_all(dg2)?;
            let s2 = tape.sum_all(b2)?;
            let s = tape.add(s1, s2)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        })
    }
}
