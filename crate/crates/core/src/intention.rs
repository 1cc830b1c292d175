//! Survival-based intention network.
//!
//! Per step: status/action embeddings feed a small VAE whose latent `z` is the
//! hidden intent snippet. Three LSTMs read `[z ‖ f]`, `[z ‖ S^vec]` and
//! `[z ‖ A^vec]`; their hidden states drive a hazard whose cumulative sum
//! gives the survival `S(j)`. Attention fuses the status-tree, action-tree and
//! survival predictions, and `P̂_j = S·P_j + (1−S)·P̂_{j−1}`.
//!
//! Parameters live in one flat vector so the optimizer and the
//! finite-difference checks treat every tensor alike. Backpropagation is
//! written out by hand.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HAZARD_BRANCHES: usize = 3;
const Y_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntentionConfig {
    pub d_e: usize,
    pub d_z: usize,
    pub d_h: usize,
    /// Encoder hidden width.
    pub d_enc: usize,
    /// Attention hidden width.
    pub d_att: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Decoder reconstruction weight. 0 keeps the decoder out of training.
    pub gamma_rec: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Survival threshold for `t_die`.
    pub epsilon: f64,
    /// Replace `z` by `[z ‖ Emb^I(index)]` in the LSTMs and attention.
    pub index_embedding: bool,
    /// Initial hazard bias per branch.
    pub hazard_bias: f64,
    /// Training weight of positive sequences; `None` uses `N_neg / N_pos`.
    pub pos_weight: Option<f64>,
}

impl Default for IntentionConfig {
    fn default() -> Self {
        IntentionConfig {
            d_e: 16,
            d_z: 3,
            d_h: 32,
            d_enc: 16,
            d_att: 16,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            gamma_rec: 0.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            epsilon: 0.01,
            index_embedding: false,
            hazard_bias: -4.0,
            pos_weight: None,
        }
    }
}

impl IntentionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_e, self.d_z, self.d_h, self.d_enc, self.d_att, self.batch_size];
        if dims.contains(&0) {
            return Err(Error::Config("intention dimensions and batch_size must be positive".into()));
        }
        if self.d_z > 16 {
            return Err(Error::Config("intention.d_z must be at most 16".into()));
        }
        if [self.gamma1, self.gamma2, self.gamma3, self.gamma_rec].iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("intention loss weights must be >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("intention.epsilon must lie in (0, 0.5)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("intention.learning_rate must be positive".into()));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config("intention.pos_weight must be positive".into()));
        }
        Ok(())
    }
}

/// Shapes that fix the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub k_status: usize,
    pub k_action: usize,
    pub n_f: usize,
    pub n_s: usize,
    pub n_a: usize,
    pub d_e: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_enc: usize,
    pub d_att: usize,
    pub index_embedding: bool,
}

impl Dims {
    pub fn new(k_status: usize, k_action: usize, n_f: usize, n_s: usize, n_a: usize, cfg: &IntentionConfig) -> Self {
        Dims {
            k_status,
            k_action,
            n_f,
            n_s,
            n_a,
            d_e: cfg.d_e,
            d_z: cfg.d_z,
            d_h: cfg.d_h,
            d_enc: cfg.d_enc,
            d_att: cfg.d_att,
            index_embedding: cfg.index_embedding,
        }
    }

    pub fn n_indices(&self) -> usize {
        1 << self.d_z
    }

    /// Width of the latent as seen by the LSTMs and attention.
    pub fn d_zz(&self) -> usize {
        self.d_z + if self.index_embedding { self.d_e } else { 0 }
    }

    fn branch_input(&self, b: usize) -> usize {
        [self.n_f, self.n_s, self.n_a][b]
    }

    /// Attention branch inputs: S → `[f ‖ S^vec]`, A → `[f ‖ A^vec]`, I → `[f ‖ z]`.
    fn att_input(&self, t: usize) -> usize {
        self.n_f + [self.n_s, self.n_a, self.d_zz()][t]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Offsets {
    emb_s: usize,
    emb_a: usize,
    emb_i: usize,
    enc_w: usize,
    enc_b: usize,
    mu_w: usize,
    mu_b: usize,
    sig_w: usize,
    sig_b: usize,
    dec1_w: usize,
    dec1_b: usize,
    dec2_w: usize,
    dec2_b: usize,
    lstm_w: [usize; 3],
    lstm_b: [usize; 3],
    haz_w: [usize; 3],
    haz_b: [usize; 3],
    att_w: [usize; 3],
    att_v: usize,
}

const BRANCH: [&str; 3] = ["f", "s", "a"];
const ATT: [&str; 3] = ["s", "a", "i"];

fn layout(d: &Dims) -> (Offsets, Vec<TensorSpec>) {
    let mut specs = Vec::new();
    let mut off = 0;
    let mut add = |name: String, rows: usize, cols: usize| {
        specs.push(TensorSpec { name, rows, cols, offset: off });
        off += rows * cols;
        off - rows * cols
    };
    let emb_s = add("emb_s".into(), d.k_status, d.d_e);
    let emb_a = add("emb_a".into(), d.k_action, d.d_e);
    let emb_i = add("emb_i".into(), if d.index_embedding { d.n_indices() } else { 0 }, d.d_e);
    let enc_w = add("enc_w".into(), d.d_enc, 2 * d.d_e);
    let enc_b = add("enc_b".into(), d.d_enc, 1);
    let mu_w = add("mu_w".into(), d.d_z, d.d_enc);
    let mu_b = add("mu_b".into(), d.d_z, 1);
    let sig_w = add("sig_w".into(), d.d_z, d.d_enc);
    let sig_b = add("sig_b".into(), d.d_z, 1);
    let dec1_w = add("dec1_w".into(), d.d_enc, d.d_z);
    let dec1_b = add("dec1_b".into(), d.d_enc, 1);
    let dec2_w = add("dec2_w".into(), 2 * d.d_e, d.d_enc);
    let dec2_b = add("dec2_b".into(), 2 * d.d_e, 1);
    let mut lstm_w = [0; 3];
    let mut lstm_b = [0; 3];
    for b in 0..3 {
        lstm_w[b] = add(format!("lstm_{}_w", BRANCH[b]), 4 * d.d_h, d.d_zz() + d.branch_input(b) + d.d_h);
        lstm_b[b] = add(format!("lstm_{}_b", BRANCH[b]), 4 * d.d_h, 1);
    }
    let mut haz_w = [0; 3];
    let mut haz_b = [0; 3];
    for b in 0..3 {
        haz_w[b] = add(format!("hazard_{}_w", BRANCH[b]), 1, d.d_h);
        haz_b[b] = add(format!("hazard_{}_b", BRANCH[b]), 1, 1);
    }
    let mut att_w = [0; 3];
    for t in 0..3 {
        att_w[t] = add(format!("att_{}_w", ATT[t]), d.d_att, d.att_input(t));
    }
    let att_v = add("att_v".into(), 1, d.d_att);
    (
        Offsets {
            emb_s,
            emb_a,
            emb_i,
            enc_w,
            enc_b,
            mu_w,
            mu_b,
            sig_w,
            sig_b,
            dec1_w,
            dec1_b,
            dec2_w,
            dec2_b,
            lstm_w,
            lstm_b,
            haz_w,
            haz_b,
            att_w,
            att_v,
        },
        specs,
    )
}

/// One observation step of one address.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// 0-based status cluster.
    pub status: usize,
    /// 0-based action cluster.
    pub action: usize,
    pub f: Vec<f64>,
    pub s_vec: Vec<f64>,
    pub a_vec: Vec<f64>,
    /// Malicious probability from the status tree model.
    pub p_s: f64,
    /// Malicious probability from the action tree model.
    pub p_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub address: String,
    pub label: u8,
    pub steps: Vec<StepInput>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_rec: f64,
}

impl From<&IntentionConfig> for LossWeights {
    fn from(c: &IntentionConfig) -> Self {
        LossWeights {
            gamma1: c.gamma1,
            gamma2: c.gamma2,
            gamma3: c.gamma3,
            gamma_rec: c.gamma_rec,
        }
    }
}

/// Unweighted per-term sums (each already multiplied by √t) and the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub prediction: f64,
    pub vae: f64,
    pub consistency: f64,
    /// Count of sign flips of `ŷ − 0.5` between consecutive steps.
    pub consistency_discrete: f64,
    pub earliness: f64,
    pub reconstruction: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.prediction += o.prediction;
        self.vae += o.vae;
        self.consistency += o.consistency;
        self.consistency_discrete += o.consistency_discrete;
        self.earliness += o.earliness;
        self.reconstruction += o.reconstruction;
    }
}

/// Per-step inference output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub t: usize,
    /// `P̂_j[1]`.
    pub p_malicious: f64,
    /// `P_j[1]` before survival smoothing.
    pub p_fused: f64,
    pub survival: f64,
    pub hazard: f64,
    pub alpha: [f64; 3],
    pub intention_index: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressPrediction {
    pub address: String,
    pub steps: Vec<StepOutput>,
    /// First step with `S ≤ ε`.
    pub t_die: Option<usize>,
    pub motif: Vec<usize>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 { x + (-x).exp() } else { x.exp().ln_1p() }
}

pub fn softmax3(a: [f64; 3]) -> [f64; 3] {
    let m = a[0].max(a[1]).max(a[2]);
    let e = a.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

/// `1 + Σ_d [z_d < 0]·2^d`: all non-negative → 1, all negative → 2^{d_z}.
pub fn intention_index(z: &[f64]) -> usize {
    1 + z.iter().enumerate().map(|(d, &v)| usize::from(v < 0.0) << d).sum::<usize>()
}

/// First 1-based step with `S ≤ ε`.
pub fn t_die(survival: &[f64], epsilon: f64) -> Option<usize> {
    survival.iter().position(|&s| s <= epsilon).map(|i| i + 1)
}

/// Index sequence through `t_die`, or the whole trace when `S` stays above `ε`.
pub fn motif(indices: &[usize], survival: &[f64], epsilon: f64) -> Vec<usize> {
    let len = t_die(survival, epsilon).unwrap_or(indices.len()).min(indices.len());
    indices[..len].to_vec()
}

/// `P̂_j = S·P_j + (1−S)·P̂_{j−1}` on the malicious component.
pub fn smooth(survival: f64, p_j: f64, prev: f64) -> f64 {
    survival * p_j + (1.0 - survival) * prev
}

/// `Σ_d exp(σ_d) − (1 + σ_d) + μ_d²`.
pub fn kl_term(mu: &[f64], sig: &[f64]) -> f64 {
    mu.iter().zip(sig).map(|(m, s)| s.exp() - 1.0 - s + m * m).sum()
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut s = b.map_or(0.0, |b| b[r]);
        for (a, v) in row.iter().zip(x) {
            s += a * v;
        }
        out[r] = s;
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `dW += dy xᵀ`.
fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for (d, v) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += g * v;
        }
    }
}

/// Activated LSTM gates and states for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTape {
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Standard LSTM cell over `v = [input ‖ h_prev]`, gate order i, f, g, o.
pub fn lstm_cell(w: &[f64], b: &[f64], v: Vec<f64>, c_prev: &[f64], d_h: usize) -> LstmTape {
    let mut pre = vec![0.0; 4 * d_h];
    matvec(w, 4 * d_h, v.len(), &v, Some(b), &mut pre);
    let i: Vec<f64> = pre[..d_h].iter().map(|&x| sigmoid(x)).collect();
    let f: Vec<f64> = pre[d_h..2 * d_h].iter().map(|&x| sigmoid(x)).collect();
    let g: Vec<f64> = pre[2 * d_h..3 * d_h].iter().map(|&x| x.tanh()).collect();
    let o: Vec<f64> = pre[3 * d_h..].iter().map(|&x| sigmoid(x)).collect();
    let c: Vec<f64> = (0..d_h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = (0..d_h).map(|k| o[k] * tanh_c[k]).collect();
    LstmTape {
        v,
        i,
        f,
        g,
        o,
        c_prev: c_prev.to_vec(),
        c,
        tanh_c,
        h,
    }
}

#[derive(Debug, Clone)]
struct StepTape {
    u: Vec<f64>,
    x: Vec<f64>,
    mu: Vec<f64>,
    sig: Vec<f64>,
    e: Vec<f64>,
    z: Vec<f64>,
    index: usize,
    hd: Vec<f64>,
    xhat: Vec<f64>,
    lstm: [LstmTape; 3],
    eta: [f64; 3],
    lambda: f64,
    s: f64,
    att_in: [Vec<f64>; 3],
    q: [Vec<f64>; 3],
    alpha: [f64; 3],
    probs: [f64; 3],
    y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentionModel {
    pub dims: Dims,
    pub params: Vec<f64>,
    off: Offsets,
    specs: Vec<TensorSpec>,
}

impl IntentionModel {
    pub fn zeros(dims: Dims) -> Self {
        let (off, specs) = layout(&dims);
        let n = specs.last().map_or(0, |s| s.offset + s.rows * s.cols);
        IntentionModel {
            dims,
            params: vec![0.0; n],
            off,
            specs,
        }
    }

    /// Uniform ±1/√fan_in weights, zero biases, forget-gate bias 1 and the
    /// configured hazard bias.
    pub fn init(dims: Dims, cfg: &IntentionConfig) -> Self {
        let mut m = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for spec in m.specs.clone() {
            let slice = &mut m.params[spec.offset..spec.offset + spec.rows * spec.cols];
            let is_bias = spec.cols == 1 && !spec.name.starts_with("emb");
            if is_bias {
                continue;
            }
            let scale = if spec.name.starts_with("emb") { 1.0 } else { 1.0 / (spec.cols as f64).sqrt() };
            for v in slice.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        let d_h = dims.d_h;
        for b in 0..3 {
            let o = m.off.lstm_b[b];
            m.params[o + d_h..o + 2 * d_h].fill(1.0);
            m.params[m.off.haz_b[b]] = cfg.hazard_bias;
        }
        m
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.offset..s.offset + s.rows * s.cols])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.specs.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.params[s.offset..s.offset + s.rows * s.cols])
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    pub fn validate_sequence(&self, seq: &Sequence) -> Result<()> {
        let d = &self.dims;
        if seq.label > 1 {
            return Err(Error::InvalidInput(format!("{}: label must be 0 or 1", seq.address)));
        }
        for (j, s) in seq.steps.iter().enumerate() {
            if s.status >= d.k_status || s.action >= d.k_action {
                return Err(Error::InvalidInput(format!(
                    "{} step {}: status {} / action {} outside tables of {} / {}",
                    seq.address,
                    j + 1,
                    s.status,
                    s.action,
                    d.k_status,
                    d.k_action
                )));
            }
            if s.f.len() != d.n_f || s.s_vec.len() != d.n_s || s.a_vec.len() != d.n_a {
                return Err(Error::InvalidInput(format!(
                    "{} step {}: input widths ({}, {}, {}) do not match ({}, {}, {})",
                    seq.address,
                    j + 1,
                    s.f.len(),
                    s.s_vec.len(),
                    s.a_vec.len(),
                    d.n_f,
                    d.n_s,
                    d.n_a
                )));
            }
            if !(s.p_s > 0.0 && s.p_s < 1.0 && s.p_a > 0.0 && s.p_a < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "{} step {}: tree probabilities must lie in (0, 1)",
                    seq.address,
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Embedding lookup. Errors on an out-of-range index.
    pub fn embed(&self, status: usize, action: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = &self.dims;
        if status >= d.k_status || action >= d.k_action {
            return Err(Error::InvalidInput(format!(
                "embedding index ({status}, {action}) out of range ({}, {})",
                d.k_status, d.k_action
            )));
        }
        Ok((
            self.p(self.off.emb_s + status * d.d_e, d.d_e).to_vec(),
            self.p(self.off.emb_a + action * d.d_e, d.d_e).to_vec(),
        ))
    }

    /// Encoder and reparameterization: returns `(x, μ, σ, z)` for input `u`.
    pub fn vae_encode(&self, u: &[f64], e: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = &self.dims;
        let mut x = vec![0.0; d.d_enc];
        matvec(
            self.p(self.off.enc_w, d.d_enc * 2 * d.d_e),
            d.d_enc,
            2 * d.d_e,
            u,
            Some(self.p(self.off.enc_b, d.d_enc)),
            &mut x,
        );
        x.iter_mut().for_each(|v| *v = v.tanh());
        let mut mu = vec![0.0; d.d_z];
        let mut sig = vec![0.0; d.d_z];
        matvec(self.p(self.off.mu_w, d.d_z * d.d_enc), d.d_z, d.d_enc, &x, Some(self.p(self.off.mu_b, d.d_z)), &mut mu);
        matvec(self.p(self.off.sig_w, d.d_z * d.d_enc), d.d_z, d.d_enc, &x, Some(self.p(self.off.sig_b, d.d_z)), &mut sig);
        let z: Vec<f64> = (0..d.d_z).map(|k| mu[k] + sig[k].exp() * e[k]).collect();
        (x, mu, sig, z)
    }

    /// Decoder: returns `(hidden, x̂)`.
    pub fn vae_decode(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = &self.dims;
        let mut hd = vec![0.0; d.d_enc];
        matvec(self.p(self.off.dec1_w, d.d_enc * d.d_z), d.d_enc, d.d_z, z, Some(self.p(self.off.dec1_b, d.d_enc)), &mut hd);
        hd.iter_mut().for_each(|v| *v = v.tanh());
        let mut xhat = vec![0.0; 2 * d.d_e];
        matvec(
            self.p(self.off.dec2_w, 2 * d.d_e * d.d_enc),
            2 * d.d_e,
            d.d_enc,
            &hd,
            Some(self.p(self.off.dec2_b, 2 * d.d_e)),
            &mut xhat,
        );
        (hd, xhat)
    }

    /// Attention logits for the three branches.
    fn attention(&self, att_in: &[Vec<f64>; 3]) -> ([Vec<f64>; 3], [f64; 3]) {
        let d = &self.dims;
        let v = self.p(self.off.att_v, d.d_att);
        let mut q: [Vec<f64>; 3] = Default::default();
        let mut a = [0.0; 3];
        for t in 0..3 {
            let cols = d.att_input(t);
            let mut pre = vec![0.0; d.d_att];
            matvec(self.p(self.off.att_w[t], d.d_att * cols), d.d_att, cols, &att_in[t], None, &mut pre);
            pre.iter_mut().for_each(|x| *x = x.tanh());
            a[t] = pre.iter().zip(v).map(|(x, w)| x * w).sum();
            q[t] = pre;
        }
        (q, a)
    }

    fn forward(&self, seq: &Sequence, noise: Option<&[Vec<f64>]>) -> Vec<StepTape> {
        let d = self.dims;
        let zero_e = vec![0.0; d.d_z];
        let mut h: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; d.d_h]);
        let mut c: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; d.d_h]);
        let mut cum = 0.0;
        let mut prev_s = 1.0;
        let mut tapes = Vec::with_capacity(seq.steps.len());
        for (j, st) in seq.steps.iter().enumerate() {
            let e = noise.map_or(&zero_e, |n| &n[j]).clone();
            let mut u = self.p(self.off.emb_s + st.status * d.d_e, d.d_e).to_vec();
            u.extend_from_slice(self.p(self.off.emb_a + st.action * d.d_e, d.d_e));
            let (x, mu, sig, z) = self.vae_encode(&u, &e);
            let (hd, xhat) = self.vae_decode(&z);
            let index = intention_index(&z);
            let mut zz = z.clone();
            if d.index_embedding {
                zz.extend_from_slice(self.p(self.off.emb_i + (index - 1) * d.d_e, d.d_e));
            }
            let lstm: [LstmTape; 3] = std::array::from_fn(|b| {
                let xb = [&st.f, &st.s_vec, &st.a_vec][b];
                let mut v = zz.clone();
                v.extend_from_slice(xb);
                v.extend_from_slice(&h[b]);
                let cols = v.len();
                lstm_cell(
                    self.p(self.off.lstm_w[b], 4 * d.d_h * cols),
                    self.p(self.off.lstm_b[b], 4 * d.d_h),
                    v,
                    &c[b],
                    d.d_h,
                )
            });
            for b in 0..3 {
                h[b].clone_from(&lstm[b].h);
                c[b].clone_from(&lstm[b].c);
            }
            let eta: [f64; 3] = std::array::from_fn(|b| {
                let w = self.p(self.off.haz_w[b], d.d_h);
                self.params[self.off.haz_b[b]] + w.iter().zip(&lstm[b].h).map(|(a, b)| a * b).sum::<f64>()
            });
            let lambda: f64 = eta.iter().map(|&x| softplus(x)).sum();
            cum += lambda;
            let s = (-cum).exp().max(f64::MIN_POSITIVE);
            assert!(s > 0.0 && s <= 1.0 && s <= prev_s, "survival left (0, 1] or increased");
            prev_s = s;
            let att_in: [Vec<f64>; 3] = std::array::from_fn(|t| {
                let mut v = st.f.clone();
                v.extend_from_slice([&st.s_vec, &st.a_vec, &zz][t]);
                v
            });
            let (q, a) = self.attention(&att_in);
            let alpha = softmax3(a);
            let probs = [st.p_s, st.p_a, 1.0 - s];
            let y = alpha[0] * probs[0] + alpha[1] * probs[1] + alpha[2] * probs[2];
            tapes.push(StepTape {
                u,
                x,
                mu,
                sig,
                e,
                z,
                index,
                hd,
                xhat,
                lstm,
                eta,
                lambda,
                s,
                att_in,
                q,
                alpha,
                probs,
                y,
            });
        }
        tapes
    }

    fn losses(&self, seq: &Sequence, tapes: &[StepTape], w: &LossWeights) -> LossParts {
        let l = seq.label as f64;
        let mut parts = LossParts::default();
        for (j, t) in tapes.iter().enumerate() {
            let wt = ((j + 1) as f64).sqrt();
            let y = t.y.clamp(Y_EPS, 1.0 - Y_EPS);
            let lp = -(l * y.ln() + (1.0 - l) * (1.0 - y).ln());
            let lv = kl_term(&t.mu, &t.sig);
            let (lc, lcd) = if j > 0 {
                let prod = (t.y - 0.5) * (tapes[j - 1].y - 0.5);
                ((-prod).max(0.0), if prod < 0.0 { 1.0 } else { 0.0 })
            } else {
                (0.0, 0.0)
            };
            let le = if seq.label == 1 { t.s } else { -t.s };
            let lr = if w.gamma_rec > 0.0 {
                t.xhat.iter().zip(&t.u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.u.len() as f64
            } else {
                0.0
            };
            parts.prediction += wt * lp;
            parts.vae += wt * lv;
            parts.consistency += wt * lc;
            parts.consistency_discrete += lcd;
            parts.earliness += wt * le;
            parts.reconstruction += wt * lr;
            parts.total += wt * (lp + w.gamma1 * lv + w.gamma2 * lc + w.gamma3 * le + w.gamma_rec * lr);
        }
        parts
    }

    /// Loss of one sequence; `noise` holds one `d_z` draw per step, `None`
    /// means `e = 0`.
    pub fn loss(&self, seq: &Sequence, noise: Option<&[Vec<f64>]>, w: &LossWeights) -> LossParts {
        let tapes = self.forward(seq, noise);
        self.losses(seq, &tapes, w)
    }

    /// Loss and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, seq: &Sequence, noise: Option<&[Vec<f64>]>, w: &LossWeights) -> (LossParts, Vec<f64>) {
        let tapes = self.forward(seq, noise);
        let parts = self.losses(seq, &tapes, w);
        let mut g = vec![0.0; self.params.len()];
        self.backward(seq, &tapes, w, &mut g);
        (parts, g)
    }

    fn backward(&self, seq: &Sequence, tapes: &[StepTape], w: &LossWeights, g: &mut [f64]) {
        let d = self.dims;
        let o = &self.off;
        let n = tapes.len();
        let l = seq.label as f64;
        let wt = |j: usize| ((j + 1) as f64).sqrt();

        // Output-side gradients per step.
        let mut gy = vec![0.0; n];
        for j in 0..n {
            let y = tapes[j].y;
            if y > Y_EPS && y < 1.0 - Y_EPS {
                gy[j] += wt(j) * (-l / y + (1.0 - l) / (1.0 - y));
            }
            if j > 0 {
                let (a, b) = (y - 0.5, tapes[j - 1].y - 0.5);
                if -(a * b) > 0.0 {
                    gy[j] += w.gamma2 * wt(j) * -b;
                    gy[j - 1] += w.gamma2 * wt(j) * -a;
                }
            }
        }
        let sign = if seq.label == 1 { 1.0 } else { -1.0 };
        let mut g_lambda = vec![0.0; n];
        let mut acc = 0.0;
        for j in (0..n).rev() {
            let t = &tapes[j];
            let gs = w.gamma3 * wt(j) * sign - gy[j] * t.alpha[2];
            acc += gs * -t.s;
            g_lambda[j] = acc;
        }

        let mut dh_next: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; d.d_h]);
        let mut dc_next: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; d.d_h]);
        let d_zz = d.d_zz();
        for j in (0..n).rev() {
            let t = &tapes[j];
            let mut dzz = vec![0.0; d_zz];

            for b in 0..3 {
                let deta = g_lambda[j] * sigmoid(t.eta[b]);
                let hw = self.p(o.haz_w[b], d.d_h);
                let lt = &t.lstm[b];
                for k in 0..d.d_h {
                    g[o.haz_w[b] + k] += deta * lt.h[k];
                }
                g[o.haz_b[b]] += deta;
                let mut dgates = vec![0.0; 4 * d.d_h];
                let mut dc_prev = vec![0.0; d.d_h];
                for k in 0..d.d_h {
                    let dh = dh_next[b][k] + deta * hw[k];
                    let d_o = dh * lt.tanh_c[k];
                    let dc = dc_next[b][k] + dh * lt.o[k] * (1.0 - lt.tanh_c[k] * lt.tanh_c[k]);
                    let di = dc * lt.g[k];
                    let dg = dc * lt.i[k];
                    let df = dc * lt.c_prev[k];
                    dc_prev[k] = dc * lt.f[k];
                    dgates[k] = di * lt.i[k] * (1.0 - lt.i[k]);
                    dgates[d.d_h + k] = df * lt.f[k] * (1.0 - lt.f[k]);
                    dgates[2 * d.d_h + k] = dg * (1.0 - lt.g[k] * lt.g[k]);
                    dgates[3 * d.d_h + k] = d_o * lt.o[k] * (1.0 - lt.o[k]);
                }
                let cols = lt.v.len();
                outer_acc(&mut g[o.lstm_w[b]..o.lstm_w[b] + 4 * d.d_h * cols], 4 * d.d_h, cols, &dgates, &lt.v);
                for (gb, dg) in g[o.lstm_b[b]..o.lstm_b[b] + 4 * d.d_h].iter_mut().zip(&dgates) {
                    *gb += dg;
                }
                let mut dv = vec![0.0; cols];
                matvec_t_acc(self.p(o.lstm_w[b], 4 * d.d_h * cols), 4 * d.d_h, cols, &dgates, &mut dv);
                for k in 0..d_zz {
                    dzz[k] += dv[k];
                }
                dh_next[b].copy_from_slice(&dv[cols - d.d_h..]);
                dc_next[b] = dc_prev;
            }

            // Attention.
            let galpha: [f64; 3] = std::array::from_fn(|k| gy[j] * t.probs[k]);
            let mean: f64 = (0..3).map(|k| t.alpha[k] * galpha[k]).sum();
            let att_v = self.p(o.att_v, d.d_att);
            for k in 0..3 {
                let ga = t.alpha[k] * (galpha[k] - mean);
                if ga == 0.0 {
                    continue;
                }
                for m in 0..d.d_att {
                    g[o.att_v + m] += ga * t.q[k][m];
                }
                let dpre: Vec<f64> = (0..d.d_att).map(|m| ga * att_v[m] * (1.0 - t.q[k][m] * t.q[k][m])).collect();
                let cols = d.att_input(k);
                outer_acc(&mut g[o.att_w[k]..o.att_w[k] + d.d_att * cols], d.d_att, cols, &dpre, &t.att_in[k]);
                if k == 2 {
                    let mut din = vec![0.0; cols];
                    matvec_t_acc(self.p(o.att_w[k], d.d_att * cols), d.d_att, cols, &dpre, &mut din);
                    for m in 0..d_zz {
                        dzz[m] += din[d.n_f + m];
                    }
                }
            }

            let mut dz = dzz[..d.d_z].to_vec();
            if d.index_embedding {
                let base = o.emb_i + (t.index - 1) * d.d_e;
                for m in 0..d.d_e {
                    g[base + m] += dzz[d.d_z + m];
                }
            }

            let mut du = vec![0.0; 2 * d.d_e];
            if w.gamma_rec > 0.0 {
                let scale = w.gamma_rec * wt(j) * 2.0 / t.u.len() as f64;
                let dxhat: Vec<f64> = t.xhat.iter().zip(&t.u).map(|(a, b)| scale * (a - b)).collect();
                for (dd, dx) in du.iter_mut().zip(&dxhat) {
                    *dd -= dx;
                }
                self.decoder_backward(&t.z, &t.hd, &dxhat, &mut dz, g);
            }
            let kw = w.gamma1 * wt(j);
            let dmu: Vec<f64> = (0..d.d_z).map(|k| dz[k] + kw * 2.0 * t.mu[k]).collect();
            let dsig: Vec<f64> = (0..d.d_z)
                .map(|k| dz[k] * t.sig[k].exp() * t.e[k] + kw * (t.sig[k].exp() - 1.0))
                .collect();
            self.encoder_backward(&t.u, &t.x, &dmu, &dsig, &mut du, g);
            let st = &seq.steps[j];
            for m in 0..d.d_e {
                g[o.emb_s + st.status * d.d_e + m] += du[m];
                g[o.emb_a + st.action * d.d_e + m] += du[d.d_e + m];
            }
        }
    }

    fn decoder_backward(&self, z: &[f64], hd: &[f64], dxhat: &[f64], dz: &mut [f64], g: &mut [f64]) {
        let d = &self.dims;
        let o = &self.off;
        let rows = 2 * d.d_e;
        outer_acc(&mut g[o.dec2_w..o.dec2_w + rows * d.d_enc], rows, d.d_enc, dxhat, hd);
        for k in 0..rows {
            g[o.dec2_b + k] += dxhat[k];
        }
        let mut dhd = vec![0.0; d.d_enc];
        matvec_t_acc(self.p(o.dec2_w, rows * d.d_enc), rows, d.d_enc, dxhat, &mut dhd);
        let dpre: Vec<f64> = (0..d.d_enc).map(|k| dhd[k] * (1.0 - hd[k] * hd[k])).collect();
        outer_acc(&mut g[o.dec1_w..o.dec1_w + d.d_enc * d.d_z], d.d_enc, d.d_z, &dpre, z);
        for k in 0..d.d_enc {
            g[o.dec1_b + k] += dpre[k];
        }
        matvec_t_acc(self.p(o.dec1_w, d.d_enc * d.d_z), d.d_enc, d.d_z, &dpre, dz);
    }

    fn encoder_backward(&self, u: &[f64], x: &[f64], dmu: &[f64], dsig: &[f64], du: &mut [f64], g: &mut [f64]) {
        let d = &self.dims;
        let o = &self.off;
        outer_acc(&mut g[o.mu_w..o.mu_w + d.d_z * d.d_enc], d.d_z, d.d_enc, dmu, x);
        outer_acc(&mut g[o.sig_w..o.sig_w + d.d_z * d.d_enc], d.d_z, d.d_enc, dsig, x);
        for k in 0..d.d_z {
            g[o.mu_b + k] += dmu[k];
            g[o.sig_b + k] += dsig[k];
        }
        let mut dx = vec![0.0; d.d_enc];
        matvec_t_acc(self.p(o.mu_w, d.d_z * d.d_enc), d.d_z, d.d_enc, dmu, &mut dx);
        matvec_t_acc(self.p(o.sig_w, d.d_z * d.d_enc), d.d_z, d.d_enc, dsig, &mut dx);
        let dpre: Vec<f64> = (0..d.d_enc).map(|k| dx[k] * (1.0 - x[k] * x[k])).collect();
        outer_acc(&mut g[o.enc_w..o.enc_w + d.d_enc * 2 * d.d_e], d.d_enc, 2 * d.d_e, &dpre, u);
        for k in 0..d.d_enc {
            g[o.enc_b + k] += dpre[k];
        }
        matvec_t_acc(self.p(o.enc_w, d.d_enc * 2 * d.d_e), d.d_enc, 2 * d.d_e, &dpre, du);
    }

    /// Mean reconstruction error of the VAE on `u` and its gradient, with
    /// the reconstruction target held fixed.
    pub fn reconstruction_loss_grad(&self, u: &[f64], e: &[f64]) -> (f64, Vec<f64>) {
        let (x, mu, sig, z) = self.vae_encode(u, e);
        let (hd, xhat) = self.vae_decode(&z);
        let n = u.len() as f64;
        let loss = xhat.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let dxhat: Vec<f64> = xhat.iter().zip(u).map(|(a, b)| 2.0 * (a - b) / n).collect();
        let mut g = vec![0.0; self.params.len()];
        let mut dz = vec![0.0; self.dims.d_z];
        self.decoder_backward(&z, &hd, &dxhat, &mut dz, &mut g);
        let dmu = dz.clone();
        let dsig: Vec<f64> = (0..dz.len()).map(|k| dz[k] * sig[k].exp() * e[k]).collect();
        let mut du = vec![0.0; u.len()];
        self.encoder_backward(u, &x, &dmu, &dsig, &mut du, &mut g);
        let _ = mu;
        (loss, g)
    }

    /// Deterministic inference with `e = 0`.
    pub fn predict(&self, seq: &Sequence, epsilon: f64) -> Result<AddressPrediction> {
        self.validate_sequence(seq)?;
        let tapes = self.forward(seq, None);
        // No earlier prediction exists at the first step, so P̂_1 = P_1.
        let mut prev = tapes.first().map_or(0.5, |t| t.y);
        let steps: Vec<StepOutput> = tapes
            .iter()
            .enumerate()
            .map(|(j, t)| {
                prev = smooth(t.s, t.y, prev);
                StepOutput {
                    t: j + 1,
                    p_malicious: prev,
                    p_fused: t.y,
                    survival: t.s,
                    hazard: t.lambda,
                    alpha: t.alpha,
                    intention_index: t.index,
                    z: t.z.clone(),
                }
            })
            .collect();
        let surv: Vec<f64> = steps.iter().map(|s| s.survival).collect();
        let idx: Vec<usize> = steps.iter().map(|s| s.intention_index).collect();
        Ok(AddressPrediction {
            address: seq.address.clone(),
            t_die: t_die(&surv, epsilon),
            motif: motif(&idx, &surv, epsilon),
            steps,
        })
    }
}

/// Adam with the usual defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grad[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grad[k] * grad[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub parts: LossParts,
}

/// Mini-batch Adam over the sequences. One seeded generator drives the
/// shuffles and the noise draws, and batch gradients are summed in address
/// order, so a seed fixes the whole loss trace. Positive sequences are
/// weighted by `pos_weight` in the gradient; reported losses are unweighted.
/// `on_epoch` runs after every epoch (checkpoints).
pub fn train(
    init: IntentionModel,
    data: &[Sequence],
    cfg: &IntentionConfig,
    mut on_epoch: impl FnMut(&EpochStats, &IntentionModel) -> Result<()>,
) -> Result<(IntentionModel, Vec<EpochStats>)> {
    cfg.validate()?;
    for s in data {
        init.validate_sequence(s)?;
    }
    let mut model = init;
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((model, Vec::new()));
    }
    let weights = LossWeights::from(cfg);
    let n_pos = data.iter().filter(|s| s.label == 1).count();
    let pos_weight = match cfg.pos_weight {
        Some(w) => w,
        None if n_pos > 0 && n_pos < data.len() => (data.len() - n_pos) as f64 / n_pos as f64,
        None => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a7e);
    let mut opt = Adam::new(model.params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let noise: Vec<Vec<Vec<f64>>> = batch
                .iter()
                .map(|&i| {
                    (0..data[i].steps.len())
                        .map(|_| (0..model.dims.d_z).map(|_| rng.sample(StandardNormal)).collect())
                        .collect()
                })
                .collect();
            let results: Vec<(LossParts, Vec<f64>)> = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&i, e)| model.loss_and_grad(&data[i], Some(e), &weights))
                .collect();
            let mut grad = vec![0.0; model.params.len()];
            for (&i, (p, g)) in batch.iter().zip(&results) {
                parts.add(p);
                let w = if data[i].label == 1 { pos_weight } else { 1.0 };
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += w * b;
                }
            }
            opt.step(&mut model.params, &grad);
        }
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("intention training diverged at epoch {}", epoch + 1)));
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: parts.total / data.len() as f64,
            parts,
        };
        on_epoch(&stats, &model)?;
        history.push(stats);
    }
    Ok((model, history))
}

const MAGIC: &[u8; 8] = b"IMVAEBIN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonModel {
    version: u32,
    dims: Dims,
    tensors: Vec<JsonTensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("intention model file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl IntentionModel {
    /// Flat binary: magic, version, the eleven dims as u32 (the last one is
    /// the index-embedding flag), tensor count, per tensor
    /// `(name_len, name, rows, cols)`, then all parameters as little-endian
    /// f64 in layout order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [d.k_status, d.k_action, d.n_f, d.n_s, d.n_a, d.d_e, d.d_z, d.d_h, d.d_enc, d.d_att] {
            put_u32(&mut out, v)?;
        }
        put_u32(&mut out, usize::from(d.index_embedding))?;
        put_u32(&mut out, self.specs.len())?;
        for s in &self.specs {
            put_u32(&mut out, s.name.len())?;
            out.extend_from_slice(s.name.as_bytes());
            put_u32(&mut out, s.rows)?;
            put_u32(&mut out, s.cols)?;
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an intention model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported intention model version {version}")));
        }
        let mut v = [0usize; 11];
        for x in v.iter_mut() {
            *x = r.u32()?;
        }
        let dims = Dims {
            k_status: v[0],
            k_action: v[1],
            n_f: v[2],
            n_s: v[3],
            n_a: v[4],
            d_e: v[5],
            d_z: v[6],
            d_h: v[7],
            d_enc: v[8],
            d_att: v[9],
            index_embedding: match v[10] {
                0 => false,
                1 => true,
                f => return Err(Error::Format(format!("bad index-embedding flag {f}"))),
            },
        };
        if dims.d_z > 16 {
            return Err(Error::Format("d_z above 16".into()));
        }
        let mut model = IntentionModel::zeros(dims);
        let count = r.u32()?;
        if count != model.specs.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", model.specs.len())));
        }
        for s in &model.specs {
            let len = r.u32()?;
            let name = r.take(len)?.to_vec();
            let (rows, cols) = (r.u32()?, r.u32()?);
            if name != s.name.as_bytes() || rows != s.rows || cols != s.cols {
                return Err(Error::Format(format!(
                    "tensor header mismatch at {} ({}x{} expected)",
                    s.name, s.rows, s.cols
                )));
            }
        }
        for p in model.params.iter_mut() {
            let b = r.take(8)?;
            *p = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after intention model".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn to_json(&self) -> Result<String> {
        let j = JsonModel {
            version: VERSION,
            dims: self.dims,
            tensors: self
                .specs
                .iter()
                .map(|s| JsonTensor {
                    name: s.name.clone(),
                    rows: s.rows,
                    cols: s.cols,
                    data: self.params[s.offset..s.offset + s.rows * s.cols].to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&j)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: JsonModel = serde_json::from_str(s)?;
        let mut model = IntentionModel::zeros(j.dims);
        if j.tensors.len() != model.specs.len() {
            return Err(Error::Format("tensor count mismatch in intention model JSON".into()));
        }
        for (t, s) in j.tensors.iter().zip(model.specs.clone()) {
            if t.name != s.name || t.rows != s.rows || t.cols != s.cols || t.data.len() != s.rows * s.cols {
                return Err(Error::Format(format!("tensor {} does not match the layout", t.name)));
            }
            model.params[s.offset..s.offset + t.data.len()].copy_from_slice(&t.data);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{ProptestConfig, prop, prop_assert, proptest};

    fn small_cfg() -> IntentionConfig {
        IntentionConfig {
            d_e: 3,
            d_z: 2,
            d_h: 4,
            d_enc: 4,
            d_att: 3,
            gamma_rec: 0.5,
            hazard_bias: -1.0,
            ..Default::default()
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, d: &Dims, label: u8, n: usize) -> Sequence {
        let mut v = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let steps = (0..n)
            .map(|_| StepInput {
                status: 0,
                action: 0,
                f: v(d.n_f),
                s_vec: v(d.n_s),
                a_vec: v(d.n_a),
                p_s: 0.5,
                p_a: 0.5,
            })
            .collect::<Vec<_>>();
        let mut steps = steps;
        for s in steps.iter_mut() {
            s.status = rng.random_range(0..d.k_status);
            s.action = rng.random_range(0..d.k_action);
            s.p_s = rng.random_range(0.05..0.95);
            s.p_a = rng.random_range(0.05..0.95);
        }
        Sequence {
            address: format!("a{label}"),
            label,
            steps,
        }
    }

    fn grad_check(cfg: &IntentionConfig, seed: u64) {
        let dims = Dims::new(3, 3, 2, 2, 2, cfg);
        let mut model = IntentionModel::init(dims, &IntentionConfig { seed, ..*cfg });
        // Larger random biases so every branch carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in model.params.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let seqs = [random_seq(&mut rng, &dims, 1, 4), random_seq(&mut rng, &dims, 0, 4)];
        let noise: Vec<Vec<Vec<f64>>> = seqs
            .iter()
            .map(|s| (0..s.steps.len()).map(|_| (0..dims.d_z).map(|_| rng.sample(StandardNormal)).collect()).collect())
            .collect();
        let w = LossWeights::from(cfg);
        let total = |m: &IntentionModel| -> f64 {
            seqs.iter().zip(&noise).map(|(s, e)| m.loss(s, Some(e), &w).total).sum()
        };
        let mut grad = vec![0.0; model.params.len()];
        for (s, e) in seqs.iter().zip(&noise) {
            let (_, g) = model.loss_and_grad(s, Some(e), &w);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        // Five-point central stencil.
        let h = 1e-3;
        let mut worst = (0.0, 0);
        for k in 0..model.params.len() {
            let orig = model.params[k];
            let mut at = |dx: f64| {
                model.params[k] = orig + dx;
                total(&model)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            model.params[k] = orig;
            let num = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let rel = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, k);
            }
        }
        let name = model
            .tensors()
            .iter()
            .find(|s| worst.1 >= s.offset && worst.1 < s.offset + s.rows * s.cols)
            .map(|s| s.name.clone());
        assert!(worst.0 < 1e-4, "worst relative error {} at {:?}", worst.0, name);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        grad_check(&small_cfg(), 3);
    }

    #[test]
    fn gradient_with_index_embedding() {
        grad_check(&IntentionConfig { index_embedding: true, ..small_cfg() }, 5);
    }

    #[test]
    fn zero_model_hazard_is_three_ln2() {
        let cfg = small_cfg();
        let dims = Dims::new(2, 2, 1, 1, 1, &cfg);
        let m = IntentionModel::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = random_seq(&mut rng, &dims, 0, 24);
        let p = m.predict(&seq, 0.01).unwrap();
        for (j, s) in p.steps.iter().enumerate() {
            assert!((s.hazard - 3.0 * 2f64.ln()).abs() < 1e-12);
            let want = (-(3.0 * 2f64.ln()) * (j + 1) as f64).exp();
            assert!((s.survival - want).abs() < 1e-12);
            // Identical logits.
            for a in s.alpha {
                assert!((a - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // Zero weights give zero hidden states.
        let tapes = m.forward(&seq, None);
        assert!(tapes.iter().all(|t| t.lstm.iter().all(|l| l.h.iter().all(|&v| v == 0.0))));
        assert_eq!(p.t_die, Some(3));
        assert_eq!(p.motif.len(), 3);
    }

    #[test]
    fn lstm_cell_matches_hand_arithmetic() {
        // Two units, one input plus recurrent state: v = [x, h1, h2].
        let w: Vec<f64> = (0..24).map(|k| (k as f64 - 12.0) / 10.0).collect();
        let b = vec![0.1, -0.1, 0.2, -0.2, 0.0, 0.3, -0.3, 0.05];
        let v = vec![0.5, -0.25, 0.75];
        let c_prev = [0.2, -0.4];
        let t = lstm_cell(&w, &b, v.clone(), &c_prev, 2);
        let pre = |r: usize| b[r] + (0..3).map(|c| w[r * 3 + c] * v[c]).sum::<f64>();
        let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
        for k in 0..2 {
            let i = sg(pre(k));
            let f = sg(pre(2 + k));
            let g = pre(4 + k).tanh();
            let o = sg(pre(6 + k));
            let c = f * c_prev[k] + i * g;
            assert!((t.c[k] - c).abs() < 1e-15);
            assert!((t.h[k] - o * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn reparameterization_identities() {
        let cfg = small_cfg();
        let dims = Dims::new(2, 2, 1, 1, 1, &cfg);
        let mut m = IntentionModel::init(dims, &cfg);
        let u = vec![0.3, -0.2, 0.1, 0.5, 0.0, -0.4];
        let (_, mu, _, z) = m.vae_encode(&u, &[0.0, 0.0]);
        assert_eq!(mu, z);
        m.tensor_mut("sig_w").unwrap().fill(0.0);
        m.tensor_mut("sig_b").unwrap().fill(0.0);
        let (_, mu, sig, z) = m.vae_encode(&u, &[1.0, 1.0]);
        assert_eq!(sig, vec![0.0, 0.0]);
        assert_eq!(z, mu.iter().map(|v| v + 1.0).collect::<Vec<_>>());
    }

    #[test]
    fn embed_bounds() {
        let cfg = small_cfg();
        let m = IntentionModel::init(Dims::new(2, 3, 1, 1, 1, &cfg), &cfg);
        let (s, _) = m.embed(0, 0).unwrap();
        assert_eq!(s, m.tensor("emb_s").unwrap()[..3].to_vec());
        assert!(m.embed(2, 0).is_err());
        assert!(m.embed(0, 3).is_err());
    }

    #[test]
    fn reconstruction_improves_with_training() {
        let cfg = IntentionConfig { d_e: 3, d_z: 3, d_enc: 8, ..small_cfg() };
        let dims = Dims::new(2, 2, 1, 1, 1, &cfg);
        let mut m = IntentionModel::init(dims, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.random_range(-0.8..0.8)).collect()).collect();
        let zero = vec![0.0; 3];
        let eval = |m: &IntentionModel| data.iter().map(|u| m.reconstruction_loss_grad(u, &zero).0).sum::<f64>();
        let before = eval(&m);
        let mut opt = Adam::new(m.params.len(), 0.01);
        for _ in 0..200 {
            let mut g = vec![0.0; m.params.len()];
            for u in &data {
                let (_, gi) = m.reconstruction_loss_grad(u, &zero);
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            }
            opt.step(&mut m.params, &g);
        }
        let after = eval(&m);
        assert!(after < before * 0.5, "{before} -> {after}");
    }

    #[test]
    fn index_convention() {
        assert_eq!(intention_index(&[1.0, 1.0, 1.0]), 1);
        assert_eq!(intention_index(&[-1.0, 1.0, 1.0]), 2);
        assert_eq!(intention_index(&[1.0, -1.0, -1.0]), 7);
        assert_eq!(intention_index(&[-1.0, -1.0, -1.0]), 8);
        assert_eq!(intention_index(&[0.0, 0.0, 0.0]), 1);
        assert_eq!(intention_index(&[-0.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn motif_length_follows_t_die() {
        let idx: Vec<usize> = (1..=24).map(|k| k % 8 + 1).collect();
        let surv: Vec<f64> = (1..=24).map(|k| (-0.4 * k as f64).exp()).collect();
        // exp(-0.4 k) <= 0.01 first at k = 12.
        assert_eq!(t_die(&surv, 0.01), Some(12));
        assert_eq!(motif(&idx, &surv, 0.01).len(), 12);
        let flat = vec![0.9; 24];
        assert_eq!(motif(&idx, &flat, 0.01).len(), 24);
    }

    #[test]
    fn smoothing_endpoints() {
        assert_eq!(smooth(1.0, 0.8, 0.3), 0.8);
        assert_eq!(smooth(0.0, 0.8, 0.3), 0.3);
    }

    #[test]
    fn kl_zero_at_origin() {
        assert_eq!(kl_term(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(kl_term(&[0.1, 0.0], &[0.0, 0.0]) > 0.0);
        assert!(kl_term(&[0.0, 0.0], &[-0.2, 0.0]) > 0.0);
    }

    #[test]
    fn constant_predictions_have_no_consistency_loss() {
        let cfg = small_cfg();
        let dims = Dims::new(2, 2, 1, 1, 1, &cfg);
        let m = IntentionModel::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seq = random_seq(&mut rng, &dims, 1, 6);
        for s in seq.steps.iter_mut() {
            s.p_s = 0.9;
            s.p_a = 0.9;
        }
        let p = m.loss(&seq, None, &LossWeights::from(&cfg));
        assert_eq!(p.consistency, 0.0);
        assert_eq!(p.consistency_discrete, 0.0);
    }

    #[test]
    fn binary_and_json_roundtrip() {
        let cfg = IntentionConfig { index_embedding: true, ..small_cfg() };
        let m = IntentionModel::init(Dims::new(4, 5, 2, 3, 3, &cfg), &cfg);
        let back = IntentionModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
        let back = IntentionModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut bad = m.to_bytes().unwrap();
        bad[0] = b'X';
        assert!(IntentionModel::from_bytes(&bad).is_err());
        let bytes = m.to_bytes().unwrap();
        assert!(IntentionModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn separable(n: usize, seed: u64, dims: &Dims) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = u8::from(i % 2 == 0);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let steps = (0..8)
                    .map(|_| {
                        let mut v = |k: usize| -> Vec<f64> {
                            (0..k).map(|_| sign * 0.5 + rng.random_range(-0.2..0.2)).collect()
                        };
                        StepInput {
                            status: usize::from(label == 1),
                            action: usize::from(label == 1),
                            f: v(dims.n_f),
                            s_vec: v(dims.n_s),
                            a_vec: v(dims.n_a),
                            p_s: if label == 1 { 0.7 } else { 0.3 },
                            p_a: if label == 1 { 0.65 } else { 0.35 },
                        }
                    })
                    .collect();
                Sequence {
                    address: format!("s{i}"),
                    label,
                    steps,
                }
            })
            .collect()
    }

    fn train_cfg() -> IntentionConfig {
        IntentionConfig {
            d_e: 4,
            d_z: 3,
            d_h: 8,
            d_enc: 8,
            d_att: 4,
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 8,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn training_curve_and_determinism() {
        let cfg = train_cfg();
        let dims = Dims::new(2, 2, 3, 3, 3, &cfg);
        let data = separable(32, 1, &dims);
        let init = IntentionModel::init(dims, &cfg);
        let (m1, h1) = train(init.clone(), &data, &cfg, |_, _| Ok(())).unwrap();
        let losses: Vec<f64> = h1.iter().map(|h| h.mean_loss).collect();
        assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        let (m2, h2) = train(init.clone(), &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);

        let tdie = |label: u8| {
            let mut v: Vec<f64> = data
                .iter()
                .filter(|s| s.label == label)
                .map(|s| m1.predict(s, cfg.epsilon).unwrap().t_die.unwrap_or(25) as f64)
                .collect();
            crate::metrics::median(&mut v).unwrap()
        };
        assert!(tdie(1) < tdie(0), "{} vs {}", tdie(1), tdie(0));

        let (m0, h0) = train(init.clone(), &data, &IntentionConfig { epochs: 0, ..cfg }, |_, _| Ok(())).unwrap();
        assert!(h0.is_empty());
        assert_eq!(m0, init);
    }

    #[test]
    fn checkpoints_every_epoch() {
        let cfg = IntentionConfig { epochs: 3, ..train_cfg() };
        let dims = Dims::new(2, 2, 3, 3, 3, &cfg);
        let data = separable(8, 2, &dims);
        let mut seen = Vec::new();
        train(IntentionModel::init(dims, &cfg), &data, &cfg, |s, m| {
            seen.push((s.epoch, m.params.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn out_of_range_status_rejected() {
        let cfg = small_cfg();
        let dims = Dims::new(2, 2, 1, 1, 1, &cfg);
        let m = IntentionModel::init(dims, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seq = random_seq(&mut rng, &dims, 0, 3);
        seq.steps[1].status = 2;
        assert!(m.predict(&seq, 0.01).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_stay_on_simplex(seed in 0u64..10_000) {
            let cfg = IntentionConfig { seed, ..small_cfg() };
            let dims = Dims::new(3, 3, 2, 2, 2, &cfg);
            let m = IntentionModel::init(dims, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = random_seq(&mut rng, &dims, (seed % 2) as u8, 24);
            let p = m.predict(&seq, cfg.epsilon).unwrap();
            let mut prev = 1.0;
            for s in &p.steps {
                prop_assert!(s.survival > 0.0 && s.survival <= prev);
                prev = s.survival;
                prop_assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(s.alpha.iter().all(|&a| a >= 0.0));
                prop_assert!(s.p_malicious > 0.0 && s.p_malicious < 1.0);
            }
        }

        #[test]
        fn fusion_is_convex(a in prop::array::uniform3(-20.0f64..20.0), p in prop::array::uniform3(0.0f64..1.0),
                            s in 0.0f64..1.0, prev in 0.0f64..1.0) {
            let al = softmax3(a);
            prop_assert!((al.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let pj = al[0] * p[0] + al[1] * p[1] + al[2] * p[2];
            let ph = smooth(s, pj, prev);
            prop_assert!((0.0..=1.0).contains(&ph));
            prop_assert!(((1.0 - ph) + ph - 1.0).abs() < 1e-12);
        }
    }
}
