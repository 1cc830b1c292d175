//! Second-order gradient boosting for binary classification.
//!
//! Gradients and hessians are weighted means over rows, so uniformly
//! duplicating the training set leaves the model unchanged. The L2 penalty
//! `lambda` acts on those mean-scale hessian sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Positive-class weight; `None` uses `N_neg / N_pos`.
    pub pos_weight: Option<f64>,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_rounds: 200,
            max_depth: 4,
            learning_rate: 0.1,
            lambda: 1.0,
            pos_weight: None,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.lambda < 0.0 || self.max_depth == 0 {
            return Err(Error::Config(
                "gbt needs learning_rate > 0, lambda >= 0 and max_depth >= 1".into(),
            ));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config("gbt.pos_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// `None` marks a leaf.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match n.feature {
                None => return n.value,
                Some(f) => i = if x[f] <= n.threshold { n.left } else { n.right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub pos_weight: f64,
    pub trees: Vec<RegressionTree>,
    /// Weighted mean training log-loss after each round.
    pub train_loss: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const P_EPS: f64 = 1e-15;

fn log_loss(y: f64, p: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    lambda: f64,
    max_depth: usize,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn leaf_value(&self, gs: f64, hs: f64) -> f64 {
        -gs / (hs + self.lambda)
    }

    fn score(&self, gs: f64, hs: f64) -> f64 {
        gs * gs / (hs + self.lambda)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let gs: f64 = rows.iter().map(|&r| self.g[r]).sum();
        let hs: f64 = rows.iter().map(|&r| self.h[r]).sum();
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            value: self.leaf_value(gs, hs),
        });
        if depth >= self.max_depth || rows.len() < 2 {
            return id;
        }
        let parent = self.score(gs, hs);
        let n_features = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<usize> = rows.clone();
        for f in 0..n_features {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..sorted.len() - 1 {
                let r = sorted[i];
                gl += self.g[r];
                hl += self.h[r];
                let (v, next) = (self.x[r][f], self.x[sorted[i + 1]][f]);
                if v == next {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(gs - gl, hs - hl) - parent;
                if gain > best.map_or(1e-15, |b| b.0) {
                    best = Some((gain, f, crate::cart::split_point(v, next)));
                }
            }
        }
        let Some((_, f, thr)) = best else { return id };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&row| self.x[row][f] <= thr);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        let node = &mut self.nodes[id];
        node.feature = Some(f);
        node.threshold = thr;
        node.left = left;
        node.right = right;
        id
    }
}

/// Trains a boosted ensemble. Training is fully deterministic.
pub fn train_gbt(x: &[Vec<f64>], y: &[u8], cfg: &GbtConfig) -> Result<GbtModel> {
    cfg.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidInput(format!(
            "gbt needs matching non-empty rows and labels ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("gbt needs both classes".into()));
    }
    let pos_weight = cfg.pos_weight.unwrap_or(n_neg as f64 / n_pos as f64);
    let w: Vec<f64> = y.iter().map(|&v| if v == 1 { pos_weight } else { 1.0 }).collect();
    let wsum: f64 = w.iter().sum();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let wpos: f64 = w.iter().zip(&yf).map(|(w, y)| w * y).sum();
    let base_score = (wpos / (wsum - wpos)).ln();

    let mut margin = vec![base_score; x.len()];
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let mut train_loss = Vec::with_capacity(cfg.n_rounds);
    let mut g = vec![0.0; x.len()];
    let mut h = vec![0.0; x.len()];
    for _ in 0..cfg.n_rounds {
        for i in 0..x.len() {
            let p = sigmoid(margin[i]);
            g[i] = w[i] * (p - yf[i]) / wsum;
            h[i] = w[i] * p * (1.0 - p) / wsum;
        }
        let mut grower = Grower {
            x,
            g: &g,
            h: &h,
            lambda: cfg.lambda,
            max_depth: cfg.max_depth,
            nodes: Vec::new(),
        };
        grower.grow((0..x.len()).collect(), 0);
        let tree = RegressionTree { nodes: grower.nodes };
        for (m, row) in margin.iter_mut().zip(x) {
            *m += cfg.learning_rate * tree.predict(row);
        }
        trees.push(tree);
        let loss: f64 = margin
            .iter()
            .zip(&yf)
            .zip(&w)
            .map(|((&m, &y), &wi)| wi * log_loss(y, sigmoid(m)))
            .sum::<f64>()
            / wsum;
        train_loss.push(loss);
    }
    Ok(GbtModel {
        base_score,
        learning_rate: cfg.learning_rate,
        n_features: x[0].len(),
        pos_weight,
        trees,
        train_loss,
    })
}

impl GbtModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score
            + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// `(p0, p1)` with `p1` the malicious probability.
    pub fn predict_proba(&self, x: &[f64]) -> (f64, f64) {
        let p1 = sigmoid(self.margin(x)).clamp(P_EPS, 1.0 - P_EPS);
        (1.0 - p1, p1)
    }

    /// A model with no trees: predicts `sigmoid(base_score)` everywhere.
    pub fn constant(base_score: f64, n_features: usize) -> Self {
        GbtModel {
            base_score,
            learning_rate: 0.1,
            n_features,
            pos_weight: 1.0,
            trees: Vec::new(),
            train_loss: Vec::new(),
        }
    }
}
