//! Gini CART classifier with impurity-decrease importances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of rows drawn without replacement before fitting.
    pub subsample: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: Some(8),
            min_leaf: 5,
            subsample: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature; `None` for leaves.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Training rows per class reaching this node.
    pub counts: Vec<f64>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature.is_none()
    }

    pub fn class(&self) -> usize {
        argmax(&self.counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub n_classes: usize,
    /// Normalized total impurity decrease per feature.
    pub importance: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn gini(counts: &[f64], n: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Threshold strictly between `a < b`; the midpoint rounds up to `b` when they are one ulp apart.
pub(crate) fn split_point(a: f64, b: f64) -> f64 {
    let mid = a + (b - a) / 2.0;
    if mid < b { mid } else { a }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    cfg: TreeConfig,
    rng: Option<ChaCha8Rng>,
    nodes: Vec<Node>,
    gains: Vec<f64>,
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.n_classes];
        for &r in rows {
            c[self.y[r]] += 1.0;
        }
        c
    }

    fn best_split(&mut self, rows: &[usize], counts: &[f64]) -> Option<Split> {
        let n = rows.len() as f64;
        let parent = n * gini(counts, n);
        let n_features = self.x.first().map_or(0, Vec::len);
        let min_leaf = self.cfg.min_leaf.max(1);
        let mut cands: Vec<Split> = Vec::new();
        let tol = 1e-12 * parent.max(1.0);
        let mut best_gain = 0.0;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for f in 0..n_features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.x[r][f], self.y[r])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0.0; self.n_classes];
            for i in 0..sorted.len() - 1 {
                left[sorted[i].1] += 1.0;
                let nl = i + 1;
                if sorted[i].0 == sorted[i + 1].0 || nl < min_leaf || rows.len() - nl < min_leaf {
                    continue;
                }
                let right: Vec<f64> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
                let (nlf, nrf) = (nl as f64, (rows.len() - nl) as f64);
                let gain = parent - nlf * gini(&left, nlf) - nrf * gini(&right, nrf);
                if gain <= tol {
                    continue;
                }
                if gain > best_gain + tol {
                    best_gain = gain;
                    cands.clear();
                } else if gain < best_gain - tol {
                    continue;
                }
                cands.push(Split {
                    feature: f,
                    threshold: split_point(sorted[i].0, sorted[i + 1].0),
                    gain,
                });
            }
        }
        if cands.is_empty() {
            return None;
        }
        let pick = match &mut self.rng {
            Some(rng) => rng.random_range(0..cands.len()),
            None => 0,
        };
        Some(cands.swap_remove(pick))
    }

    /// Grows the tree in preorder with an explicit stack (explainer trees
    /// have no depth cap and can get deep).
    fn grow(&mut self, rows: Vec<usize>) {
        // (rows, depth, parent node and whether this is its left child)
        let mut stack: Vec<(Vec<usize>, usize, Option<(usize, bool)>)> = vec![(rows, 0, None)];
        while let Some((rows, depth, parent)) = stack.pop() {
            let counts = self.counts(&rows);
            let id = self.nodes.len();
            self.nodes.push(Node {
                feature: None,
                threshold: 0.0,
                left: 0,
                right: 0,
                counts: counts.clone(),
            });
            if let Some((p, is_left)) = parent {
                if is_left {
                    self.nodes[p].left = id;
                } else {
                    self.nodes[p].right = id;
                }
            }
            let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
            let deep = self.cfg.max_depth.is_some_and(|d| depth >= d);
            if pure || deep || rows.len() < 2 * self.cfg.min_leaf.max(1) {
                continue;
            }
            let Some(split) = self.best_split(&rows, &counts) else {
                continue;
            };
            self.gains[split.feature] += split.gain;
            let (l, r): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|&&row| self.x[row][split.feature] <= split.threshold);
            let node = &mut self.nodes[id];
            node.feature = Some(split.feature);
            node.threshold = split.threshold;
            stack.push((r, depth + 1, Some((id, false))));
            stack.push((l, depth + 1, Some((id, true))));
        }
    }
}

impl DecisionTree {
    /// Fits a tree. With `seed`, rows are subsampled and equal-gain splits are
    /// chosen at random; without it, all rows are used and the first split wins.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: TreeConfig, seed: Option<u64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows but {} labels",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Degenerate("no training rows".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidInput(format!("class {bad} out of range")));
        }
        let n_features = x[0].len();
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let mut rows: Vec<usize> = (0..x.len()).collect();
        if let Some(rng) = &mut rng {
            if cfg.subsample < 1.0 {
                rows.shuffle(rng);
                let keep = ((x.len() as f64 * cfg.subsample).ceil() as usize).clamp(1, x.len());
                rows.truncate(keep);
                rows.sort_unstable();
            }
        }
        let mut b = Builder {
            x,
            y,
            n_classes,
            cfg,
            rng,
            nodes: Vec::new(),
            gains: vec![0.0; n_features],
        };
        b.grow(rows);
        let total: f64 = b.gains.iter().sum();
        let importance = if total > 0.0 {
            b.gains.iter().map(|g| g / total).collect()
        } else {
            vec![0.0; n_features]
        };
        Ok(DecisionTree {
            nodes: b.nodes,
            n_features,
            n_classes,
            importance,
        })
    }

    pub fn leaf(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match n.feature {
                None => return i,
                Some(f) => i = if row[f] <= n.threshold { n.left } else { n.right },
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        self.nodes[self.leaf(row)].class()
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let c = &self.nodes[self.leaf(row)].counts;
        let n: f64 = c.iter().sum();
        c.iter().map(|v| v / n).collect()
    }

    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            let n = &self.nodes[i];
            if n.is_leaf() {
                best = best.max(d);
            } else {
                stack.push((n.left, d + 1));
                stack.push((n.right, d + 1));
            }
        }
        best
    }

    /// Root-to-leaf predicates `(feature, goes_left, threshold)` for every leaf predicting `class`.
    pub fn class_paths(&self, class: usize) -> Vec<Vec<(usize, bool, f64)>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((i, path)) = stack.pop() {
            let n = &self.nodes[i];
            match n.feature {
                None => {
                    if n.class() == class && n.counts[class] > 0.0 {
                        out.push(path);
                    }
                }
                Some(f) => {
                    let mut r = path.clone();
                    r.push((f, false, n.threshold));
                    stack.push((n.right, r));
                    let mut l = path;
                    l.push((f, true, n.threshold));
                    stack.push((n.left, l));
                }
            }
        }
        out
    }
}

/// F1 of the positive class (1); 0 when undefined.
pub fn f1_score(truth: &[usize], pred: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == 1, p == 1) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}
