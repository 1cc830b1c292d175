//! Decision-tree feature selection and complement.
//!
//! Each round trains several seeded trees on the current feature lists and
//! scores them by F1 on a stratified holdout. A round is accepted when its
//! average score does not fall below the best accepted average; the next
//! lists come from the importance partition of the round's best tree.
//! Complemented path features expand from `avg` to `max, min, avg, std`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{f1_score, DecisionTree, TreeConfig};
use crate::error::{Error, Result};
use crate::features::{
    full_column, full_count_column, path_count_name, path_feature_name, schema_hash, seed_schema, FeatureTimeline,
    ADDRESS_FEATURES, PATH_FEATURES, PATH_SETS, STATS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub theta_c: f64,
    pub n_seeds: u64,
    pub holdout: f64,
    pub max_rounds: usize,
    pub tree: TreeConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            theta_c: 0.5,
            n_seeds: 10,
            holdout: 0.2,
            max_rounds: 10,
            tree: TreeConfig::default(),
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_c > 0.0 && self.theta_c < 1.0) {
            return Err(Error::Config("select.theta_c must lie in (0, 1)".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config("select.holdout must lie in (0, 1)".into()));
        }
        if self.n_seeds == 0 || self.max_rounds == 0 {
            return Err(Error::Config("select.n_seeds and select.max_rounds must be positive".into()));
        }
        Ok(())
    }
}

/// How a base feature maps onto full-schema columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    /// Address feature or path count: one column, never expanded.
    Single(usize),
    /// Path feature `(set, feature)` with four aggregate columns.
    Path(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseFeature {
    pub name: String,
    pub kind: BaseKind,
}

impl BaseFeature {
    pub fn expandable(&self) -> bool {
        matches!(self.kind, BaseKind::Path(..))
    }
}

/// The 68 base features in seed-schema order.
pub fn base_features() -> Vec<BaseFeature> {
    let mut out: Vec<BaseFeature> = ADDRESS_FEATURES
        .iter()
        .enumerate()
        .map(|(i, n)| BaseFeature {
            name: n.to_string(),
            kind: BaseKind::Single(i),
        })
        .collect();
    for (s, set) in PATH_SETS.iter().enumerate() {
        for (f, feat) in PATH_FEATURES.iter().enumerate() {
            out.push(BaseFeature {
                name: path_feature_name(set, feat),
                kind: BaseKind::Path(s, f),
            });
        }
        out.push(BaseFeature {
            name: path_count_name(set),
            kind: BaseKind::Single(full_count_column(s)),
        });
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub complement: BTreeSet<String>,
    pub reserve: BTreeSet<String>,
    pub delete: BTreeSet<String>,
}

/// Splits features by importance relative to the maximum: above `theta_c`
/// of it goes to complement, exactly on the bar stays in reserve. Features
/// that cannot be expanded go to reserve even when they clear the bar.
pub fn importance_partition(
    names: &[String],
    importance: &[f64],
    theta_c: f64,
    expandable: impl Fn(&str) -> bool,
) -> Partition {
    let max = importance.iter().cloned().fold(0.0, f64::max);
    let mut p = Partition::default();
    for (name, &imp) in names.iter().zip(importance) {
        let bucket = if imp <= 0.0 {
            &mut p.delete
        } else if imp > theta_c * max && expandable(name) {
            &mut p.complement
        } else {
            &mut p.reserve
        };
        bucket.insert(name.clone());
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScore {
    pub round: usize,
    pub avg_f1: f64,
    pub best_f1: f64,
    pub accepted: bool,
}

/// Feature lists consumed by segmentation and the boosted trees. Lists hold
/// base feature names and are kept in seed-schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub round: usize,
    pub complement: Vec<String>,
    pub reserve: Vec<String>,
    pub delete: Vec<String>,
    pub seed_schema_hash: String,
    #[serde(default)]
    pub history: Vec<RoundScore>,
}

impl FeatureSpec {
    /// Every base feature reserved: materializes to the seed schema.
    pub fn seed() -> Self {
        FeatureSpec {
            round: 0,
            complement: Vec::new(),
            reserve: base_features().into_iter().map(|b| b.name).collect(),
            delete: Vec::new(),
            seed_schema_hash: schema_hash(&seed_schema()),
            history: Vec::new(),
        }
    }

    /// Every path feature complemented: materializes to the full schema.
    pub fn full() -> Self {
        let (c, r): (Vec<BaseFeature>, Vec<BaseFeature>) =
            base_features().into_iter().partition(BaseFeature::expandable);
        FeatureSpec {
            complement: c.into_iter().map(|b| b.name).collect(),
            reserve: r.into_iter().map(|b| b.name).collect(),
            ..Self::seed()
        }
    }

    fn from_partition(p: &Partition, round: usize) -> Self {
        let order = base_features();
        let pick = |set: &BTreeSet<String>| -> Vec<String> {
            order
                .iter()
                .filter(|b| set.contains(&b.name))
                .map(|b| b.name.clone())
                .collect()
        };
        FeatureSpec {
            round,
            complement: pick(&p.complement),
            reserve: pick(&p.reserve),
            delete: pick(&p.delete),
            seed_schema_hash: schema_hash(&seed_schema()),
            history: Vec::new(),
        }
    }

    fn lists_eq(&self, other: &Self) -> bool {
        self.complement == other.complement && self.reserve == other.reserve && self.delete == other.delete
    }

    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<String> = base_features().into_iter().map(|b| b.name).collect();
        let mut seen = BTreeSet::new();
        for name in self.complement.iter().chain(&self.reserve).chain(&self.delete) {
            if !known.contains(name) {
                return Err(Error::InvalidInput(format!("unknown feature {name} in feature spec")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidInput(format!("feature {name} listed twice in feature spec")));
            }
        }
        let expandable: BTreeSet<String> = base_features()
            .into_iter()
            .filter(BaseFeature::expandable)
            .map(|b| b.name)
            .collect();
        if let Some(bad) = self.complement.iter().find(|n| !expandable.contains(*n)) {
            return Err(Error::InvalidInput(format!("{bad} cannot be complemented")));
        }
        if self.seed_schema_hash != schema_hash(&seed_schema()) {
            return Err(Error::InvalidInput("feature spec was built for a different schema".into()));
        }
        Ok(())
    }

    /// `(column name, full-schema index)` of the materialized matrix.
    pub fn columns(&self) -> Vec<(String, usize)> {
        self.columns_with_base()
            .into_iter()
            .map(|(name, c, _)| (name, c))
            .collect()
    }

    fn columns_with_base(&self) -> Vec<(String, usize, String)> {
        let comp: BTreeSet<&String> = self.complement.iter().collect();
        let res: BTreeSet<&String> = self.reserve.iter().collect();
        let mut out = Vec::new();
        for b in base_features() {
            let complemented = comp.contains(&b.name);
            if !complemented && !res.contains(&b.name) {
                continue;
            }
            match b.kind {
                BaseKind::Single(c) => out.push((b.name.clone(), c, b.name.clone())),
                BaseKind::Path(s, f) if complemented => {
                    for (k, stat) in STATS.iter().enumerate() {
                        out.push((format!("{}_{stat}", b.name), full_column(s, f, k), b.name.clone()));
                    }
                }
                BaseKind::Path(s, f) => out.push((format!("{}_avg", b.name), full_column(s, f, 2), b.name.clone())),
            }
        }
        out
    }

    pub fn materialize_row(&self, full_row: &[f64]) -> Vec<f64> {
        self.columns().iter().map(|&(_, c)| full_row[c]).collect()
    }

    pub fn materialize(&self, full_rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let cols: Vec<usize> = self.columns().into_iter().map(|(_, c)| c).collect();
        full_rows
            .iter()
            .map(|r| cols.iter().map(|&c| r[c]).collect())
            .collect()
    }
}

/// Labeled address-hour rows in the full schema, grouped by address.
#[derive(Debug, Clone, Default)]
pub struct SelectData {
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub groups: Vec<usize>,
}

impl SelectData {
    /// Flattens labeled timelines; unlabeled addresses are skipped.
    pub fn from_timelines(timelines: &[FeatureTimeline]) -> Self {
        let mut d = SelectData::default();
        for (g, tl) in timelines.iter().enumerate() {
            let Some(bit) = tl.label.as_bit() else { continue };
            for row in &tl.rows {
                d.rows.push(row.clone());
                d.y.push(bit as usize);
                d.groups.push(g);
            }
        }
        d
    }

    /// Holdout row mask: a seeded, label-stratified sample of whole groups.
    fn holdout_mask(&self, fraction: f64, seed: u64) -> Vec<bool> {
        let mut by_class: [BTreeSet<usize>; 2] = [BTreeSet::new(), BTreeSet::new()];
        for (&g, &y) in self.groups.iter().zip(&self.y) {
            by_class[y.min(1)].insert(g);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_401d);
        let mut held = BTreeSet::new();
        for class in by_class {
            let mut gs: Vec<usize> = class.into_iter().collect();
            gs.shuffle(&mut rng);
            let k = if gs.len() >= 2 {
                ((gs.len() as f64 * fraction).round() as usize).clamp(1, gs.len() - 1)
            } else {
                0
            };
            held.extend(gs.into_iter().take(k));
        }
        self.groups.iter().map(|g| held.contains(g)).collect()
    }
}

/// One seeded tree: F1 on the holdout and per-column importance.
pub fn train_and_score(x: &[Vec<f64>], data: &SelectData, cfg: &SelectConfig, seed: u64) -> Result<(DecisionTree, f64)> {
    let mask = data.holdout_mask(cfg.holdout, seed);
    let (mut xt, mut yt, mut xh, mut yh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((row, &y), &h) in x.iter().zip(&data.y).zip(&mask) {
        if h {
            xh.push(row.clone());
            yh.push(y);
        } else {
            xt.push(row.clone());
            yt.push(y);
        }
    }
    let tree = DecisionTree::fit(&xt, &yt, 2, cfg.tree, Some(seed))?;
    let single_class = yt.iter().all(|&c| c == yt[0]);
    let score = if single_class || xh.is_empty() {
        0.0
    } else {
        let pred: Vec<usize> = xh.iter().map(|r| tree.predict(r)).collect();
        f1_score(&yh, &pred)
    };
    Ok((tree, score))
}

struct RoundResult {
    avg: f64,
    best: f64,
    /// Importance per base feature of the best run, over `considered`.
    importance: Vec<f64>,
}

fn run_round(data: &SelectData, spec: &FeatureSpec, considered: &[String], cfg: &SelectConfig) -> Result<RoundResult> {
    let columns = spec.columns_with_base();
    let x = spec.materialize(&data.rows);
    let runs: Vec<(DecisionTree, f64)> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|seed| train_and_score(&x, data, cfg, seed))
        .collect::<Result<_>>()?;
    let avg = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.1 > runs[best].1 {
            best = i;
        }
    }
    // Fold expanded columns back onto their base feature.
    let mut importance = vec![0.0; considered.len()];
    for ((name, _, base), imp) in columns.iter().zip(&runs[best].0.importance) {
        let i = considered
            .iter()
            .position(|b| b == base)
            .ok_or_else(|| Error::Internal(format!("column {name} has no base feature")))?;
        importance[i] += imp;
    }
    Ok(RoundResult {
        avg,
        best: runs[best].1,
        importance,
    })
}

/// Runs the selection loop and returns the last accepted feature lists.
pub fn dtsc_loop(data: &SelectData, cfg: &SelectConfig) -> Result<FeatureSpec> {
    cfg.validate()?;
    if data.rows.is_empty() || data.y.iter().all(|&c| c == data.y[0]) {
        return Err(Error::Degenerate(
            "feature selection needs labeled rows of both classes".into(),
        ));
    }
    let expandable: BTreeSet<String> = base_features()
        .into_iter()
        .filter(BaseFeature::expandable)
        .map(|b| b.name)
        .collect();
    let mut lists = FeatureSpec::seed();
    let mut accepted: Option<FeatureSpec> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::new();

    for round in 0..cfg.max_rounds {
        let considered: Vec<String> = lists.complement.iter().chain(&lists.reserve).cloned().collect();
        let considered: Vec<String> = base_features()
            .into_iter()
            .map(|b| b.name)
            .filter(|n| considered.contains(n))
            .collect();
        let res = run_round(data, &lists, &considered, cfg)?;
        let ok = round == 0 || res.avg >= best_score;
        history.push(RoundScore {
            round,
            avg_f1: res.avg,
            best_f1: res.best,
            accepted: ok,
        });
        log::info!(
            "selection round {round}: avg F1 {:.4}, best {:.4}, {} columns, {}",
            res.avg,
            res.best,
            lists.columns().len(),
            if ok { "accepted" } else { "rejected" }
        );
        if !ok {
            break;
        }
        best_score = res.avg;
        lists.round = round;
        accepted = Some(lists.clone());

        if res.importance.iter().all(|&v| v <= 0.0) {
            if round == 0 {
                return Err(Error::Degenerate(
                    "round-0 trees found no informative split".into(),
                ));
            }
            break;
        }
        let mut p = importance_partition(&considered, &res.importance, cfg.theta_c, |n| expandable.contains(n));
        p.delete.extend(lists.delete.iter().cloned());
        let next = FeatureSpec::from_partition(&p, round + 1);
        if next.lists_eq(&lists) {
            break;
        }
        lists = next;
    }
    let mut spec = accepted.expect("round 0 is always accepted");
    spec.history = history;
    Ok(spec)
}
