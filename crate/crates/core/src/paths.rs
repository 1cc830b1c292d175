//! Influence/trust pairs and backward/forward asset-transfer paths.
//!
//! Paths grow breadth-first from a seed transaction. A hop is kept while the
//! cumulative score (product of per-hop proportions) stays at or above the
//! threshold and the hop lies within the time span of the seed. Every
//! frontier is part of the result, so path sets are prefix-closed.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chain::{expand_pairs, TransactionPair, TransactionRecord, TxIdx, TxStore};
use crate::error::{Error, Result};

pub const DAY: i64 = 86_400;
pub const DEFAULT_MAX_PATHS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "BK")]
    Backward,
    #[serde(rename = "FR")]
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Horizon {
    #[serde(rename = "LT")]
    Long,
    #[serde(rename = "ST")]
    Short,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Backward => "bk",
            Direction::Forward => "fr",
        })
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Horizon::Long => "lt",
            Horizon::Short => "st",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub direction: Direction,
    pub horizon: Horizon,
    pub theta: f64,
    /// Seconds.
    pub max_time_span: i64,
    pub max_paths_per_set: usize,
}

impl PathConfig {
    pub fn new(direction: Direction, horizon: Horizon) -> Self {
        let (theta, max_time_span) = match horizon {
            Horizon::Long => (0.5, 7 * DAY),
            Horizon::Short => (0.01, DAY),
        };
        PathConfig {
            direction,
            horizon,
            theta,
            max_time_span,
            max_paths_per_set: DEFAULT_MAX_PATHS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!(
                "{}-{} theta must lie in (0, 1], got {}",
                self.horizon, self.direction, self.theta
            )));
        }
        if self.max_time_span <= 0 {
            return Err(Error::Config(format!(
                "{}-{} max_time_span must be positive",
                self.horizon, self.direction
            )));
        }
        if self.max_paths_per_set == 0 {
            return Err(Error::Config("max_paths_per_set must be at least 1".into()));
        }
        Ok(())
    }
}

/// The four path configurations in feature-set order: LT-BK, ST-BK, LT-FR, ST-FR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfigs {
    pub lt_bk: PathConfig,
    pub st_bk: PathConfig,
    pub lt_fr: PathConfig,
    pub st_fr: PathConfig,
}

impl Default for PathConfigs {
    fn default() -> Self {
        PathConfigs {
            lt_bk: PathConfig::new(Direction::Backward, Horizon::Long),
            st_bk: PathConfig::new(Direction::Backward, Horizon::Short),
            lt_fr: PathConfig::new(Direction::Forward, Horizon::Long),
            st_fr: PathConfig::new(Direction::Forward, Horizon::Short),
        }
    }
}

impl PathConfigs {
    pub fn as_array(&self) -> [PathConfig; 4] {
        [self.lt_bk, self.st_bk, self.lt_fr, self.st_fr]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = [
            (Direction::Backward, Horizon::Long),
            (Direction::Backward, Horizon::Short),
            (Direction::Forward, Horizon::Long),
            (Direction::Forward, Horizon::Short),
        ];
        for (cfg, (d, h)) in self.as_array().iter().zip(expected) {
            cfg.validate()?;
            if cfg.direction != d || cfg.horizon != h {
                return Err(Error::Config(format!(
                    "path config slot {h}-{d} has direction/horizon {}-{}",
                    cfg.horizon, cfg.direction
                )));
            }
        }
        Ok(())
    }
}

/// Pairs whose input contributes at least `theta` of the total input amount.
pub fn influence_pairs(tx: &TransactionRecord, theta: f64) -> Result<Vec<TransactionPair>> {
    Ok(expand_pairs(tx)?
        .pairs
        .into_iter()
        .filter(|p| p.proportion >= theta)
        .collect())
}

/// Pairs whose output receives at least `theta` of the total output amount.
/// The returned proportion is the output share.
pub fn trust_pairs(tx: &TransactionRecord, theta: f64) -> Result<Vec<TransactionPair>> {
    let total: u128 = tx.outputs.iter().map(|o| o.amount as u128).sum();
    let n = tx.outputs.len() as f64;
    let shares: Vec<f64> = tx
        .outputs
        .iter()
        .map(|o| {
            if total == 0 {
                1.0 / n
            } else {
                o.amount as f64 / total as f64
            }
        })
        .collect();
    Ok(expand_pairs(tx)?
        .pairs
        .into_iter()
        .filter_map(|mut p| {
            let s = shares[p.output_index];
            (s >= theta).then(|| {
                p.proportion = s;
                p
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub prev: Option<TxIdx>,
    pub score: f64,
    pub tx: TxIdx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetTransferPath {
    pub hops: Vec<Hop>,
    pub direction: Direction,
    pub horizon: Horizon,
}

impl AssetTransferPath {
    fn trivial(seed: TxIdx, cfg: &PathConfig) -> Self {
        AssetTransferPath {
            hops: vec![Hop {
                prev: None,
                score: 1.0,
                tx: seed,
            }],
            direction: cfg.direction,
            horizon: cfg.horizon,
        }
    }

    pub fn anchor(&self) -> TxIdx {
        self.hops[0].tx
    }

    pub fn last(&self) -> &Hop {
        self.hops.last().expect("paths are never empty")
    }

    pub fn score(&self) -> f64 {
        self.last().score
    }

    /// Number of hops beyond the anchor.
    pub fn hop_len(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn key(&self) -> impl Iterator<Item = TxIdx> + '_ {
        self.hops.iter().map(|h| h.tx)
    }

    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.key().cmp(other.key())
    }

    fn extend(&self, tx: TxIdx, score: f64) -> Self {
        let mut hops = Vec::with_capacity(self.hops.len() + 1);
        hops.extend_from_slice(&self.hops);
        hops.push(Hop {
            prev: Some(self.last().tx),
            score,
            tx,
        });
        AssetTransferPath {
            hops,
            direction: self.direction,
            horizon: self.horizon,
        }
    }

    pub fn to_json(&self, store: &TxStore) -> serde_json::Value {
        let hops: Vec<serde_json::Value> = self
            .hops
            .iter()
            .map(|h| {
                serde_json::json!([
                    h.prev.map(|p| store.tx_id(p)),
                    h.score,
                    store.tx_id(h.tx)
                ])
            })
            .collect();
        serde_json::json!({
            "direction": self.direction,
            "horizon": self.horizon,
            "hops": hops,
            "score": self.score(),
        })
    }
}

/// Paths from one or more anchors, sorted by hop sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathSet {
    pub paths: Vec<AssetTransferPath>,
    pub truncated: bool,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn canonicalize(&mut self) {
        self.paths.sort_by(|a, b| a.cmp_key(b));
    }

    /// Concatenates sets with distinct anchors into one canonical set.
    pub fn merge<'a>(sets: impl IntoIterator<Item = &'a PathSet>) -> PathSet {
        let mut out = PathSet::default();
        for s in sets {
            out.paths.extend(s.paths.iter().cloned());
            out.truncated |= s.truncated;
        }
        out.canonicalize();
        out
    }
}

/// Successors of `tx` in the traced direction with their hop proportions.
fn successors(store: &TxStore, tx: TxIdx, direction: Direction) -> impl Iterator<Item = (TxIdx, f64)> + '_ {
    let (list, total, count) = match direction {
        Direction::Backward => (store.sources(tx), store.input_total(tx), store.input_count(tx)),
        Direction::Forward => (store.spenders(tx), store.output_total(tx), store.output_count(tx)),
    };
    list.iter().map(move |&(next, amount)| {
        let prop = if total == 0 {
            degenerate_share(store, tx, next, direction, count)
        } else {
            amount as f64 / total as f64
        };
        (next, prop)
    })
}

/// Zero-amount transactions split evenly: by input count backward, by output count forward.
fn degenerate_share(store: &TxStore, tx: TxIdx, next: TxIdx, direction: Direction, count: usize) -> f64 {
    match direction {
        Direction::Backward => {
            let n = store
                .input_sources(tx)
                .iter()
                .filter(|s| **s == Some(next))
                .count();
            n as f64 / count as f64
        }
        Direction::Forward => {
            let n = store
                .input_sources(next)
                .iter()
                .filter(|s| **s == Some(tx))
                .count();
            (n as f64 / count as f64).min(1.0)
        }
    }
}

struct Tracer<'a> {
    store: &'a TxStore,
    cfg: &'a PathConfig,
    seed_time: i64,
    /// Latest admissible hop time (forward only).
    horizon_end: i64,
}

impl Tracer<'_> {
    fn admissible(&self, tx: TxIdx) -> bool {
        let t = self.store.time(tx);
        match self.cfg.direction {
            Direction::Backward => self.seed_time - t <= self.cfg.max_time_span,
            Direction::Forward => t - self.seed_time <= self.cfg.max_time_span && t <= self.horizon_end,
        }
    }

    fn children(&self, path: &AssetTransferPath, after: Option<i64>, out: &mut Vec<AssetTransferPath>) {
        let parent = path.last();
        for (next, prop) in successors(self.store, parent.tx, self.cfg.direction) {
            if let Some(t) = after {
                if self.store.time(next) <= t {
                    continue;
                }
            }
            let score = prop * parent.score;
            if score >= self.cfg.theta && self.admissible(next) {
                out.push(path.extend(next, score));
            }
        }
    }

    /// Breadth-first expansion from `frontier`, appending every new path to `set`.
    fn expand(&self, set: &mut PathSet, mut frontier: Vec<AssetTransferPath>) {
        let cap = self.cfg.max_paths_per_set;
        while !frontier.is_empty() {
            let room = cap.saturating_sub(set.paths.len());
            if frontier.len() > room {
                frontier.sort_by(|a, b| {
                    b.score()
                        .total_cmp(&a.score())
                        .then_with(|| a.cmp_key(b))
                });
                frontier.truncate(room);
                set.truncated = true;
            }
            let mut next = Vec::new();
            for p in &frontier {
                self.children(p, None, &mut next);
            }
            set.paths.append(&mut frontier);
            frontier = next;
        }
    }
}

fn check_seed(store: &TxStore, seed: TxIdx) -> Result<()> {
    if (seed as usize) < store.tx_count() {
        Ok(())
    } else {
        Err(Error::TxNotFound(format!("#{seed}")))
    }
}

/// All backward paths from `seed`, prefixes included.
pub fn backward_paths(store: &TxStore, seed: TxIdx, cfg: &PathConfig) -> Result<PathSet> {
    if cfg.direction != Direction::Backward {
        return Err(Error::InvalidInput("backward_paths needs a BK config".into()));
    }
    check_seed(store, seed)?;
    let tracer = Tracer {
        store,
        cfg,
        seed_time: store.time(seed),
        horizon_end: i64::MAX,
    };
    let mut set = PathSet::default();
    tracer.expand(&mut set, vec![AssetTransferPath::trivial(seed, cfg)]);
    set.canonicalize();
    Ok(set)
}

/// All forward paths from `seed` using only transactions at or before `t_now`.
pub fn forward_paths(store: &TxStore, seed: TxIdx, cfg: &PathConfig, t_now: i64) -> Result<PathSet> {
    let mut tracer = ForwardTracer::new(store, seed, *cfg)?;
    tracer.advance(store, t_now);
    Ok(tracer.set)
}

/// Forward path set of one seed that can be extended as time advances.
#[derive(Debug, Clone)]
pub struct ForwardTracer {
    seed: TxIdx,
    cfg: PathConfig,
    t_now: Option<i64>,
    set: PathSet,
    generation: u64,
}

impl ForwardTracer {
    pub fn new(store: &TxStore, seed: TxIdx, cfg: PathConfig) -> Result<Self> {
        if cfg.direction != Direction::Forward {
            return Err(Error::InvalidInput("forward tracing needs an FR config".into()));
        }
        check_seed(store, seed)?;
        Ok(ForwardTracer {
            seed,
            cfg,
            t_now: None,
            set: PathSet::default(),
            generation: 0,
        })
    }

    pub fn paths(&self) -> &PathSet {
        &self.set
    }

    /// Bumped whenever the path set changes.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Brings the set up to `t_now`. Earlier times leave the set unchanged.
    pub fn advance(&mut self, store: &TxStore, t_now: i64) -> &PathSet {
        let seed_time = store.time(self.seed);
        let tracer = Tracer {
            store,
            cfg: &self.cfg,
            seed_time,
            horizon_end: t_now,
        };
        match self.t_now {
            Some(prev) if prev >= t_now => {}
            Some(prev) if !self.set.truncated => {
                let mut frontier = Vec::new();
                if prev - seed_time < self.cfg.max_time_span {
                    for p in &self.set.paths {
                        tracer.children(p, Some(prev), &mut frontier);
                    }
                }
                if !frontier.is_empty() {
                    tracer.expand(&mut self.set, frontier);
                    self.set.canonicalize();
                    self.generation += 1;
                }
                self.t_now = Some(t_now);
                if self.set.truncated {
                    // Pruning order depends on the whole frontier; start over.
                    self.t_now = None;
                    return self.advance(store, t_now);
                }
            }
            _ => {
                let mut set = PathSet::default();
                if seed_time <= t_now {
                    tracer.expand(&mut set, vec![AssetTransferPath::trivial(self.seed, &self.cfg)]);
                }
                set.canonicalize();
                self.set = set;
                self.t_now = Some(t_now);
                self.generation += 1;
            }
        }
        &self.set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{TxInput, TxOutput};
    use std::collections::BTreeSet;

    fn rec(id: &str, t: i64, inputs: &[(&str, u64)], outputs: &[(&str, u64)]) -> TransactionRecord {
        TransactionRecord {
            tx_id: id.into(),
            timestamp: t,
            inputs: inputs
                .iter()
                .map(|(s, a)| TxInput {
                    src: s.to_string(),
                    amount: *a,
                    owner: None,
                })
                .collect(),
            outputs: outputs
                .iter()
                .map(|(s, a)| TxOutput {
                    addr: s.to_string(),
                    amount: *a,
                })
                .collect(),
        }
    }

    fn scores(set: &PathSet) -> Vec<f64> {
        let mut s: Vec<f64> = set.paths.iter().map(|p| p.score()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    fn bk(theta: f64) -> PathConfig {
        PathConfig {
            theta,
            ..PathConfig::new(Direction::Backward, Horizon::Long)
        }
    }

    fn fr(theta: f64) -> PathConfig {
        PathConfig {
            theta,
            ..PathConfig::new(Direction::Forward, Horizon::Long)
        }
    }

    #[test]
    fn defaults() {
        let c = PathConfigs::default();
        assert_eq!((c.lt_bk.theta, c.lt_bk.max_time_span), (0.5, 604_800));
        assert_eq!((c.st_fr.theta, c.st_fr.max_time_span), (0.01, 86_400));
        c.validate().unwrap();
        let mut bad = c;
        bad.st_bk.theta = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn influence_pair_selection() {
        let tx = rec("t", 0, &[("a", 5), ("b", 70), ("c", 25)], &[("x", 100)]);
        let pairs = influence_pairs(&tx, 0.5).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].input_tx, "b");

        let single = rec("t", 0, &[("a", 3)], &[("x", 3)]);
        assert_eq!(influence_pairs(&single, 1.0).unwrap().len(), 1);

        let names: Vec<String> = (0..71).map(|k| format!("s{k}")).collect();
        let inputs: Vec<(&str, u64)> = names.iter().map(|n| (n.as_str(), 7)).collect();
        let many = rec("t", 0, &inputs, &[("x", 497)]);
        assert_eq!(influence_pairs(&many, 0.01).unwrap().len(), 71);
    }

    #[test]
    fn trust_pair_selection() {
        let tx = rec("t", 0, &[("a", 100)], &[("x", 20), ("y", 70), ("z", 10)]);
        let pairs = trust_pairs(&tx, 0.5).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].output_addr, "y");
        assert!((pairs[0].proportion - 0.7).abs() < 1e-12);

        let single = rec("t", 0, &[("a", 3)], &[("x", 3)]);
        assert_eq!(trust_pairs(&single, 1.0).unwrap().len(), 1);

        let even = rec("t", 0, &[("a", 10)], &[("x", 5), ("y", 5)]);
        assert_eq!(trust_pairs(&even, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn coinbase_seed_has_single_trivial_path() {
        let store = TxStore::from_records(vec![rec("c", 0, &[], &[("x", 5)])]);
        let set = backward_paths(&store, 0, &bk(0.5)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.paths[0].hops[0], Hop { prev: None, score: 1.0, tx: 0 });
    }

    #[test]
    fn three_level_chain_scores() {
        // seed <- a (0.9 of seed's inputs) <- b (0.8 of a's inputs)
        let store = TxStore::from_records(vec![
            rec("b", 0, &[], &[("q", 80)]),
            rec("b2", 0, &[], &[("q2", 20)]),
            rec("a", 10, &[("b", 80), ("b2", 20)], &[("r", 90)]),
            rec("a2", 10, &[], &[("r2", 10)]),
            rec("s", 20, &[("a", 90), ("a2", 10)], &[("w", 100)]),
        ]);
        let seed = store.find_tx("s").unwrap();
        let set = backward_paths(&store, seed, &bk(0.5)).unwrap();
        let got = scores(&set);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], 1.0);
        assert!((got[1] - 0.9).abs() < 1e-12);
        assert!((got[2] - 0.72).abs() < 1e-12);
    }

    fn peeling_chain() -> TxStore {
        let mut records = vec![rec("p0", 0, &[], &[("a0", 100_000_000)])];
        let mut value = 100_000_000u64;
        for k in 1..=5 {
            let keep = value * 95 / 100;
            records.push(rec(
                &format!("p{k}"),
                k * 3600,
                &[(&format!("p{}", k - 1), value)],
                &[(&format!("a{k}"), keep), (&format!("shed{k}"), value - keep)],
            ));
            value = keep;
        }
        TxStore::from_records(records)
    }

    #[test]
    fn peeling_chain_forward() {
        let store = peeling_chain();
        let seed = store.find_tx("p1").unwrap();
        let set = forward_paths(&store, seed, &fr(0.5), 10 * 3600).unwrap();
        assert_eq!(set.len(), 5);
        let longest = set.paths.iter().max_by_key(|p| p.hop_len()).unwrap();
        assert_eq!(longest.hop_len(), 4);
        assert!((longest.score() - 0.95f64.powi(4)).abs() < 1e-12);
        assert!((longest.score() - 0.8145).abs() < 1e-4);
    }

    #[test]
    fn forward_truncated_then_extended() {
        let store = peeling_chain();
        let seed = store.find_tx("p1").unwrap();
        let before = forward_paths(&store, seed, &fr(0.5), 3 * 3600 - 1).unwrap();
        assert_eq!(before.paths.iter().map(|p| p.hop_len()).max(), Some(1));
        let mut tracer = ForwardTracer::new(&store, seed, fr(0.5)).unwrap();
        tracer.advance(&store, 3 * 3600 - 1);
        for t in [3 * 3600, 4 * 3600 + 5, 10 * 3600] {
            let inc = tracer.advance(&store, t).clone();
            assert_eq!(inc, forward_paths(&store, seed, &fr(0.5), t).unwrap());
        }
    }

    #[test]
    fn unspent_seed_has_single_path() {
        let store = peeling_chain();
        let seed = store.find_tx("p5").unwrap();
        assert_eq!(forward_paths(&store, seed, &fr(0.5), 100 * 3600).unwrap().len(), 1);
    }

    #[test]
    fn seed_in_future_has_no_forward_paths() {
        let store = peeling_chain();
        let seed = store.find_tx("p5").unwrap();
        assert!(forward_paths(&store, seed, &fr(0.5), 0).unwrap().is_empty());
    }

    #[test]
    fn time_span_is_seed_anchored() {
        let store = peeling_chain();
        let seed = store.find_tx("p5").unwrap();
        let cfg = PathConfig {
            max_time_span: 2 * 3600,
            ..bk(0.5)
        };
        let set = backward_paths(&store, seed, &cfg).unwrap();
        assert_eq!(set.paths.iter().map(|p| p.hop_len()).max(), Some(2));
    }

    fn fan_in(n: usize) -> TxStore {
        let mut records = Vec::new();
        let mut inputs = Vec::new();
        for k in 0..n {
            records.push(rec(&format!("f{k:03}"), 0, &[], &[("x", 10 + k as u64)]));
        }
        let names: Vec<String> = (0..n).map(|k| format!("f{k:03}")).collect();
        for (k, name) in names.iter().enumerate() {
            inputs.push((name.as_str(), 10 + k as u64));
        }
        let total: u64 = inputs.iter().map(|i| i.1).sum();
        records.push(rec("s", 10, &inputs, &[("y", total)]));
        TxStore::from_records(records)
    }

    #[test]
    fn cap_prunes_by_score_and_keeps_prefixes() {
        let store = fan_in(20);
        let seed = store.find_tx("s").unwrap();
        let cfg = PathConfig {
            theta: 0.01,
            max_paths_per_set: 6,
            ..bk(0.5)
        };
        let set = backward_paths(&store, seed, &cfg).unwrap();
        assert!(set.truncated);
        assert_eq!(set.len(), 6);
        let kept: BTreeSet<String> = set
            .paths
            .iter()
            .filter(|p| p.hop_len() == 1)
            .map(|p| store.tx_id(p.last().tx).to_string())
            .collect();
        let expect: BTreeSet<String> = (15..20).map(|k| format!("f{k:03}")).collect();
        assert_eq!(kept, expect);
        assert!(set.paths.iter().any(|p| p.hop_len() == 0));
    }

    #[test]
    fn merge_is_sorted_and_flags_truncation() {
        let store = fan_in(3);
        let a = backward_paths(&store, 3, &bk(0.01)).unwrap();
        let b = PathSet {
            truncated: true,
            ..backward_paths(&store, 0, &bk(0.01)).unwrap()
        };
        let m = PathSet::merge([&a, &b]);
        assert!(m.truncated);
        assert_eq!(m.len(), a.len() + b.len());
        assert!(m.paths.windows(2).all(|w| w[0].cmp_key(&w[1]) == Ordering::Less));
    }

    #[test]
    fn json_dump_shape() {
        let store = peeling_chain();
        let set = forward_paths(&store, 1, &fr(0.5), 2 * 3600).unwrap();
        let v = set.paths.last().unwrap().to_json(&store);
        assert_eq!(v["direction"], "FR");
        assert_eq!(v["horizon"], "LT");
        assert_eq!(v["hops"][0][0], serde_json::Value::Null);
        assert_eq!(v["hops"][1][2], "p2");
    }
}
