//! Shared segmentation of the observation window, segment and differentiation
//! representations, and global status/action catalogs.
//!
//! Timelines are min-max normalized with training statistics. Breakpoints
//! come from the population change ratio between consecutive hours and are
//! shared by every address. Segment means `g_k` cluster into statuses and
//! differences `d_k = g_k - g_{k-1}` cluster into actions (Ward linkage).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cart::{DecisionTree, TreeConfig};
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_THETA_S: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Per-column min and max over every row of every timeline.
    pub fn fit(timelines: &[Vec<Vec<f64>>]) -> Result<Self> {
        let dim = timelines
            .iter()
            .flat_map(|t| t.first())
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::Degenerate("no rows to normalize".into()))?;
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in timelines.iter().flatten() {
            for (m, (lo, hi)) in row.iter().zip(min.iter_mut().zip(max.iter_mut())) {
                *lo = lo.min(*m);
                *hi = hi.max(*m);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| {
                if hi > lo {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Population change ratio between consecutive hours:
/// mean over addresses and features of `(f_j - f_{j-1}) / (f_{j-1} + delta)`.
pub fn change_ratio(current: &[&[f64]], previous: &[&[f64]], delta: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (cur, prev) in current.iter().zip(previous) {
        for (a, b) in cur.iter().zip(prev.iter()) {
            sum += (a - b) / (b + delta);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationPlan {
    /// First hour (1-based) of every segment after the first.
    pub breakpoints: Vec<usize>,
    pub hours: usize,
    pub theta_s: f64,
    pub delta: f64,
    pub columns: Vec<String>,
    pub normalizer: Normalizer,
    /// Change ratio per hour `J = 2..=hours`.
    pub ratios: Vec<f64>,
}

impl SegmentationPlan {
    pub fn segments(&self) -> usize {
        self.breakpoints.len() + 1
    }

    /// `(start, end)` hours, 1-based inclusive.
    pub fn bounds(&self) -> Vec<(usize, usize)> {
        let mut starts = vec![1];
        starts.extend(&self.breakpoints);
        starts
            .iter()
            .enumerate()
            .map(|(k, &s)| (s, starts.get(k + 1).map_or(self.hours, |&n| n - 1)))
            .collect()
    }

    /// Segment index (0-based) of a 1-based hour.
    pub fn segment_of(&self, hour: usize) -> usize {
        self.breakpoints.partition_point(|&b| b <= hour)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("plan serializes"));
        hex::encode(h.finalize())
    }
}

/// Scans `J = 2..=hours` and opens a segment at `J` when `|C_J| > theta_s * C_H`,
/// where `C_H` is the largest `|C_j|` seen for `j < J`.
pub fn propose_breakpoints(
    timelines: &[Vec<Vec<f64>>],
    columns: Vec<String>,
    theta_s: f64,
    delta: f64,
) -> Result<SegmentationPlan> {
    let normalizer = Normalizer::fit(timelines)?;
    let hours = timelines[0].len();
    if timelines.iter().any(|t| t.len() != hours) {
        return Err(Error::InvalidInput("timelines differ in length".into()));
    }
    let norm: Vec<Vec<Vec<f64>>> = timelines.iter().map(|t| normalizer.apply_all(t)).collect();
    let mut breakpoints = Vec::new();
    let mut ratios = Vec::new();
    let mut c_h = 0.0f64;
    for j in 2..=hours {
        let cur: Vec<&[f64]> = norm.iter().map(|t| t[j - 1].as_slice()).collect();
        let prev: Vec<&[f64]> = norm.iter().map(|t| t[j - 2].as_slice()).collect();
        let c = change_ratio(&cur, &prev, delta);
        ratios.push(c);
        if c.abs() > theta_s * c_h {
            breakpoints.push(j);
        }
        c_h = c_h.max(c.abs());
    }
    Ok(SegmentationPlan {
        breakpoints,
        hours,
        theta_s,
        delta,
        columns,
        normalizer,
        ratios,
    })
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, x) in m.iter_mut().zip(r) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Segment means `g` and differences `d` of already-normalized rows.
pub fn segment_representations(rows: &[Vec<f64>], plan: &SegmentationPlan) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dim = rows[0].len();
    let mut prev = vec![0.0; dim];
    let mut g = Vec::new();
    let mut d = Vec::new();
    for (s, e) in plan.bounds() {
        let gk = mean_rows(&rows[s - 1..e]);
        d.push(sub(&gk, &prev));
        prev = gk.clone();
        g.push(gk);
    }
    (g, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Total weight of the merged cluster.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    /// Member weight per cluster.
    pub sizes: Vec<f64>,
    /// Ward merges over the distinct training vectors, ascending distance;
    /// ids `>= n` name earlier merges (`n + i`).
    pub dendrogram: Vec<Merge>,
    pub explainer: DecisionTree,
}

fn condensed(i: usize, j: usize, n: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    n * i - i * (i + 1) / 2 + (j - i - 1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ward linkage on weighted points via the nearest-neighbour chain.
/// Returns merges sorted by distance with scipy-style ids.
pub fn ward_linkage(points: &[Vec<f64>], weights: &[f64]) -> Vec<Merge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut dist = vec![0.0; n * (n - 1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            let (wi, wj) = (weights[i], weights[j]);
            dist[condensed(i, j, n)] = 2.0 * wi * wj / (wi + wj) * sq_dist(&points[i], &points[j]);
        }
    }
    let mut size = weights.to_vec();
    let mut active = vec![true; n];
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    for _ in 0..n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("two active clusters remain"));
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| dist[condensed(a, p, n)]);
            for (b, &on) in active.iter().enumerate() {
                if !on || b == a {
                    continue;
                }
                let d = dist[condensed(a, b, n)];
                if d < best_d {
                    best_d = d;
                    best = Some(b);
                }
            }
            let b = best.expect("another active cluster exists");
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                raw.push((lo, hi, best_d));
                let (sa, sb) = (size[lo], size[hi]);
                for k in 0..n {
                    if !active[k] || k == lo || k == hi {
                        continue;
                    }
                    let sk = size[k];
                    let dl = dist[condensed(k, lo, n)];
                    let dh = dist[condensed(k, hi, n)];
                    dist[condensed(k, lo, n)] = ((sa + sk) * dl + (sb + sk) * dh - sk * best_d) / (sa + sb + sk);
                }
                active[hi] = false;
                size[lo] = sa + sb;
                break;
            }
            chain.push(b);
        }
    }
    // Stable sort by height, then relabel with union-find.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&x, &y| raw[x].2.total_cmp(&raw[y].2));
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    let mut id: Vec<usize> = (0..n).collect(); // root point -> current cluster id
    let mut wsum: Vec<f64> = weights.to_vec();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut out = Vec::with_capacity(raw.len());
    for (step, &o) in order.iter().enumerate() {
        let (i, j, d) = raw[o];
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        let (ca, cb) = (id[ri].min(id[rj]), id[ri].max(id[rj]));
        let (keep, gone) = if ri < rj { (ri, rj) } else { (rj, ri) };
        parent[gone] = keep;
        wsum[keep] += wsum[gone];
        id[keep] = n + step;
        out.push(Merge {
            a: ca,
            b: cb,
            distance: d,
            size: wsum[keep],
        });
    }
    out
}

/// Flat labels after applying the first `n - k` merges, numbered by smallest member.
pub fn cut_tree(merges: &[Merge], n: usize, k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    // Track a representative point for each cluster id.
    let mut rep: Vec<usize> = (0..n).collect();
    for (step, m) in merges.iter().take(n.saturating_sub(k)).enumerate() {
        let (ra, rb) = (find(&mut parent, rep[m.a]), find(&mut parent, rep[m.b]));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
        rep.push(lo);
        debug_assert_eq!(rep.len(), n + step + 1);
    }
    let mut label_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = vec![0; n];
    for (i, l) in labels.iter_mut().enumerate() {
        let r = find(&mut parent, i);
        let next = label_of_root.len();
        *l = *label_of_root.entry(r).or_insert(next);
    }
    labels
}

/// Distinct vectors in lexicographic order with their multiplicities.
fn dedup(vectors: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut sorted: Vec<&Vec<f64>> = vectors.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut weights = Vec::new();
    for v in sorted {
        if points.last().is_some_and(|p| p == v) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            points.push(v.clone());
            weights.push(1.0);
        }
    }
    (points, weights)
}

impl Catalog {
    /// Ward clustering into `k` clusters plus an explainer tree.
    pub fn fit(vectors: &[Vec<f64>], k: usize) -> Result<Self> {
        if vectors.is_empty() || k == 0 {
            return Err(Error::Degenerate("catalog needs vectors and k >= 1".into()));
        }
        let (points, weights) = dedup(vectors);
        if k > points.len() {
            return Err(Error::Degenerate(format!(
                "k = {k} exceeds the {} distinct vectors",
                points.len()
            )));
        }
        let dim = points[0].len();
        let merges = ward_linkage(&points, &weights);
        let labels = cut_tree(&merges, points.len(), k);
        let mut centers = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0.0; k];
        for ((p, &w), &l) in points.iter().zip(&weights).zip(&labels) {
            sizes[l] += w;
            for (c, x) in centers[l].iter_mut().zip(p) {
                *c += w * x;
            }
        }
        for (c, &s) in centers.iter_mut().zip(&sizes) {
            c.iter_mut().for_each(|v| *v /= s);
        }
        let cfg = TreeConfig {
            max_depth: None,
            min_leaf: 1,
            subsample: 1.0,
        };
        let explainer = DecisionTree::fit(&points, &labels, k, cfg, None)?;
        Ok(Catalog {
            k,
            dim,
            centers,
            sizes,
            dendrogram: merges,
            explainer,
        })
    }

    /// Nearest center; ties go to the smaller index.
    pub fn assign(&self, v: &[f64]) -> (usize, &[f64]) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d = sq_dist(v, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, &self.centers[best])
    }

    /// Root-to-leaf predicate chains of the explainer leaves for `index`.
    pub fn explain_cluster(&self, index: usize) -> Result<Vec<Vec<Predicate>>> {
        if index >= self.k {
            return Err(Error::InvalidInput(format!("cluster {index} out of range (k = {})", self.k)));
        }
        Ok(self
            .explainer
            .class_paths(index)
            .into_iter()
            .map(|p| {
                p.into_iter()
                    .map(|(feature, le, threshold)| Predicate { feature, le, threshold })
                    .collect()
            })
            .collect())
    }

    pub fn explain_text(&self, index: usize, names: &[String]) -> Result<String> {
        let mut out = String::new();
        for (i, chain) in self.explain_cluster(index)?.iter().enumerate() {
            let parts: Vec<String> = chain.iter().map(|p| p.render(names)).collect();
            let body = if parts.is_empty() {
                "(always)".to_string()
            } else {
                parts.join(" AND ")
            };
            let _ = writeln!(out, "cluster {index} path {}: {body}", i + 1);
        }
        Ok(out)
    }

    /// Graphviz rendering of the explainer tree.
    pub fn explainer_dot(&self, names: &[String]) -> String {
        let mut s = String::from("digraph explainer {\n  node [shape=box];\n");
        for (i, n) in self.explainer.nodes.iter().enumerate() {
            match n.feature {
                Some(f) => {
                    let name = names.get(f).cloned().unwrap_or_else(|| format!("x{f}"));
                    let _ = writeln!(s, "  n{i} [label=\"{name} <= {}\"];", n.threshold);
                    let _ = writeln!(s, "  n{i} -> n{} [label=\"yes\"];", n.left);
                    let _ = writeln!(s, "  n{i} -> n{} [label=\"no\"];", n.right);
                }
                None => {
                    let _ = writeln!(s, "  n{i} [label=\"cluster {}\", shape=ellipse];", n.class());
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: usize,
    /// `true` for `<=`, `false` for `>`.
    pub le: bool,
    pub threshold: f64,
}

impl Predicate {
    pub fn holds(&self, v: &[f64]) -> bool {
        (v[self.feature] <= self.threshold) == self.le
    }

    pub fn render(&self, names: &[String]) -> String {
        let name = names
            .get(self.feature)
            .cloned()
            .unwrap_or_else(|| format!("x{}", self.feature));
        format!("{name} {} {}", if self.le { "<=" } else { ">" }, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub status: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourEntry {
    pub hour: usize,
    pub status: usize,
    pub action: usize,
}

/// Status/action indices per segment and per hour for one address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusActionSequence {
    pub address: String,
    pub segments: Vec<SegmentEntry>,
    pub hours: Vec<HourEntry>,
}

impl StatusActionSequence {
    pub fn status_vec<'a>(&self, cat: &'a Catalog, hour: usize) -> &'a [f64] {
        &cat.centers[self.hours[hour].status]
    }
}

/// Builds the sequence of one address from its materialized (unnormalized) rows.
///
/// Per-hour entries are causal: hour `t` of segment `k` uses the mean of the
/// segment's rows up to `t`, differenced against the completed `g_{k-1}`.
pub fn sequence_for(
    address: &str,
    raw_rows: &[Vec<f64>],
    plan: &SegmentationPlan,
    status: &Catalog,
    action: &Catalog,
) -> StatusActionSequence {
    let rows = plan.normalizer.apply_all(raw_rows);
    let (g, d) = segment_representations(&rows, plan);
    let segments = g
        .iter()
        .zip(&d)
        .map(|(gk, dk)| SegmentEntry {
            status: status.assign(gk).0,
            action: action.assign(dk).0,
        })
        .collect();
    let mut hours = Vec::with_capacity(rows.len());
    for (k, (s, e)) in plan.bounds().into_iter().enumerate() {
        let prev = if k == 0 { vec![0.0; rows[0].len()] } else { g[k - 1].clone() };
        for t in s..=e {
            let partial = mean_rows(&rows[s - 1..t]);
            hours.push(HourEntry {
                hour: t,
                status: status.assign(&partial).0,
                action: action.assign(&sub(&partial, &prev)).0,
            });
        }
    }
    StatusActionSequence {
        address: address.to_string(),
        segments,
        hours,
    }
}
