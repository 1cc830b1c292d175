//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use intention_monitor::chain::{TransactionRecord, TxInput, TxOutput};
use intention_monitor::features::{full_column, FULL_WIDTH};
use intention_monitor::select::SelectData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A random transaction DAG of at most `max_tx` records. Outputs are spent at
/// most once; some amounts are zero so the even-split fallbacks get exercised.
pub fn random_dag(seed: u64, max_tx: usize) -> Vec<TransactionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_tx);
    let zero_rate = if rng.random_bool(0.3) { 0.3 } else { 0.02 };
    let mut time = 1_000_000i64;
    // (tx id, address, amount)
    let mut pool: Vec<(String, String, u64)> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if !rng.random_bool(0.15) {
            time += rng.random_range(0..=50_000);
        }
        let tx_id = format!("t{i:03}");
        let mut inputs = Vec::new();
        if !pool.is_empty() && !rng.random_bool(0.15) {
            let k = rng.random_range(1..=pool.len().min(4));
            for _ in 0..k {
                let (src, addr, amount) = pool.swap_remove(rng.random_range(0..pool.len()));
                inputs.push(TxInput {
                    src,
                    amount,
                    owner: Some(addr),
                });
            }
        }
        let total: u64 = if inputs.is_empty() {
            rng.random_range(0..=1_000)
        } else {
            inputs.iter().map(|x| x.amount).sum()
        };
        let parts = rng.random_range(1..=3);
        let mut left = total;
        let mut outputs = Vec::with_capacity(parts);
        for p in 0..parts {
            let amount = if p + 1 == parts {
                left
            } else if rng.random_bool(zero_rate) {
                0
            } else {
                rng.random_range(0..=left)
            };
            left -= amount;
            let addr = format!("a{}", rng.random_range(0..12));
            outputs.push(TxOutput { addr: addr.clone(), amount });
            pool.push((tx_id.clone(), addr, amount));
        }
        out.push(TransactionRecord {
            tx_id,
            timestamp: time,
            inputs,
            outputs,
        });
    }
    out
}

/// One enumerated path: transaction ids from the anchor outward and the final score.
pub type OraclePath = (Vec<String>, f64);

/// Brute-force DFS enumeration of every prefix path from `seed`.
///
/// A hop from `cur` to `next` carries the share of `cur`'s input total (backward)
/// or output total (forward) that flows through `next`; zero totals fall back
/// to an even split by input or output count. A hop survives while the running
/// product stays at or above `theta` and `next` lies within `span` seconds of
/// the seed (and, forward, no later than `t_now`).
pub fn oracle_paths(
    records: &[TransactionRecord],
    seed: &str,
    backward: bool,
    theta: f64,
    span: i64,
    t_now: i64,
) -> Vec<OraclePath> {
    let by_id: BTreeMap<&str, &TransactionRecord> = records.iter().map(|r| (r.tx_id.as_str(), r)).collect();
    let root = by_id[seed];
    let mut out = Vec::new();
    if !backward && root.timestamp > t_now {
        return out;
    }
    let hops = |cur: &TransactionRecord| -> Vec<(&TransactionRecord, f64)> {
        let mut flows: BTreeMap<&str, (u64, usize)> = BTreeMap::new();
        if backward {
            for i in &cur.inputs {
                if by_id.contains_key(i.src.as_str()) {
                    let e = flows.entry(i.src.as_str()).or_default();
                    e.0 += i.amount;
                    e.1 += 1;
                }
            }
            let total: u64 = cur.inputs.iter().map(|i| i.amount).sum();
            let n = cur.inputs.len() as f64;
            flows
                .into_iter()
                .map(|(id, (amt, cnt))| {
                    let share = if total == 0 { cnt as f64 / n } else { amt as f64 / total as f64 };
                    (by_id[id], share)
                })
                .collect()
        } else {
            for r in records {
                for i in &r.inputs {
                    if i.src == cur.tx_id {
                        let e = flows.entry(r.tx_id.as_str()).or_default();
                        e.0 += i.amount;
                        e.1 += 1;
                    }
                }
            }
            let total: u64 = cur.outputs.iter().map(|o| o.amount).sum();
            let n = cur.outputs.len() as f64;
            flows
                .into_iter()
                .map(|(id, (amt, cnt))| {
                    let share = if total == 0 {
                        (cnt as f64 / n).min(1.0)
                    } else {
                        amt as f64 / total as f64
                    };
                    (by_id[id], share)
                })
                .collect()
        }
    };
    fn dfs<'a>(
        path: &mut Vec<&'a TransactionRecord>,
        score: f64,
        out: &mut Vec<OraclePath>,
        next: &dyn Fn(&'a TransactionRecord) -> Vec<(&'a TransactionRecord, f64)>,
        keep: &dyn Fn(&TransactionRecord, f64) -> bool,
    ) {
        out.push((path.iter().map(|r| r.tx_id.clone()).collect(), score));
        let cur = *path.last().unwrap();
        for (n, share) in next(cur) {
            let s = share * score;
            if keep(n, s) {
                path.push(n);
                dfs(path, s, out, next, keep);
                path.pop();
            }
        }
    }
    let seed_time = root.timestamp;
    let keep = |r: &TransactionRecord, s: f64| {
        s >= theta
            && if backward {
                seed_time - r.timestamp <= span
            } else {
                r.timestamp - seed_time <= span && r.timestamp <= t_now
            }
    };
    let mut path = vec![root];
    dfs(&mut path, 1.0, &mut out, &hops, &keep);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Rows in the full schema with noise everywhere and class signal planted in
/// `st_bk_max_in_amount`: a strong shift in its std and a weak one in its avg.
pub fn planted_std_signal(n_addr: usize, seed: u64) -> SelectData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut d = SelectData::default();
    for g in 0..n_addr {
        let y = usize::from(g % 4 == 0);
        for _ in 0..6 {
            let mut row: Vec<f64> = (0..FULL_WIDTH).map(|_| noise.sample(&mut rng)).collect();
            row[full_column(1, 2, 2)] = noise.sample(&mut rng) + 0.6 * y as f64;
            row[full_column(1, 2, 3)] = if y == 1 {
                2.0 + rng.random::<f64>()
            } else {
                rng.random::<f64>() * 2.2
            };
            d.rows.push(row);
            d.y.push(y);
            d.groups.push(g);
        }
    }
    d
}

/// Relative paths and contents of every file under `root`.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
