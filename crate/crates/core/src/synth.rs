//! Seeded generator of labeled transaction universes.
//!
//! Every address kind has a template. Malicious kinds are hack (one large
//! multi-input deposit at creation, dormancy, a tiny signal from a shared
//! source, then a bulk sweep), ransomware (many small victim payments, then a
//! fast sweep) and darknet (steady two-way flow). Benign kinds mimic service
//! churn. Event times sit on an hourly lattice with up to 5 minutes of jitter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{COIN, HOUR, Label, TransactionRecord, TxInput, TxOutput};
use crate::error::{Error, Result};

pub const FEE: u64 = 10_000;
pub const SIGNAL_AMOUNT: u64 = 8_631;
const JITTER: i64 = 300;
/// Input count and per-input satoshis of noise deposits (the hack defaults).
const NOISE_INPUTS: [usize; 2] = [40, 80];
const NOISE_AMOUNT: [u64; 2] = [COIN, 20 * COIN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Hack,
    Ransomware,
    Darknet,
    Exchange,
    Mining,
    Merchant,
    Gambling,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Hack,
        Kind::Ransomware,
        Kind::Darknet,
        Kind::Exchange,
        Kind::Mining,
        Kind::Merchant,
        Kind::Gambling,
    ];

    pub fn malicious(self) -> bool {
        matches!(self, Kind::Hack | Kind::Ransomware | Kind::Darknet)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Hack => "hack",
            Kind::Ransomware => "ransomware",
            Kind::Darknet => "darknet",
            Kind::Exchange => "exchange",
            Kind::Mining => "mining",
            Kind::Merchant => "merchant",
            Kind::Gambling => "gambling",
        }
    }
}

/// One address population. Unset ranges take per-kind defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: Kind,
    pub count: usize,
    /// Coins per funding input (hack) or per payment, inclusive range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<[f64; 2]>,
    /// Deposit inputs (hack) or number of activity events (other kinds).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<[usize; 2]>,
    /// Hour offset of the signal after creation (hack).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_hour: Option<[u32; 2]>,
    /// Hour offset of the sweep after creation (hack, ransomware).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_hour: Option<[u32; 2]>,
    /// Hack addresses sharing one signal source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Resolved {
    kind: Kind,
    count: usize,
    amount: [u64; 2],
    inputs: [usize; 2],
    signal_hour: [u32; 2],
    sweep_hour: [u32; 2],
    group_size: usize,
}

impl ScenarioSpec {
    pub fn new(kind: Kind, count: usize) -> Self {
        ScenarioSpec {
            kind,
            count,
            amount: None,
            inputs: None,
            signal_hour: None,
            sweep_hour: None,
            group_size: None,
        }
    }

    fn resolve(&self) -> Result<Resolved> {
        let (amount, inputs) = match self.kind {
            Kind::Hack => ([1.0, 20.0], [40, 80]),
            Kind::Ransomware => ([0.05, 1.0], [6, 15]),
            Kind::Darknet => ([0.1, 3.0], [10, 20]),
            Kind::Exchange => ([0.01, 5.0], [15, 40]),
            Kind::Mining => ([3.0, 7.0], [6, 12]),
            Kind::Merchant => ([0.01, 0.5], [6, 20]),
            Kind::Gambling => ([0.001, 0.2], [10, 30]),
        };
        let amount = self.amount.unwrap_or(amount);
        let inputs = self.inputs.unwrap_or(inputs);
        let signal_hour = self.signal_hour.unwrap_or([6, 11]);
        let sweep_hour = self.sweep_hour.unwrap_or(match self.kind {
            Kind::Ransomware => [8, 14],
            _ => [15, 20],
        });
        let group_size = self.group_size.unwrap_or(5);
        let bad = |what: &str| Err(Error::Config(format!("{} scenario: {what}", self.kind.name())));
        if !(amount[0] > 0.0 && amount[0] <= amount[1] && amount[1] < 21e6) {
            return bad("amount range must satisfy 0 < lo <= hi");
        }
        let amount_sats = [(amount[0] * COIN as f64).round() as u64, (amount[1] * COIN as f64).round() as u64];
        if amount_sats[0] <= 2 * FEE {
            return bad("amounts are exhausted by fees");
        }
        if inputs[0] == 0 || inputs[0] > inputs[1] {
            return bad("inputs range must satisfy 1 <= lo <= hi");
        }
        if signal_hour[0] == 0 || signal_hour[0] > signal_hour[1] || sweep_hour[0] > sweep_hour[1] {
            return bad("hour ranges must be ordered and start after creation");
        }
        if self.kind == Kind::Hack && sweep_hour[0] <= signal_hour[1] {
            return bad("sweep must come after the signal");
        }
        if group_size == 0 {
            return bad("group_size must be positive");
        }
        Ok(Resolved {
            kind: self.kind,
            count: self.count,
            amount: amount_sats,
            inputs,
            signal_hour,
            sweep_hour,
            group_size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub start_time: i64,
    /// Addresses are created over this many hours.
    #[serde(default = "default_window")]
    pub window_hours: u32,
    /// Probability that a benign address starts with a multi-input deposit.
    #[serde(default)]
    pub noise: f64,
    /// Unrelated transfers per hour among background wallets.
    #[serde(default)]
    pub background_per_hour: usize,
    /// Pads the universe with background coinbase transactions up to this count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill_to: Option<usize>,
    pub specs: Vec<ScenarioSpec>,
}

fn default_window() -> u32 {
    48
}

impl Scenario {
    /// The 200-address hack universe: 10 hack addresses, 190 benign, noise on.
    pub fn hack_universe(seed: u64) -> Self {
        Scenario {
            seed,
            start_time: 1_600_000_000 - 1_600_000_000 % HOUR,
            window_hours: 48,
            noise: 0.2,
            background_per_hour: 4,
            fill_to: None,
            specs: vec![
                ScenarioSpec::new(Kind::Hack, 10),
                ScenarioSpec::new(Kind::Exchange, 50),
                ScenarioSpec::new(Kind::Mining, 40),
                ScenarioSpec::new(Kind::Merchant, 50),
                ScenarioSpec::new(Kind::Gambling, 50),
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Scenario = serde_json::from_str(&s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("scenario noise must lie in [0, 1]".into()));
        }
        if self.window_hours == 0 {
            return Err(Error::Config("scenario window_hours must be positive".into()));
        }
        for s in &self.specs {
            s.resolve()?;
        }
        Ok(())
    }
}

/// Planted event times for one address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressTruth {
    pub address: String,
    pub kind: Kind,
    pub label: u8,
    pub creation_time: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_time: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_time: Option<i64>,
    /// Hour index of the sweep relative to creation (1-based row that first sees it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_hour: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub records: Vec<TransactionRecord>,
    pub labels: BTreeMap<String, Label>,
    pub truth: Vec<AddressTruth>,
}

#[derive(Debug, Clone)]
struct PlanTx {
    time: i64,
    inputs: Vec<(usize, usize)>,
    outputs: Vec<(String, u64)>,
}

struct Planner {
    rng: ChaCha8Rng,
    txs: Vec<PlanTx>,
    spent: Vec<Vec<bool>>,
    /// Unspent outputs by address: (tx, vout).
    utxos: BTreeMap<String, Vec<(usize, usize)>>,
    wallets: usize,
}

impl Planner {
    fn jitter(&mut self) -> i64 {
        self.rng.random_range(-JITTER..=JITTER)
    }

    fn add(&mut self, time: i64, inputs: Vec<(usize, usize)>, outputs: Vec<(String, u64)>) -> usize {
        let id = self.txs.len();
        for &(t, v) in &inputs {
            debug_assert!(self.txs[t].time < time && !self.spent[t][v]);
            self.spent[t][v] = true;
            let addr = &self.txs[t].outputs[v].0;
            if let Some(list) = self.utxos.get_mut(addr) {
                list.retain(|&u| u != (t, v));
            }
        }
        for (v, (addr, _)) in outputs.iter().enumerate() {
            self.utxos.entry(addr.clone()).or_default().push((id, v));
        }
        self.spent.push(vec![false; outputs.len()]);
        self.txs.push(PlanTx { time, inputs, outputs });
        id
    }

    fn coinbase(&mut self, time: i64, to: &str, amount: u64) -> usize {
        self.add(time, Vec::new(), vec![(to.to_string(), amount)])
    }

    fn fresh_wallet(&mut self) -> String {
        self.wallets += 1;
        format!("w{:07}", self.wallets)
    }

    /// Pays `amount` to `to` at `time` from a fresh funded wallet, giving the
    /// payment a two-hop history.
    fn fund(&mut self, to: &str, amount: u64, time: i64) -> usize {
        let w = self.fresh_wallet();
        let lead = self.rng.random_range(1..=5) * HOUR + self.jitter();
        let extra = self.rng.random_range(0..=amount / 4);
        let cb = self.coinbase(time - lead, &w, amount + extra + FEE);
        let mut outs = vec![(to.to_string(), amount)];
        if extra > 0 {
            outs.push((w, extra));
        }
        self.add(time, vec![(cb, 0)], outs)
    }

    fn balance_before(&self, addr: &str, time: i64) -> (Vec<(usize, usize)>, u64) {
        let mut ins = Vec::new();
        let mut total = 0;
        if let Some(list) = self.utxos.get(addr) {
            for &(t, v) in list {
                if self.txs[t].time < time {
                    ins.push((t, v));
                    total += self.txs[t].outputs[v].1;
                }
            }
        }
        (ins, total)
    }

    /// Spends every output of `addr` older than `time` into `parts` fresh
    /// addresses. `None` when nothing is spendable.
    fn sweep(&mut self, addr: &str, time: i64, parts: usize, prefix: &str) -> Option<usize> {
        let (ins, total) = self.balance_before(addr, time);
        if ins.is_empty() || total <= FEE + parts as u64 {
            return None;
        }
        let net = total - FEE;
        let mut outs = Vec::with_capacity(parts);
        let mut left = net;
        for k in 0..parts {
            let amt = if k + 1 == parts { left } else { left / 2 };
            left -= amt;
            self.wallets += 1;
            outs.push((format!("{prefix}{:07}", self.wallets), amt));
        }
        Some(self.add(time, ins, outs))
    }

    /// Sends `amount` from `addr` to `to` with change, oldest outputs first.
    fn pay(&mut self, addr: &str, to: &str, amount: u64, time: i64) -> Option<usize> {
        let (avail, _) = self.balance_before(addr, time);
        let mut ins = Vec::new();
        let mut total = 0;
        for u in avail {
            if total >= amount + FEE {
                break;
            }
            total += self.txs[u.0].outputs[u.1].1;
            ins.push(u);
        }
        if total < amount + FEE || amount == 0 {
            return None;
        }
        let mut outs = vec![(to.to_string(), amount)];
        let change = total - amount - FEE;
        if change > 0 {
            outs.push((addr.to_string(), change));
        }
        Some(self.add(time, ins, outs))
    }

    fn amount(&mut self, range: [u64; 2]) -> u64 {
        self.rng.random_range(range[0]..=range[1])
    }
}

/// Runs every template and returns the universe, ids assigned in
/// `(timestamp, plan order)` order.
pub fn generate(scenario: &Scenario) -> Result<Universe> {
    scenario.validate()?;
    let mut p = Planner {
        rng: ChaCha8Rng::seed_from_u64(scenario.seed),
        txs: Vec::new(),
        spent: Vec::new(),
        utxos: BTreeMap::new(),
        wallets: 0,
    };
    let start = scenario.start_time;
    let mut labels = BTreeMap::new();
    let mut truth = Vec::new();

    // Background wallets funded before the window opens.
    let pool: Vec<String> = (0..32).map(|k| format!("bg{k:03}")).collect();
    if scenario.background_per_hour > 0 {
        for w in &pool {
            let t = start - 2 * HOUR + p.jitter();
            let amt = p.rng.random_range(10..=100) * COIN;
            p.coinbase(t, w, amt);
        }
    }

    for spec in &scenario.specs {
        let r = spec.resolve()?;
        let mut group_fill = 0;
        let mut hack_plans: Vec<(String, i64, i64, i64)> = Vec::new();
        for i in 0..r.count {
            let addr = format!("{}{:04}", r.kind.name(), i);
            let hour = p.rng.random_range(0..scenario.window_hours) as i64;
            let base = start + hour * HOUR;
            let created = base + p.jitter();
            labels.insert(addr.clone(), if r.kind.malicious() { Label::Malicious } else { Label::Regular });
            let mut t = AddressTruth {
                address: addr.clone(),
                kind: r.kind,
                label: u8::from(r.kind.malicious()),
                creation_time: created,
                signal_time: None,
                sweep_time: None,
                sweep_hour: None,
            };
            match r.kind {
                Kind::Hack => {
                    let n = p.rng.random_range(r.inputs[0]..=r.inputs[1]);
                    let mut ins = Vec::with_capacity(n);
                    let mut total = 0u64;
                    for _ in 0..n {
                        let v = format!("victim{:07}", p.wallets + 1);
                        let a = p.amount(r.amount);
                        let at = created - HOUR + p.jitter();
                        let tx = p.fund(&v, a, at);
                        ins.push((tx, 0));
                        total += a;
                    }
                    p.add(created, ins, vec![(addr.clone(), total - FEE)]);
                    let sig = base + p.rng.random_range(r.signal_hour[0]..=r.signal_hour[1]) as i64 * HOUR + p.jitter();
                    let sweep_h = p.rng.random_range(r.sweep_hour[0]..=r.sweep_hour[1]);
                    let sweep = base + sweep_h as i64 * HOUR + p.jitter();
                    hack_plans.push((addr.clone(), sig, sweep, created));
                    t.signal_time = Some(sig);
                    t.sweep_time = Some(sweep);
                    t.sweep_hour = Some(((sweep - created + HOUR - 1) / HOUR) as u32);
                }
                Kind::Ransomware => {
                    let n = p.rng.random_range(r.inputs[0]..=r.inputs[1]);
                    let sweep_h = p.rng.random_range(r.sweep_hour[0]..=r.sweep_hour[1]);
                    let a = p.amount(r.amount);
                    p.fund(&addr, a, created);
                    for _ in 1..n {
                        let h = p.rng.random_range(1..sweep_h.max(2)) as i64;
                        let a = p.amount(r.amount);
                        let at = base + h * HOUR + p.jitter();
                        p.fund(&addr, a, at);
                    }
                    let sweep = base + sweep_h as i64 * HOUR + JITTER + 60;
                    p.sweep(&addr, sweep, 1, "rsink");
                    t.sweep_time = Some(sweep);
                    t.sweep_hour = Some(((sweep - created + HOUR - 1) / HOUR) as u32);
                }
                _ => {
                    benign_or_flow(&mut p, &r, &addr, base, created, scenario.noise);
                }
            }
            truth.push(t);
            if r.kind == Kind::Hack {
                group_fill += 1;
                if group_fill == r.group_size || i + 1 == r.count {
                    plant_signals(&mut p, &mut hack_plans, start);
                    group_fill = 0;
                }
            }
        }
    }

    if scenario.background_per_hour > 0 {
        for hour in 0..(scenario.window_hours as i64 + 36) {
            for _ in 0..scenario.background_per_hour {
                let from = pool.choose(&mut p.rng).expect("pool").clone();
                let to = pool.choose(&mut p.rng).expect("pool").clone();
                let at = start + hour * HOUR + p.jitter();
                let (_, bal) = p.balance_before(&from, at);
                if bal > 4 * FEE {
                    let amt = p.rng.random_range(1..=bal / 4);
                    p.pay(&from, &to, amt, at);
                }
            }
        }
    }

    if let Some(target) = scenario.fill_to {
        if target < p.txs.len() {
            return Err(Error::Config(format!(
                "fill_to = {target} is below the {} generated transactions",
                p.txs.len()
            )));
        }
        while p.txs.len() < target {
            let at = start + p.rng.random_range(0..scenario.window_hours as i64 * HOUR);
            let w = p.fresh_wallet();
            let amt = p.rng.random_range(1..=50) * COIN;
            p.coinbase(at, &w, amt);
        }
    }

    Ok(Universe {
        records: finalize(&p),
        labels,
        truth,
    })
}

/// Pre-splits one signer coin into an output per hack address, signals each
/// address from its own output (so every signal has the same ancestry), then
/// sweeps each address.
fn plant_signals(p: &mut Planner, plans: &mut Vec<(String, i64, i64, i64)>, start: i64) {
    if plans.is_empty() {
        return;
    }
    plans.sort_by_key(|x| x.1);
    let name = format!("signer{:07}", p.wallets + 1);
    p.wallets += 1;
    let first = plans[0].1.min(start) - 6 * HOUR;
    let coin = p.coinbase(first, &name, COIN);
    let each = SIGNAL_AMOUNT + FEE;
    let mut outs = vec![(name.clone(), each); plans.len()];
    outs.push((name.clone(), COIN - each * plans.len() as u64 - FEE));
    let fan = p.add(first + HOUR, vec![(coin, 0)], outs);
    for (i, (addr, sig, _, _)) in plans.iter().enumerate() {
        let sig = (*sig).max(first + HOUR + 1);
        p.add(sig, vec![(fan, i)], vec![(addr.clone(), SIGNAL_AMOUNT)]);
    }
    for (addr, _, sweep, _) in plans.drain(..) {
        p.sweep(&addr, sweep, 2, "launder");
    }
}

fn benign_or_flow(p: &mut Planner, r: &Resolved, addr: &str, base: i64, created: i64, noise: f64) {
    let events = p.rng.random_range(r.inputs[0]..=r.inputs[1]);
    // Creation: a plain payment or, with probability `noise`, a consolidation
    // deposit drawn like a default hack deposit.
    if r.kind != Kind::Mining && r.kind != Kind::Darknet && p.rng.random_bool(noise) {
        let n = p.rng.random_range(NOISE_INPUTS[0]..=NOISE_INPUTS[1]);
        let mut ins = Vec::with_capacity(n);
        let mut total = 0;
        for _ in 0..n {
            let v = p.fresh_wallet();
            let a = p.amount(NOISE_AMOUNT);
            let at = created - HOUR + p.jitter();
            let tx = p.fund(&v, a, at);
            ins.push((tx, 0));
            total += a;
        }
        p.add(created, ins, vec![(addr.to_string(), total - FEE)]);
    } else if r.kind == Kind::Mining {
        let a = p.amount(r.amount);
        p.coinbase(created, addr, a);
    } else {
        let a = p.amount(r.amount);
        p.fund(addr, a, created);
    }
    // Activity starts within the first hour and runs over a day and a half.
    let span = 36;
    for e in 0..events {
        let h = if e == 0 { 0 } else { p.rng.random_range(0..span) } as i64;
        let at = base + h * HOUR + p.rng.random_range(JITTER + 1..HOUR - JITTER);
        let incoming = match r.kind {
            Kind::Exchange | Kind::Gambling | Kind::Darknet => p.rng.random_bool(0.5),
            Kind::Merchant => p.rng.random_bool(0.75),
            Kind::Mining => p.rng.random_bool(0.6),
            _ => true,
        };
        if incoming || e == 0 {
            let a = p.amount(r.amount);
            if r.kind == Kind::Mining {
                p.coinbase(at.max(created + 1), addr, a);
            } else {
                p.fund(addr, a, at.max(created + 1));
            }
        } else if r.kind == Kind::Mining {
            // Payouts to several pool members.
            let (ins, total) = p.balance_before(addr, at);
            let k = p.rng.random_range(3..=8) as u64;
            if !ins.is_empty() && total > FEE + k * 2 * FEE {
                let share = (total - FEE) / k;
                let mut outs: Vec<(String, u64)> = (0..k).map(|_| (p.fresh_wallet(), share)).collect();
                let rest = total - FEE - share * k;
                if rest > 0 {
                    outs.push((addr.to_string(), rest));
                }
                p.add(at, ins, outs);
            }
        } else {
            let (_, bal) = p.balance_before(addr, at);
            if bal > 4 * FEE {
                let amt = p.rng.random_range(FEE..=bal / 2);
                let to = p.fresh_wallet();
                p.pay(addr, &to, amt, at);
            }
        }
    }
}

fn finalize(p: &Planner) -> Vec<TransactionRecord> {
    let mut order: Vec<usize> = (0..p.txs.len()).collect();
    order.sort_by_key(|&i| (p.txs[i].time, i));
    let mut id = vec![String::new(); p.txs.len()];
    for (rank, &i) in order.iter().enumerate() {
        id[i] = format!("tx{rank:09}");
    }
    order
        .iter()
        .map(|&i| {
            let tx = &p.txs[i];
            TransactionRecord {
                tx_id: id[i].clone(),
                timestamp: tx.time,
                inputs: tx
                    .inputs
                    .iter()
                    .map(|&(t, v)| TxInput {
                        src: id[t].clone(),
                        amount: p.txs[t].outputs[v].1,
                        owner: Some(p.txs[t].outputs[v].0.clone()),
                    })
                    .collect(),
                outputs: tx
                    .outputs
                    .iter()
                    .map(|(a, amt)| TxOutput {
                        addr: a.clone(),
                        amount: *amt,
                    })
                    .collect(),
            }
        })
        .collect()
}

impl Universe {
    /// Writes `transactions.jsonl`, `labels.csv`, `scenario.json` and
    /// `truth.json` into `dir`.
    pub fn write(&self, dir: &Path, scenario: &Scenario) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tx_path = dir.join("transactions.jsonl");
        let f = std::fs::File::create(&tx_path).map_err(|e| Error::io(&tx_path, e))?;
        crate::chain::write_jsonl(std::io::BufWriter::new(f), &self.records).map_err(|e| Error::io(&tx_path, e))?;
        let lp = dir.join("labels.csv");
        let f = std::fs::File::create(&lp).map_err(|e| Error::io(&lp, e))?;
        crate::chain::write_labels(f, &self.labels)?;
        let sp = dir.join("scenario.json");
        std::fs::write(&sp, serde_json::to_string_pretty(scenario)? + "\n").map_err(|e| Error::io(&sp, e))?;
        let tp = dir.join("truth.json");
        std::fs::write(&tp, serde_json::to_string_pretty(&self.truth)? + "\n").map_err(|e| Error::io(&tp, e))?;
        Ok(())
    }
}
