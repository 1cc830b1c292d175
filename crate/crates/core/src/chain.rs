//! Transaction universe: record format, validation, and the indexed store.
//!
//! Records arrive as line-delimited JSON (`transactions.jsonl`). The store
//! orders transactions by `(timestamp, tx_id)`, resolves every input to its
//! source transaction where possible, and indexes per-address receive/spend
//! histories. Inputs whose source is not in the universe are kept as
//! external-boundary inputs: they count toward amounts but path tracing
//! stops at them.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index of a transaction inside a [`TxStore`], in `(timestamp, tx_id)` order.
pub type TxIdx = u32;
/// Dense index of an address inside a [`TxStore`].
pub type AddrIdx = u32;

/// Base units per coin.
pub const COIN: u64 = 100_000_000;
pub const HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxInput {
    pub src: String,
    pub amount: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxOutput {
    pub addr: String,
    pub amount: u64,
}

/// One on-chain transaction. A record with no inputs is a coinbase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransactionRecord {
    #[serde(rename = "txid")]
    pub tx_id: String,
    #[serde(rename = "time")]
    pub timestamp: i64,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
}

impl TransactionRecord {
    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_total(&self) -> Option<u64> {
        self.inputs
            .iter()
            .try_fold(0u64, |acc, i| acc.checked_add(i.amount))
    }

    pub fn output_total(&self) -> Option<u64> {
        self.outputs
            .iter()
            .try_fold(0u64, |acc, o| acc.checked_add(o.amount))
    }

    /// Structural checks that need no other transaction.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tx_id.is_empty() {
            return Err("empty txid".into());
        }
        if self.outputs.is_empty() {
            return Err("transaction has no outputs".into());
        }
        if self.outputs.iter().any(|o| o.addr.is_empty()) {
            return Err("output with empty address".into());
        }
        let out = self
            .output_total()
            .ok_or_else(|| "output amounts overflow".to_string())?;
        if !self.is_coinbase() {
            let inp = self
                .input_total()
                .ok_or_else(|| "input amounts overflow".to_string())?;
            if out > inp {
                return Err(format!("outputs ({out}) exceed inputs ({inp})"));
            }
            if self.inputs.iter().any(|i| i.src == self.tx_id) {
                return Err("input references its own transaction".into());
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Regular,
    Malicious,
    #[default]
    Unknown,
}

impl Label {
    pub fn as_bit(self) -> Option<u8> {
        match self {
            Label::Regular => Some(0),
            Label::Malicious => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Regular),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }
}

/// One edge of the complete input/output bipartite expansion of a transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionPair {
    /// Source transaction of the input.
    pub input_tx: String,
    pub input_index: usize,
    /// The transaction that houses the pair.
    pub output_tx: String,
    pub output_index: usize,
    pub output_addr: String,
    pub proportion: f64,
    pub allocated_amount: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExpansion {
    pub pairs: Vec<TransactionPair>,
    /// Set when the total input amount is zero and proportions fell back to `1/|I|`.
    pub degenerate: bool,
}

fn input_shares(tx: &TransactionRecord) -> (Vec<f64>, bool) {
    let total: u128 = tx.inputs.iter().map(|i| i.amount as u128).sum();
    if total == 0 {
        let n = tx.inputs.len() as f64;
        (vec![1.0 / n; tx.inputs.len()], true)
    } else {
        let t = total as f64;
        (tx.inputs.iter().map(|i| i.amount as f64 / t).collect(), false)
    }
}

/// Expands `tx` into its `|I| x |J|` transaction pairs, input-major.
///
/// The proportion of pair `(i_k, j)` is the input's share of the total input
/// amount. Allocated amounts split each input across outputs by output share
/// (floor), with the per-transaction residue added to the largest pair, so
/// allocations always sum to the total input amount.
pub fn expand_pairs(tx: &TransactionRecord) -> Result<PairExpansion> {
    if tx.is_coinbase() {
        return Err(Error::InvalidInput(format!(
            "{} is a coinbase transaction and has no pairs",
            tx.tx_id
        )));
    }
    let (shares, degenerate) = input_shares(tx);
    let out_total: u128 = tx.outputs.iter().map(|o| o.amount as u128).sum();
    let n_out = tx.outputs.len() as u128;
    let mut pairs = Vec::with_capacity(tx.inputs.len() * tx.outputs.len());
    let mut allocated: u128 = 0;
    for (k, input) in tx.inputs.iter().enumerate() {
        for (j, output) in tx.outputs.iter().enumerate() {
            let a = input.amount as u128;
            let amount = if out_total == 0 {
                a / n_out
            } else {
                a * output.amount as u128 / out_total
            };
            allocated += amount;
            pairs.push(TransactionPair {
                input_tx: input.src.clone(),
                input_index: k,
                output_tx: tx.tx_id.clone(),
                output_index: j,
                output_addr: output.addr.clone(),
                proportion: shares[k],
                allocated_amount: amount as u64,
            });
        }
    }
    let in_total: u128 = tx.inputs.iter().map(|i| i.amount as u128).sum();
    let residue = in_total - allocated;
    if residue > 0 {
        let largest = pairs
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.allocated_amount
                    .cmp(&b.allocated_amount)
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("non-coinbase transaction has at least one pair");
        pairs[largest].allocated_amount += residue as u64;
    }
    Ok(PairExpansion { pairs, degenerate })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: Vec<LineError>,
    /// `(line, tx_id)` of dropped duplicates; the first occurrence wins.
    pub duplicates: Vec<(usize, String)>,
    pub dangling_inputs: usize,
}

/// Receive/spend history of one address, truncated at a query time.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressHistory {
    pub address: String,
    pub addr: AddrIdx,
    pub label: Label,
    pub creation_time: i64,
    pub receive_txs: Vec<TxIdx>,
    pub spend_txs: Vec<TxIdx>,
}

impl AddressHistory {
    pub fn receive_ids<'a>(&'a self, store: &'a TxStore) -> impl Iterator<Item = &'a str> + 'a {
        self.receive_txs.iter().map(move |&t| store.tx_id(t))
    }

    pub fn spend_ids<'a>(&'a self, store: &'a TxStore) -> impl Iterator<Item = &'a str> + 'a {
        self.spend_txs.iter().map(move |&t| store.tx_id(t))
    }
}

/// Immutable, indexed transaction universe.
#[derive(Debug, Default)]
pub struct TxStore {
    txs: Vec<TransactionRecord>,
    by_id: HashMap<String, TxIdx>,
    input_totals: Vec<u64>,
    output_totals: Vec<u64>,
    /// Resolved source per input (None = external boundary).
    input_src: Vec<Vec<Option<TxIdx>>>,
    input_owner: Vec<Vec<Option<AddrIdx>>>,
    output_addr: Vec<Vec<AddrIdx>>,
    /// Distinct resolved sources with summed input amounts, ascending.
    sources: Vec<Vec<(TxIdx, u64)>>,
    /// Distinct spending transactions with summed amounts drawn, ascending.
    spenders: Vec<Vec<(TxIdx, u64)>>,
    addresses: Vec<String>,
    addr_index: HashMap<String, AddrIdx>,
    receives: Vec<Vec<TxIdx>>,
    spends: Vec<Vec<TxIdx>>,
    hour_buckets: BTreeMap<i64, Vec<TxIdx>>,
    labels: HashMap<String, Label>,
    report: ParseReport,
}

impl TxStore {
    /// Parses a line-delimited record stream. Malformed lines are reported and
    /// skipped; the stream is rejected only when no line matches the schema.
    pub fn parse<R: BufRead>(reader: R) -> Result<TxStore> {
        let mut report = ParseReport::default();
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::io("<record stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            report.lines += 1;
            let rec: TransactionRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    report.rejected.push(LineError {
                        line: line_no,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            if let Err(message) = rec.validate() {
                report.rejected.push(LineError {
                    line: line_no,
                    message,
                });
                continue;
            }
            if let Some(first) = seen.get(&rec.tx_id) {
                log::warn!(
                    "line {line_no}: duplicate txid {} (first seen on line {first}), dropped",
                    rec.tx_id
                );
                report.duplicates.push((line_no, rec.tx_id.clone()));
                continue;
            }
            seen.insert(rec.tx_id.clone(), line_no);
            records.push((line_no, rec));
        }
        if report.lines > 0 && records.is_empty() {
            let first = report
                .rejected
                .first()
                .map(|e| format!("line {}: {}", e.line, e.message))
                .unwrap_or_default();
            return Err(Error::Schema(format!(
                "none of {} lines is a transaction record ({first})",
                report.lines
            )));
        }
        Ok(Self::build(records, report))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TxStore> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file))
    }

    /// Builds a store from already-decoded records (line numbers are positions).
    pub fn from_records(records: Vec<TransactionRecord>) -> TxStore {
        let mut report = ParseReport::default();
        let mut seen = HashMap::new();
        let mut kept = Vec::with_capacity(records.len());
        for (n, rec) in records.into_iter().enumerate() {
            report.lines += 1;
            if let Err(message) = rec.validate() {
                report.rejected.push(LineError {
                    line: n + 1,
                    message,
                });
                continue;
            }
            if seen.insert(rec.tx_id.clone(), n + 1).is_some() {
                report.duplicates.push((n + 1, rec.tx_id.clone()));
                continue;
            }
            kept.push((n + 1, rec));
        }
        Self::build(kept, report)
    }

    fn build(mut records: Vec<(usize, TransactionRecord)>, mut report: ParseReport) -> TxStore {
        records.sort_by(|(_, a), (_, b)| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.tx_id.cmp(&b.tx_id))
        });
        // A resolvable source must precede its spender in (timestamp, tx_id) order.
        let rank: HashMap<&str, usize> = records
            .iter()
            .enumerate()
            .map(|(i, (_, r))| (r.tx_id.as_str(), i))
            .collect();
        let mut bad = vec![false; records.len()];
        for (i, (line, rec)) in records.iter().enumerate() {
            for input in &rec.inputs {
                if let Some(&r) = rank.get(input.src.as_str()) {
                    if r >= i {
                        bad[i] = true;
                        report.rejected.push(LineError {
                            line: *line,
                            message: format!(
                                "source {} does not precede {} in (time, txid) order",
                                input.src, rec.tx_id
                            ),
                        });
                        break;
                    }
                }
            }
        }
        drop(rank);
        let records: Vec<TransactionRecord> = records
            .into_iter()
            .zip(bad)
            .filter(|(_, b)| !*b)
            .map(|((_, r), _)| r)
            .collect();
        report.rejected.sort_by_key(|e| e.line);
        report.accepted = records.len();

        let mut store = TxStore {
            by_id: HashMap::with_capacity(records.len()),
            ..Default::default()
        };
        for (i, r) in records.iter().enumerate() {
            store.by_id.insert(r.tx_id.clone(), i as TxIdx);
        }
        let n = records.len();
        store.input_src = Vec::with_capacity(n);
        store.input_owner = Vec::with_capacity(n);
        store.output_addr = Vec::with_capacity(n);
        store.sources = vec![Vec::new(); n];
        store.spenders = vec![Vec::new(); n];

        for (i, rec) in records.iter().enumerate() {
            let idx = i as TxIdx;
            store.input_totals.push(rec.input_total().unwrap_or(0));
            store.output_totals.push(rec.output_total().unwrap_or(0));
            let outs: Vec<AddrIdx> = rec
                .outputs
                .iter()
                .map(|o| store.intern(&o.addr))
                .collect();
            store.output_addr.push(outs);

            let mut srcs = Vec::with_capacity(rec.inputs.len());
            let mut owners = Vec::with_capacity(rec.inputs.len());
            let mut agg: BTreeMap<TxIdx, u64> = BTreeMap::new();
            for input in &rec.inputs {
                let src = store.by_id.get(&input.src).copied();
                let owner_name: Option<String> = match (&input.owner, src) {
                    (Some(o), _) => Some(o.clone()),
                    (None, Some(s)) => {
                        let srec = &records[s as usize];
                        srec.outputs
                            .iter()
                            .find(|o| o.amount == input.amount)
                            .or(if srec.outputs.len() == 1 {
                                srec.outputs.first()
                            } else {
                                None
                            })
                            .map(|o| o.addr.clone())
                    }
                    (None, None) => None,
                };
                owners.push(owner_name.map(|o| store.intern(&o)));
                match src {
                    Some(s) => *agg.entry(s).or_insert(0) += input.amount,
                    None => report.dangling_inputs += 1,
                }
                srcs.push(src);
            }
            for (&s, &amount) in &agg {
                store.spenders[s as usize].push((idx, amount));
            }
            store.sources[i] = agg.into_iter().collect();
            store.input_src.push(srcs);
            store.input_owner.push(owners);
            store
                .hour_buckets
                .entry(rec.timestamp.div_euclid(HOUR))
                .or_default()
                .push(idx);
        }

        store.receives = vec![Vec::new(); store.addresses.len()];
        store.spends = vec![Vec::new(); store.addresses.len()];
        for i in 0..n {
            let idx = i as TxIdx;
            for &a in &store.output_addr[i] {
                let list = &mut store.receives[a as usize];
                if list.last() != Some(&idx) {
                    list.push(idx);
                }
            }
            for &a in store.input_owner[i].iter().flatten() {
                let list = &mut store.spends[a as usize];
                if list.last() != Some(&idx) {
                    list.push(idx);
                }
            }
        }
        store.txs = records;
        store.report = report;
        store
    }

    fn intern(&mut self, addr: &str) -> AddrIdx {
        if let Some(&i) = self.addr_index.get(addr) {
            return i;
        }
        let i = self.addresses.len() as AddrIdx;
        self.addresses.push(addr.to_string());
        self.addr_index.insert(addr.to_string(), i);
        i
    }

    pub fn set_labels(&mut self, labels: impl IntoIterator<Item = (String, Label)>) {
        self.labels.extend(labels);
    }

    pub fn label(&self, address: &str) -> Label {
        self.labels.get(address).copied().unwrap_or_default()
    }

    pub fn report(&self) -> &ParseReport {
        &self.report
    }

    pub fn tx_count(&self) -> usize {
        self.txs.len()
    }

    pub fn address_count(&self) -> usize {
        self.addresses.len()
    }

    pub fn tx(&self, idx: TxIdx) -> &TransactionRecord {
        &self.txs[idx as usize]
    }

    pub fn transactions(&self) -> &[TransactionRecord] {
        &self.txs
    }

    pub fn tx_id(&self, idx: TxIdx) -> &str {
        &self.txs[idx as usize].tx_id
    }

    pub fn time(&self, idx: TxIdx) -> i64 {
        self.txs[idx as usize].timestamp
    }

    pub fn find_tx(&self, tx_id: &str) -> Option<TxIdx> {
        self.by_id.get(tx_id).copied()
    }

    pub fn address_idx(&self, address: &str) -> Option<AddrIdx> {
        self.addr_index.get(address).copied()
    }

    pub fn address(&self, idx: AddrIdx) -> &str {
        &self.addresses[idx as usize]
    }

    pub fn addresses(&self) -> &[String] {
        &self.addresses
    }

    pub fn input_total(&self, idx: TxIdx) -> u64 {
        self.input_totals[idx as usize]
    }

    pub fn output_total(&self, idx: TxIdx) -> u64 {
        self.output_totals[idx as usize]
    }

    pub fn input_count(&self, idx: TxIdx) -> usize {
        self.txs[idx as usize].inputs.len()
    }

    pub fn output_count(&self, idx: TxIdx) -> usize {
        self.txs[idx as usize].outputs.len()
    }

    pub fn input_sources(&self, idx: TxIdx) -> &[Option<TxIdx>] {
        &self.input_src[idx as usize]
    }

    pub fn input_owners(&self, idx: TxIdx) -> &[Option<AddrIdx>] {
        &self.input_owner[idx as usize]
    }

    pub fn output_addrs(&self, idx: TxIdx) -> &[AddrIdx] {
        &self.output_addr[idx as usize]
    }

    /// Distinct resolved source transactions with the summed amount drawn from each.
    pub fn sources(&self, idx: TxIdx) -> &[(TxIdx, u64)] {
        &self.sources[idx as usize]
    }

    /// Distinct transactions spending outputs of `idx`, with the summed amount.
    pub fn spenders(&self, idx: TxIdx) -> &[(TxIdx, u64)] {
        &self.spenders[idx as usize]
    }

    pub fn hour_bucket(&self, hour: i64) -> &[TxIdx] {
        self.hour_buckets
            .get(&hour)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Amount credited to `addr` by transaction `tx`.
    pub fn amount_received(&self, tx: TxIdx, addr: AddrIdx) -> u64 {
        let rec = self.tx(tx);
        self.output_addrs(tx)
            .iter()
            .zip(&rec.outputs)
            .filter(|(&a, _)| a == addr)
            .map(|(_, o)| o.amount)
            .sum()
    }

    /// Amount drawn from `addr` by transaction `tx`.
    pub fn amount_spent(&self, tx: TxIdx, addr: AddrIdx) -> u64 {
        let rec = self.tx(tx);
        self.input_owners(tx)
            .iter()
            .zip(&rec.inputs)
            .filter(|(&o, _)| o == Some(addr))
            .map(|(_, i)| i.amount)
            .sum()
    }

    /// Receive and spend transactions of `address` with timestamp `<= t_now`.
    pub fn address_history(&self, address: &str, t_now: i64) -> Result<AddressHistory> {
        let addr = self
            .address_idx(address)
            .ok_or_else(|| Error::AddressNotFound(address.to_string()))?;
        let cut = |list: &[TxIdx]| -> Vec<TxIdx> {
            let end = list.partition_point(|&t| self.time(t) <= t_now);
            list[..end].to_vec()
        };
        let receive_txs = cut(&self.receives[addr as usize]);
        let spend_txs = cut(&self.spends[addr as usize]);
        let creation_time = receive_txs
            .first()
            .into_iter()
            .chain(spend_txs.first())
            .map(|&t| self.time(t))
            .min()
            .ok_or_else(|| Error::AddressNotFound(address.to_string()))?;
        Ok(AddressHistory {
            address: address.to_string(),
            addr,
            label: self.label(address),
            creation_time,
            receive_txs,
            spend_txs,
        })
    }

    /// Timestamp of the first appearance of `address`, if any.
    pub fn creation_time(&self, address: &str) -> Option<i64> {
        let addr = self.address_idx(address)? as usize;
        let r = self.receives[addr].first().map(|&t| self.time(t));
        let s = self.spends[addr].first().map(|&t| self.time(t));
        match (r, s) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

pub fn write_jsonl<'a, W: Write>(
    mut writer: W,
    records: impl IntoIterator<Item = &'a TransactionRecord>,
) -> std::io::Result<()> {
    for r in records {
        writeln!(writer, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    address: String,
    label: u8,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, Label>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels_from(file)
}

pub fn read_labels_from<R: std::io::Read>(reader: R) -> Result<BTreeMap<String, Label>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["address", "label"] {
        return Err(Error::Schema(format!(
            "labels header must be `address,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let label = Label::from_bit(row.label).ok_or_else(|| {
            Error::InvalidInput(format!("label for {} must be 0 or 1", row.address))
        })?;
        out.insert(row.address, label);
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, labels: &BTreeMap<String, Label>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (address, label) in labels {
        if let Some(bit) = label.as_bit() {
            wtr.serialize(LabelRow {
                address: address.clone(),
                label: bit,
            })?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}
