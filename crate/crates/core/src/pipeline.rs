//! Stage orchestration over an output directory of plain-file artifacts.
//!
//! Every stage reads the artifacts of earlier stages, writes its own, and
//! records the sha256 of both sides in `manifest.json`. A missing input names
//! the stage that produces it; an input whose hash no longer matches what its
//! producer recorded is reported as stale.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{read_labels, Label, TxStore, HOUR};
use crate::features::{
    feature_timeline, read_timelines_csv, write_timelines_csv, FeatureTimeline, SchemaManifest, HOURS,
};
use crate::gbt::{train_gbt, GbtConfig, GbtModel};
use crate::intention::{self, AddressPrediction, Dims, IntentionConfig, IntentionModel, Sequence, StepInput};
use crate::metrics::{evaluate, write_survival_curves, EvalReport, PredictionTrace};
use crate::paths::{backward_paths, forward_paths, PathConfigs, PathSet};
use crate::sapm::{propose_breakpoints, segment_representations, sequence_for, Catalog, SegmentationPlan, StatusActionSequence};
use crate::select::{dtsc_loop, FeatureSpec, SelectConfig, SelectData};
use crate::synth::{generate, Scenario};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Defaults to `<out-dir>/transactions.jsonl`.
    pub transactions: Option<PathBuf>,
    /// Defaults to `<out-dir>/labels.csv`.
    pub labels: Option<PathBuf>,
    /// Held-out fraction per class for `predict` and `eval`.
    pub test_fraction: f64,
    pub hours: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            transactions: None,
            labels: None,
            test_fraction: 0.3,
            hours: HOURS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub theta_s: f64,
    pub delta: f64,
    pub k_status: usize,
    pub k_action: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            theta_s: 0.5,
            delta: 1e-8,
            k_status: 16,
            k_action: 16,
        }
    }
}

impl SegmentConfig {
    /// Cluster counts used for the hack, ransomware and darknet datasets.
    pub fn for_dataset(name: &str) -> Option<Self> {
        let k = match name {
            "hack" => 16,
            "ransomware" | "darknet" => 32,
            _ => return None,
        };
        Some(SegmentConfig {
            k_status: k,
            k_action: k,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives the split, intention training and the default synthetic universe.
    pub seed: u64,
    pub data: DataConfig,
    /// Universe for `synth`; the 200-address hack universe when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<Scenario>,
    pub paths: PathConfigs,
    pub select: SelectConfig,
    pub segment: SegmentConfig,
    pub gbt: GbtConfig,
    pub intention: IntentionConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(sc) = self.synth.as_mut() {
            sc.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        if d.hours < 2 {
            return Err(Error::Config("data.hours must be at least 2".into()));
        }
        let s = &self.segment;
        if !(s.theta_s > 0.0 && s.theta_s.is_finite()) {
            return Err(Error::Config("segment.theta_s must be positive".into()));
        }
        if !(s.delta > 0.0 && s.delta.is_finite()) {
            return Err(Error::Config("segment.delta must be positive".into()));
        }
        if s.k_status == 0 || s.k_action == 0 {
            return Err(Error::Config("segment cluster counts must be positive".into()));
        }
        if let Some(sc) = &self.synth {
            sc.validate()?;
        }
        self.paths.validate()?;
        self.select.validate()?;
        self.gbt.validate()?;
        self.intention.validate()
    }

    pub fn scenario(&self) -> Scenario {
        self.synth.clone().unwrap_or_else(|| Scenario::hack_universe(self.seed))
    }

    fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Paths,
    Features,
    Select,
    Segment,
    Train,
    Predict,
    Eval,
    Explain,
}

impl Stage {
    pub const PIPELINE: [Stage; 8] = [
        Stage::Ingest,
        Stage::Paths,
        Stage::Features,
        Stage::Select,
        Stage::Segment,
        Stage::Train,
        Stage::Predict,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Paths => "paths",
            Stage::Features => "features",
            Stage::Select => "select",
            Stage::Segment => "segment",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
        }
    }
}

pub const INGEST_REPORT: &str = "ingest_report.json";
pub const SPLIT: &str = "split.json";
pub const PATH_INDEX: &str = "paths/index.csv";
pub const SCHEMA: &str = "features/schema.json";
pub const TRAIN_CSV: &str = "features/train.csv";
pub const TEST_CSV: &str = "features/test.csv";
pub const FEATURESPEC: &str = "featurespec.json";
pub const PLAN: &str = "plan.json";
pub const CATALOG_STATUS: &str = "catalog_status.json";
pub const CATALOG_ACTION: &str = "catalog_action.json";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const GBT_STATUS: &str = "gbt_status.json";
pub const GBT_ACTION: &str = "gbt_action.json";
pub const MODEL_BIN: &str = "intention_model.bin";
pub const MODEL_JSON: &str = "intention_model.json";
pub const CHECKPOINT: &str = "checkpoints/intention_last.bin";
pub const TRAINING_LOG: &str = "training_log.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const SURVIVAL: &str = "survival_curves.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub transactions: usize,
    pub addresses: usize,
    pub rejected: usize,
    pub first_rejections: Vec<String>,
    pub duplicates: usize,
    pub dangling_inputs: usize,
    pub labeled: usize,
    pub positives: usize,
    /// Labeled addresses that never appear in the transactions.
    pub labels_without_transactions: usize,
}

/// Stratified split: each class is shuffled with the seed and its first
/// `round(n * fraction)` members (at least one when the class has two) go to test.
pub fn stratified_split(labeled: &BTreeMap<String, u8>, fraction: f64, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_9117);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<&String> = labeled.iter().filter(|(_, &l)| l == class).map(|(a, _)| a).collect();
        members.shuffle(&mut rng);
        let mut n_test = (members.len() as f64 * fraction).round() as usize;
        if members.len() >= 2 {
            n_test = n_test.clamp(1, members.len() - 1);
        } else {
            n_test = 0;
        }
        test.extend(members[..n_test].iter().map(|s| s.to_string()));
        train.extend(members[n_test..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    Split {
        seed,
        test_fraction: fraction,
        train,
        test,
    }
}

/// File name for an address; anything outside `[A-Za-z0-9_.-]` is hex-encoded.
pub fn address_file_stem(address: &str) -> String {
    let plain = !address.is_empty()
        && !address.starts_with('.')
        && address.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if plain {
        address.to_string()
    } else {
        format!("x{}", hex::encode(address.as_bytes()))
    }
}

/// Fitted artifacts needed to turn a feature timeline into model inputs.
#[derive(Debug, Clone)]
pub struct Models {
    pub spec: FeatureSpec,
    pub plan: SegmentationPlan,
    pub status: Catalog,
    pub action: Catalog,
}

/// A timeline prepared for the boosted trees and the intention network.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sequence: StatusActionSequence,
    /// Normalized materialized rows.
    pub rows: Vec<Vec<f64>>,
}

impl Models {
    pub fn prepare(&self, tl: &FeatureTimeline) -> Prepared {
        let raw = self.spec.materialize(&tl.rows);
        let sequence = sequence_for(&tl.address, &raw, &self.plan, &self.status, &self.action);
        Prepared {
            rows: self.plan.normalizer.apply_all(&raw),
            sequence,
        }
    }

    pub fn intention_input(&self, tl: &FeatureTimeline, p: &Prepared, gbt_s: &GbtModel, gbt_a: &GbtModel) -> Sequence {
        let steps = p
            .sequence
            .hours
            .iter()
            .zip(&p.rows)
            .map(|(h, f)| {
                let s_vec = self.status.centers[h.status].clone();
                let a_vec = self.action.centers[h.action].clone();
                StepInput {
                    status: h.status,
                    action: h.action,
                    p_s: gbt_s.predict_proba(&s_vec).1,
                    p_a: gbt_a.predict_proba(&a_vec).1,
                    f: f.clone(),
                    s_vec,
                    a_vec,
                }
            })
            .collect();
        Sequence {
            address: tl.address.clone(),
            label: tl.label.as_bit().unwrap_or(0),
            steps,
        }
    }
}

/// Everything `explain` reports for one address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub address: String,
    pub label: Option<u8>,
    pub creation_time: i64,
    pub segments: Vec<(usize, usize)>,
    pub sequence: StatusActionSequence,
    pub status_paths: BTreeMap<usize, String>,
    pub action_paths: BTreeMap<usize, String>,
    pub prediction: AddressPrediction,
}

impl Explanation {
    pub fn status_changes_before(&self, hour: usize) -> usize {
        let s: Vec<usize> = self
            .sequence
            .hours
            .iter()
            .filter(|h| h.hour < hour)
            .map(|h| h.status)
            .collect();
        s.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let label = self.label.map(|l| l.to_string()).unwrap_or_else(|| "unknown".into());
        let _ = writeln!(out, "address {} (label {label}, created {})", self.address, self.creation_time);
        let segs: Vec<String> = self.segments.iter().map(|(s, e)| format!("[{s}-{e}]")).collect();
        let _ = writeln!(out, "segments: {}", segs.join(" "));
        let join = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-");
        let _ = writeln!(out, "status sequence: [{}]", join(self.sequence.hours.iter().map(|h| h.status).collect()));
        let _ = writeln!(out, "action sequence: [{}]", join(self.sequence.hours.iter().map(|h| h.action).collect()));
        let _ = writeln!(out, "segment statuses: [{}]", join(self.sequence.segments.iter().map(|s| s.status).collect()));
        let _ = writeln!(out, "segment actions: [{}]", join(self.sequence.segments.iter().map(|s| s.action).collect()));
        let _ = writeln!(out, "\nstatus decision paths:");
        for text in self.status_paths.values() {
            out.push_str(text);
        }
        let _ = writeln!(out, "\naction decision paths:");
        for text in self.action_paths.values() {
            out.push_str(text);
        }
        let t_die = self
            .prediction
            .t_die
            .map(|t| t.to_string())
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "\nintention motif: [{}] (t_die {t_die})", join(self.prediction.motif.clone()));
        let _ = writeln!(out, "\nt,status,action,p_malicious,survival,hazard,alpha_S,alpha_A,alpha_I,intention_index");
        for (s, h) in self.prediction.steps.iter().zip(&self.sequence.hours) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.t, h.status, h.action, s.p_malicious, s.survival, s.hazard, s.alpha[0], s.alpha[1], s.alpha[2], s.intention_index
            );
        }
        out
    }
}

/// Runs stages against one output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub out_dir: PathBuf,
    pub cfg: PipelineConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl Pipeline {
    pub fn new(out_dir: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            out_dir: out_dir.into(),
            cfg,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn transactions_path(&self) -> PathBuf {
        self.cfg
            .data
            .transactions
            .clone()
            .unwrap_or_else(|| self.path("transactions.jsonl"))
    }

    fn labels_path(&self) -> PathBuf {
        self.cfg.data.labels.clone().unwrap_or_else(|| self.path("labels.csv"))
    }

    fn mkdir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))
    }

    /// Manifest key for an artifact: relative to the output directory when inside it.
    fn key(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        read_json(&p)
    }

    /// Checks that every input exists and reports inputs changed since their producer ran.
    fn require(&self, inputs: &[(PathBuf, Stage)]) -> Result<()> {
        let manifest = self.manifest()?;
        for (p, stage) in inputs {
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    artifact: p.clone(),
                    stage: stage.name(),
                });
            }
            let key = self.key(p);
            if let Some(rec) = manifest.stages.get(stage.name()) {
                if let Some(h) = rec.outputs.get(&key) {
                    if *h != sha256_file(p)? {
                        log::warn!("{key} changed since `{}` wrote it; rerun `{}`", stage.name(), stage.name());
                    }
                }
            }
        }
        Ok(())
    }

    fn record(&self, stage: Stage, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let mut manifest = self.manifest()?;
        let mut rec = StageRecord {
            config: self.cfg.hash(),
            ..Default::default()
        };
        for p in inputs {
            rec.inputs.insert(self.key(p), sha256_file(p)?);
        }
        for p in outputs {
            rec.outputs.insert(self.key(p), sha256_file(p)?);
        }
        manifest.stages.insert(stage.name().to_string(), rec);
        write_json(&self.path(MANIFEST), &manifest)
    }

    pub fn load_store(&self) -> Result<TxStore> {
        let tx = self.transactions_path();
        let labels = self.labels_path();
        self.require(&[(tx.clone(), Stage::Synth), (labels.clone(), Stage::Synth)])?;
        let mut store = TxStore::load(&tx)?;
        store.set_labels(read_labels(&labels)?);
        Ok(store)
    }

    pub fn synth(&self) -> Result<()> {
        let scenario = self.cfg.scenario();
        let universe = generate(&scenario)?;
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        universe.write(&self.out_dir, &scenario)?;
        let outs: Vec<PathBuf> = ["transactions.jsonl", "labels.csv", "scenario.json", "truth.json"]
            .iter()
            .map(|f| self.path(f))
            .collect();
        log::info!("synth: {} transactions, {} labeled addresses", universe.records.len(), universe.labels.len());
        self.record(Stage::Synth, &[], &outs)
    }

    pub fn ingest(&self) -> Result<IngestReport> {
        let store = self.load_store()?;
        let labels = read_labels(self.labels_path())?;
        let mut labeled = BTreeMap::new();
        let mut missing = 0;
        for (a, l) in &labels {
            let Some(bit) = l.as_bit() else { continue };
            if store.creation_time(a).is_some() {
                labeled.insert(a.clone(), bit);
            } else {
                missing += 1;
            }
        }
        let r = store.report();
        let report = IngestReport {
            lines: r.lines,
            transactions: store.tx_count(),
            addresses: store.address_count(),
            rejected: r.rejected.len(),
            first_rejections: r
                .rejected
                .iter()
                .take(20)
                .map(|e| format!("line {}: {}", e.line, e.message))
                .collect(),
            duplicates: r.duplicates.len(),
            dangling_inputs: r.dangling_inputs,
            labeled: labeled.len(),
            positives: labeled.values().filter(|&&l| l == 1).count(),
            labels_without_transactions: missing,
        };
        if report.positives == 0 || report.positives == report.labeled {
            return Err(Error::Degenerate("labeled addresses must include both classes".into()));
        }
        let split = stratified_split(&labeled, self.cfg.data.test_fraction, self.cfg.seed);
        write_json(&self.path(INGEST_REPORT), &report)?;
        write_json(&self.path(SPLIT), &split)?;
        self.record(
            Stage::Ingest,
            &[self.transactions_path(), self.labels_path()],
            &[self.path(INGEST_REPORT), self.path(SPLIT)],
        )?;
        Ok(report)
    }

    pub fn split(&self) -> Result<Split> {
        let p = self.path(SPLIT);
        self.require(&[(p.clone(), Stage::Ingest)])?;
        read_json(&p)
    }

    fn all_addresses(split: &Split) -> Vec<String> {
        let mut v: Vec<String> = split.train.iter().chain(&split.test).cloned().collect();
        v.sort();
        v
    }

    /// The four path sets of `address` as seen at the end of the observation window.
    pub fn path_sets(&self, store: &TxStore, address: &str) -> Result<[PathSet; 4]> {
        let creation = store
            .creation_time(address)
            .ok_or_else(|| Error::AddressNotFound(address.to_string()))?;
        let t_end = creation + self.cfg.data.hours as i64 * HOUR;
        let history = store.address_history(address, t_end)?;
        let cfgs = self.cfg.paths.as_array();
        let mut out: [PathSet; 4] = Default::default();
        for (slot, cfg) in cfgs.iter().enumerate() {
            let sets = if slot < 2 {
                history
                    .receive_txs
                    .iter()
                    .map(|&t| backward_paths(store, t, cfg))
                    .collect::<Result<Vec<_>>>()?
            } else {
                history
                    .spend_txs
                    .iter()
                    .map(|&t| forward_paths(store, t, cfg, t_end))
                    .collect::<Result<Vec<_>>>()?
            };
            out[slot] = PathSet::merge(&sets);
        }
        Ok(out)
    }

    pub fn paths(&self) -> Result<()> {
        let split = self.split()?;
        let store = self.load_store()?;
        self.mkdir("paths")?;
        let addrs = Self::all_addresses(&split);
        let names = ["lt_bk", "st_bk", "lt_fr", "st_fr"];
        let rows: Vec<(String, [usize; 4], bool)> = addrs
            .par_iter()
            .map(|a| -> Result<(String, [usize; 4], bool)> {
                let sets = self.path_sets(&store, a)?;
                let p = self.path(&format!("paths/{}.jsonl", address_file_stem(a)));
                let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
                let mut w = BufWriter::new(f);
                for (name, set) in names.iter().zip(&sets) {
                    for path in &set.paths {
                        let mut v = path.to_json(&store);
                        v["set"] = serde_json::Value::from(*name);
                        writeln!(w, "{v}").map_err(|e| Error::io(&p, e))?;
                    }
                }
                w.flush().map_err(|e| Error::io(&p, e))?;
                let counts = [sets[0].len(), sets[1].len(), sets[2].len(), sets[3].len()];
                Ok((a.clone(), counts, sets.iter().any(|s| s.truncated)))
            })
            .collect::<Result<_>>()?;
        let idx = self.path(PATH_INDEX);
        let mut body = String::from("address,file,lt_bk,st_bk,lt_fr,st_fr,truncated\n");
        for (a, c, t) in &rows {
            let _ = writeln!(
                body,
                "{a},{}.jsonl,{},{},{},{},{}",
                address_file_stem(a),
                c[0],
                c[1],
                c[2],
                c[3],
                u8::from(*t)
            );
        }
        std::fs::write(&idx, body).map_err(|e| Error::io(&idx, e))?;
        let mut outs = vec![idx];
        outs.extend(addrs.iter().map(|a| self.path(&format!("paths/{}.jsonl", address_file_stem(a)))));
        self.record(
            Stage::Paths,
            &[self.transactions_path(), self.labels_path(), self.path(SPLIT)],
            &outs,
        )
    }

    pub fn timelines(&self, store: &TxStore, addresses: &[String]) -> Result<Vec<FeatureTimeline>> {
        addresses
            .par_iter()
            .map(|a| feature_timeline(store, a, &self.cfg.paths, self.cfg.data.hours))
            .collect()
    }

    pub fn features(&self) -> Result<()> {
        let split = self.split()?;
        let store = self.load_store()?;
        self.mkdir("features")?;
        for (rel, addrs) in [(TRAIN_CSV, &split.train), (TEST_CSV, &split.test)] {
            let tls = self.timelines(&store, addrs)?;
            if let Some(t) = tls.iter().find(|t| t.truncated) {
                log::warn!("path enumeration hit its cap for {}", t.address);
            }
            let p = self.path(rel);
            let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            write_timelines_csv(&mut w, &tls)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        write_json(&self.path(SCHEMA), &SchemaManifest::full())?;
        self.record(
            Stage::Features,
            &[self.transactions_path(), self.labels_path(), self.path(SPLIT)],
            &[self.path(TRAIN_CSV), self.path(TEST_CSV), self.path(SCHEMA)],
        )
    }

    fn read_features(&self, rel: &str) -> Result<Vec<FeatureTimeline>> {
        let p = self.path(rel);
        self.require(&[(p.clone(), Stage::Features)])?;
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        read_timelines_csv(std::io::BufReader::new(f))
    }

    pub fn select(&self) -> Result<FeatureSpec> {
        let train = self.read_features(TRAIN_CSV)?;
        let spec = dtsc_loop(&SelectData::from_timelines(&train), &self.cfg.select)?;
        write_json(&self.path(FEATURESPEC), &spec)?;
        self.record(Stage::Select, &[self.path(TRAIN_CSV)], &[self.path(FEATURESPEC)])?;
        Ok(spec)
    }

    fn feature_spec(&self) -> Result<FeatureSpec> {
        let p = self.path(FEATURESPEC);
        self.require(&[(p.clone(), Stage::Select)])?;
        let spec: FeatureSpec = read_json(&p)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Fits cluster catalogs, clamping `k` to the number of distinct representations.
    fn fit_catalog(vectors: &[Vec<f64>], k: usize, what: &str) -> Result<Catalog> {
        let mut distinct: Vec<&Vec<f64>> = vectors.iter().collect();
        distinct.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        distinct.dedup();
        let k_eff = k.min(distinct.len());
        if k_eff < k {
            log::warn!("{what}: only {} distinct representations, using k = {k_eff}", distinct.len());
        }
        Catalog::fit(vectors, k_eff)
    }

    pub fn segment(&self) -> Result<Models> {
        let spec = self.feature_spec()?;
        let train = self.read_features(TRAIN_CSV)?;
        let test = self.read_features(TEST_CSV)?;
        let raw: Vec<Vec<Vec<f64>>> = train.iter().map(|t| spec.materialize(&t.rows)).collect();
        let columns: Vec<String> = spec.columns().into_iter().map(|(n, _)| n).collect();
        let plan = propose_breakpoints(&raw, columns, self.cfg.segment.theta_s, self.cfg.segment.delta)?;
        let mut gs = Vec::new();
        let mut ds = Vec::new();
        for r in &raw {
            let (g, d) = segment_representations(&plan.normalizer.apply_all(r), &plan);
            gs.extend(g);
            ds.extend(d);
        }
        let status = Self::fit_catalog(&gs, self.cfg.segment.k_status, "status catalog")?;
        let action = Self::fit_catalog(&ds, self.cfg.segment.k_action, "action catalog")?;
        let models = Models {
            spec,
            plan,
            status,
            action,
        };
        write_json(&self.path(PLAN), &models.plan)?;
        write_json(&self.path(CATALOG_STATUS), &models.status)?;
        write_json(&self.path(CATALOG_ACTION), &models.action)?;
        let seq_path = self.path(SEQUENCES);
        let f = File::create(&seq_path).map_err(|e| Error::io(&seq_path, e))?;
        let mut w = BufWriter::new(f);
        for tl in train.iter().chain(&test) {
            let p = models.prepare(tl);
            writeln!(w, "{}", serde_json::to_string(&p.sequence)?).map_err(|e| Error::io(&seq_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&seq_path, e))?;
        let names = &models.plan.columns;
        for (rel, cat) in [("explainer_status.dot", &models.status), ("explainer_action.dot", &models.action)] {
            let p = self.path(rel);
            std::fs::write(&p, cat.explainer_dot(names)).map_err(|e| Error::io(&p, e))?;
        }
        self.record(
            Stage::Segment,
            &[self.path(FEATURESPEC), self.path(TRAIN_CSV), self.path(TEST_CSV)],
            &[
                self.path(PLAN),
                self.path(CATALOG_STATUS),
                self.path(CATALOG_ACTION),
                seq_path,
                self.path("explainer_status.dot"),
                self.path("explainer_action.dot"),
            ],
        )?;
        Ok(models)
    }

    pub fn models(&self) -> Result<Models> {
        let spec = self.feature_spec()?;
        let req: Vec<(PathBuf, Stage)> = [PLAN, CATALOG_STATUS, CATALOG_ACTION]
            .iter()
            .map(|r| (self.path(r), Stage::Segment))
            .collect();
        self.require(&req)?;
        let plan: SegmentationPlan = read_json(&self.path(PLAN))?;
        let status: Catalog = read_json(&self.path(CATALOG_STATUS))?;
        let action: Catalog = read_json(&self.path(CATALOG_ACTION))?;
        if plan.columns.len() != spec.columns().len() || status.dim != plan.columns.len() || action.dim != plan.columns.len() {
            return Err(Error::Format("segmentation artifacts do not match featurespec.json; rerun `segment`".into()));
        }
        Ok(Models {
            spec,
            plan,
            status,
            action,
        })
    }

    fn intention_config(&self) -> IntentionConfig {
        IntentionConfig {
            seed: self.cfg.seed,
            ..self.cfg.intention
        }
    }

    pub fn train(&self) -> Result<Vec<intention::EpochStats>> {
        let models = self.models()?;
        let train = self.read_features(TRAIN_CSV)?;
        let prepared: Vec<_> = train.par_iter().map(|t| models.prepare(t)).collect();
        let mut xs = Vec::new();
        let mut xa = Vec::new();
        let mut y = Vec::new();
        for (tl, p) in train.iter().zip(&prepared) {
            let label = tl
                .label
                .as_bit()
                .ok_or_else(|| Error::InvalidInput(format!("training address {} has no label", tl.address)))?;
            for h in &p.sequence.hours {
                xs.push(models.status.centers[h.status].clone());
                xa.push(models.action.centers[h.action].clone());
                y.push(label);
            }
        }
        let gbt_s = train_gbt(&xs, &y, &self.cfg.gbt)?;
        let gbt_a = train_gbt(&xa, &y, &self.cfg.gbt)?;
        write_json(&self.path(GBT_STATUS), &gbt_s)?;
        write_json(&self.path(GBT_ACTION), &gbt_a)?;

        let seqs: Vec<Sequence> = train
            .iter()
            .zip(&prepared)
            .map(|(tl, p)| models.intention_input(tl, p, &gbt_s, &gbt_a))
            .collect();
        let icfg = self.intention_config();
        let n = models.plan.columns.len();
        let dims = Dims::new(models.status.k, models.action.k, n, n, n, &icfg);
        self.mkdir("checkpoints")?;
        let ckpt = self.path(CHECKPOINT);
        let (model, history) = intention::train(IntentionModel::init(dims, &icfg), &seqs, &icfg, |s, m| {
            log::info!("epoch {} loss {:.6}", s.epoch, s.mean_loss);
            m.save(&ckpt)
        })?;
        model.save(&self.path(MODEL_BIN))?;
        let jp = self.path(MODEL_JSON);
        std::fs::write(&jp, model.to_json()?).map_err(|e| Error::io(&jp, e))?;
        write_json(&self.path(TRAINING_LOG), &history)?;
        let mut outs = vec![
            self.path(GBT_STATUS),
            self.path(GBT_ACTION),
            self.path(MODEL_BIN),
            jp,
            self.path(TRAINING_LOG),
        ];
        if ckpt.exists() {
            outs.push(ckpt);
        }
        self.record(
            Stage::Train,
            &[
                self.path(FEATURESPEC),
                self.path(PLAN),
                self.path(CATALOG_STATUS),
                self.path(CATALOG_ACTION),
                self.path(TRAIN_CSV),
            ],
            &outs,
        )?;
        Ok(history)
    }

    pub fn trained(&self) -> Result<(Models, GbtModel, GbtModel, IntentionModel)> {
        let models = self.models()?;
        let req: Vec<(PathBuf, Stage)> = [GBT_STATUS, GBT_ACTION, MODEL_BIN]
            .iter()
            .map(|r| (self.path(r), Stage::Train))
            .collect();
        self.require(&req)?;
        let gbt_s: GbtModel = read_json(&self.path(GBT_STATUS))?;
        let gbt_a: GbtModel = read_json(&self.path(GBT_ACTION))?;
        let net = IntentionModel::load(&self.path(MODEL_BIN))?;
        Ok((models, gbt_s, gbt_a, net))
    }

    pub fn predict_timelines(&self, timelines: &[FeatureTimeline]) -> Result<Vec<AddressPrediction>> {
        let (models, gbt_s, gbt_a, net) = self.trained()?;
        let eps = self.cfg.intention.epsilon;
        timelines
            .par_iter()
            .map(|tl| {
                let p = models.prepare(tl);
                net.predict(&models.intention_input(tl, &p, &gbt_s, &gbt_a), eps)
            })
            .collect()
    }

    pub fn predict(&self) -> Result<Vec<AddressPrediction>> {
        let test = self.read_features(TEST_CSV)?;
        let preds = self.predict_timelines(&test)?;
        let p = self.path(PREDICTIONS);
        let mut body = String::from("address,t_index,p_malicious,survival,alpha_S,alpha_A,alpha_I,intention_index\n");
        for pr in &preds {
            for s in &pr.steps {
                let _ = writeln!(
                    body,
                    "{},{},{},{},{},{},{},{}",
                    pr.address, s.t, s.p_malicious, s.survival, s.alpha[0], s.alpha[1], s.alpha[2], s.intention_index
                );
            }
        }
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.record(
            Stage::Predict,
            &[
                self.path(TEST_CSV),
                self.path(FEATURESPEC),
                self.path(PLAN),
                self.path(CATALOG_STATUS),
                self.path(CATALOG_ACTION),
                self.path(GBT_STATUS),
                self.path(GBT_ACTION),
                self.path(MODEL_BIN),
            ],
            &[p],
        )?;
        Ok(preds)
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let pp = self.path(PREDICTIONS);
        self.require(&[(pp.clone(), Stage::Predict), (self.labels_path(), Stage::Synth)])?;
        let labels = read_labels(self.labels_path())?;
        let (traces, curves) = read_predictions(&pp, &labels)?;
        let report = evaluate(&traces)?;
        report.write_json(&self.path(EVAL_JSON))?;
        report.write_csv(&self.path(EVAL_CSV))?;
        write_survival_curves(&self.path(SURVIVAL), &curves)?;
        self.record(
            Stage::Eval,
            &[pp, self.labels_path()],
            &[self.path(EVAL_JSON), self.path(EVAL_CSV), self.path(SURVIVAL)],
        )?;
        Ok(report)
    }

    /// Runs `ingest` through `eval`.
    pub fn run(&self) -> Result<EvalReport> {
        self.ingest()?;
        self.paths()?;
        self.features()?;
        self.select()?;
        self.segment()?;
        self.train()?;
        self.predict()?;
        self.eval()
    }

    pub fn explain(&self, address: &str) -> Result<Explanation> {
        let store = self.load_store()?;
        let tl = feature_timeline(&store, address, &self.cfg.paths, self.cfg.data.hours)?;
        let (models, gbt_s, gbt_a, net) = self.trained()?;
        let prepared = models.prepare(&tl);
        let prediction = net.predict(
            &models.intention_input(&tl, &prepared, &gbt_s, &gbt_a),
            self.cfg.intention.epsilon,
        )?;
        let names = &models.plan.columns;
        let mut status_paths = BTreeMap::new();
        let mut action_paths = BTreeMap::new();
        for h in &prepared.sequence.hours {
            if !status_paths.contains_key(&h.status) {
                status_paths.insert(h.status, models.status.explain_text(h.status, names)?);
            }
            if !action_paths.contains_key(&h.action) {
                action_paths.insert(h.action, models.action.explain_text(h.action, names)?);
            }
        }
        let ex = Explanation {
            address: address.to_string(),
            label: store.label(address).as_bit(),
            creation_time: tl.creation_time,
            segments: models.plan.bounds(),
            sequence: prepared.sequence,
            status_paths,
            action_paths,
            prediction,
        };
        self.mkdir("explain")?;
        let stem = address_file_stem(address);
        let tp = self.path(&format!("explain/{stem}.txt"));
        std::fs::write(&tp, ex.render()).map_err(|e| Error::io(&tp, e))?;
        write_json(&self.path(&format!("explain/{stem}.json")), &ex)?;
        Ok(ex)
    }
}

/// Reads `predictions.csv` into per-address traces (file order) and survival curves.
pub fn read_predictions(
    path: &Path,
    labels: &BTreeMap<String, Label>,
) -> Result<(Vec<PredictionTrace>, Vec<(String, Vec<f64>)>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{} lacks column {name}", path.display())))
    };
    let (ca, ct, cp, cs) = (col("address")?, col("t_index")?, col("p_malicious")?, col("survival")?);
    let mut traces: Vec<PredictionTrace> = Vec::new();
    let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let addr = &rec[ca];
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("bad number {:?} for {addr}", &rec[c])))
        };
        let t: usize = rec[ct]
            .parse()
            .map_err(|_| Error::Schema(format!("bad t_index {:?} for {addr}", &rec[ct])))?;
        let (p, s) = (num(cp)?, num(cs)?);
        if traces.last().is_none_or(|tr| tr.address != addr) {
            if traces.iter().any(|tr| tr.address == addr) {
                return Err(Error::Schema(format!("rows of {addr} are not contiguous")));
            }
            let label = labels
                .get(addr)
                .and_then(|l| l.as_bit())
                .ok_or_else(|| Error::InvalidInput(format!("no label for predicted address {addr}")))?;
            traces.push(PredictionTrace {
                address: addr.to_string(),
                label,
                p: Vec::new(),
            });
            curves.push((addr.to_string(), Vec::new()));
        }
        let tr = traces.last_mut().expect("pushed above");
        if t != tr.p.len() + 1 {
            return Err(Error::Schema(format!("t_index of {addr} must run 1, 2, ... (got {t})")));
        }
        tr.p.push(p);
        curves.last_mut().expect("pushed above").1.push(s);
    }
    Ok((traces, curves))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err = serde_json::from_str::<PipelineConfig>(r#"{"segment": {"theta": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.paths.lt_bk.theta, 0.5);
        assert_eq!(cfg.paths.st_bk.theta, 0.01);
        assert_eq!(cfg.data.hours, 24);
    }

    #[test]
    fn dataset_cluster_counts() {
        assert_eq!(SegmentConfig::for_dataset("hack").unwrap().k_status, 16);
        assert_eq!(SegmentConfig::for_dataset("ransomware").unwrap().k_action, 32);
        assert_eq!(SegmentConfig::for_dataset("darknet").unwrap().k_status, 32);
        assert!(SegmentConfig::for_dataset("other").is_none());
    }

    #[test]
    fn seed_override_reaches_scenario() {
        let cfg = PipelineConfig {
            synth: Some(Scenario::hack_universe(3)),
            ..Default::default()
        }
        .with_seed(11);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.scenario().seed, 11);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let labeled: BTreeMap<String, u8> = (0..100).map(|i| (format!("a{i:03}"), u8::from(i < 10))).collect();
        let s = stratified_split(&labeled, 0.3, 5);
        assert_eq!(s, stratified_split(&labeled, 0.3, 5));
        assert_eq!(s.test.len(), 30);
        assert_eq!(s.test.iter().filter(|a| labeled[*a] == 1).count(), 3);
        assert_eq!(s.train.len() + s.test.len(), 100);
        assert!(s.train.iter().all(|a| !s.test.contains(a)));
        assert_ne!(s.test, stratified_split(&labeled, 0.3, 6).test);
    }

    #[test]
    fn file_stems() {
        assert_eq!(address_file_stem("hack0001"), "hack0001");
        assert_eq!(address_file_stem("a/b"), "x612f62");
        assert_eq!(address_file_stem(".."), "x2e2e");
    }

    #[test]
    fn missing_artifact_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), PipelineConfig::default()).unwrap();
        match p.select() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "features"),
            other => panic!("unexpected {other:?}"),
        }
        match p.ingest() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "synth"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predictions_reader_checks_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let labels: BTreeMap<String, Label> =
            [("a".to_string(), Label::Malicious), ("b".to_string(), Label::Regular)].into();
        std::fs::write(&p, "address,t_index,p_malicious,survival\na,1,0.9,1\na,2,0.8,0.5\nb,1,0.1,1\n").unwrap();
        let (tr, curves) = read_predictions(&p, &labels).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr[0].p, vec![0.9, 0.8]);
        assert_eq!(curves[0].1, vec![1.0, 0.5]);
        std::fs::write(&p, "address,t_index,p_malicious,survival\na,2,0.9,1\n").unwrap();
        assert!(read_predictions(&p, &labels).is_err());
        std::fs::write(&p, "address,t_index,p_malicious,survival\nc,1,0.9,1\n").unwrap();
        assert!(read_predictions(&p, &labels).is_err());
    }
}
