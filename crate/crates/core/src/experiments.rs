//! Seeded sweeps over head variants.
//!
//! A sweep runs generate, train and evaluate for every (variant, seed) cell
//! and persists each step's artifacts together with their SHA-256 digests:
//!
//! ```text
//! <out>/experiment.toml            resolved experiment config
//! <out>/manifest.json              digests of datasets and tables
//! <out>/datasets/<preset>-<seed>.jsonl
//! <out>/<variant>/<seed>/          one cell: config, heads, ledgers,
//!                                  detections, report, manifest.json
//! <out>/table.csv, cells.csv, summary.json
//! ```
//!
//! A cell whose manifest verifies against its files and whose resolved config
//! is unchanged is loaded instead of retrained.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, DatasetConfig, FreqGroup, Split, SyntheticDataset};
use crate::digest::{file_digest, sha256_hex, write_file};
use crate::error::{Error, Result};
use crate::evaluation::{report, save_detections, EvalConfig, EvalReport};
use crate::heads::{HeadBank, HeadVariant, LinearClassifier};
use crate::training::{train, TrainConfig, TrainLedger};

/// Version of the experiment config and manifest formats.
pub const SPEC_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";
pub const CELL_CONFIG: &str = "config.toml";
pub const HEADS_FILE: &str = "heads.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const REPORT_FILE: &str = "report.json";

/// Experiment description, read from TOML.
///
/// ```toml
/// version = 1
/// preset = "lt60"
/// seeds = [1, 2, 3]
/// variants = ["specific", "cab:0.5"]
/// out = "runs/demo"
///
/// [train]
/// epochs = 30
///
/// [eval]
/// oracle_gt_class = true
/// ```
///
/// Each cell's seed drives both dataset generation and training, so
/// `train.seed` is ignored inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<HeadVariant>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_preset() -> String {
    "lt60".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_variants() -> Vec<HeadVariant> {
    vec![HeadVariant::Specific]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            version: SPEC_VERSION,
            preset: default_preset(),
            seeds: default_seeds(),
            variants: default_variants(),
            out: default_out(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Experiment presets laid out like the result tables they mirror.
pub const PRESETS: [&str; 4] = ["table1", "table3a", "table3b", "table3c"];

/// Row labels and variants of an experiment preset, in table order.
pub fn preset_rows(name: &str) -> Result<Vec<(&'static str, HeadVariant)>> {
    let rows: &[(&str, &str)] = match name {
        "table1" => &[("Specific", "specific"), ("Agnostic", "agnostic")],
        "table3a" => &[
            ("0.0", "cab:0"),
            ("0.2", "cab:0.2"),
            ("0.5", "cab:0.5"),
            ("0.8", "cab:0.8"),
            ("1.0", "cab:1"),
        ],
        "table3b" => &[
            ("base", "specific"),
            ("5 num", "cluster:5:num"),
            ("5 scale", "cluster:5:scale"),
            ("10 num", "cluster:10:num"),
            ("10 scale", "cluster:10:scale"),
        ],
        "table3c" => &[
            ("base", "specific"),
            ("r", "merge:r"),
            ("c", "merge:c"),
            ("r,c", "merge:rc"),
            ("r,c,f", "merge:rcf"),
        ],
        other => {
            return Err(Error::config(
                "preset",
                format!(
                    "unknown experiment preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                ),
            ))
        }
    };
    rows.iter()
        .map(|(label, tok)| Ok((*label, tok.parse()?)))
        .collect()
}

impl ExperimentSpec {
    /// Experiment config for a preset, writing under `runs/<name>`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            variants: preset_rows(name)?.into_iter().map(|(_, v)| v).collect(),
            out: PathBuf::from("runs").join(name),
            ..Self::default()
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::config(
                "version",
                format!(
                    "unsupported version {} (expected {SPEC_VERSION})",
                    self.version
                ),
            ));
        }
        DatasetConfig::preset(&self.preset, 0)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "need at least one head variant"));
        }
        if let Some(dup) = first_duplicate(&self.seeds) {
            return Err(Error::config("seeds", format!("seed {dup} listed twice")));
        }
        let tokens: Vec<String> = self.variants.iter().map(ToString::to_string).collect();
        if let Some(dup) = first_duplicate(&tokens) {
            return Err(Error::config(
                "variants",
                format!("variant `{dup}` listed twice"),
            ));
        }
        self.train.validate()?;
        self.eval.validate()
    }

    /// Labels for table rows when the variant list matches a preset.
    fn row_labels(&self) -> BTreeMap<String, &'static str> {
        PRESETS
            .iter()
            .filter_map(|p| preset_rows(p).ok())
            .find(|rows| rows.iter().map(|(_, v)| v).eq(self.variants.iter()))
            .map(|rows| rows.into_iter().map(|(l, v)| (v.to_string(), l)).collect())
            .unwrap_or_default()
    }
}

fn first_duplicate<T: Ord + Clone>(xs: &[T]) -> Option<T> {
    let mut seen = std::collections::BTreeSet::new();
    xs.iter().find(|x| !seen.insert((*x).clone())).cloned()
}

/// Directory name of a variant: `cab:0.5` becomes `cab-0.5`, `merge:r/c`
/// becomes `merge-r+c`.
pub fn variant_dir(v: &HeadVariant) -> String {
    v.to_string().replace(':', "-").replace('/', "+")
}

pub fn cell_dir(out: &Path, variant: &HeadVariant, seed: u64) -> PathBuf {
    out.join(variant_dir(variant)).join(seed.to_string())
}

/// Fully resolved configuration of one cell, echoed as `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub version: u32,
    pub variant: HeadVariant,
    pub seed: u64,
    pub dataset_digest: String,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetConfig,
}

/// Digest record written last into every artifact directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// File name (relative to the manifest) to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_digest: Option<String>,
}

impl Manifest {
    fn new() -> Self {
        Self {
            version: SPEC_VERSION,
            ..Self::default()
        }
    }

    fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let digest = write_file(&dir.join(name), bytes)?;
        self.files.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&dir.join(MANIFEST), text.as_bytes())
    }

    /// Checks every listed file against its digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, expected) in &self.files {
            let path = dir.join(name);
            let found = file_digest(&path)?;
            if &found != expected {
                return Err(Error::DigestMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Trains one variant and writes config, heads and ledgers into `dir`.
pub fn train_cell(
    dataset: &SyntheticDataset,
    cfg: &CellConfig,
    dir: &Path,
) -> Result<(HeadBank, Option<LinearClassifier>, TrainLedger, Manifest)> {
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train(dataset, &cfg.variant, &train_cfg)?;
    let mut m = Manifest::new();
    m.write(dir, CELL_CONFIG, toml::to_string(cfg)?.as_bytes())?;
    m.write(dir, HEADS_FILE, outcome.bank.to_json()?.as_bytes())?;
    if let Some(clf) = &outcome.classifier {
        m.write(dir, CLASSIFIER_FILE, serde_json::to_string(clf)?.as_bytes())?;
    }
    m.write(
        dir,
        LEDGER_FILE,
        serde_json::to_string(&outcome.ledger)?.as_bytes(),
    )?;
    m.write(
        dir,
        "ledger_train.csv",
        outcome.ledger.to_csv(Split::Train).as_bytes(),
    )?;
    m.write(
        dir,
        "ledger_val.csv",
        outcome.ledger.to_csv(Split::Val).as_bytes(),
    )?;
    m.write(
        dir,
        "ledger_groups.csv",
        outcome.ledger.groups_csv().as_bytes(),
    )?;
    m.weights_digest = Some(outcome.ledger.weights_digest.clone());
    m.ledger_digest = Some(outcome.ledger.digest());
    m.save(dir)?;
    Ok((outcome.bank, outcome.classifier, outcome.ledger, m))
}

/// Evaluates the heads stored in `dir` and adds detections and report to
/// its manifest.
pub fn eval_cell(dataset: &SyntheticDataset, dir: &Path, eval: &EvalConfig) -> Result<EvalReport> {
    let mut m = Manifest::load(dir)?;
    m.verify(dir)?;
    let bank = HeadBank::load(&dir.join(HEADS_FILE))?;
    let classifier = match m.files.contains_key(CLASSIFIER_FILE) {
        true => Some(read_json::<LinearClassifier>(&dir.join(CLASSIFIER_FILE))?),
        false => None,
    };
    let ledger = read_json::<TrainLedger>(&dir.join(LEDGER_FILE))?;
    let partition = crate::dataset::partition_by_frequency(dataset, Default::default());
    let (rep, dets) = report(
        &bank,
        classifier.as_ref(),
        dataset,
        eval,
        &partition,
        Some(&ledger),
    )?;
    let det_digest = save_detections(&dir.join("detections.csv"), &dets)?;
    m.files.insert("detections.csv".into(), det_digest);
    let mut json = serde_json::to_string_pretty(&rep)?;
    json.push('\n');
    m.write(dir, REPORT_FILE, json.as_bytes())?;
    m.write(dir, "report.csv", rep.to_csv().as_bytes())?;
    m.save(dir)?;
    Ok(rep)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: HeadVariant,
    pub seed: u64,
    pub report: EvalReport,
    pub ledger: TrainLedger,
    pub dataset_digest: String,
    /// Loaded from disk instead of retrained.
    pub reused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Per-variant aggregate over seeds. AP fields are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: HeadVariant,
    pub label: Option<String>,
    pub seeds: Vec<u64>,
    pub ap: Stat,
    pub ap_rare: Option<Stat>,
    pub ap_common: Option<Stat>,
    pub ap_frequent: Option<Stat>,
    pub ap50: Option<Stat>,
    pub ap75: Option<Stat>,
    pub bias_ratio: Option<Stat>,
}

impl VariantSummary {
    pub fn group(&self, g: FreqGroup) -> Option<Stat> {
        match g {
            FreqGroup::Rare => self.ap_rare,
            FreqGroup::Common => self.ap_common,
            FreqGroup::Frequent => self.ap_frequent,
        }
    }
}

fn summarize(variant: &HeadVariant, label: Option<&str>, cells: &[&CellResult]) -> VariantSummary {
    let col = |f: &dyn Fn(&CellResult) -> Option<f64>| {
        let vals: Option<Vec<f64>> = cells.iter().map(|c| f(c)).collect();
        vals.and_then(|v| Stat::of(&v))
    };
    VariantSummary {
        variant: variant.clone(),
        label: label.map(str::to_string),
        seeds: cells.iter().map(|c| c.seed).collect(),
        ap: col(&|c| Some(c.report.ap)).expect("at least one seed"),
        ap_rare: col(&|c| c.report.group_ap(FreqGroup::Rare)),
        ap_common: col(&|c| c.report.group_ap(FreqGroup::Common)),
        ap_frequent: col(&|c| c.report.group_ap(FreqGroup::Frequent)),
        ap50: col(&|c| c.report.ap_at(0.5)),
        ap75: col(&|c| c.report.ap_at(0.75)),
        bias_ratio: col(&|c| c.report.bias_ratio),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec: ExperimentSpec,
    /// Variant-major, seeds in spec order.
    pub cells: Vec<CellResult>,
    /// One entry per variant, in spec order.
    pub summary: Vec<VariantSummary>,
}

impl SweepResult {
    fn assemble(spec: ExperimentSpec, cells: Vec<CellResult>) -> Self {
        let labels = spec.row_labels();
        let summary = spec
            .variants
            .iter()
            .map(|v| {
                let rows: Vec<&CellResult> = cells.iter().filter(|c| &c.variant == v).collect();
                summarize(v, labels.get(&v.to_string()).copied(), &rows)
            })
            .collect();
        Self {
            spec,
            cells,
            summary,
        }
    }

    pub fn cell(&self, variant: &HeadVariant, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| &c.variant == variant && c.seed == seed)
    }

    pub fn variant_summary(&self, variant: &HeadVariant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| &s.variant == variant)
    }

    pub const TABLE_HEADER: &'static str =
        "row,variant,AP,AP_sd,APr,APr_sd,APc,APc_sd,APf,APf_sd,AP50,AP75,bias_ratio,bias_ratio_sd";

    /// One row per variant, AP columns x100.
    pub fn table_csv(&self) -> String {
        let mut s = format!("{}\n", Self::TABLE_HEADER);
        let pct = |st: Option<Stat>| match st {
            Some(st) => format!("{:.2},{:.2}", 100.0 * st.mean, 100.0 * st.std),
            None => ",".into(),
        };
        for v in &self.summary {
            let mean_only = |st: Option<Stat>| {
                st.map(|x| format!("{:.2}", 100.0 * x.mean))
                    .unwrap_or_default()
            };
            let ratio = v
                .bias_ratio
                .map(|b| format!("{:.4},{:.4}", b.mean, b.std))
                .unwrap_or(",".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                v.label.as_deref().unwrap_or(""),
                v.variant,
                pct(Some(v.ap)),
                pct(v.ap_rare),
                pct(v.ap_common),
                pct(v.ap_frequent),
                mean_only(v.ap50),
                mean_only(v.ap75),
                ratio
            );
        }
        s
    }

    pub const CELLS_HEADER: &'static str =
        "variant,seed,AP,APr,APc,APf,bias_ratio,dataset_digest,weights_digest,ledger_digest";

    /// One row per cell with full-precision values and digests.
    pub fn cells_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CELLS_HEADER);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let r = &c.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.variant,
                c.seed,
                r.ap,
                opt(r.group_ap(FreqGroup::Rare)),
                opt(r.group_ap(FreqGroup::Common)),
                opt(r.group_ap(FreqGroup::Frequent)),
                opt(r.bias_ratio),
                c.dataset_digest,
                c.ledger.weights_digest,
                c.ledger.digest()
            );
        }
        s
    }

    /// Digest over every cell's metrics and artifact digests.
    pub fn digest(&self) -> String {
        sha256_hex(self.cells_csv().as_bytes())
    }
}

pub fn dataset_path(out: &Path, preset: &str, seed: u64) -> PathBuf {
    out.join("datasets").join(format!("{preset}-{seed}.jsonl"))
}

/// Generates the dataset for `seed`, writing it only when the file on disk
/// differs.
fn materialize_dataset(out: &Path, preset: &str, seed: u64) -> Result<(SyntheticDataset, String)> {
    let ds = generate(&DatasetConfig::preset(preset, seed)?)?;
    let text = ds.to_jsonl()?;
    let digest = sha256_hex(text.as_bytes());
    let path = dataset_path(out, preset, seed);
    if file_digest(&path).ok().as_deref() != Some(digest.as_str()) {
        write_file(&path, text.as_bytes())?;
    }
    Ok((ds, digest))
}

fn cell_files_complete(m: &Manifest) -> bool {
    [
        CELL_CONFIG,
        HEADS_FILE,
        LEDGER_FILE,
        REPORT_FILE,
        "detections.csv",
    ]
    .iter()
    .all(|f| m.files.contains_key(*f))
}

/// Loads a finished cell if its manifest verifies and its stored config
/// equals `expected`.
fn try_reuse(dir: &Path, expected: &CellConfig) -> Option<(EvalReport, TrainLedger)> {
    let m = Manifest::load(dir).ok()?;
    if !cell_files_complete(&m) {
        return None;
    }
    if let Err(e) = m.verify(dir) {
        log::warn!("{}: {e}; retraining", dir.display());
        return None;
    }
    let stored: CellConfig =
        toml::from_str(&std::fs::read_to_string(dir.join(CELL_CONFIG)).ok()?).ok()?;
    if &stored != expected {
        log::info!("{}: config changed; retraining", dir.display());
        return None;
    }
    let report = read_json(&dir.join(REPORT_FILE)).ok()?;
    let ledger = read_json(&dir.join(LEDGER_FILE)).ok()?;
    Some((report, ledger))
}

fn run_cell(
    spec: &ExperimentSpec,
    variant: &HeadVariant,
    seed: u64,
    ds: &SyntheticDataset,
    ds_digest: &str,
) -> Result<CellResult> {
    let dir = cell_dir(&spec.out, variant, seed);
    let cfg = CellConfig {
        version: SPEC_VERSION,
        variant: variant.clone(),
        seed,
        dataset_digest: ds_digest.to_string(),
        train: TrainConfig {
            seed,
            ..spec.train.clone()
        },
        eval: spec.eval.clone(),
        dataset: ds.config.clone(),
    };
    if let Some((report, ledger)) = try_reuse(&dir, &cfg) {
        log::info!("{variant} seed {seed}: digests verified, skipping");
        return Ok(CellResult {
            variant: variant.clone(),
            seed,
            report,
            ledger,
            dataset_digest: ds_digest.to_string(),
            reused: true,
        });
    }
    log::info!("{variant} seed {seed}: training");
    let (_, _, ledger, _) = train_cell(ds, &cfg, &dir)?;
    let report = eval_cell(ds, &dir, &spec.eval)?;
    Ok(CellResult {
        variant: variant.clone(),
        seed,
        report,
        ledger,
        dataset_digest: ds_digest.to_string(),
        reused: false,
    })
}

/// Runs every cell of `spec` (in parallel on the current rayon pool) and
/// writes the aggregate tables.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    let out = &spec.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut root = Manifest::new();
    root.write(out, "experiment.toml", spec.to_toml()?.as_bytes())?;

    let datasets: Vec<(SyntheticDataset, String)> = spec
        .seeds
        .par_iter()
        .map(|&seed| materialize_dataset(out, &spec.preset, seed))
        .collect::<Result<_>>()?;
    for (&seed, (_, digest)) in spec.seeds.iter().zip(&datasets) {
        let rel = dataset_path(Path::new(""), &spec.preset, seed);
        root.files
            .insert(rel.to_string_lossy().into_owned(), digest.clone());
    }

    let jobs: Vec<(&HeadVariant, usize)> = spec
        .variants
        .iter()
        .flat_map(|v| (0..spec.seeds.len()).map(move |i| (v, i)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(v, i)| run_cell(spec, v, spec.seeds[i], &datasets[i].0, &datasets[i].1))
        .collect::<Result<_>>()?;

    let result = SweepResult::assemble(spec.clone(), cells);
    root.write(out, "table.csv", result.table_csv().as_bytes())?;
    root.write(out, "cells.csv", result.cells_csv().as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&result.summary)?;
    summary.push('\n');
    root.write(out, "summary.json", summary.as_bytes())?;
    root.save(out)?;
    Ok(result)
}

/// Reads a finished sweep back from `out`, verifying every manifest.
pub fn load_experiment(out: &Path) -> Result<SweepResult> {
    let root = Manifest::load(out)?;
    root.verify(out)?;
    let spec = ExperimentSpec::load(&out.join("experiment.toml"))?;
    let mut cells = Vec::new();
    for v in &spec.variants {
        for &seed in &spec.seeds {
            let dir = cell_dir(out, v, seed);
            let m = Manifest::load(&dir)?;
            m.verify(&dir)?;
            let cfg: CellConfig = toml::from_str(
                &std::fs::read_to_string(dir.join(CELL_CONFIG))
                    .map_err(|e| Error::io(dir.join(CELL_CONFIG), e))?,
            )?;
            cells.push(CellResult {
                variant: v.clone(),
                seed,
                report: read_json(&dir.join(REPORT_FILE))?,
                ledger: read_json(&dir.join(LEDGER_FILE))?,
                dataset_digest: cfg.dataset_digest,
                reused: true,
            });
        }
    }
    Ok(SweepResult::assemble(spec, cells))
}

/// Outcome of a digest audit.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct AuditReport {
    pub manifests: usize,
    pub files: usize,
    /// Human-readable description of every failed check.
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every `manifest.json` below `root` against the files it lists.
pub fn verify_tree(root: &Path) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let mut stack = vec![root.to_path_buf()];
    let mut manifests = Vec::new();
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == MANIFEST) {
                manifests.push(dir.clone());
            }
        }
    }
    manifests.sort();
    for dir in manifests {
        report.manifests += 1;
        let m = match Manifest::load(&dir) {
            Ok(m) => m,
            Err(e) => {
                report.failures.push(e.to_string());
                continue;
            }
        };
        for (name, expected) in &m.files {
            report.files += 1;
            let path = dir.join(name);
            match file_digest(&path) {
                Ok(found) if &found == expected => {}
                Ok(found) => report.failures.push(
                    Error::DigestMismatch {
                        path,
                        expected: expected.clone(),
                        found,
                    }
                    .to_string(),
                ),
                Err(e) => report.failures.push(e.to_string()),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table_rows() {
        let labels = |n| {
            preset_rows(n)
                .unwrap()
                .into_iter()
                .map(|(l, _)| l)
                .collect::<Vec<_>>()
        };
        assert_eq!(labels("table1"), ["Specific", "Agnostic"]);
        assert_eq!(labels("table3a"), ["0.0", "0.2", "0.5", "0.8", "1.0"]);
        assert_eq!(
            labels("table3b"),
            ["base", "5 num", "5 scale", "10 num", "10 scale"]
        );
        assert_eq!(labels("table3c"), ["base", "r", "c", "r,c", "r,c,f"]);
        let alphas: Vec<Option<f64>> = preset_rows("table3a")
            .unwrap()
            .into_iter()
            .map(|(_, v)| match v {
                HeadVariant::Cab { alpha } => Some(alpha),
                _ => None,
            })
            .collect();
        assert_eq!(
            alphas,
            [Some(0.0), Some(0.2), Some(0.5), Some(0.8), Some(1.0)]
        );
        for p in PRESETS {
            let spec = ExperimentSpec::preset(p).unwrap();
            assert!(spec.validate().is_ok());
            assert_eq!(spec.row_labels().len(), spec.variants.len());
        }
        assert!(ExperimentSpec::preset("table9").is_err());
    }

    #[test]
    fn spec_toml_roundtrip_and_defaults() {
        let spec = ExperimentSpec::preset("table3c").unwrap();
        let back = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
        let minimal = ExperimentSpec::from_toml(
            "version = 1\nvariants = [\"cab:0.5\"]\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(minimal.seeds, [1, 2, 3]);
        assert_eq!(minimal.train.epochs, 3);
        assert_eq!(minimal.train.batch_size, 16);
    }

    #[test]
    fn spec_errors_name_the_problem() {
        let err = ExperimentSpec::from_toml("version = 1\nvariants = [\"cab:2\"]\n").unwrap_err();
        assert!(err.to_string().contains("cab:2"), "{err}");
        let err = ExperimentSpec::from_toml("version = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "version"));
        let err = ExperimentSpec::from_toml("version = 1\nseeds = []\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "seeds"));
        let err =
            ExperimentSpec::from_toml("version = 1\nvariants = [\"specific\", \"specific\"]\n")
                .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "variants"));
        assert!(ExperimentSpec::from_toml("version = 1\nbogus = 3\n").is_err());
    }

    #[test]
    fn variant_dirs_are_path_safe() {
        for tok in ["specific", "cab:0.5", "cluster:10:scale", "merge:r/c"] {
            let d = variant_dir(&tok.parse().unwrap());
            assert!(!d.contains('/') && !d.contains(':'), "{d}");
        }
    }

    #[test]
    fn stat_examples() {
        assert_eq!(Stat::of(&[]), None);
        assert_eq!(
            Stat::of(&[2.0]),
            Some(Stat {
                mean: 2.0,
                std: 0.0
            })
        );
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}
