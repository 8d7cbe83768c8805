//! Experiment configuration and drivers: single runs, low-rank size sweeps
//! and multi-seed comparisons.
//!
//! A configuration is one TOML document:
//!
//! ```toml
//! output_dir = "out"
//!
//! [data]                  # exactly one of `synthetic` / `csv`
//! train_fraction = 0.8
//! split_seed = 42
//! [data.synthetic]        # SyntheticSpec fields, all optional
//! samples_per_scenario = 4000
//! # [data.csv]
//! # path = "data.csv"
//! # num_scenarios = 4
//! # fields = [{ name = "aware_0", vocab_size = 32, kind = "aware" }, ...]
//!
//! [model]                 # ModelConfig; dwm sizes under [model.dwm]
//! [train]                 # TrainConfig
//!
//! [sweep]                 # optional
//! variants = ["r"]
//! d_k = [1, 2, 4]
//! row_fractions = [1.0, 0.5, 0.25, 0.125]
//! col_fractions = [1.0, 0.5, 0.25, 0.125]
//! seeds = [1]
//!
//! [compare]               # optional
//! seeds = [1, 2, 3]
//! [[compare.settings]]
//! name = "DNN"
//! weighting = "ones"
//! ```
//!
//! `key.path=value` overrides are applied to the parsed document before it
//! is interpreted; values are read as TOML, falling back to a bare string.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::data::{self, load_csv, Dataset, Field, Schema, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{paired_t_test, TTest};
use crate::model::{checkpoint, low_rank_size_fraction, DwmVariant, LowRank, Model, ModelConfig, Weighting};
use crate::train::{fit, RunReport, TrainConfig};

/// Allowed factor-size fractions `d_r / d_m` and `d_c / d_n`.
pub const SWEEP_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub num_scenarios: usize,
    /// Non-scenario fields in column order.
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub csv: Option<CsvSource>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            csv: None,
            train_fraction: 0.8,
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub variants: Vec<DwmVariant>,
    pub d_k: Vec<usize>,
    pub row_fractions: Vec<f64>,
    pub col_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            variants: vec![DwmVariant::R],
            d_k: vec![1, 2, 4],
            row_fractions: SWEEP_FRACTIONS.to_vec(),
            col_fractions: SWEEP_FRACTIONS.to_vec(),
            seeds: vec![1],
        }
    }
}

/// One model setting in a comparison. Unset fields inherit from the base
/// `[model]` / `[train]` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSetting {
    pub name: String,
    #[serde(default)]
    pub weighting: Option<Weighting>,
    #[serde(default)]
    pub variant: Option<DwmVariant>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub settings: Vec<CompareSetting>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let setting = |name: &str, weighting, lambda| CompareSetting {
            name: name.into(),
            weighting: Some(weighting),
            variant: None,
            lambda: Some(lambda),
        };
        Self {
            settings: vec![
                setting("DNN", Weighting::Ones, 0.0),
                setting("DPG", Weighting::Dwm, 0.0),
                setting("MI-DPG", Weighting::Dwm, 1.0),
            ],
            seeds: (1..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: Option<SweepConfig>,
    pub compare: Option<CompareConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            data: DataConfig {
                synthetic: Some(SyntheticSpec::default()),
                ..DataConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
            compare: None,
        }
    }
}

fn fraction_divisor(what: &str, f: f64) -> Result<usize> {
    SWEEP_FRACTIONS
        .iter()
        .position(|&g| g == f)
        .map(|i| 1 << i)
        .ok_or_else(|| Error::Config(format!("{what} {f} is not one of 1, 0.5, 0.25, 0.125")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("[data] needs exactly one of `synthetic` or `csv`".into())),
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction {} must be in (0, 1)",
                self.data.train_fraction
            )));
        }
        self.train.validate()?;
        if let Some(s) = &self.sweep {
            if s.variants.is_empty()
                || s.d_k.is_empty()
                || s.row_fractions.is_empty()
                || s.col_fractions.is_empty()
                || s.seeds.is_empty()
            {
                return Err(Error::Config("every [sweep] list must be non-empty".into()));
            }
            for &f in &s.row_fractions {
                fraction_divisor("sweep.row_fractions entry", f)?;
            }
            for &f in &s.col_fractions {
                fraction_divisor("sweep.col_fractions entry", f)?;
            }
            if s.d_k.contains(&0) {
                return Err(Error::Config("sweep.d_k entries must be positive".into()));
            }
        }
        if let Some(c) = &self.compare {
            if c.settings.len() < 2 || c.seeds.len() < 2 {
                return Err(Error::Config("[compare] needs at least 2 settings and 2 seeds".into()));
            }
            for s in &c.settings {
                if s.lambda.is_some_and(|l| !(l >= 0.0)) {
                    return Err(Error::Config(format!("compare setting `{}`: lambda must be >= 0", s.name)));
                }
            }
        }
        Ok(())
    }

    /// Parses `text` and applies `overrides` (`dotted.key=value`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative CSV paths resolve against the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(csv) = &mut cfg.data.csv {
            if csv.path.is_relative() {
                if let Some(dir) = path.parent() {
                    csv.path = dir.join(&csv.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn schema(&self) -> Result<Schema> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), _) => spec.schema(),
            (None, Some(csv)) => Schema::new(csv.num_scenarios, csv.fields.clone()),
            (None, None) => Err(Error::Config("no data source".into())),
        }
    }
}

/// Sets `key` (dot-separated) in `doc` to `raw` parsed as a TOML value.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The full dataset and its `(train, eval)` split.
pub struct PreparedData {
    pub full: Dataset,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn prepare_data(config: &DataConfig) -> Result<PreparedData> {
    let full = match (&config.synthetic, &config.csv) {
        (Some(spec), None) => data::generate_synthetic(spec)?.dataset,
        (None, Some(csv)) => {
            let schema = Schema::new(csv.num_scenarios, csv.fields.clone())?;
            load_csv(&csv.path, &schema, None)?
        }
        _ => return Err(Error::Config("[data] needs exactly one of `synthetic` or `csv`".into())),
    };
    let (train, eval) = data::split(&full, config.train_fraction, config.split_seed)?;
    Ok(PreparedData { full, train, eval })
}

/// Builds and trains one model; `train.seed` seeds both initialisation and
/// batching.
pub fn train_model(model: &ModelConfig, train: &TrainConfig, data: &PreparedData) -> Result<(Model, RunReport)> {
    let mut m = Model::new(model.clone(), &data.train.schema, train.seed)?;
    let report = fit(&mut m, &data.train, &data.eval, train)?;
    Ok((m, report))
}

/// Trains according to `config`, writes `report.json`, `metrics.csv` and
/// `model.ckpt` into `out_dir`, and returns the report.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let data = prepare_data(&config.data)?;
    let (model, mut report) = train_model(&config.model, &config.train, &data)?;
    report.config = serde_json::to_value(config).expect("config serialises");
    if model.is_modulated() {
        report.similarity = Some(analysis::scenario_similarity(&model, &data.eval)?);
    }
    create_dir(out_dir)?;
    write_report(&report, &out_dir.join("report.json"))?;
    analysis::write_text(&out_dir.join("metrics.csv"), &report.metric_rows())?;
    checkpoint::save(&model, &data.full.vocab, &out_dir.join("model.ckpt"))?;
    Ok(report)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    analysis::write_text(path, &(json + "\n"))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> Result<T> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(Error::Degenerate(format!("run panicked: {msg}")))
        }
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub variant: DwmVariant,
    pub d_k: usize,
    pub row_fraction: f64,
    pub col_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub size_fraction: f64,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub param_count: Option<usize>,
    pub error: Option<String>,
}

/// Cartesian product in `variant, d_k, row, col, seed` order.
pub fn sweep_cells(sweep: &SweepConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &variant in &sweep.variants {
        for &d_k in &sweep.d_k {
            for &row_fraction in &sweep.row_fractions {
                for &col_fraction in &sweep.col_fractions {
                    for &seed in &sweep.seeds {
                        cells.push(SweepCell {
                            variant,
                            d_k,
                            row_fraction,
                            col_fraction,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn cell_model(base: &ModelConfig, cell: &SweepCell) -> Result<ModelConfig> {
    let mut m = base.clone();
    m.weighting = Weighting::Dwm;
    m.dwm.variant = cell.variant;
    m.dwm.d_k = cell.d_k;
    m.dwm.row_divisor = fraction_divisor("row fraction", cell.row_fraction)?;
    m.dwm.col_divisor = fraction_divisor("col fraction", cell.col_fraction)?;
    m.dwm.layers = None;
    Ok(m)
}

fn run_cell(config: &ExperimentConfig, data: &PreparedData, cell: &SweepCell) -> SweepRow {
    let nominal = cell.row_fraction * cell.col_fraction * cell.d_k as f64;
    let mut row = SweepRow {
        cell: *cell,
        size_fraction: nominal,
        auc: None,
        logloss: None,
        param_count: None,
        error: None,
    };
    let outcome = guarded(|| {
        let model_cfg = cell_model(&config.model, cell)?;
        let model = Model::new(model_cfg.clone(), &data.train.schema, cell.seed)?;
        let (d_m, d_n) = model.layer_shapes()[0];
        let size = model.layer_sizes()[0];
        let fraction = match cell.variant {
            DwmVariant::Non => low_rank_size_fraction(&LowRank::full(d_m, d_n), d_m, d_n)?,
            _ => low_rank_size_fraction(&size, d_m, d_n)?,
        };
        let train = TrainConfig {
            seed: cell.seed,
            ..config.train.clone()
        };
        let (model, report) = train_model(&model_cfg, &train, data)?;
        Ok((fraction, report, model.count_parameters().total()))
    });
    match outcome {
        Ok((fraction, report, params)) => {
            row.size_fraction = fraction;
            row.auc = Some(report.final_auc);
            row.logloss = Some(report.final_logloss);
            row.param_count = Some(params);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every sweep cell (up to `jobs` at once). Failed cells keep their row
/// with the error message. Rows are sorted by variant, then size fraction.
pub fn sweep(config: &ExperimentConfig, data: &PreparedData, jobs: usize) -> Result<Vec<SweepRow>> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let cells = sweep_cells(sweep);
    let mut rows: Vec<SweepRow> = in_pool(jobs, || cells.par_iter().map(|c| run_cell(config, data, c)).collect())?;
    rows.sort_by(|a, b| {
        (a.cell.variant as u8)
            .cmp(&(b.cell.variant as u8))
            .then(a.size_fraction.total_cmp(&b.size_fraction))
    });
    Ok(rows)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,d_k,row_fraction,col_fraction,seed,size_fraction,auc,logloss,param_count,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.variant,
            r.cell.d_k,
            r.cell.row_fraction,
            r.cell.col_fraction,
            r.cell.seed,
            r.size_fraction,
            opt(&r.auc),
            opt(&r.logloss),
            opt(&r.param_count),
            csv_field(r.error.as_deref().unwrap_or("")),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRun {
    pub setting: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub error: Option<String>,
    /// Mean off-diagonal scenario similarity of the compact weighting
    /// matrices on the eval split, for modulated models.
    pub similarity: Option<f64>,
    /// Silhouette of the PCA projection by scenario, for modulated models.
    pub silhouette: Option<f64>,
    /// Training time. Left out of `runs_csv` so the file is reproducible.
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingSummary {
    pub setting: String,
    pub runs: usize,
    pub failures: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    /// `None` when the paired differences have zero variance or runs failed.
    pub test: Option<TTest>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<CompareRun>,
    pub summaries: Vec<SettingSummary>,
    pub tests: Vec<PairTest>,
}

fn setting_configs(base: &ExperimentConfig, s: &CompareSetting, seed: u64) -> (ModelConfig, TrainConfig) {
    let mut model = base.model.clone();
    if let Some(w) = s.weighting {
        model.weighting = w;
    }
    if let Some(v) = s.variant {
        model.dwm.variant = v;
    }
    let mut train = base.train.clone();
    train.seed = seed;
    if let Some(l) = s.lambda {
        train.lambda = l;
    }
    (model, train)
}

fn compare_one(config: &ExperimentConfig, data: &PreparedData, s: &CompareSetting, seed: u64) -> CompareRun {
    let (model_cfg, train_cfg) = setting_configs(config, s, seed);
    let started = std::time::Instant::now();
    let outcome = guarded(|| {
        let (model, report) = train_model(&model_cfg, &train_cfg, data)?;
        let (sim, sil) = if model.is_modulated() {
            let sim = analysis::scenario_similarity(&model, &data.eval)?;
            let proj = analysis::export_projection(&model, &data.eval)?;
            (
                Some(analysis::mean_off_diagonal(&sim)),
                analysis::silhouette(&proj.coords, &proj.scenarios).ok(),
            )
        } else {
            (None, None)
        };
        Ok((report, sim, sil))
    });
    match outcome {
        Ok((report, similarity, silhouette)) => CompareRun {
            setting: s.name.clone(),
            seed,
            auc: Some(report.final_auc),
            logloss: Some(report.final_logloss),
            error: None,
            similarity,
            silhouette,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
        Err(e) => CompareRun {
            setting: s.name.clone(),
            seed,
            auc: None,
            logloss: None,
            error: Some(e.to_string()),
            similarity: None,
            silhouette: None,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every setting on every seed and summarises AUC and LogLoss,
/// with paired t-tests on per-seed AUC between every pair of settings.
pub fn compare(config: &ExperimentConfig, data: &PreparedData, jobs: usize) -> Result<Comparison> {
    let cmp = config
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [compare] section".into()))?;
    let jobs_list: Vec<(&CompareSetting, u64)> = cmp
        .settings
        .iter()
        .flat_map(|s| cmp.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs: Vec<CompareRun> = in_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(s, seed)| compare_one(config, data, s, seed))
            .collect()
    })?;
    Ok(summarise(&cmp.settings, runs))
}

pub fn summarise(settings: &[CompareSetting], runs: Vec<CompareRun>) -> Comparison {
    let of = |name: &str| -> Vec<&CompareRun> { runs.iter().filter(|r| r.setting == name).collect() };
    let summaries = settings
        .iter()
        .map(|s| {
            let rs = of(&s.name);
            let aucs: Vec<f64> = rs.iter().filter_map(|r| r.auc).collect();
            let lls: Vec<f64> = rs.iter().filter_map(|r| r.logloss).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (logloss_mean, logloss_std) = mean_std(&lls);
            SettingSummary {
                setting: s.name.clone(),
                runs: rs.len(),
                failures: rs.iter().filter(|r| r.error.is_some()).count(),
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
            }
        })
        .collect();
    let mut tests = Vec::new();
    for (i, a) in settings.iter().enumerate() {
        for b in &settings[i + 1..] {
            let (ra, rb) = (of(&a.name), of(&b.name));
            let paired: Option<(Vec<f64>, Vec<f64>)> = ra
                .iter()
                .zip(&rb)
                .map(|(x, y)| Some((x.auc?, y.auc?)))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.into_iter().unzip());
            let (test, note) = match paired {
                None => (None, Some("n/a (failed runs)".to_string())),
                Some((xa, xb)) => match paired_t_test(&xa, &xb) {
                    Ok(t) => (Some(t), None),
                    Err(Error::Degenerate(_)) => (None, Some("n/a (zero variance)".to_string())),
                    Err(e) => (None, Some(format!("n/a ({e})"))),
                },
            };
            tests.push(PairTest {
                a: a.name.clone(),
                b: b.name.clone(),
                test,
                note,
            });
        }
    }
    Comparison {
        runs,
        summaries,
        tests,
    }
}

impl Comparison {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("setting,runs,failures,auc_mean,auc_std,logloss_mean,logloss_std\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&s.setting),
                s.runs,
                s.failures,
                s.auc_mean,
                s.auc_std,
                s.logloss_mean,
                s.logloss_std
            ));
        }
        out
    }

    pub fn tests_csv(&self) -> String {
        let mut out = String::from("setting_a,setting_b,mean_auc_difference,t,df,p_value\n");
        for t in &self.tests {
            let (d, tt, df, p) = match (&t.test, &t.note) {
                (Some(x), _) => (
                    x.mean_difference.to_string(),
                    x.t.to_string(),
                    x.df.to_string(),
                    x.p.to_string(),
                ),
                (None, note) => {
                    let n = csv_field(note.as_deref().unwrap_or("n/a"));
                    (String::new(), String::new(), String::new(), n)
                }
            };
            out.push_str(&format!("{},{},{d},{tt},{df},{p}\n", csv_field(&t.a), csv_field(&t.b)));
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("setting,seed,auc,logloss,similarity,silhouette,error\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.setting),
                r.seed,
                opt(&r.auc),
                opt(&r.logloss),
                opt(&r.similarity),
                opt(&r.silhouette),
                csv_field(r.error.as_deref().unwrap_or(""))
            ));
        }
        out
    }

    pub fn summary(&self, name: &str) -> Option<&SettingSummary> {
        self.summaries.iter().find(|s| s.setting == name)
    }
}

/// Writes the similarity matrix and PCA projection of `model` on `dataset`
/// as `similarity.csv` and `projection.csv` in `out_dir`.
pub fn analyze(model: &Model, dataset: &Dataset, out_dir: &Path) -> Result<(Vec<Vec<f64>>, analysis::Projection)> {
    if model.schema() != &dataset.schema {
        return Err(Error::Config("dataset schema does not match the checkpoint".into()));
    }
    let sim = analysis::scenario_similarity(model, dataset)?;
    let proj = analysis::export_projection(model, dataset)?;
    create_dir(out_dir)?;
    analysis::write_text(&out_dir.join("similarity.csv"), &analysis::similarity_csv(&sim))?;
    analysis::write_text(&out_dir.join("projection.csv"), &analysis::projection_csv(&proj))?;
    Ok((sim, proj))
}
