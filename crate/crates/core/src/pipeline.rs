//! End-to-end orchestration: cluster -> generate -> train (CRNN, baseline)
//! -> evaluate, driven by a flat `key = value` config.
//!
//! Every stage reads its inputs from and writes its outputs to `out_dir`, so
//! stages can be run one at a time. Expensive stages write a stamp holding
//! the config keys they depend on and are skipped when the stamp matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{read_iir, split_iir_features, write_iir, BaselineDetector, IirOrders, SvmConfig};
use crate::clustering::{build_category_table, kmeans_best_of, sweep_criteria_with, CategoryTable, KMeansOptions};
use crate::dataset::{AirRecord, DatasetManifest, Split, MANIFEST_FILE};
use crate::detector::{split_features, train, ConvBlock, CrnnConfig, CrnnDetector, TrainReport};
use crate::error::{Error, Result};
use crate::eval::{score, MetricsTable, SplitRatios};
use crate::features::{FeatureConfig, Window};
use crate::material_db::load_materials;
use crate::par::{try_map_range, Exec};
use crate::room_sim::{generate_dataset_with, GenerateOptions, GeometryOptions, SimConfig};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Cluster,
    Generate,
    TrainCrnn,
    TrainBaseline,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Cluster, Stage::Generate, Stage::TrainCrnn, Stage::TrainBaseline, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cluster => "cluster",
            Stage::Generate => "generate",
            Stage::TrainCrnn => "train-crnn",
            Stage::TrainBaseline => "train-baseline",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

/// Every tunable of the pipeline. Unset keys keep these defaults, and the
/// run record lists all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub materials: PathBuf,
    pub out_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub parallel: bool,

    pub seed: u64,
    pub seed_cluster: Option<u64>,
    pub seed_generate: Option<u64>,
    pub seed_crnn: Option<u64>,
    pub seed_svm: Option<u64>,

    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,

    pub n_rooms: usize,
    pub sources_per_room: usize,
    pub receivers_per_room: usize,
    pub sim: SimConfig,
    pub geometry: GeometryOptions,
    pub ratios: SplitRatios,

    pub features: FeatureConfig,
    pub crnn: CrnnConfig,

    pub iir_orders: IirOrders,
    pub svm: SvmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            materials: PathBuf::from("materials.txt"),
            out_dir: PathBuf::from("run"),
            stages: Stage::ALL.to_vec(),
            parallel: true,
            seed: 0,
            seed_cluster: None,
            seed_generate: None,
            seed_crnn: None,
            seed_svm: None,
            k: 10,
            k_min: 2,
            k_max: 20,
            restarts: 10,
            n_rooms: 141,
            sources_per_room: 10,
            receivers_per_room: 5,
            sim: SimConfig::default(),
            geometry: GeometryOptions::default(),
            ratios: SplitRatios::default(),
            features: FeatureConfig::default(),
            crnn: CrnnConfig::default(),
            iir_orders: IirOrders::default(),
            svm: SvmConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_vec3(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = parse_list(key, v)?;
    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected three comma-separated numbers")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_seed(v: Option<u64>) -> String {
    v.map_or_else(|| "auto".to_string(), |s| s.to_string())
}

fn parse_opt_seed(key: &str, v: &str) -> Result<Option<u64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl PipelineConfig {
    /// Parse `key = value` lines (`#` starts a comment). Relative paths are
    /// resolved against `base_dir`. Unknown keys are rejected.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: key '{k}' repeated", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.materials.is_relative() {
            self.materials = base.join(&self.materials);
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "materials" => self.materials = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "stages" => self.stages = v.split(',').map(|s| Stage::parse(s.trim())).collect::<Result<_>>()?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seed_cluster" => self.seed_cluster = parse_opt_seed(key, v)?,
            "seed_generate" => self.seed_generate = parse_opt_seed(key, v)?,
            "seed_crnn" => self.seed_crnn = parse_opt_seed(key, v)?,
            "seed_svm" => self.seed_svm = parse_opt_seed(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "k_min" => self.k_min = parse_num(key, v)?,
            "k_max" => self.k_max = parse_num(key, v)?,
            "restarts" => self.restarts = parse_num(key, v)?,
            "n_rooms" => self.n_rooms = parse_num(key, v)?,
            "sources_per_room" => self.sources_per_room = parse_num(key, v)?,
            "receivers_per_room" => self.receivers_per_room = parse_num(key, v)?,
            "sample_rate" => self.sim.sample_rate = parse_num(key, v)?,
            "duration" => self.sim.duration = parse_num(key, v)?,
            "speed_of_sound" => self.sim.speed_of_sound = parse_num(key, v)?,
            "max_reflection_order" => {
                self.sim.max_reflection_order = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "frac_delay_halfwidth" => self.sim.frac_delay_halfwidth = parse_num(key, v)?,
            "room_min" => self.geometry.bounds.min = parse_vec3(key, v)?,
            "room_max" => self.geometry.bounds.max = parse_vec3(key, v)?,
            "wall_margin" => self.geometry.wall_margin = parse_num(key, v)?,
            "min_src_rcv_dist" => self.geometry.min_src_rcv_dist = parse_num(key, v)?,
            "split_train" => self.ratios.train = parse_num(key, v)?,
            "split_val" => self.ratios.val = parse_num(key, v)?,
            "split_test" => self.ratios.test = parse_num(key, v)?,
            "frame_len_s" => self.features.frame_len_s = parse_num(key, v)?,
            "hop_s" => self.features.hop_s = parse_num(key, v)?,
            "n_fft" => self.features.n_fft = parse_num(key, v)?,
            "window" => {
                self.features.window = Window::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown window '{v}'")))?
            }
            "conv_filters" => {
                let filters: Vec<usize> = parse_list(key, v)?;
                let (kernel, pool) = self.crnn.conv_blocks.first().map_or((3, 2), |b| (b.kernel, b.pool));
                self.crnn.conv_blocks = filters.into_iter().map(|filters| ConvBlock { filters, kernel, pool }).collect();
            }
            "conv_kernel" => {
                let kernel = parse_num(key, v)?;
                self.crnn.conv_blocks.iter_mut().for_each(|b| b.kernel = kernel);
            }
            "conv_pool" => {
                let pool = parse_num(key, v)?;
                self.crnn.conv_blocks.iter_mut().for_each(|b| b.pool = pool);
            }
            "gru_hidden" => self.crnn.gru_hidden = parse_num(key, v)?,
            "lr" => self.crnn.lr = parse_num(key, v)?,
            "batch_size" => self.crnn.batch_size = parse_num(key, v)?,
            "max_epochs" => self.crnn.max_epochs = parse_num(key, v)?,
            "patience_train" => self.crnn.patience_train = parse_num(key, v)?,
            "patience_val" => self.crnn.patience_val = parse_num(key, v)?,
            "threshold" => self.crnn.thresholds = parse_list(key, v)?,
            "iir_orders" => self.iir_orders = IirOrders::parse(v)?,
            "svm_lambda" => self.svm.lambda = parse_num(key, v)?,
            "svm_epochs" => self.svm.epochs = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every effective setting, as it would be written in a config file.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let b = self.crnn.conv_blocks.first().copied().unwrap_or(ConvBlock { filters: 0, kernel: 3, pool: 2 });
        let entries: Vec<(&str, String)> = vec![
            ("materials", self.materials.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("stages", join(self.stages.iter().map(|s| s.name()))),
            ("parallel", self.parallel.to_string()),
            ("seed", self.seed.to_string()),
            ("seed_cluster", opt_seed(self.seed_cluster)),
            ("seed_generate", opt_seed(self.seed_generate)),
            ("seed_crnn", opt_seed(self.seed_crnn)),
            ("seed_svm", opt_seed(self.seed_svm)),
            ("k", self.k.to_string()),
            ("k_min", self.k_min.to_string()),
            ("k_max", self.k_max.to_string()),
            ("restarts", self.restarts.to_string()),
            ("n_rooms", self.n_rooms.to_string()),
            ("sources_per_room", self.sources_per_room.to_string()),
            ("receivers_per_room", self.receivers_per_room.to_string()),
            ("sample_rate", self.sim.sample_rate.to_string()),
            ("duration", self.sim.duration.to_string()),
            ("speed_of_sound", self.sim.speed_of_sound.to_string()),
            ("max_reflection_order", self.sim.max_reflection_order.map_or_else(|| "auto".into(), |o| o.to_string())),
            ("frac_delay_halfwidth", self.sim.frac_delay_halfwidth.to_string()),
            ("room_min", join(self.geometry.bounds.min)),
            ("room_max", join(self.geometry.bounds.max)),
            ("wall_margin", self.geometry.wall_margin.to_string()),
            ("min_src_rcv_dist", self.geometry.min_src_rcv_dist.to_string()),
            ("split_train", self.ratios.train.to_string()),
            ("split_val", self.ratios.val.to_string()),
            ("split_test", self.ratios.test.to_string()),
            ("frame_len_s", self.features.frame_len_s.to_string()),
            ("hop_s", self.features.hop_s.to_string()),
            ("n_fft", self.features.n_fft.to_string()),
            ("window", self.features.window.name().to_string()),
            ("conv_filters", join(self.crnn.conv_blocks.iter().map(|b| b.filters))),
            ("conv_kernel", b.kernel.to_string()),
            ("conv_pool", b.pool.to_string()),
            ("gru_hidden", self.crnn.gru_hidden.to_string()),
            ("lr", self.crnn.lr.to_string()),
            ("batch_size", self.crnn.batch_size.to_string()),
            ("max_epochs", self.crnn.max_epochs.to_string()),
            ("patience_train", self.crnn.patience_train.to_string()),
            ("patience_val", self.crnn.patience_val.to_string()),
            ("threshold", join(&self.crnn.thresholds)),
            ("iir_orders", format!("{},{}", self.iir_orders.num_coeffs, self.iir_orders.den_coeffs)),
            ("svm_lambda", self.svm.lambda.to_string()),
            ("svm_epochs", self.svm.epochs.to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k_min < 2 || self.k_min > self.k_max || self.restarts == 0 {
            return Err(Error::Config("need k >= 1, 2 <= k_min <= k_max and restarts >= 1".into()));
        }
        if self.n_rooms < 3 || self.sources_per_room == 0 || self.receivers_per_room == 0 {
            return Err(Error::Config("need at least 3 rooms and one source and receiver per room".into()));
        }
        let r = [self.ratios.train, self.ratios.val, self.ratios.test];
        if r.iter().any(|&v| !(v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("split fractions must be positive and sum to 1".into()));
        }
        self.crnn.validate()?;
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn cluster_seed(&self) -> u64 {
        self.seed_cluster.unwrap_or_else(|| derive_seed(self.seed, &[1]))
    }
    pub fn generate_seed(&self) -> u64 {
        self.seed_generate.unwrap_or_else(|| derive_seed(self.seed, &[2]))
    }
    pub fn crnn_seed(&self) -> u64 {
        self.seed_crnn.unwrap_or_else(|| derive_seed(self.seed, &[3]))
    }
    pub fn svm_seed(&self) -> u64 {
        self.seed_svm.unwrap_or_else(|| derive_seed(self.seed, &[4]))
    }

    /// Settings with every `auto` seed replaced by its derived value.
    pub fn effective(&self) -> Self {
        Self {
            seed_cluster: Some(self.cluster_seed()),
            seed_generate: Some(self.generate_seed()),
            seed_crnn: Some(self.crnn_seed()),
            seed_svm: Some(self.svm_seed()),
            ..self.clone()
        }
    }

    fn stamp(&self, keys: &[&str]) -> String {
        let kv = self.effective().to_kv();
        keys.iter().map(|k| format!("{k} = {}\n", kv[*k])).collect()
    }
}

// ---------------------------------------------------------------- layout

pub const TABLE_FILE: &str = "category_table.txt";
pub const SWEEP_FILE: &str = "criteria_sweep.csv";
pub const DATASET_DIR: &str = "dataset";
pub const CRNN_FILE: &str = "crnn.ckpt";
pub const CRNN_REPORT_FILE: &str = "crnn_report.json";
pub const BASELINE_DIR: &str = "baseline";
pub const IIR_DIR: &str = "iir";
pub const RECORD_FILE: &str = "run_record.json";

fn metrics_file(model: &str) -> String {
    format!("metrics_{model}.csv")
}

fn predictions_file(model: &str) -> String {
    format!("predictions_{model}.jsonl")
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub air_path: String,
    /// Detector posteriors; empty for detectors without them.
    #[serde(default)]
    pub posteriors: Vec<f64>,
    pub present: Vec<u8>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    std::fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Score predictions against the manifest labels of the AIRs they name.
pub fn evaluate_predictions(manifest: &DatasetManifest, preds: &[Prediction]) -> Result<MetricsTable> {
    let by_path: BTreeMap<&str, &AirRecord> = manifest.records.iter().map(|r| (r.air_path.as_str(), r)).collect();
    let labels = preds
        .iter()
        .map(|p| {
            by_path
                .get(p.air_path.as_str())
                .map(|r| r.label_vector.clone())
                .ok_or_else(|| Error::Config(format!("prediction for unknown AIR '{}'", p.air_path)))
        })
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<Vec<u8>> = preds.iter().map(|p| p.present.clone()).collect();
    score(&present, &labels)
}

/// CRNN predictions for one split.
pub fn predict_crnn(manifest: &DatasetManifest, det: &CrnnDetector, split: Split, exec: Exec) -> Result<Vec<Prediction>> {
    let (features, _) = split_features(manifest, split, &det.features, exec)?;
    let posteriors = det.posteriors_batch(exec, &features)?;
    Ok(manifest
        .split(split)
        .zip(posteriors)
        .map(|(r, p)| Prediction { air_path: r.air_path.clone(), present: det.present(&p), posteriors: p })
        .collect())
}

/// Baseline predictions for one split; IIR fits are reused from (and
/// written to) `iir_cache` when given.
pub fn predict_baseline(
    manifest: &DatasetManifest,
    det: &BaselineDetector,
    split: Split,
    iir_cache: Option<&Path>,
    exec: Exec,
) -> Result<Vec<Prediction>> {
    let (features, _) = match iir_cache {
        Some(dir) => cached_iir_features(manifest, split, det.orders, dir, exec)?,
        None => split_iir_features(manifest, split, det.orders, exec)?,
    };
    manifest
        .split(split)
        .zip(&features)
        .map(|(r, f)| Ok(Prediction { air_path: r.air_path.clone(), posteriors: Vec::new(), present: det.predict(f)? }))
        .collect()
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub f1: Vec<f64>,
}

impl From<&MetricsTable> for ModelMetrics {
    fn from(m: &MetricsTable) -> Self {
        Self {
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
            f1: m.categories.iter().map(|c| c.f1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    pub cached: bool,
    pub seconds: f64,
}

/// Persisted as `run_record.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageLog>,
    pub metrics: BTreeMap<String, ModelMetrics>,
    pub crnn_training: Option<TrainReport>,
}

/// `git describe` of the working tree when available, else the crate version.
pub fn version_string() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("{} ({})", env!("CARGO_PKG_VERSION"), s.trim()))
        .unwrap_or_else(|| env!("CARGO_PKG_VERSION").to_string())
}

fn cached(dir: &Path, name: &str, stamp: &str, outputs: &[PathBuf]) -> bool {
    outputs.iter().all(|p| p.exists()) && std::fs::read_to_string(dir.join(format!(".{name}.stamp"))).is_ok_and(|s| s == stamp)
}

fn write_stamp(dir: &Path, name: &str, stamp: &str) -> Result<()> {
    std::fs::write(dir.join(format!(".{name}.stamp")), stamp)?;
    Ok(())
}

fn need(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is missing; run the stage that produces it before {}", path.display(), stage.name())))
    }
}

const CLUSTER_KEYS: &[&str] = &["materials", "seed_cluster", "k", "k_min", "k_max", "restarts"];
const GENERATE_KEYS: &[&str] = &[
    "materials",
    "seed_cluster",
    "k",
    "restarts",
    "seed_generate",
    "n_rooms",
    "sources_per_room",
    "receivers_per_room",
    "sample_rate",
    "duration",
    "speed_of_sound",
    "max_reflection_order",
    "frac_delay_halfwidth",
    "room_min",
    "room_max",
    "wall_margin",
    "min_src_rcv_dist",
    "split_train",
    "split_val",
    "split_test",
];
const CRNN_KEYS: &[&str] = &[
    "frame_len_s",
    "hop_s",
    "n_fft",
    "window",
    "seed_crnn",
    "conv_filters",
    "conv_kernel",
    "conv_pool",
    "gru_hidden",
    "lr",
    "batch_size",
    "max_epochs",
    "patience_train",
    "patience_val",
    "threshold",
];
const BASELINE_KEYS: &[&str] = &["iir_orders", "seed_svm", "svm_lambda", "svm_epochs"];

fn stamp_with(cfg: &PipelineConfig, own: &[&str], upstream: &[&[&str]]) -> String {
    let mut keys: Vec<&str> = upstream.iter().flat_map(|k| k.iter().copied()).chain(own.iter().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    cfg.stamp(&keys)
}

/// Run the configured stages in order and write the run record.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    let exec = cfg.exec();
    let mut record = RunRecord {
        version: version_string(),
        config: cfg.effective().to_kv(),
        stages: Vec::new(),
        metrics: BTreeMap::new(),
        crnn_training: None,
    };
    let mut stages = cfg.stages.clone();
    stages.sort_unstable();
    stages.dedup();
    for stage in stages {
        let started = Instant::now();
        log::info!("stage {} started", stage.name());
        let was_cached = run_stage(cfg, stage, exec, &mut record).map_err(|e| Error::stage(stage.name(), e))?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!("stage {} finished in {seconds:.1} s{}", stage.name(), if was_cached { " (cached)" } else { "" });
        record.stages.push(StageLog { stage, cached: was_cached, seconds });
    }
    std::fs::write(out.join(RECORD_FILE), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

fn run_stage(cfg: &PipelineConfig, stage: Stage, exec: Exec, record: &mut RunRecord) -> Result<bool> {
    let out = cfg.out_dir.as_path();
    let table_path = out.join(TABLE_FILE);
    let dataset = out.join(DATASET_DIR);
    let ckpt = out.join(CRNN_FILE);
    let baseline_dir = out.join(BASELINE_DIR);
    match stage {
        Stage::Cluster => {
            let stamp = stamp_with(cfg, CLUSTER_KEYS, &[]);
            if cached(out, "cluster", &stamp, &[table_path.clone(), out.join(SWEEP_FILE)]) {
                return Ok(true);
            }
            let db = load_materials(&cfg.materials)?;
            let points = db.spectra_matrix();
            let k_max = cfg.k_max.min(points.len().saturating_sub(1));
            if k_max >= cfg.k_min {
                let sweep = sweep_criteria_with(exec, &points, cfg.k_min, k_max, cfg.restarts, cfg.cluster_seed())?;
                std::fs::write(out.join(SWEEP_FILE), sweep.to_csv())?;
            } else {
                log::warn!("too few materials for a criterion sweep");
                std::fs::write(out.join(SWEEP_FILE), "k,davies_bouldin,vrc,inertia\n")?;
            }
            let clustering = kmeans_best_of(exec, &points, cfg.k, cfg.restarts, cfg.cluster_seed(), KMeansOptions::default())?;
            build_category_table(&db, &clustering)?.save(&table_path)?;
            write_stamp(out, "cluster", &stamp)?;
        }
        Stage::Generate => {
            let stamp = stamp_with(cfg, GENERATE_KEYS, &[]);
            if cached(out, "generate", &stamp, &[dataset.join(MANIFEST_FILE)]) {
                return Ok(true);
            }
            need(&table_path, stage)?;
            let db = load_materials(&cfg.materials)?;
            let table = CategoryTable::load(&table_path)?;
            if dataset.exists() {
                std::fs::remove_dir_all(&dataset)?;
            }
            let opts = GenerateOptions {
                n_rooms: cfg.n_rooms,
                sources_per_room: cfg.sources_per_room,
                receivers_per_room: cfg.receivers_per_room,
                geometry: cfg.geometry,
                ratios: cfg.ratios,
                seed: cfg.generate_seed(),
            };
            let sim = SimConfig { seed: cfg.generate_seed(), ..cfg.sim.clone() };
            let manifest = generate_dataset_with(exec, &opts, &db, &table, &sim, &dataset)?;
            log::info!("generated {} AIRs in {} rooms", manifest.records.len(), cfg.n_rooms);
            write_stamp(out, "generate", &stamp)?;
        }
        Stage::TrainCrnn => {
            let stamp = stamp_with(cfg, CRNN_KEYS, &[GENERATE_KEYS]);
            if cached(out, "train-crnn", &stamp, &[ckpt.clone(), out.join(CRNN_REPORT_FILE)]) {
                record.crnn_training = serde_json::from_str(&std::fs::read_to_string(out.join(CRNN_REPORT_FILE))?).ok();
                return Ok(true);
            }
            need(&dataset.join(MANIFEST_FILE), stage)?;
            let manifest = DatasetManifest::load(&dataset)?;
            let table = CategoryTable::load(&table_path)?;
            let crnn = CrnnConfig { seed: cfg.crnn_seed(), ..cfg.crnn.clone() };
            let (det, report) = train(&manifest, &table, &crnn, &cfg.features, exec)?;
            det.save(&ckpt)?;
            std::fs::write(out.join(CRNN_REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
            record.crnn_training = Some(report);
            write_stamp(out, "train-crnn", &stamp)?;
        }
        Stage::TrainBaseline => {
            let stamp = stamp_with(cfg, BASELINE_KEYS, &[GENERATE_KEYS]);
            if cached(out, "train-baseline", &stamp, &[baseline_dir.join("orders.txt")]) {
                return Ok(true);
            }
            need(&dataset.join(MANIFEST_FILE), stage)?;
            let manifest = DatasetManifest::load(&dataset)?;
            let (features, labels) = cached_iir_features(&manifest, Split::Train, cfg.iir_orders, &out.join(IIR_DIR), exec)?;
            let svm = SvmConfig { seed: cfg.svm_seed(), ..cfg.svm };
            BaselineDetector::train(&features, &labels, cfg.iir_orders, &svm, exec)?.save(&baseline_dir)?;
            write_stamp(out, "train-baseline", &stamp)?;
        }
        Stage::Evaluate => {
            need(&dataset.join(MANIFEST_FILE), stage)?;
            let manifest = DatasetManifest::load(&dataset)?;
            let mut tables = Vec::new();
            if ckpt.exists() {
                let det = CrnnDetector::load(&ckpt)?;
                tables.push(("crnn", predict_crnn(&manifest, &det, Split::Test, exec)?));
            }
            if baseline_dir.join("orders.txt").exists() {
                let det = BaselineDetector::load(&baseline_dir)?;
                tables.push(("baseline", predict_baseline(&manifest, &det, Split::Test, Some(&out.join(IIR_DIR)), exec)?));
            }
            if tables.is_empty() {
                return Err(Error::Config("no trained model to evaluate".into()));
            }
            let mut report = String::new();
            for (name, preds) in tables {
                let metrics = evaluate_predictions(&manifest, &preds)?;
                write_predictions(out.join(predictions_file(name)), &preds)?;
                std::fs::write(out.join(metrics_file(name)), metrics.to_csv())?;
                let title = if name == "crnn" { "CRNN" } else { "SVM-IIR baseline" };
                let _ = writeln!(report, "{}", metrics.to_table(title));
                log::info!("{name}: macro F1 {:.4}", metrics.macro_f1);
                record.metrics.insert(name.to_string(), ModelMetrics::from(&metrics));
            }
            std::fs::write(out.join("metrics_table.txt"), report)?;
        }
    }
    Ok(false)
}

/// IIR features of a split, reusing per-AIR `.iir` files in `cache_dir`
/// written for the same orders.
pub fn cached_iir_features(
    manifest: &DatasetManifest,
    split: Split,
    orders: IirOrders,
    cache_dir: &Path,
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let sub = cache_dir.join(format!("{}_{}", orders.num_coeffs, orders.den_coeffs));
    std::fs::create_dir_all(&sub)?;
    let records: Vec<&AirRecord> = manifest.split(split).collect();
    let feats = try_map_range(exec, records.len(), |i| {
        let r = records[i];
        let path = sub.join(format!("room{:05}_s{:02}_r{:02}.iir", r.room_id, r.source_id, r.receiver_id));
        let model = match read_iir(&path) {
            Ok(m) if m.b.len() == orders.num_coeffs && m.a.len() + 1 == orders.den_coeffs => m,
            _ => {
                let m = orders.fit(&manifest.load_air(r)?.taps)?;
                write_iir(&path, &m)?;
                m
            }
        };
        if model.regularized {
            log::debug!("{}: Prony normal equations needed the ridge fallback", r.air_path);
        }
        model.feature_vector(orders.feature_dim())
    })?;
    Ok((feats, records.iter().map(|r| r.label_vector.clone()).collect()))
}
