use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use matdetect::baseline::{BaselineDetector, IirOrders, SvmConfig};
use matdetect::clustering::{build_category_table, kmeans_best_of, sweep_criteria_with, CategoryTable, KMeansOptions};
use matdetect::dataset::{read_wav, DatasetManifest, Split};
use matdetect::detector::{train, CrnnConfig, CrnnDetector};
use matdetect::material_db::load_materials;
use matdetect::pipeline::{
    cached_iir_features, evaluate_predictions, predict_baseline, predict_crnn, read_predictions, run_pipeline, write_predictions,
    PipelineConfig, SWEEP_FILE, TABLE_FILE,
};
use matdetect::room_sim::{generate_dataset_with, GenerateOptions, SimConfig};

/// Detect material categories in rooms from acoustic impulse responses.
#[derive(Parser)]
#[command(name = "matdetect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config; its values are the defaults for this command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cluster a material database into categories; writes the category table and criterion sweep.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        materials: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a labeled AIR dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        materials: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        rooms: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CRNN detector.
    TrainCrnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Prony-IIR + SVM baseline.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Numerator and denominator coefficient counts, e.g. `200,200`.
        #[arg(long)]
        orders: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against manifest labels; writes a metrics CSV.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one AIR (`--air`) or a whole split (`--manifest`).
    Predict {
        /// CRNN checkpoint.
        #[arg(long, conflicts_with = "baseline")]
        ckpt: Option<PathBuf>,
        /// Baseline model directory (split prediction only).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, requires = "table", conflicts_with = "manifest")]
        air: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Predictions file (JSON lines) for split prediction.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the stages listed in the config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL.into_iter().find(|sp| sp.name() == s).with_context(|| format!("unknown split '{s}'"))
}

fn check_theta(manifest: &DatasetManifest, table: &CategoryTable) -> Result<()> {
    if manifest.theta_tot() != table.theta_tot {
        bail!("manifest has {} categories but the table has {}", manifest.theta_tot(), table.theta_tot);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Cluster { common, materials, k, out } => {
            let mut cfg = common.load()?;
            if let Some(m) = materials {
                cfg.materials = m;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            let db = load_materials(&cfg.materials).with_context(|| format!("loading {}", cfg.materials.display()))?;
            std::fs::create_dir_all(&out)?;
            let points = db.spectra_matrix();
            let k_max = cfg.k_max.min(points.len().saturating_sub(1));
            let sweep = sweep_criteria_with(cfg.exec(), &points, cfg.k_min, k_max, cfg.restarts, cfg.cluster_seed())?;
            std::fs::write(out.join(SWEEP_FILE), sweep.to_csv())?;
            let clustering = kmeans_best_of(cfg.exec(), &points, cfg.k, cfg.restarts, cfg.cluster_seed(), KMeansOptions::default())?;
            let table = build_category_table(&db, &clustering)?;
            table.save(out.join(TABLE_FILE))?;
            println!("{} materials -> {} categories (inertia {:.6})", db.len(), table.theta_tot, clustering.inertia);
            println!("wrote {} and {}", out.join(TABLE_FILE).display(), out.join(SWEEP_FILE).display());
        }
        Command::Generate { common, materials, table, rooms, out } => {
            let mut cfg = common.load()?;
            if let Some(m) = materials {
                cfg.materials = m;
            }
            if let Some(r) = rooms {
                cfg.n_rooms = r;
            }
            let db = load_materials(&cfg.materials)?;
            let table = CategoryTable::load(&table)?;
            let opts = GenerateOptions {
                n_rooms: cfg.n_rooms,
                sources_per_room: cfg.sources_per_room,
                receivers_per_room: cfg.receivers_per_room,
                geometry: cfg.geometry,
                ratios: cfg.ratios,
                seed: cfg.generate_seed(),
            };
            let sim = SimConfig { seed: cfg.generate_seed(), ..cfg.sim.clone() };
            let manifest = generate_dataset_with(cfg.exec(), &opts, &db, &table, &sim, &out)?;
            println!("wrote {} AIRs to {}", manifest.records.len(), out.display());
        }
        Command::TrainCrnn { common, manifest, table, out } => {
            let cfg = common.load()?;
            let manifest = DatasetManifest::load(&manifest)?;
            let table = CategoryTable::load(&table)?;
            check_theta(&manifest, &table)?;
            let crnn = CrnnConfig { seed: cfg.crnn_seed(), ..cfg.crnn.clone() };
            let (det, report) = train(&manifest, &table, &crnn, &cfg.features, cfg.exec()).context("train-crnn")?;
            det.save(&out)?;
            println!(
                "{} epochs, kept epoch {} (val loss {:.5}), stop: {:?}; wrote {}",
                report.train_loss.len(),
                report.selected_epoch,
                report.val_loss[report.selected_epoch],
                report.stop_reason,
                out.display()
            );
        }
        Command::TrainBaseline { common, manifest, table, orders, out } => {
            let cfg = common.load()?;
            let orders = match orders {
                Some(o) => IirOrders::parse(&o)?,
                None => cfg.iir_orders,
            };
            let manifest = DatasetManifest::load(&manifest)?;
            check_theta(&manifest, &CategoryTable::load(&table)?)?;
            let (features, labels) = cached_iir_features(&manifest, Split::Train, orders, &out.join("iir"), cfg.exec())?;
            let svm = SvmConfig { seed: cfg.svm_seed(), ..cfg.svm };
            BaselineDetector::train(&features, &labels, orders, &svm, cfg.exec()).context("train-baseline")?.save(&out)?;
            println!("trained {} SVMs on {} AIRs; wrote {}", labels.first().map_or(0, Vec::len), labels.len(), out.display());
        }
        Command::Evaluate { manifest, predictions, out } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let preds = read_predictions(&predictions)?;
            let metrics = evaluate_predictions(&manifest, &preds)?;
            std::fs::write(&out, metrics.to_csv())?;
            print!("{}", metrics.to_table(&predictions.display().to_string()));
        }
        Command::Predict { ckpt, baseline, air, table, manifest, split, out } => predict(ckpt, baseline, air, table, manifest, &split, out)?,
        Command::Run { common, out } => {
            let mut cfg = common.load()?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let record = run_pipeline(&cfg)?;
            for (model, m) in &record.metrics {
                println!("{model}: macro precision {:.4}, recall {:.4}, F1 {:.4}", m.macro_precision, m.macro_recall, m.macro_f1);
            }
            println!("run record: {}", cfg.out_dir.join(matdetect::pipeline::RECORD_FILE).display());
        }
    }
    Ok(())
}

fn predict(
    ckpt: Option<PathBuf>,
    baseline: Option<PathBuf>,
    air: Option<PathBuf>,
    table: Option<PathBuf>,
    manifest: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(air_path) = air {
        let ckpt = ckpt.context("--air needs --ckpt")?;
        let det = CrnnDetector::load(&ckpt)?;
        let table = CategoryTable::load(table.as_deref().unwrap_or(Path::new("")))?;
        let result = det.detect(&read_wav(&air_path)?, &table)?;
        println!("theta, posterior, present");
        for (t, p) in result.posteriors.iter().enumerate() {
            println!("{t}, {p:.6}, {}", u8::from(result.present.contains(&t)));
        }
        for (t, row) in result.present.iter().zip(&result.a_hat) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            println!("a_hat[{t}] = {}", cells.join(" "));
        }
        return Ok(());
    }
    let manifest = DatasetManifest::load(manifest.context("give --air or --manifest")?)?;
    let split = parse_split(split)?;
    let exec = matdetect::par::Exec::default();
    let preds = match (ckpt, baseline) {
        (Some(c), _) => predict_crnn(&manifest, &CrnnDetector::load(&c)?, split, exec)?,
        (None, Some(b)) => predict_baseline(&manifest, &BaselineDetector::load(&b)?, split, None, exec)?,
        (None, None) => bail!("give --ckpt or --baseline"),
    };
    let out = out.context("split prediction needs --out")?;
    write_predictions(&out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}
