//! Command-line entry point wiring simulation, correlation, the analytic
//! oracle, dataset generation, training, evaluation, classification and the
//! streaming service into one binary.
//!
//! Every flag can also come from an environment variable (`G3CLASS_*`) or a
//! `key = value` config file passed with `--config`; explicit flags win over
//! the environment, which wins over the config file. The resolved
//! configuration of each run is logged to stderr for reproducibility.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use g3class::cnn::{self, Hyper, ModelConfig, ModelParams};
use g3class::correlator::{critical_points, cross_sections, g3_map, CorrelationMap};
use g3class::dataset::{self, DatasetManifest, SplitInfo};
use g3class::error::{Error, Result};
use g3class::eval::{self, BaselineClassifier, CnnClassifier};
use g3class::source::{simulate, DetectionRecord, SourceSpec};
use g3class::stream::{ClassifierKind, StreamConfig};
use g3class::theory::{baseline_classify, gk_zero, table1, GkQuery, TABLE1_FOCK, TABLE1_QLP};

#[derive(Parser)]
#[command(
    name = "g3class",
    version,
    about = "Photon-source simulation, third-order correlation, and Fock-state classification"
)]
struct Cli {
    /// Global RNG seed.
    #[arg(long, global = true, env = "G3CLASS_SEED")]
    seed: Option<u64>,
    /// Output directory for generated files.
    #[arg(long, global = true, env = "G3CLASS_OUT")]
    out: Option<PathBuf>,
    /// Key-value config file supplying defaults for any long flag.
    #[arg(long, global = true, env = "G3CLASS_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pulsed source into a detection record file.
    Simulate(SimulateArgs),
    /// Compute the normalized third-order correlation map of a record.
    Correlate(CorrelateArgs),
    /// Print the closed-form reference table or evaluate one point.
    Oracle(OracleArgs),
    /// Generate a labeled dataset over a parameter grid.
    DatasetGen(DatasetGenArgs),
    /// Split a dataset into train/validation/test files.
    DatasetSplit(DatasetSplitArgs),
    /// Train the convolutional classifier on a dataset.
    Train(TrainArgs),
    /// Evaluate a classifier on a test dataset and export report files.
    Eval(EvalArgs),
    /// Classify a record, a map, or explicit critical values.
    Classify(ClassifyArgs),
    /// Serve the streaming classification protocol.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Fock level of the quantum component (1, 2 or 3).
    #[arg(long, env = "G3CLASS_FOCK")]
    fock: Option<u8>,
    /// Quantum-light probability in [0, 1].
    #[arg(long, env = "G3CLASS_QLP")]
    qlp: Option<f64>,
    /// Number of detection events (excitation pulses).
    #[arg(long, env = "G3CLASS_EVENTS")]
    events: Option<usize>,
    /// Also write a human-readable pulse table.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct CorrelateArgs {
    /// Detection record file produced by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Delay range of the map, in pulse periods.
    #[arg(long, env = "G3CLASS_TAU_MAX")]
    tau_max: Option<u8>,
    /// Also write the three cross sections.
    #[arg(long)]
    sections: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Print the full reference table.
    #[arg(long)]
    table1: bool,
    /// Fock level for a single query.
    #[arg(long)]
    fock: Option<u32>,
    /// Correlation order (2 or 3).
    #[arg(long)]
    order: Option<u32>,
    /// Quantum-light probability.
    #[arg(long)]
    qlp: Option<f64>,
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Grid preset (`paper`, `desk`, `desk-ext`) or a grid file path.
    #[arg(long, env = "G3CLASS_GRID")]
    grid: Option<String>,
    /// Measurements per grid case.
    #[arg(long, env = "G3CLASS_MEASUREMENTS")]
    measurements: Option<u32>,
}

#[derive(Args)]
struct DatasetSplitArgs {
    /// Dataset file to split.
    #[arg(long)]
    input: PathBuf,
    /// Train/validation/test fractions, comma separated.
    #[arg(long)]
    fractions: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    train: PathBuf,
    /// Validation dataset file.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Test dataset file.
    #[arg(long)]
    test: PathBuf,
    /// Weights file of a trained model.
    #[arg(long, env = "G3CLASS_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Use the analytic threshold baseline instead of a trained model.
    #[arg(long)]
    baseline: bool,
    /// Accuracy target for the event-count threshold report.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Record (`.fldr`) or map (`.flg3`) file to classify.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Weights file of a trained model.
    #[arg(long, env = "G3CLASS_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Use the analytic threshold baseline.
    #[arg(long)]
    baseline: bool,
    /// Explicit second-order zero-delay value (baseline mode).
    #[arg(long)]
    g2: Option<f64>,
    /// Explicit third-order zero-delay value (baseline mode).
    #[arg(long)]
    g3: Option<f64>,
    #[arg(long, env = "G3CLASS_TAU_MAX")]
    tau_max: Option<u8>,
}

#[derive(Args)]
struct ServeArgs {
    /// TCP listen address (host:port); omit for stdin/stdout mode.
    #[arg(long, env = "G3CLASS_LISTEN")]
    listen: Option<String>,
    /// Serve on standard input/output.
    #[arg(long)]
    stdio: bool,
    /// Weights file; the analytic baseline is used when absent.
    #[arg(long, env = "G3CLASS_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Force the analytic baseline.
    #[arg(long)]
    baseline: bool,
    /// Sliding window size in pulses.
    #[arg(long, env = "G3CLASS_WINDOW")]
    window: Option<usize>,
    /// Emit a verdict every this many ingested pulses.
    #[arg(long, env = "G3CLASS_EMIT_EVERY")]
    emit_every: Option<u64>,
    #[arg(long, env = "G3CLASS_TAU_MAX")]
    tau_max: Option<u8>,
    /// Largest forward bin gap filled with empty pulses.
    #[arg(long)]
    max_gap: Option<u64>,
}

/// Defaults loaded from a `key = value` config file.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::format(path, format!("expected `key = value`, got `{line}`"))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    /// CLI/env value if present, else the config-file value, else the default.
    fn resolve<T: std::str::FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("config key {key}: bad value {raw}"))),
            None => Ok(default),
        }
    }

    fn resolve_opt<T: std::str::FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidArgument(format!("config key {key}: bad value {raw}"))),
            None => Ok(None),
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Loads either a correlation map file or a detection record (correlating it
/// on the fly), keyed on the magic bytes.
fn load_map_or_record(path: &Path, tau_max: u8) -> Result<CorrelationMap> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    }
    match &magic {
        b"FLG3" => CorrelationMap::read_binary(path),
        b"FLDR" => {
            let record = DetectionRecord::read_binary(path)?;
            g3_map(&record, tau_max)
        }
        _ => Err(Error::format(path, "expected a map or record file")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_config = FileConfig::load(cli.config.as_deref())?;
    let seed = file_config.resolve(cli.seed, "seed", 0u64)?;
    let out = file_config.resolve(cli.out, "out", PathBuf::from("out"))?;

    match cli.command {
        Command::Simulate(args) => {
            let fock = file_config.resolve(args.fock, "fock", 1u8)?;
            let qlp = file_config.resolve(args.qlp, "qlp", 1.0f64)?;
            let events = file_config.resolve(args.events, "events", 10_000usize)?;
            eprintln!(
                "config: simulate fock={fock} qlp={qlp} events={events} seed={seed} out={}",
                out.display()
            );
            ensure_out_dir(&out)?;
            let spec = SourceSpec::new(fock, qlp)?;
            let record = simulate(&spec, events, seed)?;
            let path = out.join("record.fldr");
            record.write_binary(&path)?;
            println!("wrote {}", path.display());
            println!(
                "pulses={} co_detections={} triple_coincidences={}",
                record.len(),
                record.co_detection_events(),
                record.triple_coincidences()
            );
            if args.text {
                let table = out.join("record.tsv");
                record.write_table(&table)?;
                println!("wrote {}", table.display());
            }
            Ok(())
        }
        Command::Correlate(args) => {
            let tau_max = file_config.resolve(args.tau_max, "tau_max", 16u8)?;
            eprintln!(
                "config: correlate input={} tau_max={tau_max} out={}",
                args.input.display(),
                out.display()
            );
            ensure_out_dir(&out)?;
            let record = DetectionRecord::read_binary(&args.input)?;
            let map = g3_map(&record, tau_max)?;
            let bin_path = out.join("map.flg3");
            let table_path = out.join("map.tsv");
            map.write_binary(&bin_path)?;
            map.write_table(&table_path)?;
            println!("wrote {}", bin_path.display());
            println!("wrote {}", table_path.display());
            if !map.valid() {
                println!("map is degenerate (a detector mean was zero)");
                return Ok(());
            }
            let cp = critical_points(&map)?;
            println!("g3_zero={:.6} g2_zero_est={:.6}", cp.g3_zero, cp.g2_zero_est);
            if args.sections {
                let sections = cross_sections(&map);
                let path = out.join("sections.tsv");
                let mut rows = String::from("tau12\tdiagonal\thorizontal\tanti_diagonal\n");
                let t = tau_max as i32;
                for (i, tau12) in (-t..=t).enumerate() {
                    rows.push_str(&format!(
                        "{tau12}\t{:.6}\t{:.6}\t{:.6}\n",
                        sections.main_diagonal[i],
                        sections.horizontal[i],
                        sections.anti_diagonal[i]
                    ));
                }
                std::fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Oracle(args) => {
            if args.table1 {
                eprintln!("config: oracle table1");
                let table = table1();
                println!("qlp\tg2_n1\tg3_n1\tg2_n2\tg3_n2\tg2_n3\tg3_n3");
                for (row, &p) in TABLE1_QLP.iter().enumerate() {
                    let mut line = format!("{p:.2}");
                    for col in 0..TABLE1_FOCK.len() {
                        let (g2, g3) = table[row][col];
                        line.push_str(&format!("\t{g2:.2}\t{g3:.2}"));
                    }
                    println!("{line}");
                }
                return Ok(());
            }
            let (Some(fock), Some(order), Some(qlp)) = (args.fock, args.order, args.qlp) else {
                return Err(Error::InvalidArgument(
                    "oracle needs --table1 or all of --fock, --order, --qlp".into(),
                ));
            };
            eprintln!("config: oracle fock={fock} order={order} qlp={qlp}");
            let value = gk_zero(&GkQuery::new(fock, order, qlp)?);
            println!("g{order}(0) = {value:.6}");
            Ok(())
        }
        Command::DatasetGen(args) => {
            let grid_name = file_config.resolve(args.grid, "grid", "desk".to_string())?;
            let measurements = file_config.resolve(args.measurements, "measurements", 100u32)?;
            eprintln!(
                "config: dataset-gen grid={grid_name} measurements={measurements} seed={seed} out={}",
                out.display()
            );
            ensure_out_dir(&out)?;
            let grid = match grid_name.as_str() {
                "paper" => dataset::parameter_grid(),
                "desk" => dataset::desk_grid(),
                "desk-ext" => dataset::desk_extended_grid(),
                path => dataset::read_grid_file(Path::new(path))?,
            };
            let dataset_path = out.join("dataset.flds");
            let manifest_path = out.join("manifest.txt");
            let manifest = dataset::generate_to_file(
                &grid,
                measurements,
                seed,
                &dataset_path,
                &manifest_path,
            )?;
            println!(
                "wrote {} ({} samples, {} resampled)",
                dataset_path.display(),
                manifest.sample_count,
                manifest.resampled
            );
            println!("wrote {}", manifest_path.display());
            Ok(())
        }
        Command::DatasetSplit(args) => {
            let fractions_raw =
                file_config.resolve(args.fractions, "fractions", "0.7,0.2,0.1".to_string())?;
            let parts: Vec<f64> = fractions_raw
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidArgument(format!("bad fractions `{fractions_raw}`")))?;
            if parts.len() != 3 {
                return Err(Error::InvalidArgument(
                    "fractions must have three comma-separated values".into(),
                ));
            }
            let fractions = [parts[0], parts[1], parts[2]];
            eprintln!(
                "config: dataset-split input={} fractions={fractions_raw} seed={seed} out={}",
                args.input.display(),
                out.display()
            );
            ensure_out_dir(&out)?;
            let samples = dataset::read_dataset(&args.input)?;
            let [train, val, test] = dataset::split(&samples, fractions, seed)?;

            let mut manifest = DatasetManifest {
                sample_count: samples.len() as u64,
                ..DatasetManifest::default()
            };
            let mut counts = [0u64; 3];
            for (i, (name, subset)) in [
                ("train", &train),
                ("validation", &val),
                ("test", &test),
            ]
            .into_iter()
            .enumerate()
            {
                let path = out.join(format!("{name}.flds"));
                let digest = dataset::write_dataset(&path, subset)?;
                manifest.checksums.insert(format!("{name}.flds"), digest);
                println!("wrote {} ({} samples)", path.display(), subset.len());
                counts[i] = subset.len() as u64;
            }
            manifest.split = Some(SplitInfo {
                seed,
                fractions,
                counts,
            });
            let manifest_path = out.join("split_manifest.txt");
            manifest.write(&manifest_path)?;
            println!("wrote {}", manifest_path.display());
            Ok(())
        }
        Command::Train(args) => {
            let hyper = Hyper {
                batch_size: file_config.resolve(args.batch_size, "batch_size", 32usize)?,
                epochs: file_config.resolve(args.epochs, "epochs", 1usize)?,
                learning_rate: file_config.resolve(args.learning_rate, "learning_rate", 1e-3)?,
                ..Hyper::default()
            };
            eprintln!(
                "config: train train={} val={:?} epochs={} batch_size={} learning_rate={} seed={seed} out={}",
                args.train.display(),
                args.val.as_ref().map(|p| p.display().to_string()),
                hyper.epochs,
                hyper.batch_size,
                hyper.learning_rate,
                out.display()
            );
            ensure_out_dir(&out)?;
            let train_set = dataset::read_dataset(&args.train)?;
            let val_set = match &args.val {
                Some(path) => dataset::read_dataset(path)?,
                None => Vec::new(),
            };
            let config = ModelConfig::default();
            let (params, history) = cnn::train(&train_set, &val_set, &hyper, &config, seed)?;
            let weights_path = out.join("weights.flnn");
            let history_path = out.join("history.tsv");
            params.save(&weights_path)?;
            history.write_tsv(&history_path)?;
            println!("wrote {}", weights_path.display());
            println!("wrote {}", history_path.display());
            if let Some(acc) = history.epochs.last().and_then(|e| e.val_accuracy) {
                println!("val_accuracy={acc:.4}");
            }
            Ok(())
        }
        Command::Eval(args) => {
            let target = file_config.resolve(args.target, "target", 0.90f64)?;
            let weights = file_config.resolve_opt(args.weights, "weights")?;
            eprintln!(
                "config: eval test={} weights={:?} baseline={} target={target} out={}",
                args.test.display(),
                weights.as_ref().map(|p| p.display().to_string()),
                args.baseline,
                out.display()
            );
            ensure_out_dir(&out)?;
            let test_set = dataset::read_dataset(&args.test)?;
            let metrics = if args.baseline {
                eval::evaluate(&BaselineClassifier, &test_set)?
            } else {
                let weights_path = weights.ok_or_else(|| {
                    Error::InvalidArgument("eval needs --weights or --baseline".into())
                })?;
                let params = ModelParams::load(&weights_path, &ModelConfig::default())?;
                eval::evaluate(&CnnClassifier(&params), &test_set)?
            };
            eval::export_report(&metrics, &out)?;
            println!(
                "overall_accuracy={:.4}",
                metrics.overall.accuracy().unwrap_or(0.0)
            );
            if let Some(macro_acc) = metrics.macro_accuracy() {
                println!("macro_accuracy={macro_acc:.4}");
            }
            match eval::threshold_events(&metrics, target) {
                Some(events) => println!("threshold_events@{target:.2}={events}"),
                None => println!("threshold_events@{target:.2}=none"),
            }
            println!("report_dir={}", out.display());
            Ok(())
        }
        Command::Classify(args) => {
            let tau_max = file_config.resolve(args.tau_max, "tau_max", 16u8)?;
            let weights = file_config.resolve_opt(args.weights, "weights")?;
            if args.baseline || weights.is_none() {
                let (g2, g3) = match (args.g2, args.g3) {
                    (Some(g2), Some(g3)) => (g2, g3),
                    _ => {
                        let input = args.input.as_ref().ok_or_else(|| {
                            Error::InvalidArgument("classify needs --g2/--g3 or --input".into())
                        })?;
                        let map = load_map_or_record(input, tau_max)?;
                        let cp = critical_points(&map)?;
                        (cp.g2_zero_est, cp.g3_zero)
                    }
                };
                eprintln!("config: classify baseline g2={g2} g3={g3}");
                let verdict = baseline_classify(g2, g3);
                println!("{} qlp={:.3}", verdict.photon_class.code(), verdict.qlp_est);
            } else {
                let weights_path = weights.expect("checked above");
                let input = args.input.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("classify with weights needs --input".into())
                })?;
                eprintln!(
                    "config: classify weights={} input={} tau_max={tau_max}",
                    weights_path.display(),
                    input.display()
                );
                let params = ModelParams::load(&weights_path, &ModelConfig::default())?;
                let map = load_map_or_record(input, tau_max)?;
                let (class, scores) = params.predict(&map)?;
                println!(
                    "{} {:.6} {:.6} {:.6} {:.6}",
                    class.code(),
                    scores.0[0],
                    scores.0[1],
                    scores.0[2],
                    scores.0[3]
                );
            }
            Ok(())
        }
        Command::Serve(args) => {
            let window = file_config.resolve(args.window, "window", 10_000usize)?;
            let emit_every = file_config.resolve(args.emit_every, "emit_every", 1_000u64)?;
            let tau_max = file_config.resolve(args.tau_max, "tau_max", 16u8)?;
            let max_gap = file_config.resolve(args.max_gap, "max_gap", 100_000u64)?;
            let weights = file_config.resolve_opt(args.weights, "weights")?;
            let listen = file_config.resolve_opt(args.listen, "listen")?;

            let classifier = if args.baseline || weights.is_none() {
                ClassifierKind::Baseline
            } else {
                let path = weights.as_ref().expect("checked above");
                ClassifierKind::Cnn(Box::new(ModelParams::load(path, &ModelConfig::default())?))
            };
            let mut config = StreamConfig::new(classifier);
            config.window_size = window;
            config.emit_every = emit_every;
            config.tau_max = tau_max;
            config.max_gap = max_gap;
            eprintln!(
                "config: serve listen={listen:?} stdio={} window={window} emit_every={emit_every} tau_max={tau_max} max_gap={max_gap}",
                args.stdio
            );
            match (listen, args.stdio) {
                (Some(addr), false) => g3class::stream::serve_tcp(&config, addr.as_str()),
                (None, _) | (Some(_), true) => g3class::stream::serve_stdio(&config),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
