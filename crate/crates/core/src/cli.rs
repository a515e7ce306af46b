//! The `das` command line: gen, search, oracle, report and eval.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{DasError, Result};
use crate::manifest::{hash_inputs, hash_outputs, unix_now, RunLock, RunManifest};
use crate::network::checkpoint::{Checkpoint, LoadedModel};
use crate::network::{Model, SkipMask, SkippableNetwork};
use crate::pipeline::{evaluate, mean_std, progress_csv, BaselineRun, Metrics, Pipeline, SearchConfig, SearchReport};
use crate::planted::{gen_dataset, gen_pretrained, oracle_best_skip_set, OracleConfig, PlantedReport, PlantedSpec};

/// Environment variable naming the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DAS_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "das", version, about = "Learn which blocks of a frozen residual network to skip")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted benchmark: pretrained checkpoint plus dataset.
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warmup, search and finetune; writes the report and the pruned checkpoint.
    Search(SearchArgs),
    /// Rank every m-subset by validation loss after brief finetuning.
    Oracle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        skip: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON oracle settings (budget, batch_size, learning rates, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate finished search runs into tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Skip set such as "1;5" (full network only).
        #[arg(long)]
        mask: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub skip: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => cmd_gen(spec.as_deref(), &resolve_out(&out)),
        Command::Search(args) => cmd_search(&SearchArgs {
            out: resolve_out(&args.out),
            ..args
        }),
        Command::Oracle {
            checkpoint,
            data,
            skip,
            out,
            config,
            budget,
            seed,
        } => cmd_oracle(&checkpoint, &data, skip, &resolve_out(&out), config.as_deref(), budget, seed),
        Command::Report { runs, out } => cmd_report(&runs, &resolve_out(&out)),
        Command::Eval {
            checkpoint,
            data,
            split,
            mask,
        } => {
            let m = cmd_eval(&checkpoint, &data, &split, mask.as_deref())?;
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
            Ok(())
        }
    }
}

fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DasError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| DasError::Parse {
        path: path.to_path_buf(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| DasError::io(&p, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn load_full(checkpoint: &Path) -> Result<SkippableNetwork> {
    match Checkpoint::load(checkpoint)?.into_model()? {
        LoadedModel::Full(net) => Ok(net),
        LoadedModel::Pruned(_) => Err(DasError::validation(format!(
            "{} is a pruned checkpoint; this command needs the full network",
            checkpoint.display()
        ))),
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DATA_DIR: &str = "data";
pub const PLANTED_FILE: &str = "planted.json";

#[derive(Serialize)]
struct PlantedFile<'a> {
    spec: &'a PlantedSpec,
    report: &'a PlantedReport,
}

pub fn cmd_gen(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec: PlantedSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => PlantedSpec::default(),
    };
    spec.validate()?;
    let inputs: Vec<&Path> = spec_path.into_iter().collect();
    let (input_hash, input_files) = hash_inputs(&inputs)?;
    let _lock = RunLock::acquire(out)?;
    let started = unix_now();
    let clock = Instant::now();

    let data = gen_dataset(&spec)?;
    let planted = gen_pretrained(&spec, &data)?;
    let data_dir = out.join(DATA_DIR);
    fs::create_dir_all(&data_dir).map_err(|e| DasError::io(&data_dir, e))?;
    data.save(&data_dir)?;
    Checkpoint::from_network(&planted.net).save(&out.join(CHECKPOINT_FILE))?;
    write_text(
        out,
        PLANTED_FILE,
        &to_json(&PlantedFile {
            spec: &spec,
            report: &planted.report,
        }),
    )?;

    let names = [
        CHECKPOINT_FILE,
        PLANTED_FILE,
        "data/train.csv",
        "data/val.csv",
        "data/test.csv",
        "data/data.json",
    ];
    RunManifest {
        command: "gen".into(),
        config_path: spec_path.map(|p| p.display().to_string()),
        seed: Some(spec.seed),
        input_hash,
        inputs: input_files,
        output_dir: out.display().to_string(),
        outputs: hash_outputs(out, &names)?,
        started_unix: started,
        finished_unix: unix_now(),
        timings: serde_json::json!({ "total_s": clock.elapsed().as_secs_f64() }),
    }
    .write(out)
}

pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORY_FILE: &str = crate::pipeline::TRAJECTORY_FILE;
pub const PRUNED_FILE: &str = "pruned.json";
pub const PROGRESS_FILE: &str = "progress.log";
pub const BASELINE_FILE: &str = "random_baseline.csv";

fn baseline_csv(runs: &[BaselineRun]) -> String {
    let mut out = String::from("subset,val_loss,val_accuracy,test_loss,test_accuracy\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.mask, r.val.loss, r.val.accuracy, r.test.loss, r.test.accuracy
        );
    }
    out
}

/// Config from file (or defaults) with command-line overrides applied.
pub fn search_config(args: &SearchArgs) -> Result<SearchConfig> {
    let mut cfg: SearchConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SearchConfig::default(),
    };
    if let Some(m) = args.skip {
        cfg.m = m;
    }
    if let Some(c) = args.candidates {
        cfg.c = c;
    }
    if let Some(k) = args.interval {
        cfg.interval = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_search(args: &SearchArgs) -> Result<()> {
    let cfg = search_config(args)?;
    let net = load_full(&args.checkpoint)?;
    let data = Splits::load(&args.data)?;
    let mut pipeline = Pipeline::new(net, &data, cfg.clone())?;

    let mut inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    inputs.push(&args.checkpoint);
    inputs.push(&args.data);
    let (input_hash, input_files) = hash_inputs(&inputs)?;
    let out = &args.out;
    let _lock = RunLock::acquire(out)?;
    let started = unix_now();

    let outcome = pipeline.run()?;
    write_text(out, REPORT_FILE, &outcome.report.to_json())?;
    pipeline.write_trajectory(&out.join(TRAJECTORY_FILE))?;
    write_text(out, PROGRESS_FILE, &progress_csv(pipeline.progress(), cfg.c))?;
    write_text(out, BASELINE_FILE, &baseline_csv(&outcome.baselines))?;
    Checkpoint::from_pruned(&outcome.pruned, outcome.report.flop_report()).save(&out.join(PRUNED_FILE))?;

    let names = [REPORT_FILE, TRAJECTORY_FILE, PROGRESS_FILE, BASELINE_FILE, PRUNED_FILE];
    RunManifest {
        command: "search".into(),
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        seed: Some(cfg.seed),
        input_hash,
        inputs: input_files,
        output_dir: out.display().to_string(),
        outputs: hash_outputs(out, &names)?,
        started_unix: started,
        finished_unix: unix_now(),
        timings: serde_json::to_value(pipeline.timings()).expect("timings serialize"),
    }
    .write(out)
}

pub const ORACLE_FILE: &str = "oracle.csv";

pub fn cmd_oracle(
    checkpoint: &Path,
    data_dir: &Path,
    m: usize,
    out: &Path,
    config: Option<&Path>,
    budget: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: OracleConfig = match config {
        Some(p) => read_json(p)?,
        None => OracleConfig::default(),
    };
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let net = load_full(checkpoint)?;
    let data = Splits::load(data_dir)?;
    let mut inputs: Vec<&Path> = config.into_iter().collect();
    inputs.push(checkpoint);
    inputs.push(data_dir);
    let (input_hash, input_files) = hash_inputs(&inputs)?;
    let _lock = RunLock::acquire(out)?;
    let started = unix_now();
    let clock = Instant::now();

    let result = oracle_best_skip_set(&net, &data, m, &cfg)?;
    write_text(out, ORACLE_FILE, &result.to_csv())?;
    RunManifest {
        command: "oracle".into(),
        config_path: config.map(|p| p.display().to_string()),
        seed: Some(cfg.seed),
        input_hash,
        inputs: input_files,
        output_dir: out.display().to_string(),
        outputs: hash_outputs(out, &[ORACLE_FILE])?,
        started_unix: started,
        finished_unix: unix_now(),
        timings: serde_json::json!({ "total_s": clock.elapsed().as_secs_f64() }),
    }
    .write(out)
}

/// One row of the m-sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub m: usize,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub flop_saved_fraction: f64,
    pub trainable_params: usize,
}

/// One row of the chosen-versus-random comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub seed: u64,
    pub m: usize,
    pub das_accuracy: f64,
    pub random_runs: usize,
    pub random_mean: f64,
    pub random_std: f64,
}

pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_MD: &str = "table.md";
pub const COMPARISON_CSV: &str = "das_vs_random.csv";

/// Test accuracies from a run's random-baseline CSV.
pub fn read_baseline_accuracies(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DasError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let col = r
        .headers()
        .ok()
        .and_then(|h| h.iter().position(|c| c == "test_accuracy"))
        .ok_or_else(|| DasError::Parse {
            path: path.to_path_buf(),
            message: "no test_accuracy column".into(),
        })?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| DasError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            rec[col].parse::<f64>().map_err(|e| DasError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let missing: Vec<String> = runs
        .iter()
        .flat_map(|d| [d.join(REPORT_FILE), d.join(BASELINE_FILE)])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DasError::validation(format!("missing report files: {}", missing.join(", "))));
    }
    let inputs: Vec<PathBuf> = runs
        .iter()
        .flat_map(|d| [d.join(REPORT_FILE), d.join(BASELINE_FILE)])
        .collect();
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let (input_hash, input_files) = hash_inputs(&input_refs)?;
    let _lock = RunLock::acquire(out)?;
    let started = unix_now();

    let mut by_m: BTreeMap<usize, Vec<SearchReport>> = BTreeMap::new();
    let mut comparison = Vec::new();
    for dir in runs {
        let report: SearchReport = read_json(&dir.join(REPORT_FILE))?;
        let acc = read_baseline_accuracies(&dir.join(BASELINE_FILE))?;
        if let Some((mean, std)) = mean_std(&acc) {
            comparison.push(ComparisonRow {
                run: dir.display().to_string(),
                seed: report.seed,
                m: report.m,
                das_accuracy: report.test.accuracy,
                random_runs: acc.len(),
                random_mean: mean,
                random_std: std,
            });
        }
        by_m.entry(report.m).or_default().push(report);
    }
    let table: Vec<TableRow> = by_m
        .iter()
        .map(|(&m, reports)| {
            let acc: Vec<f64> = reports.iter().map(|r| r.test.accuracy).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc).expect("at least one run per group");
            TableRow {
                m,
                runs: reports.len(),
                accuracy_mean,
                accuracy_std,
                flop_saved_fraction: reports[0].flop_saved_fraction,
                trainable_params: reports[0].trainable_param_count,
            }
        })
        .collect();

    write_text(out, TABLE_CSV, &csv_of(&table)?)?;
    write_text(out, TABLE_MD, &markdown_table(&table))?;
    write_text(out, COMPARISON_CSV, &csv_of(&comparison)?)?;
    RunManifest {
        command: "report".into(),
        config_path: None,
        seed: None,
        input_hash,
        inputs: input_files,
        output_dir: out.display().to_string(),
        outputs: hash_outputs(out, &[TABLE_CSV, TABLE_MD, COMPARISON_CSV])?,
        started_unix: started,
        finished_unix: unix_now(),
        timings: serde_json::Value::Null,
    }
    .write(out)
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| DasError::usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DasError::usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn markdown_table(rows: &[TableRow]) -> String {
    let mut s = String::from(
        "| m | runs | accuracy | std | FLOPs saved | trainable params |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {} |",
            r.m, r.runs, r.accuracy_mean, r.accuracy_std, r.flop_saved_fraction, r.trainable_params
        );
    }
    s
}

pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: &str, mask: Option<&str>) -> Result<Metrics> {
    let data = Splits::load(data_dir)?;
    let set = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => return Err(DasError::usage(format!("unknown split {other:?}; use train, val or test"))),
    };
    match Checkpoint::load(checkpoint)?.into_model()? {
        LoadedModel::Full(net) => {
            let mask = match mask {
                Some(s) => SkipMask::parse(net.n(), s)?,
                None => SkipMask::empty(net.n()),
            };
            evaluate(&net, set, &mask)
        }
        LoadedModel::Pruned(net) => {
            let own = net.mask().clone();
            if let Some(s) = mask {
                if SkipMask::parse(net.dims().n, s)? != own {
                    return Err(DasError::usage(format!("pruned checkpoint only runs its own mask {own}")));
                }
            }
            evaluate(&net, set, &own)
        }
    }
}
