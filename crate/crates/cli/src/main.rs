//! `dtsda` command line: synthetic data generation, training,
//! evaluation, the cross-user experiment runner and standalone temporal
//! state labeling.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtsda_core::data::apply_norm_stats;
use dtsda_core::eval::evaluate_model;
use dtsda_core::experiment::{
    emit_reports, load_user_datasets, parse_key_values, prepare_task, run_experiment,
    ExperimentConfig,
};
use dtsda_core::labeling::refine_group;
use dtsda_core::model_io::{load_model, save_model};
use dtsda_core::synth::{export_csv, generate_all, parse_spec_file};
use dtsda_core::training::{fit, write_training_log};
use dtsda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dtsda", about = "Cross-user activity recognition toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-user dataset from a spec file
    Synth {
        /// flat key=value spec file
        #[arg(long)]
        spec: PathBuf,
        /// output directory (data.csv, activity_map.csv, states.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adaptation model on one (source, target) user pair
    Train {
        /// directory with data.csv and activity_map.csv
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        /// flat key=value training config
        #[arg(long)]
        config: Option<PathBuf>,
        /// output model file
        #[arg(long)]
        out: PathBuf,
        /// optional per-epoch training log CSV
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a trained model on one user's labeled data
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        /// report output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        window_seconds: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Run every ordered user pair x method from an experiment config
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign temporal states to a feature CSV (segment, order, feature_*)
    Label {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        states: usize,
        #[arg(long, default_value_t = 0.2)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Train { data, source, target, config, out, log } => {
            cmd_train(&data, &source, &target, config.as_deref(), &out, log.as_deref())
        }
        Command::Eval { model, data, target, out, window_seconds, overlap } => {
            cmd_eval(&model, &data, &target, &out, window_seconds, overlap)
        }
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Label { input, output, states, gamma, seed } => {
            cmd_label(&input, &output, states, gamma, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = parse_spec_file(spec)?;
    let users = generate_all(&spec)?;
    export_csv(&spec, &users, out)?;
    println!(
        "wrote {} users x {} windows to {}",
        users.len(),
        users.first().map_or(0, |u| u.dataset.windows.len()),
        out.display()
    );
    Ok(())
}

fn train_config_from_file(data: &Path, path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut kv = match path {
        Some(p) => parse_key_values(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    for reserved in ["data", "users", "methods"] {
        if kv.contains_key(reserved) {
            return Err(Error::Config(format!(
                "key {reserved} is not valid in a training config"
            )));
        }
    }
    kv.insert("data".into(), data.display().to_string());
    ExperimentConfig::from_key_values(kv)
}

fn cmd_train(
    data: &Path,
    source: &str,
    target: &str,
    config: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let cfg = train_config_from_file(data, config)?;
    let (_activities, users) = load_user_datasets(data, cfg.window_seconds, cfg.overlap)?;
    let find = |name: &str| {
        users
            .iter()
            .find(|(u, _)| u == name)
            .map(|(_, ds)| ds)
            .ok_or_else(|| Error::Data(format!("user {name} not in data")))
    };
    let (src, tgt) = (find(source)?, find(target)?);
    let (mut src, mut tgt) = prepare_task(src, tgt, cfg.seed)?;
    let (model, epochs) = fit(&mut src, &mut tgt, &cfg.train_config(cfg.seed))?;
    save_model(&model, out)?;
    if let Some(log_path) = log {
        write_training_log(log_path, &epochs)?;
    }
    println!("trained {source} -> {target} for {} epochs; model at {}", epochs.len(), out.display());
    Ok(())
}

fn cmd_eval(
    model_path: &Path,
    data: &Path,
    target: &str,
    out: &Path,
    window_seconds: f64,
    overlap: f64,
) -> Result<()> {
    let mut model = load_model(model_path)?;
    let (activities, users) = load_user_datasets(data, window_seconds, overlap)?;
    let (_, ds) = users
        .iter()
        .find(|(u, _)| u == target)
        .ok_or_else(|| Error::Data(format!("user {target} not in data")))?;
    let mut ds = ds.clone();
    ds.pad_time_axis_to_multiple(4);
    if let Some(stats) = model.norm.clone() {
        apply_norm_stats(&mut ds, &stats)?;
    }
    let cm = evaluate_model(&mut model, &ds)?;

    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["metric", "value"])?;
    w.write_record(["accuracy", &format!("{}", cm.accuracy())])?;
    for (name, recall) in activities.names().iter().zip(cm.per_class_recall()) {
        let value = recall.map_or("n/a".to_string(), |r| format!("{r}"));
        w.write_record([&format!("recall_{name}"), &value])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("confusion.csv"))?;
    let mut header = vec!["true_class".to_string()];
    header.extend(activities.names().iter().cloned());
    w.write_record(&header)?;
    for (name, row) in activities.names().iter().zip(cm.counts()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("accuracy {:.4} over {} windows; reports in {}", cm.accuracy(), cm.total(), out.display());
    Ok(())
}

fn cmd_run(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let results = run_experiment(&cfg)?;
    emit_reports(&results, out, cfg.heatmaps)?;
    println!("{} task results in {}", results.len(), out.display());
    Ok(())
}

/// Position-prior state probabilities with a small seeded jitter, used
/// when no trained state classifier is available.
fn prior_probs(n: usize, states: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let prior = (i * states / n.max(1)).min(states - 1);
            let mut p: Vec<f64> = (0..states)
                .map(|s| {
                    let base = if s == prior { 0.8 } else { 0.2 / (states as f64 - 1.0).max(1.0) };
                    base + rng.gen_range(0.0..0.01)
                })
                .collect();
            let total: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= total;
            }
            p
        })
        .collect()
}

fn cmd_label(input: &Path, output: &Path, states: usize, gamma: f64, seed: u64) -> Result<()> {
    if states == 0 {
        return Err(Error::Config("states must be >= 1".into()));
    }
    let mut rdr = csv::Reader::from_path(input)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("segment")
        || headers.get(1).map(str::trim) != Some("order")
    {
        return Err(Error::Data(format!(
            "{}: expected columns segment, order, feature_0..", input.display()
        )));
    }
    let dim = headers.len() - 2;
    if dim == 0 {
        return Err(Error::Data("no feature columns".into()));
    }

    struct Row {
        segment: String,
        order: i64,
        features: Vec<f64>,
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let order: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad order {:?}", &rec[1])))?;
        let features: Vec<f64> = (0..dim)
            .map(|i| {
                rec[2 + i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("bad feature value {:?}", &rec[2 + i])))
            })
            .collect::<Result<_>>()?;
        rows.push(Row { segment: rec[0].trim().to_string(), order, features });
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    // group row indices per segment, each ordered by the order column
    let mut segments: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        segments.entry(row.segment.clone()).or_default().push(i);
    }
    let mut assigned = vec![0usize; rows.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idxs in segments.values_mut() {
        idxs.sort_by_key(|&i| rows[i].order);
        let features: Vec<Vec<f64>> = idxs.iter().map(|&i| rows[i].features.clone()).collect();
        let probs = prior_probs(features.len(), states, &mut rng);
        let ts = refine_group(&features, &probs, gamma)?;
        for (&i, &s) in idxs.iter().zip(&ts) {
            assigned[i] = s;
        }
    }

    let mut w = csv::Writer::from_path(output)?;
    let mut header: Vec<String> = headers.iter().map(str::to_string).collect();
    header.push("state".into());
    w.write_record(&header)?;
    for (row, &state) in rows.iter().zip(&assigned) {
        let mut rec = vec![row.segment.clone(), row.order.to_string()];
        rec.extend(row.features.iter().map(|v| format!("{v}")));
        rec.push(state.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("labeled {} rows across {} segments", rows.len(), segments.len());
    Ok(())
}
