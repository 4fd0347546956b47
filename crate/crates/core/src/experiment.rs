//! One-to-one cross-user experiment harness: flat key=value configs,
//! per-task seeding, and CSV/SVG report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    load_recordings_csv, normalize_pair, segment_windows, ActivityMap, WindowedDataset,
};
use crate::eval::{
    evaluate_baseline, evaluate_model, train_baseline, BaselineConfig, BaselineKind,
    ConfusionMatrix,
};
use crate::synth::splitmix;
use crate::training::{fit, TrainConfig};
use crate::{Error, Result};

/// Parse flat `key = value` text. `#` starts a comment; keys must be
/// unique.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// directory holding `data.csv` and `activity_map.csv`
    pub data_dir: PathBuf,
    /// empty means every user found in the data, in file order
    pub users: Vec<String>,
    pub methods: Vec<String>,
    pub seed: u64,
    pub states: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_max: f64,
    pub window_seconds: f64,
    pub overlap: f64,
    pub update_extractor: bool,
    pub heatmaps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            data_dir: PathBuf::new(),
            users: Vec::new(),
            methods: vec!["dtsda".into(), "source_only".into(), "dann".into()],
            seed: t.seed,
            states: t.states,
            gamma: t.gamma,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda_max: t.lambda_max,
            window_seconds: 3.0,
            overlap: 0.5,
            update_extractor: false,
            heatmaps: false,
        }
    }
}

const KNOWN_METHODS: [&str; 3] = ["dtsda", "source_only", "dann"];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let kv = parse_key_values(&text)?;
        Self::from_key_values(kv)
    }

    pub fn from_key_values(kv: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (key, value) in kv {
            match key.as_str() {
                "data" => cfg.data_dir = PathBuf::from(value),
                "users" => {
                    cfg.users = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                "methods" => {
                    cfg.methods = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                "seed" => cfg.seed = parse_num(&key, &value)?,
                "states" => cfg.states = parse_num(&key, &value)?,
                "gamma" => cfg.gamma = parse_num(&key, &value)?,
                "epochs" => cfg.epochs = parse_num(&key, &value)?,
                "batch_size" => cfg.batch_size = parse_num(&key, &value)?,
                "learning_rate" => cfg.learning_rate = parse_num(&key, &value)?,
                "lambda_max" => cfg.lambda_max = parse_num(&key, &value)?,
                "window_seconds" => cfg.window_seconds = parse_num(&key, &value)?,
                "overlap" => cfg.overlap = parse_num(&key, &value)?,
                "update_extractor" => cfg.update_extractor = parse_bool(&key, &value)?,
                "heatmaps" => cfg.heatmaps = parse_bool(&key, &value)?,
                other => return Err(Error::Config(format!("unknown config key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dir.as_os_str().is_empty() {
            return Err(Error::Config("missing data directory (key: data)".into()));
        }
        for m in &self.methods {
            if !KNOWN_METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "unknown method {m}; expected one of {KNOWN_METHODS:?}"
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        self.train_config(0).validate()
    }

    pub fn train_config(&self, task_seed: u64) -> TrainConfig {
        TrainConfig {
            states: self.states,
            gamma: self.gamma,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda_max: self.lambda_max,
            seed: task_seed,
            update_extractor: self.update_extractor,
        }
    }

    pub fn baseline_config(&self, task_seed: u64) -> BaselineConfig {
        BaselineConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda_max: self.lambda_max,
            seed: task_seed,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean for {key}: {other}"))),
    }
}

/// Per-task seeds derive from the root seed and the task index, so
/// adding tasks never perturbs existing ones.
pub fn task_seed(root: u64, task_index: usize) -> u64 {
    splitmix(root.wrapping_add((task_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub source: String,
    pub target: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub class_names: Vec<String>,
    pub runtime_seconds: f64,
}

impl ExperimentResult {
    pub fn task_id(&self) -> String {
        format!("{}_to_{}", self.source, self.target)
    }
}

/// Load per-user windowed datasets from `data.csv` / `activity_map.csv`.
pub fn load_user_datasets(
    dir: &Path,
    window_seconds: f64,
    overlap: f64,
) -> Result<(ActivityMap, Vec<(String, WindowedDataset)>)> {
    let activities = ActivityMap::load(&dir.join("activity_map.csv"))?;
    let recordings = load_recordings_csv(&dir.join("data.csv"), &activities)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_user: BTreeMap<String, Vec<crate::data::Window>> = BTreeMap::new();
    for rec in &recordings {
        let windows = segment_windows(rec, window_seconds, overlap)?;
        if !by_user.contains_key(&rec.user_id) {
            order.push(rec.user_id.clone());
        }
        by_user.entry(rec.user_id.clone()).or_default().extend(windows);
    }
    let mut out = Vec::new();
    for user in order {
        let windows = by_user.remove(&user).unwrap();
        out.push((user.clone(), WindowedDataset::new(windows, &activities)?));
    }
    Ok((activities, out))
}

/// FNV-1a over window payloads and labels; the harness asserts every
/// method of a task sees the same prepared data.
pub fn dataset_fingerprint(ds: &WindowedDataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for w in &ds.windows {
        for &v in w.data.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        eat(&(w.class as u64).to_le_bytes());
        eat(&[w.domain]);
        eat(&(w.temporal_index as u64).to_le_bytes());
        eat(&w.segment_id.to_le_bytes());
    }
    h
}

/// Anonymize, normalize and pad one (source, target) task.
pub fn prepare_task(
    source: &WindowedDataset,
    target: &WindowedDataset,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let mut src = source.clone();
    let mut tgt = target.clone();
    src.set_domain(crate::data::SOURCE_DOMAIN);
    tgt.anonymize_target_classes(seed)?;
    normalize_pair(&mut src, &mut tgt)?;
    src.pad_time_axis_to_multiple(4);
    tgt.pad_time_axis_to_multiple(4);
    Ok((src, tgt))
}

fn run_task(
    method: &str,
    source: &WindowedDataset,
    target: &WindowedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ConfusionMatrix, f64)> {
    let start = Instant::now();
    let cm = match method {
        "dtsda" => {
            let (mut src, mut tgt) = (source.clone(), target.clone());
            let (mut model, _log) = fit(&mut src, &mut tgt, &cfg.train_config(seed))?;
            evaluate_model(&mut model, &tgt)?
        }
        "source_only" | "dann" => {
            let kind = if method == "dann" {
                BaselineKind::Dann
            } else {
                BaselineKind::SourceOnly
            };
            let (mut model, _log) =
                train_baseline(source, target, kind, &cfg.baseline_config(seed))?;
            evaluate_baseline(&mut model, target)?
        }
        other => return Err(Error::Config(format!("unknown method {other}"))),
    };
    Ok((cm, start.elapsed().as_secs_f64()))
}

/// All ordered user pairs x requested methods. Every method within a
/// task consumes identically prepared data (checked by fingerprint) and
/// the same derived seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let (activities, users) = load_user_datasets(&cfg.data_dir, cfg.window_seconds, cfg.overlap)?;
    let selected: Vec<&(String, WindowedDataset)> = if cfg.users.is_empty() {
        users.iter().collect()
    } else {
        cfg.users
            .iter()
            .map(|name| {
                users
                    .iter()
                    .find(|(u, _)| u == name)
                    .ok_or_else(|| Error::Data(format!("user {name} not in data")))
            })
            .collect::<Result<_>>()?
    };
    if selected.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two users, found {}",
            selected.len()
        )));
    }

    let mut results = Vec::new();
    let mut task_index = 0usize;
    for (src_name, src_ds) in &selected {
        for (tgt_name, tgt_ds) in &selected {
            if src_name == tgt_name {
                continue;
            }
            let seed = task_seed(cfg.seed, task_index);
            task_index += 1;
            let (src, tgt) = prepare_task(src_ds, tgt_ds, seed)?;
            let fingerprint = (dataset_fingerprint(&src), dataset_fingerprint(&tgt));
            for method in &cfg.methods {
                assert_eq!(
                    (dataset_fingerprint(&src), dataset_fingerprint(&tgt)),
                    fingerprint,
                    "prepared data changed between methods"
                );
                let (cm, runtime) = run_task(method, &src, &tgt, cfg, seed)?;
                results.push(ExperimentResult {
                    source: src_name.clone(),
                    target: tgt_name.clone(),
                    method: method.clone(),
                    seed,
                    accuracy: cm.accuracy(),
                    per_class_recall: cm.per_class_recall(),
                    confusion: cm,
                    class_names: activities.names().to_vec(),
                    runtime_seconds: runtime,
                });
            }
        }
    }
    Ok(results)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn heatmap_svg(cm: &ConfusionMatrix, names: &[String]) -> String {
    // color ramp: white (0.0) to solid blue (1.0), row-normalized
    let c = cm.num_classes();
    let cell = 48;
    let margin = 70;
    let size = margin + c * cell + 10;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n"
    ));
    for (i, row) in cm.counts().iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let chan = (255.0 * (1.0 - frac)).round() as u8;
            let x = margin + j * cell;
            let y = margin + i * cell;
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({chan},{chan},255)\" stroke=\"black\"/>\n"
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{v}</text>\n",
                x + cell / 2,
                y + cell / 2 + 4
            ));
        }
    }
    for (i, name) in names.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{name}</text>\n",
            margin - 6,
            margin + i * cell + cell / 2 + 4
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{name}</text>\n",
            margin + i * cell + cell / 2,
            margin - 8
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Write `results.csv`, per-task confusion CSVs, `summary.csv` and
/// optional SVG heatmaps. `results.csv` depends only on the results'
/// deterministic fields, so identical runs produce identical bytes.
pub fn emit_reports(results: &[ExperimentResult], out_dir: &Path, heatmaps: bool) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Data("no results to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut w = csv::Writer::from_path(out_dir.join("results.csv"))?;
    w.write_record(["source", "target", "method", "seed", "accuracy", "windows"])?;
    for r in results {
        w.write_record([
            r.source.clone(),
            r.target.clone(),
            r.method.clone(),
            r.seed.to_string(),
            format!("{}", r.accuracy),
            r.confusion.total().to_string(),
        ])?;
    }
    w.flush()?;

    for r in results {
        let stem = format!("confusion_{}_{}", r.task_id(), r.method);
        let mut w = csv::Writer::from_path(out_dir.join(format!("{stem}.csv")))?;
        let mut header = vec!["true_class".to_string()];
        header.extend(r.class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in r.class_names.iter().zip(r.confusion.counts()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        if heatmaps {
            std::fs::write(
                out_dir.join(format!("{stem}.svg")),
                heatmap_svg(&r.confusion, &r.class_names),
            )?;
        }
    }

    let mut methods: Vec<String> = Vec::new();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    w.write_record(["method", "mean_accuracy", "std_accuracy", "tasks"])?;
    for m in methods {
        let accs: Vec<f64> = results
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.accuracy)
            .collect();
        let (mean, std) = mean_std(&accs);
        w.write_record([m, format!("{mean}"), format!("{std}"), accs.len().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
