//! Three-phase adversarial training loop.
//!
//! Each epoch runs the fine-grained phase over mixed minibatches,
//! refreshes the pseudo temporal states of every (domain, class,
//! segment) group, then runs the temporal-state and cross-user phases
//! with the scheduled reversal strength.

use std::cell::RefCell;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Window, WindowedDataset};
use crate::labeling::relabel_dataset;
use crate::networks::{ArchConfig, Batch, DtsdaModel, Phase};
use crate::optim::Optimizer;
use crate::synth::splitmix;
use crate::tensor::Tensor;
use crate::{Error, Result, Tensor64};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// number of temporal states T
    pub states: usize,
    /// state-switch penalty in the labeling step
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// peak gradient-reversal strength
    pub lambda_max: f64,
    pub seed: u64,
    /// let phases 2 and 3 update the feature extractor
    pub update_extractor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            states: 3,
            gamma: 0.2,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda_max: 1.0,
            seed: 0,
            update_extractor: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::Config("states must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for batchnorm".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("bad learning_rate {}", self.learning_rate)));
        }
        if self.lambda_max < 0.0 {
            return Err(Error::Config("lambda_max must be non-negative".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        Ok(())
    }
}

/// lambda_max * (2 / (1 + e^(-10 p)) - 1) for progress p in [0, 1].
pub fn lambda_schedule(progress: f64, lambda_max: f64) -> f64 {
    assert!((0.0..=1.0).contains(&progress), "progress {progress} outside [0, 1]");
    lambda_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
}

/// Per-epoch record of the training run.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub loss_fine: f64,
    pub loss_temporal: f64,
    pub loss_cross: f64,
    pub ts_change_fraction: f64,
    pub wall_seconds: f64,
}

pub fn write_training_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "lambda",
        "loss_fine",
        "loss_temporal",
        "loss_cross",
        "ts_change_fraction",
        "wall_seconds",
    ])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.lambda),
            format!("{}", r.loss_fine),
            format!("{}", r.loss_temporal),
            format!("{}", r.loss_cross),
            format!("{}", r.ts_change_fraction),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_compatible(source: &WindowedDataset, target: &WindowedDataset) -> Result<()> {
    if source.num_classes != target.num_classes {
        return Err(Error::Data(format!(
            "class count mismatch: source {} vs target {}",
            source.num_classes, target.num_classes
        )));
    }
    if source.num_channels != target.num_channels || source.window_len != target.window_len {
        return Err(Error::Data(format!(
            "window shape mismatch: source [{}, {}] vs target [{}, {}]",
            source.num_channels, source.window_len, target.num_channels, target.window_len
        )));
    }
    Ok(())
}

fn stack_windows(windows: &[&Window]) -> Tensor64 {
    let (c, l) = {
        let s = windows[0].data.shape();
        (s[0], s[1])
    };
    let mut data = Vec::with_capacity(windows.len() * c * l);
    for w in windows {
        data.extend_from_slice(w.data.data());
    }
    Tensor::new(vec![windows.len(), c, l], data)
}

/// One relabeling sweep over a dataset using the model's temporal
/// bottleneck features and state probabilities; returns the fraction of
/// windows whose state changed.
pub fn relabel_with_model(
    model: &mut DtsdaModel,
    dataset: &mut WindowedDataset,
    gamma: f64,
) -> Result<f64> {
    let model = RefCell::new(model);
    let cached_probs: RefCell<Vec<Vec<f64>>> = RefCell::new(Vec::new());
    let mut feature_fn = |ws: &[&Window]| {
        let x = stack_windows(ws);
        let (features, probs) = model.borrow_mut().state_features_and_probs(&x);
        *cached_probs.borrow_mut() = probs;
        features
    };
    let mut probs_fn = |_ws: &[&Window]| std::mem::take(&mut *cached_probs.borrow_mut());
    let stats = relabel_dataset(dataset, &mut feature_fn, &mut probs_fn, gamma)?;
    Ok(stats.change_fraction())
}

/// Shuffled minibatch index lists over both domains. Entries are
/// (dataset, window) index pairs; trailing batches of a single window are
/// dropped because batchnorm needs at least two rows.
fn make_batches(
    counts: [usize; 2],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(counts[0] + counts[1]);
    for (ds, &n) in counts.iter().enumerate() {
        all.extend((0..n).map(|i| (ds, i)));
    }
    all.shuffle(rng);
    all.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn run_phase(
    model: &mut DtsdaModel,
    opt: &mut Optimizer<f64>,
    source: &WindowedDataset,
    target: &WindowedDataset,
    batches: &[Vec<(usize, usize)>],
    phase: Phase,
    lambda: f64,
) -> Result<f64> {
    let sets = [source, target];
    let mut total = 0.0;
    let mut count = 0usize;
    for batch_idx in batches {
        let refs: Vec<&Window> = batch_idx
            .iter()
            .map(|&(ds, i)| &sets[ds].windows[i])
            .collect();
        let batch = Batch::from_windows(&refs, source.num_classes);
        let (parts, grads) = match phase {
            Phase::FineGrained => model.fine_grained_grads(&batch),
            Phase::TemporalState => model.temporal_grads(&batch, lambda),
            Phase::CrossUser => model.cross_user_grads(&batch, lambda),
        };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} in {phase:?}; lower the learning rate",
                parts.total
            )));
        }
        opt.step(&mut model.params, &grads)?;
        total += parts.total;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Build a seeded, untrained model matching the datasets, with every
/// temporal state reset to zero.
pub fn initialize(
    source: &mut WindowedDataset,
    target: &mut WindowedDataset,
    cfg: &TrainConfig,
) -> Result<DtsdaModel> {
    cfg.validate()?;
    check_compatible(source, target)?;
    let arch = ArchConfig {
        in_channels: source.num_channels,
        window_len: source.window_len,
        num_classes: source.num_classes,
        states: cfg.states,
    };
    for w in source.windows.iter_mut().chain(target.windows.iter_mut()) {
        w.ts = 0;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let mut model = DtsdaModel::new(arch, &mut init_rng)?;
    model.update_extractor_in_phases_2_3 = cfg.update_extractor;
    model.norm = source.norm.clone();
    Ok(model)
}

/// Full training run. The datasets must already be windowed, normalized
/// with shared source statistics and, for the target, anonymized.
pub fn fit(
    source: &mut WindowedDataset,
    target: &mut WindowedDataset,
    cfg: &TrainConfig,
) -> Result<(DtsdaModel, Vec<EpochLog>)> {
    let mut model = initialize(source, target, cfg)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x00B4_7C11));
    let counts = [source.windows.len(), target.windows.len()];
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let progress = epoch as f64 / cfg.epochs as f64;
        let lambda = lambda_schedule(progress, cfg.lambda_max);

        let batches = make_batches(counts, cfg.batch_size, &mut batch_rng);
        let loss_fine =
            run_phase(&mut model, &mut opt, source, target, &batches, Phase::FineGrained, 0.0)?;

        let mut changed = 0.0;
        let mut windows = 0.0;
        for ds in [&mut *source, &mut *target] {
            let n = ds.windows.len() as f64;
            changed += relabel_with_model(&mut model, ds, cfg.gamma)? * n;
            windows += n;
        }
        let ts_change_fraction = if windows > 0.0 { changed / windows } else { 0.0 };

        let batches = make_batches(counts, cfg.batch_size, &mut batch_rng);
        let loss_temporal =
            run_phase(&mut model, &mut opt, source, target, &batches, Phase::TemporalState, lambda)?;

        let batches = make_batches(counts, cfg.batch_size, &mut batch_rng);
        let loss_cross =
            run_phase(&mut model, &mut opt, source, target, &batches, Phase::CrossUser, lambda)?;

        log.push(EpochLog {
            epoch,
            lambda,
            loss_fine,
            loss_temporal,
            loss_cross,
            ts_change_fraction,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    model.trained = true;
    Ok((model, log))
}
