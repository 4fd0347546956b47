//! Evaluation metrics and the two reference baselines: a source-only
//! classifier and a domain-adversarial (gradient-reversal) variant that
//! shares its initialization and source batch stream with it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, BnState};
use crate::data::{Window, WindowedDataset, SOURCE_DOMAIN};
use crate::networks::{
    add_extractor, argmax_rows, ArchConfig, Batch, DtsdaModel, NamedGrads, Net,
};
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::synth::splitmix;
use crate::training::lambda_schedule;
use crate::{Error, Result};

const EVAL_BATCH: usize = 256;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / total as f64
    }

    /// Recall per true class; classes with no examples give None.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }
}

fn eval_batches(ds: &WindowedDataset) -> Vec<Vec<&Window>> {
    ds.windows.chunks(EVAL_BATCH).map(|c| c.iter().collect()).collect()
}

/// Target-domain confusion matrix of the full model; anonymized labels
/// are mapped back to true classes.
pub fn evaluate_model(model: &mut DtsdaModel, ds: &WindowedDataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    for chunk in eval_batches(ds) {
        let batch = Batch::from_windows(&chunk, ds.num_classes);
        let preds = model.predict_target(&batch.x)?;
        for (w, p) in chunk.iter().zip(preds) {
            cm.record(ds.true_class(w), p);
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    SourceOnly,
    Dann,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SourceOnly => "source_only",
            BaselineKind::Dann => "dann",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// peak reversal strength; only the adversarial variant reads it
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda_max: 1.0,
            seed: 0,
        }
    }
}

/// Classifier over the shared extractor; the adversarial variant adds a
/// domain discriminator behind gradient reversal.
pub struct BaselineModel {
    pub arch: ArchConfig,
    pub kind: BaselineKind,
    pub params: ParamSet<f64>,
    pub bn: BTreeMap<String, BnState<f64>>,
}

impl BaselineModel {
    /// The discriminator is initialized last so both variants draw
    /// identical shared-layer parameters from the same stream.
    pub fn new(arch: ArchConfig, kind: BaselineKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
        let mut params = ParamSet::new();
        let mut bn = BTreeMap::new();
        add_extractor(&mut params, &mut bn, arch.in_channels, &mut rng);
        crate::networks::add_bottleneck(&mut params, &mut bn, "baseline.bottleneck", arch.feature_dim(), &mut rng);
        crate::networks::add_linear(&mut params, "baseline.cls_class", crate::networks::BOTTLENECK_DIM, arch.num_classes, &mut rng);
        if kind == BaselineKind::Dann {
            crate::networks::add_discriminator(&mut params, &mut bn, "baseline.disc_domain", 2, &mut rng);
        }
        Ok(BaselineModel { arch, kind, params, bn })
    }

    fn check_input(&self, x: &crate::Tensor64) {
        assert_eq!(x.shape()[1], self.arch.in_channels, "channel count mismatch");
        assert_eq!(x.shape()[2], self.arch.window_len, "window length mismatch");
    }

    /// Source-class cross-entropy gradients, train-mode batchnorm.
    fn class_grads(&mut self, batch: &Batch) -> Result<(f64, NamedGrads)> {
        self.check_input(&batch.x);
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Train, Vec::new());
        let x = net.input(&batch.x);
        let f = net.extractor(x);
        let b = net.bottleneck(f, "baseline.bottleneck");
        let z = net.linear(b, "baseline.cls_class");
        let loss = net.g.softmax_cross_entropy(z, &batch.class);
        Ok(net.grads(loss))
    }

    /// Domain cross-entropy gradients through gradient reversal. Shared
    /// layers stay trainable but use their running statistics, so a zero
    /// reversal strength leaves them untouched bit for bit.
    fn domain_grads(&mut self, batch: &Batch, lambda: f64) -> Result<(f64, f64, NamedGrads)> {
        self.check_input(&batch.x);
        let mut net = Net::with_modes(&self.params, &mut self.bn, true, BnMode::Eval, Vec::new());
        let x = net.input(&batch.x);
        let f = net.extractor(x);
        let b = net.bottleneck(f, "baseline.bottleneck");
        net.set_bn_mode(BnMode::Train);
        let rev = net.g.gradient_reversal(b, lambda);
        let z = net.discriminator(rev, "baseline.disc_domain");
        let loss = net.g.softmax_cross_entropy(z, &batch.domain);
        let preds = argmax_rows(net.g.value(z));
        let correct = preds.iter().zip(&batch.domain).filter(|(p, d)| p == d).count();
        let disc_acc = correct as f64 / batch.len() as f64;
        let (value, grads) = net.grads(loss);
        Ok((value, disc_acc, grads))
    }

    /// Class predictions with eval-mode batchnorm throughout.
    pub fn predict(&mut self, x: &crate::Tensor64) -> Vec<usize> {
        self.check_input(x);
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Eval, Vec::new());
        let xid = net.input(x);
        let f = net.extractor(xid);
        let b = net.bottleneck(f, "baseline.bottleneck");
        let z = net.linear(b, "baseline.cls_class");
        argmax_rows(net.g.value(z))
    }
}

/// Per-epoch training record of a baseline run.
#[derive(Clone, Debug)]
pub struct BaselineEpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub class_loss: f64,
    pub domain_loss: f64,
    /// domain discriminator accuracy on its own batches; 0.5 is chance
    pub disc_accuracy: f64,
}

fn merge_grads(mut a: NamedGrads, b: NamedGrads) -> NamedGrads {
    for (name, g) in b {
        match a.iter_mut().find(|(n, _)| *n == name) {
            Some((_, acc)) => {
                for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => a.push((name, g)),
        }
    }
    a
}

/// Train a baseline on labeled source windows, with an optional
/// adversarial domain pass over both domains. Seeded and deterministic;
/// the source batch stream does not depend on the variant.
pub fn train_baseline(
    source: &WindowedDataset,
    target: &WindowedDataset,
    kind: BaselineKind,
    cfg: &BaselineConfig,
) -> Result<(BaselineModel, Vec<BaselineEpochLog>)> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be >= 2 for batchnorm".into()));
    }
    let source_idx: Vec<usize> = source
        .windows
        .iter()
        .enumerate()
        .filter(|(_, w)| w.domain == SOURCE_DOMAIN && w.class < source.num_classes)
        .map(|(i, _)| i)
        .collect();
    if source_idx.is_empty() {
        return Err(Error::Data("no labeled source windows".into()));
    }
    let arch = ArchConfig {
        in_channels: source.num_channels,
        window_len: source.window_len,
        num_classes: source.num_classes,
        states: 1,
    };
    let mut model = BaselineModel::new(arch, kind, cfg.seed)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    // independent batch streams so the source sequence is identical with
    // and without the adversarial pass
    let mut src_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x51C0));
    let mut dom_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0xD011));

    let mut mixed: Vec<(usize, usize)> = Vec::new();
    mixed.extend((0..source.windows.len()).map(|i| (0usize, i)));
    mixed.extend((0..target.windows.len()).map(|i| (1usize, i)));
    let sets = [source, target];

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = match kind {
            BaselineKind::SourceOnly => 0.0,
            BaselineKind::Dann => {
                lambda_schedule(epoch as f64 / cfg.epochs as f64, cfg.lambda_max)
            }
        };
        let mut order = source_idx.clone();
        order.shuffle(&mut src_rng);
        let src_batches: Vec<&[usize]> =
            order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).collect();

        let mut dom_batches: Vec<Vec<(usize, usize)>> = Vec::new();
        if kind == BaselineKind::Dann {
            while dom_batches.len() < src_batches.len() {
                mixed.shuffle(&mut dom_rng);
                dom_batches.extend(
                    mixed
                        .chunks(cfg.batch_size)
                        .filter(|c| c.len() >= 2)
                        .map(|c| c.to_vec()),
                );
            }
            dom_batches.truncate(src_batches.len());
        }

        let mut class_loss = 0.0;
        let mut domain_loss = 0.0;
        let mut disc_accuracy = 0.0;
        for (it, chunk) in src_batches.iter().enumerate() {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &source.windows[i]).collect();
            let batch = Batch::from_windows(&refs, source.num_classes);
            let (cl, grads) = model.class_grads(&batch)?;
            if !cl.is_finite() {
                return Err(Error::Numeric(format!("non-finite class loss {cl}")));
            }
            class_loss += cl;
            let grads = if kind == BaselineKind::Dann {
                let refs: Vec<&Window> = dom_batches[it]
                    .iter()
                    .map(|&(ds, i)| &sets[ds].windows[i])
                    .collect();
                let dom = Batch::from_windows(&refs, source.num_classes);
                let (dl, da, dgrads) = model.domain_grads(&dom, lambda)?;
                if !dl.is_finite() {
                    return Err(Error::Numeric(format!("non-finite domain loss {dl}")));
                }
                domain_loss += dl;
                disc_accuracy += da;
                merge_grads(grads, dgrads)
            } else {
                grads
            };
            opt.step(&mut model.params, &grads)?;
        }
        let n = src_batches.len().max(1) as f64;
        log.push(BaselineEpochLog {
            epoch,
            lambda,
            class_loss: class_loss / n,
            domain_loss: domain_loss / n,
            disc_accuracy: disc_accuracy / n,
        });
    }
    Ok((model, log))
}

/// Target-domain confusion matrix of a baseline.
pub fn evaluate_baseline(model: &mut BaselineModel, ds: &WindowedDataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    for chunk in eval_batches(ds) {
        let batch = Batch::from_windows(&chunk, ds.num_classes);
        let preds = model.predict(&batch.x);
        for (w, p) in chunk.iter().zip(preds) {
            cm.record(ds.true_class(w), p);
        }
    }
    Ok(cm)
}
