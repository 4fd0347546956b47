//! The four network pieces and their loss compositions.
//!
//! A shared convolutional feature extractor feeds three heads:
//!
//! 1. fine-grained head — composite pseudo-label classifier plus a
//!    domain classifier (the discriminator side, no gradient reversal);
//! 2. temporal-state head — state classifier plus class and domain
//!    discriminators behind gradient reversal;
//! 3. cross-user head — state classifier, source-class classifier and a
//!    domain discriminator behind gradient reversal.
//!
//! The extractor is updated only in the fine-grained phase unless
//! `update_extractor_in_phases_2_3` is set.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{softmax_rows, BnMode, BnState, Graph, NodeId};
use crate::data::{compose_pseudo_label, NormStats, Window};
use crate::params::{init_fan_in, ParamSet};
use crate::tensor::Tensor;
use crate::{Error, Result, Tensor64};

pub const CONV1_CHANNELS: usize = 32;
pub const CONV2_CHANNELS: usize = 64;
pub const KERNEL: usize = 5;
pub const BOTTLENECK_DIM: usize = 64;
pub const DISC_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// must be divisible by 4 (two k2/s2 pooling stages)
    pub window_len: usize,
    /// number of activity classes C
    pub num_classes: usize,
    /// number of temporal states T
    pub states: usize,
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        CONV2_CHANNELS * self.window_len / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len % 4 != 0 {
            return Err(Error::Config(format!(
                "window_len {} not divisible by 4; pad the dataset first",
                self.window_len
            )));
        }
        if self.num_classes < 1 || self.states < 1 || self.in_channels < 1 {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One training minibatch assembled from windows.
pub struct Batch {
    /// `[batch, channels, window_len]`
    pub x: Tensor64,
    /// class labels c in `[0, 2C-1]`
    pub class: Vec<usize>,
    pub domain: Vec<usize>,
    pub ts: Vec<usize>,
    /// composite labels `ts * 2C + c`
    pub pseudo: Vec<usize>,
}

impl Batch {
    pub fn from_windows(windows: &[&Window], num_classes: usize) -> Batch {
        assert!(!windows.is_empty(), "empty batch");
        let (channels, len) = {
            let s = windows[0].data.shape();
            (s[0], s[1])
        };
        let mut data = Vec::with_capacity(windows.len() * channels * len);
        for w in windows {
            data.extend_from_slice(w.data.data());
        }
        Batch {
            x: Tensor::new(vec![windows.len(), channels, len], data),
            class: windows.iter().map(|w| w.class).collect(),
            domain: windows.iter().map(|w| w.domain as usize).collect(),
            ts: windows.iter().map(|w| w.ts).collect(),
            pseudo: windows
                .iter()
                .map(|w| compose_pseudo_label(w.ts, w.class, num_classes))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

/// Loss value broken into its cross-entropy terms.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

pub type NamedGrads = Vec<(String, Tensor64)>;

/// Forward-pass builder shared by the full model and the baselines:
/// binds parameters into a tape, tracks which are trainable and owns the
/// batchnorm states for the pass.
pub(crate) struct Net<'m> {
    pub g: Graph<f64>,
    params: &'m ParamSet<f64>,
    bn: &'m mut BTreeMap<String, BnState<f64>>,
    train: bool,
    bn_mode: BnMode,
    frozen_prefixes: Vec<String>,
    binds: Vec<(String, NodeId)>,
}

impl<'m> Net<'m> {
    pub fn new(
        params: &'m ParamSet<f64>,
        bn: &'m mut BTreeMap<String, BnState<f64>>,
        mode: BnMode,
        frozen_prefixes: Vec<String>,
    ) -> Self {
        Self::with_modes(params, bn, mode == BnMode::Train, mode, frozen_prefixes)
    }

    /// Trainability and batchnorm behavior decoupled: the domain pass of
    /// the adversarial baseline keeps shared layers trainable while their
    /// running statistics stay frozen.
    pub fn with_modes(
        params: &'m ParamSet<f64>,
        bn: &'m mut BTreeMap<String, BnState<f64>>,
        train: bool,
        bn_mode: BnMode,
        frozen_prefixes: Vec<String>,
    ) -> Self {
        Net { g: Graph::new(), params, bn, train, bn_mode, frozen_prefixes, binds: Vec::new() }
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_mode = mode;
    }

    fn param(&mut self, name: &str) -> NodeId {
        let p = self.params.get(name);
        let trainable = self.train
            && p.requires_grad
            && !self.frozen_prefixes.iter().any(|f| name.starts_with(f.as_str()));
        let id = self.g.leaf(p.value.clone(), trainable);
        if trainable {
            self.binds.push((name.to_string(), id));
        }
        id
    }

    pub fn input(&mut self, x: &Tensor64) -> NodeId {
        self.g.leaf(x.clone(), false)
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.g.linear(x, w, b)
    }

    fn conv(&mut self, x: NodeId, prefix: &str, stride: usize, padding: usize) -> NodeId {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.g.conv1d(x, w, b, stride, padding)
    }

    fn batchnorm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let state = self
            .bn
            .get_mut(prefix)
            .unwrap_or_else(|| panic!("missing batchnorm state {prefix}"));
        let mode = self.bn_mode;
        self.g.batchnorm1d(x, gamma, beta, state, mode)
    }

    /// conv -> bn -> relu -> maxpool, twice; flatten.
    pub fn extractor(&mut self, x: NodeId) -> NodeId {
        let pad = KERNEL / 2;
        let c1 = self.conv(x, "feature_extractor.conv1", 1, pad);
        let b1 = self.batchnorm(c1, "feature_extractor.bn1");
        let r1 = self.g.relu(b1);
        let p1 = self.g.maxpool1d(r1, 2, 2);
        let c2 = self.conv(p1, "feature_extractor.conv2", 1, pad);
        let b2 = self.batchnorm(c2, "feature_extractor.bn2");
        let r2 = self.g.relu(b2);
        let p2 = self.g.maxpool1d(r2, 2, 2);
        let shape = self.g.value(p2).shape().to_vec();
        self.g.reshape(p2, vec![shape[0], shape[1] * shape[2]])
    }

    /// linear -> bn
    pub fn bottleneck(&mut self, f: NodeId, prefix: &str) -> NodeId {
        let l = self.linear(f, &format!("{prefix}.fc"));
        self.batchnorm(l, &format!("{prefix}.bn"))
    }

    /// fc -> bn -> relu -> fc -> bn -> relu -> fc
    pub fn discriminator(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let l1 = self.linear(x, &format!("{prefix}.fc1"));
        let b1 = self.batchnorm(l1, &format!("{prefix}.bn1"));
        let r1 = self.g.relu(b1);
        let l2 = self.linear(r1, &format!("{prefix}.fc2"));
        let b2 = self.batchnorm(l2, &format!("{prefix}.bn2"));
        let r2 = self.g.relu(b2);
        self.linear(r2, &format!("{prefix}.fc3"))
    }

    /// Collect named gradients for every trainable binding; bindings the
    /// loss does not reach get zero gradients.
    pub fn grads(self, loss: NodeId) -> (f64, NamedGrads) {
        let loss_value = self.g.value(loss).scalar_value();
        let shapes: Vec<Vec<usize>> = self
            .binds
            .iter()
            .map(|(_, id)| self.g.value(*id).shape().to_vec())
            .collect();
        let binds = self.binds;
        let map = self.g.backward(loss);
        let grads = binds
            .into_iter()
            .zip(shapes)
            .map(|((name, id), shape)| (name, map.get_or_zeros(id, &shape)))
            .collect();
        (loss_value, grads)
    }
}

// parameter construction helpers -----------------------------------

pub(crate) fn add_linear(params: &mut ParamSet<f64>, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    params.add(&format!("{prefix}.weight"), init_fan_in(vec![d_out, d_in], d_in, rng));
    params.add(&format!("{prefix}.bias"), Tensor::zeros(vec![d_out]));
}

fn add_conv(
    params: &mut ParamSet<f64>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) {
    params.add(
        &format!("{prefix}.weight"),
        init_fan_in(vec![c_out, c_in, KERNEL], c_in * KERNEL, rng),
    );
    params.add(&format!("{prefix}.bias"), Tensor::zeros(vec![c_out]));
}

fn add_bn(
    params: &mut ParamSet<f64>,
    bn: &mut BTreeMap<String, BnState<f64>>,
    prefix: &str,
    channels: usize,
) {
    params.add(&format!("{prefix}.gamma"), Tensor::full(vec![channels], 1.0));
    params.add(&format!("{prefix}.beta"), Tensor::zeros(vec![channels]));
    bn.insert(prefix.to_string(), BnState::new(channels));
}

pub(crate) fn add_bottleneck(
    params: &mut ParamSet<f64>,
    bn: &mut BTreeMap<String, BnState<f64>>,
    prefix: &str,
    d_in: usize,
    rng: &mut impl Rng,
) {
    add_linear(params, &format!("{prefix}.fc"), d_in, BOTTLENECK_DIM, rng);
    add_bn(params, bn, &format!("{prefix}.bn"), BOTTLENECK_DIM);
}

pub(crate) fn add_discriminator(
    params: &mut ParamSet<f64>,
    bn: &mut BTreeMap<String, BnState<f64>>,
    prefix: &str,
    d_out: usize,
    rng: &mut impl Rng,
) {
    add_linear(params, &format!("{prefix}.fc1"), BOTTLENECK_DIM, DISC_HIDDEN, rng);
    add_bn(params, bn, &format!("{prefix}.bn1"), DISC_HIDDEN);
    add_linear(params, &format!("{prefix}.fc2"), DISC_HIDDEN, DISC_HIDDEN, rng);
    add_bn(params, bn, &format!("{prefix}.bn2"), DISC_HIDDEN);
    add_linear(params, &format!("{prefix}.fc3"), DISC_HIDDEN, d_out, rng);
}

/// Shared feature extractor parameters; used by the full model and both
/// baselines so seeded initialization draws match.
pub(crate) fn add_extractor(
    params: &mut ParamSet<f64>,
    bn: &mut BTreeMap<String, BnState<f64>>,
    in_channels: usize,
    rng: &mut impl Rng,
) {
    add_conv(params, "feature_extractor.conv1", in_channels, CONV1_CHANNELS, rng);
    add_bn(params, bn, "feature_extractor.bn1", CONV1_CHANNELS);
    add_conv(params, "feature_extractor.conv2", CONV1_CHANNELS, CONV2_CHANNELS, rng);
    add_bn(params, bn, "feature_extractor.bn2", CONV2_CHANNELS);
}

/// The full three-component model.
#[derive(Clone, Debug)]
pub struct DtsdaModel {
    pub arch: ArchConfig,
    pub params: ParamSet<f64>,
    pub bn: BTreeMap<String, BnState<f64>>,
    pub norm: Option<NormStats>,
    pub trained: bool,
    pub update_extractor_in_phases_2_3: bool,
}

impl DtsdaModel {
    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let (c, t) = (arch.num_classes, arch.states);
        let feat = arch.feature_dim();
        let mut params = ParamSet::new();
        let mut bn = BTreeMap::new();

        add_extractor(&mut params, &mut bn, arch.in_channels, rng);

        add_bottleneck(&mut params, &mut bn, "fine.bottleneck", feat, rng);
        add_linear(&mut params, "fine.cls_pcts", BOTTLENECK_DIM, t * 2 * c, rng);
        add_linear(&mut params, "fine.cls_domain", BOTTLENECK_DIM, 2, rng);

        add_bottleneck(&mut params, &mut bn, "temporal.bottleneck", feat, rng);
        add_linear(&mut params, "temporal.cls_state", BOTTLENECK_DIM, t, rng);
        add_discriminator(&mut params, &mut bn, "temporal.disc_class", 2 * c, rng);
        add_discriminator(&mut params, &mut bn, "temporal.disc_domain", 2, rng);

        add_bottleneck(&mut params, &mut bn, "cross.bottleneck", feat, rng);
        add_linear(&mut params, "cross.cls_state", BOTTLENECK_DIM, t, rng);
        add_linear(&mut params, "cross.cls_class", BOTTLENECK_DIM, c, rng);
        add_discriminator(&mut params, &mut bn, "cross.disc_domain", 2, rng);

        // width contracts
        assert_eq!(params.get("fine.cls_pcts.weight").value.shape()[0], t * 2 * c);
        assert_eq!(params.get("temporal.cls_state.weight").value.shape()[0], t);
        assert_eq!(params.get("cross.cls_state.weight").value.shape()[0], t);
        assert_eq!(params.get("temporal.disc_class.fc3.weight").value.shape()[0], 2 * c);
        assert_eq!(params.get("fine.cls_domain.weight").value.shape()[0], 2);
        assert_eq!(params.get("temporal.disc_domain.fc3.weight").value.shape()[0], 2);
        assert_eq!(params.get("cross.disc_domain.fc3.weight").value.shape()[0], 2);
        assert_eq!(params.get("cross.cls_class.weight").value.shape()[0], c);

        Ok(DtsdaModel {
            arch,
            params,
            bn,
            norm: None,
            trained: false,
            update_extractor_in_phases_2_3: false,
        })
    }

    fn check_input(&self, x: &Tensor64) {
        assert_eq!(x.shape().len(), 3, "batch must be [b, channels, len]");
        assert_eq!(
            x.shape()[1],
            self.arch.in_channels,
            "channel count mismatch with trained parameters"
        );
        assert_eq!(x.shape()[2], self.arch.window_len, "window length mismatch");
    }

    fn frozen_for_phase_2_3(&self) -> Vec<String> {
        if self.update_extractor_in_phases_2_3 {
            Vec::new()
        } else {
            vec!["feature_extractor".to_string()]
        }
    }

    /// L_f = CE(pseudo-class-temporal-state) + CE(domain), gradients for
    /// the extractor, fine bottleneck and both classifiers.
    pub fn fine_grained_grads(&mut self, batch: &Batch) -> (LossParts, NamedGrads) {
        self.check_input(&batch.x);
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Train, Vec::new());
        let x = net.input(&batch.x);
        let f = net.extractor(x);
        let b = net.bottleneck(f, "fine.bottleneck");
        let za = net.linear(b, "fine.cls_pcts");
        let l_pctsf = net.g.softmax_cross_entropy(za, &batch.pseudo);
        let zb = net.linear(b, "fine.cls_domain");
        let l_df = net.g.softmax_cross_entropy(zb, &batch.domain);
        let total = net.g.add(l_pctsf, l_df);
        let terms = vec![
            ("pctsf", net.g.value(l_pctsf).scalar_value()),
            ("df", net.g.value(l_df).scalar_value()),
        ];
        let (value, grads) = net.grads(total);
        (LossParts { total: value, terms }, grads)
    }

    /// L_t = CE(state) + CE(class discriminator) + CE(domain
    /// discriminator), discriminators behind gradient reversal; the
    /// extractor is frozen unless configured otherwise.
    pub fn temporal_grads(&mut self, batch: &Batch, lambda: f64) -> (LossParts, NamedGrads) {
        self.check_input(&batch.x);
        let frozen = self.frozen_for_phase_2_3();
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Train, frozen);
        let x = net.input(&batch.x);
        let f = net.extractor(x);
        let bt = net.bottleneck(f, "temporal.bottleneck");
        let zc = net.linear(bt, "temporal.cls_state");
        let l_tt = net.g.softmax_cross_entropy(zc, &batch.ts);
        let rev = net.g.gradient_reversal(bt, lambda);
        let zd = net.discriminator(rev, "temporal.disc_class");
        let l_ct = net.g.softmax_cross_entropy(zd, &batch.class);
        let ze = net.discriminator(rev, "temporal.disc_domain");
        let l_dt = net.g.softmax_cross_entropy(ze, &batch.domain);
        let s = net.g.add(l_tt, l_ct);
        let total = net.g.add(s, l_dt);
        let terms = vec![
            ("tt", net.g.value(l_tt).scalar_value()),
            ("ct", net.g.value(l_ct).scalar_value()),
            ("dt", net.g.value(l_dt).scalar_value()),
        ];
        let (value, grads) = net.grads(total);
        (LossParts { total: value, terms }, grads)
    }

    /// L_c = CE(state) + CE(source class, source rows only) + CE(domain
    /// discriminator behind gradient reversal).
    pub fn cross_user_grads(&mut self, batch: &Batch, lambda: f64) -> (LossParts, NamedGrads) {
        self.check_input(&batch.x);
        let frozen = self.frozen_for_phase_2_3();
        let source_rows: Vec<usize> = batch
            .domain
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Train, frozen);
        let x = net.input(&batch.x);
        let f = net.extractor(x);
        let bc = net.bottleneck(f, "cross.bottleneck");
        let zf = net.linear(bc, "cross.cls_state");
        let l_tc = net.g.softmax_cross_entropy(zf, &batch.ts);
        let mut terms = vec![("tc", net.g.value(l_tc).scalar_value())];
        let mut running = l_tc;
        if source_rows.is_empty() {
            eprintln!("warning: batch has no source windows; source-class term skipped");
        } else {
            let bc_src = net.g.gather_rows(bc, &source_rows);
            let zg = net.linear(bc_src, "cross.cls_class");
            let targets: Vec<usize> = source_rows.iter().map(|&i| batch.class[i]).collect();
            let l_cc = net.g.softmax_cross_entropy(zg, &targets);
            terms.push(("cc", net.g.value(l_cc).scalar_value()));
            running = net.g.add(running, l_cc);
        }
        let rev = net.g.gradient_reversal(bc, lambda);
        let zh = net.discriminator(rev, "cross.disc_domain");
        let l_dc = net.g.softmax_cross_entropy(zh, &batch.domain);
        terms.push(("dc", net.g.value(l_dc).scalar_value()));
        let total = net.g.add(running, l_dc);
        let (value, grads) = net.grads(total);
        (LossParts { total: value, terms }, grads)
    }

    /// Forward-only loss of one phase; used by gradient-check oracles.
    pub fn phase_loss(&mut self, batch: &Batch, lambda: f64, phase: Phase) -> LossParts {
        let (parts, _) = match phase {
            Phase::FineGrained => self.fine_grained_grads(batch),
            Phase::TemporalState => self.temporal_grads(batch, lambda),
            Phase::CrossUser => self.cross_user_grads(batch, lambda),
        };
        parts
    }

    /// Bottleneck features and temporal-state softmax rows in eval mode,
    /// for pseudo temporal state labeling.
    pub fn state_features_and_probs(&mut self, x: &Tensor64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.check_input(x);
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Eval, Vec::new());
        let xid = net.input(x);
        let f = net.extractor(xid);
        let bt = net.bottleneck(f, "temporal.bottleneck");
        let zc = net.linear(bt, "temporal.cls_state");
        let features = rows_of(net.g.value(bt));
        let probs = rows_of(&softmax_rows(net.g.value(zc)));
        (features, probs)
    }

    /// Class predictions in `[0, C-1]`: extractor -> cross-user
    /// bottleneck -> source-class classifier, eval-mode batchnorm.
    pub fn predict_target(&mut self, x: &Tensor64) -> Result<Vec<usize>> {
        if !self.trained {
            return Err(Error::Data("model has not been trained".into()));
        }
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_unchecked(&mut self, x: &Tensor64) -> Vec<usize> {
        self.check_input(x);
        let mut net = Net::new(&self.params, &mut self.bn, BnMode::Eval, Vec::new());
        let xid = net.input(x);
        let f = net.extractor(xid);
        let bc = net.bottleneck(f, "cross.bottleneck");
        let z = net.linear(bc, "cross.cls_class");
        argmax_rows(net.g.value(z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    FineGrained,
    TemporalState,
    CrossUser,
}

pub fn rows_of(t: &Tensor64) -> Vec<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

/// Row-wise argmax, ties to the lower index.
pub fn argmax_rows(t: &Tensor64) -> Vec<usize> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &t.data()[i * d..(i + 1) * d];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
