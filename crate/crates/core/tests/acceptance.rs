//! Acceptance gate: each test checks one release criterion end to end
//! against an independent oracle (exhaustive enumeration, central finite
//! differences, synthetic ground truth) and prints a single summary
//! line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtsda_core::autodiff::{BnMode, BnState, NodeId};
use dtsda_core::data::{compose_pseudo_label, decompose_pseudo_label, normalize_pair, Window};
use dtsda_core::eval::{
    evaluate_baseline, evaluate_model, train_baseline, BaselineConfig, BaselineKind,
};
use dtsda_core::labeling::{
    build_distance_matrix, build_penalty_matrix, min_cost_state_path, relabel_dataset, Centroids,
    DistanceMatrix,
};
use dtsda_core::networks::{ArchConfig, Batch, DtsdaModel, Phase};
use dtsda_core::synth::{synthesize_dataset, SynthSpec};
use dtsda_core::tensor::Tensor;
use dtsda_core::training::{fit, initialize, TrainConfig};
use dtsda_core::{Graph64, Tensor64};

// ---------------------------------------------------------------- oracles

/// Exhaustive minimum over all T^N state paths. Costs accumulate in the
/// same association order as the dynamic program so the comparison can
/// be exact.
fn brute_force_best(dist: &DistanceMatrix<f64>, gamma: f64) -> (f64, Vec<usize>) {
    let states = dist.m.len();
    let n = dist.m[0].len();
    let penalty = |a: usize, b: usize| if a == b { 0.0 } else { gamma };
    let mut best_cost = f64::INFINITY;
    let mut best_path = vec![0; n];
    let mut path = vec![0usize; n];
    loop {
        // fold from the end: acc_i = (acc_{i+1} + d_{i+1}) + p(i, i+1)
        let mut acc = 0.0;
        for i in (0..n - 1).rev() {
            acc = acc + dist.m[path[i + 1]][i + 1] + penalty(path[i], path[i + 1]);
        }
        let cost = acc + dist.m[path[0]][0];
        if cost < best_cost {
            best_cost = cost;
            best_path.copy_from_slice(&path);
        }
        // odometer increment
        let mut pos = n;
        loop {
            if pos == 0 {
                return (best_cost, best_path);
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < states {
                break;
            }
            path[pos] = 0;
        }
    }
}

fn random_distances(states: usize, n: usize, rng: &mut ChaCha8Rng) -> DistanceMatrix<f64> {
    DistanceMatrix {
        m: (0..states)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect(),
    }
}

fn path_cost(dist: &DistanceMatrix<f64>, gamma: f64, path: &[usize]) -> f64 {
    let mut acc = 0.0;
    for i in (0..path.len() - 1).rev() {
        acc = acc + dist.m[path[i + 1]][i + 1] + if path[i] == path[i + 1] { 0.0 } else { gamma };
    }
    acc + dist.m[path[0]][0]
}

#[test]
fn state_path_equals_exhaustive_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let gammas = [0.0, 0.1, 0.5, 2.0];
    let mut checked = 0usize;
    while checked < 1000 {
        let states = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let gamma = gammas[checked % gammas.len()];
        let dist = random_distances(states, n, &mut rng);
        let penalty = build_penalty_matrix(states, gamma).unwrap();
        let got = min_cost_state_path(&dist, &penalty).unwrap();
        let (want_cost, _) = brute_force_best(&dist, gamma);
        assert_eq!(
            got.total_cost, want_cost,
            "instance {checked}: T={states} N={n} gamma={gamma}"
        );
        assert_eq!(
            path_cost(&dist, gamma, &got.path),
            got.total_cost,
            "returned path does not attain its reported cost"
        );
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "enumeration comparison took {secs:.1}s");
    println!("acceptance 01 state-path oracle: pass ({checked} instances, {secs:.2}s)");
}

// ---------------------------------------------------- finite differences

/// Build a scalar loss from leaf tensors. The closure must be pure.
type BuildFn<'a> = dyn Fn(&mut Graph64, &[NodeId]) -> NodeId + 'a;

fn loss_value(build: &BuildFn, inputs: &[Tensor64]) -> f64 {
    let mut g = Graph64::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.value(loss).scalar_value()
}

fn analytic_grads(build: &BuildFn, inputs: &[Tensor64]) -> Vec<Tensor64> {
    let mut g = Graph64::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let grads = g.backward(loss);
    ids.iter()
        .zip(shapes)
        .map(|(&id, shape)| grads.get_or_zeros(id, &shape))
        .collect()
}

/// Max relative error between analytic and central-difference gradients
/// over every coordinate of every input.
fn fd_max_rel_err(build: &BuildFn, inputs: &[Tensor64]) -> f64 {
    const H: f64 = 1e-5;
    let analytic = analytic_grads(build, inputs);
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor64> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for k in 0..inputs[ti].numel() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + H;
            let up = loss_value(build, &work);
            work[ti].data_mut()[k] = orig - H;
            let down = loss_value(build, &work);
            work[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[ti].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

/// Uniform values nudged away from zero (relu kink).
fn rand_tensor_off_kink(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor64 {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 5e-2 {
            *v += if *v >= 0.0 { 5e-2 } else { -5e-2 };
        }
    }
    t
}

/// Distinct jitter so maxpool windows have unique maxima.
fn rand_tensor_distinct(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor64 {
    let mut t = rand_tensor(shape, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-3;
    }
    t
}

/// Scalarize a (possibly non-scalar) node with fixed non-uniform
/// weights so upstream gradients differ per coordinate.
fn weighted_total(g: &mut Graph64, id: NodeId) -> NodeId {
    let numel = g.value(id).numel();
    if g.value(id).is_scalar() {
        return id;
    }
    let flat = g.reshape(id, vec![1, numel]);
    let w = Tensor::new(
        vec![1, numel],
        (0..numel).map(|i| 0.3 + 0.05 * (i as f64) * (if i % 2 == 0 { 1.0 } else { -1.0 })).collect(),
    );
    let wid = g.leaf(w, false);
    let bid = g.leaf(Tensor::zeros(vec![1]), false);
    let scored = g.linear(flat, wid, bid);
    g.sum(scored)
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    const TOL: f64 = 1e-4;
    const CASES: usize = 20;

    let check = |name: &str, inputs: Vec<Tensor64>, build: &BuildFn| {
        let err = fd_max_rel_err(build, &inputs);
        assert!(err < TOL, "{name}: max relative error {err:.3e}");
    };

    for case in 0..CASES {
        let b = 2 + case % 3;
        let f = 2 + case % 4;

        let xs = vec![rand_tensor(vec![b, f], &mut rng), rand_tensor(vec![b, f], &mut rng)];
        check("add", xs, &|g, ids| {
            let s = g.add(ids[0], ids[1]);
            weighted_total(g, s)
        });

        check("sum", vec![rand_tensor(vec![b, f], &mut rng)], &|g, ids| g.sum(ids[0]));

        check("reshape", vec![rand_tensor(vec![b, 2, 4], &mut rng)], &|g, ids| {
            let r = g.reshape(ids[0], vec![b, 8]);
            weighted_total(g, r)
        });

        let o = 2 + case % 2;
        check(
            "linear",
            vec![
                rand_tensor(vec![b, f], &mut rng),
                rand_tensor(vec![o, f], &mut rng),
                rand_tensor(vec![o], &mut rng),
            ],
            &|g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                weighted_total(g, y)
            },
        );

        let (c_in, c_out, l, k) = (1 + case % 2, 2, 6 + case % 3, 3);
        let stride = 1 + case % 2;
        let padding = case % 3;
        check(
            "conv1d",
            vec![
                rand_tensor(vec![b, c_in, l], &mut rng),
                rand_tensor(vec![c_out, c_in, k], &mut rng),
                rand_tensor(vec![c_out], &mut rng),
            ],
            &|g, ids| {
                let y = g.conv1d(ids[0], ids[1], ids[2], stride, padding);
                weighted_total(g, y)
            },
        );

        check(
            "batchnorm1d_train_2d",
            vec![
                rand_tensor(vec![b.max(2), f], &mut rng),
                rand_tensor(vec![f], &mut rng),
                rand_tensor(vec![f], &mut rng),
            ],
            &|g, ids| {
                let mut st = BnState::new(f);
                let y = g.batchnorm1d(ids[0], ids[1], ids[2], &mut st, BnMode::Train);
                weighted_total(g, y)
            },
        );

        let c = 2;
        check(
            "batchnorm1d_train_3d",
            vec![
                rand_tensor(vec![b, c, 4], &mut rng),
                rand_tensor(vec![c], &mut rng),
                rand_tensor(vec![c], &mut rng),
            ],
            &|g, ids| {
                let mut st = BnState::new(c);
                let y = g.batchnorm1d(ids[0], ids[1], ids[2], &mut st, BnMode::Train);
                weighted_total(g, y)
            },
        );

        let mean: Vec<f64> = (0..f).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..f).map(|i| 0.5 + 0.2 * i as f64).collect();
        check(
            "batchnorm1d_eval",
            vec![
                rand_tensor(vec![b, f], &mut rng),
                rand_tensor(vec![f], &mut rng),
                rand_tensor(vec![f], &mut rng),
            ],
            &|g, ids| {
                let mut st = BnState::new(f);
                st.running_mean = mean.clone();
                st.running_var = var.clone();
                let y = g.batchnorm1d(ids[0], ids[1], ids[2], &mut st, BnMode::Eval);
                weighted_total(g, y)
            },
        );

        check("relu", vec![rand_tensor_off_kink(vec![b, f], &mut rng)], &|g, ids| {
            let y = g.relu(ids[0]);
            weighted_total(g, y)
        });

        check(
            "maxpool1d",
            vec![rand_tensor_distinct(vec![b, 2, 8], &mut rng)],
            &|g, ids| {
                let y = g.maxpool1d(ids[0], 2, 2);
                weighted_total(g, y)
            },
        );

        let classes = 3;
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        check(
            "softmax_cross_entropy",
            vec![rand_tensor(vec![b, classes], &mut rng)],
            &|g, ids| g.softmax_cross_entropy(ids[0], &targets),
        );

        let rows: Vec<usize> = (0..b).filter(|i| i % 2 == case % 2).collect();
        if !rows.is_empty() {
            check("gather_rows", vec![rand_tensor(vec![b, f], &mut rng)], &|g, ids| {
                let y = g.gather_rows(ids[0], &rows);
                weighted_total(g, y)
            });
        }
    }

    // composite losses: finite differences on sampled coordinates of a
    // full model, one pass per phase
    let arch = ArchConfig { in_channels: 2, window_len: 8, num_classes: 2, states: 2 };
    for case in 0..CASES {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(300 + case as u64);
        let pristine = DtsdaModel::new(arch, &mut seed_rng).unwrap();
        let batch = random_batch(&mut seed_rng);
        let lambda = 0.7;
        for phase in [Phase::FineGrained, Phase::TemporalState, Phase::CrossUser] {
            let grads = {
                let mut m = pristine.clone();
                let (_, g) = match phase {
                    Phase::FineGrained => m.fine_grained_grads(&batch),
                    Phase::TemporalState => m.temporal_grads(&batch, lambda),
                    Phase::CrossUser => m.cross_user_grads(&batch, lambda),
                };
                g
            };
            let loss_at = |m: &DtsdaModel| {
                let mut m = m.clone();
                m.phase_loss(&batch, lambda, phase).total
            };
            const H: f64 = 1e-5;
            let mut checked = 0;
            let mut coord_rng = ChaCha8Rng::seed_from_u64(400 + case as u64);
            while checked < 8 {
                let (name, grad) = &grads[coord_rng.gen_range(0..grads.len())];
                // parameters upstream of a gradient reversal receive a
                // sign-flipped adversarial component by design, so the
                // total loss is not their antiderivative; the reversal
                // itself is checked in the dedicated contract test
                let upstream_of_reversal = phase != Phase::FineGrained
                    && (name.contains("bottleneck") || name.starts_with("feature_extractor"));
                if upstream_of_reversal {
                    continue;
                }
                let k = coord_rng.gen_range(0..grad.numel());
                let mut up_m = pristine.clone();
                up_m.params.get_mut(name).value.data_mut()[k] += H;
                let mut down_m = pristine.clone();
                down_m.params.get_mut(name).value.data_mut()[k] -= H;
                let numeric = (loss_at(&up_m) - loss_at(&down_m)) / (2.0 * H);
                let a = grad.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    err < TOL,
                    "{phase:?} {name}[{k}]: analytic {a:.6e} vs numeric {numeric:.6e}"
                );
                checked += 1;
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s");
    println!("acceptance 02 finite-difference gradients: pass ({CASES} cases/op, {secs:.2}s)");
}

fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
    let windows: Vec<Window> = (0..6)
        .map(|i| Window {
            data: {
                let mut t = Tensor64::zeros(vec![2, 8]);
                for v in t.data_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                t
            },
            // source windows carry true classes 0..C, target windows
            // the anonymized range C..2C (C = 2 here)
            class: if i % 2 == 0 { rng.gen_range(0..2) } else { rng.gen_range(2..4) },
            domain: (i % 2) as u8,
            temporal_index: i,
            segment_id: 0,
            ts: rng.gen_range(0..2),
        })
        .collect();
    let refs: Vec<&Window> = windows.iter().collect();
    Batch::from_windows(&refs, 2)
}

// ----------------------------------------------------- reversal contract

#[test]
fn gradient_reversal_contract_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // forward bitwise identity and backward scaling on random tensors
    for _ in 0..50 {
        let x = rand_tensor(vec![3, 5], &mut rng);
        let lambda = rng.gen_range(0.0..2.0);

        let mut g = Graph64::new();
        let xid = g.leaf(x.clone(), true);
        let rev = g.gradient_reversal(xid, lambda);
        for (a, b) in x.data().iter().zip(g.value(rev).data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "forward must be bitwise identity");
        }
        let total = weighted_total(&mut g, rev);
        let got = g.backward(total).get_or_zeros(xid, x.shape());

        let mut g2 = Graph64::new();
        let xid2 = g2.leaf(x.clone(), true);
        let total2 = weighted_total(&mut g2, xid2);
        let plain = g2.backward(total2).get_or_zeros(xid2, x.shape());

        for (r, p) in got.data().iter().zip(plain.data()) {
            assert_eq!(*r, -lambda * p, "backward must equal -lambda x upstream");
        }
    }

    // zero reversal strength reduces the adversarial baseline to the
    // source-only baseline: identical parameters and predictions
    let mut spec = SynthSpec::clean(2, 2, 42);
    spec.segments_per_class = 1;
    spec.windows_per_segment = 12;
    let (src, tgt) = synthesize_dataset(&spec).unwrap();
    let (mut src, mut tgt) = (src.dataset, tgt.dataset);
    tgt.anonymize_target_classes(42).unwrap();
    normalize_pair(&mut src, &mut tgt).unwrap();
    let cfg = BaselineConfig { epochs: 2, batch_size: 8, seed: 9, ..BaselineConfig::default() };
    let (mut plain, _) = train_baseline(&src, &tgt, BaselineKind::SourceOnly, &cfg).unwrap();
    let zero = BaselineConfig { lambda_max: 0.0, ..cfg };
    let (mut adv, _) = train_baseline(&src, &tgt, BaselineKind::Dann, &zero).unwrap();
    for p in plain.params.iter() {
        assert_eq!(
            p.value.data(),
            adv.params.get(&p.name).value.data(),
            "{} diverged under zero reversal strength",
            p.name
        );
    }
    let refs: Vec<&Window> = tgt.windows.iter().collect();
    let x = Batch::from_windows(&refs, tgt.num_classes).x;
    assert_eq!(plain.predict(&x), adv.predict(&x));
    println!("acceptance 03 gradient reversal contract: pass");
}

// ------------------------------------------------- switch monotonicity

#[test]
fn switch_count_monotone_in_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let gammas = [0.0, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0];
    for instance in 0..500 {
        let states = rng.gen_range(2..=5);
        let n = rng.gen_range(2..=12);
        let dist = random_distances(states, n, &mut rng);
        let mut last = usize::MAX;
        for &gamma in &gammas {
            let penalty = build_penalty_matrix(states, gamma).unwrap();
            let sp = min_cost_state_path(&dist, &penalty).unwrap();
            if last != usize::MAX {
                assert!(
                    sp.switch_count <= last,
                    "instance {instance}: switches rose from {last} to {} as gamma grew to {gamma}",
                    sp.switch_count
                );
            }
            last = sp.switch_count;
        }
    }
    println!("acceptance 04 switch-count monotonicity: pass (500 instances)");
}

// ------------------------------------------------- pseudo-label algebra

#[test]
fn pseudo_labels_bijective_and_zero_at_start() {
    for c in 1..=10usize {
        for ts in 0..5usize {
            for class in 0..2 * c {
                let y = compose_pseudo_label(ts, class, c);
                assert_eq!(decompose_pseudo_label(y, c), (ts, class));
            }
        }
    }

    // after initialization every window has ts = 0, so the composite
    // label collapses to the class label
    let mut spec = SynthSpec::clean(3, 3, 7);
    spec.segments_per_class = 2;
    spec.windows_per_segment = 20;
    let (src, tgt) = synthesize_dataset(&spec).unwrap();
    let (mut src, mut tgt) = (src.dataset, tgt.dataset);
    tgt.anonymize_target_classes(7).unwrap();
    normalize_pair(&mut src, &mut tgt).unwrap();
    let cfg = TrainConfig { states: 3, seed: 7, ..TrainConfig::default() };
    let _model = initialize(&mut src, &mut tgt, &cfg).unwrap();
    for w in src.windows.iter().chain(&tgt.windows) {
        assert_eq!(w.ts, 0);
        assert_eq!(compose_pseudo_label(w.ts, w.class, src.num_classes), w.class);
    }
    println!("acceptance 05 pseudo-label bijection: pass");
}

// --------------------------------------------------- state recovery

fn window_mean_features(ws: &[&Window]) -> Vec<Vec<f64>> {
    ws.iter()
        .map(|w| {
            let (c, l) = (w.data.shape()[0], w.data.shape()[1]);
            (0..c)
                .map(|ch| (0..l).map(|t| w.data.at2(ch, t)).sum::<f64>() / l as f64)
                .collect()
        })
        .collect()
}

fn position_prior(n: usize, states: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let prior = (i * states / n.max(1)).min(states - 1);
            (0..states)
                .map(|s| if s == prior { 0.8 } else { 0.2 / (states - 1).max(1) as f64 })
                .collect()
        })
        .collect()
}

fn best_permutation_agreement(pred: &[usize], truth: &[usize], states: usize) -> f64 {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for slot in 0..n {
                let mut q: Vec<usize> = p.iter().map(|&v| v + usize::from(v >= slot)).collect();
                q.insert(0, slot);
                out.push(q);
            }
        }
        out
    }
    let mut best = 0.0f64;
    for perm in permutations(states) {
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| perm[p] == t)
            .count();
        best = best.max(hits as f64 / pred.len() as f64);
    }
    best
}

#[test]
fn clean_synthetic_states_recovered() {
    let states = 3;
    let mut total = 0.0;
    let seeds = [11u64, 12, 13, 14, 15];
    for &seed in &seeds {
        let mut spec = SynthSpec::clean(2, states, seed);
        // roughly one left-to-right sweep per segment
        spec.windows_per_segment = 18;
        spec.segments_per_class = 10;
        let (user, _) = synthesize_dataset(&spec).unwrap();
        let mut ds = user.dataset;
        let truth = user.truth_states;

        let mut feature_fn = |ws: &[&Window]| window_mean_features(ws);
        let mut probs_fn = |ws: &[&Window]| position_prior(ws.len(), states);
        relabel_dataset(&mut ds, &mut feature_fn, &mut probs_fn, 0.2).unwrap();

        let pred: Vec<usize> = ds.windows.iter().map(|w| w.ts).collect();
        let agreement = best_permutation_agreement(&pred, &truth, states);
        total += agreement;
    }
    let mean = total / seeds.len() as f64;
    assert!(mean >= 0.8, "mean best-permutation agreement {mean:.3} < 0.8");
    println!("acceptance 06 synthetic state recovery: pass (mean agreement {mean:.3})");
}

// ----------------------------------------------- cross-user adaptation

#[test]
fn cross_user_adaptation_beats_baselines() {
    let start = Instant::now();
    let seeds = [21u64, 22, 23, 24, 25];
    let epochs = 6;
    let mut acc = std::collections::BTreeMap::new();
    for &seed in &seeds {
        let spec = SynthSpec::cross_user(4, 3, seed);
        let (src_user, tgt_user) = synthesize_dataset(&spec).unwrap();
        let (mut src, mut tgt) = (src_user.dataset, tgt_user.dataset);
        tgt.anonymize_target_classes(seed).unwrap();
        normalize_pair(&mut src, &mut tgt).unwrap();

        let tc = TrainConfig { states: 3, epochs, seed, ..TrainConfig::default() };
        let (mut model, _) = fit(&mut src.clone(), &mut tgt.clone(), &tc).unwrap();
        let dtsda = evaluate_model(&mut model, &tgt).unwrap().accuracy();

        let bc = BaselineConfig { epochs, seed, ..BaselineConfig::default() };
        let (mut so, _) = train_baseline(&src, &tgt, BaselineKind::SourceOnly, &bc).unwrap();
        let source_only = evaluate_baseline(&mut so, &tgt).unwrap().accuracy();
        let (mut da, _) = train_baseline(&src, &tgt, BaselineKind::Dann, &bc).unwrap();
        let dann = evaluate_baseline(&mut da, &tgt).unwrap().accuracy();

        for (k, v) in [("dtsda", dtsda), ("source_only", source_only), ("dann", dann)] {
            *acc.entry(k).or_insert(0.0) += v / seeds.len() as f64;
        }
        println!(
            "  seed {seed}: dtsda {dtsda:.3} source_only {source_only:.3} dann {dann:.3}"
        );
    }
    let (d, s, a) = (acc["dtsda"], acc["source_only"], acc["dann"]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 900.0, "adaptation experiment took {secs:.0}s");
    assert!(
        d >= s + 0.10,
        "mean target accuracy {d:.3} does not exceed source-only {s:.3} by 10 points"
    );
    assert!(d >= a, "mean target accuracy {d:.3} below adversarial baseline {a:.3}");
    println!(
        "acceptance 07 cross-user adaptation: pass (dtsda {d:.3}, source_only {s:.3}, dann {a:.3}, {secs:.0}s)"
    );
}

// --------------------------------------------------------- windowing

#[test]
fn windowing_matches_rate_fixture() {
    use dtsda_core::data::{segment_windows, SensorRecording};
    let rec = SensorRecording {
        user_id: "u".into(),
        segment_id: 0,
        sampling_rate: 30.0,
        channels: vec![(0..300).map(|i| i as f64).collect()],
        labels: vec![0; 300],
    };
    let ws = segment_windows(&rec, 3.0, 0.5).unwrap();
    assert_eq!(ws[0].data.shape(), &[1, 90], "window length must be 90 at 30 Hz");
    assert_eq!(ws[1].data.at2(0, 0), 45.0, "stride must be 45 samples");
    assert_eq!(ws.len(), (300 - 90) / 45 + 1);
    println!("acceptance 09 windowing fixture: pass (len 90, stride 45)");
}

// ------------------------------------------- optional real-data check

/// Reduced-budget check on externally converted real recordings. Set
/// DTSDA_REAL_DATA_DIR to a directory holding data.csv/activity_map.csv
/// with at least two users; skipped otherwise.
#[test]
fn real_data_ordering_when_available() {
    let dir = match std::env::var("DTSDA_REAL_DATA_DIR") {
        Ok(d) => std::path::PathBuf::from(d),
        Err(_) => {
            println!("acceptance 10 real-data ordering: skipped (DTSDA_REAL_DATA_DIR unset)");
            return;
        }
    };
    use dtsda_core::experiment::{load_user_datasets, prepare_task};
    let (_map, users) = load_user_datasets(&dir, 3.0, 0.5).unwrap();
    assert!(users.len() >= 2, "need two users");
    let (src, tgt) = prepare_task(&users[0].1, &users[1].1, 1).unwrap();
    let tc = TrainConfig { states: 3, epochs: 3, seed: 1, ..TrainConfig::default() };
    let (mut model, _) = fit(&mut src.clone(), &mut tgt.clone(), &tc).unwrap();
    let dtsda = evaluate_model(&mut model, &tgt).unwrap().accuracy();
    let bc = BaselineConfig { epochs: 3, seed: 1, ..BaselineConfig::default() };
    let (mut da, _) = train_baseline(&src, &tgt, BaselineKind::Dann, &bc).unwrap();
    let dann = evaluate_baseline(&mut da, &tgt).unwrap().accuracy();
    assert!(dtsda >= dann, "dtsda {dtsda:.3} below dann {dann:.3}");
    println!("acceptance 10 real-data ordering: pass (dtsda {dtsda:.3} >= dann {dann:.3})");
}

// --------------------------------------------------------------- misc

#[test]
fn nearest_centroid_matches_exhaustive_scan() {
    use dtsda_core::labeling::{assign_pseudo_temporal_states, cosine_distance};
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for _ in 0..200 {
        let states = rng.gen_range(1..=5);
        let dim = rng.gen_range(2..=6);
        let cents = Centroids {
            u: (0..states)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        };
        let feats: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let assigned = assign_pseudo_temporal_states(&feats, &cents);
        for (f, &t) in feats.iter().zip(&assigned) {
            let mut best = 0;
            for s in 1..states {
                if cosine_distance(f.as_slice(), cents.u[s].as_slice())
                    < cosine_distance(f.as_slice(), cents.u[best].as_slice())
                {
                    best = s;
                }
            }
            assert_eq!(t, best);
        }
    }
}

#[test]
fn distance_matrix_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(888);
    let feats: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let cents = Centroids {
        u: (0..3).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
    };
    let d = build_distance_matrix(&feats, &cents).unwrap();
    assert_eq!(d.m.len(), 3);
    assert!(d.m.iter().all(|row| row.len() == 7));
    for v in d.m.iter().flatten() {
        assert!((0.0..=2.0 + 1e-12).contains(v));
    }
}
