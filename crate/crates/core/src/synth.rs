//! Synthetic cross-user datasets with known ground-truth temporal
//! states. Each activity is a left-to-right chain of sub-activity
//! states with sampled dwell times; each user observes the shared
//! emissions through its own affine channel transform plus noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{ActivityMap, Window, WindowedDataset, SOURCE_DOMAIN};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct UserSpec {
    pub name: String,
    /// channel mixing matrix `[channels][channels]`, must be invertible
    pub mix: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: usize,
    /// true number of temporal states per activity
    pub states: usize,
    pub channels: usize,
    pub window_len: usize,
    pub sampling_rate: f64,
    /// `[class][state][channel]`
    pub emission_mean: Vec<Vec<Vec<f64>>>,
    /// per-sample emission noise before the user transform
    pub emission_scale: f64,
    /// dwell time per state visit, in windows
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub segments_per_class: usize,
    pub windows_per_segment: usize,
    pub users: Vec<UserSpec>,
    pub seed: u64,
}

fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.states < 1 || self.classes < 1 || self.channels < 1 || self.window_len < 1 {
            return Err(Error::Config("synth spec dimensions must be positive".into()));
        }
        if self.dwell_min < 1 || self.dwell_max < self.dwell_min {
            return Err(Error::Config("degenerate dwell distribution".into()));
        }
        if self.users.len() < 2 {
            return Err(Error::Config("need at least two users".into()));
        }
        if self.emission_mean.len() != self.classes
            || self.emission_mean.iter().any(|s| s.len() != self.states)
        {
            return Err(Error::Config("emission_mean must be [classes][states][channels]".into()));
        }
        for u in &self.users {
            if u.mix.len() != self.channels || u.bias.len() != self.channels {
                return Err(Error::Config(format!("user {} transform has wrong shape", u.name)));
            }
            if determinant(&u.mix).abs() < 1e-9 {
                return Err(Error::Config(format!("user {} mixing matrix not invertible", u.name)));
            }
        }
        Ok(())
    }

    pub fn activity_map(&self) -> ActivityMap {
        ActivityMap::new((0..self.classes).map(|c| format!("activity_{c}")).collect())
    }

    /// Well-separated emissions, shared (identity) user transforms and
    /// zero noise: the degenerate no-shift setting.
    pub fn degenerate(classes: usize, states: usize, seed: u64) -> Self {
        let mut spec = Self::clean(classes, states, seed);
        for u in &mut spec.users {
            u.mix = identity(spec.channels);
            u.bias = vec![0.0; spec.channels];
            u.noise = 0.0;
        }
        spec.emission_scale = 0.0;
        spec
    }

    /// Clean setting: well-separated state emissions, dwell >= 5
    /// windows, per-sample noise scale 0.1, two users with identity
    /// transforms.
    pub fn clean(classes: usize, states: usize, seed: u64) -> Self {
        let channels = 6;
        let emission_mean = separated_means(classes, states, channels, 2.0, seed);
        SynthSpec {
            classes,
            states,
            channels,
            window_len: 16,
            sampling_rate: 16.0,
            emission_mean,
            emission_scale: 0.1,
            dwell_min: 5,
            dwell_max: 8,
            segments_per_class: 4,
            windows_per_segment: 60,
            users: vec![
                UserSpec { name: "U1".into(), mix: identity(channels), bias: vec![0.0; channels], noise: 0.0 },
                UserSpec { name: "U2".into(), mix: identity(channels), bias: vec![0.0; channels], noise: 0.0 },
            ],
            seed,
        }
    }

    /// Two users sharing sub-activity structure but observed through
    /// distinct affine channel transforms plus noise.
    pub fn cross_user(classes: usize, states: usize, seed: u64) -> Self {
        let mut spec = Self::clean(classes, states, seed);
        spec.segments_per_class = 5;
        spec.windows_per_segment = 100; // ~classes*500 windows per user
        spec.emission_scale = 0.1;
        let ch = spec.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_7AFF));
        // mild channel rotation plus a strong per-channel offset: the
        // offset defeats a source-only classifier while leaving the
        // class geometry intact enough for adversarial alignment
        spec.users[1].mix = random_rotation_like(ch, 0.25, &mut rng);
        spec.users[1].bias = (0..ch).map(|_| rng.gen_range(-1.5..1.5)).collect();
        spec.users[1].noise = 0.1;
        spec.users[0].noise = 0.1;
        spec
    }
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Mixing invertible matrix: a product of Givens rotations whose
/// angles scale with `strength` (1.0 approaches a uniform random
/// rotation; small values leave channels mostly unmixed), plus mild
/// per-axis scaling.
fn random_rotation_like(n: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut m = identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let theta: f64 = strength * rng.gen_range(0.6..1.4);
            let (s, c) = theta.sin_cos();
            for row in m.iter_mut() {
                let (a, b) = (row[i], row[j]);
                row[i] = c * a - s * b;
                row[j] = s * a + c * b;
            }
        }
    }
    for (i, row) in m.iter_mut().enumerate() {
        let scale = 0.8 + 0.4 * ((i % 3) as f64) / 2.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    m
}

/// Random unit directions scaled by `amplitude`, redrawn until all
/// pairwise cosine distances exceed 0.5.
fn separated_means(
    classes: usize,
    states: usize,
    channels: usize,
    amplitude: f64,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x3EA5));
    let mut all: Vec<Vec<f64>> = Vec::new();
    while all.len() < classes * states {
        let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        let u: Vec<f64> = v.iter().map(|x| amplitude * x / norm).collect();
        let ok = all.iter().all(|w| {
            let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
            1.0 - dot / (amplitude * amplitude) > 0.5
        });
        if ok {
            all.push(u);
        }
    }
    (0..classes)
        .map(|c| (0..states).map(|s| all[c * states + s].clone()).collect())
        .collect()
}

/// Windows of one generated user with aligned ground-truth states.
#[derive(Clone, Debug)]
pub struct SynthUser {
    pub name: String,
    pub dataset: WindowedDataset,
    /// ground-truth temporal state per window, evaluation only
    pub truth_states: Vec<usize>,
}

fn mix_sample(user: &UserSpec, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut acc = user.bias[i];
            for j in 0..n {
                acc += user.mix[i][j] * x[j];
            }
            let noise: f64 = StandardNormal.sample(rng);
            acc + user.noise * noise
        })
        .collect()
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate every user in the spec. Deterministic given the spec.
pub fn generate_all(spec: &SynthSpec) -> Result<Vec<SynthUser>> {
    spec.validate()?;
    let map = spec.activity_map();
    let mut out = Vec::new();
    for (ui, user) in spec.users.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ (ui as u64)));
        let mut windows = Vec::new();
        let mut truth = Vec::new();
        let mut segment_id = 0u64;
        for class in 0..spec.classes {
            for _ in 0..spec.segments_per_class {
                // left-to-right state chain, cycling, sampled dwells
                let mut states = Vec::with_capacity(spec.windows_per_segment);
                let mut st = 0usize;
                while states.len() < spec.windows_per_segment {
                    let dwell = rng.gen_range(spec.dwell_min..=spec.dwell_max);
                    for _ in 0..dwell {
                        if states.len() == spec.windows_per_segment {
                            break;
                        }
                        states.push(st);
                    }
                    st = (st + 1) % spec.states;
                }
                for (wi, &st) in states.iter().enumerate() {
                    let mean = &spec.emission_mean[class][st];
                    let mut data = vec![0.0; spec.channels * spec.window_len];
                    for l in 0..spec.window_len {
                        let base: Vec<f64> = mean
                            .iter()
                            .map(|&m| {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                m + spec.emission_scale * e
                            })
                            .collect();
                        let mixed = mix_sample(user, &base, &mut rng);
                        for (c, v) in mixed.into_iter().enumerate() {
                            data[c * spec.window_len + l] = v;
                        }
                    }
                    windows.push(Window {
                        data: Tensor::new(vec![spec.channels, spec.window_len], data),
                        class,
                        domain: SOURCE_DOMAIN,
                        temporal_index: wi,
                        segment_id,
                        ts: 0,
                    });
                    truth.push(st);
                }
                segment_id += 1;
            }
        }
        out.push(SynthUser {
            name: user.name.clone(),
            dataset: WindowedDataset::new(windows, &map)?,
            truth_states: truth,
        });
    }
    Ok(out)
}

/// First two users as (source, target) with their ground-truth states.
pub fn synthesize_dataset(
    spec: &SynthSpec,
) -> Result<(SynthUser, SynthUser)> {
    let mut users = generate_all(spec)?;
    if users.len() < 2 {
        return Err(Error::Config("spec must define at least two users".into()));
    }
    let target = users.remove(1);
    let source = users.remove(0);
    Ok((source, target))
}

/// Write the generated windows back out as a sample-level CSV in the
/// ingestion schema, one contiguous stream per (user, segment), plus the
/// activity map and a reference file of ground-truth states.
pub fn export_csv(spec: &SynthSpec, users: &[SynthUser], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    spec.activity_map().save(&dir.join("activity_map.csv"))?;

    let mut w = csv::Writer::from_path(dir.join("data.csv"))?;
    let mut header = vec!["timestamp".to_string(), "user".into(), "segment".into(), "activity".into()];
    header.extend((0..spec.channels).map(|c| format!("ch{c}")));
    w.write_record(&header)?;
    let map = spec.activity_map();
    for user in users {
        let mut per_segment: std::collections::BTreeMap<u64, Vec<&Window>> = Default::default();
        for win in &user.dataset.windows {
            per_segment.entry(win.segment_id).or_default().push(win);
        }
        for (seg, mut wins) in per_segment {
            wins.sort_by_key(|w| w.temporal_index);
            let mut sample = 0usize;
            for win in wins {
                for l in 0..spec.window_len {
                    let t = sample as f64 / spec.sampling_rate;
                    let mut rec = vec![
                        format!("{t:.6}"),
                        user.name.clone(),
                        seg.to_string(),
                        map.name_of(win.class).to_string(),
                    ];
                    for c in 0..spec.channels {
                        rec.push(format!("{:.17}", win.data.at2(c, l)));
                    }
                    w.write_record(&rec)?;
                    sample += 1;
                }
            }
        }
    }
    w.flush()?;

    let mut sw = csv::Writer::from_path(dir.join("states.csv"))?;
    sw.write_record(["user", "segment", "window", "state"])?;
    for user in users {
        for (win, &st) in user.dataset.windows.iter().zip(&user.truth_states) {
            sw.write_record([
                user.name.as_str(),
                &win.segment_id.to_string(),
                &win.temporal_index.to_string(),
                &st.to_string(),
            ])?;
        }
    }
    sw.flush()?;
    Ok(())
}

/// Parse a flat `key = value` synth spec file. Recognized keys:
/// `classes, states, channels, window_len, sampling_rate, dwell_min,
/// dwell_max, segments_per_class, windows_per_segment, users, seed,
/// emission_scale, noise, shift` — `users` is a comma list of names;
/// `shift` > 0 gives every user after the first a distinct affine
/// transform of that magnitude.
pub fn parse_spec_file(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path)?;
    let kv = crate::experiment::parse_key_values(&text)?;
    let get_usize = |key: &str, default: usize| -> Result<usize> {
        match kv.get(key) {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v}"))),
            None => Ok(default),
        }
    };
    let get_f64 = |key: &str, default: f64| -> Result<f64> {
        match kv.get(key) {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v}"))),
            None => Ok(default),
        }
    };
    let classes = get_usize("classes", 4)?;
    let states = get_usize("states", 3)?;
    let channels = get_usize("channels", 6)?;
    let seed: u64 = match kv.get("seed") {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("bad seed {v}")))?,
        None => 0,
    };
    let names: Vec<String> = kv
        .get("users")
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
        .unwrap_or_else(|| vec!["U1".into(), "U2".into()]);
    let shift = get_f64("shift", 1.0)?;
    let noise = get_f64("noise", 0.1)?;

    let mut spec = SynthSpec {
        classes,
        states,
        channels,
        window_len: get_usize("window_len", 16)?,
        sampling_rate: get_f64("sampling_rate", 16.0)?,
        emission_mean: separated_means(classes, states, channels, 2.0, seed),
        emission_scale: get_f64("emission_scale", 0.1)?,
        dwell_min: get_usize("dwell_min", 5)?,
        dwell_max: get_usize("dwell_max", 8)?,
        segments_per_class: get_usize("segments_per_class", 5)?,
        windows_per_segment: get_usize("windows_per_segment", 100)?,
        users: Vec::new(),
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_7AFF));
    for (i, name) in names.into_iter().enumerate() {
        let (mix, bias) = if i == 0 || shift == 0.0 {
            (identity(channels), vec![0.0; channels])
        } else {
            (
                random_rotation_like(channels, shift.min(1.0), &mut rng),
                (0..channels).map(|_| shift * rng.gen_range(-0.4..0.4)).collect(),
            )
        };
        spec.users.push(UserSpec { name, mix, bias, noise });
    }
    spec.validate()?;
    Ok(spec)
}
