//! Sensor ingestion, sliding-window segmentation and label conventions.
//!
//! Source windows carry class labels in `[0, C-1]`; target windows are
//! anonymized into `[C, 2C-1]` through a seeded class permutation that
//! is recorded for evaluation-time de-anonymization. The composite
//! training label is `y_hat = ts * 2C + c`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result, Tensor64};

pub const SOURCE_DOMAIN: u8 = 0;
pub const TARGET_DOMAIN: u8 = 1;

/// Activity-name to class-index table.
#[derive(Clone, Debug)]
pub struct ActivityMap {
    names: Vec<String>,
}

impl ActivityMap {
    pub fn new(names: Vec<String>) -> Self {
        ActivityMap { names }
    }

    /// Two-column CSV `activity,index` with a header row.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pairs: Vec<(String, usize)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Data(format!("{}: expected activity,index", path.display())));
            }
            let idx: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad activity index {:?}", &rec[1])))?;
            pairs.push((rec[0].trim().to_string(), idx));
        }
        pairs.sort_by_key(|p| p.1);
        for (expect, (name, idx)) in pairs.iter().enumerate() {
            if *idx != expect {
                return Err(Error::Data(format!(
                    "activity indices must be 0..C-1 without gaps; {name} has {idx}"
                )));
            }
        }
        Ok(ActivityMap { names: pairs.into_iter().map(|p| p.0).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["activity", "index"])?;
        for (i, name) in self.names.iter().enumerate() {
            w.write_record([name.as_str(), &i.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }
}

/// One contiguous recording session of one user.
#[derive(Clone, Debug)]
pub struct SensorRecording {
    pub user_id: String,
    pub segment_id: u64,
    pub sampling_rate: f64,
    /// `[num_channels][num_samples]`
    pub channels: Vec<Vec<f64>>,
    /// per-sample activity class
    pub labels: Vec<usize>,
}

impl SensorRecording {
    pub fn num_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

/// Ingestion schema: columns `timestamp,user,segment,activity` followed
/// by one column per sensor channel. Rows must be in timestamp order
/// within each (user, segment).
pub fn load_recordings_csv(path: &Path, activities: &ActivityMap) -> Result<Vec<SensorRecording>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let fixed = ["timestamp", "user", "segment", "activity"];
    for (i, want) in fixed.iter().enumerate() {
        if headers.get(i).map(str::trim) != Some(*want) {
            return Err(Error::Data(format!(
                "{}: expected column {i} to be '{want}', found {:?}",
                path.display(),
                headers.get(i)
            )));
        }
    }
    let num_channels = headers.len() - fixed.len();
    if num_channels == 0 {
        return Err(Error::Data(format!("{}: no sensor channel columns", path.display())));
    }

    struct Acc {
        timestamps: Vec<f64>,
        channels: Vec<Vec<f64>>,
        labels: Vec<usize>,
    }
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), Acc> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ts: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad timestamp {:?}", &rec[0])))?;
        let user = rec[1].trim().to_string();
        let segment: u64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad segment id {:?}", &rec[2])))?;
        let activity = rec[3].trim();
        let label = activities
            .index_of(activity)
            .ok_or_else(|| Error::Data(format!("unknown activity name {activity:?}")))?;
        let key = (user.clone(), segment);
        let acc = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Acc { timestamps: Vec::new(), channels: vec![Vec::new(); num_channels], labels: Vec::new() }
        });
        if let Some(&last) = acc.timestamps.last() {
            if ts <= last {
                return Err(Error::Data(format!(
                    "non-monotone timestamps in user {user} segment {segment}: {ts} after {last}"
                )));
            }
        }
        acc.timestamps.push(ts);
        acc.labels.push(label);
        for c in 0..num_channels {
            let v: f64 = rec[4 + c]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad sensor value {:?}", &rec[4 + c])))?;
            acc.channels[c].push(v);
        }
    }

    let mut out = Vec::new();
    for key in order {
        let acc = groups.remove(&key).unwrap();
        let n = acc.timestamps.len();
        let sampling_rate = if n >= 2 {
            (n - 1) as f64 / (acc.timestamps[n - 1] - acc.timestamps[0])
        } else {
            1.0
        };
        out.push(SensorRecording {
            user_id: key.0,
            segment_id: key.1,
            sampling_rate,
            channels: acc.channels,
            labels: acc.labels,
        });
    }
    Ok(out)
}

/// One fixed-length multichannel segment: the atomic sample.
#[derive(Clone, Debug)]
pub struct Window {
    /// `[num_channels, window_len]`
    pub data: Tensor64,
    /// class label `c`; source in `[0, C-1]`, target in `[C, 2C-1]`
    pub class: usize,
    /// 0 = source, 1 = target
    pub domain: u8,
    /// position within its segment's window sequence
    pub temporal_index: usize,
    pub segment_id: u64,
    /// temporal state in `[0, T-1]`, updated between training phases
    pub ts: usize,
}

/// Fixed-duration sliding windows with fractional overlap. Windows whose
/// samples carry more than one activity label are dropped; survivors are
/// re-indexed consecutively.
pub fn segment_windows(
    rec: &SensorRecording,
    window_seconds: f64,
    overlap: f64,
) -> Result<Vec<Window>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let window_len = (window_seconds * rec.sampling_rate).round() as usize;
    if window_len == 0 || window_len > rec.num_samples() {
        return Err(Error::Data(format!(
            "recording of {} samples shorter than one window ({window_len})",
            rec.num_samples()
        )));
    }
    let stride = ((window_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let num_channels = rec.channels.len();

    let mut windows = Vec::new();
    let mut next_index = 0usize;
    let mut start = 0usize;
    while start + window_len <= rec.num_samples() {
        let label = rec.labels[start];
        let uniform = rec.labels[start..start + window_len].iter().all(|&l| l == label);
        if uniform {
            let mut data = Vec::with_capacity(num_channels * window_len);
            for ch in &rec.channels {
                data.extend_from_slice(&ch[start..start + window_len]);
            }
            windows.push(Window {
                data: Tensor::new(vec![num_channels, window_len], data),
                class: label,
                domain: SOURCE_DOMAIN,
                temporal_index: next_index,
                segment_id: rec.segment_id,
                ts: 0,
            });
            next_index += 1;
        }
        start += stride;
    }
    Ok(windows)
}

/// Per-channel z-score statistics computed from the source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Recorded target-class anonymization: `c -> C + perm[c]`.
#[derive(Clone, Debug)]
pub struct AnonMap {
    pub num_classes: usize,
    pub perm: Vec<usize>,
}

impl AnonMap {
    /// Seeded random bijection of the C classes.
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..num_classes).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        AnonMap { num_classes, perm }
    }

    pub fn identity(num_classes: usize) -> Self {
        AnonMap { num_classes, perm: (0..num_classes).collect() }
    }

    pub fn anonymize(&self, class: usize) -> usize {
        assert!(class < self.num_classes, "label {class} >= C={}", self.num_classes);
        self.num_classes + self.perm[class]
    }

    pub fn de_anonymize(&self, label: usize) -> usize {
        assert!(
            (self.num_classes..2 * self.num_classes).contains(&label),
            "label {label} not an anonymized class"
        );
        let shifted = label - self.num_classes;
        self.perm.iter().position(|&p| p == shifted).expect("bijection")
    }
}

/// Windows of one or both domains plus label-space metadata.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    /// number of activity classes C
    pub num_classes: usize,
    pub activity_names: Vec<String>,
    pub window_len: usize,
    pub num_channels: usize,
    pub norm: Option<NormStats>,
    pub normalized: bool,
    pub anon: Option<AnonMap>,
}

impl WindowedDataset {
    pub fn new(windows: Vec<Window>, activities: &ActivityMap) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("dataset with no windows".into()))?;
        let window_len = first.data.shape()[1];
        let num_channels = first.data.shape()[0];
        for w in &windows {
            if w.data.shape() != [num_channels, window_len] {
                return Err(Error::Data("inconsistent window shapes".into()));
            }
        }
        Ok(WindowedDataset {
            windows,
            num_classes: activities.num_classes(),
            activity_names: activities.names().to_vec(),
            window_len,
            num_channels,
            norm: None,
            normalized: false,
            anon: None,
        })
    }

    /// Tag every window with the given domain.
    pub fn set_domain(&mut self, domain: u8) {
        for w in &mut self.windows {
            w.domain = domain;
        }
    }

    /// Replace target labels by `C + perm(label)` with a seeded
    /// permutation, recording the mapping for evaluation.
    pub fn anonymize_target_classes(&mut self, seed: u64) -> Result<()> {
        if self.anon.is_some() {
            return Err(Error::Data("dataset already anonymized".into()));
        }
        let map = AnonMap::new(self.num_classes, seed);
        for w in &mut self.windows {
            if w.class >= self.num_classes {
                return Err(Error::Data(format!("label {} >= C={}", w.class, self.num_classes)));
            }
            w.class = map.anonymize(w.class);
        }
        self.set_domain(TARGET_DOMAIN);
        self.anon = Some(map);
        Ok(())
    }

    /// True class of a window, undoing anonymization when present.
    pub fn true_class(&self, w: &Window) -> usize {
        match &self.anon {
            Some(map) if w.class >= self.num_classes => map.de_anonymize(w.class),
            _ => w.class,
        }
    }

    /// Window indices grouped by (domain, class, segment), each group in
    /// temporal order.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<(u8, usize, u64), Vec<usize>> = BTreeMap::new();
        for (i, w) in self.windows.iter().enumerate() {
            groups.entry((w.domain, w.class, w.segment_id)).or_default().push(i);
        }
        groups
            .into_values()
            .map(|mut idxs| {
                idxs.sort_by_key(|&i| self.windows[i].temporal_index);
                idxs
            })
            .collect()
    }

    /// Replicate the last sample until the time axis length is a
    /// multiple of `m`, so the two pooling stages divide evenly.
    pub fn pad_time_axis_to_multiple(&mut self, m: usize) {
        let rem = self.window_len % m;
        if rem == 0 {
            return;
        }
        let extra = m - rem;
        let new_len = self.window_len + extra;
        for w in &mut self.windows {
            let mut data = Vec::with_capacity(self.num_channels * new_len);
            for c in 0..self.num_channels {
                for l in 0..self.window_len {
                    data.push(w.data.at2(c, l));
                }
                let edge = w.data.at2(c, self.window_len - 1);
                data.extend(std::iter::repeat(edge).take(extra));
            }
            w.data = Tensor::new(vec![self.num_channels, new_len], data);
        }
        self.window_len = new_len;
    }
}

/// Compute per-channel mean/std over a dataset's windows.
pub fn channel_stats(ds: &WindowedDataset) -> NormStats {
    let c = ds.num_channels;
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for w in &ds.windows {
        for ch in 0..c {
            for l in 0..ds.window_len {
                mean[ch] += w.data.at2(ch, l);
            }
        }
        count += ds.window_len;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for w in &ds.windows {
        for ch in 0..c {
            for l in 0..ds.window_len {
                let d = w.data.at2(ch, l) - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std = var.into_iter().map(|v| (v / count as f64).sqrt()).collect();
    NormStats { mean, std }
}

const STD_EPSILON: f64 = 1e-8;

/// Apply z-score stats to a dataset, once.
pub fn apply_norm_stats(ds: &mut WindowedDataset, stats: &NormStats) -> Result<()> {
    if ds.normalized {
        return Err(Error::Data("dataset already normalized".into()));
    }
    for (ch, s) in stats.std.iter().enumerate() {
        if *s < STD_EPSILON {
            eprintln!("warning: near-zero variance in channel {ch}; epsilon applied");
        }
    }
    for w in &mut ds.windows {
        let (channels, len) = (ds.num_channels, ds.window_len);
        let data = w.data.data_mut();
        for ch in 0..channels {
            let m = stats.mean[ch];
            let s = stats.std[ch].max(STD_EPSILON);
            for l in 0..len {
                data[ch * len + l] = (data[ch * len + l] - m) / s;
            }
        }
    }
    ds.norm = Some(stats.clone());
    ds.normalized = true;
    Ok(())
}

/// Z-score both domains with source-domain statistics. Target labels and
/// value ranges are unknown at training time, so the source stats stand
/// in for both.
pub fn normalize_pair(source: &mut WindowedDataset, target: &mut WindowedDataset) -> Result<NormStats> {
    if source.windows.is_empty() {
        return Err(Error::Data("source dataset empty".into()));
    }
    let stats = channel_stats(source);
    apply_norm_stats(source, &stats)?;
    apply_norm_stats(target, &stats)?;
    Ok(stats)
}

/// `y_hat = ts * 2C + c`
pub fn compose_pseudo_label(ts: usize, class: usize, num_classes: usize) -> usize {
    assert!(class < 2 * num_classes, "class {class} out of range for C={num_classes}");
    ts * 2 * num_classes + class
}

/// Inverse of [`compose_pseudo_label`].
pub fn decompose_pseudo_label(pseudo: usize, num_classes: usize) -> (usize, usize) {
    (pseudo / (2 * num_classes), pseudo % (2 * num_classes))
}
