//! Dataset synthesis and ingestion: Gaussian blob / two-moon generators,
//! exponential long-tail subsampling, symmetric label noise, severity-laddered
//! corruptions, a bit-exact CIFAR-10 binary reader, and stratified splits.
//! Every generator is a pure function of (parameters, seed).

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// A labelled sample collection. `sample_ids` are stable across subsampling,
/// splits, and corruption, so downstream bookkeeping (correctness histories,
/// score tables) can always key on them. `original_labels` is populated only
/// after label-noise injection. `value_range` is `Some` for data with hard
/// bounds (CIFAR pixels); corruptions clip only in that case.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub original_labels: Option<Vec<usize>>,
    pub sample_ids: Vec<usize>,
    pub num_classes: usize,
    pub value_range: Option<(f64, f64)>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        sample_ids: Vec<usize>,
        num_classes: usize,
        value_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if inputs.len() != labels.len() || inputs.len() != sample_ids.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!(
                    "parallel sequences disagree: {} inputs, {} labels, {} ids",
                    inputs.len(),
                    labels.len(),
                    sample_ids.len()
                ),
            });
        }
        if num_classes < 2 {
            return Err(Error::invalid_config("num_classes", "need at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::DataFormat(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = inputs.first() {
            if let Some(odd) = inputs.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    detail: format!(
                        "inconsistent input shapes {:?} vs {:?}",
                        first.shape(),
                        odd.shape()
                    ),
                });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            original_labels: None,
            sample_ids,
            num_classes,
            value_range,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Flattened feature count per sample.
    pub fn feature_len(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding the given positions (not sample ids), in order.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(positions.len());
        let mut labels = Vec::with_capacity(positions.len());
        let mut ids = Vec::with_capacity(positions.len());
        let mut originals = self.original_labels.as_ref().map(|_| Vec::with_capacity(positions.len()));
        for &p in positions {
            if p >= self.len() {
                return Err(Error::UnknownSample(p));
            }
            inputs.push(self.inputs[p].clone());
            labels.push(self.labels[p]);
            ids.push(self.sample_ids[p]);
            if let (Some(out), Some(src)) = (originals.as_mut(), self.original_labels.as_ref()) {
                out.push(src[p]);
            }
        }
        let mut ds = Dataset::new(inputs, labels, ids, self.num_classes, self.value_range)?;
        ds.original_labels = originals;
        Ok(ds)
    }

    /// Rows `positions` flattened into a `[B, D]` matrix for batched forwards.
    pub fn gather_matrix(&self, positions: &[usize]) -> Result<Tensor> {
        if positions.is_empty() {
            return Err(Error::EmptyInput("gather_matrix"));
        }
        let d = self.feature_len();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.len() {
                return Err(Error::UnknownSample(p));
            }
            data.extend_from_slice(self.inputs[p].data());
        }
        Tensor::new(vec![positions.len(), d], data)
    }
}

/// K Gaussian clusters in D dimensions: class means are seeded random unit
/// vectors scaled by `sigma_gap` (near-orthogonal in high dimension, so the
/// arrangement is simplex-like), samples add unit-variance isotropic noise.
pub fn gen_gaussian_blobs(
    k: usize,
    n_per_class: usize,
    dim: usize,
    sigma_gap: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::invalid_config("num_classes", "need at least 2 classes"));
    }
    if n_per_class == 0 || dim == 0 {
        return Err(Error::invalid_config("blobs", "n_per_class and dim must be positive"));
    }
    if !(sigma_gap.is_finite() && sigma_gap >= 0.0) {
        return Err(Error::invalid_config("sigma_gap", "must be finite and nonnegative"));
    }
    let mut r = rng::stream(seed, streams::DATA);
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        let v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        means.push(v.iter().map(|x| sigma_gap * x / norm).collect::<Vec<f64>>());
    }
    let mut inputs = Vec::with_capacity(k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let row: Vec<f64> = mean.iter().map(|m| m + rng::normal(&mut r)).collect();
            inputs.push(Tensor::from_vec(row));
            labels.push(c);
        }
    }
    let ids = (0..inputs.len()).collect();
    Dataset::new(inputs, labels, ids, k, None)
}

/// Two interleaved half-circles with Gaussian jitter. Class 0 is the upper
/// arc of the unit circle at the origin; class 1 is the lower arc centered at
/// (1, 0.5). `n` must be even; each class gets n/2 evenly spaced anchors.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid_config("two_moons", "n must be even and at least 2"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::invalid_config("noise", "must be finite and nonnegative"));
    }
    let half = n / 2;
    let mut r = rng::stream(seed, streams::DATA);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let theta = std::f64::consts::PI * i as f64 / (half - 1).max(1) as f64;
        inputs.push(Tensor::from_vec(vec![
            theta.cos() + noise * rng::normal(&mut r),
            theta.sin() + noise * rng::normal(&mut r),
        ]));
        labels.push(0);
    }
    for i in 0..half {
        let theta = std::f64::consts::PI * i as f64 / (half - 1).max(1) as f64;
        inputs.push(Tensor::from_vec(vec![
            1.0 - theta.cos() + noise * rng::normal(&mut r),
            0.5 - theta.sin() + noise * rng::normal(&mut r),
        ]));
        labels.push(1);
    }
    let ids = (0..n).collect();
    Dataset::new(inputs, labels, ids, 2, None)
}

/// Exponential class-imbalance profile.
#[derive(Clone, Debug, PartialEq)]
pub struct LongTailProfile {
    pub imbalance_factor: f64,
    pub counts: Vec<usize>,
}

/// Per-class keep counts for an exponential tail: class i keeps
/// round(N·μ^i) with μ = IF^(−1/(K−1)), round-half-up, floored at one sample
/// so no class vanishes. Class 0 is the head.
pub fn long_tail_counts(k: usize, n_per_class: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid_config("num_classes", "need at least 2 classes"));
    }
    if !(imbalance_factor.is_finite() && imbalance_factor >= 1.0) {
        return Err(Error::invalid_config("imbalance_factor", "must be >= 1"));
    }
    let mu = imbalance_factor.powf(-1.0 / (k as f64 - 1.0));
    let counts: Vec<usize> = (0..k)
        .map(|i| {
            let target = n_per_class as f64 * mu.powi(i as i32);
            ((target + 0.5).floor() as usize).max(1)
        })
        .collect();
    Ok(counts)
}

/// Subsample a balanced dataset into an exponential long-tail; which samples
/// survive within each class is a seeded draw.
pub fn apply_long_tail(ds: &Dataset, imbalance_factor: f64, seed: u64) -> Result<(Dataset, LongTailProfile)> {
    let class_counts = ds.class_counts();
    let n_per_class = class_counts[0];
    if class_counts.iter().any(|&c| c != n_per_class) || n_per_class == 0 {
        return Err(Error::invalid_config(
            "long_tail",
            "base dataset must be class-balanced and nonempty",
        ));
    }
    let counts = long_tail_counts(ds.num_classes, n_per_class, imbalance_factor)?;
    let mut r = rng::stream(seed, streams::LONG_TAIL);
    let mut keep = Vec::new();
    for (c, &target) in counts.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&p| ds.labels[p] == c).collect();
        members.shuffle(&mut r);
        members.truncate(target);
        members.sort_unstable();
        keep.extend(members);
    }
    keep.sort_unstable();
    let subset = ds.subset(&keep)?;
    Ok((
        subset,
        LongTailProfile {
            imbalance_factor,
            counts,
        },
    ))
}

/// Symmetric label-noise spec.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub rate: f64,
}

impl NoiseSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::OutOfRange {
                what: "noise rate",
                value: rate,
            });
        }
        Ok(NoiseSpec { rate })
    }
}

/// Flip each label independently with probability `rate` to a uniformly
/// random *different* class. Originals are retained for diagnostics.
pub fn inject_label_noise(ds: &Dataset, spec: NoiseSpec, seed: u64) -> Result<Dataset> {
    if ds.num_classes < 2 {
        return Err(Error::invalid_config("num_classes", "need at least 2 classes"));
    }
    let mut r = rng::stream(seed, streams::NOISE);
    let mut out = ds.clone();
    let originals = ds.labels.clone();
    for y in out.labels.iter_mut() {
        if r.random::<f64>() < spec.rate {
            let offset = r.random_range(1..ds.num_classes);
            *y = (*y + offset) % ds.num_classes;
        }
    }
    out.original_labels = Some(originals);
    Ok(out)
}

/// Corruption families. Each has a five-step severity ladder whose only
/// contract is strictly monotone displacement; absolute intensities are
/// chosen for the unit-scale synthetic data and scale with the value range
/// when one is declared.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
];

pub const GAUSSIAN_SIGMAS: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
pub const IMPULSE_FRACTIONS: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
pub const BLUR_BLENDS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const BRIGHTNESS_SHIFTS: [f64; 5] = [0.05, 0.1, 0.2, 0.35, 0.5];
pub const CONTRAST_GAINS: [f64; 5] = [0.85, 0.7, 0.55, 0.4, 0.25];

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "impulse_noise" => Ok(CorruptionKind::ImpulseNoise),
            "box_blur" => Ok(CorruptionKind::BoxBlur),
            "brightness" => Ok(CorruptionKind::Brightness),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(Error::invalid_config(
                "corruption",
                format!("unknown kind '{other}'"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: usize,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: usize) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::OutOfRange {
                what: "corruption severity",
                value: severity as f64,
            });
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

fn feature_scale(ds: &Dataset) -> f64 {
    ds.value_range.map_or(1.0, |(lo, hi)| hi - lo)
}

fn clip_in_place(t: &mut Tensor, range: Option<(f64, f64)>) {
    if let Some((lo, hi)) = range {
        for v in t.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Clamped-window box blur: mean over the 3-neighborhood in 1-D, the 3×3
/// neighborhood per channel in [C,H,W].
fn box_blur(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    match shape.len() {
        1 => {
            let d = shape[0];
            let x = t.data();
            let mut out = vec![0.0; d];
            for i in 0..d {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(d - 1);
                out[i] = x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            }
            Tensor::new(shape.to_vec(), out)
        }
        3 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let x = t.data();
            let mut out = vec![0.0; x.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
                        let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                        let mut acc = 0.0;
                        let mut cnt = 0usize;
                        for ii in i0..=i1 {
                            for jj in j0..=j1 {
                                acc += x[ch * h * w + ii * w + jj];
                                cnt += 1;
                            }
                        }
                        out[ch * h * w + i * w + j] = acc / cnt as f64;
                    }
                }
            }
            Tensor::new(shape.to_vec(), out)
        }
        _ => Err(Error::ShapeMismatch {
            op: "box_blur",
            detail: format!("need a [D] or [C,H,W] grid, got {shape:?}"),
        }),
    }
}

/// Apply one corruption to every input; labels, ids, and length unchanged.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    CorruptionSpec::new(spec.kind, spec.severity)?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("corrupt"));
    }
    let sev = spec.severity - 1;
    let scale = feature_scale(ds);
    let mut out = ds.clone();
    let mut r = rng::stream(seed, streams::CORRUPT);
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMAS[sev] * scale;
            for t in out.inputs.iter_mut() {
                for v in t.data_mut() {
                    *v += sigma * rng::normal(&mut r);
                }
                clip_in_place(t, ds.value_range);
            }
        }
        CorruptionKind::ImpulseNoise => {
            // one seeded permutation of all cells; severity s flips a prefix,
            // so higher severities strictly contain lower ones
            let d = ds.feature_len();
            let total = ds.len() * d;
            let order = rng::permutation(total, &mut r);
            let flips = ((IMPULSE_FRACTIONS[sev] * total as f64).round() as usize).max(1);
            let (lo_val, hi_val) = ds.value_range.unwrap_or((-3.0, 3.0));
            for &cell in order.iter().take(flips) {
                let extreme = if r.random::<bool>() { hi_val } else { lo_val };
                out.inputs[cell / d].data_mut()[cell % d] = extreme;
            }
        }
        CorruptionKind::BoxBlur => {
            let lambda = BLUR_BLENDS[sev];
            for t in out.inputs.iter_mut() {
                let blurred = box_blur(t)?;
                for (v, b) in t.data_mut().iter_mut().zip(blurred.data()) {
                    *v = (1.0 - lambda) * *v + lambda * b;
                }
            }
        }
        CorruptionKind::Brightness => {
            let shift = BRIGHTNESS_SHIFTS[sev] * scale;
            for t in out.inputs.iter_mut() {
                for v in t.data_mut() {
                    *v += shift;
                }
                clip_in_place(t, ds.value_range);
            }
        }
        CorruptionKind::Contrast => {
            let gain = CONTRAST_GAINS[sev];
            for t in out.inputs.iter_mut() {
                let mean = t.data().iter().sum::<f64>() / t.len() as f64;
                for v in t.data_mut() {
                    *v = mean + gain * (*v - mean);
                }
            }
        }
    }
    Ok(out)
}

/// Stratification outcome of `train_val_split`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Stratified,
    /// Some class was too small to stratify; a plain shuffled split was used.
    UnstratifiedFallback,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Seeded split preserving class proportions where possible. Falls back to a
/// plain shuffled split (reported via `SplitKind`) when any class is too
/// small to give both sides at least one sample.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, SplitKind)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::OutOfRange {
            what: "val_fraction",
            value: val_fraction,
        });
    }
    if ds.len() < 2 {
        return Err(Error::EmptyInput("train_val_split"));
    }
    let mut r = rng::stream(seed, streams::SPLIT);
    let counts = ds.class_counts();
    let stratifiable = counts.iter().all(|&c| {
        let v = round_half_up(c as f64 * val_fraction);
        c == 0 || (v >= 1 && v < c)
    });
    let mut val_positions = Vec::new();
    let kind = if stratifiable {
        for c in 0..ds.num_classes {
            let mut members: Vec<usize> = (0..ds.len()).filter(|&p| ds.labels[p] == c).collect();
            if members.is_empty() {
                continue;
            }
            let take = round_half_up(members.len() as f64 * val_fraction);
            members.shuffle(&mut r);
            val_positions.extend(members.into_iter().take(take));
        }
        SplitKind::Stratified
    } else {
        let mut all: Vec<usize> = (0..ds.len()).collect();
        all.shuffle(&mut r);
        let take = round_half_up(ds.len() as f64 * val_fraction).clamp(1, ds.len() - 1);
        val_positions.extend(all.into_iter().take(take));
        SplitKind::UnstratifiedFallback
    };
    val_positions.sort_unstable();
    let in_val: std::collections::BTreeSet<usize> = val_positions.iter().copied().collect();
    let train_positions: Vec<usize> = (0..ds.len()).filter(|p| !in_val.contains(p)).collect();
    Ok((ds.subset(&train_positions)?, ds.subset(&val_positions)?, kind))
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parse CIFAR-10 binary bytes: per record one label byte (0..9) followed by
/// 3072 channel-major pixel bytes, scaled to [0,1] as shape [3,32,32].
pub fn parse_cifar10_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::DataFormat(format!(
            "CIFAR-10 binary length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base] as usize;
        if label > 9 {
            return Err(Error::DataFormat(format!(
                "record {rec}: label byte {label} exceeds 9"
            )));
        }
        let pixels: Vec<f64> = bytes[base + 1..base + CIFAR_RECORD]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        inputs.push(Tensor::new(vec![3, 32, 32], pixels)?);
        labels.push(label);
    }
    let ids = (0..n).collect();
    Dataset::new(inputs, labels, ids, 10, Some((0.0, 1.0)))
}

pub fn read_cifar10_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_cifar10_bytes(&bytes)
}

/// Inverse of the reader for fixtures and round-trip checks; features must
/// be exact multiples of 1/255.
pub fn write_cifar10_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (t, &y) in ds.inputs.iter().zip(&ds.labels) {
        if t.len() != CIFAR_PIXELS {
            return Err(Error::ShapeMismatch {
                op: "write_cifar10_binary",
                detail: format!("need 3072 pixels per sample, got {}", t.len()),
            });
        }
        if y > 9 {
            return Err(Error::DataFormat(format!("label {y} exceeds 9")));
        }
        bytes.push(y as u8);
        bytes.extend(t.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Export as CSV with header `sample_id,label,f0,f1,...` (flattened
/// features; f64 Display output round-trips exactly).
pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.feature_len();
    let mut out = String::from("sample_id,label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for p in 0..ds.len() {
        out.push_str(&format!("{},{}", ds.sample_ids[p], ds.labels[p]));
        for v in ds.inputs[p].data() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a dataset CSV written by `write_dataset_csv`. Inputs come back as
/// flat [D] rows; `num_classes` is max label + 1 unless overridden.
pub fn read_dataset_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyInput("dataset csv"))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("bad header '{}', expected 'sample_id,label,f0,...'", header.trim()),
        });
    }
    let d = cols.len() - 2;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: expected {} fields, got {}", lineno + 1, d + 2, fields.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: bad {what}", lineno + 1),
        };
        ids.push(fields[0].parse::<usize>().map_err(|_| bad("sample_id"))?);
        labels.push(fields[1].parse::<usize>().map_err(|_| bad("label"))?);
        let mut row = Vec::with_capacity(d);
        for f in &fields[2..] {
            row.push(f.parse::<f64>().map_err(|_| bad("feature"))?);
        }
        inputs.push(Tensor::from_vec(row));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyInput("dataset csv"));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
    Dataset::new(inputs, labels, ids, k.max(2), None)
}
