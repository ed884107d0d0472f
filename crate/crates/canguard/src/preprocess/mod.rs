//! Record streams to model-ready windowed datasets: sliding windows,
//! stratified splitting, borderline SMOTE, z-score scaling, and class
//! weights.
//!
//! The pipeline order is fixed: dedup -> window -> split -> SMOTE (train
//! only) -> fit scaler on the augmented train set -> transform both splits.
//! [`prepare`] runs the whole chain so every caller gets the same order.

mod smote;

pub use smote::borderline_smote;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{deduplicate, select_features, CanRecord, ClassLabel};
use crate::seeds;
use crate::tensor::Tensor;

/// Sliding-window geometry. Stride is fixed at 1 (overlapping windows).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowConfig {
    pub t: usize,
    pub f: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { t: 16, f: 8 }
    }
}

/// Where a window came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    SyntheticSmote,
}

/// A set of labeled windows, shape `(N, T, F)`.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub windows: Tensor,
    pub labels: Vec<ClassLabel>,
    pub provenance: Vec<Provenance>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn t(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn f(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Flat `T*F` slice of window `i`.
    pub fn window(&self, i: usize) -> &[f64] {
        let stride = self.t() * self.f();
        &self.windows.data()[i * stride..(i + 1) * stride]
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// New dataset containing the given windows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowedDataset {
        let stride = self.t() * self.f();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.window(i));
            labels.push(self.labels[i]);
            provenance.push(self.provenance[i]);
        }
        WindowedDataset {
            windows: Tensor::new(vec![indices.len(), self.t(), self.f()], data)
                .expect("subset of finite data"),
            labels,
            provenance,
        }
    }

    /// Class indices (0-5) aligned with the windows.
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Builds overlapping windows of `config.t` consecutive rows with stride 1.
/// Window `i` covers rows `i..i+T`, labeled by its final row, giving exactly
/// `N - T + 1` windows.
pub fn make_windows(
    features: &Tensor,
    labels: &[ClassLabel],
    config: &WindowConfig,
) -> Result<WindowedDataset> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != config.f {
        return Err(Error::ShapeMismatch {
            op: "make_windows",
            lhs: shape.to_vec(),
            rhs: vec![config.f],
        });
    }
    let n = shape[0];
    if labels.len() != n {
        return Err(Error::Data(format!(
            "make_windows: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let t = config.t;
    if n < t {
        return Err(Error::Data(format!(
            "make_windows: {n} rows cannot fill a window of length {t}"
        )));
    }
    let f = config.f;
    let n_out = n - t + 1;
    let mut data = Vec::with_capacity(n_out * t * f);
    let mut out_labels = Vec::with_capacity(n_out);
    for i in 0..n_out {
        data.extend_from_slice(&features.data()[i * f..(i + t) * f]);
        out_labels.push(labels[i + t - 1]);
    }
    Ok(WindowedDataset {
        windows: Tensor::new(vec![n_out, t, f], data)?,
        labels: out_labels,
        provenance: vec![Provenance::Real; n_out],
    })
}

/// Splits windows into train/test preserving per-class proportions within
/// one window (`round(count * fraction)` test windows per class).
/// A class with fewer than 2 windows goes entirely to train with a warning.
pub fn stratified_split(
    ds: &WindowedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            warn!("class {class} has {} window(s); keeping all in train", members.len());
            train_idx.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test_idx.extend(members.drain(..n_test));
        train_idx.extend(members);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Per-feature z-score parameters, fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Fits per-feature mean and population standard deviation over every
/// (window, time step) position. A zero-variance feature gets sigma = 1
/// with a warning, so constant features pass through as zeros.
pub fn fit_scaler(train: &WindowedDataset) -> Result<Scaler> {
    if train.is_empty() {
        return Err(Error::Data("fit_scaler: empty training set".into()));
    }
    let f = train.f();
    let count = (train.len() * train.t()) as f64;
    let data = train.windows.data();
    let mut mu = vec![0.0; f];
    for (i, v) in data.iter().enumerate() {
        mu[i % f] += v;
    }
    for m in &mut mu {
        *m /= count;
    }
    let mut var = vec![0.0; f];
    for (i, v) in data.iter().enumerate() {
        let d = v - mu[i % f];
        var[i % f] += d * d;
    }
    let sigma = var
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let s = (v / count).sqrt();
            if s == 0.0 {
                warn!("feature {j} has zero variance; substituting sigma = 1");
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(Scaler { mu, sigma })
}

/// Applies `(x - mu) / sigma` per feature, returning a new dataset.
pub fn apply_scaler(scaler: &Scaler, ds: &WindowedDataset) -> WindowedDataset {
    let f = ds.f();
    assert_eq!(scaler.mu.len(), f, "scaler fitted for different feature count");
    let data = ds
        .windows
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - scaler.mu[i % f]) / scaler.sigma[i % f])
        .collect();
    WindowedDataset {
        windows: Tensor::new(ds.windows.shape().to_vec(), data).expect("finite after scaling"),
        labels: ds.labels.clone(),
        provenance: ds.provenance.clone(),
    }
}

/// Per-class loss weights `omega_c = N_total / N_c`, computed on the
/// post-augmentation training set. Absent classes get no entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassWeights {
    pub omega: BTreeMap<ClassLabel, f64>,
}

impl ClassWeights {
    /// Dense per-class vector for the loss; classes absent from training
    /// weigh 1 (they never appear as targets there).
    pub fn as_vec(&self) -> Vec<f64> {
        ClassLabel::ALL
            .iter()
            .map(|c| self.omega.get(c).copied().unwrap_or(1.0))
            .collect()
    }

    pub fn uniform() -> Self {
        Self {
            omega: ClassLabel::ALL.iter().map(|&c| (c, 1.0)).collect(),
        }
    }
}

pub fn class_weights(train: &WindowedDataset) -> ClassWeights {
    let counts = train.class_counts();
    let total: usize = counts.values().sum();
    ClassWeights {
        omega: counts
            .into_iter()
            .map(|(c, n)| (c, total as f64 / n as f64))
            .collect(),
    }
}

/// SMOTE target policy for [`prepare`].
#[derive(Debug, Clone)]
pub enum SmoteTargets {
    /// Raise every eligible minority class to the majority-class count.
    MatchMajority,
    /// Explicit per-class targets.
    Explicit(BTreeMap<ClassLabel, usize>),
    /// Skip oversampling entirely.
    Disabled,
}

/// Full preprocessing configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    pub test_fraction: f64,
    pub seed: u64,
    pub smote_targets: SmoteTargets,
    pub smote_m_danger: usize,
    pub smote_k_synth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            test_fraction: 0.2,
            seed: 0,
            smote_targets: SmoteTargets::MatchMajority,
            smote_m_danger: 10,
            smote_k_synth: 5,
        }
    }
}

/// Output of the full preprocessing chain. Both splits are scaled with the
/// scaler fitted on the augmented training set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
    pub class_weights: ClassWeights,
}

/// Runs dedup -> window -> split -> SMOTE(train) -> scale on a record
/// stream. Bit-reproducible for a fixed seed.
pub fn prepare(records: &[CanRecord], config: &PipelineConfig) -> Result<PreparedData> {
    let deduped = deduplicate(records);
    let (features, labels) = select_features(&deduped);
    let ds = make_windows(&features, &labels, &config.window)?;
    let (train_raw, test_raw) =
        stratified_split(&ds, config.test_fraction, seeds::derive(config.seed, "split"))?;

    let train_aug = match &config.smote_targets {
        SmoteTargets::Disabled => train_raw,
        SmoteTargets::MatchMajority => {
            let majority = train_raw.class_counts().values().copied().max().unwrap_or(0);
            let targets = train_raw
                .class_counts()
                .keys()
                .map(|&c| (c, majority))
                .collect();
            borderline_smote(
                &train_raw,
                &targets,
                config.smote_m_danger,
                config.smote_k_synth,
                seeds::derive(config.seed, "smote"),
            )?
        }
        SmoteTargets::Explicit(targets) => borderline_smote(
            &train_raw,
            targets,
            config.smote_m_danger,
            config.smote_k_synth,
            seeds::derive(config.seed, "smote"),
        )?,
    };

    let scaler = fit_scaler(&train_aug)?;
    let train = apply_scaler(&scaler, &train_aug);
    let test = apply_scaler(&scaler, &test_raw);
    let class_weights = class_weights(&train);
    Ok(PreparedData {
        train,
        test,
        scaler,
        class_weights,
    })
}

/// On-disk manifest for a persisted dataset (`<stem>.json` beside a raw
/// little-endian `f32` window file `<stem>.f32`).
#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    windows: usize,
    t: usize,
    f: usize,
    class_map: BTreeMap<String, usize>,
    labels: Vec<usize>,
    provenance: Vec<u8>,
    provenance_counts: BTreeMap<String, usize>,
    scaler: Option<Scaler>,
    seed: u64,
}

const DATASET_FORMAT: &str = "canguard.dataset";
const DATASET_VERSION: u32 = 1;

/// Persists a dataset as `<stem>.json` + `<stem>.f32`.
pub fn save_dataset(
    ds: &WindowedDataset,
    scaler: Option<&Scaler>,
    seed: u64,
    stem: &Path,
) -> Result<()> {
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        windows: ds.len(),
        t: ds.t(),
        f: ds.f(),
        class_map: ClassLabel::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), c.index()))
            .collect(),
        labels: ds.label_indices(),
        provenance: ds
            .provenance
            .iter()
            .map(|p| match p {
                Provenance::Real => 0u8,
                Provenance::SyntheticSmote => 1u8,
            })
            .collect(),
        provenance_counts: {
            let real = ds.provenance.iter().filter(|&&p| p == Provenance::Real).count();
            let mut m = BTreeMap::new();
            m.insert("real".into(), real);
            m.insert("synthetic_smote".into(), ds.len() - real);
            m
        },
        scaler: scaler.cloned(),
        seed,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(stem.with_extension("json"), json)?;

    let mut file = std::fs::File::create(stem.with_extension("f32"))?;
    for v in ds.windows.to_f32_vec() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a dataset persisted by [`save_dataset`].
pub fn load_dataset(stem: &Path) -> Result<(WindowedDataset, Option<Scaler>, u64)> {
    let json = std::fs::read(stem.with_extension("json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&json)?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format {}/{}",
            manifest.format, manifest.version
        )));
    }
    let mut raw = Vec::new();
    std::fs::File::open(stem.with_extension("f32"))?.read_to_end(&mut raw)?;
    let expect = manifest.windows * manifest.t * manifest.f * 4;
    if raw.len() != expect {
        return Err(Error::Data(format!(
            "dataset blob is {} bytes, manifest expects {expect}",
            raw.len()
        )));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let windows = Tensor::from_f32(vec![manifest.windows, manifest.t, manifest.f], &floats)?;
    let labels = manifest
        .labels
        .iter()
        .map(|&i| {
            ClassLabel::from_index(i)
                .ok_or_else(|| Error::Data(format!("label index {i} outside 0-5")))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != manifest.windows || manifest.provenance.len() != manifest.windows {
        return Err(Error::Data("manifest label/provenance length mismatch".into()));
    }
    let provenance = manifest
        .provenance
        .iter()
        .map(|&p| {
            if p == 0 {
                Provenance::Real
            } else {
                Provenance::SyntheticSmote
            }
        })
        .collect();
    Ok((
        WindowedDataset {
            windows,
            labels,
            provenance,
        },
        manifest.scaler,
        manifest.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_of(v: &[usize]) -> Vec<ClassLabel> {
        v.iter().map(|&i| ClassLabel::from_index(i).unwrap()).collect()
    }

    fn row_matrix(n: usize) -> Tensor {
        // Row i holds the value i in every feature.
        let data = (0..n).flat_map(|i| std::iter::repeat(i as f64).take(8)).collect();
        Tensor::new(vec![n, 8], data).unwrap()
    }

    #[test]
    fn window_count_and_last_step_labels() {
        let features = row_matrix(5);
        let labels = labels_of(&[0, 0, 1, 2, 3]);
        let ds = make_windows(&features, &labels, &WindowConfig { t: 3, f: 8 }).unwrap();
        assert_eq!(ds.len(), 3);
        // Labels come from rows 3, 4, 5 (1-indexed).
        assert_eq!(ds.labels, labels_of(&[1, 2, 3]));
    }

    #[test]
    fn single_window_when_n_equals_t() {
        let features = row_matrix(4);
        let labels = labels_of(&[0, 0, 0, 5]);
        let ds = make_windows(&features, &labels, &WindowConfig { t: 4, f: 8 }).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, labels_of(&[5]));
    }

    #[test]
    fn window_content_matches_source_rows() {
        let features = row_matrix(10);
        let labels = labels_of(&[0; 10]);
        let ds = make_windows(&features, &labels, &WindowConfig { t: 4, f: 8 }).unwrap();
        // Window index 6 (0-based) covers rows 6..=9.
        let w = ds.window(6);
        for (step, chunk) in w.chunks(8).enumerate() {
            assert!(chunk.iter().all(|&v| v == (6 + step) as f64));
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let features = row_matrix(3);
        let labels = labels_of(&[0, 0, 0]);
        assert!(make_windows(&features, &labels, &WindowConfig { t: 4, f: 8 }).is_err());
    }

    fn toy_dataset(counts: &[(ClassLabel, usize)]) -> WindowedDataset {
        let n: usize = counts.iter().map(|(_, c)| c).sum();
        let mut labels = Vec::new();
        for &(class, count) in counts {
            labels.extend(std::iter::repeat(class).take(count));
        }
        let data = (0..n * 2 * 2).map(|i| i as f64).collect();
        WindowedDataset {
            windows: Tensor::new(vec![n, 2, 2], data).unwrap(),
            labels,
            provenance: vec![Provenance::Real; n],
        }
    }

    #[test]
    fn split_preserves_class_proportions() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 50), (ClassLabel::Dos, 50)]);
        let (train, test) = stratified_split(&ds, 0.2, 1).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(train.len(), 80);
        assert_eq!(test.class_counts()[&ClassLabel::Benign], 10);
        assert_eq!(test.class_counts()[&ClassLabel::Dos], 10);
    }

    #[test]
    fn split_fraction_zero_gives_empty_test() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 10)]);
        let (train, test) = stratified_split(&ds, 0.0, 1).unwrap();
        assert_eq!(train.len(), 10);
        assert!(test.is_empty());
    }

    #[test]
    fn split_counts_within_one_of_rounded_target() {
        let ds = toy_dataset(&[
            (ClassLabel::Benign, 97),
            (ClassLabel::Dos, 31),
            (ClassLabel::Gas, 13),
            (ClassLabel::Rpm, 7),
            (ClassLabel::Speed, 5),
            (ClassLabel::SteeringWheel, 3),
        ]);
        let (_, test) = stratified_split(&ds, 0.25, 9).unwrap();
        for (class, count) in [
            (ClassLabel::Benign, 97usize),
            (ClassLabel::Dos, 31),
            (ClassLabel::Gas, 13),
            (ClassLabel::Rpm, 7),
            (ClassLabel::Speed, 5),
            (ClassLabel::SteeringWheel, 3),
        ] {
            let want = (count as f64 * 0.25).round();
            let got = test.class_counts().get(&class).copied().unwrap_or(0) as f64;
            assert!((got - want).abs() <= 1.0, "{class}: {got} vs {want}");
        }
    }

    #[test]
    fn split_single_window_class_stays_in_train() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 9), (ClassLabel::SteeringWheel, 1)]);
        let (train, test) = stratified_split(&ds, 0.5, 1).unwrap();
        assert_eq!(
            train.class_counts().get(&ClassLabel::SteeringWheel),
            Some(&1)
        );
        assert!(!test.labels.contains(&ClassLabel::SteeringWheel));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 30), (ClassLabel::Dos, 10)]);
        let (tr1, te1) = stratified_split(&ds, 0.3, 42).unwrap();
        let (tr2, te2) = stratified_split(&ds, 0.3, 42).unwrap();
        assert_eq!(tr1.windows.data(), tr2.windows.data());
        assert_eq!(te1.windows.data(), te2.windows.data());
        assert_eq!(tr1.len() + te1.len(), ds.len());
    }

    #[test]
    fn scaler_population_std_and_zero_mean() {
        // Feature values {1, 2, 3} per feature across 3 windows of T=1.
        let ds = WindowedDataset {
            windows: Tensor::new(vec![3, 1, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap(),
            labels: labels_of(&[0, 0, 0]),
            provenance: vec![Provenance::Real; 3],
        };
        let scaler = fit_scaler(&ds).unwrap();
        assert!((scaler.mu[0] - 2.0).abs() < 1e-12);
        assert!((scaler.sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let scaled = apply_scaler(&scaler, &ds);
        let mean: f64 = scaled.windows.data().iter().step_by(2).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        let var: f64 = scaled.windows.data().iter().step_by(2).map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_feature_scales_to_zeros() {
        let ds = WindowedDataset {
            windows: Tensor::new(vec![2, 1, 1], vec![5.0, 5.0]).unwrap(),
            labels: labels_of(&[0, 0]),
            provenance: vec![Provenance::Real; 2],
        };
        let scaler = fit_scaler(&ds).unwrap();
        assert_eq!(scaler.sigma[0], 1.0);
        let scaled = apply_scaler(&scaler, &ds);
        assert!(scaled.windows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaler_independent_of_test_partition() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 40), (ClassLabel::Dos, 20)]);
        let (train, _) = stratified_split(&ds, 0.25, 3).unwrap();
        let s1 = fit_scaler(&train).unwrap();
        // Same training windows, any other test content: parameters identical.
        let s2 = fit_scaler(&train.subset(&(0..train.len()).collect::<Vec<_>>())).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn test_transform_uses_train_parameters() {
        // Train values centered at 0, test shifted: scaled test mean != 0.
        let train = WindowedDataset {
            windows: Tensor::new(vec![2, 1, 1], vec![-1.0, 1.0]).unwrap(),
            labels: labels_of(&[0, 0]),
            provenance: vec![Provenance::Real; 2],
        };
        let test = WindowedDataset {
            windows: Tensor::new(vec![2, 1, 1], vec![9.0, 11.0]).unwrap(),
            labels: labels_of(&[0, 0]),
            provenance: vec![Provenance::Real; 2],
        };
        let scaler = fit_scaler(&train).unwrap();
        let scaled = apply_scaler(&scaler, &test);
        let mean: f64 = scaled.windows.data().iter().sum::<f64>() / 2.0;
        assert!(mean > 5.0, "test mean should stay shifted, got {mean}");
    }

    #[test]
    fn class_weights_formula() {
        let ds = toy_dataset(&[(ClassLabel::Benign, 75), (ClassLabel::Dos, 25)]);
        let w = class_weights(&ds);
        assert!((w.omega[&ClassLabel::Benign] - 100.0 / 75.0).abs() < 1e-12);
        assert!((w.omega[&ClassLabel::Dos] - 4.0).abs() < 1e-12);
        assert!(w.omega.get(&ClassLabel::Gas).is_none());
        assert_eq!(w.as_vec()[ClassLabel::Gas.index()], 1.0);
    }

    #[test]
    fn class_weights_balanced_six_classes() {
        let counts: Vec<(ClassLabel, usize)> =
            ClassLabel::ALL.iter().map(|&c| (c, 10)).collect();
        let ds = toy_dataset(&counts);
        let w = class_weights(&ds);
        for c in ClassLabel::ALL {
            assert!((w.omega[&c] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ds");
        let ds = toy_dataset(&[(ClassLabel::Benign, 4), (ClassLabel::Rpm, 2)]);
        let scaler = Scaler {
            mu: vec![0.5, -1.0],
            sigma: vec![2.0, 1.0],
        };
        save_dataset(&ds, Some(&scaler), 99, &stem).unwrap();
        let (back, back_scaler, seed) = load_dataset(&stem).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(back_scaler.unwrap(), scaler);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.len(), ds.len());
        // f32 storage: values match to single precision.
        for (a, b) in back.windows.data().iter().zip(ds.windows.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn prepare_is_bit_reproducible_per_seed() {
        use crate::ingest::{synthesize, SynthConfig};
        let mut synth = SynthConfig {
            seed: 9,
            burst_len: 8,
            ..Default::default()
        };
        synth.counts.insert(ClassLabel::Benign, 300);
        synth.counts.insert(ClassLabel::Dos, 40);
        synth.counts.insert(ClassLabel::Speed, 40);
        let records = synthesize(&synth).unwrap();
        let config = PipelineConfig {
            window: WindowConfig { t: 4, f: 8 },
            seed: 5,
            smote_k_synth: 3,
            ..Default::default()
        };
        let a = prepare(&records, &config).unwrap();
        let b = prepare(&records, &config).unwrap();
        assert_eq!(a.train.windows.data(), b.train.windows.data());
        assert_eq!(a.test.windows.data(), b.test.windows.data());
        assert_eq!(a.scaler, b.scaler);
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ds");
        let ds = toy_dataset(&[(ClassLabel::Benign, 4)]);
        save_dataset(&ds, None, 1, &stem).unwrap();
        let blob = stem.with_extension("f32");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_dataset(&stem).is_err());
    }
}
