//! Datasets: synthetic spirals, CSV ingestion and stratified splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        features.ensure_finite("dataset")?;
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Features and labels of the listed examples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.batch(indices);
        Dataset {
            features,
            labels,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Expected error of guessing labels independently of the input, drawn
    /// from the class marginals: `1 − Σ p_c²`.
    pub fn chance_error(&self) -> f64 {
        let n = self.len() as f64;
        1.0 - self
            .class_counts()
            .iter()
            .map(|&c| (c as f64 / n).powi(2))
            .sum::<f64>()
    }

    /// Writes `f0,…,f{D-1},label` with a header row. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dims()).map(|d| format!("f{d}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Interleaved 2-D spiral arms, one per class, `points_per_class` each.
///
/// Arm `j` runs through radius `r = 0.1 + 0.9·t` at angle
/// `2πj/classes + 3π·t + noise·ε` for `t ~ U(0,1)` and `ε ~ N(0,1)`, so with
/// zero noise the arms are disjoint curves that wind one and a half turns.
pub fn gen_spirals(points_per_class: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if points_per_class == 0 {
        return Err(Error::invalid("points_per_class must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::invalid("spirals need at least 2 classes"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise must be a nonnegative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points_per_class * classes;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..points_per_class {
        for j in 0..classes {
            let t: f64 = rng.random();
            let eps: f64 = rng.sample(StandardNormal);
            let r = 0.1 + 0.9 * t;
            let theta = std::f64::consts::TAU * j as f64 / classes as f64
                + 3.0 * std::f64::consts::PI * t
                + noise * eps;
            data.push(r * theta.cos());
            data.push(r * theta.sin());
            labels.push(j);
        }
    }
    Dataset::new(Tensor::new(n, 2, data)?, labels, classes)
}

/// Reads `f0,…,fD,label` with a header row. The class count is the
/// largest label plus one.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || header.get(header.len() - 1) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            msg: "header must be f0,...,fD,label".into(),
        });
    }
    let dims = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if rec.len() != dims + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, found {}", dims + 1, rec.len()),
            });
        }
        for field in rec.iter().take(dims) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                msg: format!("bad feature value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, msg: "non-finite feature".into() });
            }
            data.push(v);
        }
        let label_field = rec[dims].trim();
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            row,
            msg: format!("label {label_field:?} is not a nonnegative integer"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Tensor::new(n, dims, data)?, labels, classes)
}

/// Stratified shuffled split. Each class sends `round(count · test_fraction)`
/// examples to the test side, clamped so both sides keep at least one.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} must be in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..dataset.classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid(format!("class {class} has fewer than 2 examples")));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

/// Points per class behind [`desk_task`].
pub const DESK_POINTS_PER_CLASS: usize = 1334;

/// Default task: 3-class spirals with noise 0.1, split 3000 train / 1002 test.
pub fn desk_task(seed: u64) -> Result<(Dataset, Dataset)> {
    let all = gen_spirals(DESK_POINTS_PER_CLASS, 3, 0.1, seed)?;
    split(&all, 0.25, seed.wrapping_add(1))
}
