//! Datasets: unit-norm inputs carrying a constant bias coordinate, ±1 labels.
//!
//! Every path into a [`Dataset`] goes through the same pipeline: append a
//! coordinate equal to 1, then scale the augmented vector to unit Euclidean
//! norm. Synthetic generators and the CSV loader both produce raw features
//! first ([`RawData`]) and run them through [`RawData::to_dataset`].

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Vector, TAU_NORM};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vector>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vector>, labels: Vec<f64>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            for (n, x) in inputs.iter().enumerate() {
                if x.len() != d {
                    return Err(Error::Dataset(format!(
                        "sample {n} has dimension {}, expected {d}",
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dataset(format!("sample {n} is not finite")));
                }
                let nx = norm(x);
                if (nx - 1.0).abs() > TAU_NORM {
                    return Err(Error::Dataset(format!("sample {n} has norm {nx}, expected 1")));
                }
            }
        }
        if let Some(n) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Dataset(format!("label {} of sample {n} is not ±1", labels[n])));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input dimension, including the bias coordinate. `None` when empty.
    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Appends the bias coordinate and scales to unit norm.
pub fn augment_and_normalize(raw: &[f64]) -> Vector {
    let mut x = Vec::with_capacity(raw.len() + 1);
    x.extend_from_slice(raw);
    x.push(1.0);
    let n = norm(&x);
    x.iter_mut().for_each(|v| *v /= n);
    x
}

/// Features before the bias/normalization pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub features: Vec<Vector>,
    pub labels: Vec<f64>,
}

impl RawData {
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(
            self.features.iter().map(|f| augment_and_normalize(f)).collect(),
            self.labels.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> RawData {
        RawData {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes `label, f_1, …, f_d` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for (f, y) in self.features.iter().zip(&self.labels) {
            write!(out, "{y}")?;
            for v in f {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two isotropic Gaussian clouds around `±(1 + gap)·u`.
    GaussianBlobs,
    /// Linearly separable through the origin with raw margin at least `gap`.
    MarginSeparable,
    /// Label is the sign of `x_0 · x_1`; points kept at least `gap` from both axes.
    XorLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub raw_dim: usize,
    pub kind: SyntheticKind,
    #[serde(default)]
    pub gap: f64,
    pub seed: u64,
    #[serde(default)]
    pub val_fraction: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if self.raw_dim == 0 {
            return Err(Error::Config("raw_dim must be positive".into()));
        }
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return Err(Error::Config(format!("gap must be finite and >= 0, got {}", self.gap)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        match self.kind {
            SyntheticKind::MarginSeparable if self.gap == 0.0 => Err(Error::Config(
                "margin_separable needs gap > 0, otherwise the classes may touch".into(),
            )),
            SyntheticKind::XorLike if self.raw_dim < 2 => Err(Error::Config("xor_like needs raw_dim >= 2".into())),
            _ => Ok(()),
        }
    }
}

/// Linear separator recorded by the `margin_separable` generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Separator {
    /// Unit direction in raw feature space.
    pub direction: Vector,
    /// Smallest `y_n ⟨(direction, 0), x_n⟩` over the generated, normalized samples.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub val: Dataset,
    pub raw_train: RawData,
    pub raw_val: RawData,
    pub separator: Option<Separator>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = gaussian(rng, dim);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let d = spec.raw_dim;
    // balanced labels, interleaved, then shuffled by the split permutation
    let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut features = Vec::with_capacity(n);
    let mut direction = None;
    match spec.kind {
        SyntheticKind::GaussianBlobs => {
            let u = unit_direction(&mut rng, d);
            let c = 1.0 + spec.gap;
            for &y in &labels {
                let z = gaussian(&mut rng, d);
                features.push(z.iter().zip(&u).map(|(zi, ui)| zi + y * c * ui).collect());
            }
        }
        SyntheticKind::MarginSeparable => {
            let w = unit_direction(&mut rng, d);
            for &y in &labels {
                let z = gaussian(&mut rng, d);
                let s = dot(&z, &w);
                // move the point along w so that y ⟨w, x⟩ = gap + |s|
                let shift = y * (spec.gap + s.abs()) - s;
                features.push(z.iter().zip(&w).map(|(zi, wi)| zi + shift * wi).collect());
            }
            direction = Some(w);
        }
        SyntheticKind::XorLike => {
            for &y in &labels {
                let mut z = gaussian(&mut rng, d);
                let a = spec.gap + z[0].abs();
                let b = spec.gap + z[1].abs();
                let sa = if rng.random::<bool>() { 1.0 } else { -1.0 };
                z[0] = sa * a;
                z[1] = y * sa * b;
                features.push(z);
            }
        }
    }
    let raw = RawData { features, labels };

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let n_val = (n as f64 * spec.val_fraction).floor() as usize;
    if n_val >= n {
        return Err(Error::Config("validation split leaves no training data".into()));
    }
    let (val_idx, train_idx) = perm.split_at(n_val);
    let raw_train = raw.subset(train_idx);
    let raw_val = raw.subset(val_idx);
    let train = raw_train.to_dataset()?;
    let val = raw_val.to_dataset()?;

    let separator = match direction {
        Some(w) => {
            let mut lifted = w.clone();
            lifted.push(0.0);
            let margin = train
                .iter()
                .chain(val.iter())
                .map(|(x, y)| y * dot(&lifted, x))
                .fold(f64::INFINITY, f64::min);
            if margin <= 0.0 {
                return Err(Error::Dataset("generated classes overlap".into()));
            }
            Some(Separator { direction: w, margin })
        }
        None => None,
    };

    Ok(Generated {
        train,
        val,
        raw_train,
        raw_val,
        separator,
    })
}

fn parse_label(field: &str, row: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::CsvRow {
        row,
        reason: format!("label {field:?} is not a number"),
    })?;
    if v == 1.0 {
        Ok(1.0)
    } else if v == -1.0 || v == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::CsvRow {
            row,
            reason: format!("label {v} is not in {{-1, +1}} or {{0, 1}}"),
        })
    }
}

/// Reads raw `label, f_1, …, f_d` rows (no header). Rows are numbered from 1.
pub fn read_raw_csv<R: std::io::Read>(reader: R) -> Result<RawData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::CsvRow {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::CsvRow {
                row,
                reason: "expected a label followed by at least one feature".into(),
            });
        }
        let label = parse_label(&rec[0], row)?;
        let feats = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::CsvRow {
                        row,
                        reason: format!("feature {s:?} is not a finite number"),
                    })
            })
            .collect::<Result<Vector>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::CsvRow {
                    row,
                    reason: format!("{} features, previous rows have {d}", feats.len()),
                })
            }
            _ => {}
        }
        features.push(feats);
        labels.push(label);
    }
    Ok(RawData { features, labels })
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    read_raw_csv(std::fs::File::open(path)?)?.to_dataset()
}
