//! Train-fitted feature transforms: correlation pruning, scaling, resampling.
//!
//! A [`PreprocessPlan`] is fitted on the training rows of one feature set and
//! then applied unchanged to validation and test rows. Resampling only ever
//! touches training rows and is applied jointly across modalities so that the
//! rows of every feature set stay aligned.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_SMOTE_K: usize = 5;

/// Column indices kept by greedy keep-first correlation pruning.
///
/// Columns are scanned in index order; a column is dropped when it is constant
/// or when its absolute Pearson correlation with an already kept column
/// exceeds `thr`.
pub fn prune_correlated(train: &Array2<f64>, thr: f64) -> Result<Vec<usize>> {
    let (n, d) = train.dim();
    if n < 2 {
        return Err(Error::invalid(format!("correlation pruning needs at least 2 rows, got {n}")));
    }
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(Error::invalid(format!("correlation threshold {thr} outside (0, 1]")));
    }
    let constant: Vec<bool> = train
        .axis_iter(Axis(1))
        .map(|c| c.iter().all(|v| *v == c[0]))
        .collect();
    let mean = train.mean_axis(Axis(0)).expect("n >= 2");
    let mut z = train - &mean;
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if constant[j] || norm == 0.0 {
            col.fill(0.0);
        } else {
            col /= norm;
        }
    }
    let corr = z.t().dot(&z);
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..d {
        if constant[j] {
            continue;
        }
        if kept.iter().all(|&k| corr[[j, k]].abs() <= thr) {
            kept.push(j);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMethod {
    None,
    /// `StandardScaler`: zero mean, unit population standard deviation.
    #[serde(alias = "StandardScaler", alias = "standard")]
    Zscore,
    /// `MinMaxScaler`: maps the training range to [0, 1].
    #[serde(alias = "MinMaxScaler")]
    Minmax,
}

impl FromStr for ScalingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ScalingMethod::None),
            "zscore" | "standard" | "standardscaler" => Ok(ScalingMethod::Zscore),
            "minmax" | "minmaxscaler" => Ok(ScalingMethod::Minmax),
            other => Err(Error::invalid(format!("unknown scaling method {other:?}"))),
        }
    }
}

/// Fitted per-column affine map `(x - offset) / scale`. Columns that were
/// constant on the training rows have `scale = 0` and map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub method: ScalingMethod,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &Array2<f64>, method: ScalingMethod) -> Result<Self> {
        let (n, d) = train.dim();
        if n == 0 && method != ScalingMethod::None {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        }
        let (offset, scale) = match method {
            ScalingMethod::None => (vec![0.0; d], vec![1.0; d]),
            ScalingMethod::Zscore => train
                .axis_iter(Axis(1))
                .map(|c| {
                    let mean = c.sum() / n as f64;
                    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let constant = c.iter().all(|v| *v == c[0]);
                    (mean, if constant { 0.0 } else { var.sqrt() })
                })
                .unzip(),
            ScalingMethod::Minmax => train
                .axis_iter(Axis(1))
                .map(|c| {
                    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                })
                .unzip(),
        };
        Ok(Scaler { method, offset, scale })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.offset.len() {
            return Err(Error::DimensionMismatch {
                what: "scaler columns",
                expected: self.offset.len(),
                actual: x.ncols(),
            });
        }
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (o, s) = (self.offset[j], self.scale[j]);
            if s == 0.0 {
                col.fill(0.0);
            } else if self.method != ScalingMethod::None {
                col.mapv_inplace(|v| (v - o) / s);
            }
        }
        Ok(out)
    }
}

/// Fits a scaler on `train` and applies it to `train` and every other matrix.
pub fn fit_apply_scaler(train: &Array2<f64>, others: &[&Array2<f64>], method: ScalingMethod) -> Result<Vec<Array2<f64>>> {
    let s = Scaler::fit(train, method)?;
    std::iter::once(train).chain(others.iter().copied()).map(|m| s.transform(m)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Resample {
    #[default]
    None,
    Smote { k: usize },
    RandomOver,
    RandomUnder,
}

impl fmt::Display for Resample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resample::None => f.write_str("none"),
            Resample::Smote { k } => write!(f, "smote({k})"),
            Resample::RandomOver => f.write_str("random_over"),
            Resample::RandomUnder => f.write_str("random_under"),
        }
    }
}

fn class_indices(labels: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let pos = labels.iter().enumerate().filter(|(_, &y)| y == 1).map(|(i, _)| i).collect();
    let neg = labels.iter().enumerate().filter(|(_, &y)| y != 1).map(|(i, _)| i).collect();
    (pos, neg)
}

fn sq_dist(mats: &[&Array2<f64>], a: usize, b: usize) -> f64 {
    mats.iter()
        .map(|m| m.row(a).iter().zip(m.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum()
}

fn gather(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Balances the two classes of the training rows.
///
/// `mats` are row-aligned feature matrices (one per modality). SMOTE finds
/// neighbours on the concatenation of all modalities and interpolates every
/// modality with the same pair and the same λ, so each synthetic row lies on a
/// segment between two minority rows in every modality. Synthetic or duplicated
/// rows are appended after the originals; undersampling keeps the surviving
/// rows in their original order.
pub fn resample(mats: &[&Array2<f64>], labels: &[u8], method: Resample, seed: u64) -> Result<(Vec<Array2<f64>>, Vec<u8>)> {
    for m in mats {
        if m.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "resample rows vs labels",
                expected: labels.len(),
                actual: m.nrows(),
            });
        }
    }
    let identity = || (mats.iter().map(|m| (*m).clone()).collect(), labels.to_vec());
    if method == Resample::None {
        return Ok(identity());
    }
    let (pos, neg) = class_indices(labels);
    let (minority, majority, min_label) = if pos.len() <= neg.len() { (pos, neg, 1u8) } else { (neg, pos, 0u8) };
    if minority.len() == majority.len() {
        return Ok(identity());
    }
    if minority.is_empty() {
        return Err(Error::invalid("cannot balance classes: minority class is empty"));
    }
    let needed = majority.len() - minority.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        Resample::None => unreachable!(),
        Resample::RandomUnder => {
            let mut maj = majority.clone();
            maj.shuffle(&mut rng);
            maj.truncate(minority.len());
            let mut keep: Vec<usize> = minority.iter().chain(&maj).copied().collect();
            keep.sort_unstable();
            Ok((
                mats.iter().map(|m| gather(m, &keep)).collect(),
                keep.iter().map(|&i| labels[i]).collect(),
            ))
        }
        Resample::RandomOver => {
            let extra: Vec<usize> = (0..needed).map(|_| minority[rng.random_range(0..minority.len())]).collect();
            let rows: Vec<usize> = (0..labels.len()).chain(extra.iter().copied()).collect();
            let mut y = labels.to_vec();
            y.extend(std::iter::repeat_n(min_label, needed));
            Ok((mats.iter().map(|m| gather(m, &rows)).collect(), y))
        }
        Resample::Smote { k } => {
            if minority.len() < 2 {
                return Err(Error::invalid("SMOTE needs at least 2 minority rows"));
            }
            let k = k.max(1).min(minority.len() - 1);
            let neighbours: Vec<Vec<usize>> = minority
                .iter()
                .map(|&a| {
                    let mut d: Vec<(f64, usize)> = minority
                        .iter()
                        .filter(|&&b| b != a)
                        .map(|&b| (sq_dist(mats, a, b), b))
                        .collect();
                    d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                    d.into_iter().take(k).map(|(_, b)| b).collect()
                })
                .collect();
            let pairs: Vec<(usize, usize, f64)> = (0..needed)
                .map(|_| {
                    let i = rng.random_range(0..minority.len());
                    let j = neighbours[i][rng.random_range(0..k)];
                    (minority[i], j, rng.random::<f64>())
                })
                .collect();
            let out = mats
                .iter()
                .map(|m| {
                    let mut o = Array2::zeros((m.nrows() + needed, m.ncols()));
                    o.slice_mut(ndarray::s![..m.nrows(), ..]).assign(m);
                    for (r, &(a, b, lam)) in pairs.iter().enumerate() {
                        let row = &m.row(a) + &((&m.row(b) - &m.row(a)) * lam);
                        o.row_mut(m.nrows() + r).assign(&row);
                    }
                    o
                })
                .collect();
            let mut y = labels.to_vec();
            y.extend(std::iter::repeat_n(min_label, needed));
            Ok((out, y))
        }
    }
}

/// Fitted transform for one feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    pub set_name: String,
    pub input_dim: usize,
    /// `None` when correlated columns are not dropped.
    pub corr_threshold: Option<f64>,
    pub kept_columns: Vec<usize>,
    pub kept_names: Vec<String>,
    pub scaler: Scaler,
    pub resample: Resample,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub corr_threshold: Option<f64>,
    pub scaling: ScalingMethod,
    pub resample: Resample,
    pub seed: u64,
}

impl PreprocessPlan {
    /// Fits pruning and scaling on training rows only.
    pub fn fit(train: &Array2<f64>, column_names: &[String], set_name: &str, opts: &PlanOptions) -> Result<Self> {
        if column_names.len() != train.ncols() {
            return Err(Error::DimensionMismatch {
                what: "column names",
                expected: train.ncols(),
                actual: column_names.len(),
            });
        }
        let kept = match opts.corr_threshold {
            Some(thr) => prune_correlated(train, thr)?,
            None => (0..train.ncols()).collect(),
        };
        if kept.is_empty() {
            return Err(Error::invalid(format!("{set_name}: every column was pruned")));
        }
        let scaler = Scaler::fit(&train.select(Axis(1), &kept), opts.scaling)?;
        Ok(PreprocessPlan {
            set_name: set_name.to_string(),
            input_dim: train.ncols(),
            corr_threshold: opts.corr_threshold,
            kept_names: kept.iter().map(|&j| column_names[j].clone()).collect(),
            kept_columns: kept,
            scaler,
            resample: opts.resample,
            seed: opts.seed,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.kept_columns.len()
    }

    /// Pruning then scaling. Resampling is not part of `apply`; see [`resample`].
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "plan input columns",
                expected: self.input_dim,
                actual: x.ncols(),
            });
        }
        self.scaler.transform(&x.select(Axis(1), &self.kept_columns))
    }

    pub fn apply_matrix(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        FeatureMatrix::new(m.name.clone(), self.kept_names.clone(), m.ids().to_vec(), self.apply(m.values())?)
    }
}
