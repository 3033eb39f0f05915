//! Baseline classifiers and projection-based fusion networks.
//!
//! Three architectures share one decision head:
//!
//! * [`Model::Classifier`]: sigmoid head over one (possibly concatenated)
//!   feature vector.
//! * [`Model::Fusion`]: the source embedding is projected into the target
//!   space, both are L2-normalized and summed, then classified. Training adds
//!   a cosine alignment term between the projection and the raw target and a
//!   reconstruction term decoding the source back from its projection.
//! * [`Model::Shared`]: every modality is projected into a common space; the
//!   alignment term averages over modality pairs and each modality has its own
//!   decoder.
//!
//! Gradients are analytic. Batches are processed in fixed chunks of
//! [`CHUNK_ROWS`] rows whose partial sums are reduced in chunk order, so the
//! result does not depend on the [`Exec`] strategy.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::preprocess::PreprocessPlan;

pub const CHUNK_ROWS: usize = 32;
pub const DEFAULT_HIDDEN: usize = 64;
pub const PROB_CLAMP: f64 = 1e-7;

/// Nested-list (row-major) serialization for matrices.
mod arr2_serde {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
        (a.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let (cols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        let n = rows.len();
        let mut flat = Vec::with_capacity(n * cols);
        for r in rows {
            if r.len() != cols {
                return Err(D::Error::custom("ragged matrix"));
            }
            flat.extend(r);
        }
        Array2::from_shape_vec((n, cols), flat).map_err(D::Error::custom)
    }
}

mod arr1_serde {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        a.to_vec().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[serde(alias = "ShallowANN")]
    Shallow,
    #[serde(alias = "ANN")]
    Ann,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shallow" | "shallowann" => Ok(HeadKind::Shallow),
            "ann" => Ok(HeadKind::Ann),
            other => Err(Error::invalid(format!("unknown model head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecMetric {
    Mse,
    L1,
    /// KL(softmax(x) ‖ softmax(x̂)).
    Kl,
}

impl std::str::FromStr for RecMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(RecMetric::Mse),
            "l1" => Ok(RecMetric::L1),
            "kl" => Ok(RecMetric::Kl),
            other => Err(Error::invalid(format!("unknown reconstruction metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pred: f64,
    pub cos: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pred: 1.0,
            cos: 1.0,
            rec: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        for (name, w) in [("pred", self.pred), ("cos", self.cos), ("rec", self.rec)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Decision head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ClassifierParams {
    Shallow {
        #[serde(with = "arr1_serde")]
        w: Array1<f64>,
        b: f64,
    },
    /// `sigmoid(w2 · relu(W1 x + b1) + b2)`.
    Ann {
        #[serde(with = "arr2_serde")]
        w1: Array2<f64>,
        #[serde(with = "arr1_serde")]
        b1: Array1<f64>,
        #[serde(with = "arr1_serde")]
        w2: Array1<f64>,
        b2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// d_tgt × d_src.
    #[serde(with = "arr2_serde")]
    pub w_proj: Array2<f64>,
    #[serde(with = "arr1_serde")]
    pub b_proj: Array1<f64>,
    /// d_src × d_tgt, untied from the projection.
    #[serde(with = "arr2_serde")]
    pub w_rec: Array2<f64>,
    #[serde(with = "arr1_serde")]
    pub b_rec: Array1<f64>,
    pub renormalize_after_sum: bool,
    pub decision: ClassifierParams,
    pub weights: LossWeights,
    pub rec_metric: RecMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// d_shared × d_m.
    #[serde(with = "arr2_serde")]
    pub w: Array2<f64>,
    #[serde(with = "arr1_serde")]
    pub b: Array1<f64>,
    /// Decoder d_m × d_shared.
    #[serde(with = "arr2_serde")]
    pub w_rec: Array2<f64>,
    #[serde(with = "arr1_serde")]
    pub b_rec: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSpaceParams {
    pub d_shared: usize,
    pub projections: Vec<Projection>,
    pub renormalize_after_sum: bool,
    pub decision: ClassifierParams,
    pub weights: LossWeights,
    pub rec_metric: RecMetric,
}

/// Architecture description from which parameters are initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Classifier {
        head: HeadKind,
        input_dim: usize,
        hidden: usize,
    },
    Fusion {
        head: HeadKind,
        d_src: usize,
        d_tgt: usize,
        hidden: usize,
        renormalize_after_sum: bool,
        weights: LossWeights,
        rec_metric: RecMetric,
    },
    Shared {
        head: HeadKind,
        dims: Vec<usize>,
        d_shared: usize,
        hidden: usize,
        renormalize_after_sum: bool,
        weights: LossWeights,
        rec_metric: RecMetric,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Model {
    Classifier(ClassifierParams),
    Fusion(FusionParams),
    Shared(SharedSpaceParams),
}

/// Mean loss components over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub cos: f64,
    pub rec: f64,
    /// Samples whose cosine term hit a zero-norm operand and was set to 1.
    pub degenerate_cos: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    total: f64,
    bce: f64,
    cos: f64,
    rec: f64,
    degenerate: usize,
}

impl LossSums {
    fn add(&mut self, o: &LossSums) {
        self.total += o.total;
        self.bce += o.bce;
        self.cos += o.cos;
        self.rec += o.rec;
        self.degenerate += o.degenerate;
    }

    fn mean(&self, n: usize) -> LossBreakdown {
        let n = n as f64;
        LossBreakdown {
            total: self.total / n,
            bce: self.bce / n,
            cos: self.cos / n,
            rec: self.rec / n,
            degenerate_cos: self.degenerate,
        }
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}

impl ClassifierParams {
    fn init(head: HeadKind, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        match head {
            HeadKind::Shallow => ClassifierParams::Shallow {
                w: uniform_vector(rng, d, d),
                b: 0.0,
            },
            HeadKind::Ann => ClassifierParams::Ann {
                w1: uniform_matrix(rng, hidden, d),
                b1: Array1::zeros(hidden),
                w2: uniform_vector(rng, hidden, hidden),
                b2: 0.0,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ClassifierParams::Shallow { w, .. } => w.len(),
            ClassifierParams::Ann { w1, .. } => w1.ncols(),
        }
    }

    pub fn head(&self) -> HeadKind {
        match self {
            ClassifierParams::Shallow { .. } => HeadKind::Shallow,
            ClassifierParams::Ann { .. } => HeadKind::Ann,
        }
    }

    fn arrays(&self) -> Vec<&[f64]> {
        match self {
            ClassifierParams::Shallow { w, b } => vec![w.as_slice().expect("standard layout"), std::slice::from_ref(b)],
            ClassifierParams::Ann { w1, b1, w2, b2 } => vec![
                w1.as_slice().expect("standard layout"),
                b1.as_slice().expect("standard layout"),
                w2.as_slice().expect("standard layout"),
                std::slice::from_ref(b2),
            ],
        }
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ClassifierParams::Shallow { w, b } => {
                vec![w.as_slice_mut().expect("standard layout"), std::slice::from_mut(b)]
            }
            ClassifierParams::Ann { w1, b1, w2, b2 } => vec![
                w1.as_slice_mut().expect("standard layout"),
                b1.as_slice_mut().expect("standard layout"),
                w2.as_slice_mut().expect("standard layout"),
                std::slice::from_mut(b2),
            ],
        }
    }

    /// Logits and the hidden pre-activations (ann only).
    fn forward(&self, f: ArrayView2<f64>) -> (Array1<f64>, Option<Array2<f64>>) {
        match self {
            ClassifierParams::Shallow { w, b } => (f.dot(w) + *b, None),
            ClassifierParams::Ann { w1, b1, w2, b2 } => {
                let a = f.dot(&w1.t()) + b1;
                let h = a.mapv(|v| v.max(0.0));
                (h.dot(w2) + *b2, Some(a))
            }
        }
    }

    /// Accumulates parameter gradients into `grad`; returns dL/df.
    fn backward(&self, f: ArrayView2<f64>, pre: &Option<Array2<f64>>, dz: &Array1<f64>, grad: &mut ClassifierParams) -> Array2<f64> {
        match (self, grad) {
            (ClassifierParams::Shallow { w, .. }, ClassifierParams::Shallow { w: gw, b: gb }) => {
                *gw += &f.t().dot(dz);
                *gb += dz.sum();
                outer(dz, w)
            }
            (ClassifierParams::Ann { w1, w2, .. }, ClassifierParams::Ann { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }) => {
                let a = pre.as_ref().expect("ann keeps pre-activations");
                let h = a.mapv(|v| v.max(0.0));
                *gw2 += &h.t().dot(dz);
                *gb2 += dz.sum();
                let mut da = outer(dz, w2);
                da.zip_mut_with(a, |d, &av| {
                    if av <= 0.0 {
                        *d = 0.0
                    }
                });
                *gw1 += &da.t().dot(&f);
                *gb1 += &da.sum_axis(Axis(0));
                da.dot(w1)
            }
            _ => unreachable!("gradient shape follows parameters"),
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.outer_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Row-wise L2 normalization; zero rows pass through.
fn normalize_rows(m: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (mut r, &n) in out.outer_iter_mut().zip(norms) {
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

/// Backward through row normalization `u = v / ‖v‖`.
fn normalize_backward(du: &Array2<f64>, u: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut dv = du.clone();
    for ((mut d, ur), &n) in dv.outer_iter_mut().zip(u.outer_iter()).zip(norms) {
        if n > 0.0 {
            let proj = ur.dot(&d);
            d.zip_mut_with(&ur, |dv, &uv| *dv = (*dv - uv * proj) / n);
        }
    }
    dv
}

/// Per-row `1 - cos(a, b)` and its gradient with respect to `a` (and `b`).
/// Zero-norm rows give loss 1, zero gradient, and are counted.
fn cosine_rows(a: &Array2<f64>, b: ArrayView2<f64>, with_b_grad: bool) -> (Array1<f64>, Array2<f64>, Option<Array2<f64>>, usize) {
    let n = a.nrows();
    let mut loss = Array1::zeros(n);
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = with_b_grad.then(|| Array2::zeros(b.raw_dim()));
    let mut degenerate = 0;
    for i in 0..n {
        let (ar, br) = (a.row(i), b.row(i));
        let (na, nb) = (ar.dot(&ar).sqrt(), br.dot(&br).sqrt());
        if na == 0.0 || nb == 0.0 {
            loss[i] = 1.0;
            degenerate += 1;
            continue;
        }
        let c = ar.dot(&br) / (na * nb);
        loss[i] = 1.0 - c;
        // d(1 - cos)/da = -(b̂ - c â) / ‖a‖
        for j in 0..ar.len() {
            ga[[i, j]] = -(br[j] / nb - c * ar[j] / na) / na;
        }
        if let Some(gb) = gb.as_mut() {
            for j in 0..br.len() {
                gb[[i, j]] = -(ar[j] / na - c * br[j] / nb) / nb;
            }
        }
    }
    (loss, ga, gb, degenerate)
}

fn log_softmax(r: ArrayView1<f64>) -> Array1<f64> {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    r.mapv(|v| v - lse)
}

/// Per-row reconstruction loss of `xhat` against `x` and dLoss/dxhat.
fn reconstruction(metric: RecMetric, xhat: &Array2<f64>, x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = x.ncols() as f64;
    let diff = xhat - &x;
    match metric {
        RecMetric::Mse => (
            diff.outer_iter().map(|r| r.dot(&r) / d).collect(),
            diff.mapv(|v| 2.0 * v / d),
        ),
        RecMetric::L1 => (
            diff.outer_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / d).collect(),
            diff.mapv(|v| if v > 0.0 { 1.0 / d } else if v < 0.0 { -1.0 / d } else { 0.0 }),
        ),
        RecMetric::Kl => {
            let mut loss = Array1::zeros(x.nrows());
            let mut g = Array2::zeros(xhat.raw_dim());
            for i in 0..x.nrows() {
                let lp = log_softmax(x.row(i));
                let lq = log_softmax(xhat.row(i));
                let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
                loss[i] = kl.max(0.0);
                for j in 0..lp.len() {
                    g[[i, j]] = lq[j].exp() - lp[j].exp();
                }
            }
            (loss, g)
        }
    }
}

fn check_cols(what: &'static str, x: &ArrayView2<f64>, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual: x.ncols(),
        });
    }
    Ok(())
}

struct ChunkOut {
    probs: Array1<f64>,
    loss: LossSums,
    grad: Option<Model>,
}

/// Decision head plus BCE on fused rows; returns dL/dF when gradients are wanted.
fn head_step(
    decision: &ClassifierParams,
    f: &Array2<f64>,
    y: Option<ArrayView1<f64>>,
    w_pred: f64,
    grad: Option<&mut ClassifierParams>,
) -> (Array1<f64>, Array1<f64>, Option<Array2<f64>>) {
    let (z, pre) = decision.forward(f.view());
    let probs = z.mapv(sigmoid);
    let Some(y) = y else {
        return (probs, Array1::zeros(f.nrows()), None);
    };
    let b: Array1<f64> = probs.iter().zip(y).map(|(&p, &t)| bce(p, t)).collect();
    let df = grad.map(|g| {
        let dz: Array1<f64> = probs.iter().zip(y).map(|(&p, &t)| w_pred * (p - t)).collect();
        decision.backward(f.view(), &pre, &dz, g)
    });
    (probs, b, df)
}

impl Model {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positive = |name: &str, v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match spec {
            ModelSpec::Classifier { head, input_dim, hidden } => {
                positive("input_dim", *input_dim)?;
                positive("hidden", *hidden)?;
                Ok(Model::Classifier(ClassifierParams::init(*head, *input_dim, *hidden, &mut rng)))
            }
            ModelSpec::Fusion {
                head,
                d_src,
                d_tgt,
                hidden,
                renormalize_after_sum,
                weights,
                rec_metric,
            } => {
                positive("d_src", *d_src)?;
                positive("d_tgt", *d_tgt)?;
                positive("hidden", *hidden)?;
                weights.validate()?;
                let w_proj = uniform_matrix(&mut rng, *d_tgt, *d_src);
                let w_rec = uniform_matrix(&mut rng, *d_src, *d_tgt);
                Ok(Model::Fusion(FusionParams {
                    w_proj,
                    b_proj: Array1::zeros(*d_tgt),
                    w_rec,
                    b_rec: Array1::zeros(*d_src),
                    renormalize_after_sum: *renormalize_after_sum,
                    decision: ClassifierParams::init(*head, *d_tgt, *hidden, &mut rng),
                    weights: *weights,
                    rec_metric: *rec_metric,
                }))
            }
            ModelSpec::Shared {
                head,
                dims,
                d_shared,
                hidden,
                renormalize_after_sum,
                weights,
                rec_metric,
            } => {
                if dims.len() < 2 {
                    return Err(Error::invalid("shared-space fusion needs at least 2 modalities"));
                }
                for &d in dims {
                    positive("modality dim", d)?;
                }
                positive("d_shared", *d_shared)?;
                positive("hidden", *hidden)?;
                weights.validate()?;
                let projections = dims
                    .iter()
                    .map(|&d| {
                        let w = uniform_matrix(&mut rng, *d_shared, d);
                        let w_rec = uniform_matrix(&mut rng, d, *d_shared);
                        Projection {
                            w,
                            b: Array1::zeros(*d_shared),
                            w_rec,
                            b_rec: Array1::zeros(d),
                        }
                    })
                    .collect();
                Ok(Model::Shared(SharedSpaceParams {
                    d_shared: *d_shared,
                    projections,
                    renormalize_after_sum: *renormalize_after_sum,
                    decision: ClassifierParams::init(*head, *d_shared, *hidden, &mut rng),
                    weights: *weights,
                    rec_metric: *rec_metric,
                }))
            }
        }
    }

    /// Expected column count of each input modality, in order.
    pub fn input_dims(&self) -> Vec<usize> {
        match self {
            Model::Classifier(c) => vec![c.input_dim()],
            Model::Fusion(f) => vec![f.w_proj.ncols(), f.w_proj.nrows()],
            Model::Shared(s) => s.projections.iter().map(|p| p.w.ncols()).collect(),
        }
    }

    /// All learnable arrays in a fixed order (scalars as length-1 slices).
    pub fn arrays(&self) -> Vec<&[f64]> {
        fn sl(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn sv(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match self {
            Model::Classifier(c) => c.arrays(),
            Model::Fusion(f) => {
                let mut v = vec![sl(&f.w_proj), sv(&f.b_proj), sl(&f.w_rec), sv(&f.b_rec)];
                v.extend(f.decision.arrays());
                v
            }
            Model::Shared(s) => {
                let mut v = Vec::new();
                for p in &s.projections {
                    v.extend([sl(&p.w), sv(&p.b), sl(&p.w_rec), sv(&p.b_rec)]);
                }
                v.extend(s.decision.arrays());
                v
            }
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Classifier(c) => c.arrays_mut(),
            Model::Fusion(f) => {
                let mut v: Vec<&mut [f64]> = vec![
                    f.w_proj.as_slice_mut().expect("standard layout"),
                    f.b_proj.as_slice_mut().expect("standard layout"),
                    f.w_rec.as_slice_mut().expect("standard layout"),
                    f.b_rec.as_slice_mut().expect("standard layout"),
                ];
                v.extend(f.decision.arrays_mut());
                v
            }
            Model::Shared(s) => {
                let mut v: Vec<&mut [f64]> = Vec::new();
                for p in &mut s.projections {
                    v.push(p.w.as_slice_mut().expect("standard layout"));
                    v.push(p.b.as_slice_mut().expect("standard layout"));
                    v.push(p.w_rec.as_slice_mut().expect("standard layout"));
                    v.push(p.b_rec.as_slice_mut().expect("standard layout"));
                }
                v.extend(s.decision.arrays_mut());
                v
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Same shape, all learnable values zero.
    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Model) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &[ArrayView2<f64>], y: Option<ArrayView1<f64>>) -> Result<usize> {
        let dims = self.input_dims();
        if inputs.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                what: "input modalities",
                expected: dims.len(),
                actual: inputs.len(),
            });
        }
        let n = inputs[0].nrows();
        for (x, &d) in inputs.iter().zip(&dims) {
            check_cols("input columns", x, d)?;
            if x.nrows() != n {
                return Err(Error::DimensionMismatch {
                    what: "rows across modalities",
                    expected: n,
                    actual: x.nrows(),
                });
            }
        }
        if let Some(y) = y {
            if y.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "labels vs rows",
                    expected: n,
                    actual: y.len(),
                });
            }
        }
        Ok(n)
    }

    fn chunk(&self, inputs: &[ArrayView2<f64>], y: Option<ArrayView1<f64>>, want_grad: bool) -> ChunkOut {
        match self {
            Model::Classifier(c) => {
                let mut grad = want_grad.then(|| c.clone()).map(|mut g| {
                    g.arrays_mut().into_iter().for_each(|a| a.fill(0.0));
                    g
                });
                let x = inputs[0].to_owned();
                let (probs, b, _) = head_step(c, &x, y, 1.0, grad.as_mut());
                let bsum = b.sum();
                ChunkOut {
                    probs,
                    loss: LossSums {
                        total: bsum,
                        bce: bsum,
                        ..Default::default()
                    },
                    grad: grad.map(Model::Classifier),
                }
            }
            Model::Fusion(p) => fusion_chunk(p, inputs[0], inputs[1], y, want_grad),
            Model::Shared(p) => shared_chunk(p, inputs, y, want_grad),
        }
    }

    fn run(&self, inputs: &[ArrayView2<f64>], y: Option<ArrayView1<f64>>, want_grad: bool, exec: Exec) -> Result<(Array1<f64>, LossBreakdown, Option<Model>)> {
        let n = self.check_inputs(inputs, y)?;
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let ranges: Vec<(usize, usize)> = (0..n).step_by(CHUNK_ROWS).map(|a| (a, (a + CHUNK_ROWS).min(n))).collect();
        let outs = exec.map(&ranges, |&(a, b)| {
            let xs: Vec<ArrayView2<f64>> = inputs.iter().map(|x| x.slice(s![a..b, ..])).collect();
            self.chunk(&xs, y.map(|y| y.slice_move(s![a..b])), want_grad)
        });
        let mut probs = Vec::with_capacity(n);
        let mut sums = LossSums::default();
        let mut grad: Option<Model> = None;
        for o in outs {
            probs.extend(o.probs.iter());
            sums.add(&o.loss);
            if let Some(g) = o.grad {
                match grad.as_mut() {
                    None => grad = Some(g),
                    Some(acc) => acc.add_assign(&g),
                }
            }
        }
        if let Some(g) = grad.as_mut() {
            g.scale(1.0 / n as f64);
        }
        Ok((Array1::from(probs), sums.mean(n), grad))
    }

    /// Probabilities for every row.
    pub fn predict(&self, inputs: &[ArrayView2<f64>], exec: Exec) -> Result<Array1<f64>> {
        Ok(self.run(inputs, None, false, exec)?.0)
    }

    /// Mean loss over the batch.
    pub fn loss(&self, inputs: &[ArrayView2<f64>], y: ArrayView1<f64>, exec: Exec) -> Result<LossBreakdown> {
        Ok(self.run(inputs, Some(y), false, exec)?.1)
    }

    /// Mean loss and its gradient with respect to every learnable array.
    pub fn loss_and_grad(&self, inputs: &[ArrayView2<f64>], y: ArrayView1<f64>, exec: Exec) -> Result<(LossBreakdown, Model)> {
        let (_, loss, grad) = self.run(inputs, Some(y), true, exec)?;
        Ok((loss, grad.expect("gradient requested")))
    }
}

fn fusion_chunk(p: &FusionParams, xs: ArrayView2<f64>, xt: ArrayView2<f64>, y: Option<ArrayView1<f64>>, want_grad: bool) -> ChunkOut {
    let proj = xs.dot(&p.w_proj.t()) + &p.b_proj;
    let pn = row_norms(&proj);
    let ns = normalize_rows(&proj, &pn);
    let tn = row_norms(&xt.to_owned());
    let nt = normalize_rows(&xt.to_owned(), &tn);
    let sum = &ns + &nt;
    let sn = row_norms(&sum);
    let f = if p.renormalize_after_sum { normalize_rows(&sum, &sn) } else { sum };

    let mut grad = want_grad.then(|| Model::Fusion(p.clone()).zeros_like());
    let Some(y) = y else {
        let (probs, _, _) = head_step(&p.decision, &f, None, p.weights.pred, None);
        return ChunkOut {
            probs,
            loss: LossSums::default(),
            grad: None,
        };
    };
    let w = p.weights;
    let g = grad.as_mut().map(|g| match g {
        Model::Fusion(g) => g,
        _ => unreachable!(),
    });
    let (probs, b, df) = match g {
        Some(g) => head_step(&p.decision, &f, Some(y), w.pred, Some(&mut g.decision)),
        None => head_step(&p.decision, &f, Some(y), w.pred, None),
    };
    let (cos, dcos, _, degenerate) = cosine_rows(&proj, xt, false);
    let xhat = proj.dot(&p.w_rec.t()) + &p.b_rec;
    let (rec, drec) = reconstruction(p.rec_metric, &xhat, xs);
    let total = w.pred * b.sum() + w.cos * cos.sum() + w.rec * rec.sum();
    let loss = LossSums {
        total,
        bce: b.sum(),
        cos: cos.sum(),
        rec: rec.sum(),
        degenerate,
    };
    if let (Some(df), Some(Model::Fusion(g))) = (df, grad.as_mut()) {
        let ds = if p.renormalize_after_sum { normalize_backward(&df, &f, &sn) } else { df };
        let mut dp = normalize_backward(&ds, &ns, &pn);
        dp.scaled_add(w.cos, &dcos);
        let dxhat = drec * w.rec;
        g.w_rec += &dxhat.t().dot(&proj);
        g.b_rec += &dxhat.sum_axis(Axis(0));
        dp += &dxhat.dot(&p.w_rec);
        g.w_proj += &dp.t().dot(&xs);
        g.b_proj += &dp.sum_axis(Axis(0));
    }
    ChunkOut { probs, loss, grad }
}

fn shared_chunk(p: &SharedSpaceParams, inputs: &[ArrayView2<f64>], y: Option<ArrayView1<f64>>, want_grad: bool) -> ChunkOut {
    let projs: Vec<Array2<f64>> = p.projections.iter().zip(inputs).map(|(pr, x)| x.dot(&pr.w.t()) + &pr.b).collect();
    let norms: Vec<Array1<f64>> = projs.iter().map(row_norms).collect();
    let normed: Vec<Array2<f64>> = projs.iter().zip(&norms).map(|(pm, nm)| normalize_rows(pm, nm)).collect();
    let mut sum = Array2::zeros(projs[0].raw_dim());
    for nm in &normed {
        sum += nm;
    }
    let sn = row_norms(&sum);
    let f = if p.renormalize_after_sum { normalize_rows(&sum, &sn) } else { sum };
    let Some(y) = y else {
        let (probs, _, _) = head_step(&p.decision, &f, None, p.weights.pred, None);
        return ChunkOut {
            probs,
            loss: LossSums::default(),
            grad: None,
        };
    };
    let w = p.weights;
    let mut grad = want_grad.then(|| Model::Shared(p.clone()).zeros_like());
    let g = grad.as_mut().map(|g| match g {
        Model::Shared(g) => g,
        _ => unreachable!(),
    });
    let (probs, b, df) = match g {
        Some(g) => head_step(&p.decision, &f, Some(y), w.pred, Some(&mut g.decision)),
        None => head_step(&p.decision, &f, Some(y), w.pred, None),
    };
    let m = projs.len();
    let n_pairs = (m * (m - 1) / 2) as f64;
    let rows = f.nrows();
    let mut cos = Array1::<f64>::zeros(rows);
    let mut degenerate = 0;
    let mut dproj: Vec<Array2<f64>> = projs.iter().map(|pm| Array2::zeros(pm.raw_dim())).collect();
    for a in 0..m {
        for bm in a + 1..m {
            let (l, ga, gb, deg) = cosine_rows(&projs[a], projs[bm].view(), true);
            cos += &(l / n_pairs);
            degenerate += deg;
            dproj[a].scaled_add(w.cos / n_pairs, &ga);
            dproj[bm].scaled_add(w.cos / n_pairs, &gb.expect("requested"));
        }
    }
    let mut rec = Array1::<f64>::zeros(rows);
    let mut drecs = Vec::with_capacity(m);
    for (k, pr) in p.projections.iter().enumerate() {
        let xhat = projs[k].dot(&pr.w_rec.t()) + &pr.b_rec;
        let (l, d) = reconstruction(p.rec_metric, &xhat, inputs[k]);
        rec += &(l / m as f64);
        drecs.push(d * (w.rec / m as f64));
    }
    let loss = LossSums {
        total: w.pred * b.sum() + w.cos * cos.sum() + w.rec * rec.sum(),
        bce: b.sum(),
        cos: cos.sum(),
        rec: rec.sum(),
        degenerate,
    };
    if let (Some(df), Some(Model::Shared(g))) = (df, grad.as_mut()) {
        let ds = if p.renormalize_after_sum { normalize_backward(&df, &f, &sn) } else { df };
        for k in 0..m {
            let mut dp = normalize_backward(&ds, &normed[k], &norms[k]);
            dp += &dproj[k];
            let pr = &p.projections[k];
            let gp = &mut g.projections[k];
            gp.w_rec += &drecs[k].t().dot(&projs[k]);
            gp.b_rec += &drecs[k].sum_axis(Axis(0));
            dp += &drecs[k].dot(&pr.w_rec);
            gp.w += &dp.t().dot(&inputs[k]);
            gp.b += &dp.sum_axis(Axis(0));
        }
    }
    ChunkOut { probs, loss, grad }
}

/// Intermediate values of one fusion forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionIntermediates {
    pub probability: f64,
    pub projected: Array1<f64>,
    pub n_src: Array1<f64>,
    pub n_tgt: Array1<f64>,
    pub fused: Array1<f64>,
}

fn single_row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row")
}

/// Forward pass for one sample, keeping every intermediate.
pub fn forward_fusion(p: &FusionParams, x_src: &[f64], x_tgt: &[f64]) -> Result<FusionIntermediates> {
    let (xs, xt) = (single_row(x_src), single_row(x_tgt));
    check_cols("fusion source", &xs.view(), p.w_proj.ncols())?;
    check_cols("fusion target", &xt.view(), p.w_proj.nrows())?;
    let proj = xs.dot(&p.w_proj.t()) + &p.b_proj;
    let pn = row_norms(&proj);
    let ns = normalize_rows(&proj, &pn);
    let nt = normalize_rows(&xt, &row_norms(&xt));
    let sum = &ns + &nt;
    let f = if p.renormalize_after_sum { normalize_rows(&sum, &row_norms(&sum)) } else { sum };
    let (z, _) = p.decision.forward(f.view());
    Ok(FusionIntermediates {
        probability: sigmoid(z[0]),
        projected: proj.row(0).to_owned(),
        n_src: ns.row(0).to_owned(),
        n_tgt: nt.row(0).to_owned(),
        fused: f.row(0).to_owned(),
    })
}

/// Loss components for one sample given its forward intermediates.
pub fn loss_fusion(p: &FusionParams, inter: &FusionIntermediates, x_src: &[f64], x_tgt: &[f64], y: f64) -> LossBreakdown {
    let proj = inter.projected.clone().insert_axis(Axis(0));
    let (cos, _, _, degenerate) = cosine_rows(&proj, single_row(x_tgt).view(), false);
    let xhat = proj.dot(&p.w_rec.t()) + &p.b_rec;
    let (rec, _) = reconstruction(p.rec_metric, &xhat, single_row(x_src).view());
    let b = bce(inter.probability, y);
    LossBreakdown {
        total: p.weights.pred * b + p.weights.cos * cos[0] + p.weights.rec * rec[0],
        bce: b,
        cos: cos[0],
        rec: rec[0],
        degenerate_cos: degenerate,
    }
}

/// Column-wise concatenation of feature sets over `order` (sample ids).
/// Column names are prefixed `set:` unless they already carry a prefix.
pub fn concat_features(sets: &[&FeatureMatrix], order: &[String]) -> Result<FeatureMatrix> {
    if sets.is_empty() {
        return Err(Error::invalid("nothing to concatenate"));
    }
    let mut names = Vec::new();
    let mut blocks = Vec::new();
    for m in sets {
        if let Some(missing) = order.iter().find(|id| !m.contains(id)) {
            return Err(Error::invalid(format!("sample {missing:?} missing from feature set {}", m.name)));
        }
        blocks.push(m.select(order)?);
        names.extend(m.column_names.iter().map(|c| if c.contains(':') { c.clone() } else { format!("{}:{c}", m.name) }));
    }
    let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let name = sets.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join("+");
    FeatureMatrix::new(name, names, order.to_vec(), values)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Portable trained-model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// Feature-set names feeding each model input, in order. A `+`-joined
    /// name denotes a concatenation.
    pub modalities: Vec<String>,
    /// One plan per raw feature set, in the order the sets were supplied.
    pub plans: Vec<PreprocessPlan>,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        if !self.model.all_finite() {
            return Err(Error::invalid("refusing to serialize non-finite parameters"));
        }
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                c.format_version
            )));
        }
        Ok(c)
    }
}
