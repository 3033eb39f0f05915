//! Deterministic synthetic cohorts: class-conditional Gaussian embeddings with
//! realistic demographics, written in the same formats as real data.

use std::path::Path;

use chrono::{Days, NaiveDate};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustic::acoustic_column_names;
use crate::dataset::{write_manifest, Cohort, Ethnicity, FeatureMatrix, FeatureSet, Label, SampleRecord, Sex};
use crate::error::{Error, Result};

pub const AGE_MEAN: f64 = 62.0;
pub const AGE_STD: f64 = 13.0;
pub const AGE_RANGE: (f64, f64) = (16.0, 93.0);
/// Weight of the per-sample latent shared across modalities.
pub const LATENT_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_participants: usize,
    pub pd_fraction: f64,
    /// Inclusive range of recordings per participant.
    pub samples_per_participant: (usize, usize),
    pub modalities: Vec<(FeatureSet, usize)>,
    /// Class-mean shift in units of the within-class standard deviation.
    pub delta: f64,
    pub sex_weights: [f64; 2],
    /// White, Black, American Indian, Asian, Other.
    pub ethnicity_weights: [f64; 5],
    pub cohort_weights: [f64; 3],
    /// Probability that each demographic field is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_participants: 2000,
            pd_fraction: 0.5,
            samples_per_participant: (1, 1),
            modalities: FeatureSet::ALL.iter().map(|&s| (s, s.expected_dim())).collect(),
            delta: 3.0,
            sex_weights: [0.5, 0.5],
            ethnicity_weights: [0.8, 0.06, 0.02, 0.06, 0.06],
            cohort_weights: [0.6, 0.25, 0.15],
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_participants < 2 {
            return bad(format!("n_participants = {} must be at least 2", self.n_participants));
        }
        if !(self.pd_fraction > 0.0 && self.pd_fraction < 1.0) {
            return bad(format!("pd_fraction {} outside (0, 1)", self.pd_fraction));
        }
        let (lo, hi) = self.samples_per_participant;
        if lo == 0 || lo > hi {
            return bad(format!("samples_per_participant ({lo}, {hi}) is not a valid range"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta {} must be finite and >= 0", self.delta));
        }
        if self.modalities.is_empty() || self.modalities.iter().any(|&(_, d)| d == 0) {
            return bad("need at least one modality with positive dimension".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} outside [0, 1]", self.missing_rate));
        }
        let weights_ok = |w: &[f64]| w.iter().all(|&x| x >= 0.0 && x.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&self.sex_weights) || !weights_ok(&self.ethnicity_weights) || !weights_ok(&self.cohort_weights) {
            return bad("categorical weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }
}

/// Per-modality class direction `u` and latent loading direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTruth {
    pub set: FeatureSet,
    pub direction: Array1<f64>,
    pub latent_loading: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub records: Vec<SampleRecord>,
    pub features: Vec<FeatureMatrix>,
    pub truth: Vec<ModalityTruth>,
}

impl SynthCohort {
    pub fn feature(&self, set: FeatureSet) -> Option<&FeatureMatrix> {
        self.features.iter().find(|f| f.name == set.as_str())
    }

    /// Writes `manifest.csv` and `<set>.csv` per modality into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&dir.join("manifest.csv"), &self.records)?;
        for f in &self.features {
            f.write_csv(&dir.join(format!("{}.csv", f.name)))?;
        }
        Ok(())
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn categorical<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], weights: &[f64]) -> T {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (&it, &w) in items.iter().zip(weights) {
        if r < w {
            return it;
        }
        r -= w;
    }
    *items.last().expect("non-empty")
}

fn truncated_age(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let a = AGE_MEAN + AGE_STD * z;
        if (AGE_RANGE.0..=AGE_RANGE.1).contains(&a) {
            return (a * 10.0).round() / 10.0;
        }
    }
}

fn column_names(set: FeatureSet, dim: usize) -> Vec<String> {
    if set == FeatureSet::Acoustic && dim == crate::acoustic::ACOUSTIC_DIM {
        acoustic_column_names()
    } else {
        (0..dim).map(|j| format!("{}_{j}", set.as_str())).collect()
    }
}

/// Generates the cohort. Exactly `round(n·pd_fraction)` participants are PD.
///
/// Each sample of modality `m` is `y·δ·u_m + ε + 0.5·z·w_m` with `ε ~ N(0, I)`,
/// `z ~ N(0, 1)` shared by all modalities of the sample, and `u_m`, `w_m`
/// seeded unit directions.
pub fn generate(spec: &SynthSpec) -> Result<SynthCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth: Vec<ModalityTruth> = spec
        .modalities
        .iter()
        .map(|&(set, d)| ModalityTruth {
            set,
            direction: unit_vector(d, &mut rng),
            latent_loading: unit_vector(d, &mut rng),
        })
        .collect();

    let n = spec.n_participants;
    let n_pd = ((n as f64 * spec.pd_fraction).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_pd { Label::Pd } else { Label::Control }).collect();
    labels.shuffle(&mut rng);

    let base = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date");
    let width = (n.max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::new();
    let sexes = [Sex::Male, Sex::Female];
    let ethnicities = [
        Ethnicity::White,
        Ethnicity::Black,
        Ethnicity::AmericanIndian,
        Ethnicity::Asian,
        Ethnicity::Other,
    ];
    for (p, &label) in labels.iter().enumerate() {
        let pid = format!("P{p:0width$}");
        let missing = |rng: &mut ChaCha8Rng| rng.random::<f64>() < spec.missing_rate;
        let age = (!missing(&mut rng)).then(|| truncated_age(&mut rng));
        let sex = (!missing(&mut rng)).then(|| categorical(&mut rng, &sexes, &spec.sex_weights));
        let ethnicity = (!missing(&mut rng)).then(|| categorical(&mut rng, &ethnicities, &spec.ethnicity_weights));
        let cohort = categorical(&mut rng, &Cohort::ALL, &spec.cohort_weights);
        let disease_duration = label.is_pd().then(|| (rng.random_range(0.0..15.0f64) * 10.0).round() / 10.0);
        let k = rng.random_range(spec.samples_per_participant.0..=spec.samples_per_participant.1);
        let first_day = rng.random_range(0..1000u64);
        for s in 0..k {
            records.push(SampleRecord {
                sample_id: format!("{pid}-S{s}"),
                participant_id: pid.clone(),
                recording_date: base + Days::new(first_day + 30 * s as u64),
                cohort,
                label,
                age,
                sex,
                ethnicity,
                disease_duration,
                audio_path: None,
            });
        }
    }

    let m = records.len();
    let latent: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    let mut features = Vec::with_capacity(truth.len());
    for t in &truth {
        let d = t.direction.len();
        let mut x = Array2::<f64>::zeros((m, d));
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            let y = f64::from(records[i].label.as_target());
            let z = LATENT_WEIGHT * latent[i];
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                row[j] = y * spec.delta * t.direction[j] + eps + z * t.latent_loading[j];
            }
        }
        features.push(FeatureMatrix::new(t.set.as_str(), column_names(t.set, d), ids.clone(), x)?);
    }
    Ok(SynthCohort { records, features, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;

    fn small(n: usize, delta: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_participants: n,
            delta,
            seed,
            modalities: vec![(FeatureSet::Acoustic, 38), (FeatureSet::Wavlm, 64)],
            ..SynthSpec::default()
        }
    }

    fn oracle_auroc(c: &SynthCohort, k: usize) -> f64 {
        let f = &c.features[k];
        let scores: Vec<f64> = f.values().outer_iter().map(|r| r.dot(&c.truth[k].direction)).collect();
        let labels: Vec<u8> = c.records.iter().map(|r| r.label.as_target()).collect();
        auroc(&scores, &labels).unwrap()
    }

    #[test]
    fn default_dims() {
        let dims: Vec<usize> = SynthSpec::default().modalities.iter().map(|m| m.1).collect();
        assert_eq!(dims, vec![38, 768, 1024, 1024]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(50, 1.0, 3)).unwrap();
        let b = generate(&small(50, 1.0, 3)).unwrap();
        let c = generate(&small(50, 1.0, 4)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features[1].to_csv().unwrap(), b.features[1].to_csv().unwrap());
        assert_ne!(a.features[1].to_csv().unwrap(), c.features[1].to_csv().unwrap());
    }

    #[test]
    fn no_signal_gives_chance_auroc() {
        let c = generate(&small(2000, 0.0, 1)).unwrap();
        for k in 0..2 {
            assert!((oracle_auroc(&c, k) - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn separation_three_is_near_closed_form() {
        let c = generate(&small(2000, 3.0, 2)).unwrap();
        for k in 0..2 {
            let a = oracle_auroc(&c, k);
            // Φ(3/√2) ≈ 0.983 up to the small latent term along u.
            assert!((0.95..=0.995).contains(&a), "{a}");
        }
    }

    #[test]
    fn class_mean_difference_aligns_with_direction() {
        // Sampling noise on the mean difference has norm about sqrt(4d/n), so
        // the expected cosine is delta / sqrt(delta^2 + 4d/n): high for the
        // acoustic set, lower for 1024-dimensional embeddings at n = 1000.
        let spec = SynthSpec {
            n_participants: 1000,
            delta: 3.0,
            seed: 8,
            modalities: vec![(FeatureSet::Acoustic, 38), (FeatureSet::Wavlm, 1024)],
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        let y: Vec<bool> = c.records.iter().map(|r| r.label.is_pd()).collect();
        for (f, t) in c.features.iter().zip(&c.truth) {
            let mean = |want: bool| {
                let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == want).collect();
                rows.iter().fold(Array1::zeros(f.dim()), |acc: Array1<f64>, &i| acc + f.values().row(i)) / rows.len() as f64
            };
            let diff = mean(true) - mean(false);
            let cos = diff.dot(&t.direction) / diff.dot(&diff).sqrt();
            let expected = 3.0 / (9.0 + 4.0 * f.dim() as f64 / 1000.0).sqrt();
            assert!((cos - expected).abs() < 0.03, "{}: cos {cos}, expected {expected}", f.name);
            if expected >= 0.95 {
                assert!(cos >= 0.9, "{}: {cos}", f.name);
            }
        }
    }

    #[test]
    fn demographics_in_range_and_balanced() {
        let c = generate(&small(600, 1.0, 5)).unwrap();
        let pd = c.records.iter().filter(|r| r.label.is_pd()).count();
        assert!(((pd as f64 / 600.0) - 0.5).abs() <= 0.02);
        for r in &c.records {
            let a = r.age.unwrap();
            assert!((16.0..=93.0).contains(&a));
            assert_eq!(r.disease_duration.is_some(), r.label.is_pd());
        }
        let mean = c.records.iter().map(|r| r.age.unwrap()).sum::<f64>() / 600.0;
        assert!((mean - 62.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn multi_sample_participants_share_metadata() {
        let spec = SynthSpec {
            samples_per_participant: (1, 3),
            ..small(40, 1.0, 6)
        };
        let c = generate(&spec).unwrap();
        assert!(c.records.len() > 40);
        for w in c.records.windows(2) {
            if w[0].participant_id == w[1].participant_id {
                assert_eq!(w[0].label, w[1].label);
                assert_eq!(w[0].age, w[1].age);
                assert!(w[0].recording_date < w[1].recording_date);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec { pd_fraction: 1.0, ..small(10, 1.0, 0) },
            SynthSpec { delta: -1.0, ..small(10, 1.0, 0) },
            SynthSpec { samples_per_participant: (2, 1), ..small(10, 1.0, 0) },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn writes_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(20, 1.0, 7)).unwrap();
        c.write(dir.path()).unwrap();
        let recs = crate::dataset::load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(recs, c.records);
        let f = FeatureMatrix::load_csv("wavlm", &dir.path().join("wavlm.csv")).unwrap();
        assert_eq!(f.dim(), 64);
        let acoustic = FeatureMatrix::load_csv("acoustic", &dir.path().join("acoustic.csv")).unwrap();
        assert_eq!(acoustic.column_names, acoustic_column_names());
    }
}
