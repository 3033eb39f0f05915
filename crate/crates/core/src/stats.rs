//! Subgroup bias testing: Fisher exact test, Bonferroni correction,
//! Spearman rank correlation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::factorial::ln_factorial;

use crate::dataset::{Cohort, Ethnicity, SampleRecord, Sex};
use crate::error::{Error, Result};

/// Relative slack when comparing table probabilities against the observed one.
pub const FISHER_REL_TOL: f64 = 1e-7;

/// 2×2 table; rows are groups, columns are (correct, incorrect).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Table2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Table2x2 { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Two-sided Fisher exact test: the summed hypergeometric probability of
/// every table with the observed margins that is no more likely than the
/// observed table.
pub fn fisher_exact_two_sided(t: Table2x2) -> Result<f64> {
    let n = t.total();
    if n == 0 {
        return Err(Error::invalid("Fisher test on an empty table"));
    }
    let r1 = t.a + t.b;
    let r2 = t.c + t.d;
    let c1 = t.a + t.c;
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let denom = ln_choose(n, c1);
    let logp = |x: u64| ln_choose(r1, x) + ln_choose(r2, c1 - x) - denom;
    let cutoff = logp(t.a) + FISHER_REL_TOL.ln_1p();
    let p: f64 = (lo..=hi).map(logp).filter(|&l| l <= cutoff).map(f64::exp).sum();
    Ok(p.min(1.0))
}

pub fn bonferroni(alpha: f64, m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::invalid("Bonferroni needs at least one test"));
    }
    Ok(alpha / m as f64)
}

/// Midranks (1-based, ties averaged) and the sizes of the tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 4 {
        return Err(Error::invalid(format!("Spearman needs at least 4 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in Spearman input"));
    }
    pearson(&midranks(x).0, &midranks(y).0).ok_or_else(|| Error::invalid("constant input has no rank variance"))
}

/// Spearman's rho with a two-sided p-value from the t approximation on
/// n − 2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let rho = spearman_rho(x, y)?;
    Ok((rho, spearman_t_p(rho, x.len())))
}

pub fn spearman_t_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Largest sample size accepted by [`spearman_permutation_p`].
pub const SPEARMAN_EXACT_MAX: usize = 10;

/// Exact two-sided permutation p-value: the share of all orderings of `y`
/// whose |rho| reaches the observed |rho|.
pub fn spearman_permutation_p(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let rho = spearman_rho(x, y)?;
    let n = x.len();
    if n > SPEARMAN_EXACT_MAX {
        return Err(Error::invalid(format!("exact Spearman limited to n <= {SPEARMAN_EXACT_MAX}")));
    }
    let rx = midranks(x).0;
    let mut ry = midranks(y).0;
    let target = rho.abs() - 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    // Heap's algorithm over all n! orderings.
    let mut c = vec![0usize; n];
    let mut visit = |ry: &[f64]| {
        total += 1;
        if pearson(&rx, ry).unwrap_or(0.0).abs() >= target {
            hits += 1;
        }
    };
    visit(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            visit(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((rho, hits as f64 / total as f64))
}

pub const BIAS_ALPHA: f64 = 0.05;
pub const BIAS_TESTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub property: String,
    pub group_a: String,
    pub group_b: String,
    pub n_a: u64,
    pub n_b: u64,
    pub correct_a: u64,
    pub correct_b: u64,
    pub accuracy_a: Option<f64>,
    pub accuracy_b: Option<f64>,
    /// `None` when a group is empty.
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

impl BiasComparison {
    pub fn table(&self) -> Table2x2 {
        Table2x2::new(self.correct_a, self.n_a - self.correct_a, self.correct_b, self.n_b - self.correct_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    A,
    B,
}

type Grouping = (&'static str, &'static str, &'static str, fn(&SampleRecord) -> Option<Side>);

fn cohort_pair(r: &SampleRecord, a: Cohort, b: Cohort) -> Option<Side> {
    if r.cohort == a {
        Some(Side::A)
    } else if r.cohort == b {
        Some(Side::B)
    } else {
        None
    }
}

/// The six comparisons, in report order.
fn groupings() -> [Grouping; 6] {
    [
        ("Sex", "Male", "Female", |r| match r.sex {
            Some(Sex::Male) => Some(Side::A),
            Some(Sex::Female) => Some(Side::B),
            _ => None,
        }),
        ("Ethnicity", "White", "Non-White", |r| match r.ethnicity {
            Some(Ethnicity::White) => Some(Side::A),
            Some(e) if e.is_non_white() => Some(Side::B),
            _ => None,
        }),
        ("Age", "<50", ">=50", |r| r.age.map(|a| if a < 50.0 { Side::A } else { Side::B })),
        ("Recording Environment", "Home Recorded", "Clinical Setup", |r| {
            cohort_pair(r, Cohort::HomeRecorded, Cohort::ClinicalSetup)
        }),
        ("Recording Environment", "Home Recorded", "PD Care Facility", |r| {
            cohort_pair(r, Cohort::HomeRecorded, Cohort::PdCareFacility)
        }),
        ("Recording Environment", "Clinical Setup", "PD Care Facility", |r| {
            cohort_pair(r, Cohort::ClinicalSetup, Cohort::PdCareFacility)
        }),
    ]
}

/// Sample-level accuracy comparisons across demographic subgroups. Records
/// with a missing or out-of-scope attribute are excluded from that comparison
/// only. Significance is judged against `bonferroni(0.05, 6)`.
pub fn subgroup_bias_report(records: &[SampleRecord], correct: &[bool]) -> Result<Vec<BiasComparison>> {
    if records.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            what: "records vs correctness flags",
            expected: records.len(),
            actual: correct.len(),
        });
    }
    let alpha = bonferroni(BIAS_ALPHA, BIAS_TESTS)?;
    groupings()
        .into_iter()
        .map(|(property, ga, gb, side)| {
            let (mut n, mut k) = ([0u64; 2], [0u64; 2]);
            for (r, &ok) in records.iter().zip(correct) {
                if let Some(s) = side(r) {
                    let i = usize::from(s == Side::B);
                    n[i] += 1;
                    k[i] += u64::from(ok);
                }
            }
            let p = if n[0] > 0 && n[1] > 0 {
                Some(fisher_exact_two_sided(Table2x2::new(k[0], n[0] - k[0], k[1], n[1] - k[1]))?)
            } else {
                None
            };
            Ok(BiasComparison {
                property: property.to_string(),
                group_a: ga.to_string(),
                group_b: gb.to_string(),
                n_a: n[0],
                n_b: n[1],
                correct_a: k[0],
                correct_b: k[1],
                accuracy_a: (n[0] > 0).then(|| k[0] as f64 / n[0] as f64),
                accuracy_b: (n[1] > 0).then(|| k[1] as f64 / n[1] as f64),
                p_value: p,
                significant: p.map(|p| p < alpha),
            })
        })
        .collect()
}

pub fn bias_report_to_csv(report: &[BiasComparison]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["property", "group_a", "group_b", "n_a", "n_b", "accuracy_a", "accuracy_b", "p_value", "significant"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in report {
        w.write_record([
            c.property.clone(),
            c.group_a.clone(),
            c.group_b.clone(),
            c.n_a.to_string(),
            c.n_b.to_string(),
            opt(c.accuracy_a),
            opt(c.accuracy_b),
            opt(c.p_value),
            c.significant.map_or("not computable".to_string(), |s| if s { "Yes" } else { "No" }.to_string()),
        ])?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_bias_report(path: &Path, report: &[BiasComparison]) -> Result<()> {
    crate::io::write_atomic(path, &bias_report_to_csv(report)?)
}
