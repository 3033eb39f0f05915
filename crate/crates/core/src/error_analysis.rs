//! Cohort error analysis: a greedy Gini tree over demographics that locates
//! where misclassifications concentrate, and two-attribute error heatmaps.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, Ethnicity, Label, SampleRecord, Sex};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const DEFAULT_MAX_DEPTH: usize = 4;
pub const DEFAULT_MIN_LEAF: usize = 10;
pub const DEFAULT_BINS: usize = 8;
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Age,
    Sex,
    Ethnicity,
    Label,
    Cohort,
}

/// Attributes the tree may split on, in tie-break order.
pub const TREE_ATTRIBUTES: [Attribute; 4] = [Attribute::Age, Attribute::Sex, Attribute::Ethnicity, Attribute::Label];

impl Attribute {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Sex => "sex",
            Attribute::Ethnicity => "ethnicity",
            Attribute::Label => "label",
            Attribute::Cohort => "cohort",
        }
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "age" => Attribute::Age,
            "sex" => Attribute::Sex,
            "ethnicity" => Attribute::Ethnicity,
            "label" => Attribute::Label,
            "cohort" => Attribute::Cohort,
            other => return Err(Error::invalid(format!("unknown attribute {other:?}"))),
        })
    }
}

/// One test sample with its demographics and whether it was misclassified.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSample {
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    pub ethnicity: Option<Ethnicity>,
    pub label: Label,
    pub cohort: Cohort,
    pub error: bool,
}

impl ErrorSample {
    pub fn from_records(records: &[SampleRecord], correct: &[bool]) -> Result<Vec<ErrorSample>> {
        if records.len() != correct.len() {
            return Err(Error::DimensionMismatch {
                what: "correctness flags",
                expected: records.len(),
                actual: correct.len(),
            });
        }
        Ok(records
            .iter()
            .zip(correct)
            .map(|(r, &ok)| ErrorSample {
                age: r.age,
                sex: r.sex.filter(|s| *s != Sex::Unknown),
                ethnicity: r.ethnicity.filter(|e| *e != Ethnicity::Unknown),
                label: r.label,
                cohort: r.cohort,
                error: !ok,
            })
            .collect())
    }

    fn category(&self, a: Attribute) -> Option<&'static str> {
        match a {
            Attribute::Age => None,
            Attribute::Sex => self.sex.map(Sex::as_str),
            Attribute::Ethnicity => self.ethnicity.map(Ethnicity::as_str),
            Attribute::Label => Some(self.label.as_str()),
            Attribute::Cohort => Some(self.cohort.as_str()),
        }
    }

    fn has(&self, a: Attribute) -> bool {
        match a {
            Attribute::Age => self.age.is_some(),
            _ => self.category(a).is_some(),
        }
    }
}

fn category_values(a: Attribute) -> Vec<&'static str> {
    match a {
        Attribute::Age => Vec::new(),
        Attribute::Sex => Sex::ALL.iter().filter(|s| **s != Sex::Unknown).map(|s| s.as_str()).collect(),
        Attribute::Ethnicity => Ethnicity::ALL
            .iter()
            .filter(|e| **e != Ethnicity::Unknown)
            .map(|e| e.as_str())
            .collect(),
        Attribute::Label => vec![Label::Control.as_str(), Label::Pd.as_str()],
        Attribute::Cohort => Cohort::ALL.iter().map(|c| c.as_str()).collect(),
    }
}

/// Left child takes `age <= threshold` or `attribute == value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitRule {
    Threshold { feature: Attribute, threshold: f64 },
    Category { feature: Attribute, equals: String },
}

impl SplitRule {
    pub fn feature(&self) -> Attribute {
        match self {
            SplitRule::Threshold { feature, .. } | SplitRule::Category { feature, .. } => *feature,
        }
    }

    /// `None` when the attribute is missing.
    fn goes_left(&self, s: &ErrorSample) -> Option<bool> {
        match self {
            SplitRule::Threshold { threshold, .. } => s.age.map(|a| a <= *threshold),
            SplitRule::Category { feature, equals } => s.category(*feature).map(|v| v == equals),
        }
    }

    fn describe(&self, left: bool) -> String {
        match self {
            SplitRule::Threshold { feature, threshold } => {
                format!("{} {} {threshold}", feature.as_str(), if left { "<=" } else { ">" })
            }
            SplitRule::Category { feature, equals } => {
                format!("{} {} {equals}", feature.as_str(), if left { "==" } else { "!=" })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTreeNode {
    pub split: Option<SplitRule>,
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
    pub error_coverage: f64,
    /// Samples lacking the split attribute, sent to the larger child.
    pub missing_routed: usize,
    pub children: Vec<ErrorTreeNode>,
}

impl ErrorTreeNode {
    fn leaf(n: usize, errors: usize, total_errors: usize) -> Self {
        ErrorTreeNode {
            split: None,
            n,
            errors,
            error_rate: rate(errors, n),
            error_coverage: rate(errors, total_errors),
            missing_routed: 0,
            children: Vec::new(),
        }
    }

    pub fn leaves(&self) -> Vec<&ErrorTreeNode> {
        if self.children.is_empty() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    /// Indented text rendering, one node per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, "root", 0);
        out
    }

    fn render_into(&self, out: &mut String, title: &str, indent: usize) {
        let _ = write!(
            out,
            "{:indent$}{title}: n={} errors={} error_rate={:.2}% error_coverage={:.2}%",
            "",
            self.n,
            self.errors,
            100.0 * self.error_rate,
            100.0 * self.error_coverage,
            indent = indent
        );
        if self.missing_routed > 0 {
            let _ = write!(out, " (missing routed: {})", self.missing_routed);
        }
        out.push('\n');
        if let Some(rule) = &self.split {
            for (child, left) in self.children.iter().zip([true, false]) {
                child.render_into(out, &rule.describe(left), indent + 2);
            }
        }
    }
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn gini(n: usize, e: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = e as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeOptions {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
        }
    }
}

struct Candidate {
    rule: SplitRule,
    impurity: f64,
}

/// Child partition of `idx` under `rule`; missing values go to the child with
/// more non-missing samples (left on ties).
fn partition(samples: &[ErrorSample], idx: &[usize], rule: &SplitRule) -> (Vec<usize>, Vec<usize>, usize) {
    let (mut left, mut right, mut missing) = (Vec::new(), Vec::new(), Vec::new());
    for &i in idx {
        match rule.goes_left(&samples[i]) {
            Some(true) => left.push(i),
            Some(false) => right.push(i),
            None => missing.push(i),
        }
    }
    let routed = missing.len();
    if left.len() >= right.len() {
        left.extend(missing);
        left.sort_unstable();
    } else {
        right.extend(missing);
        right.sort_unstable();
    }
    (left, right, routed)
}

fn candidates(samples: &[ErrorSample], idx: &[usize]) -> Vec<SplitRule> {
    let mut out = Vec::new();
    for a in TREE_ATTRIBUTES {
        if a == Attribute::Age {
            let mut ages: Vec<f64> = idx.iter().filter_map(|&i| samples[i].age).collect();
            ages.sort_by(f64::total_cmp);
            ages.dedup();
            for w in ages.windows(2) {
                out.push(SplitRule::Threshold {
                    feature: a,
                    threshold: 0.5 * (w[0] + w[1]),
                });
            }
        } else {
            let present: Vec<&str> = category_values(a)
                .into_iter()
                .filter(|v| idx.iter().any(|&i| samples[i].category(a) == Some(v)))
                .collect();
            // With two values both one-vs-rest splits coincide.
            let take = if present.len() == 2 { 1 } else { present.len() };
            if present.len() >= 2 {
                for v in present.into_iter().take(take) {
                    out.push(SplitRule::Category {
                        feature: a,
                        equals: v.to_string(),
                    });
                }
            }
        }
    }
    out
}

fn best_split(samples: &[ErrorSample], idx: &[usize], min_leaf: usize) -> Option<Candidate> {
    let n = idx.len();
    let errors = idx.iter().filter(|&&i| samples[i].error).count();
    let parent = gini(n, errors);
    let mut best: Option<Candidate> = None;
    // Candidates are generated in feature order with ascending thresholds, so
    // keeping the first strict minimum implements the tie-break rule.
    for rule in candidates(samples, idx) {
        let (l, r, _) = partition(samples, idx, &rule);
        if l.len() < min_leaf || r.len() < min_leaf {
            continue;
        }
        let el = l.iter().filter(|&&i| samples[i].error).count();
        let er = errors - el;
        let imp = (l.len() as f64 * gini(l.len(), el) + r.len() as f64 * gini(r.len(), er)) / n as f64;
        if imp < parent - GAIN_EPS && best.as_ref().is_none_or(|b| imp < b.impurity - GAIN_EPS) {
            best = Some(Candidate { rule, impurity: imp });
        }
    }
    best
}

fn grow(samples: &[ErrorSample], idx: Vec<usize>, depth: usize, total_errors: usize, opts: TreeOptions) -> ErrorTreeNode {
    let errors = idx.iter().filter(|&&i| samples[i].error).count();
    let mut node = ErrorTreeNode::leaf(idx.len(), errors, total_errors);
    if depth >= opts.max_depth || errors == 0 || errors == idx.len() {
        return node;
    }
    if let Some(c) = best_split(samples, &idx, opts.min_leaf) {
        let (l, r, routed) = partition(samples, &idx, &c.rule);
        node.children = vec![
            grow(samples, l, depth + 1, total_errors, opts),
            grow(samples, r, depth + 1, total_errors, opts),
        ];
        node.missing_routed = routed;
        node.split = Some(c.rule);
    }
    node
}

/// Greedy binary tree minimizing the weighted Gini impurity of the error
/// indicator. Stops at `max_depth`, when a child would fall below `min_leaf`,
/// or when the node is pure.
pub fn build_error_tree(samples: &[ErrorSample], opts: TreeOptions) -> Result<ErrorTreeNode> {
    if opts.min_leaf == 0 {
        return Err(Error::invalid("min_leaf must be positive"));
    }
    if samples.len() < opts.min_leaf {
        return Err(Error::invalid(format!(
            "error tree needs at least {} samples, got {}",
            opts.min_leaf,
            samples.len()
        )));
    }
    let demographic = [Attribute::Age, Attribute::Sex, Attribute::Ethnicity];
    if !samples.iter().any(|s| demographic.iter().any(|&a| s.has(a))) {
        return Err(Error::invalid("no demographic attributes present"));
    }
    let total = samples.iter().filter(|s| s.error).count();
    Ok(grow(samples, (0..samples.len()).collect(), 0, total, opts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub a: String,
    pub b: String,
    pub n: usize,
    pub errors: usize,
    /// `None` for empty cells.
    pub error_rate: Option<f64>,
    pub error_coverage: Option<f64>,
}

impl HeatmapCell {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub attr_a: Attribute,
    pub attr_b: Attribute,
    pub cells: Vec<HeatmapCell>,
}

const UNKNOWN: &str = "unknown";

/// Level names and a per-sample level assignment for one attribute.
fn levels(samples: &[ErrorSample], a: Attribute, bins: usize) -> (Vec<String>, Vec<usize>) {
    let mut names: Vec<String>;
    let mut assign: Vec<Option<usize>>;
    if a == Attribute::Age {
        let ages: Vec<f64> = samples.iter().filter_map(|s| s.age).collect();
        if ages.is_empty() {
            names = Vec::new();
            assign = vec![None; samples.len()];
        } else {
            let lo = ages.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
            let nb = if hi > lo { bins } else { 1 };
            names = (0..nb)
                .map(|k| format!("{:.1}-{:.1}", lo + k as f64 * width, lo + (k + 1) as f64 * width))
                .collect();
            assign = samples
                .iter()
                .map(|s| s.age.map(|v| (((v - lo) / width).floor() as usize).min(nb - 1)))
                .collect();
        }
    } else {
        let present: Vec<&str> = category_values(a)
            .into_iter()
            .filter(|v| samples.iter().any(|s| s.category(a) == Some(v)))
            .collect();
        names = present.iter().map(|s| s.to_string()).collect();
        assign = samples
            .iter()
            .map(|s| s.category(a).and_then(|v| present.iter().position(|p| *p == v)))
            .collect();
    }
    if assign.iter().any(Option::is_none) {
        let k = names.len();
        names.push(UNKNOWN.to_string());
        for x in &mut assign {
            x.get_or_insert(k);
        }
    }
    (names, assign.into_iter().map(|x| x.expect("assigned")).collect())
}

/// Error counts over the cross product of two attributes. Numeric attributes
/// use `bins` equal-width intervals over the observed range; missing values
/// form an `unknown` level.
pub fn heatmap_matrix(samples: &[ErrorSample], attr_a: Attribute, attr_b: Attribute, bins: usize) -> Result<Heatmap> {
    if bins == 0 {
        return Err(Error::invalid("bins must be positive"));
    }
    let (na, la) = levels(samples, attr_a, bins);
    let (nb, lb) = levels(samples, attr_b, bins);
    let total = samples.iter().filter(|s| s.error).count();
    let mut counts = vec![(0usize, 0usize); na.len() * nb.len()];
    for (s, (&i, &j)) in samples.iter().zip(la.iter().zip(&lb)) {
        let c = &mut counts[i * nb.len() + j];
        c.0 += 1;
        c.1 += usize::from(s.error);
    }
    let mut cells = Vec::with_capacity(counts.len());
    for (i, a) in na.iter().enumerate() {
        for (j, b) in nb.iter().enumerate() {
            let (n, e) = counts[i * nb.len() + j];
            cells.push(HeatmapCell {
                a: a.clone(),
                b: b.clone(),
                n,
                errors: e,
                error_rate: (n > 0).then(|| rate(e, n)),
                error_coverage: (n > 0).then(|| rate(e, total)),
            });
        }
    }
    Ok(Heatmap { attr_a, attr_b, cells })
}

/// Parses attribute names then builds the heatmap.
pub fn heatmap_by_name(samples: &[ErrorSample], attr_a: &str, attr_b: &str, bins: usize) -> Result<Heatmap> {
    heatmap_matrix(samples, attr_a.parse()?, attr_b.parse()?, bins)
}

impl Heatmap {
    /// CSV with header `attrA,attrB,n,errors,error_rate,error_coverage`;
    /// empty cells carry `NA` rates.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["attrA", "attrB", "n", "errors", "error_rate", "error_coverage"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for c in &self.cells {
            w.write_record([
                c.a.clone(),
                c.b.clone(),
                c.n.to_string(),
                c.errors.to_string(),
                opt(c.error_rate),
                opt(c.error_coverage),
            ])?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(age: f64, sex: Sex, eth: Ethnicity, label: Label, error: bool) -> ErrorSample {
        ErrorSample {
            age: Some(age),
            sex: Some(sex),
            ethnicity: Some(eth),
            label,
            cohort: Cohort::HomeRecorded,
            error,
        }
    }

    /// With `planted = Some(r)`, samples older than 68.5 err with probability
    /// `r` and nobody else errs; otherwise errors are uniform at 20%.
    fn random_samples(n: usize, seed: u64, planted: Option<f64>) -> Vec<ErrorSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let age = (rng.random_range(20.0..90.0f64) * 10.0).round() / 10.0;
                let error = match planted {
                    Some(r) => age > 68.5 && rng.random::<f64>() < r,
                    None => rng.random::<f64>() < 0.2,
                };
                ErrorSample {
                    age: (rng.random::<f64>() > 0.05).then_some(age).or(planted.map(|_| age)),
                    sex: Some(if rng.random() { Sex::Male } else { Sex::Female }),
                    ethnicity: if rng.random::<f64>() < 0.1 {
                        None
                    } else {
                        Some([Ethnicity::White, Ethnicity::Black, Ethnicity::Asian][rng.random_range(0..3)])
                    },
                    label: if rng.random() { Label::Pd } else { Label::Control },
                    cohort: Cohort::ALL[rng.random_range(0..3)],
                    error,
                }
            })
            .collect()
    }

    fn check_conservation(node: &ErrorTreeNode) {
        if node.children.is_empty() {
            return;
        }
        assert_eq!(node.children.len(), 2);
        assert_eq!(node.children.iter().map(|c| c.n).sum::<usize>(), node.n);
        assert_eq!(node.children.iter().map(|c| c.errors).sum::<usize>(), node.errors);
        node.children.iter().for_each(check_conservation);
    }

    #[test]
    fn rate_and_coverage_example() {
        let n = ErrorTreeNode::leaf(26, 8, 26);
        assert!((n.error_rate * 100.0 - 30.77).abs() < 0.005);
        assert!((n.error_coverage * 100.0 - 30.77).abs() < 0.005);
    }

    #[test]
    fn all_correct_is_single_root() {
        let s: Vec<_> = (0..30)
            .map(|i| sample(40.0 + i as f64, Sex::Male, Ethnicity::White, Label::Pd, false))
            .collect();
        let t = build_error_tree(&s, TreeOptions::default()).unwrap();
        assert!(t.children.is_empty());
        assert_eq!(t.error_rate, 0.0);
    }

    #[test]
    fn planted_age_pattern_is_root_split() {
        let s = random_samples(400, 12, Some(1.0));
        let t = build_error_tree(&s, TreeOptions::default()).unwrap();
        let Some(SplitRule::Threshold { feature, threshold }) = &t.split else {
            panic!("root split is {:?}", t.split)
        };
        assert_eq!(*feature, Attribute::Age);
        let below = s.iter().filter_map(|x| x.age).filter(|&a| a <= 68.5).fold(f64::MIN, f64::max);
        let above = s.iter().filter_map(|x| x.age).filter(|&a| a > 68.5).fold(f64::MAX, f64::min);
        assert_eq!(*threshold, 0.5 * (below + above));
        assert_eq!(t.children[1].errors, t.errors);
        assert_eq!(t.children[1].error_coverage, 1.0);
        assert!(t.children.iter().all(|c| c.children.is_empty()));
    }

    #[test]
    fn noisy_age_pattern_matches_exhaustive_search() {
        let s = random_samples(400, 11, Some(0.6));
        let t = build_error_tree(&s, TreeOptions::default()).unwrap();
        let Some(SplitRule::Threshold { feature, threshold }) = &t.split else {
            panic!("root split is {:?}", t.split)
        };
        assert_eq!(*feature, Attribute::Age);
        // Exhaustive oracle over every midpoint of distinct ages, scored with
        // plain counting (no missing ages in this cohort).
        let mut ages: Vec<f64> = s.iter().map(|x| x.age.unwrap()).collect();
        ages.sort_by(f64::total_cmp);
        ages.dedup();
        let n = s.len() as f64;
        let mut best = (f64::INFINITY, f64::NAN);
        for w in ages.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let (mut nl, mut el, mut nr, mut er) = (0.0, 0.0, 0.0, 0.0);
            for x in &s {
                let e = if x.error { 1.0 } else { 0.0 };
                if x.age.unwrap() <= thr {
                    nl += 1.0;
                    el += e;
                } else {
                    nr += 1.0;
                    er += e;
                }
            }
            if nl < 10.0 || nr < 10.0 {
                continue;
            }
            let g = |m: f64, e: f64| 2.0 * e * (m - e) / m;
            let imp = (g(nl, el) + g(nr, er)) / n;
            if imp < best.0 - 1e-12 {
                best = (imp, thr);
            }
        }
        assert_eq!(*threshold, best.1);
        assert!((threshold - 68.5).abs() < 1.0, "{threshold}");
    }

    #[test]
    fn conservation_and_coverage_on_random_data() {
        for seed in 0..20 {
            let s = random_samples(300, seed, None);
            let t = build_error_tree(&s, TreeOptions::default()).unwrap();
            check_conservation(&t);
            assert_eq!(t.n, 300);
            assert_eq!(t.error_coverage, 1.0);
            let cov: f64 = t.leaves().iter().map(|l| l.error_coverage).sum();
            assert!((cov - 1.0).abs() < 1e-12);
            assert!(t.depth() <= DEFAULT_MAX_DEPTH);
            for l in t.leaves() {
                assert!(l.n >= DEFAULT_MIN_LEAF);
            }
            assert_eq!(build_error_tree(&s, TreeOptions::default()).unwrap(), t);
        }
    }

    #[test]
    fn missing_values_follow_larger_child() {
        let mut s: Vec<_> = (0..40)
            .map(|i| sample(30.0 + i as f64, Sex::Male, Ethnicity::White, Label::Pd, i >= 30))
            .collect();
        for x in s.iter_mut().take(3) {
            x.age = None;
        }
        let t = build_error_tree(&s, TreeOptions::default()).unwrap();
        assert_eq!(t.missing_routed, 3);
        assert_eq!(t.children[0].n, 30);
        assert!(t.render().contains("missing routed: 3"));
        let json = serde_json::to_string(&t).unwrap();
        let back: ErrorTreeNode = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn errors_on_bad_input() {
        let s = vec![sample(50.0, Sex::Male, Ethnicity::White, Label::Pd, true); 5];
        assert!(build_error_tree(&s, TreeOptions::default()).is_err());
        let bare: Vec<_> = (0..20)
            .map(|_| ErrorSample {
                age: None,
                sex: None,
                ethnicity: None,
                label: Label::Pd,
                cohort: Cohort::HomeRecorded,
                error: true,
            })
            .collect();
        assert!(build_error_tree(&bare, TreeOptions::default()).is_err());
        assert!(heatmap_by_name(&s, "age", "shoe_size", 8).is_err());
    }

    #[test]
    fn sex_by_label_toy_grid() {
        let s = vec![
            sample(50.0, Sex::Male, Ethnicity::White, Label::Pd, true),
            sample(51.0, Sex::Female, Ethnicity::White, Label::Pd, false),
            sample(52.0, Sex::Male, Ethnicity::White, Label::Control, false),
            sample(53.0, Sex::Female, Ethnicity::White, Label::Control, true),
        ];
        let h = heatmap_by_name(&s, "sex", "label", 8).unwrap();
        assert_eq!(h.cells.len(), 4);
        assert_eq!(h.cells.iter().map(|c| c.n).sum::<usize>(), 4);
        let cov: f64 = h.cells.iter().filter_map(|c| c.error_coverage).sum();
        assert!((cov - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_male_cell_rate() {
        let mut s: Vec<_> = (0..21)
            .map(|i| sample(60.0, Sex::Male, Ethnicity::White, Label::Pd, i < 7))
            .collect();
        s.push(sample(60.0, Sex::Female, Ethnicity::Asian, Label::Pd, false));
        let h = heatmap_matrix(&s, Attribute::Ethnicity, Attribute::Sex, 8).unwrap();
        let c = h.cells.iter().find(|c| c.a == "white" && c.b == "male").unwrap();
        assert_eq!((c.n, c.errors), (21, 7));
        assert!((c.error_rate.unwrap() * 100.0 - 33.33).abs() < 0.005);
        let empty = h.cells.iter().find(|c| c.a == "white" && c.b == "female").unwrap();
        assert!(empty.is_empty() && empty.error_rate.is_none());
        let csv = String::from_utf8(h.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("attrA,attrB,n,errors,error_rate,error_coverage\n"));
        assert!(csv.contains("NA"));
    }

    #[test]
    fn age_bins_are_equal_width() {
        let s = random_samples(200, 3, None);
        let h = heatmap_matrix(&s, Attribute::Age, Attribute::Sex, 8).unwrap();
        let names: Vec<&str> = h.cells.iter().map(|c| c.a.as_str()).collect();
        let bins: std::collections::BTreeSet<&str> = names.iter().copied().filter(|n| *n != UNKNOWN).collect();
        assert_eq!(bins.len(), 8);
        let widths: Vec<f64> = bins
            .iter()
            .map(|b| {
                let (lo, hi) = b.split_once('-').unwrap();
                hi.parse::<f64>().unwrap() - lo.parse::<f64>().unwrap()
            })
            .collect();
        for w in &widths {
            assert!((w - widths[0]).abs() < 0.11);
        }
        assert_eq!(h.cells.iter().map(|c| c.n).sum::<usize>(), 200);
    }
}
