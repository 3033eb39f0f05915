//! Seeded random search over the tuning space, ranked by validation AUROC.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{HeadKind, LossWeights};
use crate::preprocess::ScalingMethod;
use crate::trainer::{OptimizerKind, SchedulerKind, TrainConfig, BATCH_SIZES, CORR_THRESHOLDS};

/// Continuous uniform on `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

/// Integer uniform on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntUniform {
    pub lo: u64,
    pub hi: u64,
}

impl Uniform {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(self.lo..self.hi)
    }
}

impl IntUniform {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        rng.random_range(self.lo..=self.hi)
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> T {
    *items.choose(rng).expect("validated non-empty")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub batch_size: Vec<usize>,
    pub beta1: Uniform,
    pub beta2: Uniform,
    pub corr_thr: Vec<f64>,
    pub drop_correlated: Vec<bool>,
    pub gamma: Uniform,
    pub learning_rate: Uniform,
    pub minority_oversample: Vec<bool>,
    pub model: Vec<HeadKind>,
    pub momentum: Uniform,
    pub num_epochs: IntUniform,
    pub optimizer: Vec<OptimizerKind>,
    pub patience: IntUniform,
    pub random_state: IntUniform,
    pub scaling_method: Vec<ScalingMethod>,
    pub scheduler: Vec<SchedulerKind>,
    pub seed: IntUniform,
    pub step_size: IntUniform,
    pub use_feature_scaling: Vec<bool>,
    pub use_scheduler: Vec<bool>,
    pub loss_weight: IntUniform,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_size: BATCH_SIZES.to_vec(),
            beta1: Uniform { lo: 0.9, hi: 0.99 },
            beta2: Uniform { lo: 0.99, hi: 0.9999 },
            corr_thr: CORR_THRESHOLDS.to_vec(),
            drop_correlated: vec![true, false],
            gamma: Uniform { lo: 0.5, hi: 0.95 },
            learning_rate: Uniform { lo: 0.05, hi: 0.8 },
            minority_oversample: vec![true, false],
            model: vec![HeadKind::Ann, HeadKind::Shallow],
            momentum: Uniform { lo: 0.1, hi: 1.0 },
            num_epochs: IntUniform { lo: 2, hi: 500 },
            optimizer: vec![OptimizerKind::Adamw, OptimizerKind::Sgd],
            patience: IntUniform { lo: 1, hi: 5 },
            random_state: IntUniform { lo: 100, hi: 999 },
            scaling_method: vec![ScalingMethod::Zscore, ScalingMethod::Minmax],
            scheduler: vec![SchedulerKind::Step, SchedulerKind::Reduce],
            seed: IntUniform { lo: 100, hi: 999 },
            step_size: IntUniform { lo: 1, hi: 30 },
            use_feature_scaling: vec![true, false],
            use_scheduler: vec![true, false],
            loss_weight: IntUniform { lo: 0, hi: 100 },
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("batch_size", self.batch_size.len()),
            ("corr_thr", self.corr_thr.len()),
            ("drop_correlated", self.drop_correlated.len()),
            ("minority_oversample", self.minority_oversample.len()),
            ("model", self.model.len()),
            ("optimizer", self.optimizer.len()),
            ("scaling_method", self.scaling_method.len()),
            ("scheduler", self.scheduler.len()),
            ("use_feature_scaling", self.use_feature_scaling.len()),
            ("use_scheduler", self.use_scheduler.len()),
        ];
        for (name, len) in lists {
            if len == 0 {
                return Err(Error::invalid(format!("search space list {name} is empty")));
            }
        }
        for (name, u) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
        ] {
            if !(u.lo.is_finite() && u.hi.is_finite() && u.lo < u.hi) {
                return Err(Error::invalid(format!("search range {name} [{}, {}) is not ordered", u.lo, u.hi)));
            }
        }
        for (name, u) in [
            ("num_epochs", self.num_epochs),
            ("patience", self.patience),
            ("random_state", self.random_state),
            ("seed", self.seed),
            ("step_size", self.step_size),
            ("loss_weight", self.loss_weight),
        ] {
            if u.lo > u.hi {
                return Err(Error::invalid(format!("search range {name} [{}, {}] is not ordered", u.lo, u.hi)));
            }
        }
        Ok(())
    }

    /// Draws every searched parameter independently, in a fixed order. Fields
    /// outside the space are copied from `base`.
    pub fn sample_config(&self, base: &TrainConfig, rng: &mut ChaCha8Rng) -> TrainConfig {
        let mut c = base.clone();
        c.batch_size = pick(&self.batch_size, rng);
        c.beta1 = self.beta1.sample(rng);
        c.beta2 = self.beta2.sample(rng);
        c.corr_thr = pick(&self.corr_thr, rng);
        c.drop_correlated = pick(&self.drop_correlated, rng);
        c.gamma = self.gamma.sample(rng);
        c.learning_rate = self.learning_rate.sample(rng);
        c.minority_oversample = pick(&self.minority_oversample, rng);
        c.model = pick(&self.model, rng);
        c.momentum = self.momentum.sample(rng);
        c.num_epochs = self.num_epochs.sample(rng) as usize;
        c.optimizer = pick(&self.optimizer, rng);
        c.patience = self.patience.sample(rng) as usize;
        c.random_state = self.random_state.sample(rng);
        c.scaling_method = pick(&self.scaling_method, rng);
        c.scheduler = pick(&self.scheduler, rng);
        c.seed = self.seed.sample(rng);
        c.step_size = self.step_size.sample(rng) as usize;
        c.use_feature_scaling = pick(&self.use_feature_scaling, rng);
        c.use_scheduler = pick(&self.use_scheduler, rng);
        c.loss_weights = LossWeights {
            pred: self.loss_weight.sample(rng) as f64,
            cos: self.loss_weight.sample(rng) as f64,
            rec: self.loss_weight.sample(rng) as f64,
        };
        c
    }
}

/// Generator for trial `index` of a search seeded with `seed`. Each trial has
/// its own stream, so its configuration does not depend on execution order.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// What the objective reports for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub best_val_auroc: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub search_seed: u64,
    pub trial: usize,
    pub config: TrainConfig,
    pub outcome: Option<TrialOutcome>,
    pub error: Option<String>,
}

impl TrialRecord {
    fn score(&self) -> Option<f64> {
        self.outcome.and_then(|o| o.best_val_auroc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub n_trials: usize,
    pub seed: u64,
    /// Maximum concurrent trials; 0 means the global pool size.
    pub concurrency: usize,
    pub exec: Exec,
}

/// Orders by validation AUROC (descending), then fewer epochs run, then
/// trial index. Failed or unscored trials come last.
pub fn rank(records: &mut [TrialRecord]) {
    records.sort_by(|a, b| match (a.score(), b.score()) {
        (Some(x), Some(y)) => y
            .total_cmp(&x)
            .then(a.outcome.map(|o| o.epochs_run).cmp(&b.outcome.map(|o| o.epochs_run)))
            .then(a.trial.cmp(&b.trial)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.cmp(&b.trial),
    });
}

pub fn read_log(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            context: path.display().to_string(),
            row: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_log(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Runs `n_trials` sampled configurations through `objective` and returns
/// every trial record, ranked.
///
/// Trials run in waves of `concurrency`; each wave is appended to `log` (JSON
/// lines) in trial order. With `resume`, trials already present in the log are
/// not run again. A trial whose objective fails is recorded with its error and
/// the search continues.
pub fn run_search<F>(
    space: &SearchSpace,
    base: &TrainConfig,
    opts: SearchOptions,
    log: Option<&Path>,
    resume: bool,
    objective: F,
) -> Result<Vec<TrialRecord>>
where
    F: Fn(usize, &TrainConfig) -> Result<TrialOutcome> + Sync + Send,
{
    space.validate()?;
    let mut done: Vec<TrialRecord> = Vec::new();
    if let Some(path) = log {
        if resume && path.exists() {
            for r in read_log(path)? {
                if r.search_seed != opts.seed {
                    return Err(Error::invalid(format!(
                        "log {} was written by a search with seed {}, not {}",
                        path.display(),
                        r.search_seed,
                        opts.seed
                    )));
                }
                if r.trial < opts.n_trials && !done.iter().any(|d| d.trial == r.trial) {
                    done.push(r);
                }
            }
        } else if path.exists() {
            std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        }
    }
    let completed: BTreeSet<usize> = done.iter().map(|r| r.trial).collect();
    let pending: Vec<usize> = (0..opts.n_trials).filter(|i| !completed.contains(i)).collect();
    let wave = if opts.concurrency == 0 { crate::exec::num_threads() } else { opts.concurrency }.max(1);

    for chunk in pending.chunks(wave) {
        let run = |&i: &usize| {
            let config = space.sample_config(base, &mut trial_rng(opts.seed, i));
            let result = objective(i, &config);
            TrialRecord {
                search_seed: opts.seed,
                trial: i,
                config,
                outcome: result.as_ref().ok().copied(),
                error: result.err().map(|e| e.to_string()),
            }
        };
        let records = opts.exec.with_limit(wave, || opts.exec.map(chunk, run));
        if let Some(path) = log {
            append_log(path, &records)?;
        }
        done.extend(records);
    }
    rank(&mut done);
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::reference_best_config;

    #[test]
    fn draws_stay_in_range() {
        let space = SearchSpace::default();
        let base = reference_best_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let c = space.sample_config(&base, &mut rng);
            c.validate_ranges().unwrap();
        }
    }

    #[test]
    fn uniform_deciles_are_flat() {
        let space = SearchSpace::default();
        let base = reference_best_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<TrainConfig> = (0..10_000).map(|_| space.sample_config(&base, &mut rng)).collect();
        type Getter = fn(&TrainConfig) -> f64;
        let ranges: [(Uniform, Getter); 5] = [
            (space.learning_rate, |c| c.learning_rate),
            (space.beta1, |c| c.beta1),
            (space.beta2, |c| c.beta2),
            (space.gamma, |c| c.gamma),
            (space.momentum, |c| c.momentum),
        ];
        for (u, get) in ranges {
            let mut bins = [0usize; 10];
            for c in &draws {
                let k = ((get(c) - u.lo) / (u.hi - u.lo) * 10.0).floor() as usize;
                bins[k.min(9)] += 1;
            }
            for b in bins {
                assert!((700..=1300).contains(&b), "{bins:?}");
            }
        }
    }

    #[test]
    fn same_stream_same_config() {
        let space = SearchSpace::default();
        let base = reference_best_config();
        let a = space.sample_config(&base, &mut trial_rng(9, 3));
        let b = space.sample_config(&base, &mut trial_rng(9, 3));
        let c = space.sample_config(&base, &mut trial_rng(9, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_space_rejected() {
        let mut s = SearchSpace::default();
        s.batch_size.clear();
        assert!(s.validate().is_err());
        let s = SearchSpace {
            gamma: Uniform { lo: 0.9, hi: 0.5 },
            ..SearchSpace::default()
        };
        assert!(s.validate().is_err());
    }

    fn fake_objective(i: usize, c: &TrainConfig) -> Result<TrialOutcome> {
        if i == 2 {
            return Err(Error::NonFiniteLoss { epoch: 1, batch: 0 });
        }
        Ok(TrialOutcome {
            best_val_auroc: Some((c.learning_rate * 10.0).round() / 10.0),
            epochs_run: c.num_epochs,
            best_epoch: 0,
        })
    }

    fn opts(n: usize, concurrency: usize) -> SearchOptions {
        SearchOptions {
            n_trials: n,
            seed: 5,
            concurrency,
            exec: Exec::Parallel,
        }
    }

    #[test]
    fn ranking_rules_and_failures() {
        let space = SearchSpace::default();
        let base = reference_best_config();
        let r = run_search(&space, &base, opts(12, 3), None, false, fake_objective).unwrap();
        assert_eq!(r.len(), 12);
        assert_eq!(r.last().unwrap().trial, 2);
        assert!(r.last().unwrap().error.as_deref().unwrap().contains("non-finite"));
        for w in r[..11].windows(2) {
            let (a, b) = (w[0].score().unwrap(), w[1].score().unwrap());
            assert!(a > b || (a == b && w[0].outcome.unwrap().epochs_run <= w[1].outcome.unwrap().epochs_run));
        }
        let one = run_search(&space, &base, opts(1, 1), None, false, fake_objective).unwrap();
        assert_eq!(one[0].trial, 0);
    }

    #[test]
    fn results_independent_of_concurrency() {
        let space = SearchSpace::default();
        let base = reference_best_config();
        let a = run_search(&space, &base, opts(10, 1), None, false, fake_objective).unwrap();
        let b = run_search(&space, &base, opts(10, 4), None, false, fake_objective).unwrap();
        let mut seq = opts(10, 2);
        seq.exec = Exec::Sequential;
        let c = run_search(&space, &base, seq, None, false, fake_objective).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn resume_skips_logged_trials() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("trials.jsonl");
        let space = SearchSpace::default();
        let base = reference_best_config();
        let first = run_search(&space, &base, opts(4, 2), Some(&log), false, fake_objective).unwrap();
        assert_eq!(read_log(&log).unwrap().len(), 4);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let resumed = run_search(&space, &base, opts(7, 2), Some(&log), true, |i, c| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            fake_objective(i, c)
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 3);
        let fresh = run_search(&space, &base, opts(7, 2), None, false, fake_objective).unwrap();
        assert_eq!(resumed, fresh);
        assert!(first.iter().all(|r| resumed.contains(r)));
        let mut other = opts(7, 2);
        other.seed = 6;
        assert!(run_search(&space, &base, other, Some(&log), true, fake_objective).is_err());
    }
}
