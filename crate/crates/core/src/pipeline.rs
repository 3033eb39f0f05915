//! End-to-end orchestration: align records with feature sets, fit
//! preprocessing on the training split, train, evaluate and cross-validate.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{kfold_participants, FeatureMatrix, SampleRecord, Split, SplitPart};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hypertune::{run_search, SearchOptions, SearchSpace, TrialOutcome, TrialRecord};
use crate::metrics::{confusion_and_rates, EvalReport};
use crate::model::{Checkpoint, CHECKPOINT_VERSION};
use crate::preprocess::{resample, PlanOptions, PreprocessPlan};
use crate::trainer::{spec_for, train, Dataset, TrainConfig, TrainHistory};

/// How feature sets feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// One feature set, classifier head only.
    Single,
    /// Several feature sets concatenated into one classifier input.
    Concat,
    /// Two sets `[source, target]`: source projected into the target space.
    Fusion,
    /// Every set projected into a common space of `d_shared` dimensions.
    Shared { d_shared: usize },
}

impl Architecture {
    /// The usual choice for `n` feature sets: single, or source-to-target fusion.
    pub fn default_for(n: usize) -> Self {
        if n == 1 {
            Architecture::Single
        } else {
            Architecture::Fusion
        }
    }

    fn check(self, n: usize) -> Result<()> {
        let ok = match self {
            Architecture::Single => n == 1,
            Architecture::Fusion => n == 2,
            Architecture::Concat | Architecture::Shared { .. } => n >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{self:?} does not accept {n} feature sets")))
        }
    }
}

/// Records restricted to `participants` (all when `None`) that have a row in
/// every feature set, in manifest order, plus the number skipped for lack of
/// features.
pub fn aligned_records<'a>(
    records: &'a [SampleRecord],
    features: &[FeatureMatrix],
    participants: Option<&BTreeSet<String>>,
) -> (Vec<&'a SampleRecord>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for r in records {
        if participants.is_some_and(|p| !p.contains(&r.participant_id)) {
            continue;
        }
        if features.iter().all(|f| f.contains(&r.sample_id)) {
            out.push(r);
        } else {
            skipped += 1;
        }
    }
    (out, skipped)
}

fn ids_of(records: &[&SampleRecord]) -> Vec<String> {
    records.iter().map(|r| r.sample_id.clone()).collect()
}

fn labels_of(records: &[&SampleRecord]) -> Array1<f64> {
    records.iter().map(|r| f64::from(r.label.as_target())).collect()
}

fn model_inputs(arch: Architecture, mats: Vec<Array2<f64>>) -> Result<Vec<Array2<f64>>> {
    if arch != Architecture::Concat {
        return Ok(mats);
    }
    let views: Vec<ArrayView2<f64>> = mats.iter().map(|m| m.view()).collect();
    Ok(vec![ndarray::concatenate(Axis(1), &views).map_err(|e| Error::invalid(e.to_string()))?])
}

fn plan_options(config: &TrainConfig) -> PlanOptions {
    PlanOptions {
        corr_threshold: config.corr_threshold(),
        scaling: config.scaling(),
        resample: config.resample(),
        seed: config.random_state,
    }
}

/// Applies fitted plans (matched to feature sets by name) to `records`.
fn transformed(plans: &[PreprocessPlan], features: &[FeatureMatrix], records: &[&SampleRecord]) -> Result<Vec<Array2<f64>>> {
    let ids = ids_of(records);
    plans
        .iter()
        .map(|p| {
            let f = features
                .iter()
                .find(|f| f.name == p.set_name)
                .ok_or_else(|| Error::invalid(format!("feature set {:?} was not supplied", p.set_name)))?;
            p.apply(&f.select(&ids)?)
        })
        .collect()
}

/// Model-ready train/validation/test data for one split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plans: Vec<PreprocessPlan>,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub test_records: Vec<SampleRecord>,
    pub skipped: usize,
}

/// Fits one plan per feature set on the training rows, applies it to every
/// part and resamples the training part jointly across feature sets.
pub fn prepare(records: &[SampleRecord], features: &[FeatureMatrix], arch: Architecture, split: &Split, config: &TrainConfig) -> Result<Prepared> {
    arch.check(features.len())?;
    let (tr, s1) = aligned_records(records, features, Some(&split.train));
    let (va, s2) = aligned_records(records, features, Some(&split.validation));
    let (te, s3) = aligned_records(records, features, Some(&split.test));
    if tr.is_empty() {
        return Err(Error::invalid("training split has no samples with features"));
    }
    let opts = plan_options(config);
    let train_ids = ids_of(&tr);
    let mut plans = Vec::with_capacity(features.len());
    let mut train_mats = Vec::with_capacity(features.len());
    for f in features {
        let raw = f.select(&train_ids)?;
        let plan = PreprocessPlan::fit(&raw, &f.column_names, &f.name, &opts)?;
        train_mats.push(plan.apply(&raw)?);
        plans.push(plan);
    }
    let labels: Vec<u8> = tr.iter().map(|r| r.label.as_target()).collect();
    let refs: Vec<&Array2<f64>> = train_mats.iter().collect();
    let (train_mats, labels) = resample(&refs, &labels, opts.resample, opts.seed)?;
    let y_train: Array1<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    Ok(Prepared {
        train: Dataset::new(model_inputs(arch, train_mats)?, y_train)?,
        validation: Dataset::new(model_inputs(arch, transformed(&plans, features, &va)?)?, labels_of(&va))?,
        test: Dataset::new(model_inputs(arch, transformed(&plans, features, &te)?)?, labels_of(&te))?,
        test_records: te.into_iter().cloned().collect(),
        plans,
        skipped: s1 + s2 + s3,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Test-split evaluation at `threshold`, when the test split is non-empty.
    pub test_report: Option<EvalReport>,
    pub test_scores: Vec<f64>,
    pub prepared: Prepared,
}

/// Prepares `split`, trains under `config`, and scores the test part.
pub fn train_on_split(
    records: &[SampleRecord],
    features: &[FeatureMatrix],
    arch: Architecture,
    split: &Split,
    config: &TrainConfig,
    threshold: f64,
    exec: Exec,
) -> Result<TrainOutcome> {
    let prepared = prepare(records, features, arch, split, config)?;
    let dims: Vec<usize> = prepared.train.inputs.iter().map(|x| x.ncols()).collect();
    let shared = match arch {
        Architecture::Shared { d_shared } => Some(d_shared),
        _ => None,
    };
    let spec = spec_for(config, &dims, shared)?;
    let (model, history) = train(&spec, &prepared.train, &prepared.validation, config, exec)?;
    let modalities = match arch {
        Architecture::Concat => vec![features.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join("+")],
        _ => features.iter().map(|f| f.name.clone()).collect(),
    };
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        spec,
        modalities,
        plans: prepared.plans.clone(),
        seed: config.seed,
        best_epoch: history.best_epoch,
        best_val_auroc: history.best_val_auroc,
        model,
    };
    let (test_report, test_scores) = if prepared.test.is_empty() {
        (None, Vec::new())
    } else {
        let scores = checkpoint.model.predict(&prepared.test.views(), exec)?.to_vec();
        let report = confusion_and_rates(&scores, &prepared.test.labels_u8(), threshold)?;
        (Some(report), scores)
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        test_report,
        test_scores,
        prepared,
    })
}

fn checkpoint_arch(ckpt: &Checkpoint) -> Architecture {
    if ckpt.modalities.len() == 1 && ckpt.plans.len() > 1 {
        Architecture::Concat
    } else {
        Architecture::Single
    }
}

/// Scores `records` (those with every needed feature) with a checkpoint.
pub fn predict_records<'a>(
    ckpt: &Checkpoint,
    records: &'a [SampleRecord],
    features: &[FeatureMatrix],
    participants: Option<&BTreeSet<String>>,
    exec: Exec,
) -> Result<(Vec<&'a SampleRecord>, Vec<f64>)> {
    let needed: Vec<FeatureMatrix> = ckpt
        .plans
        .iter()
        .map(|p| {
            features
                .iter()
                .find(|f| f.name == p.set_name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("feature set {:?} was not supplied", p.set_name)))
        })
        .collect::<Result<_>>()?;
    let (recs, _) = aligned_records(records, &needed, participants);
    if recs.is_empty() {
        return Err(Error::invalid("no records have all required feature sets"));
    }
    let mats = transformed(&ckpt.plans, &needed, &recs)?;
    let inputs = model_inputs(checkpoint_arch(ckpt), mats)?;
    let views: Vec<ArrayView2<f64>> = inputs.iter().map(|x| x.view()).collect();
    let scores = ckpt.model.predict(&views, exec)?.to_vec();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    Ok((recs, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean_auroc: Option<f64>,
    pub std_auroc: Option<f64>,
    pub mean_accuracy: f64,
}

/// Stratified participant k-fold. Fold `j` is the test part and fold
/// `(j + 1) mod k` the validation part used for model selection.
#[allow(clippy::too_many_arguments)]
pub fn crossval(
    records: &[SampleRecord],
    features: &[FeatureMatrix],
    arch: Architecture,
    k: usize,
    seed: u64,
    config: &TrainConfig,
    threshold: f64,
    exec: Exec,
) -> Result<CrossvalReport> {
    if k < 3 {
        return Err(Error::invalid(format!("cross validation needs k >= 3 (one fold each for test and validation), got {k}")));
    }
    let folds = kfold_participants(records, k, seed)?;
    let splits: Vec<Split> = (0..k)
        .map(|j| {
            let val = folds[(j + 1) % k].test.clone();
            Split {
                train: folds[j].train.difference(&val).cloned().collect(),
                validation: val,
                test: folds[j].test.clone(),
                seed,
            }
        })
        .collect();
    let results = exec.map(&splits, |s| train_on_split(records, features, arch, s, config, threshold, exec));
    let mut out = Vec::with_capacity(k);
    for (j, (r, s)) in results.into_iter().zip(&splits).enumerate() {
        let r = r?;
        out.push(FoldResult {
            fold: j,
            n_train: s.sample_ids(records, SplitPart::Train).len(),
            n_validation: s.sample_ids(records, SplitPart::Validation).len(),
            n_test: s.sample_ids(records, SplitPart::Test).len(),
            best_epoch: r.history.best_epoch,
            best_val_auroc: r.history.best_val_auroc,
            report: r.test_report.ok_or_else(|| Error::invalid(format!("fold {j} has no test samples")))?,
        });
    }
    let aucs: Vec<f64> = out.iter().filter_map(|f| f.report.auroc).collect();
    let (mean_auroc, std_auroc) = if aucs.len() == out.len() && !aucs.is_empty() {
        let m = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let v = aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / aucs.len() as f64;
        (Some(m), Some(v.sqrt()))
    } else {
        (None, None)
    };
    let mean_accuracy = out.iter().map(|f| f.report.accuracy).sum::<f64>() / out.len() as f64;
    Ok(CrossvalReport {
        k,
        seed,
        folds: out,
        mean_auroc,
        std_auroc,
        mean_accuracy,
    })
}

/// Random search where every trial preprocesses and trains on `split`.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    records: &[SampleRecord],
    features: &[FeatureMatrix],
    arch: Architecture,
    split: &Split,
    space: &SearchSpace,
    base: &TrainConfig,
    opts: SearchOptions,
    log: Option<&Path>,
    resume: bool,
) -> Result<Vec<TrialRecord>> {
    let trial_exec = opts.exec;
    run_search(space, base, opts, log, resume, |_, config| {
        let prepared = prepare(records, features, arch, split, config)?;
        let dims: Vec<usize> = prepared.train.inputs.iter().map(|x| x.ncols()).collect();
        let shared = match arch {
            Architecture::Shared { d_shared } => Some(d_shared),
            _ => None,
        };
        let spec = spec_for(config, &dims, shared)?;
        let (_, h) = train(&spec, &prepared.train, &prepared.validation, config, trial_exec)?;
        Ok(TrialOutcome {
            best_val_auroc: h.best_val_auroc,
            epochs_run: h.epochs.len(),
            best_epoch: h.best_epoch,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_participants, FeatureSet};
    use crate::synth::{generate, SynthSpec};
    use crate::model::LossWeights;

    fn cohort(n: usize, delta: f64) -> crate::synth::SynthCohort {
        generate(&SynthSpec {
            n_participants: n,
            delta,
            seed: 17,
            modalities: vec![(FeatureSet::Wavlm, 24), (FeatureSet::Imagebind, 16)],
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            num_epochs: 20,
            loss_weights: LossWeights { pred: 1.0, cos: 0.5, rec: 0.5 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_architecture_trains() {
        let c = cohort(200, 2.0);
        let split = split_participants(&c.records, (0.7, 0.15, 0.15), 1).unwrap();
        for arch in [Architecture::Fusion, Architecture::Concat, Architecture::Shared { d_shared: 8 }] {
            let out = train_on_split(&c.records, &c.features, arch, &split, &quick(), 0.5, Exec::Parallel).unwrap();
            let rep = out.test_report.unwrap();
            assert_eq!(rep.n, 30);
            assert!(rep.auroc.unwrap() > 0.75, "{arch:?}: {:?}", rep.auroc);
            let (recs, scores) =
                predict_records(&out.checkpoint, &c.records, &c.features, Some(&split.test), Exec::Sequential).unwrap();
            assert_eq!(recs.len(), 30);
            assert_eq!(scores, out.test_scores);
        }
        let single = train_on_split(&c.records, &c.features[..1], Architecture::Single, &split, &quick(), 0.5, Exec::Parallel);
        assert!(single.is_ok());
        assert!(train_on_split(&c.records, &c.features[..1], Architecture::Fusion, &split, &quick(), 0.5, Exec::Parallel).is_err());
    }

    #[test]
    fn plans_are_fit_on_training_rows_only() {
        let c = cohort(100, 1.0);
        let split = split_participants(&c.records, (0.7, 0.15, 0.15), 2).unwrap();
        let p = prepare(&c.records, &c.features, Architecture::Fusion, &split, &quick()).unwrap();
        for x in &p.train.inputs {
            for &v in x {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
        assert_eq!(p.train.len() + p.validation.len() + p.test.len(), 100);
    }

    #[test]
    fn missing_feature_rows_are_skipped() {
        let c = cohort(60, 1.0);
        let mut feats = c.features.clone();
        let keep: Vec<(String, Vec<f64>)> = feats[0]
            .ids()
            .iter()
            .skip(1)
            .map(|id| (id.clone(), feats[0].row(id).unwrap().to_vec()))
            .collect();
        feats[0] = FeatureMatrix::from_rows("wavlm", feats[0].column_names.clone(), keep).unwrap();
        let (recs, skipped) = aligned_records(&c.records, &feats, None);
        assert_eq!((recs.len(), skipped), (59, 1));
    }

    #[test]
    fn crossval_covers_every_participant_once() {
        let c = cohort(120, 2.0);
        let r = crossval(&c.records, &c.features, Architecture::Fusion, 4, 3, &quick(), 0.5, Exec::Parallel).unwrap();
        assert_eq!(r.folds.len(), 4);
        assert_eq!(r.folds.iter().map(|f| f.n_test).sum::<usize>(), 120);
        assert!(r.mean_auroc.unwrap() > 0.7);
        assert!(crossval(&c.records, &c.features, Architecture::Fusion, 2, 3, &quick(), 0.5, Exec::Parallel).is_err());
    }
}
