//! Classification metrics and the experimental protocols built on them:
//! hyperparameter tuning against held-out pseudo-unseen classes, repeated
//! few-shot trials, and the generalized setting where seen classes compete
//! with unseen ones at prediction time.

use crate::dataset::{AttributeTable, ClassId, FeatureTable, SplitView};
use crate::error::{Error, Result};
use crate::fewshot::FewShotStats;
use crate::model::{GfzslConfig, GfzslModel};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;

/// Top-1 accuracy with per-class precision/recall and confusion counts.
/// Macro averages are unweighted means over classes present in the truth;
/// a class that was never predicted has precision 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: BTreeMap<ClassId, f64>,
    pub recall: BTreeMap<ClassId, f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// (truth, predicted) -> count, only for observed pairs.
    pub confusion: BTreeMap<(ClassId, ClassId), usize>,
    pub n: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,value\n");
        writeln!(out, "accuracy,,{}", self.accuracy).unwrap();
        writeln!(out, "macro_precision,,{}", self.macro_precision).unwrap();
        writeln!(out, "macro_recall,,{}", self.macro_recall).unwrap();
        for (id, p) in &self.precision {
            writeln!(out, "precision,{id},{p}").unwrap();
        }
        for (id, r) in &self.recall {
            writeln!(out, "recall,{id},{r}").unwrap();
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let correct: usize = self
            .confusion
            .iter()
            .filter(|((t, p), _)| t == p)
            .map(|(_, c)| c)
            .sum();
        writeln!(f, "accuracy: {:.4} ({correct}/{})", self.accuracy, self.n)?;
        writeln!(f, "macro precision: {:.4}", self.macro_precision)?;
        writeln!(f, "macro recall: {:.4}", self.macro_recall)?;
        for (id, p) in &self.precision {
            let support: usize = self
                .confusion
                .iter()
                .filter(|((t, _), _)| t == id)
                .map(|(_, c)| c)
                .sum();
            writeln!(
                f,
                "class {id}: precision {:.4} recall {:.4} (support {support})",
                p, self.recall[id]
            )?;
        }
        Ok(())
    }
}

pub fn evaluate(predictions: &[ClassId], truth: &[ClassId]) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions but {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n = truth.len();
    let mut confusion: BTreeMap<(ClassId, ClassId), usize> = BTreeMap::new();
    let mut truth_count: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut correct_count: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(truth) {
        *confusion.entry((t, p)).or_insert(0) += 1;
        *truth_count.entry(t).or_insert(0) += 1;
        *pred_count.entry(p).or_insert(0) += 1;
        if p == t {
            *correct_count.entry(t).or_insert(0) += 1;
            correct += 1;
        }
    }
    let classes: BTreeSet<ClassId> = truth_count
        .keys()
        .chain(pred_count.keys())
        .copied()
        .collect();
    let mut precision = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &c in &classes {
        let tp = *correct_count.get(&c).unwrap_or(&0) as f64;
        let pp = *pred_count.get(&c).unwrap_or(&0) as f64;
        precision.insert(c, if pp > 0.0 { tp / pp } else { 0.0 });
        let tc = *truth_count.get(&c).unwrap_or(&0) as f64;
        recall.insert(c, if tc > 0.0 { tp / tc } else { 0.0 });
    }
    let in_truth: Vec<ClassId> = truth_count.keys().copied().collect();
    let macro_precision =
        in_truth.iter().map(|c| precision[c]).sum::<f64>() / in_truth.len() as f64;
    let macro_recall = in_truth.iter().map(|c| recall[c]).sum::<f64>() / in_truth.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        precision,
        recall,
        macro_precision,
        macro_recall,
        confusion,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneResult {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub accuracy: f64,
}

/// Grid search over ridge strengths. Fits on the view's seen classes and
/// scores zero-shot accuracy on its unseen (pseudo-unseen validation)
/// classes; ties go to the lexicographically smaller pair.
pub fn tune(
    view: &SplitView,
    features: &FeatureTable,
    attributes: &AttributeTable,
    base: &GfzslConfig,
    grid: &[(f64, f64)],
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    if view.unseen_labeled().is_empty() {
        return Err(Error::InvalidArgument(
            "validation view has no labeled unseen examples".into(),
        ));
    }
    let mut ordered = grid.to_vec();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    ordered.dedup();
    let rows = view.unseen_labeled().to_vec();
    let x = features.gather(&rows);
    let truth: Vec<ClassId> = rows.iter().map(|&r| view.label_of(r)).collect();
    let candidates = view.unseen_ids().clone();
    let mut best: Option<TuneResult> = None;
    for &(lambda_mu, lambda_sigma) in &ordered {
        let mut config = *base;
        config.lambda_mu = lambda_mu;
        config.lambda_sigma = lambda_sigma;
        let model = GfzslModel::fit(view, features, attributes, config)?;
        let preds = model.classify_batch(x.view(), &candidates)?;
        let accuracy = evaluate(&preds, &truth)?.accuracy;
        if best.map_or(true, |b| accuracy > b.accuracy) {
            best = Some(TuneResult {
                lambda_mu,
                lambda_sigma,
                accuracy,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Labeled unseen-class rows of a split, grouped by class.
pub fn unseen_pool(split: &SplitView) -> BTreeMap<ClassId, Vec<usize>> {
    let mut pool: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &row in split.unseen_labeled() {
        pool.entry(split.label_of(row)).or_default().push(row);
    }
    pool
}

/// Labeled seen-class rows of a split, grouped by class.
pub fn seen_pool(split: &SplitView) -> BTreeMap<ClassId, Vec<usize>> {
    let mut pool: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &row in split.seen_labeled() {
        pool.entry(split.label_of(row)).or_default().push(row);
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotAccuracy {
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedShotAccuracy {
    pub shots: usize,
    pub unseen_mean: f64,
    pub unseen_std: f64,
    pub seen_mean: f64,
    pub seen_std: f64,
    pub overall_mean: f64,
    pub overall_std: f64,
}

#[derive(Debug, Clone, Copy)]
struct SubsetAccuracy {
    unseen: f64,
    seen: f64,
    overall: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn subset_accuracy(pairs: &[(ClassId, ClassId)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64
}

/// Shared trial loop. Each trial shuffles every pooled unseen class once
/// (stream split from the seed), takes nested prefixes of that order as
/// the shot sets, and tests on the pool minus the largest prefix plus any
/// always-test seen rows.
fn protocol_trials(
    model: &GfzslModel,
    features: &FeatureTable,
    pool: &BTreeMap<ClassId, Vec<usize>>,
    seen_rows: &[(usize, ClassId)],
    shots: &[usize],
    trials: usize,
    seed: u64,
    candidates: &BTreeSet<ClassId>,
) -> Result<Vec<Vec<SubsetAccuracy>>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if shots.is_empty() {
        return Err(Error::InvalidArgument("no shot counts given".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let max_shots = *shots.iter().max().unwrap();
    let unseen_ids = model.unseen_ids();
    for (&class, rows) in pool {
        if !unseen_ids.contains(&class) {
            return Err(Error::InvalidArgument(format!(
                "pooled class {class} is not an unseen class of the model"
            )));
        }
        if rows.len() < max_shots {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} pooled examples, need at least {max_shots}",
                rows.len()
            )));
        }
    }
    if max_shots > 0 && pool.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot draw shots from an empty pool".into(),
        ));
    }
    let n_test: usize =
        pool.values().map(|rows| rows.len() - max_shots).sum::<usize>() + seen_rows.len();
    if n_test == 0 {
        return Err(Error::InvalidArgument(
            "no test examples left after removing the shot sets".into(),
        ));
    }
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let mut shuffled: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
            for (&class, rows) in pool {
                let mut order = rows.clone();
                order.shuffle(&mut rng);
                shuffled.insert(class, order);
            }
            let mut test: Vec<(usize, ClassId)> = Vec::with_capacity(n_test);
            for (&class, order) in &shuffled {
                for &row in &order[max_shots..] {
                    test.push((row, class));
                }
            }
            test.extend_from_slice(seen_rows);
            let test_idx: Vec<usize> = test.iter().map(|(row, _)| *row).collect();
            let x = features.gather(&test_idx);
            let mut per_shot = Vec::with_capacity(shots.len());
            for &s in shots {
                let mut m = model.clone();
                for (&class, order) in &shuffled {
                    if s > 0 {
                        let stats = FewShotStats::from_samples(features.gather(&order[..s]).view());
                        m.absorb_fewshot(class, &stats)?;
                    }
                }
                let preds = m.classify_batch(x.view(), candidates)?;
                let mut unseen_pairs = Vec::new();
                let mut seen_pairs = Vec::new();
                let mut all_pairs = Vec::with_capacity(test.len());
                for ((_, truth), &pred) in test.iter().zip(&preds) {
                    all_pairs.push((pred, *truth));
                    if unseen_ids.contains(truth) {
                        unseen_pairs.push((pred, *truth));
                    } else {
                        seen_pairs.push((pred, *truth));
                    }
                }
                per_shot.push(SubsetAccuracy {
                    unseen: subset_accuracy(&unseen_pairs),
                    seen: subset_accuracy(&seen_pairs),
                    overall: subset_accuracy(&all_pairs),
                });
            }
            Ok(per_shot)
        })
        .collect()
}

/// Repeated few-shot evaluation restricted to unseen candidates: per
/// trial, sample `shots` examples per pooled class, fold them into the
/// model, and score the rest of the pool. Zero shots reproduces the
/// inductive model exactly. Returns mean and sample standard deviation
/// over trials, in the order the shot counts were given.
pub fn fewshot_protocol(
    model: &GfzslModel,
    features: &FeatureTable,
    pool: &BTreeMap<ClassId, Vec<usize>>,
    shots: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<ShotAccuracy>> {
    let candidates = model.unseen_ids();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation pool".into()));
    }
    let outcomes = protocol_trials(model, features, pool, &[], shots, trials, seed, &candidates)?;
    Ok(shots
        .iter()
        .enumerate()
        .map(|(si, &s)| {
            let per_trial: Vec<f64> = outcomes.iter().map(|t| t[si].unseen).collect();
            let (mean, std) = mean_std(&per_trial);
            ShotAccuracy {
                shots: s,
                mean,
                std,
            }
        })
        .collect())
}

/// Few-shot evaluation in the generalized setting: candidates span seen
/// and unseen classes, and the given seen-class rows stay in every trial's
/// test set. Subset accuracies for an empty subset are NaN.
pub fn generalized_protocol(
    model: &GfzslModel,
    features: &FeatureTable,
    pool: &BTreeMap<ClassId, Vec<usize>>,
    seen_test: &BTreeMap<ClassId, Vec<usize>>,
    shots: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<GeneralizedShotAccuracy>> {
    let seen_ids = model.seen_ids();
    for &class in seen_test.keys() {
        if !seen_ids.contains(&class) {
            return Err(Error::InvalidArgument(format!(
                "test class {class} is not a seen class of the model"
            )));
        }
    }
    let seen_rows: Vec<(usize, ClassId)> = seen_test
        .iter()
        .flat_map(|(&class, rows)| rows.iter().map(move |&row| (row, class)))
        .collect();
    let candidates = model.all_ids();
    let outcomes = protocol_trials(
        model, features, pool, &seen_rows, shots, trials, seed, &candidates,
    )?;
    Ok(shots
        .iter()
        .enumerate()
        .map(|(si, &s)| {
            let unseen: Vec<f64> = outcomes.iter().map(|t| t[si].unseen).collect();
            let seen: Vec<f64> = outcomes.iter().map(|t| t[si].seen).collect();
            let overall: Vec<f64> = outcomes.iter().map(|t| t[si].overall).collect();
            let (unseen_mean, unseen_std) = mean_std(&unseen);
            let (seen_mean, seen_std) = mean_std(&seen);
            let (overall_mean, overall_std) = mean_std(&overall);
            GeneralizedShotAccuracy {
                shots: s,
                unseen_mean,
                unseen_std,
                seen_mean,
                seen_std,
                overall_mean,
                overall_std,
            }
        })
        .collect())
}
