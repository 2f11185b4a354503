//! The zero-shot estimator: per-class distribution estimates for seen
//! classes, ridge regressors gating attributes to distribution parameters,
//! synthesized distributions for unseen classes, and max-log-likelihood
//! classification.

use crate::dataset::{AttrTransform, AttributeTable, ClassId, FeatureTable, SplitView};
use crate::error::{Error, Result};
use crate::expfam::{self, ClassDistribution, FamilySpec};
use crate::fewshot::{self, FewShotStats};
use crate::regression::{self, KernelSolution, KernelSpec, RidgeSolution};
use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressorKind {
    Linear,
    Kernel(KernelSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfzslConfig {
    pub family: FamilySpec,
    pub regressor: RegressorKind,
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    /// Rescale attributes to zero mean and unit spread using seen-class
    /// statistics before regression. Off by default.
    pub zscore_attributes: bool,
}

impl GfzslConfig {
    pub fn new(family: FamilySpec, regressor: RegressorKind, lambda_mu: f64, lambda_sigma: f64) -> Self {
        Self {
            family,
            regressor,
            lambda_mu,
            lambda_sigma,
            zscore_attributes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if let RegressorKind::Kernel(spec) = self.regressor {
            spec.validate()?;
        }
        for (name, v) in [("lambda_mu", self.lambda_mu), ("lambda_sigma", self.lambda_sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One fitted regression block (means, log-variances, or logits).
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BlockRegressor {
    Linear(RidgeSolution),
    Kernel(KernelSolution),
}

impl BlockRegressor {
    fn predict(&self, a: ArrayView1<f64>) -> Result<Array1<f64>> {
        match self {
            BlockRegressor::Linear(sol) => regression::predict_linear(sol, a),
            BlockRegressor::Kernel(sol) => regression::predict_kernel(sol, a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GfzslModel {
    pub(crate) config: GfzslConfig,
    pub(crate) dim_d: usize,
    pub(crate) dim_k: usize,
    pub(crate) seen: BTreeMap<ClassId, ClassDistribution>,
    pub(crate) unseen: BTreeMap<ClassId, ClassDistribution>,
    /// `[means, log-variances]` for Gaussians, `[logits]` for Bernoullis.
    pub(crate) blocks: Vec<BlockRegressor>,
    pub(crate) attr_transform: Option<AttrTransform>,
    /// Per-class additive log-prior; classes absent here get 0 (uniform).
    pub(crate) log_prior: BTreeMap<ClassId, f64>,
    /// Snapshot of each class's distribution before its first few-shot
    /// update, plus pooled observation statistics. Keeping both makes the
    /// update associative: applying batches across separate sessions gives
    /// the same posterior as one batch.
    pub(crate) fewshot_prior: BTreeMap<ClassId, ClassDistribution>,
    pub(crate) fewshot_stats: BTreeMap<ClassId, FewShotStats>,
}

impl GfzslModel {
    /// Estimates seen-class distributions, fits the gating regressors on
    /// their unconstrained parameters, and synthesizes a distribution for
    /// every unseen class.
    pub fn fit(
        split: &SplitView,
        features: &FeatureTable,
        attributes: &AttributeTable,
        config: GfzslConfig,
    ) -> Result<GfzslModel> {
        config.validate()?;
        let d = features.dim_d();
        if attributes.dim_k() == 0 {
            return Err(Error::InvalidArgument("attribute dimension is zero".into()));
        }
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = split
            .seen_ids()
            .iter()
            .map(|&id| (id, Vec::new()))
            .collect();
        for &i in split.seen_labeled() {
            by_class
                .get_mut(&split.label_of(i))
                .expect("seen-labeled bucket only holds seen classes")
                .push(i);
        }
        for (&id, idxs) in &by_class {
            if idxs.is_empty() {
                return Err(Error::EmptyClass(id));
            }
        }
        let transform = if config.zscore_attributes {
            Some(AttrTransform::fit(attributes, split.seen_ids())?)
        } else {
            None
        };
        let seen_sorted: Vec<ClassId> = split.seen_ids().iter().copied().collect();
        let estimates: Vec<Result<ClassDistribution>> = seen_sorted
            .par_iter()
            .map(|id| {
                let rows = features.gather(&by_class[id]);
                expfam::estimate(config.family, rows.view(), None)
                    .map_err(|e| Error::InvalidArgument(format!("class {id}: {e}")))
            })
            .collect();
        let mut seen = BTreeMap::new();
        for (id, est) in seen_sorted.iter().zip(estimates) {
            seen.insert(*id, est?);
        }

        let attr_rows = attributes.rows_for(seen_sorted.iter().copied())?;
        let attr_rows = match &transform {
            Some(t) => t.apply_rows(attr_rows.view()),
            None => attr_rows,
        };
        let inputs = attr_rows.t().to_owned();

        let s = seen_sorted.len();
        let mut target_blocks: Vec<(Array2<f64>, f64)> = match config.family {
            FamilySpec::GaussianDiag { .. } => vec![
                (Array2::zeros((d, s)), config.lambda_mu),
                (Array2::zeros((d, s)), config.lambda_sigma),
            ],
            FamilySpec::BernoulliProduct { .. } => {
                vec![(Array2::zeros((d, s)), config.lambda_mu)]
            }
        };
        for (col, id) in seen_sorted.iter().enumerate() {
            let v = seen[id].to_unconstrained();
            for (b, (block, _)) in target_blocks.iter_mut().enumerate() {
                for row in 0..d {
                    block[(row, col)] = v[b * d + row];
                }
            }
        }

        let blocks: Vec<BlockRegressor> = match config.regressor {
            RegressorKind::Linear => target_blocks
                .iter()
                .map(|(m, lambda)| {
                    regression::fit_linear(m.view(), inputs.view(), *lambda)
                        .map(BlockRegressor::Linear)
                })
                .collect::<Result<_>>()?,
            RegressorKind::Kernel(spec) => target_blocks
                .iter()
                .map(|(m, lambda)| {
                    KernelSolution::fit(m.view(), inputs.view(), spec, *lambda)
                        .map(BlockRegressor::Kernel)
                })
                .collect::<Result<_>>()?,
        };

        let mut model = GfzslModel {
            config,
            dim_d: d,
            dim_k: attributes.dim_k(),
            seen,
            unseen: BTreeMap::new(),
            blocks,
            attr_transform: transform,
            log_prior: BTreeMap::new(),
            fewshot_prior: BTreeMap::new(),
            fewshot_stats: BTreeMap::new(),
        };
        let unseen_sorted: Vec<ClassId> = split.unseen_ids().iter().copied().collect();
        let dists: Vec<Result<ClassDistribution>> = unseen_sorted
            .par_iter()
            .map(|id| model.predict_params(attributes.row_for(*id)?))
            .collect();
        for (id, dist) in unseen_sorted.iter().zip(dists) {
            model.unseen.insert(*id, dist?);
        }
        Ok(model)
    }

    pub fn config(&self) -> &GfzslConfig {
        &self.config
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn dim_k(&self) -> usize {
        self.dim_k
    }

    pub fn seen_distributions(&self) -> &BTreeMap<ClassId, ClassDistribution> {
        &self.seen
    }

    pub fn unseen_distributions(&self) -> &BTreeMap<ClassId, ClassDistribution> {
        &self.unseen
    }

    pub fn seen_ids(&self) -> BTreeSet<ClassId> {
        self.seen.keys().copied().collect()
    }

    pub fn unseen_ids(&self) -> BTreeSet<ClassId> {
        self.unseen.keys().copied().collect()
    }

    pub fn all_ids(&self) -> BTreeSet<ClassId> {
        self.seen.keys().chain(self.unseen.keys()).copied().collect()
    }

    pub fn distribution(&self, id: ClassId) -> Option<&ClassDistribution> {
        self.seen.get(&id).or_else(|| self.unseen.get(&id))
    }

    pub fn log_prior(&self) -> &BTreeMap<ClassId, f64> {
        &self.log_prior
    }

    /// Synthesizes distribution parameters for one attribute vector through
    /// the fitted gating regressors.
    pub fn predict_params(&self, a: ArrayView1<f64>) -> Result<ClassDistribution> {
        if a.len() != self.dim_k {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}-dimensional attributes, got {}",
                self.dim_k,
                a.len()
            )));
        }
        let transformed;
        let a_eff: ArrayView1<f64> = match &self.attr_transform {
            Some(t) => {
                transformed = t.apply_vec(a);
                transformed.view()
            }
            None => a,
        };
        let parts: Vec<Array1<f64>> = self
            .blocks
            .iter()
            .map(|b| b.predict(a_eff))
            .collect::<Result<_>>()?;
        let views: Vec<ArrayView1<f64>> = parts.iter().map(|p| p.view()).collect();
        let v = concatenate(Axis(0), &views).expect("blocks share the output length");
        expfam::from_unconstrained(self.config.family, v.view())
    }

    /// Log-likelihood (plus any stored log-prior) of `x` under every
    /// candidate class.
    pub fn score(
        &self,
        x: ArrayView1<f64>,
        candidates: &BTreeSet<ClassId>,
    ) -> Result<BTreeMap<ClassId, f64>> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        if x.len() != self.dim_d {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}-dimensional features, got {}",
                self.dim_d,
                x.len()
            )));
        }
        let mut out = BTreeMap::new();
        for &id in candidates {
            let dist = self.distribution(id).ok_or(Error::UnknownClass(id))?;
            let ll = dist.log_density_raw(x) + self.log_prior.get(&id).copied().unwrap_or(0.0);
            out.insert(id, ll);
        }
        Ok(out)
    }

    /// Most likely candidate class; ties break toward the smallest id.
    pub fn classify(&self, x: ArrayView1<f64>, candidates: &BTreeSet<ClassId>) -> Result<ClassId> {
        let scores = self.score(x, candidates)?;
        let mut best_id = ClassId::MIN;
        let mut best = f64::NEG_INFINITY;
        let mut first = true;
        for (&id, &ll) in &scores {
            if first || ll > best {
                best_id = id;
                best = ll;
                first = false;
            }
        }
        Ok(best_id)
    }

    /// Classification over every class the model knows, seen and unseen.
    pub fn classify_generalized(&self, x: ArrayView1<f64>) -> Result<ClassId> {
        self.classify(x, &self.all_ids())
    }

    /// Row-parallel classification; results keep the input row order.
    pub fn classify_batch(
        &self,
        xs: ArrayView2<f64>,
        candidates: &BTreeSet<ClassId>,
    ) -> Result<Vec<ClassId>> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        for &id in candidates {
            if self.distribution(id).is_none() {
                return Err(Error::UnknownClass(id));
            }
        }
        (0..xs.nrows())
            .into_par_iter()
            .map(|i| self.classify(xs.row(i), candidates))
            .collect()
    }

    /// Applies a few-shot update for one unseen class. Statistics are
    /// pooled with everything absorbed before, and the posterior is always
    /// recomputed from the pre-update snapshot, so splitting the same
    /// observations across calls changes the result only by the rounding
    /// of the partial sums, never by which update came first.
    pub fn absorb_fewshot(&mut self, class: ClassId, stats: &FewShotStats) -> Result<()> {
        if !self.unseen.contains_key(&class) {
            if self.seen.contains_key(&class) {
                return Err(Error::InvalidArgument(format!(
                    "few-shot updates apply to unseen classes; class {class} is seen"
                )));
            }
            return Err(Error::UnknownClass(class));
        }
        if !self.fewshot_prior.contains_key(&class) {
            let current = self.unseen[&class].clone();
            self.fewshot_prior.insert(class, current);
        }
        let pooled = self
            .fewshot_stats
            .entry(class)
            .or_insert_with(|| FewShotStats::new(stats.dim()));
        pooled.merge(stats)?;
        let pooled = pooled.clone();
        let floor = match self.config.family {
            FamilySpec::GaussianDiag { var_floor } => var_floor,
            FamilySpec::BernoulliProduct { .. } => 1e-6,
        };
        let updated = fewshot::update_distribution(&self.fewshot_prior[&class], &pooled, floor)?;
        self.unseen.insert(class, updated);
        Ok(())
    }

    /// Swaps in refined distributions (transductive EM output or protocol
    /// overrides). Replaced classes lose any accumulated few-shot state,
    /// since their stored snapshot no longer describes the current prior.
    pub(crate) fn replace_distributions(
        &mut self,
        dists: BTreeMap<ClassId, ClassDistribution>,
    ) -> Result<()> {
        for (id, dist) in dists {
            if dist.dim() != self.dim_d {
                return Err(Error::ShapeMismatch(format!(
                    "replacement for class {id} has dimension {}, model has {}",
                    dist.dim(),
                    self.dim_d
                )));
            }
            if let Some(slot) = self.unseen.get_mut(&id) {
                *slot = dist;
            } else if let Some(slot) = self.seen.get_mut(&id) {
                *slot = dist;
            } else {
                return Err(Error::UnknownClass(id));
            }
            self.fewshot_prior.remove(&id);
            self.fewshot_stats.remove(&id);
        }
        Ok(())
    }

    pub(crate) fn set_log_prior(&mut self, prior: BTreeMap<ClassId, f64>) {
        self.log_prior = prior;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_split, AttributeTable, FeatureTable};
    use crate::synthgen::{self, SynthConfig, TrueGating};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn gaussian_config(lambda: f64) -> GfzslConfig {
        GfzslConfig::new(FamilySpec::gaussian(), RegressorKind::Linear, lambda, lambda)
    }

    #[test]
    fn single_class_scalar_gating_scales_linearly() {
        let features = FeatureTable::new(array![[3.0]], vec![0]).unwrap();
        let attrs = AttributeTable::new(vec![0, 1], array![[1.0], [2.0]]).unwrap();
        let seen: BTreeSet<ClassId> = [0].into_iter().collect();
        let unseen: BTreeSet<ClassId> = [1].into_iter().collect();
        let split = make_split(&features, &attrs, &seen, &unseen).unwrap();
        let model = GfzslModel::fit(&split, &features, &attrs, gaussian_config(1e-9)).unwrap();
        let ClassDistribution::Gaussian(s) = &model.seen[&0] else {
            panic!("expected gaussian")
        };
        let ClassDistribution::Gaussian(u) = &model.unseen[&1] else {
            panic!("expected gaussian")
        };
        assert_abs_diff_eq!(u.mean()[0], 2.0 * s.mean()[0], epsilon = 1e-6);
        assert_abs_diff_eq!(u.log_var()[0], 2.0 * s.log_var()[0], epsilon = 1e-6);
    }

    #[test]
    fn linear_gating_ground_truth_is_recovered() {
        let config = SynthConfig {
            seen: 10,
            unseen: 3,
            attr_dim: 8,
            feat_dim: 5,
            samples_per_class: 200,
            gating: TrueGating::linear(),
            mean_scale: 1.0,
            rho_scale: 0.0,
            rho_shift: (0.01f64).ln(), // observation noise sigma = 0.1
            domain_shift: None,
            seed: 42,
        };
        let data = synthgen::generate(&config).unwrap();
        let model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            gaussian_config(1e-6),
        )
        .unwrap();
        for (&id, dist) in model.unseen_distributions() {
            let ClassDistribution::Gaussian(g) = dist else {
                panic!("expected gaussian")
            };
            let truth = &data.truth.class_params[&id];
            let mse: f64 = g
                .mean()
                .iter()
                .zip(truth.mean().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / g.dim() as f64;
            assert!(mse.sqrt() < 0.1, "class {id}: rmse {}", mse.sqrt());
        }
    }

    #[test]
    fn bernoulli_gating_recovers_logit_signs() {
        // Moderate logit spread keeps probabilities off the saturated ends,
        // where smoothing would distort the regression targets.
        let data = synthgen::generate_binary(12, 3, 6, 8, 1500, 0.7, 77).unwrap();
        let config = GfzslConfig::new(
            FamilySpec::bernoulli(),
            RegressorKind::Linear,
            1e-4,
            1e-4,
        );
        let model =
            GfzslModel::fit(&data.split, &data.features, &data.attributes, config).unwrap();
        let mut checked = 0;
        for (&id, dist) in model.unseen_distributions() {
            let ClassDistribution::Bernoulli(b) = dist else {
                panic!("expected bernoulli")
            };
            let ClassDistribution::Bernoulli(truth) = &data.truth_logits[&id] else {
                panic!("expected bernoulli truth")
            };
            for (est, tru) in b.logits().iter().zip(truth.logits().iter()) {
                if tru.abs() > 0.5 {
                    assert!(
                        est.signum() == tru.signum(),
                        "class {id}: estimated {est} vs true {tru}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no strong dims to check");
    }

    #[test]
    fn interpolation_limit_reproduces_seen_estimates() {
        // Full-rank square design: S = K = 4 classes, diagonal-dominant attrs.
        let mut attr_rows = Array2::<f64>::zeros((5, 3));
        for i in 0..5 {
            for j in 0..3 {
                attr_rows[(i, j)] = ((i * 3 + j) as f64 * 0.37).sin();
            }
        }
        // Use S=K=3 seen classes (ids 0..3) plus unseen id 4.
        for i in 0..3 {
            attr_rows[(i, i)] += 3.0;
        }
        let attrs = AttributeTable::new(vec![0, 1, 2, 3, 4], attr_rows).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            let center = c as f64 * 2.0 - 1.5;
            rows.extend_from_slice(&[center - 0.5, center + 0.5]);
            labels.extend_from_slice(&[c as ClassId, c as ClassId]);
        }
        let features = FeatureTable::new(
            Array2::from_shape_vec((6, 1), rows).unwrap(),
            labels,
        )
        .unwrap();
        let seen: BTreeSet<ClassId> = [0, 1, 2].into_iter().collect();
        let unseen: BTreeSet<ClassId> = [3].into_iter().collect();
        let split = make_split(&features, &attrs, &seen, &unseen).unwrap();
        let model = GfzslModel::fit(&split, &features, &attrs, gaussian_config(1e-10)).unwrap();
        for c in 0..3 {
            let predicted = model.predict_params(attrs.row_for(c).unwrap()).unwrap();
            let (ClassDistribution::Gaussian(p), ClassDistribution::Gaussian(s)) =
                (&predicted, &model.seen[&c])
            else {
                panic!("expected gaussians")
            };
            assert_abs_diff_eq!(p.mean()[0], s.mean()[0], epsilon = 1e-4);
            assert_abs_diff_eq!(p.log_var()[0], s.log_var()[0], epsilon = 1e-4);
        }
    }

    #[test]
    fn zero_attributes_give_zero_mean_unit_variance() {
        let features = FeatureTable::new(array![[1.0], [2.0]], vec![0, 0]).unwrap();
        let attrs = AttributeTable::new(vec![0, 1], array![[1.0, -1.0], [0.5, 0.5]]).unwrap();
        let seen: BTreeSet<ClassId> = [0].into_iter().collect();
        let unseen: BTreeSet<ClassId> = [1].into_iter().collect();
        let split = make_split(&features, &attrs, &seen, &unseen).unwrap();
        let model = GfzslModel::fit(&split, &features, &attrs, gaussian_config(0.5)).unwrap();
        let dist = model.predict_params(array![0.0, 0.0].view()).unwrap();
        let ClassDistribution::Gaussian(g) = dist else {
            panic!("expected gaussian")
        };
        assert_eq!(g.mean()[0], 0.0);
        assert_eq!(g.var()[0], 1.0);
    }

    #[test]
    fn synthesized_variances_are_always_positive() {
        let data = synthgen::generate(&SynthConfig::small_test(5, 2, 3, 4, 30, 11)).unwrap();
        let model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            gaussian_config(0.1),
        )
        .unwrap();
        for scale in [-100.0, -1.0, 0.0, 1.0, 100.0] {
            let a = Array1::from_elem(3, scale);
            let dist = model.predict_params(a.view()).unwrap();
            let ClassDistribution::Gaussian(g) = dist else {
                panic!("expected gaussian")
            };
            assert!(g.var().iter().all(|v| *v > 0.0));
        }
    }

    fn two_component_model(centers: [f64; 2]) -> GfzslModel {
        let features = FeatureTable::new(
            array![
                [centers[0] - 1.0],
                [centers[0] + 1.0],
                [centers[1] - 1.0],
                [centers[1] + 1.0]
            ],
            vec![0, 0, 5, 5],
        )
        .unwrap();
        let attrs =
            AttributeTable::new(vec![0, 5, 7], array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
                .unwrap();
        let seen: BTreeSet<ClassId> = [0, 5].into_iter().collect();
        let unseen: BTreeSet<ClassId> = [7].into_iter().collect();
        let split = make_split(&features, &attrs, &seen, &unseen).unwrap();
        GfzslModel::fit(&split, &features, &attrs, gaussian_config(1e-9)).unwrap()
    }

    #[test]
    fn classify_picks_the_nearer_unit_variance_component() {
        let model = two_component_model([0.0, 10.0]);
        let candidates: BTreeSet<ClassId> = [0, 5].into_iter().collect();
        assert_eq!(model.classify(array![1.0].view(), &candidates).unwrap(), 0);
        assert_eq!(model.classify(array![9.0].view(), &candidates).unwrap(), 5);
    }

    #[test]
    fn exact_ties_break_toward_the_smaller_id() {
        // Identical component parameters make every score an exact tie.
        let model = two_component_model([4.0, 4.0]);
        let candidates: BTreeSet<ClassId> = [0, 5].into_iter().collect();
        let scores = model.score(array![3.3].view(), &candidates).unwrap();
        assert_eq!(scores[&0].to_bits(), scores[&5].to_bits());
        assert_eq!(model.classify(array![3.3].view(), &candidates).unwrap(), 0);
    }

    #[test]
    fn classify_agrees_with_brute_force_density_argmax() {
        let data = synthgen::generate(&SynthConfig::small_test(8, 3, 4, 6, 40, 21)).unwrap();
        let model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            gaussian_config(0.01),
        )
        .unwrap();
        let candidates = model.unseen_ids();
        for i in (0..data.features.n_examples()).step_by(7) {
            let x = data.features.row(i);
            let mut best = ClassId::MIN;
            let mut best_ll = f64::NEG_INFINITY;
            for &id in &candidates {
                let ll = model.distribution(id).unwrap().log_density(x).unwrap();
                if best == ClassId::MIN || ll > best_ll {
                    best = id;
                    best_ll = ll;
                }
            }
            assert_eq!(model.classify(x, &candidates).unwrap(), best);
        }
    }

    #[test]
    fn constant_log_prior_shift_leaves_decisions_unchanged() {
        let data = synthgen::generate(&SynthConfig::small_test(6, 2, 3, 4, 30, 31)).unwrap();
        let mut model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            gaussian_config(0.05),
        )
        .unwrap();
        let candidates = model.unseen_ids();
        let before: Vec<ClassId> = (0..data.features.n_examples())
            .map(|i| model.classify(data.features.row(i), &candidates).unwrap())
            .collect();
        let shifted: BTreeMap<ClassId, f64> =
            model.all_ids().into_iter().map(|id| (id, 17.25)).collect();
        model.set_log_prior(shifted);
        let after: Vec<ClassId> = (0..data.features.n_examples())
            .map(|i| model.classify(data.features.row(i), &candidates).unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn generalized_classification_spans_seen_and_unseen() {
        let model = two_component_model([0.0, 10.0]);
        // Unseen class 7 sits near 10 (sum of the two one-hot gatings).
        let got = model.classify_generalized(array![0.2].view()).unwrap();
        assert_eq!(got, 0);
        assert_eq!(model.all_ids().len(), 3);
    }

    #[test]
    fn fitting_is_bit_reproducible() {
        let data = synthgen::generate(&SynthConfig::small_test(7, 2, 4, 5, 25, 41)).unwrap();
        let config = GfzslConfig::new(
            FamilySpec::gaussian(),
            RegressorKind::Kernel(KernelSpec::Quadratic),
            0.1,
            0.2,
        );
        let a = GfzslModel::fit(&data.split, &data.features, &data.attributes, config).unwrap();
        let b = GfzslModel::fit(&data.split, &data.features, &data.attributes, config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stored_unseen_distributions_match_regressor_output_exactly() {
        let data = synthgen::generate(&SynthConfig::small_test(6, 3, 4, 5, 20, 51)).unwrap();
        for config in [
            gaussian_config(0.3),
            GfzslConfig::new(
                FamilySpec::gaussian(),
                RegressorKind::Kernel(KernelSpec::Rbf { gamma: 0.5 }),
                0.3,
                0.7,
            ),
        ] {
            let model =
                GfzslModel::fit(&data.split, &data.features, &data.attributes, config).unwrap();
            for (&id, stored) in model.unseen_distributions() {
                let again = model
                    .predict_params(data.attributes.row_for(id).unwrap())
                    .unwrap();
                assert_eq!(stored, &again);
            }
        }
    }

    #[test]
    fn empty_seen_class_is_reported_by_id() {
        let features = FeatureTable::new(array![[1.0], [2.0]], vec![0, 0]).unwrap();
        let attrs = AttributeTable::new(vec![0, 1, 2], array![[1.0], [2.0], [3.0]]).unwrap();
        let seen: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let unseen: BTreeSet<ClassId> = [2].into_iter().collect();
        let split = make_split(&features, &attrs, &seen, &unseen).unwrap();
        let err = GfzslModel::fit(&split, &features, &attrs, gaussian_config(0.1)).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(1)));
    }

    #[test]
    fn zscored_attributes_change_the_fit_but_keep_the_api() {
        let data = synthgen::generate(&SynthConfig::small_test(6, 2, 3, 4, 30, 61)).unwrap();
        let mut config = gaussian_config(0.1);
        config.zscore_attributes = true;
        let model =
            GfzslModel::fit(&data.split, &data.features, &data.attributes, config).unwrap();
        assert!(model.attr_transform.is_some());
        // predict_params still takes raw attribute vectors.
        for (&id, stored) in model.unseen_distributions() {
            let again = model
                .predict_params(data.attributes.row_for(id).unwrap())
                .unwrap();
            assert_eq!(stored, &again);
        }
    }

    #[test]
    fn fewshot_absorption_is_associative_across_batches() {
        let data = synthgen::generate(&SynthConfig::small_test(6, 2, 3, 4, 30, 71)).unwrap();
        let base = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            gaussian_config(0.1),
        )
        .unwrap();
        let class = *base.unseen_ids().iter().next().unwrap();
        let samples = array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 0.0], [0.7, 0.7, 0.7, 0.7]];

        let mut whole = base.clone();
        whole
            .absorb_fewshot(class, &FewShotStats::from_samples(samples.view()))
            .unwrap();

        let mut batched = base.clone();
        batched
            .absorb_fewshot(
                class,
                &FewShotStats::from_samples(samples.slice(ndarray::s![..1, ..])),
            )
            .unwrap();
        batched
            .absorb_fewshot(
                class,
                &FewShotStats::from_samples(samples.slice(ndarray::s![1.., ..])),
            )
            .unwrap();
        assert_eq!(whole.unseen[&class], batched.unseen[&class]);
    }
}
