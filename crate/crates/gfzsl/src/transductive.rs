//! EM refinement of class distributions on unlabeled data.
//!
//! A fitted model seeds a finite mixture over a chosen set of component
//! classes (uniform mixing); E and M steps then alternate until the total
//! log-likelihood stabilizes. Rows with known labels can be clamped to
//! their component, which turns the same loop into semi-supervised
//! re-estimation. Only the chosen components are refined; the rest of the
//! model is untouched.

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::expfam::{self, ClassDistribution, FamilySpec};
use crate::model::GfzslModel;
use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Mixing proportions plus one distribution per refined class.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    ids: Vec<ClassId>,
    mixing: Array1<f64>,
    components: Vec<ClassDistribution>,
    loglik: Option<f64>,
}

impl MixtureState {
    /// Mixing weights are renormalized to sum to 1 exactly; they must
    /// already be within 1e-9 of that.
    pub fn new(
        ids: Vec<ClassId>,
        mixing: Array1<f64>,
        components: Vec<ClassDistribution>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        if ids.len() != mixing.len() || ids.len() != components.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} mixing weights, {} components",
                ids.len(),
                mixing.len(),
                components.len()
            )));
        }
        let mut unique = BTreeSet::new();
        for &id in &ids {
            if !unique.insert(id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate component class id {id}"
                )));
            }
        }
        for w in mixing.iter() {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "mixing weights must be finite and non-negative, got {w}"
                )));
            }
        }
        let total: f64 = mixing.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixing weights sum to {total}, expected 1"
            )));
        }
        let dim = components[0].dim();
        for c in &components[1..] {
            if c.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "components disagree on dimension: {} vs {dim}",
                    c.dim()
                )));
            }
            if std::mem::discriminant(&components[0]) != std::mem::discriminant(c) {
                return Err(Error::InvalidArgument(
                    "components mix distribution families".into(),
                ));
            }
        }
        Ok(Self {
            ids,
            mixing: &mixing / total,
            components,
            loglik: None,
        })
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn mixing(&self) -> ndarray::ArrayView1<'_, f64> {
        self.mixing.view()
    }

    pub fn components(&self) -> &[ClassDistribution] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Total log-likelihood from the most recent E-step, if any ran.
    pub fn loglik(&self) -> Option<f64> {
        self.loglik
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which the loop stops.
    pub tol: f64,
    /// Floor on mixing proportions; components whose effective count drops
    /// below `min_mix * N` are reset to their initial distribution.
    pub min_mix: f64,
    /// Variance floor applied in every M-step.
    pub var_floor: f64,
    /// Keep the learned mixing proportions as class log-priors in the
    /// refined model, so prediction uses the E-step posterior. When false
    /// the refined model scores by likelihood alone.
    pub use_mixing_at_predict: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            min_mix: 1e-8,
            var_floor: 1e-6,
            use_mixing_at_predict: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        for (name, v) in [
            ("tol", self.tol),
            ("min_mix", self.min_mix),
            ("var_floor", self.var_floor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmTraceEntry {
    pub iteration: usize,
    /// Total log-likelihood under the parameters entering this iteration.
    pub loglik: f64,
    /// Largest absolute change any parameter made in this iteration's
    /// M-step (zero for the final, converged iteration).
    pub max_param_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub entries: Vec<EmTraceEntry>,
    pub converged: bool,
}

impl EmTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,log_likelihood,max_param_delta\n");
        for e in &self.entries {
            writeln!(
                out,
                "{},{:.16e},{:.16e}",
                e.iteration, e.loglik, e.max_param_delta
            )
            .unwrap();
        }
        out
    }
}

/// Seeds a mixture from a fitted model: the named classes become
/// components, copied as-is, with uniform mixing.
pub fn init_mixture(model: &GfzslModel, component_ids: &BTreeSet<ClassId>) -> Result<MixtureState> {
    if component_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "mixture needs at least one component".into(),
        ));
    }
    let ids: Vec<ClassId> = component_ids.iter().copied().collect();
    let components: Vec<ClassDistribution> = ids
        .iter()
        .map(|&id| {
            model
                .distribution(id)
                .cloned()
                .ok_or(Error::UnknownClass(id))
        })
        .collect::<Result<_>>()?;
    let u = ids.len();
    let mixing = Array1::from_elem(u, 1.0 / u as f64);
    MixtureState::new(ids, mixing, components)
}

/// Per-row responsibilities and the total log-likelihood, with optional
/// rows clamped one-hot to a component position. Everything runs in
/// log-space until the final per-row normalization.
fn responsibilities(
    state: &MixtureState,
    x: ArrayView2<f64>,
    clamped: Option<&BTreeMap<usize, usize>>,
) -> Result<(Array2<f64>, f64)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no unlabeled examples".into()));
    }
    if x.ncols() != state.dim() {
        return Err(Error::ShapeMismatch(format!(
            "examples have dimension {}, mixture has {}",
            x.ncols(),
            state.dim()
        )));
    }
    if let Some(map) = clamped {
        for &row in map.keys() {
            if row >= n {
                return Err(Error::InvalidArgument(format!(
                    "clamped example index {row} out of range for {n} rows"
                )));
            }
        }
    }
    let u = state.components.len();
    let log_mix: Vec<f64> = state.mixing.iter().map(|p| p.ln()).collect();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            if let Some(&comp) = clamped.and_then(|m| m.get(&i)) {
                let mut r = vec![0.0; u];
                r[comp] = 1.0;
                let ll = log_mix[comp] + state.components[comp].log_density_raw(xi);
                return (r, ll);
            }
            let logs: Vec<f64> = (0..u)
                .map(|c| log_mix[c] + state.components[c].log_density_raw(xi))
                .collect();
            let m = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let scaled: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = scaled.iter().sum();
            (scaled.iter().map(|e| e / s).collect(), m + s.ln())
        })
        .collect();
    let mut resp = Array2::<f64>::zeros((n, u));
    let mut total = 0.0;
    for (i, (r, ll)) in rows.into_iter().enumerate() {
        for (c, v) in r.into_iter().enumerate() {
            resp[(i, c)] = v;
        }
        total += ll;
    }
    Ok((resp, total))
}

/// Posterior component probabilities for each row of `x`. Rows are
/// non-negative and sum to 1 within 1e-12.
pub fn e_step(state: &MixtureState, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    responsibilities(state, x, None).map(|(r, _)| r)
}

/// Raises below-floor entries to the floor and renormalizes; the deficit
/// comes out of the largest entry so the total stays exactly balanced.
fn normalize_mixing(mut mixing: Array1<f64>, min_mix: f64) -> Array1<f64> {
    for v in mixing.iter_mut() {
        if *v < min_mix {
            *v = min_mix;
        }
    }
    let total = mixing.sum();
    mixing /= total;
    let mut deficit = 0.0;
    for v in mixing.iter_mut() {
        if *v < min_mix {
            deficit += min_mix - *v;
            *v = min_mix;
        }
    }
    if deficit > 0.0 {
        let imax = mixing
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("mixture is non-empty");
        mixing[imax] -= deficit;
    }
    mixing
}

/// Re-estimates mixing and component parameters from responsibilities.
/// A component whose effective count falls below `min_mix * N` keeps its
/// `init` distribution instead of degenerating.
pub fn m_step(
    resp: ArrayView2<f64>,
    x: ArrayView2<f64>,
    family: FamilySpec,
    config: &EmConfig,
    init: &MixtureState,
) -> Result<MixtureState> {
    config.validate()?;
    family.validate()?;
    let n = x.nrows();
    let u = init.components.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no unlabeled examples".into()));
    }
    if resp.nrows() != n || resp.ncols() != u {
        return Err(Error::ShapeMismatch(format!(
            "responsibilities are {}x{}, expected {n}x{u}",
            resp.nrows(),
            resp.ncols()
        )));
    }
    if x.ncols() != init.dim() {
        return Err(Error::ShapeMismatch(format!(
            "examples have dimension {}, mixture has {}",
            x.ncols(),
            init.dim()
        )));
    }
    if config.min_mix * u as f64 >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "min_mix {} is too large for {u} components",
            config.min_mix
        )));
    }
    for (i, row) in resp.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for v in row.iter() {
            if !(*v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "responsibility row {i} has invalid entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "responsibility row {i} sums to {sum}, expected 1"
            )));
        }
    }
    let counts: Vec<f64> = (0..u).map(|c| resp.column(c).sum()).collect();
    let components: Vec<ClassDistribution> = (0..u)
        .into_par_iter()
        .map(|c| {
            if counts[c] < config.min_mix * n as f64 {
                return Ok(init.components[c].clone());
            }
            let weights = resp.column(c).to_vec();
            expfam::estimate(family, x, Some(&weights))
        })
        .collect::<Result<_>>()?;
    let raw = Array1::from_iter(counts.iter().map(|nk| nk / n as f64));
    let mixing = normalize_mixing(raw, config.min_mix);
    Ok(MixtureState {
        ids: init.ids.clone(),
        mixing,
        components,
        loglik: None,
    })
}

fn max_param_delta(a: &MixtureState, b: &MixtureState) -> f64 {
    let mut delta = 0.0f64;
    for (x, y) in a.mixing.iter().zip(b.mixing.iter()) {
        delta = delta.max((x - y).abs());
    }
    for (ca, cb) in a.components.iter().zip(&b.components) {
        let ua = ca.to_unconstrained();
        let ub = cb.to_unconstrained();
        for (x, y) in ua.iter().zip(ub.iter()) {
            delta = delta.max((x - y).abs());
        }
    }
    delta
}

/// Runs the EM loop from an explicit starting state. Stops when the total
/// log-likelihood changes by less than `tol * (1 + |loglik|)` between
/// iterations, or at `max_iters`. `clamped` maps example indices to the
/// class their responsibility is forced to.
pub fn run_em_state(
    init: &MixtureState,
    x: ArrayView2<f64>,
    family: FamilySpec,
    config: &EmConfig,
    clamped: Option<&BTreeMap<usize, ClassId>>,
) -> Result<(MixtureState, EmTrace)> {
    config.validate()?;
    let clamped_positions: Option<BTreeMap<usize, usize>> = match clamped {
        None => None,
        Some(map) => {
            let mut out = BTreeMap::new();
            for (&row, &class) in map {
                let pos = init.ids.iter().position(|&id| id == class).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "clamped class {class} is not among the refined components"
                    ))
                })?;
                out.insert(row, pos);
            }
            Some(out)
        }
    };
    let mut state = init.clone();
    let mut entries = Vec::new();
    let mut converged = false;
    let mut prev_ll: Option<f64> = None;
    for iteration in 1..=config.max_iters {
        let (resp, ll) = responsibilities(&state, x, clamped_positions.as_ref())?;
        state.loglik = Some(ll);
        if let Some(prev) = prev_ll {
            if (ll - prev).abs() < config.tol * (1.0 + ll.abs()) {
                entries.push(EmTraceEntry {
                    iteration,
                    loglik: ll,
                    max_param_delta: 0.0,
                });
                converged = true;
                break;
            }
        }
        let mut next = m_step(resp.view(), x, family, config, init)?;
        next.loglik = Some(ll);
        entries.push(EmTraceEntry {
            iteration,
            loglik: ll,
            max_param_delta: max_param_delta(&state, &next),
        });
        state = next;
        prev_ll = Some(ll);
    }
    Ok((state, EmTrace { entries, converged }))
}

/// Gaussian refinement honors the EM variance floor; other families keep
/// their fitted configuration.
fn em_family(model: &GfzslModel, config: &EmConfig) -> FamilySpec {
    match model.config().family {
        FamilySpec::GaussianDiag { .. } => FamilySpec::GaussianDiag {
            var_floor: config.var_floor,
        },
        other => other,
    }
}

/// Refines the named classes of a fitted model on unlabeled examples and
/// returns the updated model plus the iteration trace. With
/// `use_mixing_at_predict` the learned mixing proportions become the
/// refined classes' log-priors.
pub fn run_em(
    model: &GfzslModel,
    x: ArrayView2<f64>,
    component_ids: &BTreeSet<ClassId>,
    config: &EmConfig,
    clamped: Option<&BTreeMap<usize, ClassId>>,
) -> Result<(GfzslModel, EmTrace)> {
    let init = init_mixture(model, component_ids)?;
    let family = em_family(model, config);
    let (state, trace) = run_em_state(&init, x, family, config, clamped)?;
    let mut refined = model.clone();
    let replacements: BTreeMap<ClassId, ClassDistribution> = state
        .ids
        .iter()
        .copied()
        .zip(state.components.iter().cloned())
        .collect();
    refined.replace_distributions(replacements)?;
    if config.use_mixing_at_predict {
        let prior: BTreeMap<ClassId, f64> = state
            .ids
            .iter()
            .copied()
            .zip(state.mixing.iter().map(|p| p.ln()))
            .collect();
        refined.set_log_prior(prior);
    }
    Ok((refined, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{BernoulliProduct, GaussianDiag};
    use crate::model::{GfzslConfig, GfzslModel, RegressorKind};
    use crate::synthgen::{self, SynthConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> ClassDistribution {
        let log_var = Array1::from_vec(var).mapv(f64::ln);
        ClassDistribution::Gaussian(GaussianDiag::new(Array1::from_vec(mean), log_var).unwrap())
    }

    fn two_component_state() -> MixtureState {
        MixtureState::new(
            vec![0, 1],
            array![0.5, 0.5],
            vec![
                gaussian(vec![-2.0, 0.0], vec![1.0, 1.0]),
                gaussian(vec![2.0, 0.0], vec![1.0, 1.0]),
            ],
        )
        .unwrap()
    }

    fn sample_mixture(state: &MixtureState, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = state.dim();
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = state.components().len() - 1;
            for (c, p) in state.mixing().iter().enumerate() {
                acc += p;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            let ClassDistribution::Gaussian(g) = &state.components()[comp] else {
                panic!("gaussian mixture expected")
            };
            for dd in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                x[(i, dd)] = g.mean()[dd] + g.var()[dd].sqrt() * z;
            }
        }
        x
    }

    fn fitted_small_model() -> (crate::synthgen::SynthData, GfzslModel) {
        let config = SynthConfig {
            mean_scale: 2.0,
            rho_scale: 0.0,
            rho_shift: 0.0,
            ..SynthConfig::small_test(6, 3, 4, 8, 60, 3)
        };
        let data = synthgen::generate(&config).unwrap();
        let model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            GfzslConfig::new(
                FamilySpec::gaussian(),
                RegressorKind::Linear,
                1e-4,
                1e-4,
            ),
        )
        .unwrap();
        (data, model)
    }

    #[test]
    fn init_mixture_starts_uniform() {
        let (_, model) = fitted_small_model();
        let ids = model.unseen_ids();
        let state = init_mixture(&model, &ids).unwrap();
        assert_eq!(state.ids().len(), 3);
        for p in state.mixing().iter() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        for (id, comp) in state.ids().iter().zip(state.components()) {
            assert_eq!(model.distribution(*id).unwrap(), comp);
        }

        let single = init_mixture(&model, &[6].into_iter().collect()).unwrap();
        assert_eq!(single.mixing()[0], 1.0);

        let err = init_mixture(&model, &[99].into_iter().collect()).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(99)));
    }

    #[test]
    fn single_component_responsibilities_are_exactly_one() {
        let state = MixtureState::new(
            vec![7],
            array![1.0],
            vec![gaussian(vec![0.0, 1.0], vec![1.0, 2.0])],
        )
        .unwrap();
        let x = array![[0.5, 0.5], [100.0, -3.0]];
        let resp = e_step(&state, x.view()).unwrap();
        for v in resp.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn midpoint_between_symmetric_components_splits_evenly() {
        let state = two_component_state();
        let resp = e_step(&state, array![[0.0, 0.7]].view()).unwrap();
        assert_eq!(resp[(0, 0)], resp[(0, 1)]);
        assert_abs_diff_eq!(resp[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn responsibilities_match_direct_density_ratio() {
        let state = MixtureState::new(
            vec![0, 1],
            array![0.3, 0.7],
            vec![
                gaussian(vec![0.5, -1.0], vec![1.5, 0.5]),
                gaussian(vec![-0.25, 0.75], vec![0.8, 2.0]),
            ],
        )
        .unwrap();
        let x = array![[0.1, 0.2], [-1.0, 1.5], [2.0, -2.0]];
        let resp = e_step(&state, x.view()).unwrap();
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let f0 = 0.3 * state.components()[0].log_density(row).unwrap().exp();
            let f1 = 0.7 * state.components()[1].log_density(row).unwrap().exp();
            assert_abs_diff_eq!(resp[(i, 0)], f0 / (f0 + f1), epsilon = 1e-12);
            assert_abs_diff_eq!(resp[(i, 1)], f1 / (f0 + f1), epsilon = 1e-12);
            assert_abs_diff_eq!(resp.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_rejects_dimension_mismatch_and_empty_input() {
        let state = two_component_state();
        assert!(e_step(&state, array![[1.0, 2.0, 3.0]].view()).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(e_step(&state, empty.view()).is_err());
    }

    #[test]
    fn one_hot_responsibilities_reduce_to_per_component_mle() {
        let init = two_component_state();
        let x = array![[1.0, 2.0], [3.0, 0.0], [-1.0, -2.0], [5.0, 4.0]];
        let resp = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let family = FamilySpec::gaussian();
        let config = EmConfig::default();
        let state = m_step(resp.view(), x.view(), family, &config, &init).unwrap();

        let comp0 = expfam::estimate(family, array![[1.0, 2.0], [-1.0, -2.0]].view(), None).unwrap();
        let comp1 = expfam::estimate(family, array![[3.0, 0.0], [5.0, 4.0]].view(), None).unwrap();
        assert_eq!(state.components()[0].to_unconstrained(), comp0.to_unconstrained());
        assert_eq!(state.components()[1].to_unconstrained(), comp1.to_unconstrained());
        assert_abs_diff_eq!(state.mixing()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(state.mixing().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_responsibilities_give_identical_components() {
        let init = two_component_state();
        let x = array![[1.0, 2.0], [3.0, 0.0], [-1.0, -2.0]];
        let resp = Array2::from_elem((3, 2), 0.5);
        let state = m_step(
            resp.view(),
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            &init,
        )
        .unwrap();
        assert_eq!(
            state.components()[0].to_unconstrained(),
            state.components()[1].to_unconstrained()
        );
        assert_abs_diff_eq!(state.mixing()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn m_step_matches_direct_weighted_moments() {
        let init = two_component_state();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |_| {
            let z: f64 = rng.sample(StandardNormal);
            2.0 * z
        });
        let mut resp = Array2::zeros((n, 2));
        for i in 0..n {
            let r: f64 = rng.random();
            resp[(i, 0)] = r;
            resp[(i, 1)] = 1.0 - r;
        }
        let floor = 1e-6;
        let state = m_step(
            resp.view(),
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            &init,
        )
        .unwrap();
        for c in 0..2 {
            let wsum: f64 = resp.column(c).sum();
            let mut mean = vec![0.0; 2];
            for i in 0..n {
                for d in 0..2 {
                    mean[d] += resp[(i, c)] * x[(i, d)];
                }
            }
            for m in mean.iter_mut() {
                *m /= wsum;
            }
            let mut var = vec![0.0; 2];
            for i in 0..n {
                for d in 0..2 {
                    let diff = x[(i, d)] - mean[d];
                    var[d] += resp[(i, c)] * diff * diff;
                }
            }
            for v in var.iter_mut() {
                *v = (*v / wsum).max(floor);
            }
            let ClassDistribution::Gaussian(g) = &state.components()[c] else {
                panic!("gaussian expected")
            };
            for d in 0..2 {
                assert_abs_diff_eq!(g.mean()[d], mean[d], epsilon = 1e-12);
                assert_abs_diff_eq!(g.var()[d], var[d], epsilon = 1e-12);
            }
            assert_abs_diff_eq!(state.mixing()[c], wsum / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn starved_component_is_reset_to_its_initial_distribution() {
        let init = two_component_state();
        let x = array![[1.0, 2.0], [3.0, 0.0], [-1.0, -2.0], [5.0, 4.0]];
        let resp = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let state = m_step(
            resp.view(),
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            &init,
        )
        .unwrap();
        assert_eq!(state.components()[1], init.components()[1]);
        assert!(state.mixing()[1] >= EmConfig::default().min_mix);
        assert_abs_diff_eq!(state.mixing().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn m_step_rejects_malformed_responsibilities() {
        let init = two_component_state();
        let x = array![[1.0, 2.0], [3.0, 0.0]];
        let bad_sum = array![[0.7, 0.7], [0.5, 0.5]];
        assert!(m_step(
            bad_sum.view(),
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            &init
        )
        .is_err());
        let negative = array![[1.5, -0.5], [0.5, 0.5]];
        assert!(m_step(
            negative.view(),
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            &init
        )
        .is_err());
    }

    #[test]
    fn single_example_run_terminates() {
        let (data, model) = fitted_small_model();
        let x = data.features.gather(&data.split.unseen_labeled()[..1]);
        let (refined, trace) = run_em(
            &model,
            x.view(),
            &model.unseen_ids(),
            &EmConfig::default(),
            None,
        )
        .unwrap();
        assert!(trace.entries.len() <= 100);
        assert_eq!(refined.seen_distributions(), model.seen_distributions());
    }

    #[test]
    fn loglik_is_nondecreasing_and_converges_on_mixture_data() {
        let state = two_component_state();
        let x = sample_mixture(&state, 2000, 7);
        let (_, trace) = run_em_state(
            &state,
            x.view(),
            FamilySpec::gaussian(),
            &EmConfig::default(),
            None,
        )
        .unwrap();
        assert!(trace.converged, "EM did not converge in 100 iterations");
        assert!(trace.entries.len() < 100);
        for pair in trace.entries.windows(2) {
            assert!(
                pair[1].loglik - pair[0].loglik >= -1e-8,
                "log-likelihood fell: {} -> {}",
                pair[0].loglik,
                pair[1].loglik
            );
        }
    }

    #[test]
    fn monotone_loglik_over_random_inits_and_data() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let d = 3;
            let x = Array2::from_shape_fn((n, d), |_| {
                let z: f64 = rng.sample(StandardNormal);
                3.0 * z
            });
            let components = (0..2)
                .map(|_| {
                    let mean = Array1::from_shape_fn(d, |_| {
                        let z: f64 = rng.sample(StandardNormal);
                        2.0 * z
                    });
                    let log_var = Array1::from_shape_fn(d, |_| {
                        let z: f64 = rng.sample(StandardNormal);
                        0.5 * z
                    });
                    ClassDistribution::Gaussian(GaussianDiag::new(mean, log_var).unwrap())
                })
                .collect();
            let init = MixtureState::new(vec![0, 1], array![0.5, 0.5], components).unwrap();
            let config = EmConfig {
                max_iters: 40,
                tol: 1e-10,
                ..EmConfig::default()
            };
            let (_, trace) =
                run_em_state(&init, x.view(), FamilySpec::gaussian(), &config, None).unwrap();
            for pair in trace.entries.windows(2) {
                assert!(
                    pair[1].loglik - pair[0].loglik >= -1e-8,
                    "seed {seed}: log-likelihood fell"
                );
            }
        }
    }

    #[test]
    fn parameter_drift_shrinks_near_the_fixed_point() {
        let state = two_component_state();
        let x = sample_mixture(&state, 10_000, 11);
        let config = EmConfig {
            max_iters: 12,
            tol: 1e-13,
            ..EmConfig::default()
        };
        let (_, trace) =
            run_em_state(&state, x.view(), FamilySpec::gaussian(), &config, None).unwrap();
        let deltas: Vec<f64> = trace.entries.iter().map(|e| e.max_param_delta).collect();
        assert!(deltas.len() >= 6, "expected a longer trace, got {deltas:?}");
        for i in 3..deltas.len() - 1 {
            assert!(
                deltas[i + 1] <= deltas[i] + 1e-12,
                "drift grew at iteration {i}: {deltas:?}"
            );
        }
    }

    #[test]
    fn fully_clamped_run_reproduces_supervised_estimates() {
        let (data, model) = fitted_small_model();
        let unseen_rows = data.split.unseen_labeled().to_vec();
        let x = data.features.gather(&unseen_rows);
        let clamped: BTreeMap<usize, ClassId> = unseen_rows
            .iter()
            .enumerate()
            .map(|(pos, &row)| (pos, data.split.label_of(row)))
            .collect();
        let config = EmConfig::default();
        let (refined, _) = run_em(
            &model,
            x.view(),
            &model.unseen_ids(),
            &config,
            Some(&clamped),
        )
        .unwrap();
        let family = FamilySpec::GaussianDiag {
            var_floor: config.var_floor,
        };
        for &id in &model.unseen_ids() {
            let member_rows: Vec<usize> = unseen_rows
                .iter()
                .copied()
                .filter(|&r| data.split.label_of(r) == id)
                .collect();
            let direct =
                expfam::estimate(family, data.features.gather(&member_rows).view(), None).unwrap();
            assert_eq!(
                refined.distribution(id).unwrap().to_unconstrained(),
                direct.to_unconstrained(),
                "class {id}"
            );
        }
    }

    #[test]
    fn clamped_classes_must_be_components() {
        let (data, model) = fitted_small_model();
        let x = data.features.gather(&data.split.unseen_labeled()[..5]);
        let clamped: BTreeMap<usize, ClassId> = [(0, 0)].into_iter().collect();
        let err = run_em(
            &model,
            x.view(),
            &model.unseen_ids(),
            &EmConfig::default(),
            Some(&clamped),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not among the refined components"));
    }

    #[test]
    fn learned_mixing_lands_in_the_refined_model_only_when_asked() {
        let (data, model) = fitted_small_model();
        let x = data.features.gather(data.split.unseen_labeled());
        let ids = model.unseen_ids();
        let (with_prior, _) =
            run_em(&model, x.view(), &ids, &EmConfig::default(), None).unwrap();
        assert_eq!(with_prior.log_prior().len(), ids.len());
        let total: f64 = with_prior.log_prior().values().map(|l| l.exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);

        let config = EmConfig {
            use_mixing_at_predict: false,
            ..EmConfig::default()
        };
        let (without_prior, _) = run_em(&model, x.view(), &ids, &config, None).unwrap();
        assert!(without_prior.log_prior().is_empty());
    }

    #[test]
    fn refinement_recovers_accuracy_lost_to_domain_shift() {
        let config = SynthConfig {
            mean_scale: 2.0,
            rho_scale: 0.0,
            rho_shift: 0.0,
            domain_shift: Some(Array1::from_elem(8, 1.5)),
            ..SynthConfig::small_test(6, 3, 4, 8, 100, 19)
        };
        let data = synthgen::generate(&config).unwrap();
        let model = GfzslModel::fit(
            &data.split,
            &data.features,
            &data.attributes,
            GfzslConfig::new(FamilySpec::gaussian(), RegressorKind::Linear, 1e-4, 1e-4),
        )
        .unwrap();
        let rows = data.split.unseen_labeled().to_vec();
        let x = data.features.gather(&rows);
        let truth: Vec<ClassId> = rows.iter().map(|&r| data.split.label_of(r)).collect();
        let candidates = model.unseen_ids();
        let accuracy = |m: &GfzslModel| {
            let pred = m.classify_batch(x.view(), &candidates).unwrap();
            pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
        };
        let inductive = accuracy(&model);
        let (refined, trace) =
            run_em(&model, x.view(), &candidates, &EmConfig::default(), None).unwrap();
        let transductive = accuracy(&refined);
        assert!(
            transductive >= inductive,
            "transductive {transductive} < inductive {inductive} (trace length {})",
            trace.entries.len()
        );
    }

    #[test]
    fn bernoulli_mixture_runs_end_to_end() {
        let probs0 = array![0.9, 0.1, 0.8, 0.2];
        let probs1 = array![0.1, 0.9, 0.2, 0.8];
        let logit = |p: &Array1<f64>| p.mapv(|v: f64| (v / (1.0 - v)).ln());
        let init = MixtureState::new(
            vec![0, 1],
            array![0.5, 0.5],
            vec![
                ClassDistribution::Bernoulli(BernoulliProduct::new(logit(&probs0)).unwrap()),
                ClassDistribution::Bernoulli(BernoulliProduct::new(logit(&probs1)).unwrap()),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut x = Array2::zeros((400, 4));
        for i in 0..400 {
            let p = if i % 2 == 0 { &probs0 } else { &probs1 };
            for d in 0..4 {
                let u: f64 = rng.random();
                x[(i, d)] = if u < p[d] { 1.0 } else { 0.0 };
            }
        }
        let family = FamilySpec::bernoulli();
        let (state, trace) =
            run_em_state(&init, x.view(), family, &EmConfig::default(), None).unwrap();
        assert!(trace.converged);
        for pair in trace.entries.windows(2) {
            assert!(pair[1].loglik - pair[0].loglik >= -1e-8);
        }
        assert_abs_diff_eq!(state.mixing().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_serializes_as_csv() {
        let trace = EmTrace {
            entries: vec![
                EmTraceEntry {
                    iteration: 1,
                    loglik: -10.5,
                    max_param_delta: 0.25,
                },
                EmTraceEntry {
                    iteration: 2,
                    loglik: -9.0,
                    max_param_delta: 0.0,
                },
            ],
            converged: true,
        };
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,log_likelihood,max_param_delta");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,-1.0500000000000000e1,"));
        assert!(csv.ends_with('\n'));
    }
}
