//! Synthetic data with retained ground truth, matching the generative
//! assumptions of the model (and controlled violations of them).
//!
//! Attributes are standard normal; per-class Gaussian parameters come from
//! a true gating map (linear, or degree-2 monomials to make a linear fit
//! misspecified); observations are drawn with per-dimension noise
//! sigma^2 = exp(W_rho a + rho_shift). Unseen-class samples can be offset
//! by a constant vector to simulate domain shift between seen training
//! data and unseen test data.

use crate::dataset::{
    make_split, save_attributes_csv, save_features_binary, save_features_csv, AttributeTable,
    ClassId, FeatureTable, SplitView,
};
use crate::error::{Error, Result};
use crate::expfam::{BernoulliProduct, ClassDistribution, GaussianDiag};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum TrueGating {
    /// Gaussian parameters are linear in the attributes. Weight matrices
    /// may be supplied explicitly (D x K); `None` draws them from the seed.
    Linear {
        w_mu: Option<Array2<f64>>,
        w_rho: Option<Array2<f64>>,
    },
    /// Parameters are linear in all degree-<=2 monomials of the attributes,
    /// drawn from the seed. A linear fit is then misspecified while a
    /// quadratic-kernel fit can be exact.
    Quadratic,
}

impl TrueGating {
    pub fn linear() -> Self {
        TrueGating::Linear {
            w_mu: None,
            w_rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seen: usize,
    pub unseen: usize,
    pub attr_dim: usize,
    pub feat_dim: usize,
    pub samples_per_class: usize,
    pub gating: TrueGating,
    /// Spread of the true mean-gating weights.
    pub mean_scale: f64,
    /// Spread of the true log-variance-gating weights.
    pub rho_scale: f64,
    /// Constant added to every true log-variance; controls the typical
    /// observation noise level, e.g. `ln(0.01)` gives sigma = 0.1.
    pub rho_shift: f64,
    /// Added to every unseen-class sample after drawing.
    pub domain_shift: Option<Array1<f64>>,
    pub seed: u64,
}

impl SynthConfig {
    /// Compact well-behaved configuration for tests: linear gating, unit
    /// noise, no shift.
    pub fn small_test(
        seen: usize,
        unseen: usize,
        attr_dim: usize,
        feat_dim: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        Self {
            seen,
            unseen,
            attr_dim,
            feat_dim,
            samples_per_class,
            gating: TrueGating::linear(),
            mean_scale: 2.0,
            rho_scale: 0.1,
            rho_shift: 0.0,
            domain_shift: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seen", self.seen),
            ("unseen", self.unseen),
            ("attr_dim", self.attr_dim),
            ("feat_dim", self.feat_dim),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("mean_scale", self.mean_scale),
            ("rho_scale", self.rho_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if !self.rho_shift.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rho_shift must be finite, got {}",
                self.rho_shift
            )));
        }
        if let Some(shift) = &self.domain_shift {
            if shift.len() != self.feat_dim {
                return Err(Error::ShapeMismatch(format!(
                    "domain shift has {} entries but feat_dim is {}",
                    shift.len(),
                    self.feat_dim
                )));
            }
        }
        if let TrueGating::Linear { w_mu, w_rho } = &self.gating {
            for (name, w) in [("w_mu", w_mu), ("w_rho", w_rho)] {
                if let Some(w) = w {
                    if w.nrows() != self.feat_dim || w.ncols() != self.attr_dim {
                        return Err(Error::ShapeMismatch(format!(
                            "{name} must be {}x{}, got {}x{}",
                            self.feat_dim,
                            self.attr_dim,
                            w.nrows(),
                            w.ncols()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The generator's retained truth: gating weights over the (possibly
/// expanded) attribute basis and the exact per-class Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub w_mu: Array2<f64>,
    pub w_rho: Array2<f64>,
    pub class_params: BTreeMap<ClassId, GaussianDiag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub features: FeatureTable,
    pub attributes: AttributeTable,
    pub split: SplitView,
    pub truth: GroundTruth,
}

/// All degree-<=2 monomials of `a`: constant, linear, then products
/// a_i a_j for i <= j.
fn monomials(a: ArrayView1<f64>) -> Array1<f64> {
    let k = a.len();
    let mut out = Vec::with_capacity(1 + k + k * (k + 1) / 2);
    out.push(1.0);
    out.extend(a.iter().copied());
    for i in 0..k {
        for j in i..k {
            out.push(a[i] * a[j]);
        }
    }
    Array1::from_vec(out)
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_classes = config.seen + config.unseen;
    let (k, d, spc) = (config.attr_dim, config.feat_dim, config.samples_per_class);

    let attr_rows = draw_matrix(&mut rng, n_classes, k, 1.0);
    let ids: Vec<ClassId> = (0..n_classes as ClassId).collect();
    let attributes = AttributeTable::new(ids.clone(), attr_rows)?;

    let basis_len = match config.gating {
        TrueGating::Linear { .. } => k,
        TrueGating::Quadratic => 1 + k + k * (k + 1) / 2,
    };
    let (w_mu, w_rho) = match &config.gating {
        TrueGating::Linear { w_mu, w_rho } => {
            // Draw even when explicit weights are given so the sample stream
            // does not depend on which ones were supplied.
            let drawn_mu = draw_matrix(&mut rng, d, basis_len, config.mean_scale);
            let drawn_rho = draw_matrix(&mut rng, d, basis_len, config.rho_scale);
            (
                w_mu.clone().unwrap_or(drawn_mu),
                w_rho.clone().unwrap_or(drawn_rho),
            )
        }
        TrueGating::Quadratic => (
            draw_matrix(&mut rng, d, basis_len, config.mean_scale),
            draw_matrix(&mut rng, d, basis_len, config.rho_scale),
        ),
    };

    let mut class_params = BTreeMap::new();
    for &id in &ids {
        let a = attributes.row_for(id)?;
        let phi = match config.gating {
            TrueGating::Linear { .. } => a.to_owned(),
            TrueGating::Quadratic => monomials(a),
        };
        let mean = w_mu.dot(&phi);
        let log_var = w_rho.dot(&phi) + config.rho_shift;
        class_params.insert(id, GaussianDiag::new(mean, log_var)?);
    }

    let mut rows = Array2::<f64>::zeros((n_classes * spc, d));
    let mut labels = Vec::with_capacity(n_classes * spc);
    for (c, &id) in ids.iter().enumerate() {
        let params = &class_params[&id];
        let sigma = params.var().mapv(f64::sqrt);
        let shifted = c >= config.seen;
        for r in 0..spc {
            let mut row = rows.row_mut(c * spc + r);
            for dd in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let mut v = params.mean()[dd] + sigma[dd] * z;
                if shifted {
                    if let Some(shift) = &config.domain_shift {
                        v += shift[dd];
                    }
                }
                row[dd] = v;
            }
            labels.push(id);
        }
    }
    let features = FeatureTable::new(rows, labels)?;

    let seen_ids: BTreeSet<ClassId> = ids[..config.seen].iter().copied().collect();
    let unseen_ids: BTreeSet<ClassId> = ids[config.seen..].iter().copied().collect();
    let split = make_split(&features, &attributes, &seen_ids, &unseen_ids)?;

    Ok(SynthData {
        features,
        attributes,
        split,
        truth: GroundTruth {
            w_mu,
            w_rho,
            class_params,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySynthData {
    pub features: FeatureTable,
    pub attributes: AttributeTable,
    pub split: SplitView,
    /// True per-class logits behind the sampled bits.
    pub truth_logits: BTreeMap<ClassId, ClassDistribution>,
}

/// Binary counterpart of [`generate`]: per-class Bernoulli probabilities
/// are sigmoid(W a) with W drawn at `logit_scale` spread.
pub fn generate_binary(
    seen: usize,
    unseen: usize,
    attr_dim: usize,
    feat_dim: usize,
    samples_per_class: usize,
    logit_scale: f64,
    seed: u64,
) -> Result<BinarySynthData> {
    for (name, v) in [
        ("seen", seen),
        ("unseen", unseen),
        ("attr_dim", attr_dim),
        ("feat_dim", feat_dim),
        ("samples_per_class", samples_per_class),
    ] {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
    }
    if !(logit_scale >= 0.0) || !logit_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "logit_scale must be non-negative and finite, got {logit_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = seen + unseen;
    let attr_rows = draw_matrix(&mut rng, n_classes, attr_dim, 1.0);
    let ids: Vec<ClassId> = (0..n_classes as ClassId).collect();
    let attributes = AttributeTable::new(ids.clone(), attr_rows)?;
    let w_theta = draw_matrix(&mut rng, feat_dim, attr_dim, logit_scale);

    let mut truth_logits = BTreeMap::new();
    let mut rows = Array2::<f64>::zeros((n_classes * samples_per_class, feat_dim));
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for (c, &id) in ids.iter().enumerate() {
        let logits = w_theta.dot(&attributes.row_for(id)?);
        let probs = logits.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        for r in 0..samples_per_class {
            let mut row = rows.row_mut(c * samples_per_class + r);
            for dd in 0..feat_dim {
                let u: f64 = rng.random();
                row[dd] = if u < probs[dd] { 1.0 } else { 0.0 };
            }
            labels.push(id);
        }
        truth_logits.insert(id, ClassDistribution::Bernoulli(BernoulliProduct::new(logits)?));
    }
    let features = FeatureTable::new(rows, labels)?;
    let seen_ids: BTreeSet<ClassId> = ids[..seen].iter().copied().collect();
    let unseen_ids: BTreeSet<ClassId> = ids[seen..].iter().copied().collect();
    let split = make_split(&features, &attributes, &seen_ids, &unseen_ids)?;
    Ok(BinarySynthData {
        features,
        attributes,
        split,
        truth_logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFileFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub attributes: PathBuf,
    pub seen: PathBuf,
    pub unseen: PathBuf,
}

/// Writes a generated dataset in the dataset module's file formats plus one
/// class-id list per line for each side of the split.
pub fn write_dataset(
    features: &FeatureTable,
    attributes: &AttributeTable,
    split: &SplitView,
    dir: impl AsRef<Path>,
    format: FeatureFileFormat,
) -> Result<DatasetPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let features_path = match format {
        FeatureFileFormat::Csv => {
            let p = dir.join("features.csv");
            save_features_csv(features, &p)?;
            p
        }
        FeatureFileFormat::Binary => {
            let p = dir.join("features.bin");
            save_features_binary(features, &p)?;
            p
        }
    };
    let attributes_path = dir.join("attributes.csv");
    save_attributes_csv(attributes, &attributes_path)?;
    let mut seen_text = String::new();
    for id in split.seen_ids() {
        writeln!(seen_text, "{id}").unwrap();
    }
    let mut unseen_text = String::new();
    for id in split.unseen_ids() {
        writeln!(unseen_text, "{id}").unwrap();
    }
    let seen_path = dir.join("seen.txt");
    let unseen_path = dir.join("unseen.txt");
    std::fs::write(&seen_path, seen_text)?;
    std::fs::write(&unseen_path, unseen_text)?;
    Ok(DatasetPaths {
        features: features_path,
        attributes: attributes_path,
        seen: seen_path,
        unseen: unseen_path,
    })
}
