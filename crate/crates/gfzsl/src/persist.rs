//! Versioned textual model files.
//!
//! Layout: a header (format version, creation time, family, regressor,
//! ridge strengths, dimensions, class ids), then named float vectors and
//! matrices printed with 17 significant digits so every f64 round-trips to
//! the exact same bits, then an `end` marker. Two saves of the same model
//! differ only in the `created-unix` line.

use crate::dataset::{AttrTransform, ClassId};
use crate::error::{Error, Result};
use crate::expfam::{BernoulliProduct, ClassDistribution, FamilySpec, GaussianDiag};
use crate::fewshot::FewShotStats;
use crate::model::{BlockRegressor, GfzslConfig, GfzslModel, RegressorKind};
use crate::regression::{KernelSolution, KernelSpec, RidgeSolution};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "gfzsl-model";

fn push_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

fn push_vector(out: &mut String, name: &str, v: ArrayView1<f64>) {
    writeln!(out, "vector {name} {}", v.len()).unwrap();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        push_float(out, *x);
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, name: &str, m: ArrayView2<f64>) {
    writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols()).unwrap();
    for (i, x) in m.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        push_float(out, *x);
    }
    out.push('\n');
}

fn push_distribution(out: &mut String, prefix: &str, id: ClassId, dist: &ClassDistribution) {
    match dist {
        ClassDistribution::Gaussian(g) => {
            push_vector(out, &format!("{prefix}-mean-{id}"), g.mean());
            push_vector(out, &format!("{prefix}-logvar-{id}"), g.log_var());
        }
        ClassDistribution::Bernoulli(b) => {
            push_vector(out, &format!("{prefix}-logits-{id}"), b.logits());
        }
    }
}

fn kernel_text(out: &mut String, spec: KernelSpec) {
    match spec {
        KernelSpec::Linear => out.push_str("linear"),
        KernelSpec::Quadratic => out.push_str("quadratic"),
        KernelSpec::Rbf { gamma } => {
            out.push_str("rbf ");
            push_float(out, gamma);
        }
    }
}

/// Renders a model at a fixed creation timestamp; the output is a pure
/// function of `(model, created_unix)`.
pub fn model_to_string(model: &GfzslModel, created_unix: u64) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(out, "created-unix {created_unix}").unwrap();
    let config = model.config();
    match config.family {
        FamilySpec::GaussianDiag { var_floor } => {
            out.push_str("family gaussian ");
            push_float(&mut out, var_floor);
            out.push('\n');
        }
        FamilySpec::BernoulliProduct { smoothing } => {
            out.push_str("family bernoulli ");
            push_float(&mut out, smoothing);
            out.push('\n');
        }
    }
    match config.regressor {
        RegressorKind::Linear => out.push_str("regressor linear\n"),
        RegressorKind::Kernel(spec) => {
            out.push_str("regressor kernel ");
            kernel_text(&mut out, spec);
            out.push('\n');
        }
    }
    out.push_str("lambda-mu ");
    push_float(&mut out, config.lambda_mu);
    out.push_str("\nlambda-sigma ");
    push_float(&mut out, config.lambda_sigma);
    out.push('\n');
    writeln!(out, "zscore {}", u8::from(config.zscore_attributes)).unwrap();
    writeln!(out, "dims {} {}", model.dim_d(), model.dim_k()).unwrap();

    let seen = model.seen_distributions();
    let unseen = model.unseen_distributions();
    write!(out, "seen {}", seen.len()).unwrap();
    for id in seen.keys() {
        write!(out, " {id}").unwrap();
    }
    out.push('\n');
    write!(out, "unseen {}", unseen.len()).unwrap();
    for id in unseen.keys() {
        write!(out, " {id}").unwrap();
    }
    out.push('\n');

    writeln!(out, "priors {}", model.log_prior().len()).unwrap();
    for (id, lp) in model.log_prior() {
        write!(out, "prior {id} ").unwrap();
        push_float(&mut out, *lp);
        out.push('\n');
    }

    match &model.attr_transform {
        None => out.push_str("attr-transform 0\n"),
        Some(t) => {
            out.push_str("attr-transform 1\n");
            push_vector(&mut out, "at-mean", t.mean.view());
            push_vector(&mut out, "at-std", t.std.view());
        }
    }

    for (id, dist) in seen {
        push_distribution(&mut out, "seen", *id, dist);
    }
    for (id, dist) in unseen {
        push_distribution(&mut out, "unseen", *id, dist);
    }

    writeln!(out, "blocks {}", model.blocks.len()).unwrap();
    for (i, block) in model.blocks.iter().enumerate() {
        match block {
            BlockRegressor::Linear(sol) => {
                write!(out, "block {i} linear ").unwrap();
                push_float(&mut out, sol.lambda());
                out.push('\n');
                push_matrix(&mut out, "weights", sol.weights());
            }
            BlockRegressor::Kernel(sol) => {
                write!(out, "block {i} kernel ").unwrap();
                kernel_text(&mut out, sol.kernel());
                out.push(' ');
                push_float(&mut out, sol.lambda());
                out.push('\n');
                push_matrix(&mut out, "coeffs", sol.coeffs());
                push_matrix(&mut out, "seen-attrs", sol.seen_attrs());
            }
        }
    }

    writeln!(out, "fewshots {}", model.fewshot_prior.len()).unwrap();
    for (id, prior) in &model.fewshot_prior {
        let stats = &model.fewshot_stats[id];
        writeln!(out, "fewshot {id} {}", stats.n()).unwrap();
        push_distribution(&mut out, "fs-prior", *id, prior);
        push_vector(&mut out, &format!("fs-sum-{id}"), stats.sum());
        push_vector(&mut out, &format!("fs-sumsq-{id}"), stats.sumsq());
    }
    out.push_str("end\n");
    out
}

pub fn save_model(model: &GfzslModel, path: impl AsRef<Path>) -> Result<()> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::write(path.as_ref(), model_to_string(model, created))?;
    Ok(())
}

struct Cursor<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            line_no: 0,
        }
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::ModelFormat(format!("line {}: {}", self.line_no, detail.into()))
    }

    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines.next().ok_or_else(|| {
            Error::ModelFormat(format!("unexpected end of file at line {}", self.line_no))
        })
    }

    /// Next line split into fields, with the first field required to match.
    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(&first) if first == tag => Ok(fields[1..].to_vec()),
            _ => Err(self.bad(format!("expected `{tag} ...`, found `{line}`"))),
        }
    }

    fn float(&self, s: &str) -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| self.bad(format!("bad float `{s}`")))?;
        if !v.is_finite() {
            return Err(self.bad(format!("non-finite value `{s}`")));
        }
        Ok(v)
    }

    fn count(&self, s: &str) -> Result<usize> {
        s.parse()
            .map_err(|_| self.bad(format!("bad count `{s}`")))
    }

    fn id(&self, s: &str) -> Result<ClassId> {
        s.parse()
            .map_err(|_| self.bad(format!("bad class id `{s}`")))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|s| self.float(s))
            .collect::<Result<_>>()?;
        if values.len() != expected {
            return Err(self.bad(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        Ok(values)
    }

    fn vector(&mut self, name: &str, expected_len: usize) -> Result<Array1<f64>> {
        let fields = self.tagged("vector")?;
        if fields.len() != 2 || fields[0] != name {
            return Err(self.bad(format!("expected `vector {name} <len>`")));
        }
        let len = self.count(fields[1])?;
        if len != expected_len {
            return Err(self.bad(format!(
                "vector {name} has length {len}, expected {expected_len}"
            )));
        }
        Ok(Array1::from_vec(self.floats(len)?))
    }

    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let fields = self.tagged("matrix")?;
        if fields.len() != 3 || fields[0] != name {
            return Err(self.bad(format!("expected `matrix {name} <rows> <cols>`")));
        }
        let rows = self.count(fields[1])?;
        let cols = self.count(fields[2])?;
        let data = self.floats(rows * cols)?;
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| self.bad(format!("matrix {name}: {e}")))
    }

    fn distribution(
        &mut self,
        family: FamilySpec,
        prefix: &str,
        id: ClassId,
        dim: usize,
    ) -> Result<ClassDistribution> {
        match family {
            FamilySpec::GaussianDiag { .. } => {
                let mean = self.vector(&format!("{prefix}-mean-{id}"), dim)?;
                let log_var = self.vector(&format!("{prefix}-logvar-{id}"), dim)?;
                Ok(ClassDistribution::Gaussian(GaussianDiag::new(
                    mean, log_var,
                )?))
            }
            FamilySpec::BernoulliProduct { .. } => {
                let logits = self.vector(&format!("{prefix}-logits-{id}"), dim)?;
                Ok(ClassDistribution::Bernoulli(BernoulliProduct::new(logits)?))
            }
        }
    }

    fn kernel_spec(&self, fields: &[&str]) -> Result<(KernelSpec, usize)> {
        match fields.first() {
            Some(&"linear") => Ok((KernelSpec::Linear, 1)),
            Some(&"quadratic") => Ok((KernelSpec::Quadratic, 1)),
            Some(&"rbf") => {
                let gamma = self.float(
                    fields
                        .get(1)
                        .ok_or_else(|| self.bad("rbf kernel needs a gamma"))?,
                )?;
                Ok((KernelSpec::Rbf { gamma }, 2))
            }
            other => Err(self.bad(format!("unknown kernel `{}`", other.unwrap_or(&"")))),
        }
    }
}

pub fn model_from_str(text: &str) -> Result<GfzslModel> {
    let mut cur = Cursor::new(text);
    let header = cur.tagged(MAGIC)?;
    if header.len() != 1 {
        return Err(cur.bad("malformed version header"));
    }
    let version: u32 = cur
        .count(header[0])?
        .try_into()
        .map_err(|_| cur.bad("bad version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let created = cur.tagged("created-unix")?;
    if created.len() != 1 {
        return Err(cur.bad("malformed created-unix line"));
    }
    cur.count(created[0])?;

    let fam = cur.tagged("family")?;
    let family = match fam.as_slice() {
        ["gaussian", floor] => FamilySpec::GaussianDiag {
            var_floor: cur.float(floor)?,
        },
        ["bernoulli", smoothing] => FamilySpec::BernoulliProduct {
            smoothing: cur.float(smoothing)?,
        },
        _ => return Err(cur.bad("malformed family line")),
    };
    let reg = cur.tagged("regressor")?;
    let regressor = match reg.as_slice() {
        ["linear"] => RegressorKind::Linear,
        ["kernel", rest @ ..] => {
            let (spec, used) = cur.kernel_spec(rest)?;
            if rest.len() != used {
                return Err(cur.bad("malformed regressor line"));
            }
            RegressorKind::Kernel(spec)
        }
        _ => return Err(cur.bad("malformed regressor line")),
    };
    let lm = cur.tagged("lambda-mu")?;
    let lambda_mu = cur.float(lm.first().ok_or_else(|| cur.bad("missing lambda-mu"))?)?;
    let ls = cur.tagged("lambda-sigma")?;
    let lambda_sigma = cur.float(ls.first().ok_or_else(|| cur.bad("missing lambda-sigma"))?)?;
    let zs = cur.tagged("zscore")?;
    let zscore_attributes = match zs.as_slice() {
        ["0"] => false,
        ["1"] => true,
        _ => return Err(cur.bad("malformed zscore line")),
    };
    let dims = cur.tagged("dims")?;
    if dims.len() != 2 {
        return Err(cur.bad("malformed dims line"));
    }
    let dim_d = cur.count(dims[0])?;
    let dim_k = cur.count(dims[1])?;
    if dim_d == 0 || dim_k == 0 {
        return Err(cur.bad("dimensions must be positive"));
    }

    let read_ids = |cur: &mut Cursor, tag: &str| -> Result<Vec<ClassId>> {
        let fields = cur.tagged(tag)?;
        let count = cur.count(fields.first().ok_or_else(|| cur.bad("missing count"))?)?;
        if fields.len() != count + 1 {
            return Err(cur.bad(format!(
                "{tag} declares {count} ids but lists {}",
                fields.len() - 1
            )));
        }
        fields[1..].iter().map(|s| cur.id(s)).collect()
    };
    let seen_ids = read_ids(&mut cur, "seen")?;
    let unseen_ids = read_ids(&mut cur, "unseen")?;

    let pr = cur.tagged("priors")?;
    let n_priors = cur.count(pr.first().ok_or_else(|| cur.bad("missing count"))?)?;
    let mut log_prior = BTreeMap::new();
    for _ in 0..n_priors {
        let fields = cur.tagged("prior")?;
        if fields.len() != 2 {
            return Err(cur.bad("malformed prior line"));
        }
        log_prior.insert(cur.id(fields[0])?, cur.float(fields[1])?);
    }

    let at = cur.tagged("attr-transform")?;
    let attr_transform = match at.as_slice() {
        ["0"] => None,
        ["1"] => {
            let mean = cur.vector("at-mean", dim_k)?;
            let std = cur.vector("at-std", dim_k)?;
            Some(AttrTransform { mean, std })
        }
        _ => return Err(cur.bad("malformed attr-transform line")),
    };

    let mut seen = BTreeMap::new();
    for id in &seen_ids {
        seen.insert(*id, cur.distribution(family, "seen", *id, dim_d)?);
    }
    let mut unseen = BTreeMap::new();
    for id in &unseen_ids {
        unseen.insert(*id, cur.distribution(family, "unseen", *id, dim_d)?);
    }

    let bl = cur.tagged("blocks")?;
    let n_blocks = cur.count(bl.first().ok_or_else(|| cur.bad("missing count"))?)?;
    let expected_blocks = match family {
        FamilySpec::GaussianDiag { .. } => 2,
        FamilySpec::BernoulliProduct { .. } => 1,
    };
    if n_blocks != expected_blocks {
        return Err(cur.bad(format!(
            "{n_blocks} regression blocks, family needs {expected_blocks}"
        )));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let fields = cur.tagged("block")?;
        if fields.first() != Some(&format!("{i}").as_str()) {
            return Err(cur.bad(format!("expected block {i}")));
        }
        match fields.get(1) {
            Some(&"linear") => {
                let lambda = cur.float(
                    fields
                        .get(2)
                        .ok_or_else(|| cur.bad("missing block lambda"))?,
                )?;
                if !matches!(regressor, RegressorKind::Linear) {
                    return Err(cur.bad("linear block under a kernel regressor"));
                }
                let weights = cur.matrix("weights")?;
                blocks.push(BlockRegressor::Linear(RidgeSolution::new(weights, lambda)));
            }
            Some(&"kernel") => {
                let (spec, used) = cur.kernel_spec(&fields[2..])?;
                let lambda = cur.float(
                    fields
                        .get(2 + used)
                        .ok_or_else(|| cur.bad("missing block lambda"))?,
                )?;
                if regressor != RegressorKind::Kernel(spec) {
                    return Err(cur.bad("block kernel disagrees with the regressor header"));
                }
                let coeffs = cur.matrix("coeffs")?;
                let seen_attrs = cur.matrix("seen-attrs")?;
                blocks.push(BlockRegressor::Kernel(KernelSolution::new(
                    coeffs, seen_attrs, spec, lambda,
                )?));
            }
            _ => return Err(cur.bad("malformed block line")),
        }
    }

    let fs = cur.tagged("fewshots")?;
    let n_fewshots = cur.count(fs.first().ok_or_else(|| cur.bad("missing count"))?)?;
    let mut fewshot_prior = BTreeMap::new();
    let mut fewshot_stats = BTreeMap::new();
    for _ in 0..n_fewshots {
        let fields = cur.tagged("fewshot")?;
        if fields.len() != 2 {
            return Err(cur.bad("malformed fewshot line"));
        }
        let id = cur.id(fields[0])?;
        let n_obs = cur.count(fields[1])?;
        let prior = cur.distribution(family, "fs-prior", id, dim_d)?;
        let sum = cur.vector(&format!("fs-sum-{id}"), dim_d)?;
        let sumsq = cur.vector(&format!("fs-sumsq-{id}"), dim_d)?;
        fewshot_prior.insert(id, prior);
        fewshot_stats.insert(id, FewShotStats::from_raw(n_obs, sum, sumsq)?);
    }

    let end = cur.next()?;
    if end != "end" {
        return Err(cur.bad(format!("expected `end`, found `{end}`")));
    }
    if let Ok(extra) = cur.next() {
        if !extra.trim().is_empty() {
            return Err(cur.bad("trailing content after `end`"));
        }
    }

    let config = GfzslConfig {
        family,
        regressor,
        lambda_mu,
        lambda_sigma,
        zscore_attributes,
    };
    config.validate()?;
    Ok(GfzslModel {
        config,
        dim_d,
        dim_k,
        seen,
        unseen,
        blocks,
        attr_transform,
        log_prior,
        fewshot_prior,
        fewshot_stats,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GfzslModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    model_from_str(&text)
}
