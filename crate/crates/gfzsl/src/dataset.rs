//! Feature tables, class-attribute tables, and seen/unseen split views.
//!
//! File formats:
//! - Feature CSV: `label,v1,...,vD` per row, no header. Label -1 marks an
//!   unlabeled example.
//! - Attribute CSV: `class_id,a1,...,aK` per row, no header, one row per class.
//! - Packed binary: magic "EFZS", version u16, then D and N as u64, all
//!   little-endian, followed by N*D row-major f64 values and N i64 labels.
//!   Any negative stored label is read as the unlabeled sentinel.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

pub type ClassId = i64;

/// Label sentinel for examples without a class assignment.
pub const UNLABELED: ClassId = -1;

const BINARY_MAGIC: &[u8; 4] = b"EFZS";
const BINARY_VERSION: u16 = 1;

/// N feature rows of dimension D with one class id (or [`UNLABELED`]) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    features: Array2<f64>,
    labels: Vec<ClassId>,
}

impl FeatureTable {
    pub fn new(features: Array2<f64>, labels: Vec<ClassId>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature value {v}"
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l < UNLABELED) {
            return Err(Error::InvalidArgument(format!(
                "negative label {l} (only {UNLABELED} marks unlabeled)"
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn n_examples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim_d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    /// Rows `indices` stacked into a new (len, D) array, order preserved.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim_d()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
        }
        out
    }
}

/// One K-dimensional attribute vector per class, keyed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    ids: Vec<ClassId>,
    attrs: Array2<f64>,
    index: BTreeMap<ClassId, usize>,
}

impl AttributeTable {
    pub fn new(ids: Vec<ClassId>, attrs: Array2<f64>) -> Result<Self> {
        if ids.len() != attrs.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} class ids but {} attribute rows",
                ids.len(),
                attrs.nrows()
            )));
        }
        if let Some(v) = attrs.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite attribute value {v}"
            )));
        }
        let mut index = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            if id < 0 {
                return Err(Error::InvalidArgument(format!("negative class id {id}")));
            }
            if index.insert(id, row).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class id {id}")));
            }
        }
        Ok(Self { ids, attrs, index })
    }

    pub fn n_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn dim_k(&self) -> usize {
        self.attrs.ncols()
    }

    /// Class ids in file order.
    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn row_for(&self, id: ClassId) -> Result<ArrayView1<'_, f64>> {
        match self.index.get(&id) {
            Some(&row) => Ok(self.attrs.row(row)),
            None => Err(Error::UnknownClass(id)),
        }
    }

    /// Attribute vectors for `ids` stacked into a (len, K) array in the given
    /// order.
    pub fn rows_for<I>(&self, ids: I) -> Result<Array2<f64>>
    where
        I: IntoIterator<Item = ClassId>,
    {
        let ids: Vec<ClassId> = ids.into_iter().collect();
        let mut out = Array2::zeros((ids.len(), self.dim_k()));
        for (r, id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&self.row_for(*id)?);
        }
        Ok(out)
    }
}

/// Per-dimension affine rescaling of attribute vectors, fit on a chosen
/// class subset (the seen classes). Dimensions with (near-)zero spread keep
/// their centered value unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrTransform {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl AttrTransform {
    pub fn fit(table: &AttributeTable, ids: &BTreeSet<ClassId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit attribute rescaling on an empty class set".into(),
            ));
        }
        let rows = table.rows_for(ids.iter().copied())?;
        let n = rows.nrows() as f64;
        let mean = rows.sum_axis(ndarray::Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(rows.ncols());
        for row in rows.rows() {
            let d = &row - &mean;
            var += &(&d * &d);
        }
        var /= n;
        let std = var.mapv(|v| {
            let s = v.sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        });
        Ok(Self { mean, std })
    }

    pub fn apply_vec(&self, a: ArrayView1<f64>) -> Array1<f64> {
        (&a - &self.mean) / &self.std
    }

    pub fn apply_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        out
    }
}

/// Partition of classes into seen/unseen plus the example-index buckets that
/// partition induces. Labeled examples of unseen classes are kept in their
/// own bucket: they are excluded from inductive fitting but available to
/// evaluation and few-shot protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    seen_ids: BTreeSet<ClassId>,
    unseen_ids: BTreeSet<ClassId>,
    seen_labeled: Vec<usize>,
    unseen_labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    labels: Vec<ClassId>,
}

enum UnknownLabel {
    Reject,
    Drop,
}

impl SplitView {
    fn bucket(
        labels: &[ClassId],
        seen_ids: BTreeSet<ClassId>,
        unseen_ids: BTreeSet<ClassId>,
        unknown: UnknownLabel,
    ) -> Result<Self> {
        let mut seen_labeled = Vec::new();
        let mut unseen_labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            if label == UNLABELED {
                unlabeled.push(i);
            } else if seen_ids.contains(&label) {
                seen_labeled.push(i);
            } else if unseen_ids.contains(&label) {
                unseen_labeled.push(i);
            } else if matches!(unknown, UnknownLabel::Reject) {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has label {label} outside the seen and unseen sets"
                )));
            }
        }
        Ok(Self {
            seen_ids,
            unseen_ids,
            seen_labeled,
            unseen_labeled,
            unlabeled,
            labels: labels.to_vec(),
        })
    }

    pub fn seen_ids(&self) -> &BTreeSet<ClassId> {
        &self.seen_ids
    }

    pub fn unseen_ids(&self) -> &BTreeSet<ClassId> {
        &self.unseen_ids
    }

    pub fn n_seen(&self) -> usize {
        self.seen_ids.len()
    }

    pub fn n_unseen(&self) -> usize {
        self.unseen_ids.len()
    }

    /// Indices of labeled examples whose class is seen.
    pub fn seen_labeled(&self) -> &[usize] {
        &self.seen_labeled
    }

    /// Indices of labeled examples whose class is unseen.
    pub fn unseen_labeled(&self) -> &[usize] {
        &self.unseen_labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    /// Label snapshot the view was built from, indexed by example.
    pub fn label_of(&self, example: usize) -> ClassId {
        self.labels[example]
    }

    /// Holds out `n_val_classes` of the seen classes, chosen by a seeded
    /// shuffle. The train view treats the held-out classes as pseudo-unseen;
    /// the val view pairs the held-out classes (now acting as seen) with the
    /// original unseen classes. Rows of classes outside a view's two sets
    /// are dropped from that view's buckets.
    pub fn validation_split(&self, n_val_classes: usize, seed: u64) -> Result<(SplitView, SplitView)> {
        let s = self.seen_ids.len();
        if n_val_classes < 1 || n_val_classes >= s {
            return Err(Error::InvalidArgument(format!(
                "n_val_classes must be in [1, {}), got {n_val_classes}",
                s
            )));
        }
        let mut ids: Vec<ClassId> = self.seen_ids.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let val_ids: BTreeSet<ClassId> = ids[..n_val_classes].iter().copied().collect();
        let train_ids: BTreeSet<ClassId> = ids[n_val_classes..].iter().copied().collect();
        let train = SplitView::bucket(
            &self.labels,
            train_ids,
            val_ids.clone(),
            UnknownLabel::Drop,
        )?;
        let val = SplitView::bucket(
            &self.labels,
            val_ids,
            self.unseen_ids.clone(),
            UnknownLabel::Drop,
        )?;
        Ok((train, val))
    }
}

/// Builds a [`SplitView`] after validating that the id sets are non-empty,
/// disjoint, covered by the attribute table, and that every labeled example
/// belongs to one of them.
pub fn make_split(
    features: &FeatureTable,
    attributes: &AttributeTable,
    seen_ids: &BTreeSet<ClassId>,
    unseen_ids: &BTreeSet<ClassId>,
) -> Result<SplitView> {
    if seen_ids.is_empty() {
        return Err(Error::InvalidArgument("seen class set is empty".into()));
    }
    if unseen_ids.is_empty() {
        return Err(Error::InvalidArgument("unseen class set is empty".into()));
    }
    if let Some(id) = seen_ids.intersection(unseen_ids).next() {
        return Err(Error::InvalidArgument(format!(
            "class {id} appears in both the seen and unseen sets (overlap)"
        )));
    }
    for &id in seen_ids.iter().chain(unseen_ids.iter()) {
        if !attributes.contains(id) {
            return Err(Error::UnknownClass(id));
        }
    }
    SplitView::bucket(
        features.labels(),
        seen_ids.clone(),
        unseen_ids.clone(),
        UnknownLabel::Reject,
    )
}

fn load_error(path: &Path, detail: String) -> Error {
    Error::Load {
        path: path.display().to_string(),
        detail,
    }
}

/// Parses `label,v1,...,vD` rows. Blank lines are skipped; line numbers in
/// errors are 1-based over the raw file.
pub fn load_features_csv(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<ClassId> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label: ClassId = label_field.parse().map_err(|_| {
            load_error(path, format!("line {lineno}: bad label {label_field:?}"))
        })?;
        if label < UNLABELED {
            return Err(load_error(
                path,
                format!("line {lineno}: negative label {label} (only {UNLABELED} marks unlabeled)"),
            ));
        }
        let mut count = 0usize;
        for (col, field) in fields.enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                load_error(
                    path,
                    format!("line {lineno}: bad value {field:?} at column {}", col + 2),
                )
            })?;
            if !v.is_finite() {
                return Err(load_error(
                    path,
                    format!(
                        "line {lineno}: non-finite value {field:?} at column {}",
                        col + 2
                    ),
                ));
            }
            rows.push(v);
            count += 1;
        }
        match dim {
            None => {
                if count == 0 {
                    return Err(load_error(
                        path,
                        format!("line {lineno}: row has a label but no feature values"),
                    ));
                }
                dim = Some(count);
            }
            Some(d) if d != count => {
                return Err(load_error(
                    path,
                    format!("line {lineno}: expected {d} values, found {count}"),
                ));
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| load_error(path, "no rows".into()))?;
    let features = Array2::from_shape_vec((labels.len(), dim), rows)
        .expect("row count and dim are consistent by construction");
    FeatureTable::new(features, labels)
}

/// Parses `class_id,a1,...,aK` rows. With `expected_classes` set, the row
/// count must match it exactly.
pub fn load_attributes(
    path: impl AsRef<Path>,
    expected_classes: Option<usize>,
) -> Result<AttributeTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<f64> = Vec::new();
    let mut ids: Vec<ClassId> = Vec::new();
    let mut taken: BTreeSet<ClassId> = BTreeSet::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id_field = fields.next().unwrap_or("").trim();
        let id: ClassId = id_field.parse().map_err(|_| {
            load_error(path, format!("line {lineno}: bad class id {id_field:?}"))
        })?;
        if id < 0 {
            return Err(load_error(
                path,
                format!("line {lineno}: negative class id {id}"),
            ));
        }
        if !taken.insert(id) {
            return Err(load_error(
                path,
                format!("line {lineno}: duplicate class id {id}"),
            ));
        }
        let mut count = 0usize;
        for (col, field) in fields.enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                load_error(
                    path,
                    format!("line {lineno}: bad value {field:?} at column {}", col + 2),
                )
            })?;
            if !v.is_finite() {
                return Err(load_error(
                    path,
                    format!(
                        "line {lineno}: non-finite value {field:?} at column {}",
                        col + 2
                    ),
                ));
            }
            rows.push(v);
            count += 1;
        }
        match dim {
            None => {
                if count == 0 {
                    return Err(load_error(
                        path,
                        format!("line {lineno}: row has a class id but no attribute values"),
                    ));
                }
                dim = Some(count);
            }
            Some(d) if d != count => {
                return Err(load_error(
                    path,
                    format!("line {lineno}: expected {d} values, found {count}"),
                ));
            }
            Some(_) => {}
        }
        ids.push(id);
    }
    let dim = dim.ok_or_else(|| load_error(path, "no rows".into()))?;
    if let Some(expected) = expected_classes {
        if ids.len() != expected {
            return Err(load_error(
                path,
                format!("expected {expected} classes, found {}", ids.len()),
            ));
        }
    }
    let attrs = Array2::from_shape_vec((ids.len(), dim), rows)
        .expect("row count and dim are consistent by construction");
    AttributeTable::new(ids, attrs)
}

/// Reads the packed binary feature format. Errors name the byte offset at
/// which decoding failed.
pub fn load_features_binary(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(load_error(
                path,
                format!(
                    "offset {offset}: file truncated (needs {len} bytes for {what}, found {})",
                    bytes.len().saturating_sub(offset)
                ),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[0..4] != BINARY_MAGIC {
        return Err(load_error(
            path,
            "offset 0: bad magic (expected \"EFZS\")".into(),
        ));
    }
    need(4, 2, "format version")?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BINARY_VERSION {
        return Err(load_error(
            path,
            format!("offset 4: unsupported format version {version}"),
        ));
    }
    need(6, 16, "dimensions")?;
    let dim = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(load_error(path, "no rows".into()));
    }
    if dim == 0 {
        return Err(load_error(path, "offset 6: zero feature dimension".into()));
    }
    let feat_bytes = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| load_error(path, "offset 6: dimensions overflow".into()))?;
    need(22, feat_bytes, "feature data")?;
    let label_off = 22 + feat_bytes;
    need(label_off, n * 8, "label data")?;
    if bytes.len() != label_off + n * 8 {
        return Err(load_error(
            path,
            format!(
                "offset {}: {} trailing bytes after label data",
                label_off + n * 8,
                bytes.len() - label_off - n * 8
            ),
        ));
    }
    let mut values = Vec::with_capacity(n * dim);
    for i in 0..n * dim {
        let off = 22 + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(load_error(
                path,
                format!("offset {off}: non-finite feature value"),
            ));
        }
        values.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = label_off + i * 8;
        let raw = i64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        labels.push(if raw < 0 { UNLABELED } else { raw });
    }
    let features = Array2::from_shape_vec((n, dim), values)
        .expect("length checked against n * dim above");
    FeatureTable::new(features, labels)
}

/// Loads either feature format, telling them apart by the binary magic.
pub fn load_features_auto(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let mut file = std::fs::File::open(path)?;
    let got = file.read(&mut head)?;
    drop(file);
    if got == 4 && &head == BINARY_MAGIC {
        load_features_binary(path)
    } else {
        load_features_csv(path)
    }
}

/// Writes the CSV feature format. Floats use the shortest representation
/// that parses back to the identical bits.
pub fn save_features_csv(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (i, row) in table.features().rows().into_iter().enumerate() {
        write!(out, "{}", table.labels()[i]).unwrap();
        for v in row.iter() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn save_features_binary(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.dim_d() as u64).to_le_bytes());
    out.extend_from_slice(&(table.n_examples() as u64).to_le_bytes());
    for v in table.features().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in table.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn save_attributes_csv(table: &AttributeTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (i, &id) in table.ids().iter().enumerate() {
        write!(out, "{id}").unwrap();
        for v in table.rows_for([id]).unwrap().row(0).iter() {
            write!(out, ",{v}").unwrap();
        }
        let _ = i;
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
