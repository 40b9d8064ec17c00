//! Representation sets, their on-disk layout, and stratified splitting.
//!
//! One extraction is one directory: a float32 NPY matrix, one int64 NPY
//! array per labelled attribute, an optional stratum-id array, and a JSON
//! manifest tying them together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::rng;

/// Label attribute holding the decoder's target token.
pub const TARGET: &str = "target";
/// Label attribute holding the prompt context id.
pub const CONTEXT: &str = "context";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Encoder,
    Adapter,
    LlmMid,
    LlmFinal,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawTag {
    Modal,
    Text,
}

impl LawTag {
    pub fn name(self) -> &'static str {
        match self {
            LawTag::Modal => "modal",
            LawTag::Text => "text",
        }
    }
}

/// N pooled representation vectors with categorical labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    data: Array2<f32>,
    labels: BTreeMap<String, Vec<usize>>,
    classes: BTreeMap<String, usize>,
    label_vocab: BTreeMap<String, Vec<String>>,
    stratum_ids: Option<Vec<usize>>,
    pub layer_tag: LayerTag,
    pub law_tag: LawTag,
}

impl EmbeddingSet {
    pub fn new(data: Array2<f32>, layer_tag: LayerTag, law_tag: LawTag) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Empty);
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            data,
            labels: BTreeMap::new(),
            classes: BTreeMap::new(),
            label_vocab: BTreeMap::new(),
            stratum_ids: None,
            layer_tag,
            law_tag,
        })
    }

    /// Build from `f64` features, rounding to the stored float32 precision.
    pub fn from_f64(data: &Array2<f64>, layer_tag: LayerTag, law_tag: LawTag) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), layer_tag, law_tag)
    }

    /// Attach a label array. Ids must be dense: every id in `0..=max` occurs.
    pub fn with_labels(mut self, attribute: &str, ids: Vec<usize>) -> Result<Self> {
        let classes = check_dense(attribute, &ids, None)?;
        self.insert_labels(attribute, ids, classes)?;
        Ok(self)
    }

    /// Attach a label array with an explicit class count (ids in `0..classes`,
    /// not every class need occur).
    pub fn with_labels_k(mut self, attribute: &str, ids: Vec<usize>, classes: usize) -> Result<Self> {
        check_dense(attribute, &ids, Some(classes))?;
        self.insert_labels(attribute, ids, classes)?;
        Ok(self)
    }

    pub fn with_vocab(mut self, attribute: &str, vocab: Vec<String>) -> Result<Self> {
        let ids = self
            .labels
            .get(attribute)
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))?;
        check_dense(attribute, ids, Some(vocab.len()))?;
        self.classes.insert(attribute.to_string(), vocab.len());
        self.label_vocab.insert(attribute.to_string(), vocab);
        Ok(self)
    }

    pub fn with_strata(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::LabelLength {
                attribute: "stratum_ids".into(),
                expected: self.len(),
                found: ids.len(),
            });
        }
        self.stratum_ids = Some(ids);
        Ok(self)
    }

    fn insert_labels(&mut self, attribute: &str, ids: Vec<usize>, classes: usize) -> Result<()> {
        if ids.len() != self.len() {
            return Err(Error::LabelLength {
                attribute: attribute.to_string(),
                expected: self.len(),
                found: ids.len(),
            });
        }
        self.labels.insert(attribute.to_string(), ids);
        self.classes.insert(attribute.to_string(), classes);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    /// Features widened to `f64` for numerical work.
    pub fn features(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn labels(&self, attribute: &str) -> Result<&[usize]> {
        self.labels
            .get(attribute)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))
    }

    pub fn classes(&self, attribute: &str) -> Result<usize> {
        self.classes
            .get(attribute)
            .copied()
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn vocab(&self, attribute: &str) -> Option<&[String]> {
        self.label_vocab.get(attribute).map(Vec::as_slice)
    }

    pub fn stratum_ids(&self) -> Option<&[usize]> {
        self.stratum_ids.as_deref()
    }

    pub fn targets(&self) -> Result<&[usize]> {
        self.labels(TARGET)
    }

    /// Context id per sample; a set without a context attribute has a single
    /// context 0.
    pub fn contexts(&self) -> Vec<usize> {
        self.labels
            .get(CONTEXT)
            .cloned()
            .unwrap_or_else(|| vec![0; self.len()])
    }

    pub fn num_contexts(&self) -> usize {
        self.classes.get(CONTEXT).copied().unwrap_or(1)
    }

    /// Same labels, new feature matrix of identical shape.
    pub fn with_data(&self, data: Array2<f32>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::ShapeMismatch {
                what: "replacement data".into(),
                expected: vec![self.len(), self.dim()],
                found: vec![data.nrows(), data.ncols()],
            });
        }
        let mut out = Self::new(data, self.layer_tag, self.law_tag)?;
        out.labels = self.labels.clone();
        out.classes = self.classes.clone();
        out.label_vocab = self.label_vocab.clone();
        out.stratum_ids = self.stratum_ids.clone();
        Ok(out)
    }

    /// Rows at `indices`, in that order. Class counts are preserved even if a
    /// class is absent from the subset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let data = self.data.select(Axis(0), indices);
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            data,
            labels: self.labels.iter().map(|(k, v)| (k.clone(), pick(v))).collect(),
            classes: self.classes.clone(),
            label_vocab: self.label_vocab.clone(),
            stratum_ids: self.stratum_ids.as_ref().map(pick),
            layer_tag: self.layer_tag,
            law_tag: self.law_tag,
        }
    }

    /// Stack two sets row-wise, keeping the attributes both carry.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(self.dim(), other.dim()));
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("same width");
        let mut out = Self::new(data, self.layer_tag, self.law_tag)?;
        for (name, ids) in &self.labels {
            if let Some(rest) = other.labels.get(name) {
                let k = self.classes[name].max(other.classes[name]);
                out.labels.insert(name.clone(), ids.iter().chain(rest).copied().collect());
                out.classes.insert(name.clone(), k);
            }
        }
        if let (Some(a), Some(b)) = (&self.stratum_ids, &other.stratum_ids) {
            out.stratum_ids = Some(a.iter().chain(b).copied().collect());
        }
        Ok(out)
    }
}

fn check_dense(attribute: &str, ids: &[usize], classes: Option<usize>) -> Result<usize> {
    let max = ids.iter().copied().max().unwrap_or(0);
    match classes {
        Some(k) => {
            if ids.iter().any(|&i| i >= k) {
                return Err(Error::NonDenseLabels {
                    attribute: attribute.to_string(),
                    classes: k,
                    reason: format!("id {max} exceeds the declared vocabulary"),
                });
            }
            Ok(k)
        }
        None => {
            let mut seen = vec![false; max + 1];
            for &i in ids {
                seen[i] = true;
            }
            if let Some(gap) = seen.iter().position(|s| !s) {
                return Err(Error::NonDenseLabels {
                    attribute: attribute.to_string(),
                    classes: max + 1,
                    reason: format!("id {gap} never occurs"),
                });
            }
            Ok(max + 1)
        }
    }
}

/// JSON manifest describing one extraction directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub data: String,
    pub labels: BTreeMap<String, String>,
    pub layer_tag: LayerTag,
    pub law_tag: LawTag,
    pub dtype: String,
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_vocab: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum_ids: Option<String>,
}

fn read_ids(path: &Path, attribute: &str) -> Result<Vec<usize>> {
    let arr = npy::read(path)?;
    let raw = arr.to_i64().ok_or_else(|| Error::Npy {
        path: path.to_path_buf(),
        reason: format!("labels must be int64, found {:?}", arr.dtype),
    })?;
    if arr.shape.len() != 1 {
        return Err(Error::ShapeMismatch {
            what: format!("labels `{attribute}`"),
            expected: vec![raw.len()],
            found: arr.shape.clone(),
        });
    }
    raw.into_iter()
        .map(|v| {
            usize::try_from(v).map_err(|_| Error::NonDenseLabels {
                attribute: attribute.to_string(),
                classes: 0,
                reason: format!("negative id {v}"),
            })
        })
        .collect()
}

/// Load and validate an extraction directory from its manifest.
pub fn load_embedding_set(manifest_path: &Path) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.dtype != "float32" {
        return Err(Error::Manifest {
            path: manifest_path.to_path_buf(),
            reason: format!("dtype must be float32, found {}", manifest.dtype),
        });
    }

    let data_path = root.join(&manifest.data);
    let arr = npy::read(&data_path)?;
    if arr.shape != manifest.shape {
        return Err(Error::ShapeMismatch {
            what: data_path.display().to_string(),
            expected: manifest.shape.to_vec(),
            found: arr.shape.clone(),
        });
    }
    let values = arr.to_f32().ok_or_else(|| Error::Npy {
        path: data_path.clone(),
        reason: format!("data must be float32, found {:?}", arr.dtype),
    })?;
    let data = Array2::from_shape_vec((manifest.shape[0], manifest.shape[1]), values)
        .expect("shape checked");
    let mut set = EmbeddingSet::new(data, manifest.layer_tag, manifest.law_tag)?;

    let vocab = manifest.label_vocab.clone().unwrap_or_default();
    for (name, file) in &manifest.labels {
        let ids = read_ids(&root.join(file), name)?;
        set = match vocab.get(name) {
            Some(v) => set
                .with_labels_k(name, ids, v.len())?
                .with_vocab(name, v.clone())?,
            None => set.with_labels(name, ids)?,
        };
    }
    if let Some(file) = &manifest.stratum_ids {
        let ids = read_ids(&root.join(file), "stratum_ids")?;
        set = set.with_strata(ids)?;
    }
    Ok(set)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write `set` into `dir` (created if needed). Returns the manifest path.
pub fn write_embedding_set(set: &EmbeddingSet, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat: Vec<f32> = set.data.iter().copied().collect();
    npy::write_f32(&dir.join("data.npy"), &[set.len(), set.dim()], &flat)?;

    let mut labels = BTreeMap::new();
    for (name, ids) in &set.labels {
        let file = format!("labels_{}.npy", file_stem(name));
        let ids: Vec<i64> = ids.iter().map(|&i| i as i64).collect();
        npy::write_i64(&dir.join(&file), &[ids.len()], &ids)?;
        labels.insert(name.clone(), file);
    }
    let stratum_ids = match &set.stratum_ids {
        Some(ids) => {
            let ids: Vec<i64> = ids.iter().map(|&i| i as i64).collect();
            npy::write_i64(&dir.join("strata.npy"), &[ids.len()], &ids)?;
            Some("strata.npy".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        data: "data.npy".into(),
        labels,
        layer_tag: set.layer_tag,
        law_tag: set.law_tag,
        dtype: "float32".into(),
        shape: [set.len(), set.dim()],
        label_vocab: (!set.label_vocab.is_empty()).then(|| set.label_vocab.clone()),
        stratum_ids,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Modal and text samples sharing one (context, target) stratum structure.
#[derive(Debug, Clone)]
pub struct PairedLaws {
    pub modal: EmbeddingSet,
    pub text: EmbeddingSet,
}

impl PairedLaws {
    pub fn new(modal: EmbeddingSet, text: EmbeddingSet) -> Result<Self> {
        let laws = Self { modal, text };
        laws.check()?;
        Ok(laws)
    }

    /// Re-check the shared-marginal invariant: identical stratum multisets,
    /// and at least two samples per stratum in each law.
    pub fn check(&self) -> Result<()> {
        if self.modal.dim() != self.text.dim() {
            return Err(Error::DimensionMismatch(self.modal.dim(), self.text.dim()));
        }
        let m = self.modal.stratum_ids().ok_or(Error::MissingStrata("modal"))?;
        let t = self.text.stratum_ids().ok_or(Error::MissingStrata("text"))?;
        let (mut ms, mut ts) = (m.to_vec(), t.to_vec());
        ms.sort_unstable();
        ts.sort_unstable();
        if ms != ts {
            return Err(Error::StratumMismatch);
        }
        for (stratum, idx) in group_by_id(m) {
            if idx.len() < 2 {
                return Err(Error::SparseStratum {
                    stratum,
                    law: "modal",
                    count: idx.len(),
                    required: 2,
                });
            }
        }
        Ok(())
    }

    /// `(stratum, modal rows, text rows)` for every stratum, ascending.
    pub fn strata(&self) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
        let m = group_by_id(self.modal.stratum_ids().expect("checked"));
        let t = group_by_id(self.text.stratum_ids().expect("checked"));
        m.into_iter()
            .zip(t)
            .map(|((s, mi), (_, ti))| (s, mi, ti))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.modal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modal.is_empty()
    }

    /// Both laws stacked (modal rows first).
    pub fn pooled(&self) -> EmbeddingSet {
        self.modal.concat(&self.text).expect("dimensions checked")
    }
}

/// Group row indices by id, ascending by id.
pub fn group_by_id(ids: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in ids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    groups
}

/// A stratified train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    #[serde(skip)]
    fraction_bits: u64,
}

impl SplitPlan {
    pub fn fraction(&self) -> f64 {
        f64::from_bits(self.fraction_bits)
    }
}

/// Per-class shuffle, then hold out `round(n_c * (1 - fraction))` samples of
/// each class (at least one in each side).
pub fn stratified_split(
    set: &EmbeddingSet,
    attribute: &str,
    seed: u64,
    fraction: f64,
) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let labels = set.labels(attribute)?;
    let mut rng = rng::stream(seed, rng::streams::SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in group_by_id(labels) {
        if idx.len() < 2 {
            return Err(Error::UnsplittableClass {
                attribute: attribute.to_string(),
                class,
                count: idx.len(),
                required: 2,
            });
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_test = ((n as f64) * (1.0 - fraction)).round().clamp(1.0, (n - 1) as f64) as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train_idx: train,
        test_idx: test,
        seed,
        fraction_bits: fraction.to_bits(),
    })
}

/// Standardise `apply_to` with the column statistics of `train`
/// (population std; zero-variance columns keep std 1).
pub fn zscore_normalize(
    train: &Array2<f64>,
    apply_to: &Array2<f64>,
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    if train.nrows() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            found: train.nrows(),
        });
    }
    if train.ncols() != apply_to.ncols() {
        return Err(Error::DimensionMismatch(train.ncols(), apply_to.ncols()));
    }
    let mean = train.mean_axis(Axis(0)).expect("nonempty");
    let std = train
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let out = (apply_to - &mean) / &std;
    Ok((out, mean, std))
}
