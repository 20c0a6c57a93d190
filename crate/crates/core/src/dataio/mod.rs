//! On-disk feature datasets: a JSON manifest plus headerless little-endian
//! blobs (`*.f32` row-major features, `*.u32` labels).
//!
//! Target-domain labels are never handed out directly. They sit behind
//! [`HiddenLabels`], which counts every oracle query and evaluation read so
//! tests can audit that the trainer never peeks.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{norm, Matrix};

pub use synth::{gen_synthetic, SynthConfig};

pub const FORMAT_VERSION: &str = "modsep/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub role: DomainRole,
    pub count: usize,
    pub features_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<PathBuf>,
    /// Labels present on disk but reserved for the annotation oracle and
    /// final evaluation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hidden: bool,
    #[serde(default)]
    pub aug_files: Vec<PathBuf>,
    /// Optional per-sample pointer to the original image, shown to annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_refs: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub d_v: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub text_features_file: PathBuf,
    pub domains: Vec<DomainEntry>,
}

impl DatasetManifest {
    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        if self.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported version {:?}, expected {FORMAT_VERSION:?}",
                self.version
            )));
        }
        if self.num_classes < 2 {
            return Err(bad(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.d_v == 0 {
            return Err(bad("d_v must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate domain names".into()));
        }
        for d in &self.domains {
            if d.role == DomainRole::Source && d.labels_file.is_none() {
                return Err(bad(format!("source domain {:?} has no labels_file", d.name)));
            }
            if d.role == DomainRole::Source && d.hidden {
                return Err(bad(format!("source domain {:?} cannot hide its labels", d.name)));
            }
            if let Some(media) = &d.media_refs {
                if media.len() != d.count {
                    return Err(bad(format!(
                        "domain {:?}: {} media refs for {} samples",
                        d.name,
                        media.len(),
                        d.count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth labels of a target domain, readable only through audited
/// accessors.
#[derive(Debug)]
pub struct HiddenLabels {
    labels: Vec<u32>,
    oracle_queries: AtomicUsize,
    evaluation_reads: AtomicUsize,
}

impl HiddenLabels {
    pub fn new(labels: Vec<u32>) -> Self {
        Self {
            labels,
            oracle_queries: AtomicUsize::new(0),
            evaluation_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Annotation-oracle access to a single label.
    pub fn query(&self, index: usize) -> Option<u32> {
        let label = self.labels.get(index).copied();
        if label.is_some() {
            self.oracle_queries.fetch_add(1, Ordering::Relaxed);
        }
        label
    }

    /// Bulk access for accuracy reporting; never feeds back into training.
    pub fn for_evaluation(&self) -> &[u32] {
        self.evaluation_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn oracle_queries(&self) -> usize {
        self.oracle_queries.load(Ordering::Relaxed)
    }

    pub fn evaluation_reads(&self) -> usize {
        self.evaluation_reads.load(Ordering::Relaxed)
    }

    fn raw(&self) -> &[u32] {
        &self.labels
    }
}

#[derive(Clone, Debug)]
pub struct DomainData {
    pub entry: DomainEntry,
    pub features: Matrix,
    labels: Option<Vec<u32>>,
    hidden: Option<Arc<HiddenLabels>>,
    pub aug_views: Vec<Matrix>,
}

impl DomainData {
    pub fn name(&self) -> &str {
        &self.entry.name
    }

    pub fn role(&self) -> DomainRole {
        self.entry.role
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Visible labels (source domains only).
    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn hidden_labels(&self) -> Option<&Arc<HiddenLabels>> {
        self.hidden.as_ref()
    }

    pub fn media_ref(&self, index: usize) -> Option<&str> {
        self.entry
            .media_refs
            .as_ref()
            .and_then(|m| m.get(index))
            .map(String::as_str)
    }
}

/// Immutable feature dataset.
#[derive(Clone, Debug)]
pub struct FeatureDataset {
    pub manifest: DatasetManifest,
    pub text_features: Matrix,
    domains: Vec<DomainData>,
}

impl PartialEq for FeatureDataset {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.text_features == other.text_features
            && self.domains.len() == other.domains.len()
            && self.domains.iter().zip(&other.domains).all(|(a, b)| {
                a.entry == b.entry
                    && a.features == b.features
                    && a.labels == b.labels
                    && a.aug_views == b.aug_views
                    && a.hidden.as_ref().map(|h| h.raw()) == b.hidden.as_ref().map(|h| h.raw())
            })
    }
}

impl FeatureDataset {
    /// Assembles a dataset from in-memory parts. `labels` holds visible labels
    /// for sources and hidden ground truth for targets.
    pub fn from_parts(
        manifest: DatasetManifest,
        text_features: Matrix,
        parts: Vec<(Matrix, Option<Vec<u32>>, Vec<Matrix>)>,
    ) -> Result<Self> {
        let origin = Path::new("<memory>");
        manifest.validate(origin)?;
        if parts.len() != manifest.domains.len() {
            return Err(Error::Manifest {
                path: origin.into(),
                reason: format!("{} domain payloads for {} entries", parts.len(), manifest.domains.len()),
            });
        }
        if text_features.shape() != (manifest.num_classes, manifest.d_v) {
            return Err(Error::shape(
                "text features",
                format!("{}x{}", manifest.num_classes, manifest.d_v),
                format!("{}x{}", text_features.rows(), text_features.cols()),
            ));
        }
        let mut domains = Vec::with_capacity(parts.len());
        for (entry, (features, labels, aug_views)) in manifest.domains.iter().zip(parts) {
            let expect = (entry.count, manifest.d_v);
            if features.shape() != expect || aug_views.iter().any(|a| a.shape() != expect) {
                return Err(Error::shape(
                    "domain features",
                    format!("{}x{}", expect.0, expect.1),
                    format!("{}x{}", features.rows(), features.cols()),
                ));
            }
            if let Some(l) = &labels {
                if l.len() != entry.count {
                    return Err(Error::shape("domain labels", entry.count, l.len()));
                }
                if let Some((i, &bad)) = l.iter().enumerate().find(|(_, &v)| v as usize >= manifest.num_classes) {
                    return Err(Error::LabelRange {
                        path: entry.labels_file.clone().unwrap_or_default(),
                        index: i,
                        label: bad,
                        num_classes: manifest.num_classes,
                    });
                }
            }
            domains.push(DomainData::assemble(entry.clone(), features, labels, aug_views));
        }
        Ok(Self {
            manifest,
            text_features,
            domains,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn d_v(&self) -> usize {
        self.manifest.d_v
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn domains(&self) -> &[DomainData] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&DomainData> {
        self.domains.iter().find(|d| d.entry.name == name)
    }

    pub fn by_role(&self, role: DomainRole) -> impl Iterator<Item = &DomainData> {
        self.domains.iter().filter(move |d| d.entry.role == role)
    }

    /// Returns a stored augmented view when one exists, otherwise the feature
    /// perturbed by Gaussian noise with `σ = 0.1·‖f‖/√d`.
    pub fn augment<R: Rng + ?Sized>(&self, domain: &str, index: usize, rng: &mut R) -> Result<Vec<f32>> {
        let d = self
            .domain(domain)
            .ok_or_else(|| Error::Config(format!("unknown domain {domain:?}")))?;
        if index >= d.len() {
            return Err(Error::Config(format!(
                "sample {index} out of range for domain {domain:?} ({} samples)",
                d.len()
            )));
        }
        Ok(augment_row(d, index, rng))
    }
}

pub(crate) fn augment_row<R: Rng + ?Sized>(d: &DomainData, index: usize, rng: &mut R) -> Vec<f32> {
    match d.aug_views.len() {
        0 => {
            let f = d.features.row(index);
            let sigma = 0.1 * norm(f) / (f.len() as f64).sqrt();
            f.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    (f64::from(v) + sigma * z) as f32
                })
                .collect()
        }
        1 => d.aug_views[0].row(index).to_vec(),
        n => d.aug_views[rng.random_range(0..n)].row(index).to_vec(),
    }
}

impl DomainData {
    fn assemble(entry: DomainEntry, features: Matrix, labels: Option<Vec<u32>>, aug_views: Vec<Matrix>) -> Self {
        let (labels, hidden) = match (entry.role, labels) {
            (DomainRole::Source, l) => (l, None),
            (DomainRole::Target, l) => (None, l.map(|l| Arc::new(HiddenLabels::new(l)))),
        };
        Self {
            entry,
            features,
            labels,
            hidden,
            aug_views,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_blob(path: &Path, expected_bytes: u64) -> Result<Vec<u8>> {
    let meta = fs::metadata(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if meta.len() != expected_bytes {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected_bytes,
            found: meta.len(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_blob(path, 4 * (rows * cols) as u64)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    Ok(Matrix::from_vec_unchecked(rows, cols, data))
}

fn read_u32_labels(path: &Path, count: usize, num_classes: usize) -> Result<Vec<u32>> {
    let bytes = read_blob(path, 4 * count as u64)?;
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
        return Err(Error::LabelRange {
            path: path.to_path_buf(),
            index,
            label,
            num_classes,
        });
    }
    Ok(labels)
}

pub(crate) fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_u32(path: &Path, data: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and validates a dataset. `path` may name the manifest itself or the
/// directory holding `manifest.json`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(manifest_path.clone()),
        _ => Error::io(&manifest_path, e),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    manifest.validate(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (k, d) = (manifest.num_classes, manifest.d_v);

    let text_features = read_f32_matrix(&resolve(base, &manifest.text_features_file), k, d)?;
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        let features = read_f32_matrix(&resolve(base, &entry.features_file), entry.count, d)?;
        let labels = entry
            .labels_file
            .as_ref()
            .map(|p| read_u32_labels(&resolve(base, p), entry.count, k))
            .transpose()?;
        let aug_views = entry
            .aug_files
            .iter()
            .map(|p| read_f32_matrix(&resolve(base, p), entry.count, d))
            .collect::<Result<Vec<_>>>()?;
        domains.push(DomainData::assemble(entry.clone(), features, labels, aug_views));
    }
    Ok(FeatureDataset {
        manifest,
        text_features,
        domains,
    })
}

/// Writes the manifest and every blob under `dir`, using the manifest's
/// relative file names. Absolute names are rewritten to their file name.
pub fn write_dataset(ds: &FeatureDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let local = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            PathBuf::from(p.file_name().unwrap_or_default())
        } else {
            p.to_path_buf()
        }
    };
    let mut manifest = ds.manifest.clone();
    manifest.text_features_file = local(&manifest.text_features_file);
    write_f32(&dir.join(&manifest.text_features_file), ds.text_features.data())?;
    for (entry, data) in manifest.domains.iter_mut().zip(&ds.domains) {
        entry.features_file = local(&entry.features_file);
        write_f32(&dir.join(&entry.features_file), data.features.data())?;
        let labels = data
            .labels
            .as_deref()
            .or_else(|| data.hidden.as_ref().map(|h| h.raw()));
        match (labels, &mut entry.labels_file) {
            (Some(l), Some(file)) => {
                *file = local(file);
                write_u32(&dir.join(&*file), l)?;
            }
            (Some(l), None) => {
                let file = PathBuf::from(format!("{}.labels.u32", entry.name));
                write_u32(&dir.join(&file), l)?;
                entry.labels_file = Some(file);
            }
            (None, _) => entry.labels_file = None,
        }
        for (file, view) in entry.aug_files.iter_mut().zip(&data.aug_views) {
            *file = local(file);
            write_f32(&dir.join(&*file), view.data())?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
