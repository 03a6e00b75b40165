//! Binary tensor container and dataset manifest.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! offset  size       field
//! 0       8          magic "RNKTNSR0"
//! 8       1          dtype code (0 = f32, 1 = f64)
//! 9       1          rank (1 or 2)
//! 10      8 * rank   dims, u64 each
//! ...     n * width  row-major payload, IEEE-754
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"RNKTNSR0";
const HEADER_FIXED: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// A rank-1 or rank-2 tensor of 32- or 64-bit floats.
#[derive(Debug, Clone)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Format(format!(
                "rank {} unsupported, expected 1 or 2",
                shape.len()
            )));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Widened copy of the payload.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [rows, cols] => Matrix::from_vec(rows, cols, self.to_f64()),
            _ => Err(Error::Format(format!(
                "expected a rank-2 tensor, found shape {:?}",
                self.shape
            ))),
        }
    }

    /// Compares shapes, dtype and payload bits (so NaN payloads compare equal to themselves).
    pub fn bit_eq(&self, other: &TensorFile) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            (TensorData::F64(a), TensorData::F64(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            _ => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len() + n * self.dtype().width());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_FIXED || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing RNKTNSR0 magic".into()));
        }
        let dtype = DType::from_code(bytes[8])?;
        let rank = bytes[9] as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Format(format!("rank {rank} unsupported")));
        }
        let header = HEADER_FIXED + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("header truncated".into()));
        }
        let shape: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(8)
            .map(|c| {
                let d = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))
            })
            .collect::<Result<_>>()?;
        let expected = element_count(&shape)?;
        let payload = &bytes[header..];
        if !payload.len().is_multiple_of(dtype.width()) || payload.len() / dtype.width() != expected
        {
            return Err(Error::Length {
                expected,
                actual: payload.len() / dtype.width(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::from_bytes(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub image: usize,
    pub caption: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum PairRecord {
    Plain(usize, usize),
    WithSplit(usize, usize, Split),
}

/// On-disk manifest document. Tensor paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub image_features: PathBuf,
    pub caption_features: PathBuf,
    pub caption_embeddings: PathBuf,
    pairs: Vec<PairRecord>,
    /// Optional semantic cluster id per image; used for cluster-level positives in evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_clusters: Option<Vec<usize>>,
}

impl ManifestDoc {
    pub fn new(
        image_features: impl Into<PathBuf>,
        caption_features: impl Into<PathBuf>,
        caption_embeddings: impl Into<PathBuf>,
        pairs: &[Pair],
        image_clusters: Option<Vec<usize>>,
    ) -> Self {
        Self {
            image_features: image_features.into(),
            caption_features: caption_features.into(),
            caption_embeddings: caption_embeddings.into(),
            pairs: pairs
                .iter()
                .map(|p| PairRecord::WithSplit(p.image, p.caption, p.split))
                .collect(),
            image_clusters,
        }
    }

    pub fn pairs(&self) -> Vec<Pair> {
        self.pairs
            .iter()
            .map(|p| match *p {
                PairRecord::Plain(image, caption) => Pair {
                    image,
                    caption,
                    split: Split::Train,
                },
                PairRecord::WithSplit(image, caption, split) => Pair {
                    image,
                    caption,
                    split,
                },
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A validated dataset: manifest plus the loaded feature and embedding matrices.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub image_features: Matrix,
    pub caption_features: Matrix,
    pub caption_embeddings: Matrix,
    pub pairs: Vec<Pair>,
    pub image_clusters: Option<Vec<usize>>,
}

impl DatasetManifest {
    /// Builds and validates a dataset from in-memory parts.
    pub fn from_parts(
        path: PathBuf,
        image_features: Matrix,
        caption_features: Matrix,
        caption_embeddings: Matrix,
        pairs: Vec<Pair>,
        image_clusters: Option<Vec<usize>>,
    ) -> Result<Self> {
        let m = Self {
            path,
            image_features,
            caption_features,
            caption_embeddings,
            pairs,
            image_clusters,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n_img = self.image_features.rows();
        let n_cap = self.caption_features.rows();
        if self.caption_embeddings.rows() != n_cap {
            return Err(Error::Validation(format!(
                "caption_embeddings has {} rows but caption_features has {n_cap}",
                self.caption_embeddings.rows()
            )));
        }
        let mut seen = vec![false; n_img];
        for (k, p) in self.pairs.iter().enumerate() {
            if p.image >= n_img {
                return Err(Error::Validation(format!(
                    "pair {k}: image index {} out of range for {n_img} images",
                    p.image
                )));
            }
            if p.caption >= n_cap {
                return Err(Error::Validation(format!(
                    "pair {k}: caption index {} out of range for {n_cap} captions",
                    p.caption
                )));
            }
            seen[p.image] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "image {missing} appears in no pair"
            )));
        }
        if let Some(clusters) = &self.image_clusters {
            if clusters.len() != n_img {
                return Err(Error::Validation(format!(
                    "image_clusters has {} entries for {n_img} images",
                    clusters.len()
                )));
            }
        }
        Ok(())
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Distinct images of a split, ascending.
    pub fn images_in(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.pairs_in(split).map(|p| p.image).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Captions annotated for each image in `split`, keyed by image id, each list ascending.
    pub fn captions_by_image(&self, split: Split) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for p in self.pairs_in(split) {
            map.entry(p.image).or_default().push(p.caption);
        }
        for caps in map.values_mut() {
            caps.sort_unstable();
            caps.dedup();
        }
        map
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let load = |p: &Path| -> Result<Matrix> { read_tensor(base.join(p))?.to_matrix() };
    DatasetManifest::from_parts(
        path.to_path_buf(),
        load(&doc.image_features)?,
        load(&doc.caption_features)?,
        load(&doc.caption_embeddings)?,
        doc.pairs(),
        doc.image_clusters.clone(),
    )
}
