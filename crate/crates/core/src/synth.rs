//! Synthetic retrieval datasets with a latent cluster structure.
//!
//! Each image gets a latent vector drawn around one of `cluster_count`
//! centers. Its captions perturb that latent; image and caption features are
//! independent random linear maps of the latents plus noise, and caption
//! embeddings are the (noisy) latents isometrically embedded and normalized.
//! Same-cluster captions therefore look relevant to each other without being
//! annotated as positives.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::relevance::CaptionEmbeddings;
use crate::tensorio::{write_tensor, DatasetManifest, ManifestDoc, Pair, Split, TensorFile};

pub const IMAGE_FEATURES_FILE: &str = "image_features.rnkt";
pub const CAPTION_FEATURES_FILE: &str = "caption_features.rnkt";
pub const CAPTION_EMBEDDINGS_FILE: &str = "caption_embeddings.rnkt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub captions_per_image: usize,
    pub latent_dim: usize,
    pub feature_dim_img: usize,
    pub feature_dim_txt: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub cluster_count: usize,
    /// Standard deviation of image latents around their cluster center.
    pub cluster_spread: f64,
    /// Caption-embedding noise as a fraction of `noise_sigma`.
    pub embed_noise_ratio: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            captions_per_image: 5,
            latent_dim: 16,
            feature_dim_img: 64,
            feature_dim_txt: 48,
            embed_dim: 32,
            noise_sigma: 0.5,
            cluster_count: 20,
            cluster_spread: 0.7,
            embed_noise_ratio: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_images", self.n_images),
            ("captions_per_image", self.captions_per_image),
            ("latent_dim", self.latent_dim),
            ("feature_dim_img", self.feature_dim_img),
            ("feature_dim_txt", self.feature_dim_txt),
            ("embed_dim", self.embed_dim),
            ("cluster_count", self.cluster_count),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.cluster_spread >= 0.0)
            || !(self.embed_noise_ratio >= 0.0)
        {
            return Err(Error::Config(
                "noise_sigma, cluster_spread and embed_noise_ratio must be non-negative".into(),
            ));
        }
        if self.embed_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "embed_dim ({}) must be at least latent_dim ({})",
                self.embed_dim, self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Generation-time self-check of the relevance structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    /// Mean relevance between two captions of the same image (`None` with one caption per image).
    pub same_image_relevance: Option<f64>,
    /// Mean relevance between captions of different images (`None` with a single image).
    pub cross_image_relevance: Option<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn add_noise(rng: &mut ChaCha8Rng, m: &mut Matrix, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    for x in m.as_mut_slice() {
        *x += sigma * rng.sample::<f64, _>(StandardNormal);
    }
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), by Gram-Schmidt.
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        // two passes keep the basis orthogonal to rounding
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_fn(rows, cols, |i, j| basis[j][i])
}

fn split_of_images(n: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut split = vec![Split::Test; n];
    for (rank, &img) in order.iter().enumerate() {
        split[img] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

/// Builds a dataset in memory. `path` is recorded as the manifest location.
pub fn generate_in_memory(
    spec: &SynthSpec,
    path: PathBuf,
) -> Result<(DatasetManifest, SynthSummary)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;

    let centers = gaussian_matrix(&mut rng, spec.cluster_count, d, 1.0);
    let map_img = gaussian_matrix(&mut rng, d, spec.feature_dim_img, 1.0 / (d as f64).sqrt());
    let map_txt = gaussian_matrix(&mut rng, d, spec.feature_dim_txt, 1.0 / (d as f64).sqrt());
    let embed_basis = orthonormal_columns(&mut rng, spec.embed_dim, d);

    let clusters: Vec<usize> = (0..spec.n_images)
        .map(|i| {
            if i < spec.cluster_count {
                i
            } else {
                rng.random_range(0..spec.cluster_count)
            }
        })
        .collect();
    let mut img_latent = gaussian_matrix(&mut rng, spec.n_images, d, spec.cluster_spread);
    for (i, &c) in clusters.iter().enumerate() {
        img_latent
            .row_mut(i)
            .iter_mut()
            .zip(centers.row(c))
            .for_each(|(x, m)| *x += m);
    }

    let n_cap = spec.n_images * spec.captions_per_image;
    let owner: Vec<usize> = (0..n_cap).map(|c| c / spec.captions_per_image).collect();
    let mut cap_latent = img_latent.select_rows(&owner)?;
    add_noise(&mut rng, &mut cap_latent, spec.noise_sigma);

    let mut image_features = img_latent.matmul(&map_img)?;
    add_noise(&mut rng, &mut image_features, spec.noise_sigma);
    let mut caption_features = cap_latent.matmul(&map_txt)?;
    add_noise(&mut rng, &mut caption_features, spec.noise_sigma);
    let mut caption_embeddings = cap_latent.matmul_t(&embed_basis)?;
    add_noise(
        &mut rng,
        &mut caption_embeddings,
        spec.noise_sigma * spec.embed_noise_ratio,
    );
    for i in 0..n_cap {
        let n = norm(caption_embeddings.row(i));
        if n > 0.0 {
            caption_embeddings
                .row_mut(i)
                .iter_mut()
                .for_each(|x| *x /= n);
        }
    }

    let split = split_of_images(spec.n_images, &mut rng);
    let pairs: Vec<Pair> = (0..n_cap)
        .map(|c| Pair {
            image: owner[c],
            caption: c,
            split: split[owner[c]],
        })
        .collect();

    let summary = self_check(&caption_embeddings, &owner)?;
    if let (Some(same), Some(cross)) = (summary.same_image_relevance, summary.cross_image_relevance)
    {
        if spec.noise_sigma > 0.0 && same <= cross {
            return Err(Error::Validation(format!(
                "same-image caption relevance {same:.4} does not exceed cross-image {cross:.4}"
            )));
        }
    }

    let manifest = DatasetManifest::from_parts(
        path,
        image_features,
        caption_features,
        caption_embeddings,
        pairs,
        Some(clusters),
    )?;
    Ok((manifest, summary))
}

fn self_check(embeddings: &Matrix, owner: &[usize]) -> Result<SynthSummary> {
    let e = CaptionEmbeddings::new(embeddings.clone())?;
    let n = owner.len();
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..n {
        for b in (a + 1)..n {
            let r = e.relevance_score(a, b)?;
            if owner[a] == owner[b] {
                same += r;
                n_same += 1;
            } else {
                cross += r;
                n_cross += 1;
            }
        }
    }
    Ok(SynthSummary {
        same_image_relevance: (n_same > 0).then(|| same / n_same as f64),
        cross_image_relevance: (n_cross > 0).then(|| cross / n_cross as f64),
    })
}

/// Generates a dataset and writes its tensors plus `manifest.json` into `out_dir`.
pub fn generate(
    spec: &SynthSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, SynthSummary)> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let (manifest, summary) = generate_in_memory(spec, manifest_path.clone())?;
    write_tensor(
        out_dir.join(IMAGE_FEATURES_FILE),
        &TensorFile::from_matrix(&manifest.image_features),
    )?;
    write_tensor(
        out_dir.join(CAPTION_FEATURES_FILE),
        &TensorFile::from_matrix(&manifest.caption_features),
    )?;
    write_tensor(
        out_dir.join(CAPTION_EMBEDDINGS_FILE),
        &TensorFile::from_matrix(&manifest.caption_embeddings),
    )?;
    let doc = ManifestDoc::new(
        IMAGE_FEATURES_FILE,
        CAPTION_FEATURES_FILE,
        CAPTION_EMBEDDINGS_FILE,
        &manifest.pairs,
        manifest.image_clusters.clone(),
    );
    fs::write(&manifest_path, doc.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((manifest, summary))
}

/// `n` distinct training images, each with one uniformly drawn annotated caption.
pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let by_image = manifest.captions_by_image(Split::Train);
    let images: Vec<(&usize, &Vec<usize>)> = by_image.iter().collect();
    if n > images.len() {
        return Err(Error::Sampling {
            requested: n,
            available: images.len(),
        });
    }
    let picked = rand::seq::index::sample(rng, images.len(), n);
    Ok(picked
        .into_iter()
        .map(|k| {
            let (&img, caps) = images[k];
            (img, caps[rng.random_range(0..caps.len())])
        })
        .collect())
}

/// One pass over the training images in shuffled order, chunked into batches of
/// `batch_size`; a trailing batch smaller than two pairs is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let by_image = manifest.captions_by_image(Split::Train);
    if by_image.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut images: Vec<(usize, &Vec<usize>)> = by_image.iter().map(|(&i, c)| (i, c)).collect();
    images.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in images.chunks(batch_size) {
        if chunk.len() < 2 && !batches.is_empty() {
            continue;
        }
        batches.push(
            chunk
                .iter()
                .map(|(img, caps)| (*img, caps[rng.random_range(0..caps.len())]))
                .collect(),
        );
    }
    Ok(batches)
}
