//! Linear bi-encoder trained by mini-batch gradient descent on any batch loss.
//!
//! Both modalities are mapped into a joint space by a weight matrix and
//! L2-normalized; batch similarity is the matrix of row dot products. The
//! loss gradient with respect to that matrix is pushed back through the
//! normalization and the linear maps analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_ndcg, batch_ndcg, BatchNdcg, LossKind, LossResult, SimilarityMatrix, SmoothConfig,
};
use crate::matrix::{dot, norm, Matrix};
use crate::metrics::{retrieval_report, MetricReport, RetrievalInput};
use crate::relevance::{CaptionEmbeddings, RelevanceMatrix};
use crate::synth::epoch_batches;
use crate::tensorio::{DatasetManifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_img: Matrix,
    pub w_txt: Matrix,
}

impl EncoderParams {
    /// Gaussian init with variance `1 / fan_in`.
    pub fn random(dim_img: usize, dim_txt: usize, joint_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Matrix::from_fn(rows, joint_dim, |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let w_img = draw(dim_img);
        let w_txt = draw(dim_txt);
        Self { w_img, w_txt }
    }

    pub fn joint_dim(&self) -> usize {
        self.w_img.cols()
    }

    fn weights(&self, side: Side) -> &Matrix {
        match side {
            Side::Image => &self.w_img,
            Side::Text => &self.w_txt,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.w_img.all_finite() && self.w_txt.all_finite()
    }
}

/// Row-normalized joint-space embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Projection and its row norms, kept for the backward pass.
struct Encoded {
    emb: Matrix,
    norms: Vec<f64>,
}

fn encode_raw(w: &Matrix, features: &Matrix) -> Result<Encoded> {
    let mut emb = features.matmul(w)?;
    let mut norms = Vec::with_capacity(emb.rows());
    for i in 0..emb.rows() {
        let n = norm(emb.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateEmbedding { row: i });
        }
        emb.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok(Encoded { emb, norms })
}

pub fn encode(params: &EncoderParams, features: &Matrix, side: Side) -> Result<EmbeddingMatrix> {
    let w = params.weights(side);
    if features.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "{side:?} features have {} columns, encoder expects {}",
            features.cols(),
            w.rows()
        )));
    }
    Ok(EmbeddingMatrix(encode_raw(w, features)?.emb))
}

pub fn batch_similarity(img: &EmbeddingMatrix, txt: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    SimilarityMatrix::new(img.0.matmul_t(&txt.0)?)
}

/// `∂L/∂W` for one side given `∂L/∂E` of its normalized embeddings.
fn backprop_side(features: &Matrix, enc: &Encoded, mut grad_emb: Matrix) -> Result<Matrix> {
    for i in 0..grad_emb.rows() {
        let e = enc.emb.row(i);
        let g = grad_emb.row_mut(i);
        let proj = dot(g, e);
        let inv = 1.0 / enc.norms[i];
        g.iter_mut()
            .zip(e)
            .for_each(|(gk, ek)| *gk = (*gk - proj * ek) * inv);
    }
    features.t_matmul(&grad_emb)
}

fn backward(
    img_features: &Matrix,
    txt_features: &Matrix,
    img: &Encoded,
    txt: &Encoded,
    grad_s: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let grad_img_emb = grad_s.matmul(&txt.emb)?;
    let grad_txt_emb = grad_s.t_matmul(&img.emb)?;
    Ok((
        backprop_side(img_features, img, grad_img_emb)?,
        backprop_side(txt_features, txt, grad_txt_emb)?,
    ))
}

/// Pulls `∂L/∂S` for the similarity of `img_features` against `txt_features` back to
/// `(∂L/∂W_img, ∂L/∂W_txt)`.
pub fn similarity_backward(
    params: &EncoderParams,
    img_features: &Matrix,
    txt_features: &Matrix,
    grad_s: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let img = encode_raw(&params.w_img, img_features)?;
    let txt = encode_raw(&params.w_txt, txt_features)?;
    if grad_s.shape() != (img.emb.rows(), txt.emb.rows()) {
        return Err(Error::Shape(format!(
            "gradient {:?} against similarity {}x{}",
            grad_s.shape(),
            img.emb.rows(),
            txt.emb.rows()
        )));
    }
    backward(img_features, txt_features, &img, &txt, grad_s)
}

/// Loss on one batch of paired rows and its gradient with respect to both weight matrices.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossResult,
    pub similarity: SimilarityMatrix,
    pub grad_w_img: Matrix,
    pub grad_w_txt: Matrix,
}

pub fn batch_gradient(
    params: &EncoderParams,
    img_features: &Matrix,
    txt_features: &Matrix,
    relevance: &RelevanceMatrix,
    kind: LossKind,
    cfg: &SmoothConfig,
) -> Result<BatchGradient> {
    if img_features.rows() != txt_features.rows() {
        return Err(Error::Shape(format!(
            "{} image rows against {} caption rows",
            img_features.rows(),
            txt_features.rows()
        )));
    }
    let img = encode_raw(&params.w_img, img_features)?;
    let txt = encode_raw(&params.w_txt, txt_features)?;
    let similarity = SimilarityMatrix::new(img.emb.matmul_t(&txt.emb)?)?;
    let loss = kind.evaluate(&similarity, relevance, cfg)?;
    let (grad_w_img, grad_w_txt) = backward(img_features, txt_features, &img, &txt, &loss.grad)?;
    Ok(BatchGradient {
        loss,
        similarity,
        grad_w_img,
        grad_w_txt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epoch after which the learning rate is divided by 10.
    pub lr_decay_epoch: Option<usize>,
    pub loss_kind: LossKind,
    pub smooth: SmoothConfig,
    pub seed: u64,
    pub joint_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            learning_rate: 1.0,
            lr_decay_epoch: None,
            loss_kind: LossKind::Joint,
            smooth: SmoothConfig::default(),
            seed: 0,
            joint_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.joint_dim == 0 {
            return Err(Error::Config("joint_dim must be at least 1".into()));
        }
        self.smooth.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(d) if epoch >= d => self.learning_rate / 10.0,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_rsum: f64,
    pub val_ndcg: f64,
    pub batch_ndcg_hat_mean: f64,
    pub batch_ndcg_mean: f64,
    pub approx_error: f64,
    pub approx_error_max: f64,
    pub tied_relevance_batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_rsum: f64,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,loss,val_rsum,val_ndcg,batch_ndcg_hat_mean,batch_ndcg_mean,approx_error";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss,
                r.val_rsum,
                r.val_ndcg,
                r.batch_ndcg_hat_mean,
                r.batch_ndcg_mean,
                r.approx_error
            ));
        }
        out
    }
}

/// Per-batch gap between smooth and hard NDCG, averaged over both directions.
#[derive(Debug, Clone, Copy)]
struct BatchDiagnostics {
    ndcg_hat: f64,
    ndcg: f64,
    error_mean: f64,
    error_max: f64,
}

/// Reuses the loss's smooth NDCG values when it computed them.
fn diagnostics(
    s: &SimilarityMatrix,
    r: &RelevanceMatrix,
    tau: f64,
    loss: &LossResult,
) -> Result<BatchDiagnostics> {
    let both = if loss.query_ndcg.is_empty() {
        batch_ndcg(s, r, tau)?
    } else {
        BatchNdcg {
            smooth: loss.query_ndcg.clone(),
            hard: batch_hard_ndcg(s, r)?,
        }
    };
    let n = both.smooth.len().max(1) as f64;
    let mut d = BatchDiagnostics {
        ndcg_hat: 0.0,
        ndcg: 0.0,
        error_mean: 0.0,
        error_max: 0.0,
    };
    for (a, b) in both.smooth.iter().zip(&both.hard) {
        d.ndcg_hat += a / n;
        d.ndcg += b / n;
        d.error_mean += (a - b).abs() / n;
        d.error_max = d.error_max.max((a - b).abs());
    }
    Ok(d)
}

/// Trains from a seeded random initialization; returns the parameters with the best
/// validation RSUM together with the per-epoch trace.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(EncoderParams, TrainTrace)> {
    let init = EncoderParams::random(
        manifest.image_features.cols(),
        manifest.caption_features.cols(),
        cfg.joint_dim,
        cfg.seed,
    );
    train_from(manifest, cfg, init)
}

/// Weights that grew until an embedding norm overflowed count as divergence.
fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::DegenerateEmbedding { .. } => Error::Divergence {
            epoch,
            batch,
            value: f64::NAN,
        },
        e => e,
    }
}

pub fn train_from(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    init: EncoderParams,
) -> Result<(EncoderParams, TrainTrace)> {
    cfg.validate()?;
    if init.w_img.rows() != manifest.image_features.cols()
        || init.w_txt.rows() != manifest.caption_features.cols()
        || init.w_txt.cols() != init.w_img.cols()
    {
        return Err(Error::Shape(
            "encoder weights do not match feature dims".into(),
        ));
    }
    let embeddings = CaptionEmbeddings::new(manifest.caption_embeddings.clone())?;
    let has_val = !manifest.images_in(Split::Val).is_empty();
    // batch order stream is independent of the init stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut params = init;
    let mut best = params.clone();
    let mut trace = TrainTrace {
        best_val_rsum: f64::NEG_INFINITY,
        ..TrainTrace::default()
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let batches = epoch_batches(manifest, cfg.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut diag_sum = [0.0; 3];
        let mut error_max = 0.0f64;
        let mut tied = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let (imgs, caps): (Vec<usize>, Vec<usize>) = batch.iter().copied().unzip();
            let x_img = manifest.image_features.select_rows(&imgs)?;
            let x_txt = manifest.caption_features.select_rows(&caps)?;
            let relevance = embeddings.batch_relevance(&caps)?;
            let updated = lr != 0.0 && (epoch > 0 || b > 0);
            let step = batch_gradient(
                &params,
                &x_img,
                &x_txt,
                &relevance,
                cfg.loss_kind,
                &cfg.smooth,
            )
            .map_err(|e| {
                if updated {
                    as_divergence(e, epoch + 1, b)
                } else {
                    e
                }
            })?;
            if !step.loss.value.is_finite()
                || !step.grad_w_img.all_finite()
                || !step.grad_w_txt.all_finite()
            {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                    value: step.loss.value,
                });
            }
            let d = diagnostics(&step.similarity, &relevance, cfg.smooth.tau, &step.loss)?;
            loss_sum += step.loss.value;
            diag_sum[0] += d.ndcg_hat;
            diag_sum[1] += d.ndcg;
            diag_sum[2] += d.error_mean;
            error_max = error_max.max(d.error_max);
            if step.loss.tied_relevance_queries > 0 {
                tied += 1;
            }
            if lr != 0.0 {
                params.w_img.axpy(-lr, &step.grad_w_img)?;
                params.w_txt.axpy(-lr, &step.grad_w_txt)?;
                if !params.all_finite() {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        batch: b,
                        value: step.loss.value,
                    });
                }
            }
        }

        let nb = batches.len().max(1) as f64;
        let (val_rsum, val_ndcg) = if has_val {
            let report =
                evaluate_with(&params, manifest, &embeddings, Split::Val).map_err(|e| {
                    if lr != 0.0 {
                        as_divergence(e, epoch + 1, batches.len())
                    } else {
                        e
                    }
                })?;
            (report.rsum, report.ndcg)
        } else {
            (0.0, 0.0)
        };
        if val_rsum > trace.best_val_rsum {
            trace.best_val_rsum = val_rsum;
            trace.best_epoch = epoch + 1;
            best = params.clone();
        }
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / nb,
            val_rsum,
            val_ndcg,
            batch_ndcg_hat_mean: diag_sum[0] / nb,
            batch_ndcg_mean: diag_sum[1] / nb,
            approx_error: diag_sum[2] / nb,
            approx_error_max: error_max,
            tied_relevance_batches: tied,
        });
    }
    if trace.epochs.is_empty() {
        trace.best_val_rsum = 0.0;
        return Ok((params, trace));
    }
    Ok((best, trace))
}

/// Retrieval metrics of `params` on one split.
pub fn evaluate(
    params: &EncoderParams,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricReport> {
    let embeddings = CaptionEmbeddings::new(manifest.caption_embeddings.clone())?;
    evaluate_with(params, manifest, &embeddings, split)
}

fn evaluate_with(
    params: &EncoderParams,
    manifest: &DatasetManifest,
    embeddings: &CaptionEmbeddings,
    split: Split,
) -> Result<MetricReport> {
    let by_image = manifest.captions_by_image(split);
    if by_image.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let images: Vec<usize> = by_image.keys().copied().collect();
    let mut captions: Vec<usize> = by_image.values().flatten().copied().collect();
    captions.sort_unstable();
    captions.dedup();
    let col_of = |c: usize| captions.binary_search(&c).expect("caption of split");

    let mut pairs = Vec::new();
    for (row, caps) in by_image.values().enumerate() {
        pairs.extend(caps.iter().map(|&c| (row, col_of(c))));
    }

    let img_emb = encode(
        params,
        &manifest.image_features.select_rows(&images)?,
        Side::Image,
    )?;
    let txt_emb = encode(
        params,
        &manifest.caption_features.select_rows(&captions)?,
        Side::Text,
    )?;
    let sims = img_emb.0.matmul_t(&txt_emb.0)?;

    // each image is represented by its lowest-indexed caption in the split
    let reps: Vec<usize> = by_image.values().map(|caps| caps[0]).collect();
    let rep_rows = embeddings.matrix().select_rows(&reps)?;
    let cap_rows = embeddings.matrix().select_rows(&captions)?;
    let mut relevance = rep_rows.matmul_t(&cap_rows)?;
    for (row, &rep) in reps.iter().enumerate() {
        for (col, &c) in captions.iter().enumerate() {
            let cos = if c == rep {
                1.0
            } else {
                relevance[(row, col)].clamp(-1.0, 1.0)
            };
            relevance[(row, col)] = crate::relevance::cosine_to_relevance(cos);
        }
    }

    let clusters: Option<Vec<usize>> = manifest
        .image_clusters
        .as_ref()
        .map(|cl| images.iter().map(|&i| cl[i]).collect());
    retrieval_report(RetrievalInput {
        sims: &sims,
        pairs: &pairs,
        relevance: &relevance,
        image_clusters: clusters.as_deref(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_encoder_keeps_unit_rows() {
        let params = EncoderParams {
            w_img: Matrix::identity(3),
            w_txt: Matrix::identity(3),
        };
        let x = Matrix::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let e = encode(&params, &x, Side::Image).unwrap();
        assert!(e.matrix().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let params = EncoderParams {
            w_img: Matrix::zeros(2, 2),
            w_txt: Matrix::identity(2),
        };
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            encode(&params, &x, Side::Image),
            Err(Error::DegenerateEmbedding { row: 0 })
        ));
        assert!(matches!(
            encode(&params, &Matrix::zeros(1, 3), Side::Text),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn similarity_of_identical_embeddings() {
        let params = EncoderParams::random(5, 5, 4, 1);
        let x = Matrix::from_fn(3, 5, |i, j| ((i + 1) * (j + 2)) as f64 % 7.0 - 3.0);
        let e = encode(&params, &x, Side::Image).unwrap();
        let s = batch_similarity(&e, &e).unwrap();
        for i in 0..3 {
            assert!((s.values()[(i, i)] - 1.0).abs() < 1e-12);
        }
        let a = EmbeddingMatrix(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = EmbeddingMatrix(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert_eq!(batch_similarity(&a, &b).unwrap().values()[(0, 0)], 0.0);
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            lr_decay_epoch: Some(3),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(2), 0.5);
        assert_eq!(cfg.learning_rate_at(3), 0.05);
    }
}
