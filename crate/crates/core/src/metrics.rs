//! Hard retrieval metrics: DCG/NDCG, R@K and RSUM, mAP@R and R-Precision,
//! plus the gap between smooth and hard batch NDCG.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_ndcg, SimilarityMatrix};
use crate::matrix::Matrix;
use crate::relevance::RelevanceMatrix;

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Candidate indices sorted by descending score; equal scores keep ascending index order.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// One ranked query: candidate order, graded relevance per candidate, and binary positives.
#[derive(Debug, Clone)]
pub struct RankedQueryResult {
    pub order: Vec<usize>,
    pub relevance: Vec<f64>,
    pub positives: Vec<usize>,
}

impl RankedQueryResult {
    pub fn from_scores(scores: &[f64], relevance: Vec<f64>, positives: Vec<usize>) -> Self {
        Self {
            order: rank_candidates(scores),
            relevance,
            positives,
        }
    }

    fn is_positive(&self) -> Vec<bool> {
        let mut mask = vec![false; self.order.len()];
        for &p in &self.positives {
            mask[p] = true;
        }
        mask
    }
}

pub fn dcg_at(rel_in_rank_order: &[f64], p: usize) -> Result<f64> {
    if p == 0 || p > rel_in_rank_order.len() {
        return Err(Error::Bounds {
            index: p,
            len: rel_in_rank_order.len(),
        });
    }
    Ok(rel_in_rank_order[..p]
        .iter()
        .enumerate()
        .map(|(i, &r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
        .sum())
}

pub fn ndcg_at(result: &RankedQueryResult, p: usize) -> Result<f64> {
    if !result.relevance.iter().any(|&r| r > 0.0) {
        return Err(Error::DegenerateRelevance {
            context: "query".into(),
        });
    }
    let ranked: Vec<f64> = result.order.iter().map(|&c| result.relevance[c]).collect();
    let mut ideal = result.relevance.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    Ok(dcg_at(&ranked, p)? / dcg_at(&ideal, p)?)
}

/// Whether any positive is among the first `k` ranked candidates.
pub fn recall_at_k(result: &RankedQueryResult, k: usize) -> bool {
    let mask = result.is_positive();
    result.order.iter().take(k).any(|&c| mask[c])
}

/// Percentage of hits.
pub fn recall_percentage(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// `(mAP@R, R-Precision)` with `R` the number of positives.
pub fn map_at_r_and_rprecision(result: &RankedQueryResult) -> Result<(f64, f64)> {
    let r = result.positives.len();
    if r == 0 {
        return Err(Error::DegenerateRelevance {
            context: "query with no positives".into(),
        });
    }
    let mask = result.is_positive();
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, &c) in result.order.iter().take(r).enumerate() {
        if mask[c] {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    Ok((ap / r as f64, hits as f64 / r as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxError {
    pub mean: f64,
    pub max: f64,
}

/// `|N̂DCG − NDCG|` over every query of both directions of a batch.
pub fn approximation_error(
    s: &SimilarityMatrix,
    r: &RelevanceMatrix,
    tau: f64,
) -> Result<ApproxError> {
    let both = batch_ndcg(s, r, tau)?;
    let n = both.smooth.len();
    if n == 0 {
        return Ok(ApproxError {
            mean: 0.0,
            max: 0.0,
        });
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, b) in both.smooth.iter().zip(&both.hard) {
        let e = (a - b).abs();
        sum += e;
        max = max.max(e);
    }
    Ok(ApproxError {
        mean: sum / n as f64,
        max,
    })
}

/// Recall percentages at the standard cutoffs for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSet(pub BTreeMap<String, f64>);

impl RecallSet {
    pub fn get(&self, k: usize) -> f64 {
        self.0.get(&k.to_string()).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRecall {
    pub i2t: RecallSet,
    pub t2i: RecallSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalValue {
    pub i2t: f64,
    pub t2i: f64,
}

impl DirectionalValue {
    pub fn mean(&self) -> f64 {
        0.5 * (self.i2t + self.t2i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_at_k: DirectionalRecall,
    pub rsum: f64,
    /// Mean full-list NDCG of both directions with graded relevance.
    pub ndcg: f64,
    pub ndcg_by_direction: DirectionalValue,
    /// mAP@R and R-Precision against the annotated pairs.
    pub map_at_r: f64,
    pub r_precision: f64,
    pub map_at_r_by_direction: DirectionalValue,
    pub r_precision_by_direction: DirectionalValue,
    /// The same two metrics with every same-cluster item counted as positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_at_r_cluster: Option<DirectionalValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_precision_cluster: Option<DirectionalValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approx_error: Option<ApproxError>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, f64)> = Vec::new();
        for k in RECALL_CUTOFFS {
            rows.push((format!("i2t_r@{k}"), self.r_at_k.i2t.get(k)));
        }
        for k in RECALL_CUTOFFS {
            rows.push((format!("t2i_r@{k}"), self.r_at_k.t2i.get(k)));
        }
        rows.push(("rsum".into(), self.rsum));
        rows.push(("ndcg".into(), self.ndcg));
        rows.push(("ndcg_i2t".into(), self.ndcg_by_direction.i2t));
        rows.push(("ndcg_t2i".into(), self.ndcg_by_direction.t2i));
        rows.push(("map_at_r".into(), self.map_at_r));
        rows.push(("r_precision".into(), self.r_precision));
        rows.push(("map_at_r_i2t".into(), self.map_at_r_by_direction.i2t));
        rows.push(("map_at_r_t2i".into(), self.map_at_r_by_direction.t2i));
        rows.push(("r_precision_i2t".into(), self.r_precision_by_direction.i2t));
        rows.push(("r_precision_t2i".into(), self.r_precision_by_direction.t2i));
        if let Some(c) = self.map_at_r_cluster {
            rows.push(("map_at_r_cluster_i2t".into(), c.i2t));
            rows.push(("map_at_r_cluster_t2i".into(), c.t2i));
        }
        if let Some(c) = self.r_precision_cluster {
            rows.push(("r_precision_cluster_i2t".into(), c.i2t));
            rows.push(("r_precision_cluster_t2i".into(), c.t2i));
        }
        if let Some(e) = self.approx_error {
            rows.push(("approx_error_mean".into(), e.mean));
            rows.push(("approx_error_max".into(), e.max));
        }
        let mut out = String::from("metric,value\n");
        for (name, v) in rows {
            out.push_str(&format!("{name},{v}\n"));
        }
        out
    }
}

/// Everything needed to score a split: image rows against caption columns.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalInput<'a> {
    /// Images × captions similarity.
    pub sims: &'a Matrix,
    /// Annotated positives as `(image row, caption column)`.
    pub pairs: &'a [(usize, usize)],
    /// Images × captions graded relevance.
    pub relevance: &'a Matrix,
    /// Optional cluster id per image row.
    pub image_clusters: Option<&'a [usize]>,
}

#[derive(Default)]
struct Accum {
    hits: [Vec<bool>; 3],
    ndcg: f64,
    map: f64,
    rp: f64,
    map_c: f64,
    rp_c: f64,
    queries: usize,
}

impl Accum {
    fn push(&mut self, q: &RankedQueryResult, cluster_pos: Option<Vec<usize>>) -> Result<()> {
        for (h, &k) in self.hits.iter_mut().zip(&RECALL_CUTOFFS) {
            h.push(recall_at_k(q, k));
        }
        self.ndcg += ndcg_at(q, q.order.len())?;
        let (m, r) = map_at_r_and_rprecision(q)?;
        self.map += m;
        self.rp += r;
        if let Some(pos) = cluster_pos {
            let cq = RankedQueryResult {
                order: q.order.clone(),
                relevance: Vec::new(),
                positives: pos,
            };
            let (m, r) = map_at_r_and_rprecision(&cq)?;
            self.map_c += m;
            self.rp_c += r;
        }
        self.queries += 1;
        Ok(())
    }

    fn recall(&self) -> RecallSet {
        RecallSet(
            RECALL_CUTOFFS
                .iter()
                .zip(&self.hits)
                .map(|(k, h)| (k.to_string(), recall_percentage(h)))
                .collect(),
        )
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.queries.max(1) as f64
    }
}

/// Scores both retrieval directions of a split.
pub fn retrieval_report(input: RetrievalInput<'_>) -> Result<MetricReport> {
    let (n_img, n_cap) = input.sims.shape();
    if input.relevance.shape() != (n_img, n_cap) {
        return Err(Error::Shape(format!(
            "similarity {:?} and relevance {:?} differ",
            input.sims.shape(),
            input.relevance.shape()
        )));
    }
    if n_img == 0 || n_cap == 0 {
        return Err(Error::EmptySplit("retrieval input".into()));
    }
    if let Some(c) = input.image_clusters {
        if c.len() != n_img {
            return Err(Error::Shape(format!(
                "{} cluster ids for {n_img} images",
                c.len()
            )));
        }
    }
    let mut captions_of = vec![Vec::new(); n_img];
    let mut images_of = vec![Vec::new(); n_cap];
    for &(i, c) in input.pairs {
        if i >= n_img || c >= n_cap {
            return Err(Error::Shape(format!(
                "pair ({i}, {c}) outside {n_img}x{n_cap} split"
            )));
        }
        captions_of[i].push(c);
        images_of[c].push(i);
    }
    // clusters a caption belongs to, via its annotated images
    let caption_clusters: Option<Vec<Vec<usize>>> = input.image_clusters.map(|cl| {
        images_of
            .iter()
            .map(|imgs| imgs.iter().map(|&i| cl[i]).collect())
            .collect()
    });

    let mut i2t = Accum::default();
    for (i, caps) in captions_of.iter().enumerate() {
        let q = RankedQueryResult::from_scores(
            input.sims.row(i),
            input.relevance.row(i).to_vec(),
            caps.clone(),
        );
        let cluster_pos = input
            .image_clusters
            .zip(caption_clusters.as_ref())
            .map(|(cl, cc)| (0..n_cap).filter(|&c| cc[c].contains(&cl[i])).collect());
        i2t.push(&q, cluster_pos)?;
    }

    let mut t2i = Accum::default();
    for (c, imgs) in images_of.iter().enumerate() {
        let q = RankedQueryResult::from_scores(
            &input.sims.column(c),
            input.relevance.column(c),
            imgs.clone(),
        );
        let cluster_pos = input
            .image_clusters
            .zip(caption_clusters.as_ref())
            .map(|(cl, cc)| (0..n_img).filter(|&i| cc[c].contains(&cl[i])).collect());
        t2i.push(&q, cluster_pos)?;
    }

    let r_at_k = DirectionalRecall {
        i2t: i2t.recall(),
        t2i: t2i.recall(),
    };
    let rsum = r_at_k.i2t.sum() + r_at_k.t2i.sum();
    let ndcg_by_direction = DirectionalValue {
        i2t: i2t.mean(i2t.ndcg),
        t2i: t2i.mean(t2i.ndcg),
    };
    let map_at_r_by_direction = DirectionalValue {
        i2t: i2t.mean(i2t.map),
        t2i: t2i.mean(t2i.map),
    };
    let r_precision_by_direction = DirectionalValue {
        i2t: i2t.mean(i2t.rp),
        t2i: t2i.mean(t2i.rp),
    };
    let clustered = input.image_clusters.is_some();
    Ok(MetricReport {
        r_at_k,
        rsum,
        ndcg: ndcg_by_direction.mean(),
        ndcg_by_direction,
        map_at_r: map_at_r_by_direction.mean(),
        r_precision: r_precision_by_direction.mean(),
        map_at_r_by_direction,
        r_precision_by_direction,
        map_at_r_cluster: clustered.then(|| DirectionalValue {
            i2t: i2t.mean(i2t.map_c),
            t2i: t2i.mean(t2i.map_c),
        }),
        r_precision_cluster: clustered.then(|| DirectionalValue {
            i2t: i2t.mean(i2t.rp_c),
            t2i: t2i.mean(t2i.rp_c),
        }),
        approx_error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_order_and_ties() {
        assert_eq!(rank_candidates(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_candidates(&[0.5, 0.5]), vec![0, 1]);
    }

    #[test]
    fn dcg_cases() {
        assert_eq!(dcg_at(&[1.0, 0.0, 0.0], 3).unwrap(), 1.0);
        assert_eq!(dcg_at(&[0.0; 4], 2).unwrap(), 0.0);
        let v = dcg_at(&[1.0, 1.0], 2).unwrap();
        assert!((v - (1.0 + 1.0 / 3f64.log2())).abs() < 1e-15);
        assert!((v - 1.6309).abs() < 1e-4);
        assert!(dcg_at(&[1.0], 0).is_err());
        assert!(dcg_at(&[1.0], 2).is_err());
    }

    #[test]
    fn ndcg_cases() {
        let perfect =
            RankedQueryResult::from_scores(&[0.9, 0.5, 0.1], vec![1.0, 0.5, 0.0], vec![0]);
        assert_eq!(ndcg_at(&perfect, 3).unwrap(), 1.0);
        let reversed = RankedQueryResult::from_scores(&[0.9, 0.1], vec![0.0, 1.0], vec![1]);
        let v = ndcg_at(&reversed, 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        let zero = RankedQueryResult::from_scores(&[0.9, 0.1], vec![0.0, 0.0], vec![1]);
        assert!(ndcg_at(&zero, 2).is_err());
    }

    #[test]
    fn recall_cases() {
        let q = RankedQueryResult::from_scores(&[0.9, 0.1], vec![], vec![0]);
        assert!(recall_at_k(&q, 1));
        let scores: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        let q = RankedQueryResult::from_scores(&scores, vec![], vec![5]);
        assert!(!recall_at_k(&q, 5));
        assert!(recall_at_k(&q, 6));
        assert_eq!(recall_percentage(&[true, false, true, true]), 75.0);
    }

    #[test]
    fn map_cases() {
        let q = RankedQueryResult::from_scores(&[0.9, 0.8, 0.1], vec![], vec![0, 1]);
        assert_eq!(map_at_r_and_rprecision(&q).unwrap(), (1.0, 1.0));
        let q = RankedQueryResult::from_scores(&[0.9, 0.8, 0.7, 0.6], vec![], vec![0, 3]);
        assert_eq!(map_at_r_and_rprecision(&q).unwrap(), (0.5, 0.5));
        let q = RankedQueryResult::from_scores(&[0.9], vec![], vec![]);
        assert!(map_at_r_and_rprecision(&q).is_err());
    }

    #[test]
    fn single_query_batch_has_no_error() {
        let s = SimilarityMatrix::new(Matrix::from_vec(1, 1, vec![0.3]).unwrap()).unwrap();
        let r = RelevanceMatrix::new(Matrix::identity(1)).unwrap();
        let e = approximation_error(&s, &r, 1e-2).unwrap();
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.max, 0.0);
    }

    #[test]
    fn report_rsum_and_csv() {
        let sims = Matrix::from_rows(&[vec![0.9, 0.8, 0.1], vec![0.2, 0.1, 0.7]]).unwrap();
        let rel = Matrix::from_rows(&[vec![1.0, 0.9, 0.3], vec![0.3, 0.2, 1.0]]).unwrap();
        let report = retrieval_report(RetrievalInput {
            sims: &sims,
            pairs: &[(0, 0), (0, 1), (1, 2)],
            relevance: &rel,
            image_clusters: Some(&[0, 1]),
        })
        .unwrap();
        assert_eq!(report.r_at_k.i2t.get(1), 100.0);
        assert_eq!(report.r_at_k.t2i.get(1), 100.0);
        assert_eq!(report.rsum, 600.0);
        assert_eq!(report.map_at_r, 1.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\ni2t_r@1,100\n"));
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["r_at_k"]["t2i"]["10"], 100.0);
    }
}
