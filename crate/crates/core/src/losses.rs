//! Training objectives over a batch similarity matrix.
//!
//! Every loss returns its value together with `∂loss/∂s_{i,j}`; mapping that
//! gradient back onto encoder parameters is the trainer's job.
//!
//! Smooth-NDCG replaces the rank-counting step function with a temperature
//! sigmoid so the position of candidate `j` in query `i`'s list becomes
//!
//! ```text
//! π̂_{i,j} = 1 + Σ_{k≠j} σ((s_{i,k} − s_{i,j}) / τ)
//! ```
//!
//! Each sigmoid is a soft count of candidate `k` outranking `j`, the smooth
//! counterpart of `I{s_{i,j} − s_{i,k} < 0}`.
//!
//! and `N̂DCG = Σ_j (2^{r_{i,j}} − 1) / log2(1 + π̂_{i,j}) / IDCG`, where IDCG
//! depends only on relevance and is held constant under differentiation.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::relevance::RelevanceMatrix;

pub const DEFAULT_TAU: f64 = 1e-2;
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Square matrix of finite image-caption similarities; rows are images, columns captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Shape(format!(
                "similarity matrix must be square, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Shape(
                "similarity matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_inner(self) -> Matrix {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        SimilarityMatrix {
            values: self.values.transpose(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothConfig {
    pub tau: f64,
    pub margin: f64,
}

impl SmoothConfig {
    pub fn new(tau: f64, margin: f64) -> Result<Self> {
        let cfg = Self { tau, margin };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
    /// Queries (either direction) whose relevance list contained tied entries.
    pub tied_relevance_queries: usize,
    /// Smooth NDCG of each query (image rows first); empty for the triplet loss.
    pub query_ndcg: Vec<f64>,
}

impl LossResult {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(n, n),
            tied_relevance_queries: 0,
            query_ndcg: Vec::new(),
        }
    }
}

/// `1 / (1 + exp(-x / tau))` without overflow for any finite ratio.
#[inline]
pub fn sigmoid(x: f64, tau: f64) -> f64 {
    logistic(x / tau)
}

#[inline(always)]
fn logistic(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if z >= 0.0 {
        r
    } else {
        e * r
    }
}

/// Literal rank: one plus the number of strictly larger entries. Ties share a rank.
pub fn hard_positions(row: &[f64], j: usize) -> usize {
    let v = row[j];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(k, &x)| k != j && x > v)
        .count()
}

#[inline]
fn gain(r: f64) -> f64 {
    r.exp2() - 1.0
}

#[inline]
fn discount(position: f64) -> f64 {
    1.0 / (1.0 + position).log2()
}

/// Sigmoid-relaxed positions of every entry of `row`, built from the pairwise difference matrix.
pub fn smooth_positions(row: &[f64], tau: f64) -> Vec<f64> {
    let mut pos = vec![1.0; row.len()];
    for j in 0..row.len() {
        for k in (j + 1)..row.len() {
            // p: soft indicator that j outranks k
            let p = sigmoid(row[j] - row[k], tau);
            pos[k] += p;
            pos[j] += 1.0 - p;
        }
    }
    pos
}

/// Ideal DCG of a relevance list, positions assigned by [`hard_positions`].
pub fn batch_idcg(relevance: &[f64]) -> Result<f64> {
    if !relevance.iter().any(|&r| r > 0.0) {
        return Err(Error::DegenerateRelevance {
            context: "relevance list".into(),
        });
    }
    Ok(idcg_unchecked(relevance))
}

fn idcg_unchecked(relevance: &[f64]) -> f64 {
    (0..relevance.len())
        .map(|j| gain(relevance[j]) * discount(hard_positions(relevance, j) as f64))
        .sum()
}

fn has_ties(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Non-differentiable batch NDCG: DCG at [`hard_positions`] of `sims` over [`batch_idcg`].
///
/// Tied similarities share a rank, so the ratio can exceed 1; it is not clamped.
pub fn hard_ndcg_row(sims: &[f64], relevance: &[f64]) -> Result<f64> {
    check_lengths(sims, relevance)?;
    let idcg = batch_idcg(relevance)?;
    let dcg: f64 = (0..sims.len())
        .map(|j| gain(relevance[j]) * discount(hard_positions(sims, j) as f64))
        .sum();
    Ok(dcg / idcg)
}

fn check_lengths(sims: &[f64], relevance: &[f64]) -> Result<()> {
    if sims.len() != relevance.len() {
        return Err(Error::Shape(format!(
            "similarity row has {} entries, relevance row {}",
            sims.len(),
            relevance.len()
        )));
    }
    Ok(())
}

/// Scratch space reused across the rows of one loss evaluation.
#[derive(Default)]
struct RowScratch {
    sig: Vec<f64>,
    pos: Vec<f64>,
    coef: Vec<f64>,
}

impl RowScratch {
    /// Smooth NDCG of one query; writes `∂N̂DCG/∂sims` into `grad` when given.
    fn smooth_ndcg(
        &mut self,
        sims: &[f64],
        relevance: &[f64],
        idcg: f64,
        tau: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let n = sims.len();
        self.sig.clear();
        self.sig.resize(n * n, 0.0);
        self.pos.clear();
        self.pos.resize(n, 1.0);
        let inv_tau = 1.0 / tau;
        for j in 0..n {
            for k in (j + 1)..n {
                let p = logistic((sims[j] - sims[k]) * inv_tau);
                self.sig[j * n + k] = p;
                self.pos[k] += p;
                self.pos[j] += 1.0 - p;
            }
        }

        let mut dcg = 0.0;
        self.coef.clear();
        for (&rel, &pos) in relevance.iter().zip(&self.pos) {
            let g = gain(rel);
            let ln1p = (1.0 + pos).ln();
            dcg += g * LN_2 / ln1p;
            // d/dπ [g / log2(1 + π)] / IDCG
            self.coef
                .push(-g * LN_2 / (ln1p * ln1p * (1.0 + pos)) / idcg);
        }

        if let Some(grad) = grad {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..n {
                for k in (j + 1)..n {
                    let p = self.sig[j * n + k];
                    let w = p * (1.0 - p) * inv_tau;
                    let d = (self.coef[k] - self.coef[j]) * w;
                    grad[j] += d;
                    grad[k] -= d;
                }
            }
        }
        dcg / idcg
    }
}

/// Smooth NDCG of a single query list and its gradient with respect to `sims`.
pub fn smooth_ndcg_row(sims: &[f64], relevance: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_lengths(sims, relevance)?;
    check_tau(tau)?;
    let idcg = batch_idcg(relevance)?;
    let mut grad = vec![0.0; sims.len()];
    let value = RowScratch::default().smooth_ndcg(sims, relevance, idcg, tau, Some(&mut grad));
    Ok((value, grad))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn check_pair(s: &SimilarityMatrix, r: &RelevanceMatrix) -> Result<()> {
    if s.values().shape() != r.values().shape() {
        return Err(Error::Shape(format!(
            "similarity {:?} and relevance {:?} differ",
            s.values().shape(),
            r.values().shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    fn label(self, q: usize) -> String {
        match self {
            Direction::ImageToText => format!("image row {q}"),
            Direction::TextToImage => format!("caption column {q}"),
        }
    }
}

/// Per-query smooth and hard NDCG for both retrieval directions (image rows first).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNdcg {
    pub smooth: Vec<f64>,
    pub hard: Vec<f64>,
}

/// Evaluates smooth and hard NDCG of every query in both directions, without gradients.
pub fn batch_ndcg(s: &SimilarityMatrix, r: &RelevanceMatrix, tau: f64) -> Result<BatchNdcg> {
    check_tau(tau)?;
    let hard = batch_hard_ndcg(s, r)?;
    let n = s.len();
    let mut smooth = Vec::with_capacity(2 * n);
    let mut scratch = RowScratch::default();
    let st = s.values().transpose();
    let rt = r.values().transpose();
    for (sm, rm) in [(s.values(), r.values()), (&st, &rt)] {
        for q in 0..n {
            let (sims, rel) = (sm.row(q), rm.row(q));
            let idcg = batch_idcg(rel)?;
            smooth.push(scratch.smooth_ndcg(sims, rel, idcg, tau, None));
        }
    }
    Ok(BatchNdcg { smooth, hard })
}

/// Hard NDCG of every query in both directions (image rows first).
pub fn batch_hard_ndcg(s: &SimilarityMatrix, r: &RelevanceMatrix) -> Result<Vec<f64>> {
    check_pair(s, r)?;
    let n = s.len();
    let st = s.values().transpose();
    let rt = r.values().transpose();
    let mut out = Vec::with_capacity(2 * n);
    for (dir, sm, rm) in [
        (Direction::ImageToText, s.values(), r.values()),
        (Direction::TextToImage, &st, &rt),
    ] {
        for q in 0..n {
            let (sims, rel) = (sm.row(q), rm.row(q));
            let idcg = batch_idcg(rel).map_err(|_| Error::DegenerateRelevance {
                context: dir.label(q),
            })?;
            let dcg: f64 = (0..n)
                .map(|j| gain(rel[j]) * discount(hard_positions(sims, j) as f64))
                .sum();
            out.push(dcg / idcg);
        }
    }
    Ok(out)
}

/// Smooth-NDCG loss summed over both directions, each a mean of `1 − N̂DCG` over queries.
pub fn s_ndcg_loss(
    s: &SimilarityMatrix,
    r: &RelevanceMatrix,
    cfg: &SmoothConfig,
) -> Result<LossResult> {
    check_pair(s, r)?;
    cfg.validate()?;
    let n = s.len();
    if n == 0 {
        return Ok(LossResult::zero(0));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = LossResult::zero(n);
    let mut scratch = RowScratch::default();
    let mut row_grad = vec![0.0; n];
    let mut sims = vec![0.0; n];
    let mut rel = vec![0.0; n];

    for dir in [Direction::ImageToText, Direction::TextToImage] {
        for q in 0..n {
            match dir {
                Direction::ImageToText => {
                    sims.copy_from_slice(s.values().row(q));
                    rel.copy_from_slice(r.values().row(q));
                }
                Direction::TextToImage => {
                    for i in 0..n {
                        sims[i] = s.values()[(i, q)];
                        rel[i] = r.values()[(i, q)];
                    }
                }
            }
            let idcg = batch_idcg(&rel).map_err(|_| Error::DegenerateRelevance {
                context: dir.label(q),
            })?;
            if has_ties(&rel) {
                out.tied_relevance_queries += 1;
            }
            let ndcg = scratch.smooth_ndcg(&sims, &rel, idcg, cfg.tau, Some(&mut row_grad));
            out.query_ndcg.push(ndcg);
            out.value += inv_n * (1.0 - ndcg);
            for (c, g) in row_grad.iter().enumerate() {
                let idx = match dir {
                    Direction::ImageToText => (q, c),
                    Direction::TextToImage => (c, q),
                };
                out.grad[idx] -= inv_n * g;
            }
        }
    }
    Ok(out)
}

/// Index of the largest entry of `values` excluding `skip`; ties go to the lowest index.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.enumerate() {
        if j == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best
}

/// Bidirectional hinge triplet loss against the hardest in-batch negative.
pub fn triplet_loss(s: &SimilarityMatrix, cfg: &SmoothConfig) -> Result<LossResult> {
    cfg.validate()?;
    let n = s.len();
    let mut out = LossResult::zero(n);
    if n < 2 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    let m = s.values();
    for i in 0..n {
        let pos = m[(i, i)];
        if let Some((j, neg)) = hardest(m.row(i).iter().copied(), i) {
            let h = neg - pos + cfg.margin;
            if h > 0.0 {
                out.value += inv_n * h;
                out.grad[(i, j)] += inv_n;
                out.grad[(i, i)] -= inv_n;
            }
        }
        if let Some((j, neg)) = hardest((0..n).map(|k| m[(k, i)]), i) {
            let h = neg - pos + cfg.margin;
            if h > 0.0 {
                out.value += inv_n * h;
                out.grad[(j, i)] += inv_n;
                out.grad[(i, i)] -= inv_n;
            }
        }
    }
    Ok(out)
}

/// Unit-weight sum of the triplet and Smooth-NDCG losses.
pub fn joint_loss(
    s: &SimilarityMatrix,
    r: &RelevanceMatrix,
    cfg: &SmoothConfig,
) -> Result<LossResult> {
    let mut total = triplet_loss(s, cfg)?;
    let listwise = s_ndcg_loss(s, r, cfg)?;
    total.value += listwise.value;
    total.grad.add_assign(&listwise.grad)?;
    total.tied_relevance_queries = listwise.tied_relevance_queries;
    total.query_ndcg = listwise.query_ndcg;
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    #[serde(rename = "sndcg")]
    SNdcg,
    Joint,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Triplet, LossKind::SNdcg, LossKind::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::SNdcg => "sndcg",
            LossKind::Joint => "joint",
        }
    }

    pub fn needs_relevance(self) -> bool {
        !matches!(self, LossKind::Triplet)
    }

    pub fn evaluate(
        self,
        s: &SimilarityMatrix,
        r: &RelevanceMatrix,
        cfg: &SmoothConfig,
    ) -> Result<LossResult> {
        match self {
            LossKind::Triplet => triplet_loss(s, cfg),
            LossKind::SNdcg => s_ndcg_loss(s, r, cfg),
            LossKind::Joint => joint_loss(s, r, cfg),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "sndcg" | "s-ndcg" | "s_ndcg" => Ok(LossKind::SNdcg),
            "joint" => Ok(LossKind::Joint),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}, expected triplet|sndcg|joint"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0, 0.3), 0.5);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((sigmoid(0.02, 0.01) - expected).abs() < 1e-15);
        assert!((sigmoid(0.02, 0.01) - 0.880797).abs() < 1e-6);
        let low = sigmoid(-50.0, 0.01);
        assert!(low.is_finite() && (0.0..1e-300).contains(&low));
        assert_eq!(sigmoid(1e4, 1e-2), 1.0);
        assert!(sigmoid(-1e6, 1.0).is_finite());
    }

    #[test]
    fn literal_hard_positions() {
        let row = [0.9, 0.5, 0.1];
        assert_eq!(hard_positions(&row, 0), 1);
        assert_eq!(hard_positions(&row, 2), 3);
        assert_eq!(hard_positions(&[0.5, 0.5], 0), 1);
        assert_eq!(hard_positions(&[0.5, 0.5], 1), 1);
    }

    #[test]
    fn smooth_position_cases() {
        assert_eq!(smooth_positions(&[0.3], 0.1), vec![1.0]);
        assert_eq!(smooth_positions(&[0.2; 3], 0.1), vec![2.0; 3]);
        let p = smooth_positions(&[0.9, 0.1], 1e-3);
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn idcg_cases() {
        assert_eq!(batch_idcg(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(batch_idcg(&[1.0]).unwrap(), 1.0);
        assert_eq!(batch_idcg(&[1.0, 1.0]).unwrap(), 2.0);
        assert!(matches!(
            batch_idcg(&[0.0, 0.0]),
            Err(Error::DegenerateRelevance { .. })
        ));
    }

    #[test]
    fn single_item_row() {
        let (v, g) = smooth_ndcg_row(&[0.4], &[1.0], 1e-2).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn single_item_batch_losses_vanish() {
        let s = sim(&[vec![0.7]]);
        let r = RelevanceMatrix::new(Matrix::identity(1)).unwrap();
        let cfg = SmoothConfig::default();
        for kind in LossKind::ALL {
            let out = kind.evaluate(&s, &r, &cfg).unwrap();
            assert_eq!(out.value, 0.0);
            assert_eq!(out.grad.as_slice(), &[0.0]);
        }
    }

    #[test]
    fn triplet_hand_cases() {
        let cfg = SmoothConfig::new(1e-2, 0.2).unwrap();
        let quiet = triplet_loss(&sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &cfg).unwrap();
        assert_eq!(quiet.value, 0.0);
        assert!(quiet.grad.as_slice().iter().all(|&g| g == 0.0));

        let s = sim(&[vec![0.5, 0.6], vec![0.1, 0.5]]);
        let out = triplet_loss(&s, &cfg).unwrap();
        assert!((out.value - 0.3).abs() < 1e-12);
        // Row 0 and column 1 are active; both place their negative at (0, 1).
        assert_eq!(out.grad.as_slice(), &[-0.5, 1.0, 0.0, -0.5]);
    }

    #[test]
    fn hinge_kink_is_inactive() {
        let cfg = SmoothConfig::new(1e-2, 0.5).unwrap();
        let out = triplet_loss(&sim(&[vec![0.5, 0.0], vec![0.0, 0.5]]), &cfg).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hardest_negative_ties_break_low() {
        let cfg = SmoothConfig::new(1e-2, 0.2).unwrap();
        let s = sim(&[
            vec![0.1, 0.3, 0.3],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ]);
        let out = triplet_loss(&s, &cfg).unwrap();
        assert!(out.grad[(0, 1)] > 0.0);
        assert_eq!(out.grad[(0, 2)], 0.0);
    }

    #[test]
    fn shape_and_config_errors() {
        let s = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = RelevanceMatrix::new(Matrix::identity(3)).unwrap();
        assert!(matches!(
            s_ndcg_loss(&s, &r, &SmoothConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(SmoothConfig::new(0.0, 0.2).is_err());
        assert!(SmoothConfig::new(1e-2, -0.1).is_err());
        assert!(SimilarityMatrix::new(Matrix::zeros(2, 3)).is_err());
        assert!(SimilarityMatrix::new(Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn degenerate_column_is_named() {
        let s = sim(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let r = RelevanceMatrix::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let err = s_ndcg_loss(&s, &r, &SmoothConfig::default()).unwrap_err();
        match err {
            Error::DegenerateRelevance { context } => assert_eq!(context, "caption column 1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tied_similarities_push_hard_ndcg_above_one() {
        let v = hard_ndcg_row(&[0.5, 0.5], &[1.0, 0.5]).unwrap();
        let idcg = 1.0 + (0.5f64.exp2() - 1.0) / 3f64.log2();
        let dcg = 1.0 + (0.5f64.exp2() - 1.0);
        assert!((v - dcg / idcg).abs() < 1e-15);
        assert!(v > 1.0);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("sndcg".parse::<LossKind>().unwrap(), LossKind::SNdcg);
        assert!("listnet".parse::<LossKind>().is_err());
    }
}
