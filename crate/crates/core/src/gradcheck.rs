//! Central finite-difference verification of every analytic gradient.
//!
//! Two suites: `∂loss/∂S` for each loss on random similarity/relevance
//! batches, and end-to-end `∂loss/∂W` through the bi-encoder. The error of an
//! entry is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the
//! floor keeps entries that are zero up to rounding from dominating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{LossKind, SimilarityMatrix, SmoothConfig};
use crate::matrix::Matrix;
use crate::relevance::{CaptionEmbeddings, RelevanceMatrix};
use crate::trainer::{batch_gradient, EncoderParams};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_SIM_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_E2E_TOLERANCE: f64 = 1e-3;
pub const ERROR_FLOOR: f64 = 1e-4;
/// End-to-end instances stay small unless the configured range starts above this.
pub const E2E_MAX_N: usize = 8;
pub const DEFAULT_TAUS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    /// Random similarity-level instances per loss kind.
    pub instances: usize,
    /// End-to-end instances per loss kind.
    pub e2e_instances: usize,
    /// Inclusive range of batch sizes for the similarity-level suite.
    pub min_n: usize,
    pub max_n: usize,
    pub taus: Vec<f64>,
    pub margin: f64,
    pub step: f64,
    pub sim_tolerance: f64,
    pub e2e_tolerance: f64,
    pub seed: u64,
    /// Negative control: perturbs one analytic entry per instance.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 120,
            e2e_instances: 12,
            min_n: 2,
            max_n: 16,
            taus: DEFAULT_TAUS.to_vec(),
            margin: crate::losses::DEFAULT_MARGIN,
            step: DEFAULT_STEP,
            sim_tolerance: DEFAULT_SIM_TOLERANCE,
            e2e_tolerance: DEFAULT_E2E_TOLERANCE,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCase {
    pub loss: LossKind,
    pub suite: &'static str,
    pub worst_error: f64,
    /// Seed that regenerates the worst instance.
    pub worst_seed: u64,
    pub n: usize,
    pub tau: f64,
    pub instances: usize,
    pub tolerance: f64,
}

impl WorstCase {
    pub fn passed(&self) -> bool {
        self.worst_error < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<WorstCase>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(WorstCase::passed)
    }
}

#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Largest entrywise [`relative_error`] between two equally shaped slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Unit-norm random caption embeddings turned into a batch relevance matrix.
pub fn random_relevance(rng: &mut impl Rng, n: usize, dim: usize) -> RelevanceMatrix {
    loop {
        let raw = Matrix::from_fn(n, dim, |_, _| rng.sample(StandardNormal));
        if let Ok(e) = CaptionEmbeddings::new(raw) {
            let ids: Vec<usize> = (0..n).collect();
            return e.batch_relevance(&ids).expect("distinct ids");
        }
    }
}

/// Either widely spread similarities or a cluster of near-ties on the scale of `tau`.
pub fn random_similarity(rng: &mut impl Rng, n: usize, tau: f64) -> SimilarityMatrix {
    let spread = rng.random_bool(0.5);
    let base: f64 = rng.random_range(-0.5..0.5);
    let m = Matrix::from_fn(n, n, |_, _| {
        if spread {
            rng.random_range(-1.0..1.0)
        } else {
            base + 3.0 * tau * rng.sample::<f64, _>(StandardNormal)
        }
    });
    SimilarityMatrix::new(m).expect("finite")
}

/// Distance from the nearest non-differentiable point of the triplet loss.
pub fn triplet_kink_distance(s: &SimilarityMatrix, margin: f64) -> f64 {
    let m = s.values();
    let n = m.rows();
    let mut d = f64::INFINITY;
    for i in 0..n {
        for lane in [m.row(i).to_vec(), m.column(i)] {
            let mut negs: Vec<f64> = lane
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            if negs.is_empty() {
                continue;
            }
            negs.sort_by(|a, b| b.total_cmp(a));
            d = d.min((negs[0] - m[(i, i)] + margin).abs());
            if negs.len() > 1 {
                d = d.min((negs[0] - negs[1]).abs());
            }
        }
    }
    d
}

/// Five-point central differences of `f` with respect to every entry of `x`.
///
/// The O(h⁴) stencil matters at small temperatures: with `h = 1e-6` and
/// `τ = 1e-3` the three-point truncation error alone reaches ~1e-4 relative.
pub fn numeric_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        let mut at = |offset: f64| {
            probe.as_mut_slice()[k] = orig + offset;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        probe.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
    }
    grad
}

fn instance_seed(base: u64, suite: u64, kind: LossKind, k: usize) -> u64 {
    base.wrapping_mul(0x1000_0000_01B3) ^ (suite << 56) ^ ((kind as u64) << 48) ^ k as u64
}

/// Similarity-level check of one instance; returns `(error, n, tau)`, or `None`
/// when the draw lands within `100·step` of a triplet kink.
pub fn check_similarity_instance(
    kind: LossKind,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<Option<(f64, usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_n..=cfg.max_n);
    let tau = cfg.taus[rng.random_range(0..cfg.taus.len())];
    let smooth = SmoothConfig::new(tau, cfg.margin)?;
    let s = random_similarity(&mut rng, n, tau);
    let r = random_relevance(&mut rng, n, 4);
    if kind != LossKind::SNdcg && triplet_kink_distance(&s, cfg.margin) < 100.0 * cfg.step {
        return Ok(None);
    }
    let mut analytic = kind.evaluate(&s, &r, &smooth)?.grad;
    if cfg.corrupt {
        let k = rng.random_range(0..analytic.as_slice().len());
        analytic.as_mut_slice()[k] += 1e-2 * (1.0 + analytic.as_slice()[k].abs());
    }
    let numeric = numeric_gradient(s.values(), cfg.step, |m| {
        let probe = SimilarityMatrix::new(m.clone()).expect("finite");
        kind.evaluate(&probe, &r, &smooth).expect("valid").value
    });
    Ok(Some((
        max_relative_error(analytic.as_slice(), numeric.as_slice()),
        n,
        tau,
    )))
}

/// End-to-end check of `∂loss/∂W` for one random bi-encoder instance (N ≤ 8, dims ≤ 16).
pub fn check_e2e_instance(
    kind: LossKind,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<Option<(f64, usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_n..=cfg.max_n.min(E2E_MAX_N).max(cfg.min_n));
    let d_img = rng.random_range(2..=16usize);
    let d_txt = rng.random_range(2..=16usize);
    let joint = rng.random_range(2..=16usize);
    let tau = cfg.taus[rng.random_range(0..cfg.taus.len())];
    let smooth = SmoothConfig::new(tau, cfg.margin)?;
    let params = EncoderParams::random(d_img, d_txt, joint, rng.random());
    let x_img = Matrix::from_fn(n, d_img, |_, _| rng.sample(StandardNormal));
    let x_txt = Matrix::from_fn(n, d_txt, |_, _| rng.sample(StandardNormal));
    let r = random_relevance(&mut rng, n, 4);

    let out = batch_gradient(&params, &x_img, &x_txt, &r, kind, &smooth)?;
    if kind != LossKind::SNdcg && triplet_kink_distance(&out.similarity, cfg.margin) < 1e-3 {
        return Ok(None);
    }
    let value_with = |p: &EncoderParams| {
        batch_gradient(p, &x_img, &x_txt, &r, kind, &smooth)
            .expect("valid")
            .loss
            .value
    };
    let num_img = numeric_gradient(&params.w_img, cfg.step, |w| {
        value_with(&EncoderParams {
            w_img: w.clone(),
            w_txt: params.w_txt.clone(),
        })
    });
    let num_txt = numeric_gradient(&params.w_txt, cfg.step, |w| {
        value_with(&EncoderParams {
            w_img: params.w_img.clone(),
            w_txt: w.clone(),
        })
    });
    let mut grad_img = out.grad_w_img;
    if cfg.corrupt {
        let k = rng.random_range(0..grad_img.as_slice().len());
        grad_img.as_mut_slice()[k] += 1e-2 * (1.0 + grad_img.as_slice()[k].abs());
    }
    let err = max_relative_error(grad_img.as_slice(), num_img.as_slice()).max(max_relative_error(
        out.grad_w_txt.as_slice(),
        num_txt.as_slice(),
    ));
    Ok(Some((err, n, tau)))
}

type InstanceCheck = fn(LossKind, u64, &GradcheckConfig) -> Result<Option<(f64, usize, f64)>>;

fn run_suite(
    cfg: &GradcheckConfig,
    suite: &'static str,
    suite_id: u64,
    count: usize,
    tolerance: f64,
    check: InstanceCheck,
) -> Result<Vec<WorstCase>> {
    let mut cases = Vec::new();
    for kind in LossKind::ALL {
        let mut worst = WorstCase {
            loss: kind,
            suite,
            worst_error: 0.0,
            worst_seed: 0,
            n: 0,
            tau: 0.0,
            instances: 0,
            tolerance,
        };
        let mut k = 0usize;
        while worst.instances < count {
            let seed = instance_seed(cfg.seed, suite_id, kind, k);
            k += 1;
            if let Some((err, n, tau)) = check(kind, seed, cfg)? {
                worst.instances += 1;
                if err >= worst.worst_error {
                    worst.worst_error = err;
                    worst.worst_seed = seed;
                    worst.n = n;
                    worst.tau = tau;
                }
            }
        }
        cases.push(worst);
    }
    Ok(cases)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.taus.is_empty() || cfg.min_n < 1 || cfg.max_n < cfg.min_n {
        return Err(crate::Error::Config(
            "gradcheck needs at least one tau and min_n ≤ max_n".into(),
        ));
    }
    let mut cases = run_suite(
        cfg,
        "similarity",
        1,
        cfg.instances,
        cfg.sim_tolerance,
        check_similarity_instance,
    )?;
    cases.extend(run_suite(
        cfg,
        "end_to_end",
        2,
        cfg.e2e_instances,
        cfg.e2e_tolerance,
        check_e2e_instance,
    )?);
    Ok(GradcheckReport { cases })
}
