//! Approximation error and retrieval quality as functions of the temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankforge_core::gradcheck::random_relevance;
use rankforge_core::metrics::approximation_error;
use rankforge_core::relevance::CaptionEmbeddings;
use rankforge_core::synth::sample_batch;
use rankforge_core::trainer::{batch_similarity, encode, evaluate, EncoderParams, Side};
use rankforge_core::{
    DatasetManifest, Matrix, RelevanceMatrix, SimilarityMatrix, Split, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::args::TausweepArgs;
use crate::commands::{open_manifest, trace_summary, train_config, train_into};
use crate::{parallel, usage, with_record, Run};

pub const CSV_HEADER: &str = "tau,approx_error_mean,approx_error_max,rsum,ndcg";
pub const CSV_FILE: &str = "tausweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub approx_error_mean: f64,
    pub approx_error_max: f64,
    pub rsum: Option<f64>,
    pub ndcg: Option<f64>,
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.tau,
            r.approx_error_mean,
            r.approx_error_max,
            opt(r.rsum),
            opt(r.ndcg)
        ));
    }
    out
}

/// A fixed set of batches, evaluated identically at every temperature.
pub type Batches = Vec<(SimilarityMatrix, RelevanceMatrix)>;

/// Uniform similarities in `[-1, 1]` with random graded relevance.
pub fn random_batches(count: usize, n: usize, seed: u64) -> Batches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
            (
                SimilarityMatrix::new(s).expect("finite"),
                random_relevance(&mut rng, n, 16),
            )
        })
        .collect()
}

/// Training batches scored by a seeded, untrained encoder.
pub fn dataset_batches(
    manifest: &DatasetManifest,
    count: usize,
    n: usize,
    seed: u64,
    joint_dim: usize,
) -> anyhow::Result<Batches> {
    let embeddings = CaptionEmbeddings::new(manifest.caption_embeddings.clone())?;
    let params = EncoderParams::random(
        manifest.image_features.cols(),
        manifest.caption_features.cols(),
        joint_dim,
        seed,
    );
    let n = n.min(manifest.images_in(Split::Train).len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let batch = sample_batch(manifest, n, &mut rng)?;
        let (imgs, caps): (Vec<usize>, Vec<usize>) = batch.into_iter().unzip();
        let img = encode(
            &params,
            &manifest.image_features.select_rows(&imgs)?,
            Side::Image,
        )?;
        let txt = encode(
            &params,
            &manifest.caption_features.select_rows(&caps)?,
            Side::Text,
        )?;
        out.push((
            batch_similarity(&img, &txt)?,
            embeddings.batch_relevance(&caps)?,
        ));
    }
    Ok(out)
}

/// Mean over batches of the per-batch mean error, and the largest single-query error.
pub fn sweep_errors(batches: &Batches, taus: &[f64]) -> anyhow::Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&tau| {
            let mut mean = 0.0;
            let mut max = 0.0f64;
            for (s, r) in batches {
                let e = approximation_error(s, r, tau)?;
                mean += e.mean;
                max = max.max(e.max);
            }
            Ok((mean / batches.len().max(1) as f64, max))
        })
        .collect()
}

pub fn run(a: &TausweepArgs) -> anyhow::Result<()> {
    let taus = a.taus.0.clone();
    if taus.is_empty() {
        return Err(usage("--taus must list at least one temperature"));
    }
    if taus.iter().any(|t| !(*t > 0.0)) {
        return Err(usage("temperatures must be positive"));
    }
    if a.full && a.manifest.is_none() {
        return Err(usage("--full needs --manifest"));
    }
    if a.batches == 0 {
        return Err(usage("--batches must be at least 1"));
    }
    let base = train_config(&a.train, taus[0]);
    base.validate()?;
    let threads = parallel::thread_cap()?;
    let mode = if a.random_batches || a.manifest.is_none() {
        "random_batches"
    } else if a.full {
        "training"
    } else {
        "dataset_batches"
    };
    let mut run = Run::new("tausweep", &a.out)?;
    run.configure(
        json!({
            "taus": taus,
            "approx_error_source": mode,
            "manifest": a.manifest,
            "full": a.full,
            "batches": a.batches,
            "train": &base,
        }),
        Some(base.seed),
    )?;
    with_record(run, |run| {
        let manifest = a.manifest.as_deref().map(open_manifest).transpose()?;
        let mut rows: Vec<SweepRow> = taus
            .iter()
            .map(|&tau| SweepRow {
                tau,
                approx_error_mean: 0.0,
                approx_error_max: 0.0,
                rsum: None,
                ndcg: None,
            })
            .collect();

        let fixed = match (mode, &manifest) {
            ("random_batches", _) => Some(random_batches(a.batches, base.batch_size, base.seed)),
            ("dataset_batches", Some(m)) => Some(dataset_batches(
                m,
                a.batches,
                base.batch_size,
                base.seed,
                base.joint_dim,
            )?),
            _ => None,
        };
        if let Some(batches) = &fixed {
            for (row, (mean, max)) in rows.iter_mut().zip(sweep_errors(batches, &taus)?) {
                row.approx_error_mean = mean;
                row.approx_error_max = max;
            }
        }

        if a.full {
            let m = manifest.as_ref().expect("checked above");
            let cfgs: Vec<TrainConfig> = taus
                .iter()
                .map(|&tau| TrainConfig {
                    smooth: rankforge_core::SmoothConfig { tau, ..base.smooth },
                    ..base.clone()
                })
                .collect();
            let dirs: Vec<_> = taus
                .iter()
                .map(|t| a.out.join(format!("tau_{t:e}")))
                .collect();
            let jobs: Vec<_> = cfgs.iter().zip(&dirs).collect();
            let results = parallel::map(jobs, threads, |(cfg, dir)| -> anyhow::Result<_> {
                let mut sub = Run::new("train", dir)?;
                sub.configure(json!({ "manifest": m.path, "train": cfg }), Some(cfg.seed))?;
                let trained = train_into(&mut sub, m, cfg);
                let summary = match &trained {
                    Ok((_, trace)) => Ok(trace_summary(trace)),
                    Err(e) => Err(anyhow::anyhow!("{e:#}")),
                };
                sub.finish(&summary)?;
                let (params, trace) = trained?;
                let report = evaluate(&params, m, Split::Test)?;
                Ok((trace, report))
            });
            for ((row, result), dir) in rows.iter_mut().zip(results).zip(&dirs) {
                let (trace, report) = result?;
                run.produced(dir.clone());
                row.rsum = Some(report.rsum);
                row.ndcg = Some(report.ndcg);
                if let (None, Some(last)) = (&fixed, trace.epochs.last()) {
                    row.approx_error_mean = last.approx_error;
                    row.approx_error_max = last.approx_error_max;
                }
            }
        }

        let csv = to_csv(&rows);
        print!("{csv}");
        run.write(CSV_FILE, &csv)?;
        Ok(serde_json::to_value(&rows)?)
    })
}
