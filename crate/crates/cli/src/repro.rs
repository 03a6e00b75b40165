//! Triplet / S-NDCG / joint ablation over several seeds of the synthetic dataset.

use std::collections::BTreeMap;
use std::path::Path;

use rankforge_core::synth::{self, MANIFEST_FILE};
use rankforge_core::trainer::evaluate;
use rankforge_core::{DatasetManifest, LossKind, MetricReport, Split, SynthSpec, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::ReproArgs;
use crate::commands::{open_manifest, trace_summary, train_into, write_report};
use crate::{parallel, usage, with_record, Run};

pub const CSV_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "ablation.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub loss: LossKind,
    pub rsum: f64,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub ndcg: f64,
    pub map_at_r: f64,
    pub r_precision: f64,
    pub map_at_r_cluster: Option<f64>,
    pub r_precision_cluster: Option<f64>,
    pub best_epoch: usize,
}

impl AblationRow {
    pub fn new(seed: u64, loss: LossKind, best_epoch: usize, r: &MetricReport) -> Self {
        Self {
            seed,
            loss,
            rsum: r.rsum,
            i2t_r1: r.r_at_k.i2t.get(1),
            i2t_r5: r.r_at_k.i2t.get(5),
            i2t_r10: r.r_at_k.i2t.get(10),
            t2i_r1: r.r_at_k.t2i.get(1),
            t2i_r5: r.r_at_k.t2i.get(5),
            t2i_r10: r.r_at_k.t2i.get(10),
            ndcg: r.ndcg,
            map_at_r: r.map_at_r,
            r_precision: r.r_precision,
            map_at_r_cluster: r.map_at_r_cluster.map(|v| v.mean()),
            r_precision_cluster: r.r_precision_cluster.map(|v| v.mean()),
            best_epoch,
        }
    }

    /// Mean R@1 over both directions.
    pub fn r1(&self) -> f64 {
        0.5 * (self.i2t_r1 + self.t2i_r1)
    }
}

pub const CSV_HEADER: &str = "seed,loss,rsum,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,ndcg,map_at_r,r_precision,map_at_r_cluster,r_precision_cluster,best_epoch";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.loss,
            r.rsum,
            r.i2t_r1,
            r.i2t_r5,
            r.i2t_r10,
            r.t2i_r1,
            r.t2i_r5,
            r.t2i_r10,
            r.ndcg,
            r.map_at_r,
            r.r_precision,
            opt(r.map_at_r_cluster),
            opt(r.r_precision_cluster),
            r.best_epoch
        ));
    }
    out
}

/// Seeds (out of `seeds`) on which a per-seed comparison held.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparisons {
    pub seeds: usize,
    pub joint_rsum_ge_triplet: usize,
    pub sndcg_r1_lt_triplet: usize,
    pub joint_ndcg_gt_triplet: usize,
    pub joint_map_at_r_gt_triplet: usize,
    pub joint_map_at_r_cluster_gt_triplet: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossMeans {
    pub rsum: f64,
    pub r1: f64,
    pub ndcg: f64,
    pub map_at_r: f64,
    pub map_at_r_cluster: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub means: BTreeMap<String, LossMeans>,
    pub comparisons: Comparisons,
}

fn find(rows: &[AblationRow], seed: u64, loss: LossKind) -> Option<&AblationRow> {
    rows.iter().find(|r| r.seed == seed && r.loss == loss)
}

pub fn summarize(rows: &[AblationRow]) -> AblationSummary {
    let mut means = BTreeMap::new();
    for kind in LossKind::ALL {
        let of: Vec<&AblationRow> = rows.iter().filter(|r| r.loss == kind).collect();
        if of.is_empty() {
            continue;
        }
        let n = of.len() as f64;
        let mean = |f: &dyn Fn(&AblationRow) -> f64| of.iter().map(|r| f(r)).sum::<f64>() / n;
        let cluster = of
            .iter()
            .map(|r| r.map_at_r_cluster)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        means.insert(
            kind.to_string(),
            LossMeans {
                rsum: mean(&|r| r.rsum),
                r1: mean(&|r| r.r1()),
                ndcg: mean(&|r| r.ndcg),
                map_at_r: mean(&|r| r.map_at_r),
                map_at_r_cluster: cluster,
            },
        );
    }

    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut c = Comparisons {
        seeds: 0,
        joint_rsum_ge_triplet: 0,
        sndcg_r1_lt_triplet: 0,
        joint_ndcg_gt_triplet: 0,
        joint_map_at_r_gt_triplet: 0,
        joint_map_at_r_cluster_gt_triplet: 0,
    };
    for seed in seeds {
        let (Some(t), Some(s), Some(j)) = (
            find(rows, seed, LossKind::Triplet),
            find(rows, seed, LossKind::SNdcg),
            find(rows, seed, LossKind::Joint),
        ) else {
            continue;
        };
        c.seeds += 1;
        c.joint_rsum_ge_triplet += (j.rsum >= t.rsum) as usize;
        c.sndcg_r1_lt_triplet += (s.r1() < t.r1()) as usize;
        c.joint_ndcg_gt_triplet += (j.ndcg > t.ndcg) as usize;
        c.joint_map_at_r_gt_triplet += (j.map_at_r > t.map_at_r) as usize;
        if let (Some(a), Some(b)) = (j.map_at_r_cluster, t.map_at_r_cluster) {
            c.joint_map_at_r_cluster_gt_triplet += (a > b) as usize;
        }
    }
    AblationSummary {
        means,
        comparisons: c,
    }
}

/// Markdown table in the layout of a loss ablation: one line per loss, means over seeds.
pub fn table(summary: &AblationSummary) -> String {
    let mut out = String::from(
        "| loss | RSUM | R@1 | NDCG | mAP@R | mAP@R (cluster) |\n|---|---|---|---|---|---|\n",
    );
    for kind in LossKind::ALL {
        if let Some(m) = summary.means.get(kind.as_str()) {
            out.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.4} | {:.4} | {} |\n",
                kind,
                m.rsum,
                m.r1,
                m.ndcg,
                m.map_at_r,
                m.map_at_r_cluster
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
            ));
        }
    }
    out
}

/// Trains all three losses on one dataset and scores each checkpoint on the test split.
pub fn seed_rows(
    manifest: &DatasetManifest,
    seed: u64,
    base: &TrainConfig,
) -> anyhow::Result<Vec<AblationRow>> {
    LossKind::ALL
        .iter()
        .map(|&loss| {
            let cfg = TrainConfig {
                loss_kind: loss,
                seed,
                ..base.clone()
            };
            let (params, trace) = rankforge_core::trainer::train(manifest, &cfg)?;
            let report = evaluate(&params, manifest, Split::Test)?;
            Ok(AblationRow::new(seed, loss, trace.best_epoch, &report))
        })
        .collect()
}

/// The ablation without touching the filesystem: seed `s` uses dataset seed `s`
/// and initialisation seed `s`.
pub fn ablation_in_memory(
    seeds: u64,
    spec: &SynthSpec,
    base: &TrainConfig,
    threads: usize,
) -> anyhow::Result<Vec<AblationRow>> {
    let results = parallel::map((0..seeds).collect(), threads, |seed| -> anyhow::Result<_> {
        let (m, _) = synth::generate_in_memory(
            &SynthSpec {
                seed,
                ..spec.clone()
            },
            format!("seed-{seed}").into(),
        )?;
        seed_rows(&m, seed, base)
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn seed_on_disk(
    dir: &Path,
    seed: u64,
    spec: &SynthSpec,
    base: &TrainConfig,
) -> anyhow::Result<(Vec<AblationRow>, Vec<std::path::PathBuf>)> {
    let data = dir.join("data");
    synth::generate(
        &SynthSpec {
            seed,
            ..spec.clone()
        },
        &data,
    )?;
    let manifest = open_manifest(&data.join(MANIFEST_FILE))?;
    let mut rows = Vec::new();
    let mut dirs = vec![data];
    for loss in LossKind::ALL {
        let cfg = TrainConfig {
            loss_kind: loss,
            seed,
            ..base.clone()
        };
        let sub_dir = dir.join(loss.as_str());
        let mut sub = Run::new("train", &sub_dir)?;
        sub.configure(
            json!({ "manifest": manifest.path, "train": &cfg }),
            Some(seed),
        )?;
        let outcome = train_into(&mut sub, &manifest, &cfg).and_then(|(params, trace)| {
            let report = evaluate(&params, &manifest, Split::Test)?;
            write_report(&mut sub, Split::Test, &report)?;
            Ok((trace, report))
        });
        let summary = match &outcome {
            Ok((trace, _)) => Ok(trace_summary(trace)),
            Err(e) => Err(anyhow::anyhow!("{e:#}")),
        };
        sub.finish(&summary)?;
        let (trace, report) = outcome?;
        rows.push(AblationRow::new(seed, loss, trace.best_epoch, &report));
        dirs.push(sub_dir);
    }
    Ok((rows, dirs))
}

pub fn run(a: &ReproArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_images: a.images.unwrap_or(d.n_images),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        ..d
    };
    spec.validate()?;
    let base = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        lr_decay_epoch: None,
        loss_kind: LossKind::Joint,
        smooth: rankforge_core::SmoothConfig {
            tau: a.tau,
            margin: a.margin,
        },
        seed: 0,
        joint_dim: a.joint_dim,
    };
    base.validate()?;
    let threads = parallel::thread_cap()?;
    let mut run = Run::new("repro", &a.out)?;
    run.configure(
        json!({ "seeds": a.seeds, "synth": &spec, "train": &base }),
        None,
    )?;
    with_record(run, |run| {
        let jobs: Vec<u64> = (0..a.seeds).collect();
        let results = parallel::map(jobs, threads, |seed| {
            seed_on_disk(&a.out.join(format!("seed-{seed}")), seed, &spec, &base)
        });
        let mut rows = Vec::new();
        for r in results {
            let (seed_rows, dirs) = r?;
            rows.extend(seed_rows);
            dirs.into_iter().for_each(|d| run.produced(d));
        }
        let summary = summarize(&rows);
        run.write(CSV_FILE, to_csv(&rows))?;
        run.write(SUMMARY_FILE, serde_json::to_string_pretty(&summary)? + "\n")?;
        let md = table(&summary);
        run.write("ablation.md", &md)?;
        print!("{md}");
        let c = &summary.comparisons;
        println!(
            "joint RSUM >= triplet on {}/{} seeds; S-NDCG R@1 < triplet on {}/{}; joint NDCG > triplet on {}/{}; joint cluster mAP@R > triplet on {}/{}",
            c.joint_rsum_ge_triplet,
            c.seeds,
            c.sndcg_r1_lt_triplet,
            c.seeds,
            c.joint_ndcg_gt_triplet,
            c.seeds,
            c.joint_map_at_r_cluster_gt_triplet,
            c.seeds
        );
        Ok(serde_json::to_value(&summary)?)
    })
}
