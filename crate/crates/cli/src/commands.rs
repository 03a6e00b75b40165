use std::path::{Path, PathBuf};

use anyhow::Context;
use rankforge_core::gradcheck::{self, GradcheckConfig, GradcheckReport};
use rankforge_core::synth::{self, MANIFEST_FILE};
use rankforge_core::tensorio::load_manifest;
use rankforge_core::trainer::{self, EncoderParams};
use rankforge_core::{
    DatasetManifest, MetricReport, SmoothConfig, Split, SynthSpec, TrainConfig, TrainTrace,
};
use serde_json::{json, Value};

use crate::args::{EvalArgs, GradcheckArgs, SynthArgs, TrainArgs, TrainFlags};
use crate::checkpoint::{self, CheckpointInfo};
use crate::{usage, with_record, Run};

pub const TRACE_FILE: &str = "trace.csv";

pub fn synth_spec(a: &SynthArgs) -> SynthSpec {
    let d = SynthSpec::default();
    SynthSpec {
        n_images: a.images.unwrap_or(d.n_images),
        captions_per_image: a.captions_per_image.unwrap_or(d.captions_per_image),
        latent_dim: a.latent_dim.unwrap_or(d.latent_dim),
        feature_dim_img: a.feature_dim_img.unwrap_or(d.feature_dim_img),
        feature_dim_txt: a.feature_dim_txt.unwrap_or(d.feature_dim_txt),
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        cluster_count: a.clusters.unwrap_or(d.cluster_count),
        cluster_spread: a.cluster_spread.unwrap_or(d.cluster_spread),
        embed_noise_ratio: a.embed_noise_ratio.unwrap_or(d.embed_noise_ratio),
        seed: a.seed,
    }
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let spec = synth_spec(a);
    spec.validate()?;
    let mut run = Run::new("synth", &a.out)?;
    run.configure(&spec, Some(spec.seed))?;
    with_record(run, |run| {
        let (manifest, summary) = synth::generate(&spec, &a.out)?;
        for f in [
            synth::IMAGE_FEATURES_FILE,
            synth::CAPTION_FEATURES_FILE,
            synth::CAPTION_EMBEDDINGS_FILE,
            MANIFEST_FILE,
        ] {
            run.produced(a.out.join(f));
        }
        println!("{}", manifest.path.display());
        Ok(json!({
            "images": spec.n_images,
            "captions": manifest.caption_features.rows(),
            "same_image_relevance": summary.same_image_relevance,
            "cross_image_relevance": summary.cross_image_relevance,
        }))
    })
}

pub fn train_config(flags: &TrainFlags, tau: f64) -> TrainConfig {
    TrainConfig {
        batch_size: flags.batch_size,
        epochs: flags.epochs,
        learning_rate: flags.lr,
        lr_decay_epoch: flags.lr_decay_epoch,
        loss_kind: flags.loss,
        smooth: SmoothConfig {
            tau,
            margin: flags.margin,
        },
        seed: flags.seed,
        joint_dim: flags.joint_dim,
    }
}

pub fn open_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Trains, then writes the checkpoint and trace into `run`'s directory.
pub fn train_into(
    run: &mut Run,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> anyhow::Result<(EncoderParams, TrainTrace)> {
    let (params, trace) = trainer::train(manifest, cfg)?;
    let info = CheckpointInfo {
        manifest: manifest.path.display().to_string(),
        config: cfg.clone(),
        best_epoch: trace.best_epoch,
        best_val_rsum: trace.best_val_rsum,
        dim_img: params.w_img.rows(),
        dim_txt: params.w_txt.rows(),
        joint_dim: params.joint_dim(),
    };
    for p in checkpoint::save(run.out_dir(), &params, &info)? {
        run.produced(p);
    }
    run.write(TRACE_FILE, trace.to_csv())?;
    Ok((params, trace))
}

pub fn trace_summary(trace: &TrainTrace) -> Value {
    let last = trace.epochs.last();
    json!({
        "epochs": trace.epochs.len(),
        "best_epoch": trace.best_epoch,
        "best_val_rsum": trace.best_val_rsum,
        "final_loss": last.map(|r| r.loss),
        "final_val_rsum": last.map(|r| r.val_rsum),
        "final_approx_error": last.map(|r| r.approx_error),
    })
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a.train, a.tau);
    cfg.validate()?;
    let mut run = Run::new("train", &a.out)?;
    run.configure(
        json!({ "manifest": a.manifest, "train": &cfg }),
        Some(cfg.seed),
    )?;
    with_record(run, |run| {
        let manifest = open_manifest(&a.manifest)?;
        let (_, trace) = train_into(run, &manifest, &cfg)?;
        for r in &trace.epochs {
            println!(
                "epoch {:>3}  loss {:.5}  val_rsum {:.1}  val_ndcg {:.4}  approx_error {:.4}",
                r.epoch, r.loss, r.val_rsum, r.val_ndcg, r.approx_error
            );
        }
        println!(
            "best epoch {} (val rsum {:.1}); checkpoint in {}",
            trace.best_epoch,
            trace.best_val_rsum,
            run.out_dir().display()
        );
        Ok(trace_summary(&trace))
    })
}

pub fn report_files(split: Split) -> (String, String) {
    (
        format!("metrics_{split}.json"),
        format!("metrics_{split}.csv"),
    )
}

pub fn write_report(run: &mut Run, split: Split, report: &MetricReport) -> anyhow::Result<()> {
    let (json_name, csv_name) = report_files(split);
    run.write(&json_name, serde_json::to_string_pretty(report)? + "\n")?;
    run.write(&csv_name, report.to_csv())?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let out: PathBuf = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
    let mut run = Run::new("eval", &out)?.record_name(format!("run_eval_{}.json", a.split));
    run.configure(
        json!({ "manifest": a.manifest, "checkpoint": a.checkpoint, "split": a.split }),
        None,
    )?;
    with_record(run, |run| {
        let (params, info) = checkpoint::load(&a.checkpoint)?;
        let manifest = open_manifest(&a.manifest)?;
        let report = trainer::evaluate(&params, &manifest, a.split)?;
        write_report(run, a.split, &report)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        Ok(json!({
            "loss": info.config.loss_kind,
            "rsum": report.rsum,
            "ndcg": report.ndcg,
            "map_at_r": report.map_at_r,
        }))
    })
}

pub fn gradcheck_config(a: &GradcheckArgs) -> anyhow::Result<GradcheckConfig> {
    let taus = match a.tau {
        Some(t) => vec![t],
        None => a.taus.0.clone(),
    };
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) {
        return Err(usage(
            "temperatures must be a non-empty list of positive values",
        ));
    }
    let (min_n, max_n) = a.n.map_or((a.min_n, a.max_n), |n| (n, n));
    if min_n < 1 || max_n < min_n {
        return Err(usage(format!("invalid batch size range {min_n}..={max_n}")));
    }
    Ok(GradcheckConfig {
        instances: a.instances,
        e2e_instances: a.e2e_instances,
        min_n,
        max_n,
        taus,
        margin: a.margin,
        step: gradcheck::DEFAULT_STEP,
        sim_tolerance: a.tolerance,
        e2e_tolerance: a.e2e_tolerance,
        seed: a.seed,
        corrupt: a.corrupt_gradient,
    })
}

fn print_gradcheck(report: &GradcheckReport) {
    println!("loss      suite        instances  worst_rel_error  tolerance  n   tau      seed");
    for c in &report.cases {
        println!(
            "{:<9} {:<12} {:>9}  {:>15.3e}  {:>9.0e}  {:<3} {:<8.0e} {}  {}",
            c.loss.as_str(),
            c.suite,
            c.instances,
            c.worst_error,
            c.tolerance,
            c.n,
            c.tau,
            c.worst_seed,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let cfg = gradcheck_config(a)?;
    let mut run = Run::new("gradcheck", &a.out)?;
    run.configure(&cfg, Some(cfg.seed))?;
    with_record(run, |run| {
        let report = gradcheck::run(&cfg)?;
        print_gradcheck(&report);
        run.write(
            "gradcheck.json",
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        if let Some(bad) = report.cases.iter().find(|c| !c.passed()) {
            anyhow::bail!(
                "{} {} gradient error {:.3e} exceeds {:.0e} (seed {}, n {}, tau {})",
                bad.loss,
                bad.suite,
                bad.worst_error,
                bad.tolerance,
                bad.worst_seed,
                bad.n,
                bad.tau
            );
        }
        Ok(serde_json::to_value(&report)?)
    })
}
