//! End-to-end experiment orchestration: run training and emit the full
//! artifact set (config snapshot, training log, checkpoints, metric tables,
//! heatmaps, reconstruction rasters, pass/fail summary), or re-evaluate a
//! saved checkpoint without training.

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::env::Variant;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsBundle};
use crate::model::Model;
use crate::report::{self, ColorScale};
use crate::selectivity::SelectivityMode;
use crate::train::{self, EvalRecord};
use std::path::{Path, PathBuf};

/// Thresholds shared by the run summary and the acceptance suite.
pub const SLOPE_THRESHOLD: f64 = 0.8;
pub const POLICY_CONCENTRATION: f64 = 0.85;
pub const REDUNDANT_COLUMN_TOL: f64 = 1e-9;
pub const DOWN_MASS_THRESHOLD: f64 = 0.85;
pub const RECON_MSE_THRESHOLD: f64 = 0.005;

pub struct RunResult {
    pub metrics: MetricsBundle,
    pub summary: String,
    pub output_dir: PathBuf,
}

/// The steps at which periodic evaluation (and checkpointing) fires.
fn eval_steps(steps: usize, interval: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=steps).filter(|t| t % interval.max(1) == 0).collect();
    if steps > 0 && out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

/// Every file a successful `run` writes, relative to the output directory.
pub fn manifest(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let mut files = vec![
        PathBuf::from("config.cfg"),
        PathBuf::from("train_log.csv"),
        PathBuf::from("checkpoint.ckpt"),
        PathBuf::from("summary.txt"),
    ];
    for t in eval_steps(cfg.training.steps, cfg.training.eval_interval) {
        files.push(PathBuf::from(format!("checkpoints/step_{t:06}.ckpt")));
    }
    files.extend(metrics_files(cfg));
    files
}

/// The metric artifacts shared by `run` and `evaluate`.
fn metrics_files(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = [
        "metrics/slope_matrix.csv",
        "metrics/raw_slope_matrix.csv",
        "metrics/policy_matrix.csv",
        "metrics/selectivity_matrix.csv",
        "metrics/objective_matrix.csv",
        "metrics/metrics_summary.csv",
        "plots/slope_matrix.svg",
        "plots/policy_matrix.svg",
        "plots/selectivity_matrix.svg",
        "plots/objective_matrix.svg",
    ]
    .iter()
    .map(PathBuf::from)
    .collect();
    for i in 0..cfg.model.resolved_latent() {
        files.push(PathBuf::from(format!("rasters/sample_{i:02}_original.pgm")));
        files.push(PathBuf::from(format!(
            "rasters/sample_{i:02}_reconstruction.pgm"
        )));
    }
    files
}

fn train_log_header(k_n: usize) -> Vec<String> {
    let mut h = vec![
        "step".to_string(),
        "recon_loss".to_string(),
        "disent_term".to_string(),
    ];
    for k in 0..k_n {
        h.push(format!("entropy_{k}"));
    }
    h
}

fn train_log_row(rec: &EvalRecord) -> Vec<String> {
    let mut row = vec![
        rec.step.to_string(),
        report::fmt_f64(rec.recon_mse),
        report::fmt_f64(rec.disent_term),
    ];
    row.extend(rec.policy_entropy.iter().map(|e| report::fmt_f64(*e)));
    row
}

/// Train under `cfg` and write the full artifact set into
/// `cfg.output_dir`. Deterministic: identical config and seeds produce
/// byte-identical files (wall-clock is never serialized).
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.cfg"), cfg.snapshot())?;

    let mut log_rows: Vec<Vec<String>> = Vec::new();
    let mut on_eval = |model: &Model<f64>, rec: &EvalRecord| -> Result<()> {
        log_rows.push(train_log_row(rec));
        checkpoint::save(model, &out.join(format!("checkpoints/step_{:06}.ckpt", rec.step)))
    };
    let outcome = train::train::<f64>(
        &cfg.training,
        &cfg.env,
        &cfg.model,
        None,
        Some(&mut on_eval),
    )?;

    report::write_csv(
        &out.join("train_log.csv"),
        &train_log_header(outcome.model.num_policies()),
        &log_rows,
    )?;
    checkpoint::save(&outcome.model, &out.join("checkpoint.ckpt"))?;

    // the emitted metrics honor the configured probe size
    let probe =
        metrics::probe_states::<f64>(&cfg.env, metrics::PROBE_SEED, cfg.eval.probe_set_size)?;
    let bundle =
        metrics::metrics_bundle(&outcome.model, &cfg.env, &probe, &cfg.training.selectivity())?;
    write_metrics_artifacts(cfg, out, &outcome.model, &bundle, &probe)?;

    let summary = summarize(cfg, &bundle, Some(&outcome.log));
    std::fs::write(out.join("summary.txt"), &summary)?;
    Ok(RunResult {
        metrics: bundle,
        summary,
        output_dir: out.clone(),
    })
}

/// Recompute and re-emit all metric artifacts from a saved checkpoint,
/// without training.
pub fn evaluate(cfg: &ExperimentConfig, ckpt: &Path) -> Result<MetricsBundle> {
    cfg.validate()?;
    let model: Model<f64> = checkpoint::load(ckpt)?;
    checkpoint::check_compatible(
        &model,
        cfg.model.variant,
        cfg.env.grid_height,
        cfg.env.grid_width,
        cfg.env.action_count(),
    )?;
    if cfg.model.latent != 0 && cfg.model.latent != model.latent_dim() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} latent features, config wants {}",
            model.latent_dim(),
            cfg.model.latent
        )));
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let probe =
        metrics::probe_states::<f64>(&cfg.env, metrics::PROBE_SEED, cfg.eval.probe_set_size)?;
    let bundle = metrics::metrics_bundle(&model, &cfg.env, &probe, &cfg.training.selectivity())?;
    write_metrics_artifacts(cfg, out, &model, &bundle, &probe)?;
    std::fs::write(out.join("eval_summary.txt"), summarize(cfg, &bundle, None))?;
    Ok(bundle)
}

fn write_metrics_artifacts(
    cfg: &ExperimentConfig,
    out: &Path,
    model: &Model<f64>,
    bundle: &MetricsBundle,
    probe: &[crate::env::GridState<f64>],
) -> Result<()> {
    let feature_labels: Vec<String> = (0..bundle.slope_matrix.len())
        .map(|k| format!("feature_{k}"))
        .collect();
    let policy_labels: Vec<String> = (0..bundle.policy_matrix.len())
        .map(|k| format!("policy_{k}"))
        .collect();

    report::write_matrix_csv(
        &out.join("metrics/slope_matrix.csv"),
        "feature",
        &bundle.factor_labels,
        &feature_labels,
        &bundle.slope_matrix,
    )?;
    report::write_matrix_csv(
        &out.join("metrics/raw_slope_matrix.csv"),
        "feature",
        &bundle.factor_labels,
        &feature_labels,
        &bundle.raw_slope_matrix,
    )?;
    report::write_matrix_csv(
        &out.join("metrics/policy_matrix.csv"),
        "policy",
        &bundle.action_labels,
        &policy_labels,
        &bundle.policy_matrix,
    )?;
    report::write_matrix_csv(
        &out.join("metrics/selectivity_matrix.csv"),
        "policy",
        &bundle.action_labels,
        &policy_labels,
        &bundle.selectivity_matrix,
    )?;
    report::write_matrix_csv(
        &out.join("metrics/objective_matrix.csv"),
        "policy",
        &bundle.action_labels,
        &policy_labels,
        &bundle.objective_matrix,
    )?;
    report::write_csv(
        &out.join("metrics/metrics_summary.csv"),
        &["key".into(), "value".into()],
        &[
            vec!["recon_mse".into(), report::fmt_f64(bundle.recon_mse)],
            vec![
                "probe_set_size".into(),
                bundle.probe_set_size.to_string(),
            ],
        ],
    )?;

    report::write_svg_heatmap(
        &out.join("plots/slope_matrix.svg"),
        "standardized slopes: factors vs latent features",
        &bundle.slope_matrix,
        &feature_labels,
        &bundle.factor_labels,
        &ColorScale::Diverging { limit: 1.0 },
    )?;
    report::write_svg_heatmap(
        &out.join("plots/policy_matrix.svg"),
        "mean action probabilities per policy",
        &bundle.policy_matrix,
        &policy_labels,
        &bundle.action_labels,
        &ColorScale::Sequential { min: 0.0, max: 1.0 },
    )?;
    let sel_scale = match cfg.training.mode {
        SelectivityMode::Directed => ColorScale::Diverging { limit: 1.0 },
        SelectivityMode::Undirected => ColorScale::Sequential { min: 0.0, max: 1.0 },
    };
    report::write_svg_heatmap(
        &out.join("plots/selectivity_matrix.svg"),
        "mean selectivity per (policy, action)",
        &bundle.selectivity_matrix,
        &policy_labels,
        &bundle.action_labels,
        &sel_scale,
    )?;
    let obj_limit = bundle
        .objective_matrix
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    report::write_svg_heatmap(
        &out.join("plots/objective_matrix.svg"),
        "objective per (policy, action)",
        &bundle.objective_matrix,
        &policy_labels,
        &bundle.action_labels,
        &ColorScale::Diverging {
            limit: obj_limit.max(1e-12),
        },
    )?;

    let report_pairs =
        metrics::reconstruction_report(model, probe, model.num_policies())?.pairs;
    for (i, (original, reconstruction)) in report_pairs.iter().enumerate() {
        report::write_pgm(&out.join(format!("rasters/sample_{i:02}_original.pgm")), original)?;
        report::write_pgm(
            &out.join(format!("rasters/sample_{i:02}_reconstruction.pgm")),
            reconstruction,
        )?;
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// One-page textual summary with the reproduction thresholds evaluated on
/// this run's metrics.
fn summarize(
    cfg: &ExperimentConfig,
    bundle: &MetricsBundle,
    log: Option<&train::TrainLog>,
) -> String {
    let mut s = String::new();
    s.push_str(&format!("experiment: {}\n", cfg.name));
    s.push_str(&format!(
        "env: {} {}x{}  model: {} latent={}\n",
        cfg.env.variant.as_str(),
        cfg.env.grid_height,
        cfg.env.grid_width,
        cfg.model.variant.as_str(),
        cfg.model.resolved_latent(),
    ));
    s.push_str(&format!(
        "training: steps={} seed={} estimator={} mode={} lambda={}\n",
        cfg.training.steps,
        cfg.training.seed,
        cfg.training.estimator.as_str(),
        cfg.training.mode.as_str(),
        cfg.training.lambda,
    ));
    s.push_str(&format!(
        "probe: {} states, recon_mse={}\n\n",
        bundle.probe_set_size,
        report::fmt_f64(bundle.recon_mse)
    ));

    match cfg.env.variant {
        Variant::Basic => {
            s.push_str(&format!(
                "recon_mse < {RECON_MSE_THRESHOLD}: {}\n",
                pass(bundle.recon_mse < RECON_MSE_THRESHOLD)
            ));
            s.push_str(&format!(
                "slope assignment (|slope| > {SLOPE_THRESHOLD}, disjoint per factor): {}\n",
                pass(metrics::factor_assignment_ok(
                    &bundle.slope_matrix,
                    SLOPE_THRESHOLD
                ))
            ));
            s.push_str(&format!(
                "policy concentration (max prob > {POLICY_CONCENTRATION}, all actions covered): {}\n",
                pass(metrics::policy_concentration_ok(
                    &bundle.policy_matrix,
                    POLICY_CONCENTRATION
                ))
            ));
        }
        Variant::Extended => {
            s.push_str(&format!(
                "redundant actions share selectivity (cols 0,1 within {REDUNDANT_COLUMN_TOL:e}): {}\n",
                pass(metrics::columns_match(
                    &bundle.selectivity_matrix,
                    0,
                    1,
                    REDUNDANT_COLUMN_TOL
                ))
            ));
            let mass = metrics::max_mass_on_actions(&bundle.policy_matrix, &[0, 1]);
            s.push_str(&format!(
                "down-policy mass on the duplicate pair: {} (> {DOWN_MASS_THRESHOLD}): {}\n",
                report::fmt_f64(mass),
                pass(mass > DOWN_MASS_THRESHOLD)
            ));
        }
    }
    if let Some(log) = log {
        s.push('\n');
        s.push_str(&format!(
            "blocked transitions encountered: {}\n",
            log.blocked_transitions
        ));
        s.push_str(&format!(
            "held-out recon non-increasing over 1000-step windows (soft check): {}\n",
            log.recon_soft_monotone
        ));
    }
    s
}
