//! Subcommands: run a pipeline stage and write its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfviflow::flows::{ConditionalFlow, ConditionalSampler};
use mfviflow::metrics::{density_grid, moment_report, moment_report_batched, KlReport, MomentReport, TrainingTrace};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{self, HighFidelity};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    Ok(cfg.output_dir.join(name))
}

/// Writes `body` below the provenance comment line.
fn write_artifact(cfg: &ExperimentConfig, command: &str, name: &str, body: &str) -> Result<PathBuf, CliError> {
    let path = out_path(cfg, name)?;
    let mut text = cfg.provenance(command);
    text.push('\n');
    text.push_str(body);
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn write_checkpoint(cfg: &ExperimentConfig, command: &str, name: &str, flow: &ConditionalFlow) -> Result<PathBuf, CliError> {
    let path = out_path(cfg, name)?;
    flow.save_with(&path, &[cfg.provenance(command)])?;
    Ok(path)
}

fn write_trace(cfg: &ExperimentConfig, command: &str, name: &str, trace: &TrainingTrace) -> Result<PathBuf, CliError> {
    write_artifact(cfg, command, name, &trace.to_csv(cfg.record_time))
}

fn load_sampler(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ConditionalSampler, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    Ok(ConditionalFlow::load(checkpoint, cfg.arch())?.init_from_pretrained().0)
}

const MOMENTS_HEADER: &str = "source,n,m1,m2,c11,c12,c22,se_m1,se_m2,se_c11,se_c12,se_c22";

fn moments_row(source: &str, m: &MomentReport) -> String {
    let vals: Vec<String> = m
        .mean
        .iter()
        .chain([m.cov[0], m.cov[1], m.cov[3]].iter())
        .chain(m.mean_se.iter())
        .chain([m.cov_se[0], m.cov_se[1], m.cov_se[3]].iter())
        .map(|v| format!("{v:.10e}"))
        .collect();
    format!("{source},{},{}", m.n, vals.join(","))
}

fn moments_csv(rows: &[(&str, &MomentReport)]) -> String {
    let mut out = format!("{MOMENTS_HEADER}\n");
    for (source, m) in rows {
        let _ = writeln!(out, "{}", moments_row(source, m));
    }
    out
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let (flow, trace, data) = pipeline::pretrain(cfg)?;
    write_artifact(cfg, "pretrain", "lowfi_pairs.csv", &data.to_csv())?;
    let ckpt = write_checkpoint(cfg, "pretrain", "pretrain.ckpt", &flow)?;
    write_trace(cfg, "pretrain", "pretrain_trace.csv", &trace)?;
    let means = trace.epoch_means("pretrain");
    let (first, last) = (means[0], means[means.len() - 1]);
    Ok(format!(
        "pretrained on {} pairs: epoch {} mean loss {:.4}, epoch {} mean loss {:.4}\ncheckpoint {}",
        data.len(),
        first.0,
        first.1,
        last.0,
        last.1,
        ckpt.display()
    ))
}

pub fn finetune(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<String, CliError> {
    let default = cfg.output_dir.join("pretrain.ckpt");
    let checkpoint = checkpoint.unwrap_or(&default);
    if !checkpoint.exists() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let flow = ConditionalFlow::load(checkpoint, cfg.arch())?;
    let hf = HighFidelity::new(cfg, cfg.primary_gamma())?;
    let ft = pipeline::finetune(cfg, &flow, &hf)?;
    write_checkpoint(cfg, "finetune", "finetune.ckpt", &ft.sampler.to_flow(cfg.arch()))?;
    write_trace(cfg, "finetune", "finetune_trace.csv", &ft.trace)?;
    let body = format!(
        "gamma,kl_before,kl_after,n_eval,seed\n{},{:.10e},{:.10e},{},{}\n",
        hf.gamma, ft.kl_before, ft.kl_after, cfg.evaluation.n_kl, cfg.seed
    );
    write_artifact(cfg, "finetune", "finetune_kl.csv", &body)?;
    Ok(format!(
        "gamma {}: kl_proxy before {:.4}, after {:.4}",
        hf.gamma, ft.kl_before, ft.kl_after
    ))
}

pub fn scratch(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let hf = HighFidelity::new(cfg, cfg.primary_gamma())?;
    let sc = pipeline::scratch(cfg, &hf)?;
    write_checkpoint(cfg, "scratch", "scratch.ckpt", &sc.sampler.to_flow(cfg.arch()))?;
    write_trace(cfg, "scratch", "scratch_trace.csv", &sc.trace)?;
    let body = format!(
        "gamma,kl,n_eval,seed\n{},{:.10e},{},{}\n",
        hf.gamma, sc.kl, cfg.evaluation.n_kl, cfg.seed
    );
    write_artifact(cfg, "scratch", "scratch_kl.csv", &body)?;
    Ok(format!("gamma {}: kl_proxy {:.4}", hf.gamma, sc.kl))
}

/// Writes the KL table; failed rows are kept as `NaN` entries with a
/// trailing comment. Returns the first failure after writing everything.
pub fn sweep(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let rows = pipeline::sweep(cfg);
    let mut body = format!("{}\n", KlReport::CSV_HEADER);
    let mut notes = String::new();
    let mut summary = String::new();
    let mut first_err = None;
    for row in rows {
        match row {
            Ok(r) => {
                let _ = writeln!(body, "{}", r.csv_row());
                let _ = writeln!(summary, "{}", r.csv_row());
            }
            Err((gamma, seed, e)) => {
                let _ = writeln!(body, "{gamma},NaN,NaN,NaN,{},{seed}", cfg.evaluation.n_kl);
                let _ = writeln!(notes, "# row gamma={gamma} seed={seed} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    body.push_str(&notes);
    let path = write_artifact(cfg, "sweep", "kl_table.csv", &body)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(format!("{}\n{summary}table {}", KlReport::CSV_HEADER, path.display())),
    }
}

pub fn sample(cfg: &ExperimentConfig, checkpoint: Option<&Path>, n: Option<usize>) -> Result<String, CliError> {
    let default = cfg.output_dir.join("finetune.ckpt");
    let sampler = load_sampler(cfg, checkpoint.unwrap_or(&default))?;
    let n = n.unwrap_or(cfg.evaluation.n_samples);
    if n == 0 {
        return Err(CliError::Usage("sample count must be >= 1".into()));
    }
    let hf = HighFidelity::new(cfg, cfg.primary_gamma())?;
    let x = pipeline::posterior_samples(cfg, &sampler, &hf, n)?;
    let mut body = String::from("x1,x2\n");
    for r in x.rows() {
        let _ = writeln!(body, "{:.16e},{:.16e}", r[0], r[1]);
    }
    write_artifact(cfg, "sample", "samples.csv", &body)?;
    let grid = density_grid(cfg.evaluation.grid(), |pts| sampler.log_density(&hf.y, pts))?;
    write_artifact(cfg, "sample", "samples_density.csv", &grid.to_csv())?;
    let mut out = format!("wrote {n} samples");
    if n >= 2 {
        let m = moment_report(&x)?;
        write_artifact(cfg, "sample", "samples_moments.csv", &moments_csv(&[("flow", &m)]))?;
        let _ = write!(out, "\n{MOMENTS_HEADER}\n{}", moments_row("flow", &m));
    }
    Ok(out)
}

pub fn mcmc(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<String, CliError> {
    let hf = HighFidelity::new(cfg, cfg.primary_gamma())?;
    let chain = pipeline::posterior_chain(cfg, &hf)?;
    write_artifact(cfg, "mcmc", "chain.csv", &chain.to_csv())?;
    let post = hf.posterior();
    let grid = density_grid(cfg.evaluation.grid(), |pts| Ok(pts.rows().map(|r| post.log_density(r)).collect()))?;
    write_artifact(cfg, "mcmc", "posterior_density.csv", &grid.to_csv())?;
    let chain_m = moment_report_batched(chain.samples(), cfg.evaluation.chain_batches)?;
    let grid_m = grid.moments();
    let flow_m = match checkpoint {
        Some(p) => {
            let sampler = load_sampler(cfg, p)?;
            let x = pipeline::posterior_samples(cfg, &sampler, &hf, cfg.evaluation.n_samples.max(2))?;
            Some(moment_report(&x)?)
        }
        None => None,
    };
    let mut rows = vec![("sgld", &chain_m), ("grid", &grid_m)];
    if let Some(m) = &flow_m {
        rows.push(("flow", m));
    }
    let csv = moments_csv(&rows);
    write_artifact(cfg, "mcmc", "mcmc_moments.csv", &csv)?;
    Ok(format!("chain of {} retained samples\n{csv}", chain.len()).trim_end().to_string())
}
