//! Subcommand implementations. Each returns the process exit code.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bpr::posterior::{
    cluster_summary, draw_posterior, heatmap_matrix, nonempty_clusters, relabel, responsibilities,
    ClusterSummary,
};
use bpr::sim::{batch_size_sweep, generate_cohort, run_study, Fitter, StudyResult};
use bpr::svi::{fit, Termination};
use bpr::{CohortData, ParamLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cohort_csv::{read_cohort, subset, write_cohort};
use crate::config::{
    read_json, refuse_overwrite, write_json, FileSchema, FitArtifact, Provenance, RunConfig,
    SimulateConfig, StudyConfig,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

fn draw_seed(svi_seed: u64) -> u64 {
    svi_seed ^ 0x715E_ED00_5EED_0001
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<u8> {
    let (mut cfg, bytes): (SimulateConfig, _) = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = cfg.build()?;
    let (data, truth) = generate_cohort(&spec, 0)?;
    let prov = Provenance::new(&bytes, spec.seed);

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_cohort(&out.join("cohort.csv"), &data, &prov, force)?;

    #[derive(Serialize)]
    struct TruthFile<'a> {
        provenance: &'a Provenance,
        spec: &'a bpr::sim::SimulationSpec,
        truth: &'a bpr::sim::GroundTruth,
    }
    write_json(
        &out.join("truth.json"),
        &TruthFile {
            provenance: &prov,
            spec: &spec,
            truth: &truth,
        },
        force,
    )?;

    let schema = FileSchema {
        mixture: data.mixture_names().to_vec(),
        response: data.response_names().to_vec(),
        outcome: data.outcome_name().to_string(),
        strata: None,
    };
    write_json(&out.join("schema.json"), &schema, force)?;
    Ok(EXIT_OK)
}

fn fit_one(
    data: &CohortData,
    cfg: &RunConfig,
    prov: &Provenance,
) -> Result<(FitArtifact, Termination)> {
    let (state, trace) = fit(data, &cfg.model, &cfg.svi)?;
    let termination = trace.terminated_reason;
    let layout = ParamLayout::new(cfg.model.k_max, data.p(), data.a());
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(cfg.svi.seed));
    let summary: Option<ClusterSummary> =
        draw_posterior(&state, layout, &cfg.model, cfg.posterior_draws, &mut rng)
            .and_then(|samples| {
                cluster_summary(
                    &relabel(&samples),
                    data.n(),
                    data.mixture_names(),
                    data.response_names(),
                    &cfg.reference_profiles,
                )
            })
            .ok();
    let nonempty = summary
        .as_ref()
        .map(|s| nonempty_clusters(s, cfg.nonempty_threshold));
    Ok((
        FitArtifact {
            provenance: prov.clone(),
            schema: cfg.schema.clone(),
            model: cfg.model.clone(),
            svi: cfg.svi.clone(),
            posterior_draws: cfg.posterior_draws,
            n: data.n(),
            converged: termination == Termination::Converged,
            state,
            trace,
            summary,
            nonempty_clusters: nonempty,
        },
        termination,
    ))
}

fn write_heatmaps(
    out_dir: &Path,
    stem: &str,
    artifact: &FitArtifact,
    threshold: f64,
    prov: &Provenance,
    force: bool,
) -> Result<()> {
    let Some(summary) = &artifact.summary else {
        return Ok(());
    };
    for (suffix, linear) in [("logodds", false), ("linear", true)] {
        let path = out_dir.join(format!("{stem}_heatmap_{suffix}.csv"));
        write_heatmap_csv(&path, summary, linear, threshold, prov, force)?;
    }
    Ok(())
}

pub fn write_heatmap_csv(
    path: &Path,
    summary: &ClusterSummary,
    linear: bool,
    threshold: f64,
    prov: &Provenance,
    force: bool,
) -> Result<()> {
    refuse_overwrite(path, force)?;
    let rows = heatmap_matrix(summary, linear, threshold);
    let kept: Vec<usize> = summary
        .clusters
        .iter()
        .filter(|c| c.membership.point * summary.n as f64 >= threshold)
        .map(|c| c.cluster)
        .collect();
    let mut out = prov.csv_comments();
    out.push_str("cluster");
    for name in &summary.mixture_names {
        out.push(',');
        out.push_str(name);
    }
    for i in 0..summary.reference_profiles.len() {
        out.push_str(&format!(",outcome_profile{i}"));
    }
    out.push('\n');
    for (cluster, row) in kept.iter().zip(&rows) {
        out.push_str(&(cluster + 1).to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn fit_cmd(
    cohort: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    stratify: Option<&str>,
) -> Result<u8> {
    let (mut cfg, bytes): (RunConfig, _) = read_json(config)?;
    if let Some(s) = seed {
        cfg.svi.seed = s;
    }
    if let Some(col) = stratify {
        cfg.schema.strata = Some(col.to_string());
    }
    cfg.model.validate()?;
    let prov = Provenance::new(&bytes, cfg.svi.seed);
    let (data, strata) = read_cohort(cohort, &cfg.schema)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let groups: Vec<(String, CohortData)> = match (stratify, strata) {
        (Some(col), Some(values)) => {
            let mut by_value: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, v) in values.iter().enumerate() {
                by_value.entry(v.clone()).or_default().push(i);
            }
            by_value
                .into_iter()
                .map(|(v, rows)| Ok((format!("artifact_{col}_{v}"), subset(&data, &rows)?)))
                .collect::<Result<_>>()?
        }
        (Some(col), None) => bail!("--stratify {col} given but schema resolved no strata column"),
        (None, _) => vec![("artifact".to_string(), data)],
    };

    let mut worst = EXIT_OK;
    for (stem, group) in &groups {
        let (artifact, termination) = fit_one(group, &cfg, &prov)?;
        write_json(&out.join(format!("{stem}.json")), &artifact, force)?;
        write_heatmaps(out, stem, &artifact, cfg.nonempty_threshold, &prov, force)?;
        let code = match termination {
            Termination::Converged => EXIT_OK,
            Termination::MaxSteps => EXIT_PARTIAL,
            Termination::Aborted => EXIT_NUMERICAL,
        };
        if code != EXIT_OK {
            eprintln!(
                "warning: fit '{stem}' terminated with {termination:?}{}",
                artifact
                    .trace
                    .abort_message
                    .as_deref()
                    .map(|m| format!(": {m}"))
                    .unwrap_or_default()
            );
        }
        worst = worst.max(code);
    }
    Ok(worst)
}

fn write_study_csv(
    path: &Path,
    result: &StudyResult,
    prov: &Provenance,
    force: bool,
) -> Result<()> {
    refuse_overwrite(path, force)?;
    let mut out = prov.csv_comments();
    out.push_str("parameter,truth,mean_bias,coverage,replicates_used\n");
    for p in &result.parameters {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.name, p.truth, p.mean_bias, p.coverage, p.replicates_used
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitterKind {
    Svi,
    Mcmc,
}

pub fn study(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    sweep: Option<&str>,
    fitter_kind: FitterKind,
) -> Result<u8> {
    let (mut cfg, bytes): (StudyConfig, _) = read_json(config)?;
    if let Some(s) = seed {
        cfg.spec.seed = s;
        cfg.svi.seed = s;
        cfg.mcmc.seed = s;
    }
    cfg.model.validate()?;
    let spec = cfg.spec.build()?;
    let prov = Provenance::new(&bytes, spec.seed);
    let fitter = match fitter_kind {
        FitterKind::Svi => Fitter::Svi {
            model: cfg.model.clone(),
            svi: cfg.svi.clone(),
            posterior_draws: cfg.posterior_draws,
        },
        FitterKind::Mcmc => Fitter::Mcmc {
            model: cfg.model.clone(),
            mcmc: cfg.mcmc.clone(),
        },
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    #[derive(Serialize)]
    struct StudyFile<'a> {
        provenance: &'a Provenance,
        fraction: Option<f64>,
        result: &'a StudyResult,
    }

    let mut results: Vec<(Option<f64>, StudyResult)> = Vec::new();
    if let Some(fractions) = sweep {
        let fracs: Vec<f64> = fractions
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("bad fraction '{s}'"))
            })
            .collect::<Result<_>>()?;
        for (frac, result) in batch_size_sweep(&spec, &fitter, &fracs)? {
            results.push((Some(frac), result));
        }
    } else {
        results.push((None, run_study(&spec, &fitter)?));
    }

    let mut worst = EXIT_OK;
    for (fraction, result) in &results {
        let stem = match fraction {
            Some(f) => format!("study_batch_{f}"),
            None => "study".to_string(),
        };
        write_study_csv(&out.join(format!("{stem}.csv")), result, &prov, force)?;
        write_json(
            &out.join(format!("{stem}.json")),
            &StudyFile {
                provenance: &prov,
                fraction: *fraction,
                result,
            },
            force,
        )?;
        for rec in result.replicates.iter().filter(|r| !r.ok) {
            eprintln!(
                "warning: replicate {} failed: {}",
                rec.replicate,
                rec.message.as_deref().unwrap_or("unknown")
            );
        }
        if result.failures * 10 > result.m {
            worst = worst.max(EXIT_PARTIAL);
        }
    }
    Ok(worst)
}

pub fn assign(artifact_path: &Path, cohort: &Path, out: &Path, force: bool) -> Result<u8> {
    let (artifact, _): (FitArtifact, _) = read_json(artifact_path)?;
    let (data, _) = read_cohort(cohort, &artifact.schema)?;
    let layout = ParamLayout::new(artifact.model.k_max, data.p(), data.a());
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(artifact.svi.seed));
    let samples = relabel(&draw_posterior(
        &artifact.state,
        layout,
        &artifact.model,
        artifact.posterior_draws,
        &mut rng,
    )?);
    let resp = responsibilities(&samples, &data)?;

    refuse_overwrite(out, force)?;
    let mut text = artifact.provenance.csv_comments();
    text.push_str("id");
    for k in 0..resp.k {
        text.push_str(&format!(",r{}", k + 1));
    }
    text.push_str(",cluster\n");
    for i in 0..resp.n {
        text.push_str(&i.to_string());
        for v in resp.row(i) {
            text.push(',');
            text.push_str(&v.to_string());
        }
        // hard labels are reported one-based
        text.push_str(&format!(",{}\n", resp.labels[i] + 1));
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(EXIT_OK)
}

pub fn export_heatmap(
    artifact_path: &Path,
    out: &Path,
    linear: bool,
    threshold: f64,
    force: bool,
) -> Result<u8> {
    let (artifact, _): (FitArtifact, _) = read_json(artifact_path)?;
    let Some(summary) = &artifact.summary else {
        bail!("artifact {} carries no summary", artifact_path.display());
    };
    write_heatmap_csv(out, summary, linear, threshold, &artifact.provenance, force)?;
    Ok(EXIT_OK)
}

/// Validation helpers used by `main` for config-independent flags.
pub fn parse_threads(flag: Option<usize>) -> Result<Option<usize>> {
    let from_env = std::env::var("BPR_THREADS")
        .ok()
        .map(|v| v.parse::<usize>().context("BPR_THREADS is not an integer"))
        .transpose()?;
    Ok(flag.or(from_env))
}

pub fn parse_seed(flag: Option<u64>) -> Result<Option<u64>> {
    let from_env = std::env::var("BPR_SEED")
        .ok()
        .map(|v| v.parse::<u64>().context("BPR_SEED is not an integer"))
        .transpose()?;
    Ok(flag.or(from_env))
}
