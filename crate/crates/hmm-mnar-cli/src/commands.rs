//! Subcommand implementations.
//!
//! Every command is deterministic given its flags and seed, prints only
//! human-readable progress to stdout, and writes machine-readable artifacts
//! (CSV, fitted-model TOML) to the paths it was given. States are numbered
//! from 1 in every file and message; the library's 0-based indices never
//! leak out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use hmm_mnar::dataio::dataset_to_csv;
use hmm_mnar::model::{
    Dataset, GaussianEmission, HmmModel, MissingnessConstraint, MissingnessModel, MultinomialLogit,
};
use hmm_mnar::select::{
    aic, best_by_bic, bic, comparison_csv, count_parameters, likelihood_ratio_test, ComparisonRow,
};
use hmm_mnar::simulate::{
    builtin_scenarios, generate_dataset, hmm_oracle_accuracy, mixture_oracle_accuracy, run_study,
    FitFamily, FitSpec, OracleMode, Scenario, StudyConfig,
};
use hmm_mnar::{em_fit, forward_backward, multi_start_fit, viterbi, FitConfig, FitResult};

use crate::cli::{DecodeArgs, FitArgs, SelectArgs, SimulateArgs, StudyArgs};
use crate::config::FileConfig;
use crate::{input, model_file};

/// Exit code for a fit that exhausted its budget (the best iterate is
/// still written).
const EXIT_BUDGET: u8 = 3;

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("missing required setting {what} (flag or config file)"))
}

/// `name.csv` -> `name.suffix.csv` for default sibling artifacts.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(format!("{suffix}.csv"))
}

fn write_artifact(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn find_scenario(name: &str) -> Result<Scenario> {
    let all = builtin_scenarios();
    all.iter().find(|s| s.name == name).cloned().ok_or_else(|| {
        let names: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
        anyhow!(
            "unknown scenario `{name}`; valid names: {}",
            names.join(", ")
        )
    })
}

fn parse_family(name: &str) -> Result<FitFamily> {
    match name {
        "ignorable" => Ok(FitFamily::Ignorable),
        "state" => Ok(FitFamily::MnarState),
        "logistic" | "time" => Ok(FitFamily::MnarTime),
        other => bail!("unknown model family `{other}` (expected ignorable, state, or logistic)"),
    }
}

// ---------------------------------------------------------------- simulate

pub fn simulate(args: SimulateArgs, config: &FileConfig) -> Result<ExitCode> {
    let table = &config.simulate;
    let scenario_name = require(
        args.scenario.or_else(|| table.scenario.clone()),
        "--scenario",
    )?;
    let seed = args.seed.or(table.seed).unwrap_or(1);
    let out = require(args.out.or_else(|| table.out.clone()), "--out")?;
    let paths_out = args
        .paths_out
        .or_else(|| table.paths_out.clone())
        .unwrap_or_else(|| sibling(&out, "paths"));

    let scenario = find_scenario(&scenario_name)?;
    let sim = generate_dataset(&scenario, seed);
    write_artifact(&out, &dataset_to_csv(&sim.dataset)?)?;

    let mut paths = String::from("series,t,state\n");
    for (series, states) in sim.dataset.series().iter().zip(&sim.true_states) {
        for (rec, &state) in series.records.iter().zip(states) {
            writeln!(paths, "{},{},{}", series.id, rec.t, state + 1).unwrap();
        }
    }
    write_artifact(&paths_out, &paths)?;

    let d = &sim.dataset;
    println!(
        "scenario {}: {} series x {} steps, {} of {} records missing ({:.1}%)",
        scenario.name,
        d.n_series(),
        scenario.n_steps,
        d.n_missing(),
        d.n_records(),
        100.0 * d.n_missing() as f64 / d.n_records() as f64
    );
    println!("wrote dataset to {}", out.display());
    println!("wrote true state paths to {}", paths_out.display());
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------------- fit

/// Template with neutral starting values; the multi-start machinery
/// replaces them with moment-based and randomized starts.
fn fit_template(
    data: &Dataset,
    k: usize,
    missingness: &str,
    covariates: Vec<String>,
) -> Result<HmmModel> {
    let rate = (data.n_missing() as f64 / data.n_records() as f64).clamp(1e-3, 0.999);
    let missingness = match missingness {
        "ignorable" => MissingnessModel::Ignorable,
        "state" => MissingnessModel::StateBernoulli { phi: vec![rate; k] },
        "logistic" => {
            let mut row = vec![0.0; 1 + covariates.len()];
            row[0] = (rate / (1.0 - rate)).ln();
            MissingnessModel::StateLogistic {
                coefficients: vec![row; k],
            }
        }
        other => {
            bail!("unknown missingness kind `{other}` (expected ignorable, state, or logistic)")
        }
    };
    if missingness.is_ignorable() && !covariates.is_empty() {
        bail!("--missing-covariates only applies to modeled missingness");
    }
    if matches!(missingness, MissingnessModel::StateBernoulli { .. }) && !covariates.is_empty() {
        bail!("state-bernoulli missingness takes no covariates; use `logistic`");
    }
    let emissions = (0..k).map(|_| GaussianEmission::new(0.0, 1.0)).collect();
    let template = HmmModel::new(
        k,
        MultinomialLogit::uniform(k),
        vec![MultinomialLogit::uniform(k); k],
        emissions,
        missingness,
        Vec::new(),
        Vec::new(),
        covariates,
    )?;
    Ok(template)
}

pub fn fit(args: FitArgs, config: &FileConfig) -> Result<ExitCode> {
    let table = &config.fit;
    let data_path = require(args.data.or_else(|| table.data.clone()), "--data")?;
    let out = require(args.out.or_else(|| table.out.clone()), "--out")?;
    let init = args.init.or_else(|| table.init.clone());
    let starts = args.starts.or(table.starts).unwrap_or(8);
    let seed = args.seed.or(table.seed).unwrap_or(1);
    let constraint_name = args.constraint.or_else(|| table.constraint.clone());

    let defaults = FitConfig::default();
    let mut fit_config = FitConfig {
        max_iter: args
            .max_iter
            .or(table.max_iter)
            .unwrap_or(defaults.max_iter),
        tol: args.tol.or(table.tol).unwrap_or(defaults.tol),
        sigma_floor: args
            .sigma_floor
            .or(table.sigma_floor)
            .unwrap_or(defaults.sigma_floor),
        ..defaults
    };

    let loaded = input::load(&data_path)?;
    println!("{}", input::describe(&data_path, &loaded));
    for warning in &loaded.warnings {
        println!("note: {warning}");
    }
    let data = loaded.dataset;

    let result = if let Some(init_path) = init {
        if args.states.is_some() || args.missingness.is_some() {
            println!("note: --init carries the model shape; ignoring --states/--missingness");
        }
        let file = model_file::read(&init_path)?;
        let (model, file_constraint) = model_file::to_model(&file)?;
        fit_config.constraint = match constraint_name {
            Some(name) => model_file::parse_constraint(&name)?,
            None => file_constraint,
        };
        println!(
            "warm start from {} ({} states, {} missingness)",
            init_path.display(),
            model.n_states,
            file.model.missingness
        );
        em_fit(&model, &data, &fit_config)?
    } else {
        let k = require(args.states.or(table.states), "--states")?;
        if k == 0 {
            bail!("--states must be at least 1");
        }
        let missingness = args
            .missingness
            .or_else(|| table.missingness.clone())
            .unwrap_or_else(|| "ignorable".into());
        let covariates = args
            .missing_covariates
            .or_else(|| table.missing_covariates.clone())
            .unwrap_or_default();
        if missingness == "logistic" && covariates.is_empty() {
            bail!("logistic missingness needs --missing-covariates (names from the data schema)");
        }
        if let Some(name) = constraint_name {
            fit_config.constraint = model_file::parse_constraint(&name)?;
        }
        let template = fit_template(&data, k, &missingness, covariates)?;
        println!(
            "fitting {k}-state model ({missingness} missingness), {starts} random starts + moment start"
        );
        multi_start_fit(&template, &data, starts, seed, &fit_config)?
    };

    report_fit(&result, data.n_observed());
    let file = model_file::from_fit(&result, &data);
    model_file::write(&out, &file)?;
    println!("wrote fitted model to {}", out.display());

    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "did not converge within {} iterations; best iterate written",
            fit_config.max_iter
        );
        Ok(ExitCode::from(EXIT_BUDGET))
    }
}

fn report_fit(result: &FitResult, nobs: usize) {
    println!(
        "log-likelihood {:.4} after {} iterations ({})",
        result.log_likelihood,
        result.iterations,
        if result.converged {
            "converged"
        } else {
            "budget exhausted"
        }
    );
    println!(
        "free parameters {}, AIC {:.2}, BIC {:.2} (nobs = {nobs} observed responses)",
        result.free_parameters,
        aic(result.log_likelihood, result.free_parameters),
        bic(result.log_likelihood, result.free_parameters, nobs)
    );
    for warning in &result.warnings {
        println!("note: {warning}");
    }
}

// ------------------------------------------------------------------ decode

pub fn decode(args: DecodeArgs, config: &FileConfig) -> Result<ExitCode> {
    let table = &config.decode;
    let model_path = require(args.model.or_else(|| table.model.clone()), "--model")?;
    let data_path = require(args.data.or_else(|| table.data.clone()), "--data")?;
    let out = require(args.out.or_else(|| table.out.clone()), "--out")?;
    let week_summary = args.week_summary.or_else(|| table.week_summary.clone());

    let file = model_file::read(&model_path)?;
    let (model, _) = model_file::to_model(&file)?;
    let loaded = input::load(&data_path)?;
    println!("{}", input::describe(&data_path, &loaded));
    let data = loaded.dataset;
    if file.model.schema != data.schema().names() {
        println!(
            "note: model was fitted against schema [{}]; decoding data with schema [{}]",
            file.model.schema.join(", "),
            data.schema().names().join(", ")
        );
    }

    let k = model.n_states;
    let mut csv = String::from("series,t,missing,map_state");
    for state in 1..=k {
        write!(csv, ",p_state_{state}").unwrap();
    }
    csv.push('\n');

    // MAP state counts per (group, week) cell for the optional summary.
    let group_ix = data.schema().index_of("drug");
    let week_ix = data.schema().index_of("week");
    let mut cells: Vec<(String, f64, Vec<usize>)> = Vec::new();

    for series in data.series() {
        let posteriors = forward_backward(&model, data.schema(), series)?;
        let path = viterbi(&model, data.schema(), series)?;
        for (t, rec) in series.records.iter().enumerate() {
            write!(csv, "{},{},{},{}", series.id, rec.t, rec.m(), path[t] + 1).unwrap();
            for state in 0..k {
                write!(csv, ",{}", posteriors.gamma_at(t, state)).unwrap();
            }
            csv.push('\n');

            let group =
                group_ix.map_or_else(|| "all".into(), |ix| format!("{}", rec.covariates[ix]));
            let week = week_ix.map_or(rec.t as f64, |ix| rec.covariates[ix]);
            let cell = match cells.iter().position(|(g, w, _)| *g == group && *w == week) {
                Some(ix) => ix,
                None => {
                    cells.push((group, week, vec![0; k]));
                    cells.len() - 1
                }
            };
            cells[cell].2[path[t]] += 1;
        }
    }
    write_artifact(&out, &csv)?;
    println!(
        "decoded {} series with the {}-state {} model",
        data.n_series(),
        k,
        file.model.missingness
    );
    println!("wrote MAP states and posteriors to {}", out.display());

    if let Some(summary_path) = week_summary {
        cells.sort_by(|a, b| (&a.0, a.1).partial_cmp(&(&b.0, b.1)).unwrap());
        let mut summary = String::from("group,week,state,count,fraction\n");
        for (group, week, counts) in &cells {
            let total: usize = counts.iter().sum();
            for (state, &count) in counts.iter().enumerate() {
                writeln!(
                    summary,
                    "{group},{week},{},{count},{}",
                    state + 1,
                    count as f64 / total as f64
                )
                .unwrap();
            }
        }
        write_artifact(&summary_path, &summary)?;
        println!(
            "wrote per-week MAP state fractions to {}",
            summary_path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- study

pub fn study(args: StudyArgs, config: &FileConfig) -> Result<ExitCode> {
    let table = &config.study;
    let scenario_name = require(
        args.scenario.or_else(|| table.scenario.clone()),
        "--scenario",
    )?;
    let replications = require(args.replications.or(table.replications), "--replications")?;
    let out = require(args.out.or_else(|| table.out.clone()), "--out")?;
    let seed = args.seed.or(table.seed).unwrap_or(1);
    let family_names = args
        .families
        .or_else(|| table.families.clone())
        .unwrap_or_else(|| vec!["ignorable".into(), "state".into()]);
    let oracle_draws = args.oracle_draws.or(table.oracle_draws).unwrap_or(2000);

    let scenario = find_scenario(&scenario_name)?;
    let specs = family_names
        .iter()
        .map(|name| Ok(FitSpec::at_truth(parse_family(name)?)))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        bail!("--families needs at least one entry");
    }

    let mut study_config = StudyConfig::new(replications, specs, seed);
    let defaults = FitConfig::default();
    study_config.fit.max_iter = args
        .max_iter
        .or(table.max_iter)
        .unwrap_or(defaults.max_iter);
    study_config.fit.tol = args.tol.or(table.tol).unwrap_or(defaults.tol);

    println!(
        "study {}: {} replications, families [{}], seed {seed}",
        scenario.name,
        replications,
        family_names.join(", ")
    );
    let summary = run_study(&scenario, &study_config)?;
    write_artifact(&out, &summary.to_csv())?;
    println!("wrote parameter-recovery table to {}", out.display());

    for (label, failures) in summary.labels.iter().zip(&summary.n_failures) {
        if *failures > 0 {
            println!("note: {failures} of {replications} {label} fits failed and were excluded");
        }
    }

    let mut recovery = String::from("quantity,value\n");
    for (label, accuracy) in summary.labels.iter().zip(&summary.recovery) {
        println!("mean state-recovery accuracy, {label}: {accuracy:.4}");
        writeln!(recovery, "recovery_{label},{accuracy}").unwrap();
    }
    for (label, rel) in summary.labels.iter().zip(&summary.avg_rel_mae) {
        if let Some(rel) = rel {
            println!(
                "average relative MAE, {label} vs {}: {rel:.4}",
                summary.labels[0]
            );
            writeln!(recovery, "avg_rel_mae_{label},{rel}").unwrap();
        }
    }
    let chain = hmm_oracle_accuracy(
        &scenario,
        oracle_draws,
        seed ^ 0x6f72_6163,
        OracleMode::MnarAware,
    )?;
    let mixture = mixture_oracle_accuracy(
        &scenario,
        oracle_draws * scenario.n_steps,
        seed ^ 0x6d69_7874,
    );
    println!("oracle accuracy, Viterbi at the true model: {chain:.4}");
    println!("oracle accuracy, marginal-mixture Bayes classifier: {mixture:.4}");
    writeln!(recovery, "oracle_viterbi_true_model,{chain}").unwrap();
    writeln!(recovery, "oracle_mixture_bayes,{mixture}").unwrap();

    let recovery_path = sibling(&out, "recovery");
    write_artifact(&recovery_path, &recovery)?;
    println!(
        "wrote recovery and oracle summary to {}",
        recovery_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------ select

struct LoadedModel {
    label: String,
    model: HmmModel,
    constraint: MissingnessConstraint,
    log_likelihood: f64,
    nobs: usize,
    ignorable: bool,
}

pub fn select(args: SelectArgs, config: &FileConfig) -> Result<ExitCode> {
    let table = &config.select;
    let model_paths = {
        let paths = if args.models.is_empty() {
            table.models.clone().unwrap_or_default()
        } else {
            args.models
        };
        if paths.is_empty() {
            bail!("missing required setting --models (flag or config file)");
        }
        paths
    };
    let out = require(args.out.or_else(|| table.out.clone()), "--out")?;
    let labels = args.labels.or_else(|| table.labels.clone());
    let lrt = args.lrt.or_else(|| table.lrt.clone());
    let lrt_out = args
        .lrt_out
        .or_else(|| table.lrt_out.clone())
        .unwrap_or_else(|| sibling(&out, "lrt"));

    if let Some(labels) = &labels {
        if labels.len() != model_paths.len() {
            bail!(
                "--labels lists {} names for {} models",
                labels.len(),
                model_paths.len()
            );
        }
    }
    let mut models = Vec::with_capacity(model_paths.len());
    for (i, path) in model_paths.iter().enumerate() {
        let file = model_file::read(path)?;
        let (model, constraint) = model_file::to_model(&file)?;
        let fit = file.fit.as_ref().ok_or_else(|| {
            anyhow!(
                "{} has no [fit] section; only fitted models can be compared",
                path.display()
            )
        })?;
        let label = labels.as_ref().map_or_else(
            || {
                path.file_stem().map_or_else(
                    || format!("model{}", i + 1),
                    |s| s.to_string_lossy().into_owned(),
                )
            },
            |l| l[i].clone(),
        );
        models.push(LoadedModel {
            label,
            ignorable: model.missingness.is_ignorable(),
            constraint,
            log_likelihood: fit.log_likelihood,
            nobs: fit.nobs,
            model,
        });
    }

    let nobs = match args.nobs.or(table.nobs) {
        Some(n) => n,
        None => {
            let first = models[0].nobs;
            if models.iter().any(|m| m.nobs != first) {
                bail!("models store different observation counts; pass --nobs explicitly");
            }
            first
        }
    };

    let rows: Vec<ComparisonRow> = models
        .iter()
        .map(|m| {
            let counts = count_parameters(&m.model, m.constraint);
            ComparisonRow {
                label: m.label.clone(),
                n_states: m.model.n_states,
                log_likelihood: m.log_likelihood,
                raw_parameters: counts.raw,
                free_parameters: counts.free,
                aic: aic(m.log_likelihood, counts.free),
                bic: bic(m.log_likelihood, counts.free, nobs),
            }
        })
        .collect();
    write_artifact(&out, &comparison_csv(&rows))?;
    for row in &rows {
        println!(
            "{}: {} states, {} free parameters, LL {:.3}, AIC {:.2}, BIC {:.2}",
            row.label, row.n_states, row.free_parameters, row.log_likelihood, row.aic, row.bic
        );
    }
    if let Some(best) = best_by_bic(&rows) {
        println!("best by BIC: {}", rows[best].label);
    }
    println!("wrote comparison table to {}", out.display());

    if let Some(pair) = lrt {
        let (full_label, restricted_label) = pair
            .split_once(':')
            .ok_or_else(|| anyhow!("--lrt takes FULL:RESTRICTED (two labels separated by `:`)"))?;
        let find = |label: &str| {
            models
                .iter()
                .zip(&rows)
                .find(|(m, _)| m.label == label)
                .ok_or_else(|| anyhow!("--lrt references unknown label `{label}`"))
        };
        let (full, full_row) = find(full_label)?;
        let (restricted, restricted_row) = find(restricted_label)?;
        if full.ignorable != restricted.ignorable {
            bail!(
                "models are not nested: one treats missingness as ignorable, so the \
                 likelihoods cover different outcomes"
            );
        }
        if full_row.free_parameters <= restricted_row.free_parameters {
            bail!(
                "models are not nested: free parameter counts are not ordered \
                 ({} has {}, {} has {})",
                full_label,
                full_row.free_parameters,
                restricted_label,
                restricted_row.free_parameters
            );
        }
        let df = full_row.free_parameters - restricted_row.free_parameters;
        let lrt = likelihood_ratio_test(full.log_likelihood, restricted.log_likelihood, df)?;
        println!(
            "LRT {full_label} vs {restricted_label}: statistic {:.3}, df {}, p {:.3e}",
            lrt.statistic, lrt.df, lrt.p_value
        );
        let text = format!(
            "full,restricted,statistic,df,p_value\n{full_label},{restricted_label},{},{},{:e}\n",
            lrt.statistic, lrt.df, lrt.p_value
        );
        write_artifact(&lrt_out, &text)?;
        println!("wrote likelihood-ratio test to {}", lrt_out.display());
    }
    Ok(ExitCode::SUCCESS)
}
