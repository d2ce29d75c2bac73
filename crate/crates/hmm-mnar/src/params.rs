//! Flattening a model's *free* parameters into a named vector and back.
//!
//! The free parameterization is the one the likelihood is actually smooth in:
//! multinomial-logit coefficients (reference category dropped), emission
//! means and standard deviations, and missingness rates/coefficients — once
//! per state, or once overall when the equal-across-states constraint is
//! active. Confidence intervals, fixed-point checks, and parameter counting
//! all share this single ordering.
//!
//! State labels inside names are 1-based, matching all user-facing output.

use crate::error::{HmmError, Result};
use crate::model::{HmmModel, MissingnessConstraint, MissingnessModel, MultinomialLogit};

/// One free parameter: a stable display name plus its current value.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: f64,
}

fn logit_names(out: &mut Vec<String>, prefix: &str, covariates: &[String]) {
    out.push(format!("{prefix}.const"));
    for c in covariates {
        out.push(format!("{prefix}.{c}"));
    }
}

/// Names of the free parameters, in packing order.
pub fn free_parameter_names(model: &HmmModel, constraint: MissingnessConstraint) -> Vec<String> {
    let k = model.n_states;
    let mut names = Vec::new();
    for s in 1..=k {
        names.push(format!("mu[{s}]"));
        names.push(format!("sigma[{s}]"));
    }
    for cat in 2..=k {
        logit_names(
            &mut names,
            &format!("init[{cat}]"),
            &model.initial_covariates,
        );
    }
    for from in 1..=k {
        for cat in 2..=k {
            logit_names(
                &mut names,
                &format!("trans[{from}->{cat}]"),
                &model.transition_covariates,
            );
        }
    }
    match (&model.missingness, constraint) {
        (MissingnessModel::Ignorable, _) => {}
        (MissingnessModel::StateBernoulli { .. }, MissingnessConstraint::None) => {
            for s in 1..=k {
                names.push(format!("phi[{s}]"));
            }
        }
        (MissingnessModel::StateBernoulli { .. }, MissingnessConstraint::EqualAcrossStates) => {
            names.push("phi".into());
        }
        (MissingnessModel::StateLogistic { .. }, MissingnessConstraint::None) => {
            for s in 1..=k {
                logit_names(
                    &mut names,
                    &format!("miss[{s}]"),
                    &model.missingness_covariates,
                );
            }
        }
        (MissingnessModel::StateLogistic { .. }, MissingnessConstraint::EqualAcrossStates) => {
            logit_names(&mut names, "miss", &model.missingness_covariates);
        }
    }
    names
}

/// Flatten the model's free parameters (see module docs for the order).
pub fn free_parameters(model: &HmmModel, constraint: MissingnessConstraint) -> Vec<NamedParam> {
    let names = free_parameter_names(model, constraint);
    let mut values = Vec::with_capacity(names.len());
    for e in &model.emissions {
        values.push(e.mean);
        values.push(e.sd);
    }
    values.extend_from_slice(model.initial.coefficients());
    for row in &model.transitions {
        values.extend_from_slice(row.coefficients());
    }
    match (&model.missingness, constraint) {
        (MissingnessModel::Ignorable, _) => {}
        (MissingnessModel::StateBernoulli { phi }, MissingnessConstraint::None) => {
            values.extend_from_slice(phi);
        }
        (MissingnessModel::StateBernoulli { phi }, MissingnessConstraint::EqualAcrossStates) => {
            values.push(phi[0]);
        }
        (MissingnessModel::StateLogistic { coefficients }, MissingnessConstraint::None) => {
            for row in coefficients {
                values.extend_from_slice(row);
            }
        }
        (
            MissingnessModel::StateLogistic { coefficients },
            MissingnessConstraint::EqualAcrossStates,
        ) => {
            values.extend_from_slice(&coefficients[0]);
        }
    }
    debug_assert_eq!(names.len(), values.len());
    names
        .into_iter()
        .zip(values)
        .map(|(name, value)| NamedParam { name, value })
        .collect()
}

/// Rebuild a model from `template`'s structure and a flat value vector (the
/// inverse of [`free_parameters`]). Under the equality constraint the single
/// missingness block is copied to every state.
pub fn set_free_parameters(
    template: &HmmModel,
    constraint: MissingnessConstraint,
    values: &[f64],
) -> Result<HmmModel> {
    let k = template.n_states;
    let expected = free_parameter_names(template, constraint).len();
    if values.len() != expected {
        return Err(HmmError::InvalidModel(format!(
            "expected {expected} free parameters, got {}",
            values.len()
        )));
    }
    let mut model = template.clone();
    let mut pos = 0;
    for e in model.emissions.iter_mut() {
        e.mean = values[pos];
        e.sd = values[pos + 1];
        pos += 2;
    }
    let init_len = (k - 1) * (1 + template.initial_covariates.len());
    model.initial = MultinomialLogit::new(
        k,
        template.initial_covariates.len(),
        values[pos..pos + init_len].to_vec(),
    )?;
    pos += init_len;
    let trans_len = (k - 1) * (1 + template.transition_covariates.len());
    for row in model.transitions.iter_mut() {
        *row = MultinomialLogit::new(
            k,
            template.transition_covariates.len(),
            values[pos..pos + trans_len].to_vec(),
        )?;
        pos += trans_len;
    }
    match (&mut model.missingness, constraint) {
        (MissingnessModel::Ignorable, _) => {}
        (MissingnessModel::StateBernoulli { phi }, MissingnessConstraint::None) => {
            phi.copy_from_slice(&values[pos..pos + k]);
            pos += k;
        }
        (MissingnessModel::StateBernoulli { phi }, MissingnessConstraint::EqualAcrossStates) => {
            phi.iter_mut().for_each(|p| *p = values[pos]);
            pos += 1;
        }
        (MissingnessModel::StateLogistic { coefficients }, MissingnessConstraint::None) => {
            let width = 1 + template.missingness_covariates.len();
            for row in coefficients.iter_mut() {
                row.copy_from_slice(&values[pos..pos + width]);
                pos += width;
            }
        }
        (
            MissingnessModel::StateLogistic { coefficients },
            MissingnessConstraint::EqualAcrossStates,
        ) => {
            let width = 1 + template.missingness_covariates.len();
            let shared = values[pos..pos + width].to_vec();
            for row in coefficients.iter_mut() {
                row.copy_from_slice(&shared);
            }
            pos += width;
        }
    }
    debug_assert_eq!(pos, values.len());
    model.validate()?;
    Ok(model)
}
