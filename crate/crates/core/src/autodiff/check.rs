//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{Gradients, Tape, Var};

/// A scalar function of a [`ParamStore`] with analytic gradients.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn loss_and_gradients(&self, params: &ParamStore) -> Result<(f64, Gradients)>;

    /// Loss and the ReLU activation pattern it was computed on. Models
    /// without kinks may return an empty pattern.
    fn loss_and_pattern(&self, params: &ParamStore) -> Result<(f64, Vec<bool>)> {
        Ok((self.loss(params)?, Vec::new()))
    }
}

/// Wraps a closure that records a loss on a fresh tape.
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = (self.0)(params, &mut tape)?;
        tape.scalar(loss)
    }

    fn loss_and_gradients(&self, params: &ParamStore) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let loss = (self.0)(params, &mut tape)?;
        let value = tape.scalar(loss)?;
        Ok((value, tape.backward(loss)?))
    }

    fn loss_and_pattern(&self, params: &ParamStore) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = (self.0)(params, &mut tape)?;
        Ok((tape.scalar(loss)?, tape.activation_pattern()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f32,
    /// Checks at most this many evenly spaced entries per parameter tensor.
    pub max_entries: Option<usize>,
    /// How often the step is quartered when a probe lands on a different
    /// linear piece (ReLU pattern) than the base point.
    pub kink_retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            max_entries: None,
            kink_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub checked_entries: usize,
    /// Entries left out because every probe crossed a ReLU kink.
    pub skipped_entries: usize,
}

/// Compares analytic gradients with central differences.
///
/// The error of a parameter tensor is `|a - n| / max(|a|, |n|, 1e-8)` with
/// `|.|` the Euclidean norm over its checked entries; the report carries
/// the maximum over all tensors. Averaged adjoints of shared parameters are
/// rescaled by their instance count, since the finite difference measures
/// the total derivative.
///
/// A central difference is only meaningful when both probes evaluate the
/// same smooth piece as the base point. Probes that change the ReLU
/// activation pattern are retried with a quartered step; entries for which
/// no step works are skipped and counted.
pub fn grad_check(model: &dyn Objective, params: &ParamStore, config: GradCheckConfig) -> Result<GradCheckReport> {
    let (base, analytic) = model.loss_and_gradients(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base} at the base point")));
    }
    let (_, base_pattern) = model.loss_and_pattern(params)?;
    let mut probe = params.clone();
    let mut per_param = BTreeMap::new();
    let (mut checked, mut skipped) = (0, 0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.value(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = match config.max_entries {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let grad = analytic.get(&name);
        let instances = analytic.instances(&name).max(1) as f64;
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for i in indices {
            let orig = params.value(&name).expect("listed").data()[i];
            let mut step = config.step;
            let mut numeric = None;
            for _ in 0..=config.kink_retries {
                let plus = orig + step;
                let minus = orig - step;
                probe.value_mut(&name).expect("listed")[i] = plus;
                let (lp, pp) = model.loss_and_pattern(&probe)?;
                probe.value_mut(&name).expect("listed")[i] = minus;
                let (lm, pm) = model.loss_and_pattern(&probe)?;
                probe.value_mut(&name).expect("listed")[i] = orig;
                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::NonFinite(format!("loss while perturbing `{name}`[{i}]")));
                }
                if pp == base_pattern && pm == base_pattern {
                    numeric = Some((lp - lm) / (plus as f64 - minus as f64));
                    break;
                }
                step /= 4.0;
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let a = grad.map_or(0.0, |g| g.data()[i] as f64) * instances;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        per_param.insert(name, rel);
    }
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        checked_entries: checked,
        skipped_entries: skipped,
    })
}
