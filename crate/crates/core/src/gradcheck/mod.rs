//! Central finite-difference gradient oracle.
//!
//! Each checked coordinate compares the tape's analytic derivative `a` with
//! `n = (f(x+h) - f(x-h)) / 2h` using the relative error
//! `|a - n| / max(|a|, |n|, 1e-8)`. The function under test is evaluated twice
//! at the base point first; any bitwise difference is reported as an oracle
//! error because finite differences are meaningless for a non-deterministic `f`.

pub mod blocks;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Deliberate corruptions used as negative controls for the oracle itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate every analytic gradient before comparison.
    FlipSign,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Seed for picking coordinates when `max_coords` subsamples.
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `d f / d x` for a scalar-valued `f` at `x`; returns the max relative error.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> FnMut(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    let report = grad_check_inputs(|tape, xs| f(tape, xs[0]), core::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_error)
}

/// Checks gradients with respect to every input tensor.
pub fn grad_check_inputs<F>(
    mut f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x)).collect();
        loss_value(f(&tape, &vars)?)
    };
    ensure_deterministic(eval(&mut f, inputs)?, eval(&mut f, inputs)?)?;

    let analytic: Vec<Tensor> = {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|x| tape.leaf(&x.clone().with_requires_grad()))
            .collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|v| {
                v.grad()
                    .ok_or_else(|| Error::Oracle("input lost its gradient".into()))
            })
            .collect::<Result<_>>()?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for idx in coords(grad.numel(), opts, ti as u64) {
            let base = work[ti].data()[idx];
            work[ti].data_mut()[idx] = base + opts.step;
            let plus = eval(&mut f, &work)?;
            work[ti].data_mut()[idx] = base - opts.step;
            let minus = eval(&mut f, &work)?;
            work[ti].data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(
                &mut report,
                grad.data()[idx],
                numeric,
                opts,
                || format!("input{ti}"),
                idx,
            );
        }
    }
    Ok(report)
}

/// Checks gradients with respect to a module's parameters (and any extra
/// inputs). Frozen parameters are skipped.
pub fn grad_check_module<M, F>(
    module: &mut M,
    inputs: &[Tensor],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Module,
    F: for<'t> FnMut(&'t Tape, &M, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |f: &mut F, m: &M, xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x)).collect();
        loss_value(f(&tape, m, &vars)?)
    };
    ensure_deterministic(eval(&mut f, module, inputs)?, eval(&mut f, module, inputs)?)?;

    let (param_grads, input_grads) = {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|x| tape.leaf(&x.clone().with_requires_grad()))
            .collect();
        let loss = f(&tape, module, &vars)?;
        tape.backward(loss)?;
        let mut pg: Vec<(String, Tensor)> = Vec::new();
        for p in module.params() {
            if !p.trainable() {
                continue;
            }
            let g = match tape.param_grad(p.name()) {
                Some(g) => g,
                // Parameter not reached by `f`: derivative is exactly zero.
                None => Tensor::zeros(p.value().shape())?,
            };
            pg.push((p.name().into(), g));
        }
        let ig: Vec<Tensor> = vars
            .iter()
            .map(|v| {
                v.grad()
                    .ok_or_else(|| Error::Oracle("input lost its gradient".into()))
            })
            .collect::<Result<_>>()?;
        (pg, ig)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, (name, grad)) in param_grads.iter().enumerate() {
        for idx in coords(grad.numel(), opts, 1000 + pi as u64) {
            let base = param_value(module, name, idx);
            set_param(module, name, idx, base + opts.step);
            let plus = eval(&mut f, module, inputs);
            set_param(module, name, idx, base - opts.step);
            let minus = eval(&mut f, module, inputs);
            set_param(module, name, idx, base);
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(
                &mut report,
                grad.data()[idx],
                numeric,
                opts,
                || name.clone(),
                idx,
            );
        }
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in input_grads.iter().enumerate() {
        for idx in coords(grad.numel(), opts, ti as u64) {
            let base = work[ti].data()[idx];
            work[ti].data_mut()[idx] = base + opts.step;
            let plus = eval(&mut f, module, &work)?;
            work[ti].data_mut()[idx] = base - opts.step;
            let minus = eval(&mut f, module, &work)?;
            work[ti].data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(
                &mut report,
                grad.data()[idx],
                numeric,
                opts,
                || format!("input{ti}"),
                idx,
            );
        }
    }
    Ok(report)
}

/// Checks the scalar `Σ_k mean((out_k − base_k) ⊙ R_k)`, where `base_k` are
/// the outputs at the unperturbed point and `R_k` are fixed random weights.
/// The subtraction leaves every derivative unchanged but keeps the scalar
/// near zero, so rounding in the final sum does not swamp small derivatives.
/// The mean keeps the scalar's scale independent of the output size.
pub fn probe_module<M, F>(
    module: &mut M,
    inputs: &[Tensor],
    outputs: F,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Module,
    F: for<'t> Fn(&'t Tape, &M, &[Var<'t>]) -> Result<Vec<Var<'t>>>,
{
    let base: Vec<Tensor> = {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x)).collect();
        outputs(&tape, module, &vars)?
            .iter()
            .map(|v| v.value())
            .collect()
    };
    let weights = probe_weights(&base, seed)?;
    grad_check_module(
        module,
        inputs,
        |t, m, v| probe_scalar(t, outputs(t, m, v)?, &base, &weights),
        opts,
    )
}

/// [`probe_module`] for a function of input tensors only.
pub fn probe_inputs<F>(
    mut outputs: F,
    inputs: &[Tensor],
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Vec<Var<'t>>>,
{
    let base: Vec<Tensor> = {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x)).collect();
        outputs(&tape, &vars)?.iter().map(|v| v.value()).collect()
    };
    let weights = probe_weights(&base, seed)?;
    grad_check_inputs(
        |t, v| probe_scalar(t, outputs(t, v)?, &base, &weights),
        inputs,
        opts,
    )
}

fn probe_weights(base: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
    base.iter()
        .enumerate()
        .map(|(k, b)| Tensor::randn(b.shape(), seed.wrapping_add(k as u64), 1.0))
        .collect()
}

fn probe_scalar<'t>(
    tape: &'t Tape,
    outs: Vec<Var<'t>>,
    base: &[Tensor],
    weights: &[Tensor],
) -> Result<Var<'t>> {
    if outs.len() != base.len() {
        return Err(Error::Oracle(
            "output count changed between evaluations".into(),
        ));
    }
    let mut total: Option<Var<'t>> = None;
    for ((out, b), r) in outs.into_iter().zip(base).zip(weights) {
        let n = b.numel() as f64;
        let term = out
            .sub(tape.constant(b))?
            .mul(tape.constant(r))?
            .sum_all()?
            .scale(1.0 / n)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Oracle("function produced no outputs".into()))
}

fn param_value<M: Module>(module: &M, name: &str, idx: usize) -> f64 {
    module
        .params()
        .into_iter()
        .find(|p| p.name() == name)
        .map(|p| p.value().data()[idx])
        .expect("parameter listed by the module")
}

fn set_param<M: Module>(module: &mut M, name: &str, idx: usize, v: f64) {
    module.visit_mut(&mut |p| {
        if p.name() == name {
            p.value_mut().data_mut()[idx] = v;
        }
    });
}

fn loss_value(v: Var<'_>) -> Result<f64> {
    if v.shape().iter().product::<usize>() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn ensure_deterministic(a: f64, b: f64) -> Result<()> {
    if a.to_bits() != b.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {a:e} vs {b:e}"
        )));
    }
    Ok(())
}

fn coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9));
            let mut picked = sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    }
}

fn record(
    report: &mut GradCheckReport,
    analytic: f64,
    numeric: f64,
    opts: &GradCheckOptions,
    name: impl FnOnce() -> String,
    idx: usize,
) {
    let analytic = match opts.fault {
        Some(Fault::FlipSign) => -analytic,
        None => analytic,
    };
    let err = relative_error(analytic, numeric);
    report.coords_checked += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(err);
        report.worst = Some((name(), idx));
    }
}
