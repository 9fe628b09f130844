//! Central finite-difference verification of analytic gradients.

use super::graph::Var;
use super::params::{Ctx, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// When the one-sided differences disagree (the step straddles a kink such
    /// as a PReLU corner), retry the entry with a step ten times smaller, at
    /// most this many times, and keep the best agreement.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries: None, floor: 1e-6, kink_retries: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub eps: f64,
    /// Worst relative error per parameter tensor, in name order.
    pub errors: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }
}

/// |a − n| / max(|a|, |n|, floor).
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let mut ctx = Ctx::new(params);
    let root = f(&mut ctx)?;
    let v = ctx.g.value(root);
    if v.len() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("function value is {v}")));
    }
    Ok(v)
}

pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    grad_check_with(f, params, &GradCheckOptions { eps, ..Default::default() })
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry. Inputs that should be
/// checked too can simply be placed in `params`.
pub fn grad_check_with<F>(f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let analytic = {
        let mut ctx = Ctx::new(params);
        let root = f(&mut ctx)?;
        let v = ctx.g.value(root);
        if v.len() != 1 || !v.data()[0].is_finite() {
            return Err(Error::Numerical(format!("function value {v:?} is not a finite scalar")));
        }
        ctx.param_grads(root)?
    };

    let center = evaluate(&f, params)?;
    let mut work = params.clone();
    let mut errors = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        let grad = analytic.get(&name);
        let picks: Vec<usize> = match opts.max_entries {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = params.get(&name).expect("name from params").data()[i];
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let mut eps = opts.eps;
            let mut best = f64::INFINITY;
            let err = loop {
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig + eps;
                let up = evaluate(&f, &work)?;
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig - eps;
                let down = evaluate(&f, &work)?;
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
                best = best.min(relative_error(a, (up - down) / (2.0 * eps), opts.floor));
                let (fwd, bwd) = ((up - center) / eps, (center - down) / eps);
                let kinked = relative_error(fwd, bwd, opts.floor) > 1e-2;
                if !kinked || eps < opts.eps * 0.1f64.powi(opts.kink_retries as i32) * 1.5 {
                    break best;
                }
                eps *= 0.1;
            };
            worst = worst.max(err);
        }
        errors.push((name, worst));
    }
    Ok(GradReport { eps: opts.eps, errors })
}
