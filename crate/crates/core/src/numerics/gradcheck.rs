//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct ScalarCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<ScalarCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ScalarCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error <= self.tol)
    }

    /// Largest error per parameter tensor, in name order.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.last_mut() {
                Some((name, worst)) if *name == c.param => *worst = worst.max(c.rel_error),
                _ => out.push((c.param.clone(), c.rel_error)),
            }
        }
        out
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// scalar in `params`.
///
/// `f` must build a scalar on the graph it is given, reading parameters only
/// through the supplied [`Bound`].
pub fn grad_check<F>(params: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = f(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let analytic = bound.collect(&grads, params);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let out = f(&mut g, &b)?;
        Ok(g.scalar(out))
    };

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.scalar_count());
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.numel());
        for idx in 0..n {
            let orig = params.get(&name).expect("present").data()[idx];
            work.get_mut(&name).expect("present").data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).expect("present").data()[idx];
            checks.push(ScalarCheck {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / numeric.abs().max(1.0),
            });
        }
    }
    Ok(GradCheckReport { checks, tol })
}
