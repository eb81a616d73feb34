use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{DiffError, Fault, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-6, 1e-4]`.
    pub h: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, samples_per_tensor: 100, seed: 0, fault: None }
    }
}

/// Worst disagreement found in one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor], fault: Option<Fault>) -> Result<(f64, Vec<Vec<f64>>), DiffError>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    g.set_fault(fault);
    let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let numel = g.value(out).len();
    if numel != 1 {
        return Err(DiffError::NotScalar { numel });
    }
    let loss = g.value(out)[0];
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((loss, grads))
}

fn value_only<F>(f: &F, params: &[Tensor]) -> Result<f64, DiffError>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)[0])
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// `f` receives a fresh graph and one variable per entry of `params` (in
/// order) and must return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var, DiffError>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(DiffError::InvalidArgument(format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let (_, analytic) = evaluate(&f, params, opts.fault)?;
    let mut work = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, params: Vec::with_capacity(params.len()) };
    for (p, grad) in analytic.iter().enumerate() {
        let n = work[p].numel();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            index: p,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + opts.h;
            let plus = value_only(&f, &work)?;
            work[p].data_mut()[i] = orig - opts.h;
            let minus = value_only(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(grad[i], numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_coord = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}
