//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, TapeOptions, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Number of coordinates sampled uniformly across all parameters;
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Options for the tape that produces the analytic gradient.
    pub tape: TapeOptions,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            tape: TapeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordinateError>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar node. It is evaluated once for the analytic gradient and
/// twice per checked coordinate, so it has to be deterministic.
pub fn finite_diff_check<F, E>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let tape = Tape::with_options(opts.tape);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::with_options(TapeOptions { corrupt_matmul_grad: false, ..opts.tape });
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for flat in coords {
        let param = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[param];
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + opts.eps;
        let plus = eval(&work)?;
        work[param].data_mut()[index] = orig - opts.eps;
        let minus = eval(&work)?;
        work[param].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[param].data()[index];
        let rel_err = relative_error(a, numeric);
        report.coords_checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(CoordinateError { param, index, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}
