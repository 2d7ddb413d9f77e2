use crate::error::Result;
use crate::optim::ParamSet;

use super::{GradTape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a relu kink, where the derivative
    /// is undefined; they are excluded from the error.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn empty(tolerance: f64) -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
            tolerance,
        }
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// Relative error with a unit floor on the denominator: relative for
/// gradients of magnitude above 1, absolute below.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the tape gradient of the scalar-valued `f` with respect to every
/// element of every tensor in `inputs` using `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], eps: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(GradTape, Vec<Var>, Var)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport::empty(tolerance);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (tp, _, op) = eval(&work)?;
            let plus = tp.value(op).item() as f64;
            work[ti].data_mut()[ei] = orig - eps;
            let (tm, _, om) = eval(&work)?;
            let minus = tm.value(om).item() as f64;
            work[ti].data_mut()[ei] = orig;
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.skipped += 1;
                continue;
            }

            // The perturbation actually applied, after f32 rounding.
            let step = ((orig + eps) as f64) - ((orig - eps) as f64);
            let numeric = (plus - minus) / step;
            report.record((ti, ei), analytic[ti].data()[ei] as f64, numeric);
        }
    }
    Ok(report)
}

/// Like [`finite_difference_check`], perturbing every tensor of `params`.
/// `f` binds parameters itself (e.g. via [`GradTape::param_named`]).
pub fn finite_difference_check_params<F>(f: F, params: &ParamSet, eps: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &ParamSet) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let out = f(&mut tape, params)?;
    let base_sig = tape.kink_signature();
    let analytic = tape.backward(out)?.for_params(params);
    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut t = GradTape::new();
        let o = f(&mut t, p)?;
        Ok((t.value(o).item() as f64, t.kink_signature()))
    };
    let mut report = GradCheckReport::empty(tolerance);
    let mut work = params.clone();
    for ti in 0..params.len() {
        let id = params.id(&params.names()[ti]).expect("own name");
        for ei in 0..params.tensor(id).len() {
            let orig = params.tensor(id).data()[ei];
            work.tensor_mut(id).data_mut()[ei] = orig + eps;
            let (plus, sp) = eval(&work)?;
            work.tensor_mut(id).data_mut()[ei] = orig - eps;
            let (minus, sm) = eval(&work)?;
            work.tensor_mut(id).data_mut()[ei] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let step = ((orig + eps) as f64) - ((orig - eps) as f64);
            let numeric = (plus - minus) / step;
            report.record((ti, ei), analytic[ti].data()[ei] as f64, numeric);
        }
    }
    Ok(report)
}
