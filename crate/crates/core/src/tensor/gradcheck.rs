use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half-width.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// whose true gradient is ~0 are compared on an absolute scale.
    pub denominator_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per parameter tensor, the largest relative error over its coordinates.
    pub max_rel_error: Vec<f64>,
    /// (parameter, element) with the largest error overall.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `build` against central finite differences
/// for every coordinate of every parameter.
///
/// `build` receives the parameters as tape leaves and must return a scalar.
pub fn check_gradients<F>(
    params: &[Tensor],
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(cfg.step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut work = params.to_vec();
    let mut max_rel_error = vec![0.0; params.len()];
    let mut worst = None;
    let mut worst_err = -1.0;
    for p in 0..params.len() {
        let analytic = grads.wrt(vars[p]);
        for k in 0..params[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + cfg.step;
            let plus = evaluate(&work, &build)?;
            work[p].data_mut()[k] = orig - cfg.step;
            let minus = evaluate(&work, &build)?;
            work[p].data_mut()[k] = orig;
            for value in [plus, minus] {
                if !value.is_finite() {
                    return Err(TensorError::NonFiniteObjective {
                        param: p,
                        index: k,
                        value,
                    });
                }
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[k], numeric, cfg.denominator_floor);
            if err > max_rel_error[p] {
                max_rel_error[p] = err;
            }
            if err > worst_err {
                worst_err = err;
                worst = Some((p, k));
            }
        }
    }
    let pass = max_rel_error.iter().all(|&e| e < cfg.tolerance);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        tolerance: cfg.tolerance,
        pass,
    })
}
