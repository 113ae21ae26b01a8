use super::tape::{ParamStore, Tape};
use super::var::Var;
use super::AutodiffError;

/// Result of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub non_finite: bool,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

/// Compare backprop gradients of `f` against central differences.
///
/// `f` receives a fresh tape built from `params` and returns a scalar loss.
/// The relative error of an entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&Tape) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::from_store(params);
    let loss = f(&tape)?;
    let mut non_finite = !loss.item().is_finite();
    tape.backward(&loss)?;
    drop(loss);

    let eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let t = Tape::from_store(store);
        Ok(f(&t)?.item())
    };

    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut probe = params.clone();
    for (name, value) in params {
        let analytic = tape.grad(name).expect("registered").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let x = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                non_finite = true;
                worst = Some((name.clone(), i));
                continue;
            }
            if err > max_rel_error {
                max_rel_error = err;
                worst = Some((name.clone(), i));
            }
        }
    }
    Ok(GradCheck { max_rel_error, worst, non_finite })
}
