use crate::error::{CoreError, Result};
use crate::nncore::params::ParamStore;

/// Outcome of a finite-difference gradient verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub pass: bool,
}

/// Compares the analytic gradients stored in `params` against central finite
/// differences of `loss`, coordinate by coordinate, in double precision.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`; the check passes iff every
/// coordinate stays below `tol`. A non-finite loss during perturbation is an
/// error naming the parameter being probed.
pub fn check_gradients<F>(
    params: &ParamStore<f64>,
    loss: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(CoreError::NonFinite("loss at the unperturbed point".into()));
    }

    let mut coords_checked = 0usize;
    let mut max_rel_error = 0.0f64;
    let mut worst_param = None;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let (rows, cols) = params.get(name)?.shape();
        for i in 0..rows {
            for j in 0..cols {
                let numeric = {
                    let mut probe = params.clone();
                    let v = probe.get(name)?.get(i, j);
                    probe.get_mut(name)?.set(i, j, v + step);
                    let plus = loss(&probe)?;
                    probe.get_mut(name)?.set(i, j, v - step);
                    let minus = loss(&probe)?;
                    if !plus.is_finite() || !minus.is_finite() {
                        return Err(CoreError::NonFinite(format!(
                            "loss while perturbing parameter \"{name}\"[{i},{j}]"
                        )));
                    }
                    (plus - minus) / (2.0 * step)
                };
                let analytic = params.grad(name)?.get(i, j);
                let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
                coords_checked += 1;
                if rel > max_rel_error {
                    max_rel_error = rel;
                    worst_param = Some(format!("{name}[{i},{j}]"));
                }
            }
        }
    }

    Ok(GradCheckReport {
        step,
        tol,
        coords_checked,
        max_rel_error,
        worst_param,
        pass: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::graph::Graph;
    use crate::nncore::tensor::Tensor2D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_setup() -> (ParamStore<f64>, Tensor2D<f64>, Tensor2D<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let w = Tensor2D::new(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor2D::new(1, 2, (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        store.insert("w", w).unwrap();
        store.insert("b", b).unwrap();
        let x = Tensor2D::new(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = Tensor2D::new(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (store, x, t)
    }

    fn linear_loss<'a>(
        x: &'a Tensor2D<f64>,
        t: &'a Tensor2D<f64>,
    ) -> impl Fn(&ParamStore<f64>) -> crate::error::Result<f64> + 'a {
        move |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.linear(xv, w, b)?;
            let l = g.mse_against(y, t, 0.125)?;
            Ok(g.scalar(l))
        }
    }

    #[test]
    fn linear_model_passes_at_tight_tolerance() {
        let (mut store, x, t) = linear_setup();
        // populate analytic grads
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.linear(xv, w, b).unwrap();
        let l = g.mse_against(y, &t, 0.125).unwrap();
        g.backward(l, &mut store).unwrap();

        let report = check_gradients(&store, linear_loss(&x, &t), 1e-5, 1e-6).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert_eq!(report.coords_checked, 8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut store, x, t) = linear_setup();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.linear(xv, w, b).unwrap();
        let l = g.mse_against(y, &t, 0.125).unwrap();
        g.backward(l, &mut store).unwrap();

        // corrupt one coordinate of the analytic gradient
        let bad = store.grad("w").unwrap().clone().scale(1.0);
        let mut delta = Tensor2D::zeros(3, 2);
        delta.set(1, 1, bad.get(1, 1).abs() + 1.0);
        store.accumulate_grad("w", &delta).unwrap();

        let report = check_gradients(&store, linear_loss(&x, &t), 1e-5, 1e-6).unwrap();
        assert!(!report.pass);
        assert!(report.worst_param.as_deref() == Some("w[1,1]"));
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor2D::row_vector(&[0.0])).unwrap();
        let loss = |s: &ParamStore<f64>| {
            let v = s.get("w")?.get(0, 0);
            // finite at 0, NaN once perturbed
            Ok(if v == 0.0 { 0.0 } else { f64::NAN })
        };
        let err = check_gradients(&store, loss, 1e-5, 1e-6).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }
}
