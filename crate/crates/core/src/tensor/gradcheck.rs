use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the component with the largest relative error.
    pub worst_index: usize,
    pub pass: bool,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out);
    v.item().ok_or_else(|| TensorError::NonScalarLoss {
        shape: v.shape().to_vec(),
    })
}

/// Checks the gradient of the scalar program `f` at `x` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every component.
///
/// Relative error per component is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        pass: true,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = down;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        // Divide by the step actually representable around `orig`.
        let numeric = (plus - minus) / (up - down);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let r = finite_diff_check(|g, x| g.sum(x), &x, 1e-5, 1e-4).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err <= 1e-10, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient_scale() {
        // A program whose value is independent of x: analytic grad is absent
        // (zero), numeric grad is zero too, so it passes trivially.
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let r = finite_diff_check(
            |g, _x| {
                let c = g.constant(Tensor::from_vec(vec![1.0]));
                g.sum(c)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_err, 0.0);
    }
}
