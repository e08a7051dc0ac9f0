use crate::tensor::{Graph, Tensor, Var};

use super::ModelError;

/// Probability vector `exp(z_i) / Σ exp(z_j)`, computed with max subtraction.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>, ModelError> {
    if z.is_empty() {
        return Err(ModelError::NonFiniteLogits);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteLogits);
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits` (`N×C`).
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let (n, c) = match g.shape(logits) {
        &[n, c] => (n, c),
        s => return Err(ModelError::InputShape(format!("logits must be N×C, got {s:?}"))),
    };
    if labels.len() != n || n == 0 {
        return Err(ModelError::InputShape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(ModelError::LabelOutOfRange { label: y, classes: c });
        }
        onehot[i * c + y] = 1.0;
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(Tensor::new(&[n, c], onehot)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(z: &[f64], labels: &[usize]) -> f64 {
        let c = z.len() / labels.len();
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[labels.len(), c], z.to_vec()).unwrap());
        let loss = cross_entropy(&mut g, l, labels).unwrap();
        g.value(loss).item().unwrap()
    }

    #[test]
    fn uniform_logits() {
        let p = softmax(&[0.0; 5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!((ce(&[0.0; 5], &[3]) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let z = [1.0, -2.0, 0.5, 3.0, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 1000.0).collect();
        let (a, b) = (softmax(&z).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn known_distribution() {
        // Extended-precision oracle values (mpmath, 30 digits).
        let p = softmax(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let expected = [0.011656230956, 0.031684920796, 0.086128544436, 0.234121657252, 0.636408646559];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((ce(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0]) - 4.4519).abs() < 1e-3);
    }

    #[test]
    fn saturated_correct_class() {
        assert!(ce(&[0.0, 0.0, 50.0, 0.0, 0.0], &[2]) < 1e-20);
    }

    #[test]
    fn errors() {
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(
            cross_entropy(&mut g, l, &[5]),
            Err(ModelError::LabelOutOfRange { label: 5, classes: 5 })
        ));
    }
}
