//! Central finite differences and the gradient verification harness.

use crate::{par, Result, Tensor};

/// Central-difference gradient estimate of a deterministic scalar function
/// at `at`, with step `eps`. Returns a tensor of `at`'s shape.
pub fn finite_diff<F>(f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    assert!(eps > 0.0, "eps must be positive");
    let n = at.len();
    let grads = par::try_map_range(n, |i| {
        let mut plus = at.clone();
        plus.data_mut()[i] += eps;
        let mut minus = at.clone();
        minus.data_mut()[i] -= eps;
        Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
    })?;
    Tensor::new(at.shape(), grads)
}

/// Relative error with a unit floor, the usual gradcheck metric:
/// |a - b| / max(1, |a|, |b|).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest elementwise [`rel_error`] between two gradient buffers.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_error(a, b))
        .fold(0.0, f64::max)
}

/// Accumulates named gradient-check results and reports the worst one.
#[derive(Debug, Default)]
pub struct GradCheck {
    entries: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: impl Into<String>, max_rel_err: f64) {
        self.entries.push((name.into(), max_rel_err));
    }

    /// Checks `analytic` against a finite-difference estimate of `f` at `at`.
    pub fn check<F>(
        &mut self,
        name: impl Into<String>,
        f: F,
        at: &Tensor,
        analytic: &[f64],
        eps: f64,
    ) -> Result<f64>
    where
        F: Fn(&Tensor) -> Result<f64> + Sync,
    {
        let fd = finite_diff(f, at, eps)?;
        let err = max_rel_error(analytic, fd.data());
        self.record(name, err);
        Ok(err)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.entries.iter().all(|(_, e)| *e < tol)
    }

    pub fn report(&self, tol: f64) -> String {
        let mut out = String::new();
        for (name, err) in &self.entries {
            let status = if *err < tol { "ok " } else { "FAIL" };
            out.push_str(&format!("{status}  {err:.3e}  {name}\n"));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (tolerance {tol:.1e})\n",
            self.worst()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let at = Tensor::scalar(3.0);
        let g = finite_diff(|t| Ok(t.data()[0] * t.data()[0]), &at, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let at = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = finite_diff(|_| Ok(42.0), &at, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }
}
