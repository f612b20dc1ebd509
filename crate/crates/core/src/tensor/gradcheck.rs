use super::Tensor;
use crate::error::{Error, Result};

/// Absolute floor in the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference check of `f` (tensor -> scalar) at `x` over every
/// coordinate. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    Ok(grad_check_coords(f, x, eps, &all)?.max_rel_err)
}

/// Like [`grad_check`] but restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("grad_check eps must lie in (0, 1e-3], got {eps}")));
    }
    let leaf = x.detach().requires_grad();
    let y = f(&leaf)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let base = x.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for &i in coords {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        let fp = f(&Tensor::new(probe.clone(), x.shape())?)?.item();
        probe[i] = base[i] - eps;
        let fm = f(&Tensor::new(probe, x.shape())?)?.item();
        let numeric = (fp - fm) / (2.0 * eps);
        let err = rel_err(analytic[i], numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(vec![0.3, -1.0, 2.5], &[3]).unwrap();
        let w = Tensor::new(vec![1.5, -2.0, 0.5], &[3]).unwrap();
        let err = grad_check(|t| t.mul(&w)?.sum(), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::ones(&[1]);
        assert!(grad_check(|t| t.sum(), &x, 1e-2).is_err());
        assert!(grad_check(|t| t.sum(), &x, 0.0).is_err());
    }
}
