use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(eps > S::zero() && eps.as_f64() <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    let eval = |point: &Tensor<S>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if !val.is_scalar() {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        Ok(val.item().as_f64())
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let base = g.value(out).item().as_f64();
    let analytic = g.backward(out)?.wrt(xv).to_f64();
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(0));
    }

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // actual step after rounding into S
        let h = (orig + eps).as_f64() - (orig - eps).as_f64();
        numeric.push((up - down) / h);
    }

    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst, analytic, numeric })
}
