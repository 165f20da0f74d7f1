use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1, |a|, |n|)` over every probed coordinate.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from one leaf per entry of `inputs`. When
/// `max_coords` is set, at most that many evenly spaced coordinates of each
/// input are probed.
pub fn grad_check<T, F>(
    inputs: &[Tensor<T>],
    step: T,
    max_coords: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::invalid(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let two_h = step + step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = grads.get(vars[idx]);
        let count = max_coords.map_or(n, |m| m.min(n));
        for c in 0..count {
            let coord = if count == n { c } else { c * n / count };
            let orig = input.data()[coord];
            probe[idx].data_mut()[coord] = orig + step;
            let up = eval(&probe)?;
            probe[idx].data_mut()[coord] = orig - step;
            let down = eval(&probe)?;
            probe[idx].data_mut()[coord] = orig;

            let numeric = ((up - down) / two_h).as_f64();
            let a = analytic.map_or(0.0, |t| t.data()[coord].as_f64());
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((idx, coord));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
