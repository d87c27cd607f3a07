use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Worst central-difference disagreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    /// `(parameter, flat index)` pairs where a perturbed evaluation was
    /// non-finite or failed.
    pub non_finite: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error() < tol
    }

    /// `(parameter, flat index, error)` of the worst coordinate overall.
    pub fn worst(&self) -> Option<(usize, usize, f64)> {
        self.params
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .map(|(p, r)| (p, r.worst_index, r.max_rel_error))
    }
}

fn eval<T: Real, F>(f: &F, point: &[Tensor<T>]) -> Option<f64>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars).ok()?;
    let v = tape.item(out).f64();
    v.is_finite().then_some(v)
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `eps`. `subset`, when given, lists the flat indices
/// to probe for each parameter; otherwise every coordinate is probed.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<T: Real, F>(
    f: F,
    point: &[Tensor<T>],
    eps: f64,
    subset: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut params = Vec::with_capacity(point.len());
    let mut non_finite = Vec::new();
    let mut probe = point.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_f64()).unwrap_or_else(|| vec![0.0; point[p].len()]);
        let indices: Vec<usize> = match subset {
            Some(s) => s[p].clone(),
            None => (0..point[p].len()).collect(),
        };
        let mut report = ParamReport { max_rel_error: 0.0, worst_index: 0, checked: 0 };
        for &i in &indices {
            let x0 = point[p].data[i];
            probe[p].data[i] = T::c(x0.f64() + eps);
            let plus = eval(&f, &probe);
            probe[p].data[i] = T::c(x0.f64() - eps);
            let minus = eval(&f, &probe);
            probe[p].data[i] = x0;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                non_finite.push((p, i));
                continue;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
        }
        params.push(report);
    }
    Ok(GradCheckReport { params, non_finite })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |t: &Tape<f64>, v: &[Var]| t.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-3,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn discontinuity_is_surfaced() {
        // clamp(1e9 x, 0, 1) is a step at x = 0: a contract violation for
        // finite differences, which the report must point at.
        let point = Tensor::from_f64(&[3], &[0.5, 1e-4, -0.7]);
        let report = grad_check(
            |t: &Tape<f64>, v: &[Var]| {
                let s = t.scale(v[0], 1e9);
                let c = t.clamp(s, 0.0, 1.0);
                Ok(t.sum(c))
            },
            &[point],
            1e-3,
            None,
        )
        .unwrap();
        let (p, i, err) = report.worst().unwrap();
        assert_eq!((p, i), (0, 1));
        assert!(err > 0.5);
        assert!(!report.passes(1e-2));
    }

    #[test]
    fn non_finite_flagged_with_coordinate() {
        let point = Tensor::from_f64(&[2], &[1.0, 1e-4]);
        let report = grad_check(
            |t: &Tape<f64>, v: &[Var]| {
                let l = t.log(v[0]);
                Ok(t.sum(l))
            },
            &[point],
            1e-3,
            None,
        )
        .unwrap();
        assert_eq!(report.non_finite, vec![(0, 1)]);
    }
}
