//! Central-difference verification of autodiff gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients near zero are
/// judged on absolute error instead of blowing up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Per-input agreement between autodiff and finite differences.
#[derive(Clone, Debug)]
pub struct InputReport {
    /// Position of the input in the slice handed to [`grad_check`].
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    /// One entry per input with `requires_grad`; others are omitted.
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_err < self.tol)
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares autodiff gradients of the scalar `f` with
/// `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `f` receives a fresh graph and one node per input. Failures are reported,
/// not raised; errors only come from `f` itself.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;

    let mut reports = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = g.grad(ids[k]).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut rep = InputReport { input: k, max_rel_err: 0.0, max_abs_err: 0.0, worst_element: 0 };
        let mut probe = inputs.to_vec();
        for e in 0..input.numel() {
            let mut plus = input.to_vec();
            plus[e] += h;
            probe[k] = Tensor::new(input.shape(), plus)?.with_requires_grad(true);
            let fp = eval(&probe)?;
            let mut minus = input.to_vec();
            minus[e] -= h;
            probe[k] = Tensor::new(input.shape(), minus)?.with_requires_grad(true);
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = relative_error(analytic[e], numeric);
            rep.max_abs_err = rep.max_abs_err.max((analytic[e] - numeric).abs());
            if rel > rep.max_rel_err || rel.is_nan() {
                rep.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                rep.worst_element = e;
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport { h, tol, inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[7], 0.5, 2.0, &mut rng).with_requires_grad(true);
        let rep = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng).with_requires_grad(true);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng).with_requires_grad(true);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let rep = grad_check(
            |g, ids| {
                let c = g.matmul(ids[0], ids[1])?;
                let s = g.softmax(c, 1)?;
                let p = g.mul(s, ids[2])?;
                g.sum(p)
            },
            &[a, b, w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        // the constant weight input is not reported
        assert_eq!(rep.inputs.iter().map(|r| r.input).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn broken_gradient_is_reported() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        // detaching through a constant makes autodiff see zero gradient
        let rep = grad_check(
            |g, ids| {
                let v = g.value(ids[0]).clone();
                let c = g.constant(v);
                let s = g.mul(c, c)?;
                let z = g.scale(ids[0], 0.0)?;
                let t = g.add(s, z)?;
                g.sum(t)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed());
    }
}
