//! Central finite-difference verification of tape gradients.

use super::params::{ParamBinding, ParamSet};
use super::{NodeId, Tape};
use crate::error::{Error, Result};

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub h: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad check (h={:.1e}, tol={:.1e}): {}",
            self.h,
            self.tol,
            if self.pass() { "PASS" } else { "FAIL" }
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<28} entries={:<6} max_rel_err={:.3e}{}",
                t.name,
                t.entries,
                t.max_rel_err,
                if t.max_rel_err < self.tol { "" } else { "  <-- FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compare analytic gradients of a scalar-valued computation against central
/// finite differences for every entry of every parameter tensor.
///
/// `build` must be deterministic: it is re-invoked on perturbed copies of
/// `params` and any internal randomness would corrupt the differences.
/// Relative error per entry is `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &ParamSet, build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Tape, &mut ParamBinding) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "grad_check step h={h} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binding = ParamBinding::for_params(p);
        let loss = build(p, &mut tape, &mut binding)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            let (node, op_tag) = tape.find_non_finite().unwrap_or((loss, "loss"));
            return Err(Error::NonFinite { op_tag, node });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let mut binding = ParamBinding::for_params(params);
    let loss = build(params, &mut tape, &mut binding)?;
    let grads = tape.backward(loss)?;
    let analytic = binding.collect(&grads, params);

    let mut tensors = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let mut max_rel = 0.0;
        let mut worst = 0;
        for i in 0..params.get(slot).len() {
            let mut plus = params.clone();
            plus.get_mut(slot).data[i] += h;
            let mut minus = params.clone();
            minus.get_mut(slot).data[i] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[slot].data[i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        tensors.push(TensorCheck {
            name: params.name(slot).to_string(),
            entries: params.get(slot).len(),
            max_rel_err: max_rel,
            worst_entry: worst,
        });
    }

    Ok(GradCheckReport { tol, h, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn sum_has_all_ones_gradient_with_zero_error() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::from_vec(1, 3, vec![0.5, -1.5, 2.0]));
        let report = grad_check(
            &params,
            |ps, tape, binding| {
                let n = binding.node(tape, ps, p);
                Ok(tape.sum_all(n))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn sum_of_squares_gradient_is_two_p() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        // analytic check first: d/dp sum(p^2) = [2, 4]
        let mut tape = Tape::new();
        let mut binding = ParamBinding::for_params(&params);
        let n = binding.node(&mut tape, &params, p);
        let sq = tape.hadamard(n, n).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.of(n), &[2.0, 4.0]);

        let report = grad_check(
            &params,
            |ps, tape, binding| {
                let n = binding.node(tape, ps, p);
                let sq = tape.hadamard(n, n)?;
                Ok(tape.sum_all(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let params = ParamSet::new();
        let err = grad_check(&params, |_, tape, _| Ok(tape.constant_scalar(0.0)), 1e-2, 1e-4);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_names_offending_op() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::zeros(1, 1));
        let err = grad_check(
            &params,
            |ps, tape, binding| {
                let n = binding.node(tape, ps, p);
                let r = tape.recip(n); // 1/0
                Ok(tape.sum_all(r))
            },
            1e-5,
            1e-4,
        );
        match err {
            Err(Error::NonFinite { op_tag, .. }) => assert_eq!(op_tag, "recip"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
