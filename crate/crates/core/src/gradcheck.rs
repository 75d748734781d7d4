//! Finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it is an independent
//! oracle for the analytic backward implementations. The named-instance
//! registry drives the `gradcheck` CLI subcommand; tests reuse the same
//! machinery on small double-precision instances.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &ArrayD<T>, step: T) -> ArrayD<T>
where
    T: Scalar,
    F: FnMut(&ArrayD<T>) -> T,
{
    let mut grad = ArrayD::<T>::zeros(x.raw_dim());
    let mut probe = x.clone();
    let two = T::c(2.0);
    for i in 0..x.len() {
        let xi = x.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = xi + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = xi - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = xi;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (two * step);
    }
    grad
}

/// max over elements of |a-n| / max(|a|, |n|, floor).
pub fn max_rel_err<T: Scalar>(analytic: &ArrayD<T>, numeric: &ArrayD<T>) -> f64 {
    let floor = 1e-6;
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let a = a.to_f64_lossy();
            let n = n.to_f64_lossy();
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// One checked input or parameter group.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Deterministic asymmetric reduction of a tensor to a scalar: multiplies by
/// a fixed pseudo-random mask, squares, and sums. A plain sum-of-squares can
/// be blind to some inputs (batch-norm outputs are nearly norm-invariant), so
/// checks reduce through this instead.
pub fn probe_loss<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let mut state = 0x9e3779b97f4a7c15u64;
    let data: Vec<T> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            T::c(((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0 + 0.25)
        })
        .collect();
    let mask = g.constant(ArrayD::from_shape_vec(g.value(v).raw_dim(), data).unwrap());
    let w = g.mul(v, mask)?;
    let one = g.affine(w, T::one(), T::c(0.5));
    let sq = g.mul(one, one)?;
    Ok(g.sum_all(sq))
}

/// Checks analytic gradients of `build` (graph construction returning a scalar
/// loss) against finite differences, one group per seeded leaf.
///
/// `build` receives the graph plus the current values of every group and must
/// register them (in order) via `Graph::input`, returning the loss node and
/// the `Var` bound to each group.
pub fn check_groups<T, F>(
    op: &str,
    groups: &[(&str, ArrayD<T>)],
    step: T,
    tolerance: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[ArrayD<T>]) -> Result<(Var, Vec<Var>)>,
{
    let values: Vec<ArrayD<T>> = groups.iter().map(|(_, v)| v.clone()).collect();

    // Analytic pass.
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, &values)?;
    if vars.len() != groups.len() {
        return Err(Error::config(format!(
            "gradcheck {op}: build returned {} vars for {} groups",
            vars.len(),
            groups.len()
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<ArrayD<T>> = vars
        .iter()
        .zip(groups)
        .map(|(v, (_, value))| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()))
        })
        .collect();

    // Numeric pass, group by group.
    let mut reports = Vec::new();
    for (gi, (name, _)) in groups.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe: &ArrayD<T>| {
                let mut vals = values.clone();
                vals[gi] = probe.clone();
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, &vals).expect("gradcheck forward failed");
                g.scalar_value(loss)
            },
            &values[gi],
            step,
        );
        reports.push(GroupReport {
            group: name.to_string(),
            max_rel_err: max_rel_err(&analytic[gi], &numeric),
        });
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        step: step.to_f64_lossy(),
        tolerance,
        groups: reports,
    })
}
