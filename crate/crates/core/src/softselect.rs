//! Differentiable top-k selection through an `n × 2` entropy-regularised
//! transport problem, and the SoftIoU overlap energy.
//!
//! Every value here is computed on a [`Tape`]; the plain entry points simply
//! run the same graph with constant inputs, so forward values never depend on
//! whether gradients are wanted.
//!
//! Sinkhorn runs in the log domain on potentials pre-divided by τ:
//!
//! ```text
//! L   = −C / τ
//! f_i = ln(1/n) − LSE_j(g_j + L_ij)
//! g_j = ln ν_j  − LSE_i(f_i + L_ij)
//! Γ   = exp(f ⊕ g + L)
//! ```
//!
//! The reported potentials are `u = τ·f`, `v = τ·g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Number of selected entries for quantile `q` over `n` values, matching the
/// hard nearest-rank mask: `n − ⌈q·n⌉`.
pub fn selection_size(n: usize, q: f64) -> usize {
    let rank = ceil_rank(q, n);
    n.saturating_sub(rank)
}

/// `⌈q·n⌉` with a guard against `q·n` landing a rounding error above an
/// integer.
pub(crate) fn ceil_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Min-max rescales to `[0, 1]`. A constant input yields all `0.5` and `true`.
pub fn normalize_map(values: &[f64]) -> (Vec<f64>, bool) {
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_vec(values.len(), 1, values.to_vec()));
    let (m, degenerate) = tape.min_max(x);
    (tape.value(m).data().to_vec(), degenerate)
}

/// When to stop iterating.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stopping {
    /// Stop once the maximum marginal residual is at most `tol`, or after
    /// `max_iters`.
    Tolerance { max_iters: usize, tol: f64 },
    /// Run exactly this many iterations.
    Fixed(usize),
}

impl Default for Stopping {
    fn default() -> Self {
        Stopping::Tolerance {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

impl Stopping {
    fn max_iters(self) -> usize {
        match self {
            Stopping::Tolerance { max_iters, .. } => max_iters,
            Stopping::Fixed(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    values: Vec<f64>,
    k: usize,
    tau: f64,
}

impl TransportProblem {
    /// `values` must already lie in `[0, 1]`; see [`normalize_map`].
    pub fn new(values: Vec<f64>, k: usize, tau: f64) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Argument("transport needs at least 2 values".into()));
        }
        if k == 0 || k >= n {
            return Err(Error::Argument(format!("k = {k} not in [1, {}]", n - 1)));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config("tau", format!("{tau} must be positive")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("value {v} outside [0, 1]")));
        }
        Ok(TransportProblem { values, k, tau })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `n × 2`: squared distance to 0 and to 1.
    pub fn cost(&self) -> Mat {
        Mat::from_fn(self.n(), 2, |i, j| {
            let m = self.values[i];
            if j == 0 {
                m * m
            } else {
                (m - 1.0) * (m - 1.0)
            }
        })
    }

    pub fn row_marginal(&self) -> f64 {
        1.0 / self.n() as f64
    }

    pub fn col_marginal(&self) -> [f64; 2] {
        let n = self.n() as f64;
        [(n - self.k as f64) / n, self.k as f64 / n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `n × 2`, nonnegative.
    pub gamma: Mat,
    pub u: Vec<f64>,
    pub v: [f64; 2],
    pub iterations: usize,
    pub residual: f64,
    /// False when the iteration cap was hit above tolerance.
    pub converged: bool,
}

/// Tape handles of a soft top-k evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TapedSelection {
    pub gamma: Var,
    pub f: Var,
    pub g: Var,
    /// `n × 1` soft mask in `[0, 1]`.
    pub mask: Var,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn residual_of(gamma: &Mat, row: f64, col: [f64; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..gamma.rows() {
        worst = worst.max((gamma.row(i).iter().sum::<f64>() - row).abs());
    }
    let sums = gamma.col_sums();
    for (j, c) in col.iter().enumerate() {
        worst = worst.max((sums.data()[j] - c).abs());
    }
    worst
}

/// Sinkhorn on `values` (an `n × 1` node already in `[0, 1]`).
pub fn sinkhorn_taped(tape: &mut Tape, values: Var, k: usize, tau: f64, stopping: Stopping) -> TapedSelection {
    let n = tape.value(values).rows();
    let row = 1.0 / n as f64;
    let col = [(n - k) as f64 / n as f64, k as f64 / n as f64];

    let to_zero = tape.square(values);
    let shifted = tape.offset(values, -1.0);
    let to_one = tape.square(shifted);
    let cost = tape.concat_cols(&[to_zero, to_one]);
    let logits = tape.scale(cost, -1.0 / tau);
    let log_nu = tape.constant(Mat::from_vec(1, 2, vec![col[0].ln(), col[1].ln()]));

    let mut g = tape.constant(Mat::zeros(1, 2));
    let mut f;
    let mut gamma;
    let mut iterations = 0;
    let mut residual;
    loop {
        let lg = tape.add_row(logits, g);
        let lse = tape.logsumexp_rows(lg);
        let neg = tape.scale(lse, -1.0);
        f = tape.offset(neg, row.ln());
        let lf = tape.add_col(logits, f);
        let lse = tape.logsumexp_cols(lf);
        g = tape.sub(log_nu, lse);
        iterations += 1;
        let full = tape.add_row(lf, g);
        gamma = tape.exp(full);
        residual = residual_of(tape.value(gamma), row, col);
        let done = match stopping {
            Stopping::Tolerance { max_iters, tol } => residual <= tol || iterations >= max_iters,
            Stopping::Fixed(m) => iterations >= m,
        };
        if done || iterations >= stopping.max_iters().max(1) {
            break;
        }
    }
    let converged = match stopping {
        Stopping::Tolerance { tol, .. } => residual <= tol,
        Stopping::Fixed(_) => true,
    };
    let selected = tape.col_slice(gamma, 1, 1);
    let scaled = tape.scale(selected, n as f64);
    let mask = tape.clamp(scaled, 0.0, 1.0);
    TapedSelection {
        gamma,
        f,
        g,
        mask,
        iterations,
        residual,
        converged,
    }
}

pub fn sinkhorn_solve(problem: &TransportProblem, max_iters: usize, tol: f64) -> TransportPlan {
    solve_with(problem, Stopping::Tolerance { max_iters, tol }).0
}

/// Solves and also returns the clamped soft mask node's value.
fn solve_with(problem: &TransportProblem, stopping: Stopping) -> (TransportPlan, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_vec(problem.n(), 1, problem.values.clone()));
    let sel = sinkhorn_taped(&mut tape, x, problem.k, problem.tau, stopping);
    let tau = problem.tau;
    let g = tape.value(sel.g);
    let plan = TransportPlan {
        gamma: tape.value(sel.gamma).clone(),
        u: tape.value(sel.f).data().iter().map(|f| f * tau).collect(),
        v: [g.data()[0] * tau, g.data()[1] * tau],
        iterations: sel.iterations,
        residual: sel.residual,
        converged: sel.converged,
    };
    (plan, tape.value(sel.mask).data().to_vec())
}

/// Independent problems solved with `exec`, results in input order.
pub fn solve_batch(exec: Exec, problems: &[TransportProblem], max_iters: usize, tol: f64) -> Vec<TransportPlan> {
    exec.map(problems, |p| sinkhorn_solve(p, max_iters, tol))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Vec<f64>,
    pub k: usize,
    pub converged: bool,
}

impl SoftMask {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn soft_mask(plan: &TransportPlan) -> SoftMask {
    let n = plan.gamma.rows();
    let values: Vec<f64> = (0..n)
        .map(|i| (n as f64 * plan.gamma.get(i, 1)).clamp(0.0, 1.0))
        .collect();
    let k = (plan.gamma.col_sums().data()[1] * n as f64).round() as usize;
    SoftMask {
        values,
        k,
        converged: plan.converged,
    }
}

/// Normalise, solve and take the soft mask in one call.
pub fn soft_top_k(values: &[f64], k: usize, tau: f64, stopping: Stopping) -> Result<(SoftMask, bool)> {
    let (m, degenerate) = normalize_map(values);
    let problem = TransportProblem::new(m, k, tau)?;
    let (plan, mask) = solve_with(&problem, stopping);
    Ok((
        SoftMask {
            values: mask,
            k,
            converged: plan.converged,
        },
        degenerate,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftIou {
    pub value: f64,
    /// Both masks were all zero; the value is defined as 0.
    pub degenerate: bool,
}

pub fn soft_iou(a: &[f64], b: &[f64]) -> Result<SoftIou> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut tape = Tape::new();
    let av = tape.constant(Mat::from_vec(a.len(), 1, a.to_vec()));
    let bv = tape.constant(Mat::from_vec(b.len(), 1, b.to_vec()));
    let (e, degenerate) = soft_iou_taped(&mut tape, av, bv);
    Ok(SoftIou {
        value: tape.scalar_value(e),
        degenerate,
    })
}

/// `Σab / (Σa + Σb − Σab)`; all-zero inputs give a constant 0 and `true`.
pub fn soft_iou_taped(tape: &mut Tape, a: Var, b: Var) -> (Var, bool) {
    let ab = tape.mul(a, b);
    let inter = tape.sum(ab);
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let both = tape.add(sa, sb);
    let union = tape.sub(both, inter);
    if !(tape.scalar_value(union) > 0.0) {
        return (tape.constant(Mat::scalar(0.0)), true);
    }
    (tape.div(inter, union), false)
}

/// Result of [`soft_iou_gradient`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftIouGradient {
    pub energy: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// Iterations used by the two solves, for replaying at fixed count.
    pub iterations: [usize; 2],
    pub converged: bool,
    /// Either map was constant or both masks vanished.
    pub degenerate: bool,
}

/// SoftIoU of the soft top-k masks of two raw maps, differentiated through
/// normalisation, the unrolled Sinkhorn iterations and the mask.
pub fn soft_iou_gradient(
    values_a: &[f64],
    values_b: &[f64],
    k: usize,
    tau: f64,
    stopping: [Stopping; 2],
) -> Result<SoftIouGradient> {
    if values_a.len() != values_b.len() {
        return Err(Error::Argument("maps differ in length".into()));
    }
    let n = values_a.len();
    let mut tape = Tape::new();
    let a = tape.param(Mat::from_vec(n, 1, values_a.to_vec()));
    let b = tape.param(Mat::from_vec(n, 1, values_b.to_vec()));
    let energy = soft_iou_energy_taped(&mut tape, a, b, k, tau, stopping)?;
    let grads = tape.backward(energy.energy);
    Ok(SoftIouGradient {
        energy: tape.scalar_value(energy.energy),
        grad_a: grads.get_or_zeros(a, (n, 1)).into_vec(),
        grad_b: grads.get_or_zeros(b, (n, 1)).into_vec(),
        iterations: energy.iterations,
        converged: energy.converged,
        degenerate: energy.degenerate,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TapedEnergy {
    pub energy: Var,
    pub masks: [Var; 2],
    pub iterations: [usize; 2],
    pub converged: bool,
    pub degenerate: bool,
}

/// The full chain from two raw `n × 1` maps on `tape` to the SoftIoU energy.
pub fn soft_iou_energy_taped(
    tape: &mut Tape,
    a: Var,
    b: Var,
    k: usize,
    tau: f64,
    stopping: [Stopping; 2],
) -> Result<TapedEnergy> {
    let n = tape.value(a).rows();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!("k = {k} not in [1, {}]", n.saturating_sub(1))));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("{tau} must be positive")));
    }
    let (na, da) = tape.min_max(a);
    let (nb, db) = tape.min_max(b);
    let sa = sinkhorn_taped(tape, na, k, tau, stopping[0]);
    let sb = sinkhorn_taped(tape, nb, k, tau, stopping[1]);
    let (energy, dz) = soft_iou_taped(tape, sa.mask, sb.mask);
    Ok(TapedEnergy {
        energy,
        masks: [sa.mask, sb.mask],
        iterations: [sa.iterations, sb.iterations],
        converged: sa.converged && sb.converged,
        degenerate: da || db || dz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_size_matches_rank() {
        assert_eq!(selection_size(256, 0.7), 76);
        assert_eq!(selection_size(10, 0.7), 3);
        assert_eq!(selection_size(4, 0.5), 2);
        assert_eq!(ceil_rank(0.7, 4), 3);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_map(&[2.0, 4.0]), (vec![0.0, 1.0], false));
        assert_eq!(normalize_map(&[0.0, 0.25, 1.0]).0, vec![0.0, 0.25, 1.0]);
        assert_eq!(normalize_map(&[3.0; 4]), (vec![0.5; 4], true));
    }

    #[test]
    fn sharp_selection_picks_top_k() {
        let p = TransportProblem::new(vec![0.9, 0.1, 0.8, 0.2], 2, 0.01).unwrap();
        let plan = sinkhorn_solve(&p, 200, 1e-6);
        let mask = soft_mask(&plan);
        for (m, e) in mask.values.iter().zip([1.0, 0.0, 1.0, 0.0]) {
            assert!((m - e).abs() < 1e-3, "{:?}", mask.values);
        }
    }

    #[test]
    fn two_point_problem() {
        let p = TransportProblem::new(vec![0.0, 1.0], 1, 0.05).unwrap();
        let mask = soft_mask(&sinkhorn_solve(&p, 200, 1e-9));
        assert!(mask.values[0] < 1e-3 && mask.values[1] > 1.0 - 1e-3);
        assert!((mask.sum() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn large_tau_approaches_independence() {
        let p = TransportProblem::new(vec![0.0, 0.3, 0.6, 1.0, 0.5], 2, 100.0).unwrap();
        let plan = sinkhorn_solve(&p, 200, 1e-10);
        let nu = p.col_marginal();
        for i in 0..5 {
            for j in 0..2 {
                assert!((plan.gamma.get(i, j) - 0.2 * nu[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn soft_iou_examples() {
        assert_eq!(soft_iou(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap().value, 1.0);
        assert_eq!(soft_iou(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let half = soft_iou(&[0.5, 0.5], &[0.5, 0.5]).unwrap().value;
        assert!((half - 1.0 / 3.0).abs() < 1e-15);
        let empty = soft_iou(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(empty.degenerate && empty.value == 0.0);
        assert!(soft_iou(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn problem_validation() {
        assert!(TransportProblem::new(vec![0.1, 0.2], 0, 0.1).is_err());
        assert!(TransportProblem::new(vec![0.1, 0.2], 2, 0.1).is_err());
        assert!(TransportProblem::new(vec![0.1, 0.2], 1, 0.0).is_err());
        assert!(TransportProblem::new(vec![0.1, 1.2], 1, 0.1).is_err());
    }

    #[test]
    fn symmetric_inputs_give_equal_gradients() {
        let v: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64 / 15.0).collect();
        let g = soft_iou_gradient(&v, &v, 5, 0.1, [Stopping::default(); 2]).unwrap();
        assert_eq!(g.grad_a, g.grad_b);
        let (mask, _) = soft_top_k(&v, 5, 0.1, Stopping::default()).unwrap();
        let s: f64 = mask.values.iter().sum();
        let s2: f64 = mask.values.iter().map(|m| m * m).sum();
        assert!((g.energy - s2 / (2.0 * s - s2)).abs() < 1e-12);
    }
}
