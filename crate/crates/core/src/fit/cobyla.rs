//! Derivative-free constrained minimization by linear approximations
//! (Powell's COBYLA scheme).
//!
//! The objective and the constraints are modelled by linear interpolation on
//! a simplex of `n + 1` points. Each iteration takes the step that minimizes
//! the linear model inside a trust region of radius `rho`, first reducing the
//! largest linearized constraint violation and then the objective without
//! increasing that violation. Steps are judged by the merit function
//! `f + μ · max violation`, with the penalty `μ` raised whenever a step would
//! otherwise trade feasibility for objective. When no further progress is
//! possible at the current radius, `rho` is halved, down to `rho_end`.
//!
//! Constraints use the `c(x) >= 0` convention.
//!
//! The trust-region subproblem is solved exactly by enumerating active sets,
//! which is cheap for the handful of constraints used in this crate but grows
//! as `2^m`; at most [`MAX_CONSTRAINTS`] are accepted.

use nalgebra::{DMatrix, DVector};

pub const MAX_CONSTRAINTS: usize = 12;

// Powell's simplex-management constants.
const ALPHA: f64 = 0.25;
const BETA: f64 = 2.1;
const GAMMA: f64 = 0.5;
const DELTA: f64 = 1.1;

#[derive(Clone, Debug)]
pub struct CobylaOptions {
    pub rho_begin: f64,
    pub rho_end: f64,
    pub max_evals: usize,
}

impl Default for CobylaOptions {
    fn default() -> Self {
        Self {
            rho_begin: 0.5,
            rho_end: 1e-6,
            max_evals: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CobylaStatus {
    /// The trust region shrank to `rho_end`.
    Converged,
    MaxEvaluations,
    /// The objective or a constraint returned NaN or infinity.
    NonFinite,
    /// The interpolation simplex collapsed.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct CobylaResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// `max(0, -min_k c_k(x))`
    pub max_violation: f64,
    pub evals: usize,
    pub status: CobylaStatus,
}

#[derive(Clone, Debug)]
struct Sample {
    c: Vec<f64>,
    f: f64,
    resmax: f64,
}

impl Sample {
    fn merit(&self, mu: f64) -> f64 {
        self.f + mu * self.resmax
    }
}

struct Evaluator<F> {
    func: F,
    m: usize,
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Evaluator<F> {
    fn eval(&mut self, x: &DVector<f64>) -> Option<Sample> {
        let mut c = vec![0.0; self.m];
        let f = (self.func)(x.as_slice(), &mut c);
        self.evals += 1;
        if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let resmax = c.iter().fold(0.0f64, |acc, &v| acc.max(-v));
        Some(Sample { c, f, resmax })
    }
}

/// Minimizes `func` from `x0`.
///
/// `func(x, c)` returns the objective and writes the `m` constraint values
/// into `c`; the feasible set is `c >= 0`.
pub fn minimize<F>(func: F, x0: &[f64], m: usize, opts: &CobylaOptions) -> CobylaResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert!(n > 0, "need at least one variable");
    assert!(m <= MAX_CONSTRAINTS, "at most {MAX_CONSTRAINTS} constraints");
    assert!(
        opts.rho_begin >= opts.rho_end && opts.rho_end > 0.0,
        "need rho_begin >= rho_end > 0"
    );
    let mut ev = Evaluator { func, m, evals: 0 };
    let mut rho = opts.rho_begin;
    let mut parmu = 0.0f64;

    let mut pole = DVector::from_column_slice(x0);
    let Some(first) = ev.eval(&pole) else {
        return finish(pole, None, ev.evals, CobylaStatus::NonFinite);
    };
    // data[j] belongs to vertex pole + sim.column(j); data[n] to the pole.
    let mut data: Vec<Sample> = Vec::with_capacity(n + 1);
    for j in 0..n {
        let mut x = pole.clone();
        x[j] += rho;
        match ev.eval(&x) {
            Some(s) => data.push(s),
            None => return finish(pole, Some(first), ev.evals, CobylaStatus::NonFinite),
        }
    }
    data.push(first);
    let mut sim = DMatrix::<f64>::identity(n, n) * rho;
    let mut simi = DMatrix::<f64>::identity(n, n) / rho;

    let mut ibrnch = false;
    let status = 'outer: loop {
        if ev.evals >= opts.max_evals {
            break CobylaStatus::MaxEvaluations;
        }
        select_pole(&mut pole, &mut sim, &mut simi, &mut data, parmu);
        if !simplex_inverse_ok(&sim, &simi) {
            match sim.clone().try_inverse() {
                Some(inv) => simi = inv,
                None => break CobylaStatus::Degenerate,
            }
        }

        // Linear models: gradients of each constraint and of the objective.
        let pd = &data[n];
        let mut grads: Vec<DVector<f64>> = Vec::with_capacity(m);
        for k in 0..m {
            let diffs = DVector::from_fn(n, |j, _| data[j].c[k] - pd.c[k]);
            grads.push(simi.tr_mul(&diffs));
        }
        let fdiffs = DVector::from_fn(n, |j, _| data[j].f - pd.f);
        let g = simi.tr_mul(&fdiffs);

        let parsig = ALPHA * rho;
        let pareta = BETA * rho;
        let vsig: Vec<f64> = (0..n).map(|j| 1.0 / simi.row(j).norm()).collect();
        let veta: Vec<f64> = (0..n).map(|j| sim.column(j).norm()).collect();
        let acceptable = (0..n).all(|j| vsig[j] >= parsig && veta[j] <= pareta);

        if !ibrnch && !acceptable {
            // Geometry step: move the worst-placed vertex.
            let jdrop = match (0..n).filter(|&j| veta[j] > pareta).max_by(|&a, &b| veta[a].total_cmp(&veta[b])) {
                Some(j) => j,
                None => (0..n)
                    .filter(|&j| vsig[j] < parsig)
                    .min_by(|&a, &b| vsig[a].total_cmp(&vsig[b]))
                    .unwrap_or(0),
            };
            let mut dx: DVector<f64> = simi.row(jdrop).transpose() * (GAMMA * rho * vsig[jdrop]);
            let (mut cvmaxp, mut cvmaxm) = (0.0f64, 0.0f64);
            for (k, a) in grads.iter().enumerate() {
                let s = a.dot(&dx);
                cvmaxp = cvmaxp.max(-s - pd.c[k]);
                cvmaxm = cvmaxm.max(s - pd.c[k]);
            }
            let slope = g.dot(&dx);
            if parmu * (cvmaxp - cvmaxm) > -2.0 * slope {
                dx = -dx;
            }
            let x = &pole + &dx;
            let Some(s) = ev.eval(&x) else {
                break CobylaStatus::NonFinite;
            };
            replace_vertex(&mut sim, &mut simi, jdrop, &dx);
            data[jdrop] = s;
            continue;
        }

        // Trust-region step.
        let dx = trust_region_step(&grads, &pd.c, &g, rho);
        let mut go_to_reduce = dx.norm() < 0.5 * rho;
        if go_to_reduce {
            ibrnch = true;
        } else {
            let resnew = grads
                .iter()
                .enumerate()
                .fold(0.0f64, |acc, (k, a)| acc.max(-(pd.c[k] + a.dot(&dx))));
            let pred_df = g.dot(&dx);
            let prerec = pd.resmax - resnew;
            let barmu = if prerec > 0.0 { pred_df / prerec } else { 0.0 };
            if parmu < 1.5 * barmu {
                parmu = 2.0 * barmu;
                let phi = data[n].merit(parmu);
                for j in 0..n {
                    let t = data[j].merit(parmu);
                    if t < phi || (t == phi && parmu == 0.0 && data[j].resmax < data[n].resmax) {
                        continue 'outer;
                    }
                }
            }
            let mut prerem = parmu * prerec - pred_df;

            let x = &pole + &dx;
            let Some(s) = ev.eval(&x) else {
                break CobylaStatus::NonFinite;
            };
            ibrnch = true;

            let pd = &data[n];
            let mut trured = pd.merit(parmu) - s.merit(parmu);
            if parmu == 0.0 && s.f == pd.f {
                prerem = prerec;
                trured = pd.resmax - s.resmax;
            }

            // Pick the vertex to replace; mandatory when the merit improved.
            let mut ratio = if trured <= 0.0 { 1.0 } else { 0.0 };
            let mut jdrop = None;
            let mut sigbar = vec![0.0; n];
            for j in 0..n {
                let t = simi.row(j).transpose().dot(&dx).abs();
                if t > ratio {
                    jdrop = Some(j);
                    ratio = t;
                }
                sigbar[j] = t * vsig[j];
            }
            let mut edgmax = DELTA * rho;
            let mut far = None;
            for j in 0..n {
                if sigbar[j] >= parsig || sigbar[j] >= vsig[j] {
                    let t = if trured > 0.0 {
                        (&dx - sim.column(j)).norm()
                    } else {
                        veta[j]
                    };
                    if t > edgmax {
                        far = Some(j);
                        edgmax = t;
                    }
                }
            }
            if far.is_some() {
                jdrop = far;
            }
            match jdrop {
                Some(j) => {
                    replace_vertex(&mut sim, &mut simi, j, &dx);
                    data[j] = s;
                    if trured > 0.0 && trured >= 0.1 * prerem {
                        continue;
                    }
                    go_to_reduce = true;
                }
                None => go_to_reduce = true,
            }
        }

        debug_assert!(go_to_reduce);
        if !acceptable {
            ibrnch = false;
            continue;
        }
        if rho <= opts.rho_end {
            break CobylaStatus::Converged;
        }
        rho *= 0.5;
        if rho <= 1.5 * opts.rho_end {
            rho = opts.rho_end;
        }
        if parmu > 0.0 {
            let mut denom = 0.0f64;
            for k in 0..m {
                let (cmin, cmax) = data
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                        (lo.min(s.c[k]), hi.max(s.c[k]))
                    });
                if cmin < 0.5 * cmax {
                    let t = cmax.max(0.0) - cmin;
                    denom = if denom <= 0.0 { t } else { denom.min(t) };
                }
            }
            let (fmin, fmax) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                    (lo.min(s.f), hi.max(s.f))
                });
            if denom == 0.0 {
                parmu = 0.0;
            } else if fmax - fmin < parmu * denom {
                parmu = (fmax - fmin) / denom;
            }
        }
    };

    select_pole(&mut pole, &mut sim, &mut simi, &mut data, parmu);
    let best = data.swap_remove(n);
    finish(pole, Some(best), ev.evals, status)
}

fn finish(x: DVector<f64>, s: Option<Sample>, evals: usize, status: CobylaStatus) -> CobylaResult {
    let (f, max_violation) = s.map_or((f64::NAN, f64::NAN), |s| (s.f, s.resmax));
    CobylaResult {
        x: x.as_slice().to_vec(),
        f,
        max_violation,
        evals,
        status,
    }
}

/// Moves the best vertex by merit into the pole slot.
fn select_pole(
    pole: &mut DVector<f64>,
    sim: &mut DMatrix<f64>,
    simi: &mut DMatrix<f64>,
    data: &mut [Sample],
    parmu: f64,
) {
    let n = pole.len();
    let mut best = n;
    let mut phimin = data[n].merit(parmu);
    for j in 0..n {
        let t = data[j].merit(parmu);
        if t < phimin {
            best = j;
            phimin = t;
        } else if t == phimin && parmu == 0.0 && data[j].resmax < data[best].resmax {
            best = j;
        }
    }
    if best == n {
        return;
    }
    data.swap(best, n);
    let shift = sim.column(best).clone_owned();
    *pole += &shift;
    for k in 0..n {
        if k != best {
            let mut col = sim.column_mut(k);
            col -= &shift;
        }
    }
    sim.set_column(best, &(-shift));
    let row_sum = simi.row_sum();
    simi.set_row(best, &(-row_sum));
}

/// Replaces column `j` of `sim` by `dx`, updating the inverse in place.
fn replace_vertex(sim: &mut DMatrix<f64>, simi: &mut DMatrix<f64>, j: usize, dx: &DVector<f64>) {
    let n = dx.len();
    sim.set_column(j, dx);
    let pivot = simi.row(j).transpose().dot(dx);
    let new_row = simi.row(j) / pivot;
    simi.set_row(j, &new_row);
    for i in 0..n {
        if i != j {
            let t = simi.row(i).transpose().dot(dx);
            let updated = simi.row(i) - &new_row * t;
            simi.set_row(i, &updated);
        }
    }
}

fn simplex_inverse_ok(sim: &DMatrix<f64>, simi: &DMatrix<f64>) -> bool {
    let n = sim.nrows();
    let prod = simi * sim;
    let err = (prod - DMatrix::<f64>::identity(n, n)).amax();
    err.is_finite() && err < 1e-8
}

/// Step `d` with `‖d‖ <= rho` for the linear models `c_k + a_k·d` and
/// `f + g·d`: first minimize the largest violation `max(0, -(c_k + a_k·d))`,
/// then minimize `g·d` keeping every violation at or below that level.
fn trust_region_step(grads: &[DVector<f64>], c: &[f64], g: &DVector<f64>, rho: f64) -> DVector<f64> {
    let n = g.len();
    let m = grads.len();
    // Rows of the form row·d <= rhs.
    let rows: Vec<DVector<f64>> = grads.iter().map(|a| -a).collect();
    let violation = |d: &DVector<f64>| {
        (0..m).fold(0.0f64, |acc, k| acc.max(rows[k].dot(d) - c[k]))
    };

    let mut level = 0.0;
    let mut fallback = DVector::zeros(n);
    if c.iter().any(|&v| v < 0.0) {
        // Stage 1: minimize t subject to row_k·d - c_k <= t.
        let mut best = violation(&fallback);
        for mask in 1u32..(1 << m) {
            let set: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
            if set.len() > n + 1 {
                continue;
            }
            let k0 = set[0];
            let eq: Vec<(DVector<f64>, f64)> = set[1..]
                .iter()
                .map(|&k| (&rows[k] - &rows[k0], c[k] - c[k0]))
                .collect();
            if let Some(d) = minimize_on_subspace(&eq, &rows[k0], rho) {
                let v = violation(&d);
                if v < best {
                    best = v;
                    fallback = d;
                }
            }
        }
        level = best.max(0.0);
    }

    // Stage 2: minimize g·d subject to row_k·d <= c_k + level.
    let rhs: Vec<f64> = c.iter().map(|&ck| ck + level).collect();
    let tol = |k: usize| 1e-10 * (rhs[k].abs() + rows[k].norm() * rho) + 1e-300;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        if set.len() > n {
            continue;
        }
        let eq: Vec<(DVector<f64>, f64)> = set.iter().map(|&k| (rows[k].clone(), rhs[k])).collect();
        let Some(d) = minimize_on_subspace(&eq, g, rho) else {
            continue;
        };
        if (0..m).any(|k| rows[k].dot(&d) > rhs[k] + tol(k)) {
            continue;
        }
        let val = g.dot(&d);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, d));
        }
    }
    best.map_or(fallback, |(_, d)| d)
}

/// Minimizes `h·d` over `{d : e_i·d = r_i} ∩ {‖d‖ <= rho}`. Returns `None`
/// when the equalities are dependent or miss the ball.
fn minimize_on_subspace(eq: &[(DVector<f64>, f64)], h: &DVector<f64>, rho: f64) -> Option<DVector<f64>> {
    let n = h.len();
    let (d0, h_null) = if eq.is_empty() {
        (DVector::zeros(n), h.clone())
    } else {
        let k = eq.len();
        let a = DMatrix::from_fn(k, n, |i, j| eq[i].0[j]);
        let r = DVector::from_fn(k, |i, _| eq[i].1);
        let gram = &a * a.transpose();
        let chol = gram.cholesky()?;
        // Reject near-dependent sets; their solutions are numerically meaningless.
        let diag_min = (0..k).map(|i| chol.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
        let scale = (0..k).map(|i| eq[i].0.norm()).fold(0.0, f64::max);
        if !(diag_min > 1e-10 * scale) {
            return None;
        }
        let d0 = a.tr_mul(&chol.solve(&r));
        let h_null = h - a.tr_mul(&chol.solve(&(&a * h)));
        (d0, h_null)
    };
    let r0 = d0.norm();
    if !(r0 <= rho * (1.0 + 1e-12)) {
        return None;
    }
    let hn = h_null.norm();
    if hn > 1e-14 * h.norm().max(1e-300) {
        let reach = (rho * rho - r0 * r0).max(0.0).sqrt();
        Some(d0 - h_null * (reach / hn))
    } else {
        Some(d0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts(rho_begin: f64) -> CobylaOptions {
        CobylaOptions {
            rho_begin,
            rho_end: 1e-8,
            max_evals: 5000,
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let r = minimize(
            |x, _| 10.0 * (x[0] + 1.0).powi(2) + x[1].powi(2),
            &[1.0, 1.0],
            0,
            &opts(0.5),
        );
        assert_eq!(r.status, CobylaStatus::Converged);
        assert!((r.x[0] + 1.0).abs() < 1e-5 && r.x[1].abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn bilinear_on_disc() {
        // min xy on the unit disc: f = -1/2 at (1/√2, -1/√2) (or its mirror).
        let r = minimize(
            |x, c| {
                c[0] = 1.0 - x[0] * x[0] - x[1] * x[1];
                x[0] * x[1]
            },
            &[1.0, 1.0],
            1,
            &opts(0.5),
        );
        assert!((r.f + 0.5).abs() < 1e-6, "{r:?}");
        assert!(r.max_violation < 1e-6);
        assert!((r.x[0].abs() - 0.5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn product_on_ellipsoid() {
        // min xyz s.t. x² + 2y² + 3z² <= 1: optimum -1/(9√2) with x²=1/3,
        // y²=1/6, z²=1/9.
        let r = minimize(
            |x, c| {
                c[0] = 1.0 - x[0] * x[0] - 2.0 * x[1] * x[1] - 3.0 * x[2] * x[2];
                x[0] * x[1] * x[2]
            },
            &[1.0, 1.0, 1.0],
            1,
            &opts(0.5),
        );
        let expected = -1.0 / (9.0 * 2f64.sqrt());
        assert!((r.f - expected).abs() < 1e-6, "{r:?}");
        assert!((r.x[0].abs() - (1.0f64 / 3.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn curved_valley() {
        // (x² - y)² + (1 + x)², minimum 0 at (-1, 1).
        let r = minimize(
            |x, _| (x[0] * x[0] - x[1]).powi(2) + (1.0 + x[0]).powi(2),
            &[1.0, 1.0],
            0,
            &opts(0.5),
        );
        assert!((r.x[0] + 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn paired_inequalities_act_as_equality() {
        // min x² + y² with |x + y - 1| <= 1e-9.
        let eps = 1e-9;
        let r = minimize(
            |x, c| {
                let h = x[0] + x[1] - 1.0;
                c[0] = eps - h;
                c[1] = eps + h;
                x[0] * x[0] + x[1] * x[1]
            },
            &[0.0, 0.0],
            2,
            &opts(0.5),
        );
        assert!((r.x[0] - 0.5).abs() < 1e-5 && (r.x[1] - 0.5).abs() < 1e-5, "{r:?}");
        assert!(r.max_violation < 1e-8);
    }

    #[test]
    fn infeasible_start_is_repaired() {
        // min x s.t. x >= 2, starting far inside the infeasible side.
        let r = minimize(
            |x, c| {
                c[0] = x[0] - 2.0;
                x[0]
            },
            &[-5.0],
            1,
            &opts(1.0),
        );
        assert!((r.x[0] - 2.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn evaluation_budget_is_respected() {
        let r = minimize(
            |x, _| x.iter().map(|v| (v - 3.0).powi(4)).sum(),
            &[0.0; 6],
            0,
            &CobylaOptions {
                rho_begin: 0.5,
                rho_end: 1e-12,
                max_evals: 50,
            },
        );
        assert_eq!(r.status, CobylaStatus::MaxEvaluations);
        assert!(r.evals <= 51);
    }

    #[test]
    fn nan_objective_stops() {
        let r = minimize(|x, _| if x[0] > 0.2 { f64::NAN } else { x[0] }, &[0.0], 0, &opts(0.5));
        assert_eq!(r.status, CobylaStatus::NonFinite);
    }

    #[test]
    fn eight_variable_quadratic() {
        let r = minimize(
            |x, _| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (1.0 + 10.0 * i as f64 / 7.0) * (v - 1.0).powi(2))
                    .sum()
            },
            &[0.0; 8],
            0,
            &CobylaOptions { rho_begin: 0.05, rho_end: 1e-6, max_evals: 2000 },
        );
        assert_eq!(r.status, CobylaStatus::Converged);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-4), "{:?}", r.x);
    }

    #[test]
    fn scale_free_unit_quaternion_band() {
        // Objective depends on q only through q/‖q‖; the band keeps ‖q‖ near 1.
        let r = minimize(
            |x, c| {
                let n2: f64 = x[..4].iter().map(|v| v * v).sum();
                c[0] = 1e-2 - (n2 - 1.0);
                c[1] = 1e-2 + (n2 - 1.0);
                let n = n2.sqrt();
                (x[1] / n - 0.3).powi(2) + (x[2] / n + 0.2).powi(2)
            },
            &[1.0, 0.0, 0.0, 0.0],
            2,
            &CobylaOptions { rho_begin: 0.05, rho_end: 1e-7, max_evals: 2000 },
        );
        assert!(r.f < 1e-10, "{r:?}");
        assert!(r.max_violation == 0.0);
    }

    #[test]
    fn subspace_minimizer_on_sphere() {
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let d = minimize_on_subspace(&[], &h, 2.0).unwrap();
        assert!((d - DVector::from_vec(vec![-2.0, 0.0, 0.0])).norm() < 1e-15);
        // Restricted to x = 1: the minimizer of x on the ball is then the
        // plane's center point, other directions are free but flat.
        let eq = vec![(DVector::from_vec(vec![1.0, 0.0, 0.0]), 1.0)];
        let d = minimize_on_subspace(&eq, &h, 2.0).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn box_projection(p in prop::collection::vec(-3.0..3.0f64, 3)) {
            // min ‖x - p‖² s.t. -1 <= x_i <= 1: solution is the clamp of p.
            let r = minimize(
                |x, c| {
                    for i in 0..3 {
                        c[2 * i] = 1.0 - x[i];
                        c[2 * i + 1] = x[i] + 1.0;
                    }
                    x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum()
                },
                &[0.0, 0.0, 0.0],
                6,
                &opts(0.5),
            );
            for i in 0..3 {
                prop_assert!((r.x[i] - p[i].clamp(-1.0, 1.0)).abs() < 1e-4, "{:?} vs {:?}", r.x, p);
            }
            prop_assert!(r.max_violation < 1e-7);
        }
    }
}
