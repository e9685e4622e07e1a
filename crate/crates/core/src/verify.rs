//! Independent checks on the robust controllers: a brute-force worst-case
//! cost oracle, uncertainty-set membership / minimal-Lambda computation, the
//! a-priori Lambda bounds, and the cost certificates.
//!
//! Everything here deliberately avoids the conic machinery so that the SDP
//! outputs are checked against code that shares none of their plumbing.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::behavioral::{numerical_rank, pinv, BehavioralData};
use crate::controllers::{ControlConfig, RobustSolution};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("uncertainty image has rank {rank}, above the oracle cap {cap}")]
    RankAboveCap { rank: usize, cap: usize },
    #[error("Y_f Phi_perp is numerically zero; data looks noise-free, use a Lambda=0 membership test")]
    RankDeficient,
    #[error("clean Hankel matrix is rank deficient; excitation is insufficient")]
    InsufficientExcitation,
    #[error("(I - Mbar_f K)(I + M_f K) is numerically singular")]
    SingularLoop,
    #[error("at least one validation slice is required")]
    EmptyValidation,
}

fn opnorm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

fn quad_norm(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (v.transpose() * w * v)[(0, 0)]
}

/// How the oracle maximum was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// 1-D reparameterization: a convex function of a scalar is maximal at
    /// an interval endpoint.
    Endpoint1d,
    /// Dense sphere sampling followed by conditional-gradient ascent.
    GridAscent,
}

/// Result of the brute-force inner maximization.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub max_value: f64,
    /// Maximizer in the row-space coordinates of the uncertainty image
    /// (length = effective rank of M).
    pub argmax_w: DVector<f64>,
    pub method: OracleMethod,
}

/// Brute-force maximum of ||M w + b - y_r||^2_Q over ||w||^2 <= Lambda.
///
/// Only the component of w in range(M') matters, so the search runs in
/// those coordinates; the effective dimension must not exceed
/// `subspace_dim_cap` (default 3) or the grid would be too sparse to trust.
/// The objective is convex in w, so the maximum sits on the sphere
/// ||z|| = sqrt(Lambda); 1-D cases are solved exactly by endpoint
/// evaluation, 2-D and 3-D by dense sphere sampling plus conditional-
/// gradient refinement (each ascent step maximizes the linearization over
/// the ball, which can only increase a convex objective).
pub fn worst_case_cost_oracle(
    b: &DVector<f64>,
    m: &DMatrix<f64>,
    q: &DMatrix<f64>,
    y_r: &DVector<f64>,
    lambda: f64,
    subspace_dim_cap: usize,
) -> Result<OracleResult, VerifyError> {
    let resid = b - y_r;
    let base = quad_norm(&resid, q);
    let rank = numerical_rank(m);
    if rank == 0 || lambda == 0.0 {
        return Ok(OracleResult {
            max_value: base,
            argmax_w: DVector::zeros(0),
            method: OracleMethod::Endpoint1d,
        });
    }
    if rank > subspace_dim_cap {
        return Err(VerifyError::RankAboveCap { rank, cap: subspace_dim_cap });
    }

    // Orthonormal basis of range(M'): z-coordinates with M w = (M B) z.
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let basis = v_t.rows(0, rank).transpose();
    let mb = m * &basis;

    // f(z) = z'Az + 2 g'z + base on the sphere ||z|| = sqrt(Lambda).
    let a = mb.transpose() * q * &mb;
    let g = mb.transpose() * q * &resid;
    let rho = lambda.sqrt();
    let eval = |z: &DVector<f64>| quad_norm(z, &a) + 2.0 * g.dot(z) + base;

    if rank == 1 {
        let zp = DVector::from_element(1, rho);
        let zm = DVector::from_element(1, -rho);
        let (vp, vm) = (eval(&zp), eval(&zm));
        let (z, v) = if vp >= vm { (zp, vp) } else { (zm, vm) };
        return Ok(OracleResult { max_value: v, argmax_w: z, method: OracleMethod::Endpoint1d });
    }

    let n_grid = if rank == 2 { 10_000 } else { 100_000 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut best_z = DVector::zeros(rank);
    let mut best = f64::NEG_INFINITY;
    let consider = |z: DVector<f64>, best: &mut f64, best_z: &mut DVector<f64>| {
        let v = eval(&z);
        if v > *best {
            *best = v;
            *best_z = z;
        }
    };
    if rank == 2 {
        for i in 0..n_grid {
            let th = 2.0 * std::f64::consts::PI * i as f64 / n_grid as f64;
            consider(
                DVector::from_column_slice(&[rho * th.cos(), rho * th.sin()]),
                &mut best,
                &mut best_z,
            );
        }
    } else {
        // Uniform sphere points via normalized Gaussians.
        for _ in 0..n_grid {
            let mut z = DVector::from_fn(rank, |_, _| {
                rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
            });
            let n = z.norm();
            if n < 1e-12 {
                continue;
            }
            z *= rho / n;
            consider(z, &mut best, &mut best_z);
        }
    }
    // Conditional-gradient polish: the gradient direction scaled onto the
    // sphere never decreases a convex objective.
    for _ in 0..50 {
        let grad = &a * &best_z + &g;
        let n = grad.norm();
        if n < 1e-14 {
            break;
        }
        let cand = grad * (rho / n);
        let v = eval(&cand);
        if v <= best {
            break;
        }
        best = v;
        best_z = cand;
    }
    Ok(OracleResult { max_value: best, argmax_w: best_z, method: OracleMethod::GridAscent })
}

/// One held-out input-output window used for Lambda tuning.
#[derive(Debug, Clone)]
pub struct ValidationSlice {
    pub u_p: DVector<f64>,
    pub u_f: DVector<f64>,
    pub y_p: DVector<f64>,
    pub y_f: DVector<f64>,
}

/// Sliding windows of a trajectory, one slice per start index.
pub fn slices_from_trajectory(
    traj: &crate::lti_sim::Trajectory,
    l_p: usize,
    l_f: usize,
) -> Vec<ValidationSlice> {
    let l = l_p + l_f;
    let n = traj.len();
    if n < l {
        return Vec::new();
    }
    let stack = |xs: &[DVector<f64>]| {
        let d = xs[0].len();
        let mut v = DVector::zeros(d * xs.len());
        for (k, x) in xs.iter().enumerate() {
            v.rows_mut(k * d, d).copy_from(x);
        }
        v
    };
    (0..=n - l)
        .map(|t| ValidationSlice {
            u_p: stack(&traj.inputs[t..t + l_p]),
            u_f: stack(&traj.inputs[t + l_p..t + l]),
            y_p: stack(&traj.outputs[t..t + l_p]),
            y_f: stack(&traj.outputs[t + l_p..t + l]),
        })
        .collect()
}

/// Smallest ||Phi_perp w||^2 making y_f = b + M w hold (in the least-squares
/// sense): the minimum-norm w lies in range(Phi_perp), so the value is
/// ||M^dagger (y_f - b)||^2 with b the nominal subspace prediction.
///
/// Noise-free data makes M vanish; membership then degenerates to the exact
/// Lambda = 0 test and this signals [`VerifyError::RankDeficient`] instead
/// of dividing by tiny singular values.
pub fn min_lambda_for_trajectory(
    data: &BehavioralData,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    u_f: &DVector<f64>,
    y_f: &DVector<f64>,
) -> Result<f64, VerifyError> {
    if opnorm(&data.m) <= 1e-8 * opnorm(&data.yf) {
        return Err(VerifyError::RankDeficient);
    }
    let b = data
        .spc_predict(u_p, u_f, y_p)
        .map_err(|_| VerifyError::EmptyValidation)?;
    let w = pinv(&data.m) * (y_f - b);
    Ok(w.norm_squared())
}

/// Smallest Lambda whose uncertainty set covers every validation slice:
/// the max over slices of [`min_lambda_for_trajectory`]. Noise-free data
/// (degenerate M) contributes zero.
pub fn tune_lambda(
    data: &BehavioralData,
    slices: &[ValidationSlice],
) -> Result<f64, VerifyError> {
    if slices.is_empty() {
        return Err(VerifyError::EmptyValidation);
    }
    let mut best: f64 = 0.0;
    for s in slices {
        match min_lambda_for_trajectory(data, &s.u_p, &s.y_p, &s.u_f, &s.y_f) {
            Ok(v) => best = best.max(v),
            Err(VerifyError::RankDeficient) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Scalars entering the a-priori Lambda bounds.
#[derive(Debug, Clone)]
pub struct TheoryBounds {
    /// 1 / sigma_{n_u L + n_x} of the clean Hankel.
    pub delta: f64,
    /// max(delta, ||Phi^dagger||).
    pub beta: f64,
    /// Noise envelope over the past window and the future inputs.
    pub xi1: f64,
    /// Noise envelope over the future outputs.
    pub xi2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_o: f64,
}

fn lambda12(
    data: &BehavioralData,
    clean: &BehavioralData,
    n_x: usize,
    xi_u_bar: f64,
    xi_y_bar: f64,
) -> Result<(f64, f64, f64, f64, f64, f64), VerifyError> {
    let d = &data.dims;
    let l = d.l();
    let sv = clean.phi.clone().svd(false, false).singular_values;
    let idx = d.n_u * l + n_x;
    let sigma = if idx <= sv.len() { sv[idx - 1] } else { 0.0 };
    if sigma <= 1e-10 * sv[0].max(1.0) {
        return Err(VerifyError::InsufficientExcitation);
    }
    let delta = 1.0 / sigma;
    let beta = delta.max(opnorm(&data.phi_pinv));
    let xi1 = xi_u_bar * ((d.n_u * l) as f64).sqrt() + xi_y_bar * ((d.n_y * d.l_p) as f64).sqrt();
    let xi2 = xi_y_bar * ((d.n_y * d.l_f) as f64).sqrt();
    let n_bar = d.n_cols as f64;
    let yf_norm = opnorm(&data.yf);
    let lambda1 =
        n_bar.sqrt() * ((1.0 + 5f64.sqrt()) / 2.0 * beta * beta * xi1 * yf_norm + delta * xi2);
    let lambda2 = delta * (yf_norm + xi2 * n_bar.sqrt()) * xi1 + xi2;
    Ok((delta, beta, xi1, xi2, lambda1, lambda2))
}

/// A-priori safe Lambda for the open-loop robust controller, computed from
/// the clean-twin Hankel (the bound needs noise-free quantities that are
/// unknowable in the field, so it is only evaluated where a simulator
/// provides the twin).
pub fn theorem1_lambda_o(
    data: &BehavioralData,
    clean: &BehavioralData,
    n_x: usize,
    xi_u_bar: f64,
    xi_y_bar: f64,
    u_p: &DVector<f64>,
    u_f: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<TheoryBounds, VerifyError> {
    let (delta, beta, xi1, xi2, lambda1, lambda2) =
        lambda12(data, clean, n_x, xi_u_bar, xi_y_bar)?;
    let z = data.stack_online(u_p, u_f, y_p);
    let front = opnorm(&(&data.phi_perp * pinv(&data.m)));
    let lambda_o = front * front * (lambda1 * z.norm() + lambda2).powi(2);
    Ok(TheoryBounds { delta, beta, xi1, xi2, lambda1, lambda2, lambda_o })
}

/// A-priori safe Lambda under the affine feedback policy: the open-loop
/// expression with v_f in place of u_f, shrunk by the loop matrix
/// (I - Mbar_f K)(I + M_f K) built from the clean and noisy predictors.
#[allow(clippy::too_many_arguments)]
pub fn theorem3_lambda_c(
    data: &BehavioralData,
    clean: &BehavioralData,
    k: &DMatrix<f64>,
    v_f: &DVector<f64>,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    n_x: usize,
    xi_u_bar: f64,
    xi_y_bar: f64,
) -> Result<f64, VerifyError> {
    let (_, _, _, _, lambda1, lambda2) = lambda12(data, clean, n_x, xi_u_bar, xi_y_bar)?;
    let p = data.m_f.nrows();
    let eye = DMatrix::identity(p, p);
    let loop_mat = (&eye - &clean.m_f * k) * (&eye + &data.m_f * k);
    let sv = loop_mat.svd(false, false).singular_values;
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smin <= 1e-10 * smax.max(1.0) {
        return Err(VerifyError::SingularLoop);
    }
    let z = data.stack_online(u_p, v_f, y_p);
    let front = opnorm(&(&data.phi_perp * pinv(&data.m)));
    Ok(front * front * (lambda1 * z.norm() + lambda2).powi(2) / (smax * smax))
}

/// Which cost certificate to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostBoundKind {
    /// Open-loop robust controller.
    Thm2,
    /// Affine feedback controller.
    Thm4,
}

/// Outcome of a cost-certificate check on one realized horizon.
#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub pass: bool,
    pub realized_cost: f64,
    pub bound: f64,
    /// bound - realized_cost.
    pub margin: f64,
}

/// Compare the realized horizon cost against the a-priori certificate.
///
/// The certificate only binds when the realized trajectory is inside the
/// modeled uncertainty set; callers gate on [`min_lambda_for_trajectory`]
/// before treating a failure as meaningful.
pub fn cost_bound_check(
    kind: CostBoundKind,
    solution: &RobustSolution,
    realized_u: &DVector<f64>,
    realized_y: &DVector<f64>,
    config: &ControlConfig,
    data: &BehavioralData,
) -> BoundCheck {
    let q_bar = config.q_bar();
    let r_bar = config.r_bar();
    let cost = |u: &DVector<f64>, y: &DVector<f64>| {
        quad_norm(&(y - &config.y_r), &q_bar) + quad_norm(u, &r_bar)
    };
    let realized_cost = cost(realized_u, realized_y);
    let nominal = cost(&solution.u_f, &solution.b);
    let yf_norm = opnorm(&data.yf);
    let q_max = opnorm(&q_bar);
    let bound = match kind {
        CostBoundKind::Thm2 => 2.0 * nominal + 8.0 * q_max * yf_norm * yf_norm * config.lambda,
        CostBoundKind::Thm4 => {
            let k = solution
                .policy
                .as_ref()
                .map(|p| p.k.clone())
                .unwrap_or_else(|| DMatrix::zeros(solution.u_f.len(), solution.b.len()));
            let p = data.m_f.nrows();
            let eye = DMatrix::identity(p, p);
            let r_max = opnorm(&r_bar);
            let k_norm = opnorm(&k);
            let two_i_mk = opnorm(&(2.0 * &eye + &data.m_f * &k));
            let i_mk = opnorm(&(&eye + &data.m_f * &k));
            2.0 * nominal
                + 2.0
                    * config.lambda
                    * yf_norm
                    * yf_norm
                    * (r_max * k_norm * k_norm * two_i_mk * two_i_mk + 4.0 * q_max * i_mk * i_mk)
        }
    };
    BoundCheck { pass: realized_cost <= bound, realized_cost, bound, margin: bound - realized_cost }
}
