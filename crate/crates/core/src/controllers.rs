//! The four predictive controllers: SPC (QP), projection-regularized DDPC
//! (QP, penalty or constraint mode), min-max robust DDPC (SDP), and feedback
//! robust DDPC (SDP with an affine output-error feedback policy).
//!
//! All of them consume an [`UncertaintyModel`], so the full-Hankel and
//! SVD-reduced data paths share one assembly per formulation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::behavioral::{stack_past, BehavioralData, ReducedData};
use crate::conic::{
    schur_lmi, AffineMat, ConicError, ConicProgram, LmiExpr, MatVar, SolveSettings, SolveStatus,
    VarId,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("problem is infeasible (no input keeps all constraints robustly satisfied)")]
    Infeasible,
    #[error("solver did not converge: {0:?}")]
    SolverFailure(SolveStatus),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// Ellipsoidal constraint ||G x + c||^2 <= 1.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Ellipsoid {
    pub fn new(g: DMatrix<f64>, c: DVector<f64>) -> Self {
        assert_eq!(g.nrows(), c.len());
        Self { g, c }
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        (&self.g * x + &self.c).norm_squared() <= 1.0 + slack
    }
}

/// Horizon configuration: per-step weights, reference slice, constraint
/// sets, and the uncertainty-set size.
#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub l_p: usize,
    pub l_f: usize,
    /// Per-step output weight (n_y x n_y, symmetric PD).
    pub q_step: DMatrix<f64>,
    /// Per-step input weight (n_u x n_u, symmetric PSD; PD required for the
    /// feedback controller).
    pub r_step: DMatrix<f64>,
    /// Reference over the horizon (n_y * l_f).
    pub y_r: DVector<f64>,
    pub input_constraints: Vec<Ellipsoid>,
    pub output_constraints: Vec<Ellipsoid>,
    /// Uncertainty-set size Lambda.
    pub lambda: f64,
    pub settings: SolveSettings,
}

impl ControlConfig {
    pub fn validate(&self, n_u: usize, n_y: usize) -> Result<(), ControlError> {
        let err = |m: &str| Err(ControlError::BadConfig(m.to_string()));
        if self.q_step.nrows() != n_y || self.q_step.ncols() != n_y {
            return err("q_step shape");
        }
        if self.r_step.nrows() != n_u || self.r_step.ncols() != n_u {
            return err("r_step shape");
        }
        if self.q_step.clone().cholesky().is_none() {
            return err("q_step must be positive definite");
        }
        if self.y_r.len() != n_y * self.l_f {
            return err("y_r length");
        }
        for e in &self.input_constraints {
            if e.g.ncols() != n_u * self.l_f {
                return err("input constraint column count");
            }
        }
        for e in &self.output_constraints {
            if e.g.ncols() != n_y * self.l_f {
                return err("output constraint column count");
            }
        }
        if self.lambda < 0.0 {
            return err("lambda must be nonnegative");
        }
        Ok(())
    }

    /// Block-diagonal expansion of the per-step output weight over the
    /// horizon.
    pub fn q_bar(&self) -> DMatrix<f64> {
        block_diag(&self.q_step, self.l_f)
    }

    pub fn r_bar(&self) -> DMatrix<f64> {
        block_diag(&self.r_step, self.l_f)
    }

    fn q_bar_inv(&self) -> Result<DMatrix<f64>, ControlError> {
        block_diag(&self.q_step, self.l_f)
            .try_inverse()
            .ok_or_else(|| ControlError::BadConfig("q_step not invertible".into()))
    }

    fn r_bar_inv(&self) -> Result<DMatrix<f64>, ControlError> {
        block_diag(&self.r_step, self.l_f)
            .try_inverse()
            .ok_or_else(|| ControlError::BadConfig("r_step not invertible".into()))
    }
}

fn block_diag(step: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let d = step.nrows();
    let mut m = DMatrix::zeros(d * n, d * n);
    for k in 0..n {
        m.view_mut((k * d, k * d), (d, d)).copy_from(step);
    }
    m
}

/// Benchmark horizon configuration: the two-mass plant tracked on the first
/// position channel under velocity and input bounds.
pub fn benchmark_config(y_r: DVector<f64>, lambda: f64) -> ControlConfig {
    let l_f = 5;
    let n_u = 1;
    let n_y = 4;
    let mut input_constraints = Vec::new();
    for i in 0..l_f {
        let mut g = DMatrix::zeros(n_u, n_u * l_f);
        g[(0, i)] = 0.2;
        input_constraints.push(Ellipsoid::new(g, DVector::zeros(n_u)));
    }
    let gy = |channel: usize| {
        let mut step = DVector::from_element(n_y, 0.01);
        step[channel] = 0.7;
        let mut g = DMatrix::zeros(n_y * l_f, n_y * l_f);
        for k in 0..n_y * l_f {
            g[(k, k)] = step[k % n_y];
        }
        Ellipsoid::new(g, DVector::zeros(n_y * l_f))
    };
    ControlConfig {
        l_p: 5,
        l_f,
        q_step: DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1e-4, 1e-4, 1e-4])),
        r_step: DMatrix::from_element(1, 1, 0.01),
        y_r,
        input_constraints,
        output_constraints: vec![gy(2), gy(3)],
        lambda,
        settings: SolveSettings::default(),
    }
}

/// Predictor and uncertainty geometry in one coordinate system; the
/// full-Hankel and SVD-reduced variants of every controller differ only in
/// which model they are fed.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    /// Future-input block of the nominal predictor.
    pub m_f: DMatrix<f64>,
    /// Past block of the nominal predictor, applied to col(u_p, y_p).
    pub m_p: DMatrix<f64>,
    /// Uncertainty image: prediction deviation = m * w.
    pub m: DMatrix<f64>,
    /// Projector defining the uncertainty set ||phi_perp * w||^2 <= Lambda.
    pub phi_perp: DMatrix<f64>,
    pub n_u: usize,
    pub n_y: usize,
    pub l_f: usize,
}

impl UncertaintyModel {
    pub fn from_full(data: &BehavioralData) -> Self {
        Self {
            m_f: data.m_f.clone(),
            m_p: data.m_p.clone(),
            m: data.m.clone(),
            phi_perp: data.phi_perp.clone(),
            n_u: data.dims.n_u,
            n_y: data.dims.n_y,
            l_f: data.dims.l_f,
        }
    }

    pub fn from_reduced(red: &ReducedData) -> Self {
        Self {
            m_f: red.m_f_t.clone(),
            m_p: red.m_p_t.clone(),
            m: red.m_t.clone(),
            phi_perp: red.phi_perp_t.clone(),
            n_u: red.dims.n_u,
            n_y: red.dims.n_y,
            l_f: red.dims.l_f,
        }
    }

    pub fn from_parts(
        m_f: DMatrix<f64>,
        m_p: DMatrix<f64>,
        m: DMatrix<f64>,
        phi_perp: DMatrix<f64>,
        n_u: usize,
        n_y: usize,
        l_f: usize,
    ) -> Self {
        Self { m_f, m_p, m, phi_perp, n_u, n_y, l_f }
    }

    /// Dimension of the uncertainty coordinate w.
    pub fn w_dim(&self) -> usize {
        self.phi_perp.ncols()
    }

    /// Quadratic form used inside the robust LMIs. When `phi_perp` is an
    /// orthogonal projector whose null space is invisible to `m` (always
    /// the case for behavioral data, where m = Y_f phi_perp), the
    /// uncertainty set can be swapped for the full ball ||w||^2 <= Lambda
    /// without changing the robust solution: projecting any admissible w
    /// onto range(phi_perp) leaves every constraint value unchanged, and
    /// the projection stays inside the ball. The projector form makes all
    /// LMIs singular on null(phi_perp) for every decision value — there is
    /// no strictly feasible point and interior-point solvers stall — while
    /// the ball form is strictly feasible.
    pub(crate) fn lmi_set_matrix(&self) -> DMatrix<f64> {
        let p = &self.phi_perp;
        let d = p.ncols();
        let idem = (p * p - p).amax();
        let kills_null = (&self.m - &self.m * p).amax();
        let scale = 1.0 + self.m.amax();
        if idem <= 1e-8 && kills_null <= 1e-8 * scale {
            DMatrix::identity(d, d)
        } else {
            p.clone()
        }
    }

    /// Exact reduction of the uncertainty coordinate to range(m'). Under
    /// the same projector conditions as [`Self::lmi_set_matrix`], directions
    /// of w orthogonal to range(m') influence neither the constraints nor
    /// the worst-case cost, so they can be dropped: with m = m_c B' for an
    /// orthonormal basis B, the robust program over w is equivalent to the
    /// one over z = B'w with ||z||^2 <= Lambda. Every LMI shrinks from
    /// 1 + w_dim + q rows to 1 + rank(m) + q rows, which is what keeps the
    /// semidefinite solves fast. Falls back to a plain clone when the
    /// projector conditions fail.
    pub fn compress(&self) -> Self {
        let p = &self.phi_perp;
        let idem = (p * p - p).amax();
        let kills_null = (&self.m - &self.m * p).amax();
        if idem > 1e-8 || kills_null > 1e-8 * (1.0 + self.m.amax()) {
            return self.clone();
        }
        let svd = self.m.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd requested v_t");
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = self.m.nrows().max(self.m.ncols()) as f64 * smax * f64::EPSILON;
        let r = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let basis = v_t.rows(0, r).transpose();
        Self {
            m_f: self.m_f.clone(),
            m_p: self.m_p.clone(),
            m: &self.m * &basis,
            phi_perp: DMatrix::identity(r, r),
            n_u: self.n_u,
            n_y: self.n_y,
            l_f: self.l_f,
        }
    }

    /// Nominal prediction b for a given candidate input.
    pub fn predict(&self, u_f: &DVector<f64>, u_p: &DVector<f64>, y_p: &DVector<f64>) -> DVector<f64> {
        &self.m_f * u_f + &self.m_p * stack_past(u_p, y_p)
    }
}

/// Affine output-error feedback policy u_f = v_f + K (y_f - b).
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub v_f: DVector<f64>,
    pub k: DMatrix<f64>,
    /// Nominal prediction the error is measured against.
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct RobustSolution {
    /// Open-loop input sequence; for the feedback controller this is the
    /// nominal v_f (the applied first block is identical).
    pub u_f: DVector<f64>,
    pub policy: Option<FeedbackPolicy>,
    /// Nominal prediction b.
    pub b: DVector<f64>,
    /// Worst-case tracking-cost certificate. For the open-loop robust
    /// controller this excludes the input effort (objective = psi +
    /// ||u_f||^2_R); for the feedback controller it is the full cost.
    pub psi: f64,
    pub gamma: f64,
    pub mus: Vec<f64>,
    pub etas: Vec<f64>,
    pub objective: f64,
    pub solve_time: f64,
}

impl RobustSolution {
    /// The receding-horizon applied input: the first n_u entries.
    pub fn applied(&self, n_u: usize) -> DVector<f64> {
        self.u_f.rows(0, n_u).into_owned()
    }
}

fn run(prog: &ConicProgram, settings: &SolveSettings) -> Result<crate::conic::SolveResult, ControlError> {
    let res = prog.solve(settings)?;
    match res.status {
        SolveStatus::Optimal => Ok(res),
        SolveStatus::Infeasible => Err(ControlError::Infeasible),
        s => Err(ControlError::SolverFailure(s)),
    }
}

fn col_mat(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Column expression G * x_v + c.
fn ellipsoid_expr(e: &Ellipsoid, v: VarId) -> AffineMat {
    let mut a = AffineMat::zeros(e.g.nrows(), 1);
    a.add_linear_col(&e.g, v);
    a.add_const(&col_mat(&e.c));
    a
}

fn tracking_cost(prog: &mut ConicProgram, y_hat: VarId, q_bar: &DMatrix<f64>, y_r: &DVector<f64>) {
    prog.add_quad_cost(y_hat, q_bar);
    prog.add_lin_cost(y_hat, &(-2.0 * q_bar * y_r));
    prog.add_const_cost((y_r.transpose() * q_bar * y_r)[(0, 0)]);
}

/// Equality y_hat = m_f u_f + [extra affine terms] + const.
fn predictor_eq(
    prog: &mut ConicProgram,
    lhs: VarId,
    m_f: &DMatrix<f64>,
    u_f: VarId,
    constant: &DVector<f64>,
    extra: Option<(&DMatrix<f64>, VarId)>,
) {
    let p = lhs.len;
    let mut eq = AffineMat::zeros(p, 1);
    eq.add_linear_col(&DMatrix::identity(p, p), lhs);
    eq.add_linear_col(&(-m_f), u_f);
    if let Some((mat, v)) = extra {
        eq.add_linear_col(&(-mat), v);
    }
    eq.add_const(&col_mat(&(-constant)));
    prog.add_eq_zero(eq);
}

// ---------------------------------------------------------------------------
// SPC
// ---------------------------------------------------------------------------

pub fn solve_spc(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<RobustSolution, ControlError> {
    config.validate(model.n_u, model.n_y)?;
    let (n_in, n_out) = (model.n_u * config.l_f, model.n_y * config.l_f);
    let past = &model.m_p * stack_past(u_p, y_p);

    let mut prog = ConicProgram::new();
    let u_f = prog.add_var("u_f", n_in);
    let y_hat = prog.add_var("y_hat", n_out);
    predictor_eq(&mut prog, y_hat, &model.m_f, u_f, &past, None);
    tracking_cost(&mut prog, y_hat, &config.q_bar(), &config.y_r);
    prog.add_quad_cost(u_f, &config.r_bar());
    for e in &config.input_constraints {
        prog.add_norm_le(ellipsoid_expr(e, u_f), 1.0);
    }
    for e in &config.output_constraints {
        prog.add_norm_le(ellipsoid_expr(e, y_hat), 1.0);
    }
    let res = run(&prog, &config.settings)?;
    let u = res.value(u_f);
    let b = res.value(y_hat);
    let psi = quad_norm(&(&b - &config.y_r), &config.q_bar());
    Ok(RobustSolution {
        u_f: u,
        policy: None,
        b,
        psi,
        gamma: 0.0,
        mus: Vec::new(),
        etas: Vec::new(),
        objective: res.objective,
        solve_time: res.solve_time,
    })
}

fn quad_norm(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (v.transpose() * w * v)[(0, 0)]
}

// ---------------------------------------------------------------------------
// PBR-DDPC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum PbrMode {
    /// Quadratic penalty lambda * ||phi_perp w||^2 on the nullspace
    /// component.
    Penalty(f64),
    /// Hard constraint ||phi_perp w||^2 <= Lambda (min-min counterpart of
    /// the robust controller's uncertainty set).
    Constraint(f64),
}

pub struct PbrSolution {
    pub solution: RobustSolution,
    /// Nullspace component chosen by the optimistic inner minimization.
    pub w: DVector<f64>,
    /// ||phi_perp w||^2 at the optimum.
    pub projector_norm_sq: f64,
}

pub fn solve_pbr(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    mode: PbrMode,
) -> Result<PbrSolution, ControlError> {
    config.validate(model.n_u, model.n_y)?;
    match mode {
        PbrMode::Penalty(l) if l <= 0.0 => {
            return Err(ControlError::BadConfig("penalty must be positive".into()))
        }
        PbrMode::Constraint(l) if l < 0.0 => {
            return Err(ControlError::BadConfig("Lambda must be nonnegative".into()))
        }
        _ => {}
    }
    let (n_in, n_out, d) = (model.n_u * config.l_f, model.n_y * config.l_f, model.w_dim());
    let past = &model.m_p * stack_past(u_p, y_p);

    let mut prog = ConicProgram::new();
    let u_f = prog.add_var("u_f", n_in);
    let w = prog.add_var("w", d);
    let y_hat = prog.add_var("y_hat", n_out);
    predictor_eq(&mut prog, y_hat, &model.m_f, u_f, &past, Some((&model.m, w)));
    tracking_cost(&mut prog, y_hat, &config.q_bar(), &config.y_r);
    prog.add_quad_cost(u_f, &config.r_bar());
    match mode {
        PbrMode::Penalty(lambda) => {
            prog.add_quad_cost(w, &(lambda * (model.phi_perp.transpose() * &model.phi_perp)));
        }
        PbrMode::Constraint(lambda) if lambda == 0.0 => {
            let mut eq = AffineMat::zeros(d, 1);
            eq.add_linear_col(&model.phi_perp, w);
            prog.add_eq_zero(eq);
        }
        PbrMode::Constraint(lambda) => {
            let mut expr = AffineMat::zeros(d, 1);
            expr.add_linear_col(&model.phi_perp, w);
            prog.add_norm_le(expr, lambda.sqrt());
        }
    }
    for e in &config.input_constraints {
        prog.add_norm_le(ellipsoid_expr(e, u_f), 1.0);
    }
    for e in &config.output_constraints {
        prog.add_norm_le(ellipsoid_expr(e, y_hat), 1.0);
    }
    let res = run(&prog, &config.settings)?;
    let u = res.value(u_f);
    let w_star = res.value(w);
    let b = &model.m_f * &u + &past;
    let y = res.value(y_hat);
    let psi = quad_norm(&(&y - &config.y_r), &config.q_bar());
    let proj = (&model.phi_perp * &w_star).norm_squared();
    // Report the optimization objective without the penalty term so that
    // penalty and constraint modes are directly comparable.
    let objective = match mode {
        PbrMode::Penalty(lambda) => res.objective - lambda * proj,
        PbrMode::Constraint(_) => res.objective,
    };
    Ok(PbrSolution {
        solution: RobustSolution {
            u_f: u,
            policy: None,
            b,
            psi,
            gamma: 0.0,
            mus: Vec::new(),
            etas: Vec::new(),
            objective,
            solve_time: res.solve_time,
        },
        w: w_star,
        projector_norm_sq: proj,
    })
}

// ---------------------------------------------------------------------------
// Robust DDPC (open loop)
// ---------------------------------------------------------------------------

/// Assembled robust program plus the handles needed to read the solution
/// back out.
pub struct RddpcProgram {
    pub prog: ConicProgram,
    pub u_f: VarId,
    pub b: VarId,
    pub psi: VarId,
    pub gamma: VarId,
    pub mus: Vec<VarId>,
    /// Row counts of the emitted LMIs (output constraints first, cost last).
    pub lmi_sizes: Vec<usize>,
}

/// Assembly knobs; the defaults are what the solver entry points use.
#[derive(Debug, Clone)]
pub struct RobustOptions {
    /// Pin the input sequence, turning the solve into a pure worst-case
    /// cost evaluation at that input.
    pub fix_u_f: Option<DVector<f64>>,
    /// Apply [`UncertaintyModel::compress`] before assembling. Disable to
    /// emit the textbook LMI sizes (for size checks and timing studies).
    pub compress: bool,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self { fix_u_f: None, compress: true }
    }
}

pub fn assemble_rddpc(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<RddpcProgram, ControlError> {
    assemble_rddpc_with(model, config, u_p, y_p, &RobustOptions::default())
}

pub fn assemble_rddpc_with(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    options: &RobustOptions,
) -> Result<RddpcProgram, ControlError> {
    config.validate(model.n_u, model.n_y)?;
    if config.lambda <= 0.0 {
        return Err(ControlError::BadConfig(
            "Lambda must be positive for the robust controller (use SPC otherwise)".into(),
        ));
    }
    let compressed;
    let model = if options.compress {
        compressed = model.compress();
        &compressed
    } else {
        model
    };
    let (n_in, n_out, d) = (model.n_u * config.l_f, model.n_y * config.l_f, model.w_dim());
    let past = &model.m_p * stack_past(u_p, y_p);
    let q_bar = config.q_bar();
    let q_inv = config.q_bar_inv()?;
    let lambda = config.lambda;
    let set_mat = model.lmi_set_matrix();

    let mut prog = ConicProgram::new();
    let u_f = prog.add_var("u_f", n_in);
    let b = prog.add_var("b", n_out);
    let psi = prog.add_var("psi", 1);
    let gamma = prog.add_var("gamma", 1);
    prog.add_nonneg(gamma);

    prog.add_scalar_cost(psi, 1.0);
    prog.add_quad_cost(u_f, &config.r_bar());

    predictor_eq(&mut prog, b, &model.m_f, u_f, &past, None);
    if let Some(fixed) = &options.fix_u_f {
        let mut eq = AffineMat::zeros(n_in, 1);
        eq.add_linear_col(&DMatrix::identity(n_in, n_in), u_f);
        eq.add_const(&col_mat(&(-fixed)));
        prog.add_eq_zero(eq);
    }
    for e in &config.input_constraints {
        prog.add_norm_le(ellipsoid_expr(e, u_f), 1.0);
    }

    let mut mus = Vec::new();
    let mut lmi_sizes = Vec::new();
    for e in &config.output_constraints {
        let center = ellipsoid_expr(e, b);
        let gm = AffineMat::constant(&(&e.g * &model.m));
        let (lmi, mu) = prog.slemma_pair(&set_mat, lambda, &center, &gm)?;
        lmi_sizes.push(lmi.size);
        prog.add_lmi(lmi);
        mus.push(mu);
    }

    // Worst-case cost block: top = [[psi - gamma*Lambda + y_r'Q(2b - y_r),
    // *], [M'Q y_r, gamma*phi_perp]], bordered by [b, M] against Q^{-1}.
    let mut top = AffineMat::zeros(1 + d, 1 + d);
    top.add_term_entry(psi.offset, 0, 0, 1.0);
    top.add_term_entry(gamma.offset, 0, 0, -lambda);
    let two_qy: DVector<f64> = 2.0 * &q_bar * &config.y_r;
    for j in 0..n_out {
        top.add_term_entry(b.index(j), 0, 0, two_qy[j]);
    }
    top.add_const_entry(0, 0, -quad_norm(&config.y_r, &q_bar));
    let mqy: DVector<f64> = model.m.transpose() * &q_bar * &config.y_r;
    for i in 0..d {
        top.add_const_entry(1 + i, 0, mqy[i]);
    }
    let mut gpp = DMatrix::zeros(1 + d, 1 + d);
    gpp.view_mut((1, 1), (d, d)).copy_from(&set_mat);
    top.add_scalar_term(gamma.offset, &gpp);

    let mut cross = AffineMat::zeros(n_out, 1 + d);
    for j in 0..n_out {
        cross.add_term_entry(b.index(j), j, 0, 1.0);
    }
    for r in 0..n_out {
        for c in 0..d {
            cross.add_const_entry(r, 1 + c, model.m[(r, c)]);
        }
    }
    let cost_lmi = schur_lmi(&top, &cross, &q_inv)?;
    lmi_sizes.push(cost_lmi.size);
    prog.add_lmi(cost_lmi);

    Ok(RddpcProgram { prog, u_f, b, psi, gamma, mus, lmi_sizes })
}

pub fn solve_rddpc(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<RobustSolution, ControlError> {
    solve_rddpc_with(model, config, u_p, y_p, &RobustOptions::default())
}

pub fn solve_rddpc_with(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    options: &RobustOptions,
) -> Result<RobustSolution, ControlError> {
    let asm = assemble_rddpc_with(model, config, u_p, y_p, options)?;
    let res = run(&asm.prog, &config.settings)?;
    Ok(RobustSolution {
        u_f: res.value(asm.u_f),
        policy: None,
        b: res.value(asm.b),
        psi: res.scalar(asm.psi),
        gamma: res.scalar(asm.gamma),
        mus: asm.mus.iter().map(|&m| res.scalar(m)).collect(),
        etas: Vec::new(),
        objective: res.objective,
        solve_time: res.solve_time,
    })
}

// ---------------------------------------------------------------------------
// Feedback robust DDPC
// ---------------------------------------------------------------------------

pub struct FrddpcProgram {
    pub prog: ConicProgram,
    pub v_f: VarId,
    /// The product S = K m; the gain itself is recovered per block row as
    /// the minimum-norm solution of K m = S.
    pub s: MatVar,
    pub b: VarId,
    pub psi: VarId,
    pub gamma: VarId,
    pub alpha: VarId,
    pub etas: Vec<VarId>,
    pub mus: Vec<VarId>,
    pub lmi_sizes: Vec<usize>,
    /// The uncertainty image the program was assembled against (compression
    /// may have changed it from the caller's model).
    pub m_used: DMatrix<f64>,
}

/// Orthonormal basis of the orthogonal complement of the row space of `a`
/// inside R^d (columns). For an empty `a` this is the identity.
fn rowspace_null_basis(a: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    if a.nrows() == 0 {
        return DMatrix::identity(d, d);
    }
    let proj = {
        let svd = a.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd requested v_t");
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = a.nrows().max(d) as f64 * smax * f64::EPSILON;
        let r = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let basis = v_t.rows(0, r).transpose();
        DMatrix::identity(d, d) - &basis * basis.transpose()
    };
    let eig = nalgebra::SymmetricEigen::new(proj);
    let cols: Vec<usize> =
        (0..d).filter(|&j| eig.eigenvalues[j] > 0.5).collect();
    let mut out = DMatrix::zeros(d, cols.len());
    for (k, &j) in cols.iter().enumerate() {
        out.set_column(k, &eig.eigenvectors.column(j));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FeedbackOptions {
    /// Pin the gain to zero; the program then matches the open-loop robust
    /// controller with the input effort folded into psi.
    pub force_k_zero: bool,
    /// Apply [`UncertaintyModel::compress`] before assembling. Disable to
    /// emit the textbook LMI sizes (for size checks and timing studies).
    pub compress: bool,
}

impl Default for FeedbackOptions {
    fn default() -> Self {
        Self { force_k_zero: false, compress: true }
    }
}

pub fn assemble_frddpc(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<FrddpcProgram, ControlError> {
    assemble_frddpc_with(model, config, u_p, y_p, FeedbackOptions::default())
}

pub fn assemble_frddpc_with(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    options: FeedbackOptions,
) -> Result<FrddpcProgram, ControlError> {
    config.validate(model.n_u, model.n_y)?;
    if config.lambda <= 0.0 {
        return Err(ControlError::BadConfig(
            "Lambda must be positive for the robust controller (use SPC otherwise)".into(),
        ));
    }
    let compressed;
    let model = if options.compress {
        compressed = model.compress();
        &compressed
    } else {
        model
    };
    let (n_in, n_out, d) = (model.n_u * config.l_f, model.n_y * config.l_f, model.w_dim());
    let l_f = config.l_f;
    let past = &model.m_p * stack_past(u_p, y_p);
    let q_bar = config.q_bar();
    let q_inv = config.q_bar_inv()?;
    let r_inv = config.r_bar_inv()?;
    let lambda = config.lambda;
    let set_mat = model.lmi_set_matrix();

    let mut prog = ConicProgram::new();
    let v_f = prog.add_var("v_f", n_in);
    let b = prog.add_var("b", n_out);
    let psi = prog.add_var("psi", 1);
    let gamma = prog.add_var("gamma", 1);
    let alpha = prog.add_var("alpha", 1);
    prog.add_nonneg(gamma);
    prog.add_scalar_cost(psi, 1.0);

    predictor_eq(&mut prog, b, &model.m_f, v_f, &past, None);

    // The gain K enters the program only through the product S = K m, and
    // strict block-triangularity of K is exactly the requirement that each
    // input-block row of S lies in the row space of the residual rows of m
    // available before that input is decided. Optimizing over S under that
    // subspace constraint removes the null directions of K -> K m (m is
    // rank-deficient, so distinct gains act identically) which otherwise
    // leave K underdetermined and stall the interior-point solver; a
    // minimum-norm K is recovered from S after the solve.
    let s_var = prog.add_var("KM", n_in * d);
    let s_mv = MatVar::dense(s_var, n_in, d);
    for i in 0..l_f {
        let avail = model.n_y * i;
        let nullb = rowspace_null_basis(&model.m.rows(0, avail).into_owned(), d);
        if nullb.ncols() == 0 {
            continue;
        }
        for br in 0..model.n_u {
            let row = i * model.n_u + br;
            let mut eq = AffineMat::zeros(nullb.ncols(), 1);
            for c in 0..d {
                for j in 0..nullb.ncols() {
                    eq.add_term_entry(
                        s_mv.entry(row, c).expect("dense"),
                        j,
                        0,
                        nullb[(c, j)],
                    );
                }
            }
            prog.add_eq_zero(eq);
        }
    }

    if options.force_k_zero {
        let mut kz = AffineMat::zeros(n_in, d);
        kz.add_matvar(&s_mv, 1.0);
        prog.add_eq_zero(kz);
    }

    // alpha = psi - gamma*Lambda - ||y_r||^2_Q + 2 y_r' Q b
    let mut aeq = AffineMat::zeros(1, 1);
    aeq.add_term_entry(alpha.offset, 0, 0, 1.0);
    aeq.add_term_entry(psi.offset, 0, 0, -1.0);
    aeq.add_term_entry(gamma.offset, 0, 0, lambda);
    let two_qy: DVector<f64> = 2.0 * &q_bar * &config.y_r;
    for j in 0..n_out {
        aeq.add_term_entry(b.index(j), 0, 0, -two_qy[j]);
    }
    aeq.add_const_entry(0, 0, quad_norm(&config.y_r, &q_bar));
    prog.add_eq_zero(aeq);

    // M_K = M_f K + I is likewise substituted affinely (as M_f S + m in the
    // products below) rather than declared as a dense matrix variable.
    let eye_d = DMatrix::identity(d, d);
    let mut lmi_sizes = Vec::new();
    let mut etas = Vec::new();
    for e in &config.input_constraints {
        let center = ellipsoid_expr(e, v_f);
        let mut gm = AffineMat::zeros(e.g.nrows(), d);
        gm.add_sandwich(&e.g, &s_mv, &eye_d);
        let (lmi, eta) = prog.slemma_pair(&set_mat, lambda, &center, &gm)?;
        lmi_sizes.push(lmi.size);
        prog.add_lmi(lmi);
        etas.push(eta);
    }
    let mut mus = Vec::new();
    for e in &config.output_constraints {
        let center = ellipsoid_expr(e, b);
        let mut gm = AffineMat::zeros(e.g.nrows(), d);
        gm.add_sandwich(&(&e.g * &model.m_f), &s_mv, &eye_d);
        gm.add_const(&(&e.g * &model.m));
        let (lmi, mu) = prog.slemma_pair(&set_mat, lambda, &center, &gm)?;
        lmi_sizes.push(lmi.size);
        prog.add_lmi(lmi);
        mus.push(mu);
    }

    // Cost block: [[alpha, *, *, *], [(M_K M)' Q y_r, gamma*phi_perp, *, *],
    // [b, M_K M, Q^{-1}, *], [v_f, K M, 0, R^{-1}]]
    let size = 1 + d + n_out + n_in;
    let mut lmi = LmiExpr::new(size);
    let mut a00 = AffineMat::zeros(1, 1);
    a00.add_term_entry(alpha.offset, 0, 0, 1.0);
    lmi.add_sym_block(0, &a00);

    let qyr: DVector<f64> = &q_bar * &config.y_r;
    let mut blk10 = AffineMat::zeros(d, 1);
    blk10.add_sandwich(&eye_d, &s_mv.transpose(), &col_mat(&(model.m_f.transpose() * &qyr)));
    blk10.add_const(&(model.m.transpose() * col_mat(&qyr)));
    lmi.add_block(1, 0, &blk10);

    let mut blk11 = AffineMat::zeros(d, d);
    blk11.add_scalar_term(gamma.offset, &set_mat);
    lmi.add_sym_block(1, &blk11);

    let mut blk20 = AffineMat::zeros(n_out, 1);
    blk20.add_linear_col(&DMatrix::identity(n_out, n_out), b);
    lmi.add_block(1 + d, 0, &blk20);

    let mut blk21 = AffineMat::zeros(n_out, d);
    blk21.add_sandwich(&model.m_f, &s_mv, &eye_d);
    blk21.add_const(&model.m);
    lmi.add_block(1 + d, 1, &blk21);

    lmi.add_sym_block(1 + d, &AffineMat::constant(&q_inv));

    let mut blk30 = AffineMat::zeros(n_in, 1);
    blk30.add_linear_col(&DMatrix::identity(n_in, n_in), v_f);
    lmi.add_block(1 + d + n_out, 0, &blk30);

    let mut blk31 = AffineMat::zeros(n_in, d);
    blk31.add_matvar(&s_mv, 1.0);
    lmi.add_block(1 + d + n_out, 1, &blk31);

    lmi.add_sym_block(1 + d + n_out, &AffineMat::constant(&r_inv));
    lmi_sizes.push(lmi.size);
    prog.add_lmi(lmi);

    Ok(FrddpcProgram {
        prog,
        v_f,
        s: s_mv,
        b,
        psi,
        gamma,
        alpha,
        etas,
        mus,
        lmi_sizes,
        m_used: model.m.clone(),
    })
}

/// Minimum-norm strictly lower-block-triangular K with K m = s.
fn recover_gain(
    s: &DMatrix<f64>,
    m: &DMatrix<f64>,
    n_u: usize,
    n_y: usize,
    l_f: usize,
) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n_u * l_f, n_y * l_f);
    if m.ncols() == 0 {
        return k;
    }
    for i in 1..l_f {
        let avail = n_y * i;
        let m_avail = m.rows(0, avail).into_owned();
        let pinv_m = crate::behavioral::pinv(&m_avail);
        let block = s.rows(i * n_u, n_u) * &pinv_m;
        k.view_mut((i * n_u, 0), (n_u, avail)).copy_from(&block);
    }
    k
}

pub fn solve_frddpc(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<RobustSolution, ControlError> {
    solve_frddpc_with(model, config, u_p, y_p, FeedbackOptions::default())
}

pub fn solve_frddpc_with(
    model: &UncertaintyModel,
    config: &ControlConfig,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    options: FeedbackOptions,
) -> Result<RobustSolution, ControlError> {
    let asm = assemble_frddpc_with(model, config, u_p, y_p, options)?;
    let res = run(&asm.prog, &config.settings)?;
    let x = res.x.as_ref().expect("optimal solution carries primal values");
    let v_f = res.value(asm.v_f);
    let s = asm.s.value(x);
    let k = recover_gain(&s, &asm.m_used, model.n_u, model.n_y, config.l_f);
    let b = res.value(asm.b);
    Ok(RobustSolution {
        u_f: v_f.clone(),
        policy: Some(FeedbackPolicy { v_f, k, b: b.clone() }),
        b,
        psi: res.scalar(asm.psi),
        gamma: res.scalar(asm.gamma),
        mus: asm.mus.iter().map(|&m| res.scalar(m)).collect(),
        etas: asm.etas.iter().map(|&e| res.scalar(e)).collect(),
        objective: res.objective,
        solve_time: res.solve_time,
    })
}
