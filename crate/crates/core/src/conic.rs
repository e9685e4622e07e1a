//! Solver-agnostic conic-program representation: convex quadratic objective,
//! affine equalities, norm-ball constraints, and LMI blocks affine in the
//! decision variables. Programs are lowered to an interior-point conic
//! solver (Clarabel) behind the [`ConicProgram::solve`] contract.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("weight matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

/// Handle to a declared (vector) decision variable: a contiguous slice of
/// the flat variable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId {
    pub offset: usize,
    pub len: usize,
}

impl VarId {
    pub fn index(&self, i: usize) -> usize {
        assert!(i < self.len);
        self.offset + i
    }
}

/// A matrix-valued variable: a shape plus an entry-to-flat-index map.
/// Structural zeros (e.g. the upper part of a strictly lower-block
/// triangular gain) carry no index and are eliminated from the program.
#[derive(Debug, Clone)]
pub struct MatVar {
    pub rows: usize,
    pub cols: usize,
    idx: Vec<Option<usize>>,
}

impl MatVar {
    /// Dense matrix variable over `v`, row-major entry order.
    pub fn dense(v: VarId, rows: usize, cols: usize) -> Self {
        assert_eq!(v.len, rows * cols);
        let idx = (0..rows * cols).map(|k| Some(v.offset + k)).collect();
        Self { rows, cols, idx }
    }

    /// Strictly lower-block-triangular variable with `block_rows x block_cols`
    /// blocks on an `n_blocks x n_blocks` grid; only blocks (i, j) with i > j
    /// are free. `v.len` must equal the free-entry count.
    pub fn strictly_lower_block_triangular(
        v: VarId,
        block_rows: usize,
        block_cols: usize,
        n_blocks: usize,
    ) -> Self {
        let rows = block_rows * n_blocks;
        let cols = block_cols * n_blocks;
        let mut idx = vec![None; rows * cols];
        let mut k = 0;
        for r in 0..rows {
            for c in 0..cols {
                if r / block_rows > c / block_cols {
                    idx[r * cols + c] = Some(v.offset + k);
                    k += 1;
                }
            }
        }
        assert_eq!(k, v.len, "free-entry count mismatch");
        Self { rows, cols, idx }
    }

    /// Number of free entries needed for the strictly lower-block-triangular
    /// structure above.
    pub fn strict_lower_count(block_rows: usize, block_cols: usize, n_blocks: usize) -> usize {
        block_rows * block_cols * n_blocks * (n_blocks - 1) / 2
    }

    pub fn entry(&self, r: usize, c: usize) -> Option<usize> {
        self.idx[r * self.cols + c]
    }

    pub fn transpose(&self) -> MatVar {
        let mut idx = vec![None; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                idx[c * self.rows + r] = self.entry(r, c);
            }
        }
        MatVar { rows: self.cols, cols: self.rows, idx }
    }

    /// Materialize the value from a solved flat vector; structural zeros
    /// stay zero.
    pub fn value(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| {
            self.entry(r, c).map_or(0.0, |i| x[i])
        })
    }
}

type Triplets = Vec<(usize, usize, f64)>;

/// Matrix expression affine in the flat decision vector:
/// `constant + sum_i x_i * T_i` with sparse coefficient matrices.
#[derive(Debug, Clone)]
pub struct AffineMat {
    pub rows: usize,
    pub cols: usize,
    constant: Triplets,
    terms: Vec<(usize, Triplets)>,
}

impl AffineMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, constant: Vec::new(), terms: Vec::new() }
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        let mut a = Self::zeros(m.nrows(), m.ncols());
        a.add_const(m);
        a
    }

    pub fn add_const(&mut self, m: &DMatrix<f64>) {
        assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols));
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let v = m[(r, c)];
                if v != 0.0 {
                    self.constant.push((r, c, v));
                }
            }
        }
    }

    pub fn add_const_entry(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.constant.push((r, c, v));
        }
    }

    /// Adds `x * M` for a scalar variable entry (flat index).
    pub fn add_scalar_term(&mut self, x: usize, m: &DMatrix<f64>) {
        assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols));
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let v = m[(r, c)];
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        }
        self.terms.push((x, t));
    }

    pub fn add_term_entry(&mut self, x: usize, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.terms.push((x, vec![(r, c, v)]));
        }
    }

    /// Adds the column vector `L * x_v` (expression must have one column).
    pub fn add_linear_col(&mut self, l: &DMatrix<f64>, v: VarId) {
        assert_eq!(self.cols, 1);
        assert_eq!(l.nrows(), self.rows);
        assert_eq!(l.ncols(), v.len);
        for j in 0..v.len {
            let mut t = Vec::new();
            for r in 0..l.nrows() {
                let val = l[(r, j)];
                if val != 0.0 {
                    t.push((r, 0, val));
                }
            }
            if !t.is_empty() {
                self.terms.push((v.index(j), t));
            }
        }
    }

    /// Adds `sign * X` where `X` is a matrix variable.
    pub fn add_matvar(&mut self, xm: &MatVar, sign: f64) {
        assert_eq!((xm.rows, xm.cols), (self.rows, self.cols));
        for r in 0..xm.rows {
            for c in 0..xm.cols {
                if let Some(i) = xm.entry(r, c) {
                    self.terms.push((i, vec![(r, c, sign)]));
                }
            }
        }
    }

    /// Adds `L * X * R` for a matrix variable `X`, exploiting sparsity of
    /// the constant factors.
    pub fn add_sandwich(&mut self, l: &DMatrix<f64>, xm: &MatVar, r: &DMatrix<f64>) {
        assert_eq!(l.ncols(), xm.rows);
        assert_eq!(r.nrows(), xm.cols);
        assert_eq!((l.nrows(), r.ncols()), (self.rows, self.cols));
        // Nonzero pattern of L columns and R rows, precomputed once.
        let lcols: Vec<Vec<(usize, f64)>> = (0..l.ncols())
            .map(|a| (0..l.nrows()).filter(|&p| l[(p, a)] != 0.0).map(|p| (p, l[(p, a)])).collect())
            .collect();
        let rrows: Vec<Vec<(usize, f64)>> = (0..r.nrows())
            .map(|b| (0..r.ncols()).filter(|&q| r[(b, q)] != 0.0).map(|q| (q, r[(b, q)])).collect())
            .collect();
        for a in 0..xm.rows {
            for b in 0..xm.cols {
                let Some(i) = xm.entry(a, b) else { continue };
                let mut t = Vec::with_capacity(lcols[a].len() * rrows[b].len());
                for &(p, lv) in &lcols[a] {
                    for &(q, rv) in &rrows[b] {
                        t.push((p, q, lv * rv));
                    }
                }
                if !t.is_empty() {
                    self.terms.push((i, t));
                }
            }
        }
    }

    /// Stack two expressions vertically.
    pub fn vstack(top: &AffineMat, bottom: &AffineMat) -> AffineMat {
        assert_eq!(top.cols, bottom.cols);
        let mut out = AffineMat::zeros(top.rows + bottom.rows, top.cols);
        out.constant.extend(top.constant.iter().copied());
        out.constant
            .extend(bottom.constant.iter().map(|&(r, c, v)| (r + top.rows, c, v)));
        out.terms.extend(top.terms.iter().cloned());
        out.terms.extend(
            bottom
                .terms
                .iter()
                .map(|(x, t)| (*x, t.iter().map(|&(r, c, v)| (r + top.rows, c, v)).collect())),
        );
        out
    }

    /// Evaluate at a flat point (tests and certificates).
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.constant {
            m[(r, c)] += v;
        }
        for (xi, t) in &self.terms {
            let s = x[*xi];
            for &(r, c, v) in t {
                m[(r, c)] += s * v;
            }
        }
        m
    }
}

/// Symmetric matrix expression affine in the decision variables, required
/// positive semidefinite. Only the lower triangle (r >= c) is stored.
#[derive(Debug, Clone)]
pub struct LmiExpr {
    pub size: usize,
    constant: Triplets,
    terms: Vec<(usize, Triplets)>,
}

impl LmiExpr {
    pub fn new(size: usize) -> Self {
        Self { size, constant: Vec::new(), terms: Vec::new() }
    }

    fn push_filtered(dst: &mut Triplets, src: &Triplets, r0: usize, c0: usize, lower_only: bool) {
        for &(r, c, v) in src {
            let (gr, gc) = (r0 + r, c0 + c);
            if lower_only && gr < gc {
                continue;
            }
            dst.push((gr, gc, v));
        }
    }

    /// Place a symmetric affine block on the diagonal at (r0, r0); only the
    /// lower half of the block is kept.
    pub fn add_sym_block(&mut self, r0: usize, aff: &AffineMat) {
        assert_eq!(aff.rows, aff.cols);
        assert!(r0 + aff.rows <= self.size);
        Self::push_filtered(&mut self.constant, &aff.constant, r0, r0, true);
        for (x, t) in &aff.terms {
            let mut out = Vec::new();
            Self::push_filtered(&mut out, t, r0, r0, true);
            if !out.is_empty() {
                self.terms.push((*x, out));
            }
        }
    }

    /// Place an affine block strictly below the diagonal at (r0, c0).
    pub fn add_block(&mut self, r0: usize, c0: usize, aff: &AffineMat) {
        assert!(c0 + aff.cols <= r0, "block must lie strictly below the diagonal");
        assert!(r0 + aff.rows <= self.size);
        Self::push_filtered(&mut self.constant, &aff.constant, r0, c0, false);
        for (x, t) in &aff.terms {
            let mut out = Vec::new();
            Self::push_filtered(&mut out, t, r0, c0, false);
            if !out.is_empty() {
                self.terms.push((*x, out));
            }
        }
    }

    /// Full symmetric value at a point.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        let mut acc = |tr: &Triplets, s: f64| {
            for &(r, c, v) in tr {
                m[(r, c)] += s * v;
                if r != c {
                    m[(c, r)] += s * v;
                }
            }
        };
        acc(&self.constant, 1.0);
        for (xi, t) in &self.terms {
            acc(t, x[*xi]);
        }
        m
    }

    pub fn min_eigenvalue(&self, x: &[f64]) -> f64 {
        self.eval(x).symmetric_eigen().eigenvalues.min()
    }
}

/// Bordered Schur-complement LMI `[[top, cross^T], [cross, weight_inv]]`,
/// equivalent to `top - cross^T * weight * cross >= 0` for positive
/// definite `weight`.
pub fn schur_lmi(
    top: &AffineMat,
    cross: &AffineMat,
    weight_inv: &DMatrix<f64>,
) -> Result<LmiExpr, ConicError> {
    if top.rows != top.cols || cross.cols != top.rows {
        return Err(ConicError::Shape("schur_lmi block shapes".into()));
    }
    if weight_inv.nrows() != cross.rows || weight_inv.ncols() != cross.rows {
        return Err(ConicError::Shape("schur_lmi weight shape".into()));
    }
    if weight_inv.clone().cholesky().is_none() {
        return Err(ConicError::NotPositiveDefinite);
    }
    let k = top.rows;
    let mut lmi = LmiExpr::new(k + cross.rows);
    lmi.add_sym_block(0, top);
    lmi.add_block(k, 0, cross);
    lmi.add_sym_block(k, &AffineMat::constant(weight_inv));
    Ok(lmi)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iters: u32,
    pub verbose: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-8, max_iters: 200, verbose: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal values, present iff status is Optimal.
    pub x: Option<Vec<f64>>,
    pub objective: f64,
    pub solve_time: f64,
}

impl SolveResult {
    pub fn value(&self, v: VarId) -> DVector<f64> {
        let x = self.x.as_ref().expect("no primal values");
        DVector::from_iterator(v.len, x[v.offset..v.offset + v.len].iter().copied())
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        assert_eq!(v.len, 1);
        self.x.as_ref().expect("no primal values")[v.offset]
    }
}

struct SocCon {
    expr: AffineMat,
    bound: f64,
}

/// Conic program over a flat decision vector.
#[derive(Default)]
pub struct ConicProgram {
    n: usize,
    vars: Vec<(String, VarId)>,
    quad_cost: Triplets, // (i, j, q) with i <= j: objective term q * x_i * x_j
    lin_cost: Vec<(usize, f64)>,
    cost_const: f64,
    eqs: Vec<AffineMat>, // each expression constrained entry-wise to zero
    nonneg: Vec<usize>,
    socs: Vec<SocCon>,
    lmis: Vec<LmiExpr>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: &str, len: usize) -> VarId {
        let id = VarId { offset: self.n, len };
        self.n += len;
        self.vars.push((name.to_string(), id));
        id
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    /// Adds `x_v^T W x_v` to the objective (W symmetric PSD).
    pub fn add_quad_cost(&mut self, v: VarId, w: &DMatrix<f64>) {
        assert_eq!((w.nrows(), w.ncols()), (v.len, v.len));
        for i in 0..v.len {
            for j in i..v.len {
                let q = if i == j { w[(i, i)] } else { w[(i, j)] + w[(j, i)] };
                if q != 0.0 {
                    self.quad_cost.push((v.index(i), v.index(j), q));
                }
            }
        }
    }

    pub fn add_lin_cost(&mut self, v: VarId, c: &DVector<f64>) {
        assert_eq!(c.len(), v.len);
        for i in 0..v.len {
            if c[i] != 0.0 {
                self.lin_cost.push((v.index(i), c[i]));
            }
        }
    }

    pub fn add_scalar_cost(&mut self, v: VarId, c: f64) {
        assert_eq!(v.len, 1);
        self.lin_cost.push((v.offset, c));
    }

    pub fn add_const_cost(&mut self, c: f64) {
        self.cost_const += c;
    }

    /// Constrains the affine expression to be zero entry-wise.
    pub fn add_eq_zero(&mut self, aff: AffineMat) {
        self.eqs.push(aff);
    }

    /// Each entry of the variable must be nonnegative.
    pub fn add_nonneg(&mut self, v: VarId) {
        for i in 0..v.len {
            self.nonneg.push(v.index(i));
        }
    }

    /// `||expr||_2 <= bound` for a column expression.
    pub fn add_norm_le(&mut self, expr: AffineMat, bound: f64) {
        assert_eq!(expr.cols, 1);
        assert!(bound >= 0.0);
        self.socs.push(SocCon { expr, bound });
    }

    pub fn add_lmi(&mut self, lmi: LmiExpr) {
        self.lmis.push(lmi);
    }

    /// S-Lemma pairing of one uncertainty ellipsoid `||P w||^2 <= lambda`
    /// with one robust quadratic constraint `||center + gm*w||^2 <= 1`:
    /// creates a fresh nonnegative multiplier and returns the Schur-form LMI
    /// together with it. The LMI still has to be added to the program.
    pub fn slemma_pair(
        &mut self,
        phi_perp: &DMatrix<f64>,
        lambda: f64,
        center: &AffineMat,
        gm: &AffineMat,
    ) -> Result<(LmiExpr, VarId), ConicError> {
        assert!(lambda > 0.0);
        let d = phi_perp.nrows();
        assert_eq!(gm.cols, d);
        assert_eq!(center.cols, 1);
        assert_eq!(center.rows, gm.rows);
        let mu = self.add_var("mu", 1);
        self.add_nonneg(mu);

        let mut top = AffineMat::zeros(1 + d, 1 + d);
        top.add_const_entry(0, 0, 1.0);
        let mut neg_lambda = AffineMat::zeros(1 + d, 1 + d);
        neg_lambda.add_const_entry(0, 0, -lambda);
        // mu * diag(-lambda, phi_perp)
        let mut coeff = DMatrix::zeros(1 + d, 1 + d);
        coeff[(0, 0)] = -lambda;
        coeff.view_mut((1, 1), (d, d)).copy_from(phi_perp);
        top.add_scalar_term(mu.offset, &coeff);

        let mut cross = AffineMat::zeros(gm.rows, 1 + d);
        // column 0: center; columns 1..: gm
        for &(r, c, v) in &center.constant {
            cross.add_const_entry(r, c, v);
        }
        for (x, t) in &center.terms {
            cross.terms.push((*x, t.clone()));
        }
        for &(r, c, v) in &gm.constant {
            cross.add_const_entry(r, c + 1, v);
        }
        for (x, t) in &gm.terms {
            cross
                .terms
                .push((*x, t.iter().map(|&(r, c, v)| (r, c + 1, v)).collect()));
        }
        let lmi = schur_lmi(&top, &cross, &DMatrix::identity(gm.rows, gm.rows))?;
        Ok((lmi, mu))
    }

    /// Human-readable dump of the variable table and constraint list.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "variables ({} scalars):", self.n).unwrap();
        for (name, id) in &self.vars {
            writeln!(s, "  {name}: offset {}, len {}", id.offset, id.len).unwrap();
        }
        writeln!(s, "equalities: {} blocks", self.eqs.len()).unwrap();
        writeln!(s, "nonnegative scalars: {}", self.nonneg.len()).unwrap();
        for soc in &self.socs {
            writeln!(s, "soc: dim {} bound {}", soc.expr.rows, soc.bound).unwrap();
        }
        for lmi in &self.lmis {
            writeln!(s, "lmi: {0} x {0}", lmi.size).unwrap();
        }
        s
    }

    pub fn solve(&self, settings: &SolveSettings) -> Result<SolveResult, ConicError> {
        lower_and_solve(self, settings)
    }
}

// ---------------------------------------------------------------------------
// Clarabel lowering
// ---------------------------------------------------------------------------

fn lower_and_solve(prog: &ConicProgram, settings: &SolveSettings) -> Result<SolveResult, ConicError> {
    use clarabel::solver::{
        DefaultSettings, DefaultSolver, IPSolver, SolverStatus as CStatus, SupportedConeT,
    };

    let n = prog.n;
    // Objective: min 1/2 x'Px + q'x. Our quad_cost stores (i<=j, coefficient
    // of x_i x_j in the objective), so P_ij = coeff for i<j, P_ii = 2*coeff.
    let mut p_trips: Vec<(usize, usize, f64)> = Vec::with_capacity(prog.quad_cost.len());
    for &(i, j, q) in &prog.quad_cost {
        if i == j {
            p_trips.push((i, j, 2.0 * q));
        } else {
            p_trips.push((i, j, q));
        }
    }
    let mut q = vec![0.0; n];
    for &(i, c) in &prog.lin_cost {
        q[i] += c;
    }

    let mut a_trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0usize;

    // Equalities: s = b - A x = 0  =>  A row = coeffs, b = -constant moved
    // across: expr = const + coeff*x = 0  =>  coeff*x = -const.
    let mut eq_rows = 0usize;
    for aff in &prog.eqs {
        let base = row;
        let count = aff.rows * aff.cols;
        b.resize(b.len() + count, 0.0);
        for &(r, c, v) in &aff.constant {
            b[base + r * aff.cols + c] -= v;
        }
        for (x, t) in &aff.terms {
            for &(r, c, v) in t {
                a_trips.push((base + r * aff.cols + c, *x, v));
            }
        }
        row += count;
        eq_rows += count;
    }
    if eq_rows > 0 {
        cones.push(SupportedConeT::ZeroConeT(eq_rows));
    }

    // Nonnegativity: s = x_i >= 0  =>  A = -e_i, b = 0.
    if !prog.nonneg.is_empty() {
        for &i in &prog.nonneg {
            a_trips.push((row, i, -1.0));
            b.push(0.0);
            row += 1;
        }
        cones.push(SupportedConeT::NonnegativeConeT(prog.nonneg.len()));
    }

    // SOC: s = (bound, expr) in second-order cone.
    for soc in &prog.socs {
        b.push(soc.bound);
        row += 1;
        let base = row;
        b.resize(b.len() + soc.expr.rows, 0.0);
        for &(r, _, v) in &soc.expr.constant {
            b[base + r] += v;
        }
        for (x, t) in &soc.expr.terms {
            for &(r, _, v) in t {
                a_trips.push((base + r, *x, -v));
            }
        }
        row += soc.expr.rows;
        cones.push(SupportedConeT::SecondOrderConeT(soc.expr.rows + 1));
    }

    // LMIs: s = svec(constant + sum x_i T_i) in the scaled PSD triangle cone.
    const SQRT2: f64 = std::f64::consts::SQRT_2;
    for lmi in &prog.lmis {
        let m = lmi.size;
        let base = row;
        let dim = m * (m + 1) / 2;
        b.resize(b.len() + dim, 0.0);
        // lower (r,c), r>=c maps to upper-triangle column-stacked index.
        let svec_idx = |r: usize, c: usize| r * (r + 1) / 2 + c;
        let scale = |r: usize, c: usize| if r == c { 1.0 } else { SQRT2 };
        for &(r, c, v) in &lmi.constant {
            b[base + svec_idx(r, c)] += scale(r, c) * v;
        }
        // Merge duplicate (x, position) coefficients before pushing.
        let mut per_x: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        for (x, t) in &lmi.terms {
            for &(r, c, v) in t {
                *per_x.entry((*x, svec_idx(r, c))).or_insert(0.0) += scale(r, c) * v;
            }
        }
        for ((x, pos), v) in per_x {
            if v != 0.0 {
                a_trips.push((base + pos, x, -v));
            }
        }
        row += dim;
        cones.push(SupportedConeT::PSDTriangleConeT(m));
    }

    let p = csc_from_triplets_sorted(n, n, p_trips);
    let a = csc_from_triplets_sorted(row, n, a_trips);

    let mut cset = DefaultSettings::default();
    // The robust LMIs are block-arrow sparse (diagonal multiplier block plus
    // dense borders); decomposing them into cliques is what keeps large
    // instances tractable.
    cset.chordal_decomposition_enable = true;
    cset.direct_solve_method = "faer".into();
    cset.verbose = settings.verbose;
    cset.max_iter = settings.max_iters;
    cset.tol_feas = settings.feas_tol;
    cset.tol_gap_rel = settings.gap_tol;
    cset.tol_gap_abs = settings.gap_tol;

    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, cset);
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        CStatus::Solved | CStatus::AlmostSolved => SolveStatus::Optimal,
        CStatus::PrimalInfeasible
        | CStatus::DualInfeasible
        | CStatus::AlmostPrimalInfeasible
        | CStatus::AlmostDualInfeasible => SolveStatus::Infeasible,
        CStatus::MaxIterations | CStatus::MaxTime => SolveStatus::MaxIterations,
        _ => SolveStatus::NumericalFailure,
    };
    let x = if status == SolveStatus::Optimal {
        Some(sol.x.clone())
    } else {
        None
    };
    Ok(SolveResult {
        status,
        x,
        objective: sol.obj_val + prog.cost_const,
        solve_time: sol.solve_time,
    })
}

/// Triplets -> CSC with duplicate summation.
fn csc_from_triplets_sorted(
    nrows: usize,
    ncols: usize,
    trips: Vec<(usize, usize, f64)>,
) -> clarabel::algebra::CscMatrix<f64> {
    let mut sorted = trips;
    sorted.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; ncols + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(sorted.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
    let mut cur_col = 0usize;
    for (r, c, v) in sorted {
        while cur_col < c {
            cur_col += 1;
            colptr[cur_col] = rowval.len();
        }
        if let (Some(&lr), Some(lv)) = (rowval.last(), nzval.last_mut()) {
            if lr == r && colptr[cur_col] < rowval.len() {
                *lv += v;
                continue;
            }
        }
        rowval.push(r);
        nzval.push(v);
    }
    while cur_col < ncols {
        cur_col += 1;
        colptr[cur_col] = rowval.len();
    }
    clarabel::algebra::CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn trivial_qp() {
        let mut p = ConicProgram::new();
        let u = p.add_var("u", 1);
        p.add_quad_cost(u, &DMatrix::from_element(1, 1, 1.0));
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.scalar(u), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn psd_two_by_two() {
        // min -t s.t. [[1, t], [t, 1]] >= 0  =>  t = 1
        let mut p = ConicProgram::new();
        let t = p.add_var("t", 1);
        p.add_scalar_cost(t, -1.0);
        let mut lmi = LmiExpr::new(2);
        let mut diag = AffineMat::zeros(2, 2);
        diag.add_const(&DMatrix::identity(2, 2));
        diag.add_term_entry(t.offset, 1, 0, 1.0);
        lmi.add_sym_block(0, &diag);
        p.add_lmi(lmi);
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.scalar(t), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn equality_and_soc() {
        // min (x - 2)^2 s.t. x = y, ||y|| <= 1  =>  x = 1
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 1);
        let y = p.add_var("y", 1);
        p.add_quad_cost(x, &DMatrix::from_element(1, 1, 1.0));
        p.add_lin_cost(x, &DVector::from_element(1, -4.0));
        p.add_const_cost(4.0);
        let mut eq = AffineMat::zeros(1, 1);
        eq.add_term_entry(x.offset, 0, 0, 1.0);
        eq.add_term_entry(y.offset, 0, 0, -1.0);
        p.add_eq_zero(eq);
        let mut soc = AffineMat::zeros(1, 1);
        soc.add_term_entry(y.offset, 0, 0, 1.0);
        p.add_norm_le(soc, 1.0);
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.scalar(x), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(r.objective, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        // x >= 0, x <= -1 via ||x + 2|| <= 1  (x in [-3, -1]) conflicts.
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 1);
        p.add_nonneg(x);
        let mut soc = AffineMat::zeros(1, 1);
        soc.add_term_entry(x.offset, 0, 0, 1.0);
        soc.add_const_entry(0, 0, 2.0);
        p.add_norm_le(soc, 1.0);
        p.add_scalar_cost(x, 1.0);
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.x.is_none());
    }

    #[test]
    fn schur_scalar_equivalence() {
        // [[s, v], [v, 1/q]] >= 0 with q > 0 iff s >= q v^2.
        // min s with v fixed by equality: optimal s = q v^2.
        let (qw, v_fix) = (2.5, 0.8);
        let mut p = ConicProgram::new();
        let s = p.add_var("s", 1);
        let v = p.add_var("v", 1);
        let mut eq = AffineMat::zeros(1, 1);
        eq.add_term_entry(v.offset, 0, 0, 1.0);
        eq.add_const_entry(0, 0, -v_fix);
        p.add_eq_zero(eq);
        let mut top = AffineMat::zeros(1, 1);
        top.add_term_entry(s.offset, 0, 0, 1.0);
        let mut cross = AffineMat::zeros(1, 1);
        cross.add_term_entry(v.offset, 0, 0, 1.0);
        let lmi = schur_lmi(&top, &cross, &DMatrix::from_element(1, 1, 1.0 / qw)).unwrap();
        p.add_lmi(lmi);
        p.add_scalar_cost(s, 1.0);
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.scalar(s), qw * v_fix * v_fix, epsilon = 1e-6);
    }

    #[test]
    fn schur_rejects_indefinite_weight() {
        let top = AffineMat::zeros(1, 1);
        let cross = AffineMat::zeros(1, 1);
        let w = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(
            schur_lmi(&top, &cross, &w),
            Err(ConicError::NotPositiveDefinite)
        ));
    }

    /// Scalar robust feasibility: |m w + b| <= 1 for all |w| <= sqrt(L)
    /// iff |b| + |m| sqrt(L) <= 1. The S-Lemma LMI must agree.
    #[test]
    fn slemma_scalar_exactness() {
        let grid: [(f64, f64, f64); 20] = [
            (0.0, 0.0, 0.5),
            (0.5, 0.3, 0.25),
            (1.0, 0.0, 1.0),
            (0.2, 0.9, 0.01),
            (0.3, 0.5, 1.0),
            (0.9, 0.9, 0.09),
            (0.1, 0.1, 4.0),
            (2.0, 0.0, 0.01),
            (0.4, -0.5, 0.49),
            (0.0, 1.0, 1.0),
            (0.0, 1.0001, 1.0),
            (0.7, 0.2, 0.16),
            (0.05, 0.05, 9.0),
            (1.5, 0.2, 0.04),
            (0.25, 0.25, 1.0),
            (0.6, -0.6, 0.25),
            (0.33, 0.33, 0.33),
            (0.8, 0.1, 0.01),
            (0.45, 0.45, 0.45),
            (0.15, -0.95, 0.04),
        ];
        for (m, bv, lam) in grid {
            let closed_form = bv.abs() + m.abs() * f64::sqrt(lam) <= 1.0 + 1e-9;
            let mut p = ConicProgram::new();
            let phi = DMatrix::identity(1, 1);
            let center = AffineMat::constant(&DMatrix::from_element(1, 1, bv));
            let gm = AffineMat::constant(&DMatrix::from_element(1, 1, m));
            let (lmi, _mu) = p.slemma_pair(&phi, lam, &center, &gm).unwrap();
            p.add_lmi(lmi);
            let r = p.solve(&SolveSettings::default()).unwrap();
            let feasible = r.status == SolveStatus::Optimal;
            assert_eq!(
                feasible, closed_form,
                "m={m} b={bv} lam={lam}: lmi {feasible} vs closed form {closed_form}"
            );
        }
    }

    #[test]
    fn slemma_interior_zero_multiplier() {
        // m = 0, b strictly interior: mu = 0 certifies.
        let mut p = ConicProgram::new();
        let phi = DMatrix::identity(1, 1);
        let center = AffineMat::constant(&DMatrix::from_element(1, 1, 0.3));
        let gm = AffineMat::constant(&DMatrix::from_element(1, 1, 0.0));
        let (lmi, mu) = p.slemma_pair(&phi, 1.0, &center, &gm).unwrap();
        p.add_lmi(lmi);
        p.add_scalar_cost(mu, 1.0);
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.scalar(mu).abs() <= 1e-6);
    }

    #[test]
    fn solved_lmis_are_psd_at_optimum() {
        let mut p = ConicProgram::new();
        let t = p.add_var("t", 1);
        p.add_scalar_cost(t, -1.0);
        let mut lmi = LmiExpr::new(3);
        let mut blk = AffineMat::zeros(3, 3);
        blk.add_const(&DMatrix::identity(3, 3));
        blk.add_term_entry(t.offset, 1, 0, 1.0);
        blk.add_term_entry(t.offset, 2, 1, 0.5);
        lmi.add_sym_block(0, &blk);
        p.add_lmi(lmi.clone());
        let r = p.solve(&SolveSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(lmi.min_eigenvalue(r.x.as_ref().unwrap()) >= -1e-6);
    }

    #[test]
    fn solver_determinism() {
        let build = || {
            let mut p = ConicProgram::new();
            let t = p.add_var("t", 1);
            p.add_scalar_cost(t, -1.0);
            let mut lmi = LmiExpr::new(2);
            let mut blk = AffineMat::zeros(2, 2);
            blk.add_const(&DMatrix::identity(2, 2));
            blk.add_term_entry(t.offset, 1, 0, 1.0);
            lmi.add_sym_block(0, &blk);
            p.add_lmi(lmi);
            p
        };
        let r1 = build().solve(&SolveSettings::default()).unwrap();
        let r2 = build().solve(&SolveSettings::default()).unwrap();
        assert_eq!(r1.status, r2.status);
        assert!((r1.objective - r2.objective).abs() <= 1e-8);
    }
}
