//! Hankel matrix construction, past/future partitioning, and the derived
//! predictor matrices: pseudo-inverse, nullspace projector, M = Y_f Phi_perp,
//! the M_f/M_p split, and the SVD-reduced twins.

use crate::lti_sim::Trajectory;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sequence too short: N={n} < depth L={l}")]
    TooShort { n: usize, l: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("SVD failed on degenerate data")]
    SvdFailure,
}

/// Problem dimensions attached to a behavioral dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_u: usize,
    pub n_y: usize,
    pub l_p: usize,
    pub l_f: usize,
    /// Number of recorded samples N.
    pub n_samples: usize,
    /// Hankel column count N - L + 1.
    pub n_cols: usize,
}

impl Dims {
    pub fn l(&self) -> usize {
        self.l_p + self.l_f
    }
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// `max(nrows, ncols) * sigma_max * f64::EPSILON` are treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with_rank(m).0
}

pub fn pinv_with_rank(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let tol = m.nrows().max(m.ncols()) as f64 * smax * f64::EPSILON;
    let mut rank = 0;
    let mut sinv = svd.singular_values.clone();
    for v in sinv.iter_mut() {
        if *v > tol {
            *v = 1.0 / *v;
            rank += 1;
        } else {
            *v = 0.0;
        }
    }
    // V * S^+ * U^T
    let mut vs = vt.transpose();
    for (j, s) in sinv.iter().enumerate() {
        vs.column_mut(j).scale_mut(*s);
    }
    (vs * u.transpose(), rank)
}

/// Numerical rank with the same cutoff rule as [`pinv`].
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let tol = m.nrows().max(m.ncols()) as f64 * sv.max() * f64::EPSILON;
    sv.iter().filter(|s| **s > tol).count()
}

/// Block Hankel matrix of depth `depth` from a vector sequence:
/// `d*depth x (N-depth+1)`, column j = col(x(j), ..., x(j+depth-1)).
pub fn build_hankel(seq: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>, DataError> {
    let n = seq.len();
    if n < depth || depth == 0 {
        return Err(DataError::TooShort { n, l: depth });
    }
    let d = seq[0].len();
    let cols = n - depth + 1;
    let mut h = DMatrix::zeros(d * depth, cols);
    for j in 0..cols {
        for k in 0..depth {
            h.view_mut((k * d, j), (d, 1)).copy_from(&seq[j + k]);
        }
    }
    Ok(h)
}

/// Persistency of excitation of a given order: full row rank of the
/// depth-`order` Hankel matrix.
pub fn is_persistently_exciting(seq: &[DVector<f64>], order: usize) -> bool {
    match build_hankel(seq, order) {
        Ok(h) => numerical_rank(&h) == h.nrows(),
        Err(_) => false,
    }
}

/// Partitioned Hankel data and the derived subspace-predictor matrices.
#[derive(Debug, Clone)]
pub struct BehavioralData {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    /// Stacked col(U_p, U_f, Y_p).
    pub phi: DMatrix<f64>,
    pub phi_pinv: DMatrix<f64>,
    /// Orthogonal projector onto the nullspace of Phi.
    pub phi_perp: DMatrix<f64>,
    /// M = Y_f Phi_perp.
    pub m: DMatrix<f64>,
    /// Future-input block of Y_f Phi_pinv (columns matching u_f).
    pub m_f: DMatrix<f64>,
    /// Past block of Y_f Phi_pinv (columns matching col(u_p, y_p)).
    pub m_p: DMatrix<f64>,
    pub dims: Dims,
}

/// Build a behavioral dataset from recorded data. Rows of Phi are ordered
/// col(u_p, u_f, y_p); the M_f/M_p split is the corresponding column
/// reordering of Y_f Phi_pinv: columns [n_u*L_p, n_u*L) form M_f, the rest
/// (u_p columns then y_p columns) form M_p.
pub fn partition(traj: &Trajectory, l_p: usize, l_f: usize) -> Result<BehavioralData, DataError> {
    let l = l_p + l_f;
    let n = traj.len();
    if n < l {
        return Err(DataError::TooShort { n, l });
    }
    let n_u = traj.inputs[0].len();
    let n_y = traj.outputs[0].len();
    let u_d = build_hankel(&traj.inputs, l)?;
    let y_d = build_hankel(&traj.outputs, l)?;
    let cols = u_d.ncols();

    let up = u_d.rows(0, n_u * l_p).into_owned();
    let uf = u_d.rows(n_u * l_p, n_u * l_f).into_owned();
    let yp = y_d.rows(0, n_y * l_p).into_owned();
    let yf = y_d.rows(n_y * l_p, n_y * l_f).into_owned();

    let mut phi = DMatrix::zeros(n_u * l + n_y * l_p, cols);
    phi.rows_mut(0, n_u * l_p).copy_from(&up);
    phi.rows_mut(n_u * l_p, n_u * l_f).copy_from(&uf);
    phi.rows_mut(n_u * l, n_y * l_p).copy_from(&yp);

    let phi_pinv = pinv(&phi);
    let phi_perp = DMatrix::identity(cols, cols) - &phi_pinv * &phi;
    let m = &yf * &phi_perp;
    let predictor = &yf * &phi_pinv;
    let (m_f, m_p) = split_predictor(&predictor, n_u, n_y, l_p, l_f);

    Ok(BehavioralData {
        up,
        uf,
        yp,
        yf,
        phi,
        phi_pinv,
        phi_perp,
        m,
        m_f,
        m_p,
        dims: Dims { n_u, n_y, l_p, l_f, n_samples: n, n_cols: cols },
    })
}

fn split_predictor(
    predictor: &DMatrix<f64>,
    n_u: usize,
    n_y: usize,
    l_p: usize,
    l_f: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = l_p + l_f;
    let m_f = predictor.columns(n_u * l_p, n_u * l_f).into_owned();
    let mut m_p = DMatrix::zeros(predictor.nrows(), n_u * l_p + n_y * l_p);
    m_p.columns_mut(0, n_u * l_p)
        .copy_from(&predictor.columns(0, n_u * l_p));
    m_p.columns_mut(n_u * l_p, n_y * l_p)
        .copy_from(&predictor.columns(n_u * l, n_y * l_p));
    (m_f, m_p)
}

impl BehavioralData {
    /// Nominal subspace prediction Y_f Phi_pinv col(u_p, u_f, y_p).
    pub fn spc_predict(
        &self,
        u_p: &DVector<f64>,
        u_f: &DVector<f64>,
        y_p: &DVector<f64>,
    ) -> Result<DVector<f64>, DataError> {
        check_window_dims(&self.dims, u_p, u_f, y_p)?;
        let past = stack_past(u_p, y_p);
        Ok(&self.m_f * u_f + &self.m_p * past)
    }

    pub fn stack_online(&self, u_p: &DVector<f64>, u_f: &DVector<f64>, y_p: &DVector<f64>) -> DVector<f64> {
        stack_z(u_p, u_f, y_p)
    }
}

pub(crate) fn stack_past(u_p: &DVector<f64>, y_p: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(u_p.len() + y_p.len());
    v.rows_mut(0, u_p.len()).copy_from(u_p);
    v.rows_mut(u_p.len(), y_p.len()).copy_from(y_p);
    v
}

pub(crate) fn stack_z(u_p: &DVector<f64>, u_f: &DVector<f64>, y_p: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(u_p.len() + u_f.len() + y_p.len());
    v.rows_mut(0, u_p.len()).copy_from(u_p);
    v.rows_mut(u_p.len(), u_f.len()).copy_from(u_f);
    v.rows_mut(u_p.len() + u_f.len(), y_p.len()).copy_from(y_p);
    v
}

fn check_window_dims(
    dims: &Dims,
    u_p: &DVector<f64>,
    u_f: &DVector<f64>,
    y_p: &DVector<f64>,
) -> Result<(), DataError> {
    if u_p.len() != dims.n_u * dims.l_p
        || u_f.len() != dims.n_u * dims.l_f
        || y_p.len() != dims.n_y * dims.l_p
    {
        return Err(DataError::Dimension(format!(
            "window lengths ({}, {}, {}) do not match dims",
            u_p.len(),
            u_f.len(),
            y_p.len()
        )));
    }
    Ok(())
}

/// SVD-reduced twins of [`BehavioralData`]: all predictor quantities in the
/// (n_u+n_y)L-dimensional coordinates of the stacked Hankel row space.
#[derive(Debug, Clone)]
pub struct ReducedData {
    /// W1 * Sigma, rows matching Phi.
    pub w1t: DMatrix<f64>,
    /// W2 * Sigma, rows matching Y_f.
    pub w2t: DMatrix<f64>,
    /// Reduced projector I - pinv(W1t) W1t.
    pub phi_perp_t: DMatrix<f64>,
    /// Reduced M = W2t phi_perp_t.
    pub m_t: DMatrix<f64>,
    pub m_f_t: DMatrix<f64>,
    pub m_p_t: DMatrix<f64>,
    /// Right factor of the thin SVD, kept for identity cross-checks only.
    pub v1: DMatrix<f64>,
    pub dims: Dims,
}

/// Thin SVD of col(Phi, Y_f); all (n_u+n_y)L directions are retained, the
/// rank decision is deferred to the pseudo-inverse cutoff inside.
pub fn svd_reduce(data: &BehavioralData) -> Result<ReducedData, DataError> {
    let d = &data.dims;
    let phi_rows = data.phi.nrows();
    let yf_rows = data.yf.nrows();
    let mut stacked = DMatrix::zeros(phi_rows + yf_rows, d.n_cols);
    stacked.rows_mut(0, phi_rows).copy_from(&data.phi);
    stacked.rows_mut(phi_rows, yf_rows).copy_from(&data.yf);

    let svd = stacked.svd(true, true);
    let u = svd.u.as_ref().ok_or(DataError::SvdFailure)?;
    let vt = svd.v_t.as_ref().ok_or(DataError::SvdFailure)?;
    if svd.singular_values.iter().any(|s| !s.is_finite()) {
        return Err(DataError::SvdFailure);
    }

    // Thin factors: keep all (n_u+n_y)L singular directions.
    let mut w_sigma = u.clone();
    for (j, s) in svd.singular_values.iter().enumerate() {
        w_sigma.column_mut(j).scale_mut(*s);
    }
    let w1t = w_sigma.rows(0, phi_rows).into_owned();
    let w2t = w_sigma.rows(phi_rows, yf_rows).into_owned();
    let v1 = vt.transpose();

    let w1t_pinv = pinv(&w1t);
    let k = w1t.ncols();
    let phi_perp_t = DMatrix::identity(k, k) - &w1t_pinv * &w1t;
    let m_t = &w2t * &phi_perp_t;
    let predictor = &w2t * &w1t_pinv;
    let (m_f_t, m_p_t) = split_predictor(&predictor, d.n_u, d.n_y, d.l_p, d.l_f);

    Ok(ReducedData { w1t, w2t, phi_perp_t, m_t, m_f_t, m_p_t, v1, dims: *d })
}

impl ReducedData {
    pub fn spc_predict(
        &self,
        u_p: &DVector<f64>,
        u_f: &DVector<f64>,
        y_p: &DVector<f64>,
    ) -> Result<DVector<f64>, DataError> {
        check_window_dims(&self.dims, u_p, u_f, y_p)?;
        Ok(&self.m_f_t * u_f + &self.m_p_t * stack_past(u_p, y_p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti_sim::{self, ArNoiseModel, Trajectory, BENCH_SIGMA_1, BENCH_SIGMA_2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_seq(vals: &[f64]) -> Vec<DVector<f64>> {
        vals.iter().map(|v| DVector::from_element(1, *v)).collect()
    }

    fn bench_data(noisy: bool, seed: u64) -> BehavioralData {
        let model = lti_sim::make_two_mass_model();
        let u = lti_sim::gen_excitation(600, 1.0, 0.01, 600, seed);
        let (s1, s2) = if noisy { (BENCH_SIGMA_1, BENCH_SIGMA_2) } else { (0.0, 0.0) };
        let traj = lti_sim::simulate(
            &model,
            &ArNoiseModel::new(0.5, s1),
            &ArNoiseModel::new(0.5, s2),
            &u,
            &DVector::zeros(4),
            seed,
        )
        .unwrap();
        partition(&traj, 5, 5).unwrap()
    }

    #[test]
    fn hankel_scalar_examples() {
        let h = build_hankel(&scalar_seq(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
        let h1 = build_hankel(&scalar_seq(&[5.0]), 1).unwrap();
        assert_eq!(h1, DMatrix::from_element(1, 1, 5.0));
        assert!(build_hankel(&scalar_seq(&[1.0]), 2).is_err());
    }

    #[test]
    fn hankel_block_shift_structure() {
        let seq: Vec<DVector<f64>> = (0..4)
            .map(|t| DVector::from_column_slice(&[t as f64, 10.0 + t as f64]))
            .collect();
        let h = build_hankel(&seq, 2).unwrap();
        assert_eq!(h.nrows(), 4);
        assert_eq!(h.ncols(), 3);
        for j in 0..3 {
            assert_eq!(h[(0, j)], seq[j][0]);
            assert_eq!(h[(1, j)], seq[j][1]);
            assert_eq!(h[(2, j)], seq[j + 1][0]);
            assert_eq!(h[(3, j)], seq[j + 1][1]);
        }
    }

    #[test]
    fn persistency_of_excitation() {
        let constant = scalar_seq(&[2.0; 10]);
        assert!(!is_persistently_exciting(&constant, 2));

        let pulse: Vec<f64> = (0..12).map(|t| if t % 3 == 0 { 1.0 } else { 0.0 }).collect();
        assert!(is_persistently_exciting(&scalar_seq(&pulse), 2));

        let u = lti_sim::gen_excitation(600, 1.0, 0.01, 600, 5);
        assert!(is_persistently_exciting(&u, 14));
    }

    #[test]
    fn partition_shapes() {
        let data = bench_data(true, 1);
        let d = &data.dims;
        assert_eq!(data.up.nrows(), d.n_u * d.l_p);
        assert_eq!(data.uf.nrows(), d.n_u * d.l_f);
        assert_eq!(data.yp.nrows(), d.n_y * d.l_p);
        assert_eq!(data.yf.nrows(), d.n_y * d.l_f);
        assert_eq!(data.m.nrows(), d.n_y * d.l_f);
        assert_eq!(data.m.ncols(), 591);
        assert_eq!(d.n_cols, 591);
    }

    #[test]
    fn projector_invariants() {
        let data = bench_data(true, 2);
        let p = &data.phi_perp;
        let idem = (p * p - p).norm();
        assert!(idem <= 1e-10, "idempotency residual {idem}");
        let sym = (p - p.transpose()).norm();
        assert!(sym <= 1e-10);
        let zero = (p * &data.phi_pinv).norm();
        assert!(zero <= 1e-10, "Phi_perp Phi_pinv = {zero}");
        let recon = (&data.phi * &data.phi_pinv * &data.phi - &data.phi).norm();
        assert!(recon <= 1e-8 * data.phi.norm());
    }

    #[test]
    fn noise_free_fundamental_lemma_residual() {
        let data = bench_data(false, 3);
        let rel = data.m.norm() / data.yf.norm();
        assert!(rel <= 1e-8, "relative residual {rel}");
    }

    #[test]
    fn noisy_m_full_row_rank() {
        let data = bench_data(true, 3);
        let smin = data.m.clone().singular_values().min();
        assert!(smin > 0.0);
        // Two scalar noise channels (input noise and the disturbance input)
        // over an l_f-step window: the residual image has rank 2 * l_f.
        assert_eq!(numerical_rank(&data.m), 2 * data.dims.l_f);
    }

    #[test]
    fn predictor_split_correctness() {
        let data = bench_data(true, 4);
        let d = &data.dims;
        let predictor = &data.yf * &data.phi_pinv;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z = DVector::from_fn(predictor.ncols(), |_, _| {
                StandardNormal.sample(&mut rng)
            });
            let u_p = z.rows(0, d.n_u * d.l_p).into_owned();
            let u_f = z.rows(d.n_u * d.l_p, d.n_u * d.l_f).into_owned();
            let y_p = z.rows(d.n_u * d.l(), d.n_y * d.l_p).into_owned();
            let direct = &predictor * &z;
            let split = data.spc_predict(&u_p, &u_f, &y_p).unwrap();
            assert!((direct - split).amax() <= 1e-10);
        }
    }

    #[test]
    fn reduction_identities() {
        let data = bench_data(true, 5);
        let red = svd_reduce(&data).unwrap();
        assert_eq!(red.phi_perp_t.ncols(), 50);

        // M_tilde V1^T == M
        let m_recon = &red.m_t * red.v1.transpose();
        assert!((m_recon - &data.m).amax() <= 1e-8);

        // Reduced predictor equals full predictor on random windows.
        let d = &data.dims;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let u_p = DVector::from_fn(d.n_u * d.l_p, |_, _| StandardNormal.sample(&mut rng));
            let u_f = DVector::from_fn(d.n_u * d.l_f, |_, _| StandardNormal.sample(&mut rng));
            let y_p = DVector::from_fn(d.n_y * d.l_p, |_, _| StandardNormal.sample(&mut rng));
            let full = data.spc_predict(&u_p, &u_f, &y_p).unwrap();
            let reduced = red.spc_predict(&u_p, &u_f, &y_p).unwrap();
            assert!((full - reduced).amax() <= 1e-8);
        }

        let p = &red.phi_perp_t;
        assert!((p * p - p).norm() <= 1e-10);
        assert!((p - p.transpose()).norm() <= 1e-10);
    }

    #[test]
    fn noise_free_prediction_exact() {
        let model = lti_sim::make_two_mass_model();
        let u = lti_sim::gen_excitation(600, 1.0, 0.01, 650, 6);
        let zero = ArNoiseModel::new(0.5, 0.0);
        let traj = lti_sim::simulate(&model, &zero, &zero, &u, &DVector::zeros(4), 6).unwrap();
        let head = Trajectory {
            inputs: traj.inputs[..600].to_vec(),
            outputs: traj.outputs[..600].to_vec(),
            states: None,
            noiseless_outputs: None,
        };
        let data = partition(&head, 5, 5).unwrap();

        // Validation window starting past the training data.
        let t0 = 610;
        let u_p = DVector::from_iterator(5, (t0 - 5..t0).map(|t| traj.inputs[t][0]));
        let u_f = DVector::from_iterator(5, (t0..t0 + 5).map(|t| traj.inputs[t][0]));
        let y_p = DVector::from_iterator(
            20,
            (t0 - 5..t0).flat_map(|t| traj.outputs[t].iter().copied().collect::<Vec<_>>()),
        );
        let y_f = DVector::from_iterator(
            20,
            (t0..t0 + 5).flat_map(|t| traj.outputs[t].iter().copied().collect::<Vec<_>>()),
        );
        let pred = data.spc_predict(&u_p, &u_f, &y_p).unwrap();
        assert!((pred - y_f).amax() <= 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn spc_predict_is_linear(scale in 0.1f64..10.0, seed in 0u64..1000) {
            let data = bench_data(true, 11);
            let d = data.dims;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u_p = DVector::from_fn(d.n_u * d.l_p, |_, _| StandardNormal.sample(&mut rng));
            let u_f = DVector::from_fn(d.n_u * d.l_f, |_, _| StandardNormal.sample(&mut rng));
            let y_p = DVector::from_fn(d.n_y * d.l_p, |_, _| StandardNormal.sample(&mut rng));
            let base = data.spc_predict(&u_p, &u_f, &y_p).unwrap();
            let scaled = data
                .spc_predict(&(&u_p * scale), &(&u_f * scale), &(&y_p * scale))
                .unwrap();
            prop_assert!((scaled - &base * scale).amax() <= 1e-8 * (1.0 + base.amax()) * scale.max(1.0));
        }
    }

    #[test]
    fn zero_window_predicts_zero() {
        let data = bench_data(true, 12);
        let d = &data.dims;
        let pred = data
            .spc_predict(
                &DVector::zeros(d.n_u * d.l_p),
                &DVector::zeros(d.n_u * d.l_f),
                &DVector::zeros(d.n_y * d.l_p),
            )
            .unwrap();
        assert_eq!(pred.amax(), 0.0);
    }
}
