//! Acceptance gates for the robust DDPC pipeline. Each test prints one
//! PASS/FAIL line; tests are serialized through a shared lock so the runtime
//! envelopes are measured without interference from each other.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rddpc::behavioral::{numerical_rank, partition, svd_reduce, BehavioralData};
use rddpc::controllers::{
    benchmark_config, solve_frddpc, solve_rddpc, solve_rddpc_with, solve_spc, ControlConfig,
    RobustOptions, UncertaintyModel,
};
use rddpc::harness::{
    benchmark_solve_times, grid_search_lambda, monte_carlo, prepare_data, resolve_lambda,
    run_receding_horizon, CollectionSpec, ControllerKind, ExperimentConfig, ExperimentReport,
    ReferenceSpec,
};
use rddpc::lti_sim::{self, ArNoiseModel, SystemModel, BENCH_SIGMA_1, BENCH_SIGMA_2};
use rddpc::verify::{slices_from_trajectory, theorem1_lambda_o, tune_lambda};

fn gate() -> MutexGuard<'static, ()> {
    static GATE: Mutex<()> = Mutex::new(());
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn conclude(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn quad_norm(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

fn opnorm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Benchmark offline data; `noisy: false` zeroes both noise channels.
fn bench_data(n: usize, noisy: bool, seed: u64) -> BehavioralData {
    let model = lti_sim::make_two_mass_model();
    let u = lti_sim::gen_excitation(600, 1.0, 0.01, n, seed);
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

/// Horizon reference for the benchmark tracking task: `wave` on the first
/// output channel, zero elsewhere.
fn horizon_ref(wave: &[f64], t: usize, l_f: usize) -> DVector<f64> {
    let mut y_r = DVector::zeros(4 * l_f);
    for k in 0..l_f {
        y_r[4 * k] = wave[t + k];
    }
    y_r
}

/// Deterministic plant stepper (no process or measurement noise).
struct Plant {
    model: SystemModel,
    x: DVector<f64>,
}

impl Plant {
    fn new() -> Self {
        let model = lti_sim::make_two_mass_model();
        let x = DVector::zeros(model.n_x());
        Self { model, x }
    }

    fn step(&mut self, u: &DVector<f64>) -> DVector<f64> {
        let y = &self.model.c * &self.x + &self.model.d * u;
        self.x = &self.model.a * &self.x + &self.model.b_u * u;
        y
    }
}

fn stack(window: &[DVector<f64>]) -> DVector<f64> {
    let d = window[0].len();
    let mut out = DVector::zeros(d * window.len());
    for (k, v) in window.iter().enumerate() {
        out.rows_mut(k * d, d).copy_from(v);
    }
    out
}

/// Uniform samples on the boundary of the uncertainty set.
fn boundary_ws(model: &UncertaintyModel, lambda: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.w_dim();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| {
                <f64 as From<f32>>::from(StandardNormal.sample(&mut rng))
            });
            let p = &model.phi_perp * z;
            let nrm = p.norm();
            if nrm <= 1e-14 {
                DVector::zeros(d)
            } else {
                p * (lambda.sqrt() / nrm)
            }
        })
        .collect()
}

/// Shared Monte-Carlo campaign at the tuned Lambda (criteria 5 and 7).
fn mc_report() -> &'static ExperimentReport {
    static REPORT: OnceLock<ExperimentReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.controllers =
            vec![ControllerKind::Spc, ControllerKind::Rddpc, ControllerKind::Frddpc];
        monte_carlo(&cfg, 30, None).unwrap()
    })
}

#[test]
fn criterion_1_noise_free_receding_horizon_matches_spc() {
    let _g = gate();
    let t0 = Instant::now();
    let data = bench_data(600, false, 21);
    let model = UncertaintyModel::from_reduced(&svd_reduce(&data).unwrap());
    let wave = lti_sim::square_reference(100, 0.4, 40);

    let run = |kind: ControllerKind| -> Vec<f64> {
        let mut plant = Plant::new();
        let mut past_u = Vec::new();
        let mut past_y = Vec::new();
        for _ in 0..5 {
            let u = DVector::zeros(1);
            let y = plant.step(&u);
            past_u.push(u);
            past_y.push(y);
        }
        let mut applied = Vec::new();
        for t in 0..20 {
            let mut cfg = benchmark_config(horizon_ref(&wave, t, 5), 0.5);
            // Near-degenerate uncertainty leaves the certificate multiplier
            // loosely pinned at the default gap tolerance.
            cfg.settings.gap_tol = 1e-11;
            cfg.settings.feas_tol = 1e-10;
            let u_p = stack(&past_u[past_u.len() - 5..]);
            let y_p = stack(&past_y[past_y.len() - 5..]);
            let sol = match kind {
                ControllerKind::Spc => solve_spc(&model, &cfg, &u_p, &y_p),
                ControllerKind::Rddpc => solve_rddpc(&model, &cfg, &u_p, &y_p),
                ControllerKind::Frddpc => solve_frddpc(&model, &cfg, &u_p, &y_p),
                ControllerKind::Pbr => unreachable!(),
            }
            .unwrap();
            let u = sol.applied(1);
            let y = plant.step(&u);
            applied.push(u[0]);
            past_u.push(u);
            past_y.push(y);
        }
        applied
    };

    let spc = run(ControllerKind::Spc);
    let rob = run(ControllerKind::Rddpc);
    let fr = run(ControllerKind::Frddpc);
    let d_r = spc.iter().zip(&rob).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    let d_fr = spc.iter().zip(&fr).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    conclude(
        "criterion 1 (noise-free R/FR vs SPC receding horizon)",
        d_r <= 1e-5 && d_fr <= 1e-4 && secs < 120.0,
        &format!("max|u_R-u_SPC| {d_r:.2e} (tol 1e-5), max|u_FR-u_SPC| {d_fr:.2e} (tol 1e-4), {secs:.0}s (<120s)"),
    );
}

#[test]
fn criterion_2_fundamental_lemma_residual() {
    let _g = gate();
    let clean = bench_data(600, false, 22);
    let noisy = bench_data(600, true, 22);
    let ratio = opnorm(&clean.m) / opnorm(&clean.yf);
    let smin = noisy.m.clone().svd(false, false).singular_values.min();
    conclude(
        "criterion 2 (fundamental-lemma residual)",
        ratio <= 1e-8 && smin > 0.0,
        &format!("noise-free ||Y_f Phi_perp||/||Y_f|| {ratio:.2e} (tol 1e-8), noisy sigma_min {smin:.2e} (> 0)"),
    );
}

#[test]
fn criterion_3_sdp_matches_oracle_on_low_rank_instances() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc3);
    let mut norm = |s: f64| -> f64 {
        s * <f64 as From<f32>>::from(StandardNormal.sample(&mut rng))
    };
    let mut worst_psi_rel = 0.0f64;
    let mut worst_uf_gap = 0.0f64;
    for i in 0..50usize {
        let n_y = 2 + i % 2;
        let w_dim = 4 + i % 3;
        let r = 1 + i % 3;
        let a = DMatrix::from_fn(n_y, r, |_, _| norm(0.5));
        let b = DMatrix::from_fn(r, w_dim, |_, _| norm(0.5));
        let m = &a * &b;
        assert!(numerical_rank(&m) <= 3);
        // Half the instances carry a genuine projector whose range covers
        // row-space of m plus one spare direction.
        let projector = if i % 2 == 0 {
            DMatrix::identity(w_dim, w_dim)
        } else {
            let mut span = DMatrix::zeros(w_dim, r + 1);
            span.view_mut((0, 0), (w_dim, r)).copy_from(&b.transpose());
            for k in 0..w_dim {
                span[(k, r)] = norm(1.0);
            }
            let svd = span.svd(true, false);
            let rank = svd
                .singular_values
                .iter()
                .filter(|s| **s > 1e-10 * svd.singular_values[0])
                .count();
            let u = svd.u.unwrap();
            let ur = u.columns(0, rank).into_owned();
            &ur * ur.transpose()
        };
        let m_f = DMatrix::from_fn(n_y, 1, |_, _| norm(1.0));
        let m_p = DMatrix::from_fn(n_y, 1 + n_y, |_, _| norm(0.3));
        let model =
            UncertaintyModel::from_parts(m_f, m_p, m.clone(), projector, 1, n_y, 1);
        let mut cfg = ControlConfig {
            l_p: 1,
            l_f: 1,
            q_step: DMatrix::identity(n_y, n_y),
            r_step: DMatrix::from_element(1, 1, 0.1),
            y_r: DVector::from_fn(n_y, |_, _| norm(0.5)),
            input_constraints: vec![],
            output_constraints: vec![],
            lambda: [0.2, 0.5, 1.0][i % 3],
            settings: Default::default(),
        };
        cfg.settings.gap_tol = 1e-10;
        cfg.settings.feas_tol = 1e-9;
        let u_p = DVector::zeros(1);
        let y_p = DVector::from_fn(n_y, |_, _| norm(0.3));
        let full = solve_rddpc_with(
            &model,
            &cfg,
            &u_p,
            &y_p,
            &RobustOptions { compress: false, ..Default::default() },
        )
        .unwrap();
        let red = solve_rddpc(&model, &cfg, &u_p, &y_p).unwrap();
        let oracle = rddpc::verify::worst_case_cost_oracle(
            &red.b,
            &model.m,
            &cfg.q_step,
            &cfg.y_r,
            cfg.lambda,
            3,
        )
        .unwrap();
        worst_psi_rel = worst_psi_rel
            .max((red.psi - oracle.max_value).abs() / oracle.max_value.max(1e-9));
        worst_uf_gap = worst_uf_gap.max((full.u_f - red.u_f).amax());
    }
    let secs = t0.elapsed().as_secs_f64();
    conclude(
        "criterion 3 (SDP certificate vs oracle, full vs reduced)",
        worst_psi_rel <= 1e-3 && worst_uf_gap <= 1e-5 && secs < 300.0,
        &format!("50 instances, worst psi rel err {worst_psi_rel:.2e} (tol 1e-3), worst u_f gap {worst_uf_gap:.2e} (tol 1e-5), {secs:.0}s (<300s)"),
    );
}

#[test]
fn criterion_4_boundary_sampling_never_violates_certificates() {
    let _g = gate();
    let config = ExperimentConfig::default();
    let prepared = prepare_data(&config, config.seed.wrapping_add(0xda7a)).unwrap();
    let lambda = resolve_lambda(&config, &prepared.data).unwrap();
    let model = &prepared.model;
    let plant_model = lti_sim::make_two_mass_model();
    let wave = lti_sim::square_reference(100, 0.4, 40);
    let eye = DMatrix::identity(4 * 5, 4 * 5);

    let mut solves = 0usize;
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_excess = f64::NEG_INFINITY;
    for seed in [2u64, 3, 4] {
        for kind in [ControllerKind::Rddpc, ControllerKind::Frddpc] {
            // Noisy closed loop so the sampled solves mirror the Monte Carlo
            // campaign's conditions.
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + kind as u64);
            let mut v1 = ArNoiseModel::new(0.5, BENCH_SIGMA_1);
            let mut v2 = ArNoiseModel::new(0.5, BENCH_SIGMA_2);
            let mut x = DVector::zeros(4);
            let mut sn = || <f64 as From<f32>>::from(StandardNormal.sample(&mut rng));
            let mut past_u: Vec<DVector<f64>> = Vec::new();
            let mut past_y: Vec<DVector<f64>> = Vec::new();
            let mut plant_step = |x: &mut DVector<f64>, u: &DVector<f64>, e1: f64, e2: f64| {
                let y = &plant_model.c * &*x + &plant_model.b_v * e2 + &plant_model.d * u;
                let drive = u.add_scalar(e1);
                *x = &plant_model.a * &*x + &plant_model.b_u * drive;
                y
            };
            for _ in 0..5 {
                let u = DVector::zeros(1);
                let (e1, e2) = (v1.step(sn()), v2.step(sn()));
                let y = plant_step(&mut x, &u, e1, e2);
                past_u.push(u);
                past_y.push(y);
            }
            for t in 0..10 {
                let cfg = benchmark_config(horizon_ref(&wave, t, 5), lambda);
                let u_p = stack(&past_u[past_u.len() - 5..]);
                let y_p = stack(&past_y[past_y.len() - 5..]);
                let sol = match kind {
                    ControllerKind::Rddpc => solve_rddpc(model, &cfg, &u_p, &y_p),
                    _ => solve_frddpc(model, &cfg, &u_p, &y_p),
                }
                .unwrap();
                solves += 1;
                let q_bar = cfg.q_bar();
                let r_bar = cfg.r_bar();
                for w in boundary_ws(model, lambda, 1000, seed * 7919 + t as u64) {
                    let err = &model.m * &w;
                    let (u_real, y_real, cost) = match &sol.policy {
                        Some(pol) => {
                            let u = &pol.v_f + &pol.k * &err;
                            let y = &sol.b + (&eye + &model.m_f * &pol.k) * &err;
                            let c = quad_norm(&(&y - &cfg.y_r), &q_bar) + quad_norm(&u, &r_bar);
                            (u, y, c)
                        }
                        None => {
                            let y = &sol.b + &err;
                            let c = quad_norm(&(&y - &cfg.y_r), &q_bar);
                            (sol.u_f.clone(), y, c)
                        }
                    };
                    for e in &cfg.input_constraints {
                        worst_violation =
                            worst_violation.max((&e.g * &u_real + &e.c).norm_squared() - 1.0);
                    }
                    for e in &cfg.output_constraints {
                        worst_violation =
                            worst_violation.max((&e.g * &y_real + &e.c).norm_squared() - 1.0);
                    }
                    worst_excess = worst_excess.max((cost - sol.psi) / sol.psi.max(1e-12));
                }
                let u = sol.applied(1);
                let (e1, e2) = (v1.step(sn()), v2.step(sn()));
                let y = plant_step(&mut x, &u, e1, e2);
                past_u.push(u);
                past_y.push(y);
            }
        }
    }
    conclude(
        "criterion 4 (boundary sampling of robust solves)",
        worst_violation <= 1e-6 && worst_excess <= 1e-6,
        &format!("{solves} solves x 1000 samples, worst constraint violation {worst_violation:.2e} (tol 1e-6), worst cost excess over psi {worst_excess:.2e} (rel tol 1e-6)"),
    );
}

#[test]
fn criterion_5_monte_carlo_cost_ranking() {
    let _g = gate();
    let t0 = Instant::now();
    let report = mc_report();
    let mean = |n: &str| report.aggregate.get(n).unwrap().mean_j;
    let (spc, rob, fr) = (mean("spc"), mean("rddpc"), mean("frddpc"));

    // PBR's regularization weight has no closed-form tuning rule; pick it by
    // a small validation sweep (larger weights recover SPC), then evaluate
    // over the same paired seeds as the campaign above.
    let config = ExperimentConfig::default();
    let prepared = prepare_data(&config, config.seed.wrapping_add(0xda7a)).unwrap();
    let pbr_mean = |lam: f64, n: u64| -> f64 {
        let js: Vec<f64> = (0..n)
            .map(|i| {
                run_receding_horizon(&config, ControllerKind::Pbr, &prepared, lam, config.seed + i)
                    .unwrap()
                    .j_total
            })
            .collect();
        js.iter().sum::<f64>() / js.len() as f64
    };
    let pbr_lambda = [0.5446, 5.0, 50.0]
        .into_iter()
        .map(|l| (l, pbr_mean(l, 6)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    let pbr = pbr_mean(pbr_lambda, 30);
    let pbr_gap = (pbr - spc).abs() / spc;

    let secs = t0.elapsed().as_secs_f64();
    conclude(
        "criterion 5 (Monte Carlo mean-cost ranking)",
        fr <= rob + 1e-9 && rob < spc && pbr_gap <= 0.05 && secs < 1800.0,
        &format!("30 paired trials: FR {fr:.4} <= R {rob:.4} < SPC {spc:.4}; PBR {pbr:.4} at weight {pbr_lambda} within {:.1}% of SPC (tol 5%); {secs:.0}s (<1800s)", 100.0 * pbr_gap),
    );
}

#[test]
fn criterion_6_lambda_tuning() {
    let _g = gate();
    let clean = bench_data(600, false, 61);
    let model = lti_sim::make_two_mass_model();
    let u = lti_sim::gen_excitation(600, 1.0, 0.01, 600, 62);
    let val = lti_sim::simulate(
        &model,
        &ArNoiseModel::new(0.5, 0.0),
        &ArNoiseModel::new(0.5, 0.0),
        &u,
        &DVector::zeros(4),
        62,
    )
    .unwrap();
    let clean_lambda = tune_lambda(&clean, &slices_from_trajectory(&val, 5, 5)).unwrap();

    let config = ExperimentConfig::default();
    let prepared = prepare_data(&config, config.seed.wrapping_add(0xda7a)).unwrap();
    let tuned = resolve_lambda(&config, &prepared.data).unwrap();
    let in_range = (0.05..=5.0).contains(&tuned);

    let mut gcfg = config.clone();
    gcfg.trials = 8;
    gcfg.controllers = vec![ControllerKind::Rddpc];
    let grid = vec![0.02, tuned, 0.2, 0.5446, 2.0];
    let table = grid_search_lambda(&gcfg, &grid).unwrap();
    let tuned_mean = table
        .rows
        .iter()
        .find(|r| r.lambda == tuned)
        .map(|r| r.mean_j)
        .unwrap();
    let best = table.argmin(ControllerKind::Rddpc).unwrap();
    let near_optimal = tuned_mean <= 1.10 * best.mean_j;
    conclude(
        "criterion 6 (Lambda tuning)",
        clean_lambda <= 1e-10 && in_range && near_optimal,
        &format!("noise-free tuned {clean_lambda:.2e} (tol 1e-10), noisy tuned {tuned:.4} in [0.05,5]: {in_range}, mean J {tuned_mean:.4} vs grid optimum {:.4} at Lambda {} ({:+.1}%)", best.mean_j, best.lambda, 100.0 * (tuned_mean / best.mean_j - 1.0)),
    );
}

#[test]
fn criterion_7_theory_bounds() {
    let _g = gate();
    let config = ExperimentConfig::default();
    let prepared = prepare_data(&config, config.seed.wrapping_add(0xda7a)).unwrap();
    let tuned = resolve_lambda(&config, &prepared.data).unwrap();
    let clean_traj = prepared.trajectory.clean_twin().unwrap();
    let clean = partition(&clean_traj, 5, 5).unwrap();
    // AR(1) with coefficient 1/2 and innovations clipped at 3 sigma stays
    // within 6 sigma.
    let bounds = theorem1_lambda_o(
        &prepared.data,
        &clean,
        4,
        6.0 * BENCH_SIGMA_1,
        6.0 * BENCH_SIGMA_2,
        &DVector::zeros(5),
        &DVector::from_element(5, 0.2),
        &DVector::zeros(20),
    )
    .unwrap();
    let ratio = bounds.lambda_o / tuned;

    let report = mc_report();
    let mut checked = 0usize;
    let mut passed = 0usize;
    for trial in &report.trials {
        for bc in &trial.bound_checks {
            if bc.membership {
                checked += 1;
                if bc.pass {
                    passed += 1;
                }
            }
        }
    }
    conclude(
        "criterion 7 (a-priori bound and cost certificates)",
        ratio >= 1e4 && checked > 0 && passed == checked,
        &format!("Lambda_o {:.2e} / tuned {tuned:.4} = {ratio:.1e} (>=1e4); cost bound passed on {passed}/{checked} membership-verified rollouts", bounds.lambda_o),
    );
}

#[test]
fn criterion_8_solver_time_scaling() {
    let _g = gate();
    let config = ExperimentConfig::default();
    // One solve for the full-LMI SDPs: at N=600 a single uncompressed solve
    // runs ~16 min (R); medians over 10 would take hours for a ratio that is
    // already three orders of magnitude clear of the gate.
    let table = benchmark_solve_times(&config, &[100, 600], 10, 1).unwrap();
    let get = |f: &str, n: usize| table.median(f, n).unwrap();
    let ratio_r = get("r-sdp-full", 600) / get("r-sdp-reduced", 600);
    let ratio_fr = get("fr-sdp-full", 600) / get("fr-sdp-reduced", 600);
    let growth_r = get("r-sdp-reduced", 600) / get("r-sdp-reduced", 100);
    let growth_fr = get("fr-sdp-reduced", 600) / get("fr-sdp-reduced", 100);
    let qp_fastest = [100usize, 600].iter().all(|&n| {
        let qp = get("spc-qp", n).max(get("pbr-qp", n));
        let sdp = get("r-sdp-reduced", n)
            .min(get("fr-sdp-reduced", n))
            .min(get("r-sdp-full", n))
            .min(get("fr-sdp-full", n));
        qp < sdp
    });
    conclude(
        "criterion 8 (solver-time scaling)",
        ratio_r >= 3.0 && ratio_fr >= 3.0 && growth_r < 2.0 && growth_fr < 2.0 && qp_fastest,
        &format!("full/reduced at N=600: R {ratio_r:.0}x, FR {ratio_fr:.0}x (>=3x); reduced growth N=100->600: R {growth_r:.2}x, FR {growth_fr:.2}x (<2x); QPs fastest at every N: {qp_fastest}"),
    );
}

#[test]
fn criterion_9_closed_loop_data_robustness() {
    let _g = gate();
    let mut cfg = ExperimentConfig::default();
    cfg.collection = CollectionSpec::ClosedLoopPid { period: 600, amplitude: 0.4, length: 600 };
    // Online task: step to 0.4 on the first output, constant over the test
    // window.
    cfg.reference = ReferenceSpec { period: 400, amplitude: 0.4, channel: 0 };
    let report = monte_carlo(&cfg, 30, None).unwrap();
    let te = |n: &str| report.aggregate.get(n).unwrap().mean_tracking_error;
    let (spc, pbr, rob, fr) = (te("spc"), te("pbr"), te("rddpc"), te("frddpc"));
    conclude(
        "criterion 9 (closed-loop offline data)",
        rob < spc && rob < pbr && fr < spc && fr < pbr,
        &format!("mean y1 tracking error over 30 trials: R {rob:.4}, FR {fr:.4} vs SPC {spc:.4}, PBR {pbr:.4}"),
    );
}
