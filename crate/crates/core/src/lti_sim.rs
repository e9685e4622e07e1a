//! Ground-truth plant simulation: the two-mass-spring-damper benchmark,
//! AR(1)-colored truncated-Gaussian noise, excitation signals, and a PID
//! loop for closed-loop data collection.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Discrete-time state-space plant used as simulation ground truth.
///
/// `x(t+1) = A x(t) + B_u (u(t) + v1(t))`, `y(t) = C x(t) + B_v v2(t)`,
/// where `v1`, `v2` are scalar colored-noise channels.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub b_v: DVector<f64>,
    pub d: DMatrix<f64>,
    pub dt: f64,
}

impl SystemModel {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        if self.a.ncols() != n_x
            || self.b_u.nrows() != n_x
            || self.c.ncols() != n_x
            || self.b_v.len() != n_y
            || self.d.nrows() != n_y
            || self.d.ncols() != n_u
        {
            return Err(SimError::Dimension("inconsistent state-space shapes".into()));
        }
        Ok(())
    }
}

/// Two-mass-spring-damper benchmark plant: k1=4, k2=4, b1=1.5, b2=2,
/// m1=1.2, m2=2, dt=0.1, C=I4.
pub fn make_two_mass_model() -> SystemModel {
    two_mass_model(4.0, 4.0, 1.5, 2.0, 1.2, 2.0, 0.1)
}

/// Euler-discretized two-mass-spring-damper with arbitrary parameters.
pub fn two_mass_model(
    k1: f64,
    k2: f64,
    b1: f64,
    b2: f64,
    m1: f64,
    m2: f64,
    dt: f64,
) -> SystemModel {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0,
            0.0,
            dt,
            0.0,
            0.0,
            1.0,
            0.0,
            dt,
            -k1 / m1 * dt,
            k1 / m1 * dt,
            1.0 - b1 / m1 * dt,
            b1 / m1 * dt,
            k1 / m2 * dt,
            -(k1 + k2) / m2 * dt,
            b1 / m2 * dt,
            1.0 - (b1 + b2) / m2 * dt,
        ],
    );
    let b_u = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, dt / m1, 0.0]);
    let b_v = DVector::from_column_slice(&[0.5, 1.0, 0.4, 0.3]);
    SystemModel {
        a,
        b_u,
        c: DMatrix::identity(4, 4),
        b_v,
        d: DMatrix::zeros(4, 1),
        dt,
    }
}

/// Benchmark noise levels from the simulation study: sigma1 for the input
/// disturbance channel, sigma2 for the measurement channel.
pub const BENCH_SIGMA_1: f64 = 0.01;
pub const BENCH_SIGMA_2: f64 = 0.019;

/// AR(1) noise with truncated Gaussian innovations:
/// `v(t) = coeff * v(t-1) + e(t)`, `|e(t)| <= truncation * sigma`.
#[derive(Debug, Clone)]
pub struct ArNoiseModel {
    pub coeff: f64,
    pub sigma: f64,
    pub truncation: f64,
    pub state: f64,
}

impl ArNoiseModel {
    pub fn new(coeff: f64, sigma: f64) -> Self {
        Self { coeff, sigma, truncation: 3.0, state: 0.0 }
    }

    /// Advance one step given a raw standard-normal draw; the scaled
    /// innovation is clamped to `±truncation*sigma` before accumulation.
    pub fn step(&mut self, rng_draw: f64) -> f64 {
        let bound = self.truncation * self.sigma;
        let e = (self.sigma * rng_draw).clamp(-bound, bound);
        self.state = self.coeff * self.state + e;
        self.state
    }

    pub fn reset(&mut self) {
        self.state = 0.0;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// Benchmark PID gains used for closed-loop data collection.
pub fn benchmark_pid() -> PidGains {
    PidGains { kp: 1.91, ki: 0.917, kd: 0.93 }
}

/// Recorded input-output data. `states` and `noiseless_outputs` are only
/// populated by the simulator; the noiseless twin is the response to the
/// same input sequence with both noise channels zeroed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub states: Option<Vec<DVector<f64>>>,
    pub noiseless_outputs: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The same trajectory with noisy outputs replaced by the noiseless twin.
    pub fn clean_twin(&self) -> Option<Trajectory> {
        self.noiseless_outputs.as_ref().map(|clean| Trajectory {
            inputs: self.inputs.clone(),
            outputs: clean.clone(),
            states: None,
            noiseless_outputs: None,
        })
    }

    /// CSV export: header `t,u_1..,y_1..`, one row per step. When the
    /// noiseless twin exists it is written to `<path>.clean.csv`.
    pub fn to_csv(&self, path: &Path) -> Result<(), SimError> {
        write_csv(path, &self.inputs, &self.outputs)?;
        if let Some(clean) = &self.noiseless_outputs {
            let mut p = path.as_os_str().to_owned();
            p.push(".clean.csv");
            write_csv(Path::new(&p), &self.inputs, clean)?;
        }
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<Trajectory, SimError> {
        let (inputs, outputs) = read_csv(path)?;
        let mut clean_path = path.as_os_str().to_owned();
        clean_path.push(".clean.csv");
        let clean_path = Path::new(&clean_path).to_owned();
        let noiseless_outputs = if clean_path.exists() {
            Some(read_csv(&clean_path)?.1)
        } else {
            None
        };
        Ok(Trajectory { inputs, outputs, states: None, noiseless_outputs })
    }
}

fn write_csv(path: &Path, inputs: &[DVector<f64>], outputs: &[DVector<f64>]) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n_u = inputs.first().map_or(0, |u| u.len());
    let n_y = outputs.first().map_or(0, |y| y.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_u).map(|i| format!("u_{i}")));
    header.extend((1..=n_y).map(|i| format!("y_{i}")));
    writeln!(f, "{}", header.join(","))?;
    for (t, (u, y)) in inputs.iter().zip(outputs).enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(u.iter().map(|v| format!("{v:.17e}")));
        row.extend(y.iter().map(|v| format!("{v:.17e}")));
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), SimError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SimError::Csv(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| SimError::Csv(e.to_string()))?.clone();
    let n_u = headers.iter().filter(|h| h.starts_with("u_")).count();
    let n_y = headers.iter().filter(|h| h.starts_with("y_")).count();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SimError::Csv(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| SimError::Csv(e.to_string())))
            .collect::<Result<_, _>>()?;
        if vals.len() != n_u + n_y {
            return Err(SimError::Csv("row width does not match header".into()));
        }
        inputs.push(DVector::from_column_slice(&vals[..n_u]));
        outputs.push(DVector::from_column_slice(&vals[n_u..]));
    }
    Ok((inputs, outputs))
}

/// Simulate the plant under the given input sequence with seeded AR noise
/// on both channels. Records states and the noiseless twin driven by the
/// same inputs (v1 = v2 = 0), which theory checks rely on.
pub fn simulate(
    model: &SystemModel,
    noise_u: &ArNoiseModel,
    noise_y: &ArNoiseModel,
    inputs: &[DVector<f64>],
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory, SimError> {
    model.validate()?;
    if inputs.is_empty() {
        return Err(SimError::Dimension("empty input sequence".into()));
    }
    if inputs[0].len() != model.n_u() || x0.len() != model.n_x() {
        return Err(SimError::Dimension("input/state dimension mismatch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nu = noise_u.clone();
    let mut ny = noise_y.clone();
    nu.reset();
    ny.reset();

    let mut x = x0.clone();
    let mut x_clean = x0.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut clean_outputs = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for u in inputs {
        let v1 = nu.step(StandardNormal.sample(&mut rng));
        let v2 = ny.step(StandardNormal.sample(&mut rng));
        let y = &model.c * &x + &model.b_v * v2 + &model.d * u;
        let y_clean = &model.c * &x_clean + &model.d * u;
        states.push(x.clone());
        outputs.push(y);
        clean_outputs.push(y_clean);
        let disturbed = u + DVector::from_element(u.len(), v1);
        x = &model.a * &x + &model.b_u * &disturbed;
        x_clean = &model.a * &x_clean + &model.b_u * u;
    }
    Ok(Trajectory {
        inputs: inputs.to_vec(),
        outputs,
        states: Some(states),
        noiseless_outputs: Some(clean_outputs),
    })
}

/// Square-wave excitation plus zero-mean Gaussian perturbation. The wave
/// starts at `+amplitude` at t=0 and toggles every `period/2` steps.
pub fn gen_excitation(
    period: usize,
    amplitude: f64,
    noise_var: f64,
    length: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    assert!(period > 0 && length > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = noise_var.sqrt();
    (0..length)
        .map(|t| {
            let phase = (t % period) < period.div_ceil(2);
            let base = if phase { amplitude } else { -amplitude };
            let n: f64 = StandardNormal.sample(&mut rng);
            DVector::from_element(1, base + std * n)
        })
        .collect()
}

/// Square reference for a single output channel.
pub fn square_reference(period: usize, amplitude: f64, length: usize) -> Vec<f64> {
    (0..length)
        .map(|t| {
            if (t % period) < period.div_ceil(2) {
                amplitude
            } else {
                -amplitude
            }
        })
        .collect()
}

/// Closed-loop data collection with a discrete positional PID acting on
/// `reference - y_1`. Integral accumulates at dt; derivative acts on the
/// measurement to avoid setpoint kicks.
pub fn collect_closed_loop(
    model: &SystemModel,
    noise_u: &ArNoiseModel,
    noise_y: &ArNoiseModel,
    pid: &PidGains,
    reference: &[f64],
    length: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    model.validate()?;
    assert!(reference.len() >= length, "reference shorter than run length");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nu = noise_u.clone();
    let mut ny = noise_y.clone();
    nu.reset();
    ny.reset();

    let dt = model.dt;
    let mut x = DVector::zeros(model.n_x());
    let mut x_clean = x.clone();
    let mut integral = 0.0;
    let mut prev_y1: Option<f64> = None;
    let mut inputs = Vec::with_capacity(length);
    let mut outputs = Vec::with_capacity(length);
    let mut clean_outputs = Vec::with_capacity(length);
    for t in 0..length {
        let v1 = nu.step(StandardNormal.sample(&mut rng));
        let v2 = ny.step(StandardNormal.sample(&mut rng));
        let y = &model.c * &x + &model.b_v * v2;
        let y_clean = &model.c * &x_clean;
        let y1 = y[0];
        let e = reference[t] - y1;
        integral += e * dt;
        let deriv = match prev_y1 {
            Some(p) => -(y1 - p) / dt,
            None => 0.0,
        };
        prev_y1 = Some(y1);
        let u_val = pid.kp * e + pid.ki * integral + pid.kd * deriv;
        let u = DVector::from_element(model.n_u(), u_val);
        outputs.push(y);
        clean_outputs.push(y_clean);
        inputs.push(u.clone());
        let disturbed = &u + DVector::from_element(u.len(), v1);
        x = &model.a * &x + &model.b_u * &disturbed;
        x_clean = &model.a * &x_clean + &model.b_u * &u;
    }
    Ok(Trajectory { inputs, outputs, states: None, noiseless_outputs: Some(clean_outputs) })
}
