//! End-to-end experiment engine: excitation and data collection, the
//! receding-horizon closed loop with noise and delays, the closed-loop cost
//! metric, Monte-Carlo batches, and the decentralized two-subsystem mode.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamat::{is_persistently_exciting, partition, MatrixKind, Trajectory};
use crate::error::{Error, Result};
use crate::plant::{build_swing_surrogate, DelayLine, StateSpaceModel, SwingNetworkSpec};
use crate::predictive::{DeePCConfig, DeePCController, IniBuffer, PemMpcController};
use crate::qp::QpSettings;
use crate::robust::{DisturbanceBox, MinMaxConfig, MinMaxController};

/// Independent, reproducible random streams: one 64-bit seed, one counter
/// per purpose.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_EXCITATION: u64 = 0;
const STREAM_MEASUREMENT: u64 = 1;
const STREAM_LOAD: u64 = 2;

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

/// Band-limited-noise power translated to a per-sample standard deviation.
fn noise_std(power: f64, ts: f64) -> f64 {
    if power <= 0.0 {
        0.0
    } else {
        (power / ts).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    None,
    Deepc,
    PemMpc,
    Minmax,
    DfMinmax,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::None => "none",
            ControllerKind::Deepc => "deepc",
            ControllerKind::PemMpc => "pem-mpc",
            ControllerKind::Minmax => "minmax",
            ControllerKind::DfMinmax => "df-minmax",
        }
    }
}

/// Plant description: either the swing surrogate or explicit matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum PlantConfig {
    Swing {
        ts: f64,
        network: SwingNetworkSpec,
    },
    Explicit(ExplicitModel),
}

/// Hand-written state-space matrices, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitModel {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub e: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub f: Option<Vec<Vec<f64>>>,
    pub ts: f64,
}

fn to_matrix(rows: &[Vec<f64>], what: &'static str) -> Result<nalgebra::DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    for r in rows {
        if r.len() != ncols {
            return Err(Error::dim(what, ncols, r.len()));
        }
    }
    Ok(nalgebra::DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl PlantConfig {
    pub fn build(&self) -> Result<StateSpaceModel> {
        match self {
            PlantConfig::Swing { ts, network } => build_swing_surrogate(network, *ts),
            PlantConfig::Explicit(m) => {
                let a = to_matrix(&m.a, "A rows")?;
                let n = a.nrows();
                let b = to_matrix(&m.b, "B rows")?;
                let c = to_matrix(&m.c, "C rows")?;
                let p = c.nrows();
                let mm = b.ncols();
                let d = match &m.d {
                    Some(d) => to_matrix(d, "D rows")?,
                    None => nalgebra::DMatrix::zeros(p, mm),
                };
                let (e, f) = match (&m.e, &m.f) {
                    (None, None) => (nalgebra::DMatrix::zeros(n, 0), nalgebra::DMatrix::zeros(p, 0)),
                    (e, f) => {
                        let e = match e {
                            Some(e) => to_matrix(e, "E rows")?,
                            None => nalgebra::DMatrix::zeros(n, 0),
                        };
                        let q = e.ncols();
                        let f = match f {
                            Some(f) => to_matrix(f, "F rows")?,
                            None => nalgebra::DMatrix::zeros(p, q),
                        };
                        (e, f)
                    }
                };
                StateSpaceModel::new(a, b, c, d, e, f, m.ts)
            }
        }
    }
}

fn default_lambda_g() -> f64 {
    20.0
}
fn default_lambda_y() -> f64 {
    2000.0
}
fn default_q_weight() -> f64 {
    400.0
}
fn default_r_weight() -> f64 {
    1.0
}
fn default_downsample() -> usize {
    1
}
fn default_vertex_cap() -> usize {
    4096
}
fn default_robust_tol() -> f64 {
    1e-6
}
fn default_robust_max_iter() -> usize {
    500
}
fn default_qp_tol() -> f64 {
    1e-6
}
fn default_qp_max_iter() -> usize {
    20_000
}
fn default_n_assumed() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_matrix_kind() -> MatrixKind {
    MatrixKind::Hankel
}

/// Controller selection and hyperparameters, one-to-one with the scenario
/// file's `controller` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSettings {
    pub kind: ControllerKind,
    #[serde(default)]
    pub t_ini: usize,
    #[serde(default)]
    pub horizon: usize,
    #[serde(default)]
    pub control_horizon: usize,
    #[serde(default = "default_lambda_g")]
    pub lambda_g: f64,
    #[serde(default = "default_lambda_y")]
    pub lambda_y: f64,
    #[serde(default = "default_q_weight")]
    pub q_weight: f64,
    #[serde(default = "default_r_weight")]
    pub r_weight: f64,
    #[serde(default)]
    pub u_min: Option<f64>,
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub y_max: Option<f64>,
    #[serde(default = "default_matrix_kind")]
    pub matrix_kind: MatrixKind,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub allow_hankel_denoise: bool,
    #[serde(default)]
    pub du_weight: f64,
    /// Constant per-output-channel reference; zeros when omitted.
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
    /// Assumed upper bound on the plant order for excitation checks.
    #[serde(default = "default_n_assumed")]
    pub n_assumed: usize,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_max_iter")]
    pub qp_max_iter: usize,
    // Robust-variant knobs.
    #[serde(default)]
    pub w_lo: f64,
    #[serde(default)]
    pub w_hi: f64,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_vertex_cap")]
    pub vertex_cap: usize,
    #[serde(default = "default_robust_tol")]
    pub robust_tol: f64,
    #[serde(default = "default_robust_max_iter")]
    pub robust_max_iter: usize,
    #[serde(default = "default_true")]
    pub fix_x_to_zero: bool,
    #[serde(default)]
    pub sigma_w: Option<f64>,
}

impl ControllerSettings {
    pub fn disabled() -> Self {
        Self {
            kind: ControllerKind::None,
            t_ini: 0,
            horizon: 0,
            control_horizon: 0,
            lambda_g: default_lambda_g(),
            lambda_y: default_lambda_y(),
            q_weight: default_q_weight(),
            r_weight: default_r_weight(),
            u_min: None,
            u_max: None,
            y_min: None,
            y_max: None,
            matrix_kind: default_matrix_kind(),
            sigma0: 0.0,
            allow_hankel_denoise: false,
            du_weight: 0.0,
            reference: None,
            n_assumed: default_n_assumed(),
            qp_tol: default_qp_tol(),
            qp_max_iter: default_qp_max_iter(),
            w_lo: 0.0,
            w_hi: 0.0,
            downsample: default_downsample(),
            vertex_cap: default_vertex_cap(),
            robust_tol: default_robust_tol(),
            robust_max_iter: default_robust_max_iter(),
            fix_x_to_zero: true,
            sigma_w: None,
        }
    }

    fn reference_vector(&self, p: usize, horizon: usize) -> Result<DVector<f64>> {
        match &self.reference {
            None => Ok(DVector::zeros(p * horizon)),
            Some(r) if r.len() == p => {
                Ok(DVector::from_fn(p * horizon, |i, _| r[i % p]))
            }
            Some(r) => Err(Error::dim("reference channels", p, r.len())),
        }
    }

    fn per_sample_reference(&self, p: usize) -> DVector<f64> {
        match &self.reference {
            Some(r) if r.len() == p => DVector::from_fn(p, |i, _| r[i]),
            _ => DVector::zeros(p),
        }
    }

    /// The deterministic-controller configuration for a plant slice with
    /// `m` inputs and `p` outputs.
    pub fn deepc_config(&self, m: usize, p: usize) -> Result<DeePCConfig> {
        let mut cfg = DeePCConfig::new(m, p, self.t_ini, self.horizon, self.control_horizon)
            .with_scalar_weights(m, p, self.q_weight, self.r_weight);
        cfg.lambda_g = self.lambda_g;
        cfg.lambda_y = self.lambda_y;
        cfg.reference = self.reference_vector(p, self.horizon)?;
        cfg.u_min = self.u_min.unwrap_or(f64::NEG_INFINITY);
        cfg.u_max = self.u_max.unwrap_or(f64::INFINITY);
        cfg.y_min = self.y_min.unwrap_or(f64::NEG_INFINITY);
        cfg.y_max = self.y_max.unwrap_or(f64::INFINITY);
        cfg.kind = self.matrix_kind;
        cfg.sigma0 = self.sigma0;
        cfg.allow_hankel_denoise = self.allow_hankel_denoise;
        cfg.du_weight = self.du_weight;
        cfg.solver = QpSettings { tol: self.qp_tol, max_iter: self.qp_max_iter, ..QpSettings::default() };
        cfg.validate(m, p)?;
        Ok(cfg)
    }

    pub fn minmax_config(&self, m: usize, p: usize) -> Result<MinMaxConfig> {
        let base = self.deepc_config(m, p)?;
        let mut bounds = DisturbanceBox::new(self.w_lo, self.w_hi, self.downsample);
        bounds.vertex_cap = self.vertex_cap;
        let mut cfg = MinMaxConfig::new(base, bounds);
        cfg.fix_x_to_zero = self.fix_x_to_zero;
        cfg.sigma_w = self.sigma_w;
        cfg.robust_tol = self.robust_tol;
        cfg.robust_max_iter = self.robust_max_iter;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    /// Excitation phase length in samples.
    pub duration: usize,
    /// Band-limited white-noise power in per-unit.
    pub power: f64,
    /// Base seed for all of the run's random streams.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineConfig {
    pub total_samples: usize,
    pub activation_sample: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub measurement_power: f64,
    #[serde(default)]
    pub load_power: f64,
}

/// One decentralized controller's channel slice: input/output channels it
/// owns and the global output channels it treats as measured disturbances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemConfig {
    pub u_channels: Vec<usize>,
    pub y_channels: Vec<usize>,
    pub w_from_outputs: Vec<usize>,
}

/// A complete closed-loop experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub plant: PlantConfig,
    pub controller: ControllerSettings,
    pub excitation: ExcitationConfig,
    pub timeline: TimelineConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Constant measurement delay in samples.
    #[serde(default)]
    pub delay: usize,
    #[serde(default)]
    pub partition: Option<Vec<SubsystemConfig>>,
    /// Initial plant state; zeros when omitted.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Cost window `[start, end)` in samples; defaults to activation..total.
    #[serde(default)]
    pub cost_window: Option<[usize; 2]>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let t_ini = if self.controller.kind == ControllerKind::None {
            0
        } else {
            self.controller.t_ini
        };
        if self.timeline.activation_sample < self.excitation.duration + t_ini {
            return Err(Error::InvalidParameter(format!(
                "activation sample {} must be at least excitation duration {} plus T_ini {}",
                self.timeline.activation_sample, self.excitation.duration, t_ini
            )));
        }
        if self.timeline.total_samples < self.timeline.activation_sample {
            return Err(Error::InvalidParameter(format!(
                "timeline of {} samples ends before activation at {}",
                self.timeline.total_samples, self.timeline.activation_sample
            )));
        }
        if let Some([a, b]) = self.cost_window {
            if a >= b || b > self.timeline.total_samples {
                return Err(Error::WindowOutOfRange {
                    start: a,
                    end: b,
                    len: self.timeline.total_samples,
                });
            }
        }
        Ok(())
    }

    pub fn cost_window(&self) -> (usize, usize) {
        match self.cost_window {
            Some([a, b]) => (a, b),
            None => (self.timeline.activation_sample, self.timeline.total_samples),
        }
    }

    pub fn initial_state(&self, n: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            None => Ok(DVector::zeros(n)),
            Some(x) if x.len() == n => Ok(DVector::from_column_slice(x)),
            Some(x) => Err(Error::dim("initial state length", n, x.len())),
        }
    }
}

/// Wall-time and status bookkeeping across the run's solves.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub solves: usize,
    pub failures: usize,
    pub total_seconds: f64,
    pub max_seconds: f64,
}

impl SolveStats {
    fn record(&mut self, seconds: f64, ok: bool) {
        self.solves += 1;
        if !ok {
            self.failures += 1;
        }
        self.total_seconds += seconds;
        self.max_seconds = self.max_seconds.max(seconds);
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.total_seconds / self.solves as f64
        }
    }
}

/// Complete logs of one experiment.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Applied inputs, one sample per timeline step.
    pub u: Trajectory,
    /// Measured outputs: delayed by the configured number of samples and
    /// noise-corrupted.
    pub y_measured: Trajectory,
    /// True plant outputs.
    pub y_true: Trajectory,
    /// Injected disturbances (empty channels collapse to a 1-channel zero
    /// record only when the plant actually has disturbance inputs).
    pub w: Option<Trajectory>,
    /// Per-sample reference used for the cost.
    pub reference: DVector<f64>,
    pub q_weight: f64,
    pub r_weight: f64,
    pub ts: f64,
    pub seed: u64,
    pub cost_window: (usize, usize),
    pub closed_loop_cost: f64,
    pub stats: SolveStats,
    /// Set when any controller solve failed and zero input was substituted.
    pub flagged: bool,
    /// Outcome of the excitation sufficiency check after collection.
    pub persistently_exciting: bool,
}

impl RunResult {
    /// Time series export `t,u0..,y0..,w0..` using the measured outputs.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let m = self.u.channels();
        let p = self.y_measured.channels();
        let q = self.w.as_ref().map_or(0, |w| w.channels());
        write!(out, "t")?;
        for ch in 0..m {
            write!(out, ",u{ch}")?;
        }
        for ch in 0..p {
            write!(out, ",y{ch}")?;
        }
        for ch in 0..q {
            write!(out, ",w{ch}")?;
        }
        out.write_all(b"\n")?;
        for t in 0..self.u.len() {
            write!(out, "{}", t as f64 * self.ts)?;
            for ch in 0..m {
                write!(out, ",{}", self.u.data()[t * m + ch])?;
            }
            for ch in 0..p {
                write!(out, ",{}", self.y_measured.data()[t * p + ch])?;
            }
            if let Some(w) = &self.w {
                for ch in 0..q {
                    write!(out, ",{}", w.data()[t * q + ch])?;
                }
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Exact sum of `r_w |u_t|^2 + q_w |y_t - r|^2` over `[start, end)` on the
/// true outputs.
pub fn closed_loop_cost(result: &RunResult, window: (usize, usize)) -> Result<f64> {
    let (start, end) = window;
    if start >= end || end > result.u.len() {
        return Err(Error::WindowOutOfRange { start, end, len: result.u.len() });
    }
    let p = result.y_true.channels();
    let m = result.u.channels();
    let mut total = 0.0;
    for t in start..end {
        for ch in 0..m {
            let v = result.u.data()[t * m + ch];
            total += result.r_weight * v * v;
        }
        for ch in 0..p {
            let v = result.y_true.data()[t * p + ch] - result.reference[ch];
            total += result.q_weight * v * v;
        }
    }
    Ok(total)
}

/// Data collected during the excitation phase, as the controller sees it.
pub struct CollectedData {
    pub u: Trajectory,
    pub y: Trajectory,
    pub w: Option<Trajectory>,
    pub persistently_exciting: bool,
}

/// Run the excitation phase alone: seeded Gaussian excitation on every
/// control channel, with the measured (delayed, noisy) outputs recorded.
/// Fails when the generated record misses the required excitation order.
pub fn collect_data(scenario: &Scenario) -> Result<CollectedData> {
    scenario.validate()?;
    let model = scenario.plant.build()?;
    let mut engine = LoopEngine::new(scenario, &model)?;
    for _ in 0..scenario.excitation.duration {
        engine.step_with(StepMode::Excite);
    }
    let duration = scenario.excitation.duration;
    let u = engine.log_u.slice(0, duration);
    let y = engine.log_y_meas.slice(0, duration);
    let uses_w = matches!(
        scenario.controller.kind,
        ControllerKind::Minmax | ControllerKind::DfMinmax
    );
    let w = if model.disturbance_dim() > 0 {
        Some(engine.log_w_meas.slice(0, duration))
    } else {
        None
    };
    let order = excitation_order(&scenario.controller);
    let check = excitation_check(&u, if uses_w { w.as_ref() } else { None }, order);
    if !check.ok {
        return Err(Error::NotPersistentlyExciting {
            order,
            rank: check.rank,
            rows: check.rows,
        });
    }
    Ok(CollectedData { u, y, w, persistently_exciting: check.ok })
}

enum StepMode {
    Excite,
    Apply(DVector<f64>),
}

/// The shared simulation loop: owns the plant state, noise streams, delay
/// lines, and logs.
struct LoopEngine {
    model: StateSpaceModel,
    state: crate::plant::SimState,
    delay_y: DelayLine,
    delay_w: DelayLine,
    rng_exc: ChaCha8Rng,
    rng_meas: ChaCha8Rng,
    rng_load: ChaCha8Rng,
    exc_std: f64,
    meas_std: f64,
    load_std: f64,
    log_u: Trajectory,
    log_y_meas: Trajectory,
    log_y_true: Trajectory,
    log_w: Trajectory,
    log_w_meas: Trajectory,
    seed: u64,
}

impl LoopEngine {
    fn new(scenario: &Scenario, model: &StateSpaceModel) -> Result<Self> {
        let seed = scenario.excitation.seed;
        let x0 = scenario.initial_state(model.state_dim())?;
        Ok(Self {
            model: model.clone(),
            state: model.initial_state(x0)?,
            delay_y: DelayLine::new(scenario.delay, model.output_dim()),
            delay_w: DelayLine::new(scenario.delay, model.disturbance_dim()),
            rng_exc: rng_for(seed, STREAM_EXCITATION),
            rng_meas: rng_for(seed, STREAM_MEASUREMENT),
            rng_load: rng_for(seed, STREAM_LOAD),
            exc_std: noise_std(scenario.excitation.power, model.ts),
            meas_std: noise_std(scenario.noise.measurement_power, model.ts),
            load_std: noise_std(scenario.noise.load_power, model.ts),
            log_u: Trajectory::empty(model.input_dim()),
            log_y_meas: Trajectory::empty(model.output_dim()),
            log_y_true: Trajectory::empty(model.output_dim()),
            log_w: Trajectory::empty(model.disturbance_dim().max(1)),
            log_w_meas: Trajectory::empty(model.disturbance_dim().max(1)),
            seed,
        })
    }

    /// Advance one sample. Noise streams are drawn in a fixed order so runs
    /// differing only in their controller stay sample-aligned.
    fn step_with(&mut self, mode: StepMode) -> (DVector<f64>, DVector<f64>) {
        let q = self.model.disturbance_dim();
        let m = self.model.input_dim();
        let p = self.model.output_dim();

        let w = DVector::from_fn(q, |_, _| gaussian(&mut self.rng_load, self.load_std));
        let u = match mode {
            StepMode::Excite => {
                DVector::from_fn(m, |_, _| gaussian(&mut self.rng_exc, self.exc_std))
            }
            StepMode::Apply(u) => u,
        };
        let y_true = self.model.step(&mut self.state, &u, &w).expect("validated dimensions");
        let delayed = self.delay_y.push(y_true.clone());
        let y_meas =
            DVector::from_fn(p, |i, _| delayed[i] + gaussian(&mut self.rng_meas, self.meas_std));
        let w_meas = self.delay_w.push(w.clone());

        self.log_u.push(&u).expect("channel counts fixed");
        self.log_y_true.push(&y_true).expect("channel counts fixed");
        self.log_y_meas.push(&y_meas).expect("channel counts fixed");
        if q > 0 {
            self.log_w.push(&w).expect("channel counts fixed");
            self.log_w_meas.push(&w_meas).expect("channel counts fixed");
        } else {
            self.log_w.push(&DVector::zeros(1)).expect("channel counts fixed");
            self.log_w_meas.push(&DVector::zeros(1)).expect("channel counts fixed");
        }
        (u, y_meas)
    }
}

fn excitation_order(settings: &ControllerSettings) -> usize {
    settings.t_ini + settings.horizon + settings.n_assumed
}

struct ExcitationCheck {
    ok: bool,
    rank: usize,
    rows: usize,
}

/// Joint persistency check on inputs plus any live disturbance channels;
/// identically-zero disturbance channels carry no excitation requirement.
fn excitation_check(u: &Trajectory, w: Option<&Trajectory>, order: usize) -> ExcitationCheck {
    let live: Vec<usize> = match w {
        Some(w) => (0..w.channels())
            .filter(|&ch| (0..w.len()).any(|t| w.data()[t * w.channels() + ch] != 0.0))
            .collect(),
        None => Vec::new(),
    };
    let joint = if live.is_empty() {
        u.clone()
    } else {
        let w = w.expect("live channels imply data");
        Trajectory::from_fn(u.channels() + live.len(), u.len(), |t, ch| {
            if ch < u.channels() {
                u.data()[t * u.channels() + ch]
            } else {
                w.data()[t * w.channels() + live[ch - u.channels()]]
            }
        })
    };
    let ok = is_persistently_exciting(&joint, order);
    let (rank, rows) = if ok {
        (joint.channels() * order, joint.channels() * order)
    } else {
        match crate::datamat::hankel(&joint, order) {
            Ok(h) => (crate::linalg::numerical_rank(&h, crate::linalg::RANK_REL_TOL), h.nrows()),
            Err(_) => (0, joint.channels() * order),
        }
    };
    ExcitationCheck { ok, rank, rows }
}

enum AnyController {
    Deepc(DeePCController),
    Pem(PemMpcController),
    Robust(MinMaxController),
}

impl AnyController {
    fn step(&mut self, ini: &IniBuffer) -> Result<DVector<f64>> {
        match self {
            AnyController::Deepc(c) => Ok(c.step(ini)?.inputs),
            AnyController::Pem(c) => Ok(c.step(ini)?.inputs),
            AnyController::Robust(c) => Ok(c.step(ini)?.inputs),
        }
    }
}

/// Run the full timeline: excitation, idle fill-in, then receding-horizon
/// control every `k` samples. Solver failures zero the affected block and
/// flag the result instead of aborting.
pub fn run_closed_loop(scenario: &Scenario) -> Result<RunResult> {
    scenario.validate()?;
    if scenario.partition.is_some() {
        return run_decentralized(scenario);
    }
    let model = scenario.plant.build()?;
    let settings = &scenario.controller;
    let kind = settings.kind;
    let m = model.input_dim();
    let p = model.output_dim();
    let q = model.disturbance_dim();
    let uses_w = matches!(kind, ControllerKind::Minmax | ControllerKind::DfMinmax);
    if uses_w && q == 0 {
        return Err(Error::InvalidParameter(
            "min-max control needs a plant with disturbance channels".into(),
        ));
    }

    let mut engine = LoopEngine::new(scenario, &model)?;
    let t_exc = scenario.excitation.duration;
    let t_act = scenario.timeline.activation_sample;
    let total = scenario.timeline.total_samples;

    // Excitation phase.
    for _ in 0..t_exc.min(total) {
        engine.step_with(StepMode::Excite);
    }

    // Dataset and controller assembly.
    let mut stats = SolveStats::default();
    let mut flagged = false;
    let mut controller: Option<AnyController> = None;
    let mut ini = IniBuffer::new(settings.t_ini.max(1), m, p, if uses_w { q } else { 0 });
    let mut persistently_exciting = true;

    if kind != ControllerKind::None {
        let u_d = engine.log_u.slice(0, t_exc);
        let y_d = engine.log_y_meas.slice(0, t_exc);
        let w_d = if uses_w { Some(engine.log_w_meas.slice(0, t_exc)) } else { None };
        let order = excitation_order(settings);
        let check = excitation_check(&u_d, if uses_w { w_d.as_ref() } else { None }, order);
        persistently_exciting = check.ok;
        if !persistently_exciting {
            return Err(Error::NotPersistentlyExciting {
                order,
                rank: check.rank,
                rows: check.rows,
            });
        }
        let blocks = partition(
            &u_d,
            &y_d,
            w_d.as_ref(),
            settings.t_ini,
            settings.horizon,
            settings.matrix_kind,
        )?;
        controller = Some(match kind {
            ControllerKind::Deepc => {
                AnyController::Deepc(DeePCController::new(blocks, settings.deepc_config(m, p)?)?)
            }
            ControllerKind::PemMpc => {
                AnyController::Pem(PemMpcController::new(&blocks, settings.deepc_config(m, p)?)?)
            }
            ControllerKind::Minmax => {
                AnyController::Robust(MinMaxController::new(blocks, settings.minmax_config(m, p)?, false)?)
            }
            ControllerKind::DfMinmax => {
                AnyController::Robust(MinMaxController::new(blocks, settings.minmax_config(m, p)?, true)?)
            }
            ControllerKind::None => unreachable!(),
        });
    }

    // Idle then controlled phases.
    let k = settings.control_horizon.max(1);
    let mut plan: Option<DVector<f64>> = None;
    let mut plan_at = 0usize;
    for t in t_exc..total {
        let u = if t < t_act || kind == ControllerKind::None {
            DVector::zeros(m)
        } else {
            if (t - t_act) % k == 0 {
                let started = Instant::now();
                plan = match controller.as_mut().expect("controller present").step(&ini) {
                    Ok(inputs) => {
                        stats.record(started.elapsed().as_secs_f64(), true);
                        Some(inputs)
                    }
                    Err(_) => {
                        stats.record(started.elapsed().as_secs_f64(), false);
                        flagged = true;
                        None
                    }
                };
                plan_at = t;
            }
            match &plan {
                Some(inputs) => inputs.rows((t - plan_at) * m, m).into_owned(),
                None => DVector::zeros(m),
            }
        };
        let (u_applied, y_meas) = engine.step_with(StepMode::Apply(u));
        let w_meas = engine.log_w_meas.sample(engine.log_w_meas.len() - 1);
        let w_for_ini = if uses_w { Some(w_meas) } else { None };
        ini.push_sample(&u_applied, &y_meas, w_for_ini.as_ref()).expect("dimensions fixed");
    }

    finish_run(scenario, &model, engine, stats, flagged, persistently_exciting)
}

fn finish_run(
    scenario: &Scenario,
    model: &StateSpaceModel,
    engine: LoopEngine,
    stats: SolveStats,
    flagged: bool,
    persistently_exciting: bool,
) -> Result<RunResult> {
    let window = scenario.cost_window();
    let mut result = RunResult {
        u: engine.log_u,
        y_measured: engine.log_y_meas,
        y_true: engine.log_y_true,
        w: if model.disturbance_dim() > 0 { Some(engine.log_w) } else { None },
        reference: scenario.controller.per_sample_reference(model.output_dim()),
        q_weight: scenario.controller.q_weight,
        r_weight: scenario.controller.r_weight,
        ts: model.ts,
        seed: engine.seed,
        cost_window: window,
        closed_loop_cost: 0.0,
        stats,
        flagged,
        persistently_exciting,
    };
    result.closed_loop_cost = closed_loop_cost(&result, window)?;
    Ok(result)
}

/// Decentralized mode: independent robust controllers on channel slices of
/// the shared plant, each treating designated measured outputs as its
/// disturbance signals.
pub fn run_decentralized(scenario: &Scenario) -> Result<RunResult> {
    scenario.validate()?;
    let subsystems = scenario
        .partition
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("decentralized run needs a partition".into()))?;
    let settings = &scenario.controller;
    if !matches!(settings.kind, ControllerKind::Minmax | ControllerKind::DfMinmax) {
        return Err(Error::InvalidParameter(
            "decentralized mode runs min-max controllers; pick minmax or df-minmax".into(),
        ));
    }
    let df = settings.kind == ControllerKind::DfMinmax;
    let model = scenario.plant.build()?;
    let m = model.input_dim();
    let p = model.output_dim();
    for sub in subsystems {
        for &ch in &sub.u_channels {
            if ch >= m {
                return Err(Error::dim("partition input channel", m, ch));
            }
        }
        for &ch in sub.y_channels.iter().chain(&sub.w_from_outputs) {
            if ch >= p {
                return Err(Error::dim("partition output channel", p, ch));
            }
        }
    }

    let mut engine = LoopEngine::new(scenario, &model)?;
    let t_exc = scenario.excitation.duration;
    let t_act = scenario.timeline.activation_sample;
    let total = scenario.timeline.total_samples;
    for _ in 0..t_exc.min(total) {
        engine.step_with(StepMode::Excite);
    }

    let u_d = engine.log_u.slice(0, t_exc);
    let y_d = engine.log_y_meas.slice(0, t_exc);
    let order = excitation_order(settings);
    let mut controllers = Vec::new();
    let mut inis = Vec::new();
    let persistently_exciting = true;
    for sub in subsystems {
        let u_s = u_d.select_channels(&sub.u_channels)?;
        let y_s = y_d.select_channels(&sub.y_channels)?;
        let w_s = y_d.select_channels(&sub.w_from_outputs)?;
        let check = excitation_check(&u_s, Some(&w_s), order);
        if !check.ok {
            return Err(Error::NotPersistentlyExciting {
                order,
                rank: check.rank,
                rows: check.rows,
            });
        }
        let blocks =
            partition(&u_s, &y_s, Some(&w_s), settings.t_ini, settings.horizon, settings.matrix_kind)?;
        let cfg = settings.minmax_config(sub.u_channels.len(), sub.y_channels.len())?;
        controllers.push(MinMaxController::new(blocks, cfg, df)?);
        inis.push(IniBuffer::new(
            settings.t_ini,
            sub.u_channels.len(),
            sub.y_channels.len(),
            sub.w_from_outputs.len(),
        ));
    }

    let mut stats = SolveStats::default();
    let mut flagged = false;
    let k = settings.control_horizon.max(1);
    let mut plans: Vec<Option<DVector<f64>>> = vec![None; subsystems.len()];
    let mut plan_at = 0usize;

    for t in t_exc..total {
        let mut u = DVector::zeros(m);
        if t >= t_act {
            if (t - t_act) % k == 0 {
                plan_at = t;
                // Fixed subsystem order keeps the run deterministic.
                for (ix, ctrl) in controllers.iter_mut().enumerate() {
                    let started = Instant::now();
                    match ctrl.step(&inis[ix]) {
                        Ok(sol) => {
                            stats.record(started.elapsed().as_secs_f64(), true);
                            plans[ix] = Some(sol.inputs);
                        }
                        Err(_) => {
                            stats.record(started.elapsed().as_secs_f64(), false);
                            flagged = true;
                            plans[ix] = None;
                        }
                    }
                }
            }
            for (ix, sub) in subsystems.iter().enumerate() {
                if let Some(plan) = &plans[ix] {
                    let m_s = sub.u_channels.len();
                    for (local, &global) in sub.u_channels.iter().enumerate() {
                        u[global] = plan[(t - plan_at) * m_s + local];
                    }
                }
            }
        }
        let (u_applied, y_meas) = engine.step_with(StepMode::Apply(u));
        for (ix, sub) in subsystems.iter().enumerate() {
            let u_s = DVector::from_fn(sub.u_channels.len(), |i, _| u_applied[sub.u_channels[i]]);
            let y_s = DVector::from_fn(sub.y_channels.len(), |i, _| y_meas[sub.y_channels[i]]);
            let w_s = DVector::from_fn(sub.w_from_outputs.len(), |i, _| y_meas[sub.w_from_outputs[i]]);
            inis[ix].push_sample(&u_s, &y_s, Some(&w_s)).expect("dimensions fixed");
        }
    }

    finish_run(scenario, &model, engine, stats, flagged, persistently_exciting)
}

/// Per-trial outcome of a Monte-Carlo batch.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub cost: Option<f64>,
    pub flagged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub trials: Vec<TrialOutcome>,
    pub median_cost: Option<f64>,
    pub failures: usize,
}

impl BatchResult {
    /// Histogram of finished costs over `bins` equal-width buckets.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let costs: Vec<f64> = self.trials.iter().filter_map(|t| t.cost).collect();
        if costs.is_empty() || bins == 0 {
            return Vec::new();
        }
        let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let mut out: Vec<(f64, f64, usize)> = (0..bins)
            .map(|i| (lo + i as f64 * width, lo + (i + 1) as f64 * width, 0))
            .collect();
        for c in costs {
            let ix = (((c - lo) / width) as usize).min(bins - 1);
            out[ix].2 += 1;
        }
        out
    }
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Repeat the scenario with seeds `seed_base + i`; trials run in parallel
/// with independent random streams. Flagged trials stay out of the median.
pub fn monte_carlo(scenario: &Scenario, trials: usize, seed_base: u64) -> Result<BatchResult> {
    if trials == 0 {
        return Err(Error::InvalidParameter("at least one trial required".into()));
    }
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut s = scenario.clone();
            s.excitation.seed = seed_base + i as u64;
            match run_closed_loop(&s) {
                Ok(run) => TrialOutcome {
                    seed: s.excitation.seed,
                    cost: Some(run.closed_loop_cost),
                    flagged: run.flagged,
                    error: None,
                },
                Err(e) => TrialOutcome {
                    seed: s.excitation.seed,
                    cost: None,
                    flagged: true,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut usable: Vec<f64> =
        outcomes.iter().filter(|t| !t.flagged).filter_map(|t| t.cost).collect();
    let failures = outcomes.iter().filter(|t| t.error.is_some()).count();
    Ok(BatchResult { median_cost: median(&mut usable), trials: outcomes, failures })
}

/// Dominant-oscillation estimate from log-peak regression on the rectified
/// signal.
#[derive(Debug, Clone, Copy)]
pub struct DampingEstimate {
    pub frequency_hz: f64,
    pub damping_ratio: f64,
    /// Exponential decay rate sigma in 1/s (positive for decaying signals).
    pub decay_rate: f64,
}

pub fn estimate_damping(signal: &[f64], ts: f64) -> Option<DampingEstimate> {
    let n = signal.len();
    if n < 8 {
        return None;
    }
    let amax = signal.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if amax <= 0.0 {
        return None;
    }
    let floor = 1e-6 * amax;
    // Peaks of the rectified signal, one per half period.
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 1..n - 1 {
        let v = signal[i].abs();
        if v > floor && v >= signal[i - 1].abs() && v >= signal[i + 1].abs() {
            if let Some(&(last_t, _)) = peaks.last() {
                if (i as f64 * ts - last_t) < 2.0 * ts {
                    continue;
                }
            }
            peaks.push((i as f64 * ts, v));
        }
    }
    if peaks.len() < 4 {
        return None;
    }
    // Least-squares line through (t, ln peak).
    let k = peaks.len() as f64;
    let mean_t = peaks.iter().map(|p| p.0).sum::<f64>() / k;
    let mean_l = peaks.iter().map(|p| p.1.ln()).sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in &peaks {
        num += (t - mean_t) * (v.ln() - mean_l);
        den += (t - mean_t) * (t - mean_t);
    }
    if den <= 0.0 {
        return None;
    }
    let slope = num / den;
    let decay_rate = -slope;
    // Rectified peaks arrive twice per period.
    let spacing = (peaks.last().unwrap().0 - peaks[0].0) / (peaks.len() - 1) as f64;
    let omega = std::f64::consts::PI / spacing;
    let frequency_hz = omega / (2.0 * std::f64::consts::PI);
    let damping_ratio = decay_rate / (decay_rate * decay_rate + omega * omega).sqrt();
    Some(DampingEstimate { frequency_hz, damping_ratio, decay_rate })
}

/// Key-value summary document for a finished run.
pub fn write_summary<W: Write>(
    result: &RunResult,
    scenario: &Scenario,
    out: &mut W,
) -> Result<()> {
    let scenario_json = serde_json::to_string(scenario)
        .map_err(|e| Error::InvalidParameter(format!("scenario echo failed: {e}")))?;
    writeln!(out, "scenario = {scenario_json}")?;
    writeln!(out, "seed = {}", result.seed)?;
    writeln!(out, "samples = {}", result.u.len())?;
    writeln!(out, "sampling_period_s = {}", result.ts)?;
    writeln!(out, "cost_window = {}..{}", result.cost_window.0, result.cost_window.1)?;
    writeln!(out, "closed_loop_cost = {}", result.closed_loop_cost)?;
    writeln!(out, "persistently_exciting = {}", result.persistently_exciting)?;
    writeln!(out, "flagged = {}", result.flagged)?;
    writeln!(out, "solver_solves = {}", result.stats.solves)?;
    writeln!(out, "solver_failures = {}", result.stats.failures)?;
    writeln!(out, "solver_mean_ms = {}", result.stats.mean_seconds() * 1e3)?;
    writeln!(out, "solver_max_ms = {}", result.stats.max_seconds * 1e3)?;
    Ok(())
}


#[cfg(test)]
mod probe {
    use super::*;
    #[test]
    #[ignore]
    fn damping_probe() {
        for (name, x0, ch, skip) in [
            ("theta1 kick, P1", vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0usize, 0usize),
            ("theta1 kick, P1, skip", vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0, 1000),
            ("theta3 kick, P2", vec![0.0, 0.0, -0.05, 0.0, 0.0, 0.0, 0.0], 1, 0),
            ("mixed kick, P3", vec![0.05, 0.02, -0.03, 0.0, 0.0, 0.0, 0.0], 2, 0),
            ("mixed kick, P1 skip", vec![0.05, 0.02, -0.03, 0.0, 0.0, 0.0, 0.0], 0, 1000),
            ("antisym kick, P3", vec![0.05, 0.05, 0.05, 0.0, 0.0, 0.0, 0.0], 2, 0),
        ] {
            let mut controller = ControllerSettings::disabled();
            controller.kind = ControllerKind::None;
            let s = Scenario {
                plant: PlantConfig::Swing { ts: 0.02, network: SwingNetworkSpec::default_four_machine() },
                controller,
                excitation: ExcitationConfig { duration: 0, power: 0.0, seed: 1 },
                timeline: TimelineConfig { total_samples: 4000, activation_sample: 0 },
                noise: NoiseConfig::default(),
                delay: 0,
                partition: None,
                x0: Some(x0),
                cost_window: None,
            };
            let run = run_closed_loop(&s).unwrap();
            let sig: Vec<f64> = (skip..run.y_true.len()).map(|t| run.y_true.data()[t * 3 + ch]).collect();
            match estimate_damping(&sig, 0.02) {
                Some(e) => println!("{name:24} f={:.4} Hz zeta={:.4}", e.frequency_hz, e.damping_ratio),
                None => println!("{name:24} no estimate"),
            }
        }
    }
}
