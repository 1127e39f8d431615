//! Discrete-time LTI plant engine with disturbance channels, plus a reduced
//! multi-machine swing-equation surrogate for inter-area oscillation studies.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamat::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, RANK_REL_TOL};

/// Discrete-time LTI model
/// `x+ = A x + B u + E w`, `y = C x + D u + F w`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    /// Sampling period in seconds.
    pub ts: f64,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let (n, m, p, q) = (a.nrows(), b.ncols(), c.nrows(), e.ncols());
        if a.ncols() != n {
            return Err(Error::dim("A must be square", n, a.ncols()));
        }
        if b.nrows() != n {
            return Err(Error::dim("B rows", n, b.nrows()));
        }
        if c.ncols() != n {
            return Err(Error::dim("C columns", n, c.ncols()));
        }
        if d.nrows() != p || d.ncols() != m {
            return Err(Error::dim("D shape", p * m, d.nrows() * d.ncols()));
        }
        if e.nrows() != n {
            return Err(Error::dim("E rows", n, e.nrows()));
        }
        if f.nrows() != p || f.ncols() != q {
            return Err(Error::dim("F shape", p * q, f.nrows() * f.ncols()));
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling period must be positive, got {ts}"
            )));
        }
        Ok(Self { a, b, c, d, e, f, ts })
    }

    /// Model without disturbance channels (`q = 0`).
    pub fn without_disturbance(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        let p = c.nrows();
        Self::new(a, b, c, d, DMatrix::zeros(n, 0), DMatrix::zeros(p, 0), ts)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn initial_state(&self, x0: DVector<f64>) -> Result<SimState> {
        if x0.len() != self.state_dim() {
            return Err(Error::dim("initial state length", self.state_dim(), x0.len()));
        }
        Ok(SimState { x: x0, t: 0 })
    }

    /// Advance one sample: emits `y_t` and moves the state to `t + 1`.
    pub fn step(&self, state: &mut SimState, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.input_dim() {
            return Err(Error::dim("input length", self.input_dim(), u.len()));
        }
        if w.len() != self.disturbance_dim() {
            return Err(Error::dim("disturbance length", self.disturbance_dim(), w.len()));
        }
        let y = &self.c * &state.x + &self.d * u + &self.f * w;
        state.x = &self.a * &state.x + &self.b * u + &self.e * w;
        state.t += 1;
        Ok(y)
    }

    /// Batch simulation from `x0` under the given input (and optional
    /// disturbance) sequences. Equivalent to repeated [`StateSpaceModel::step`].
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        u_seq: &Trajectory,
        w_seq: Option<&Trajectory>,
    ) -> Result<Trajectory> {
        if u_seq.channels() != self.input_dim() {
            return Err(Error::dim("input channels", self.input_dim(), u_seq.channels()));
        }
        if let Some(w) = w_seq {
            if w.channels() != self.disturbance_dim() {
                return Err(Error::dim("disturbance channels", self.disturbance_dim(), w.channels()));
            }
            if w.len() != u_seq.len() {
                return Err(Error::dim("disturbance length", u_seq.len(), w.len()));
            }
        } else if self.disturbance_dim() != 0 {
            return Err(Error::dim("disturbance channels", self.disturbance_dim(), 0));
        }
        let mut state = self.initial_state(x0.clone())?;
        let zero_w = DVector::zeros(self.disturbance_dim());
        let mut out = Trajectory::empty(self.output_dim());
        for t in 0..u_seq.len() {
            let u = u_seq.sample(t);
            let y = match w_seq {
                Some(w) => self.step(&mut state, &u, &w.sample(t))?,
                None => self.step(&mut state, &u, &zero_w)?,
            };
            out.push(&y)?;
        }
        Ok(out)
    }

    /// Smallest `l` such that `col(C, CA, ..., CA^{l-1})` has rank `n`.
    pub fn lag(&self) -> Result<usize> {
        compute_lag(&self.a, &self.c)
    }
}

/// Smallest observability index of the pair `(A, C)`.
pub fn compute_lag(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<usize> {
    let n = a.nrows();
    let p = c.nrows();
    if n == 0 {
        return Ok(0);
    }
    let mut obs = DMatrix::zeros(p * n, n);
    let mut block = c.clone();
    for depth in 1..=n {
        obs.rows_mut((depth - 1) * p, p).copy_from(&block);
        let rank = numerical_rank(&obs.rows(0, depth * p).into_owned(), RANK_REL_TOL);
        if rank == n {
            return Ok(depth);
        }
        if depth == n {
            return Err(Error::Unobservable { rank, n });
        }
        block = &block * a;
    }
    unreachable!()
}

/// Evolving simulation state: current state vector and time index.
#[derive(Debug, Clone)]
pub struct SimState {
    pub x: DVector<f64>,
    pub t: usize,
}

/// Constant transport delay of `d` samples applied to a vector signal.
/// Outputs zero for the first `d` samples.
#[derive(Debug, Clone)]
pub struct DelayLine {
    buffer: VecDeque<DVector<f64>>,
}

impl DelayLine {
    pub fn new(delay: usize, channels: usize) -> Self {
        let mut buffer = VecDeque::with_capacity(delay + 1);
        for _ in 0..delay {
            buffer.push_back(DVector::zeros(channels));
        }
        Self { buffer }
    }

    /// Push the sample at time `t`, receive the sample from time `t - d`.
    pub fn push(&mut self, sample: DVector<f64>) -> DVector<f64> {
        self.buffer.push_back(sample);
        self.buffer.pop_front().expect("delay buffer is never empty after push")
    }
}

/// Continuous-time LTI model, the intermediate form produced by the swing
/// surrogate builder before zero-order-hold sampling.
#[derive(Debug, Clone)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl ContinuousModel {
    /// Exact zero-order-hold discretization via the matrix exponential of the
    /// augmented block `[[A, [B E]]; [0, 0]]` scaled by `ts`.
    pub fn discretize(&self, ts: f64) -> Result<StateSpaceModel> {
        if !(ts > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling period must be positive, got {ts}"
            )));
        }
        let n = self.a.nrows();
        let m = self.b.ncols();
        let q = self.e.ncols();
        let mut aug = DMatrix::zeros(n + m + q, n + m + q);
        aug.view_mut((0, 0), (n, n)).copy_from(&self.a);
        aug.view_mut((0, n), (n, m)).copy_from(&self.b);
        aug.view_mut((0, n + m), (n, q)).copy_from(&self.e);
        let exp = (aug * ts).exp();
        let a_d = exp.view((0, 0), (n, n)).into_owned();
        let b_d = exp.view((0, n), (n, m)).into_owned();
        let e_d = exp.view((0, n + m), (n, q)).into_owned();
        StateSpaceModel::new(a_d, b_d, self.c.clone(), self.d.clone(), e_d, self.f.clone(), ts)
    }
}

/// Reduced swing-equation network: per generator `i`,
/// `delta_i' = omega_i`, `M_i omega_i' = -D_i omega_i - sum_j b_ij (delta_i - delta_j) + injections`,
/// with measured outputs the linearized line flows `b_ij (delta_i - delta_j)`.
///
/// Bus indices are 1-based, matching the usual one-line-diagram numbering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwingNetworkSpec {
    /// Inertia constants M_i in seconds, one per generator.
    pub inertias: Vec<f64>,
    /// Damping coefficients D_i in per-unit, one per generator.
    pub dampings: Vec<f64>,
    /// Undirected susceptance edges `(i, j, b_ij)` in per-unit.
    pub lines: Vec<(usize, usize, f64)>,
    /// Buses receiving controllable power injections, in input order.
    pub input_buses: Vec<usize>,
    /// Ordered bus pairs whose linearized flows `b_ij (delta_i - delta_j)` are measured.
    pub output_lines: Vec<(usize, usize)>,
    /// Buses receiving load-fluctuation injections, in disturbance order.
    #[serde(default)]
    pub disturbance_buses: Vec<usize>,
    /// Base angular frequency in rad/s (metadata; the linearized per-unit
    /// dynamics above do not depend on it).
    #[serde(default = "default_omega_s")]
    pub omega_s: f64,
}

fn default_omega_s() -> f64 {
    100.0 * std::f64::consts::PI
}

impl SwingNetworkSpec {
    /// Four machines in two areas joined by a weak tie, two controllable
    /// injections and three measured flows. Desk-scale stand-in for a
    /// four-area grid with a poorly damped inter-area mode.
    pub fn default_four_machine() -> Self {
        Self {
            inertias: vec![10.0, 8.0, 10.0, 8.0],
            dampings: vec![1.0, 1.0, 1.0, 1.0],
            lines: vec![(1, 2, 10.0), (3, 4, 10.0), (2, 3, 1.0)],
            input_buses: vec![2, 3],
            output_lines: vec![(1, 2), (3, 4), (2, 3)],
            disturbance_buses: vec![1, 4],
            omega_s: default_omega_s(),
        }
    }

    pub fn generators(&self) -> usize {
        self.inertias.len()
    }

    fn validate(&self) -> Result<()> {
        let g = self.generators();
        if g == 0 {
            return Err(Error::InvalidParameter("network needs at least one generator".into()));
        }
        if self.dampings.len() != g {
            return Err(Error::dim("dampings length", g, self.dampings.len()));
        }
        if let Some(m) = self.inertias.iter().find(|&&m| !(m > 0.0)) {
            return Err(Error::InvalidParameter(format!("inertia must be positive, got {m}")));
        }
        if let Some(d) = self.dampings.iter().find(|&&d| !(d >= 0.0)) {
            return Err(Error::InvalidParameter(format!("damping must be non-negative, got {d}")));
        }
        let check_bus = |bus: usize, what: &str| -> Result<()> {
            if bus == 0 || bus > g {
                return Err(Error::InvalidParameter(format!("{what} bus {bus} outside 1..={g}")));
            }
            Ok(())
        };
        for &(i, j, b) in &self.lines {
            check_bus(i, "line")?;
            check_bus(j, "line")?;
            if i == j {
                return Err(Error::InvalidParameter(format!("line ({i}, {j}) is a self-loop")));
            }
            if !(b > 0.0) {
                return Err(Error::InvalidParameter(format!("susceptance must be positive, got {b}")));
            }
        }
        for &bus in self.input_buses.iter().chain(&self.disturbance_buses) {
            check_bus(bus, "injection")?;
        }
        for &(i, j) in &self.output_lines {
            self.line_susceptance(i, j).ok_or_else(|| {
                Error::InvalidParameter(format!("output line ({i}, {j}) is not a network edge"))
            })?;
        }
        if !self.is_connected() {
            return Err(Error::DisconnectedGraph);
        }
        Ok(())
    }

    fn line_susceptance(&self, i: usize, j: usize) -> Option<f64> {
        self.lines
            .iter()
            .find(|&&(a, b, _)| (a, b) == (i, j) || (b, a) == (i, j))
            .map(|&(_, _, b)| b)
    }

    fn is_connected(&self) -> bool {
        let g = self.generators();
        if g == 1 {
            return true;
        }
        let mut seen = vec![false; g];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(a, b, _) in &self.lines {
                let (a, b) = (a - 1, b - 1);
                for (from, to) in [(a, b), (b, a)] {
                    if from == node && !seen[to] {
                        seen[to] = true;
                        stack.push(to);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Continuous-time grounded model. The reference angle is removed by
    /// expressing dynamics in angle differences relative to generator 1, so
    /// the state is `(delta_2 - delta_1, ..., delta_G - delta_1, omega_1, ..., omega_G)`
    /// of dimension `2G - 1`.
    pub fn continuous_model(&self) -> Result<ContinuousModel> {
        self.validate()?;
        let g = self.generators();
        let n = 2 * g - 1;
        let mut a = DMatrix::zeros(n, n);

        // theta_i = delta_{i+1} - delta_1 occupies state i-1 (0-based, i = 2..G);
        // omega_k occupies state (g - 1) + (k - 1).
        let omega_ix = |k: usize| g - 1 + k;

        // theta_i' = omega_{i+1} - omega_1
        for i in 0..g - 1 {
            a[(i, omega_ix(i + 1))] = 1.0;
            a[(i, omega_ix(0))] = -1.0;
        }
        // Damping terms.
        for k in 0..g {
            a[(omega_ix(k), omega_ix(k))] -= self.dampings[k] / self.inertias[k];
        }
        // Line coupling: delta_k - delta_j reads theta_{k-1} - theta_{j-1}
        // with theta for generator 1 identically zero.
        let add_angle = |row: usize, gen: usize, coeff: f64, a: &mut DMatrix<f64>| {
            if gen > 0 {
                a[(row, gen - 1)] += coeff;
            }
        };
        for &(i, j, b) in &self.lines {
            let (i, j) = (i - 1, j - 1);
            // M_i w_i' += -b (delta_i - delta_j); likewise for j.
            add_angle(omega_ix(i), i, -b / self.inertias[i], &mut a);
            add_angle(omega_ix(i), j, b / self.inertias[i], &mut a);
            add_angle(omega_ix(j), j, -b / self.inertias[j], &mut a);
            add_angle(omega_ix(j), i, b / self.inertias[j], &mut a);
        }

        let m = self.input_buses.len();
        let mut b_mat = DMatrix::zeros(n, m);
        for (col, &bus) in self.input_buses.iter().enumerate() {
            b_mat[(omega_ix(bus - 1), col)] = 1.0 / self.inertias[bus - 1];
        }
        let q = self.disturbance_buses.len();
        let mut e_mat = DMatrix::zeros(n, q);
        for (col, &bus) in self.disturbance_buses.iter().enumerate() {
            e_mat[(omega_ix(bus - 1), col)] = 1.0 / self.inertias[bus - 1];
        }

        let p = self.output_lines.len();
        let mut c_mat = DMatrix::zeros(p, n);
        for (row, &(i, j)) in self.output_lines.iter().enumerate() {
            let b = self.line_susceptance(i, j).expect("validated edge");
            let (i, j) = (i - 1, j - 1);
            if i > 0 {
                c_mat[(row, i - 1)] += b;
            }
            if j > 0 {
                c_mat[(row, j - 1)] -= b;
            }
        }

        Ok(ContinuousModel {
            a,
            b: b_mat,
            c: c_mat,
            d: DMatrix::zeros(p, m),
            e: e_mat,
            f: DMatrix::zeros(p, q),
        })
    }
}

/// Build the discretized swing surrogate in one call.
pub fn build_swing_surrogate(spec: &SwingNetworkSpec, ts: f64) -> Result<StateSpaceModel> {
    spec.continuous_model()?.discretize(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector, Complex};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_model(a: f64, b: f64, c: f64, d: f64) -> StateSpaceModel {
        StateSpaceModel::without_disturbance(
            dmatrix![a],
            dmatrix![b],
            dmatrix![c],
            dmatrix![d],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn step_zero_state_feedthrough_free() {
        let m = scalar_model(0.0, 1.0, 1.0, 0.0);
        let mut st = m.initial_state(dvector![0.0]).unwrap();
        let y = m.step(&mut st, &dvector![3.0], &dvector![]).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(st.x[0], 3.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn step_homogeneous_decay() {
        let m = scalar_model(0.5, 1.0, 1.0, 0.0);
        let mut st = m.initial_state(dvector![2.0]).unwrap();
        let y = m.step(&mut st, &dvector![0.0], &dvector![]).unwrap();
        assert_eq!(y[0], 2.0);
        assert_eq!(st.x[0], 1.0);
    }

    #[test]
    fn step_rejects_dimension_mismatch() {
        let m = scalar_model(0.5, 1.0, 1.0, 0.0);
        let mut st = m.initial_state(dvector![0.0]).unwrap();
        assert!(matches!(
            m.step(&mut st, &dvector![0.0, 0.0], &dvector![]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn random_stable_model(rng: &mut StdRng, n: usize, m: usize, p: usize) -> StateSpaceModel {
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let spectral = a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
        a /= spectral / 0.9;
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let d = DMatrix::from_fn(p, m, |_, _| rng.random_range(-1.0..1.0));
        StateSpaceModel::without_disturbance(a, b, c, d, 1.0).unwrap()
    }

    // Duplicate-recursion oracle: an independently coded loop of the same
    // recursion must match the step path to near machine precision.
    #[test]
    fn step_matches_duplicate_recursion() {
        let mut rng = StdRng::seed_from_u64(7);
        let model = random_stable_model(&mut rng, 4, 2, 2);
        let inputs: Vec<DVector<f64>> =
            (0..50).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();

        let mut st = model.initial_state(DVector::zeros(4)).unwrap();
        let stepped: Vec<DVector<f64>> = inputs
            .iter()
            .map(|u| model.step(&mut st, u, &dvector![]).unwrap())
            .collect();

        let mut x = DVector::<f64>::zeros(4);
        for (u, y_step) in inputs.iter().zip(&stepped) {
            let y = &model.c * &x + &model.d * u;
            assert!((y - y_step).amax() < 1e-12);
            x = &model.a * &x + &model.b * u;
        }
    }

    #[test]
    fn simulate_zero_input_zero_state_gives_zero_output() {
        let mut rng = StdRng::seed_from_u64(1);
        let model = random_stable_model(&mut rng, 3, 1, 1);
        let u = Trajectory::zeros(1, 20);
        let y = model.simulate(&DVector::zeros(3), &u, None).unwrap();
        assert_eq!(y.len(), 20);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulate_length_one_equals_single_step() {
        let mut rng = StdRng::seed_from_u64(2);
        let model = random_stable_model(&mut rng, 3, 2, 2);
        let mut u = Trajectory::empty(2);
        u.push(&dvector![0.3, -0.7]).unwrap();
        let y = model.simulate(&DVector::zeros(3), &u, None).unwrap();
        let mut st = model.initial_state(DVector::zeros(3)).unwrap();
        let y1 = model.step(&mut st, &dvector![0.3, -0.7], &dvector![]).unwrap();
        assert_eq!(y.sample(0), y1);
    }

    // Markov-parameter oracle: impulse response equals C A^{k-1} B.
    #[test]
    fn simulate_impulse_matches_markov_parameters() {
        let mut rng = StdRng::seed_from_u64(3);
        let model = random_stable_model(&mut rng, 4, 2, 3);
        let steps = 30;
        let mut u = Trajectory::zeros(2, steps);
        u.set_sample(0, &dvector![1.0, 0.0]).unwrap();
        let y = model.simulate(&DVector::zeros(4), &u, None).unwrap();

        let e1 = dvector![1.0, 0.0];
        let mut a_pow = DMatrix::<f64>::identity(4, 4);
        for k in 0..steps {
            let expected = if k == 0 {
                &model.d * &e1
            } else {
                let markov = &model.c * &a_pow * &model.b;
                a_pow = &a_pow * &model.a;
                markov * &e1
            };
            assert!((y.sample(k) - expected).amax() < 1e-10, "mismatch at step {k}");
        }
    }

    // Semigroup property: simulating halves with carried state matches one run.
    #[test]
    fn simulate_splits_at_any_point() {
        let mut rng = StdRng::seed_from_u64(4);
        let model = random_stable_model(&mut rng, 4, 2, 2);
        let u = Trajectory::from_fn(2, 40, |_, _| rng.random_range(-1.0..1.0));
        let full = model.simulate(&DVector::zeros(4), &u, None).unwrap();
        for split in [1, 13, 39] {
            let mut st = model.initial_state(DVector::zeros(4)).unwrap();
            let mut outputs = Trajectory::empty(2);
            for t in 0..split {
                outputs.push(&model.step(&mut st, &u.sample(t), &dvector![]).unwrap()).unwrap();
            }
            let tail = model
                .simulate(&st.x.clone(), &u.slice(split, u.len() - split), None)
                .unwrap();
            for t in 0..u.len() {
                let got = if t < split { outputs.sample(t) } else { tail.sample(t - split) };
                assert!((got - full.sample(t)).amax() < 1e-13);
            }
        }
    }

    #[test]
    fn delay_line_zero_is_identity() {
        let mut dl = DelayLine::new(0, 2);
        for t in 0..5 {
            let s = dvector![t as f64, -(t as f64)];
            assert_eq!(dl.push(s.clone()), s);
        }
    }

    #[test]
    fn delay_line_shifts_by_d_samples() {
        let d = 3;
        let mut dl = DelayLine::new(d, 1);
        for t in 0..10 {
            let out = dl.push(dvector![t as f64]);
            let expected = if t < d { 0.0 } else { (t - d) as f64 };
            assert_eq!(out[0], expected);
        }
    }

    #[test]
    fn discretize_integrator_case() {
        let c = ContinuousModel {
            a: DMatrix::zeros(2, 2),
            b: dmatrix![1.0; 2.0],
            c: DMatrix::identity(2, 2),
            d: DMatrix::zeros(2, 1),
            e: DMatrix::zeros(2, 0),
            f: DMatrix::zeros(2, 0),
        };
        let d = c.discretize(0.1).unwrap();
        assert!((d.a.clone() - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((d.b.clone() - dmatrix![0.1; 0.2]).amax() < 1e-12);
    }

    #[test]
    fn discretize_scalar_closed_form() {
        let a = -0.7;
        let ts = 0.25;
        let c = ContinuousModel {
            a: dmatrix![a],
            b: dmatrix![2.0],
            c: dmatrix![1.0],
            d: dmatrix![0.0],
            e: DMatrix::zeros(1, 0),
            f: DMatrix::zeros(1, 0),
        };
        let d = c.discretize(ts).unwrap();
        assert_relative_eq!(d.a[(0, 0)], (a * ts).exp(), max_relative = 1e-12);
        assert_relative_eq!(d.b[(0, 0)], ((a * ts).exp() - 1.0) / a * 2.0, max_relative = 1e-12);
    }

    fn sorted_eigs(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
        let mut eigs: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
        eigs.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        eigs
    }

    // Eigenvalue mapping oracle: ZOH sampling maps continuous eigenvalues
    // through exp(ts * lambda).
    #[test]
    fn discretize_maps_surrogate_eigenvalues_exponentially() {
        let spec = SwingNetworkSpec::default_four_machine();
        let cont = spec.continuous_model().unwrap();
        let disc = cont.discretize(0.02).unwrap();
        let mapped: Vec<Complex<f64>> = {
            let mut v: Vec<Complex<f64>> =
                cont.a.complex_eigenvalues().iter().map(|l| (l * 0.02).exp()).collect();
            v.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
            v
        };
        let direct = sorted_eigs(&disc.a);
        for (m, d) in mapped.iter().zip(&direct) {
            assert!((m - d).norm() < 1e-9, "eigenvalue mapping off: {m} vs {d}");
        }
    }

    // Eigenvalue oracle for the two-generator network: the oscillatory pair
    // follows the 2x2 relative dynamics [[0, 1], [-2b/M, -D/M]].
    #[test]
    fn two_generator_network_oscillates_at_sqrt_2b_over_m() {
        let (m, d, b) = (5.0, 0.4, 3.0);
        let spec = SwingNetworkSpec {
            inertias: vec![m, m],
            dampings: vec![d, d],
            lines: vec![(1, 2, b)],
            input_buses: vec![1],
            output_lines: vec![(1, 2)],
            disturbance_buses: vec![],
            omega_s: default_omega_s(),
        };
        let cont = spec.continuous_model().unwrap();
        assert_eq!(cont.a.nrows(), 3);

        // Direct 2x2 eigencomputation via the quadratic formula.
        let half_trace = -d / m / 2.0;
        let det = 2.0 * b / m;
        let disc = half_trace * half_trace - det;
        assert!(disc < 0.0);
        let expected = Complex::new(half_trace, (-disc).sqrt());
        assert_relative_eq!(expected.im / (2.0 * std::f64::consts::PI),
            (2.0 * b / m).sqrt() / (2.0 * std::f64::consts::PI), max_relative = 1e-2);

        let eigs = sorted_eigs(&cont.a);
        let pair: Vec<_> = eigs.iter().filter(|l| l.im > 1e-9).collect();
        assert_eq!(pair.len(), 1);
        assert!((pair[0] - expected).norm() < 1e-10);
        // Remaining real eigenvalue is the common damping mode -D/M.
        let real: Vec<_> = eigs.iter().filter(|l| l.im.abs() < 1e-9).collect();
        assert_eq!(real.len(), 1);
        assert_relative_eq!(real[0].re, -d / m, max_relative = 1e-10);
    }

    #[test]
    fn default_four_machine_has_weakly_damped_interarea_band_mode() {
        let spec = SwingNetworkSpec::default_four_machine();
        let cont = spec.continuous_model().unwrap();
        let found = cont.a.complex_eigenvalues().iter().any(|l| {
            let freq_hz = l.im.abs() / (2.0 * std::f64::consts::PI);
            let zeta = if l.norm() > 0.0 { -l.re / l.norm() } else { 1.0 };
            l.im.abs() > 1e-9 && (0.2..=0.8).contains(&freq_hz) && zeta < 0.05
        });
        assert!(found, "expected a weakly damped mode in [0.2, 0.8] Hz");
    }

    #[test]
    fn scaling_susceptances_by_four_doubles_frequencies() {
        let freq = |spec: &SwingNetworkSpec| -> Vec<f64> {
            let mut f: Vec<f64> = spec
                .continuous_model()
                .unwrap()
                .a
                .complex_eigenvalues()
                .iter()
                .map(|l| l.im)
                .filter(|&im| im > 1e-9)
                .collect();
            f.sort_by(|a, b| a.partial_cmp(b).unwrap());
            f
        };
        let scale_lines = |spec: &SwingNetworkSpec| {
            let mut scaled = spec.clone();
            for line in &mut scaled.lines {
                line.2 *= 4.0;
            }
            scaled
        };

        // Undamped network: doubling is exact (similarity through scaling
        // omega by 2 and time by 1/2).
        let mut undamped = SwingNetworkSpec::default_four_machine();
        undamped.dampings = vec![0.0; 4];
        let (f1, f4) = (freq(&undamped), freq(&scale_lines(&undamped)));
        assert_eq!(f1.len(), f4.len());
        for (a, b) in f1.iter().zip(&f4) {
            assert_relative_eq!(b / a, 2.0, max_relative = 1e-10);
        }

        // Weak damping perturbs the imaginary parts only slightly.
        let damped = SwingNetworkSpec::default_four_machine();
        let (f1, f4) = (freq(&damped), freq(&scale_lines(&damped)));
        for (a, b) in f1.iter().zip(&f4) {
            assert_relative_eq!(b / a, 2.0, max_relative = 3e-2);
        }
    }

    #[test]
    fn disconnected_network_is_rejected() {
        let spec = SwingNetworkSpec {
            inertias: vec![1.0, 1.0, 1.0],
            dampings: vec![0.1, 0.1, 0.1],
            lines: vec![(1, 2, 1.0)],
            input_buses: vec![1],
            output_lines: vec![(1, 2)],
            disturbance_buses: vec![],
            omega_s: default_omega_s(),
        };
        assert!(matches!(spec.continuous_model(), Err(Error::DisconnectedGraph)));
    }

    #[test]
    fn nonpositive_inertia_is_rejected() {
        let mut spec = SwingNetworkSpec::default_four_machine();
        spec.inertias[2] = 0.0;
        assert!(matches!(spec.continuous_model(), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn discretized_surrogate_is_minimal_after_grounding() {
        let spec = SwingNetworkSpec::default_four_machine();
        let model = build_swing_surrogate(&spec, 0.02).unwrap();
        let n = model.state_dim();
        assert_eq!(n, 7);

        let mut obs = DMatrix::zeros(n * model.output_dim(), n);
        let mut ctr = DMatrix::zeros(n, n * model.input_dim());
        let mut c_block = model.c.clone();
        let mut b_block = model.b.clone();
        for k in 0..n {
            obs.rows_mut(k * model.output_dim(), model.output_dim()).copy_from(&c_block);
            ctr.columns_mut(k * model.input_dim(), model.input_dim()).copy_from(&b_block);
            c_block = &c_block * &model.a;
            b_block = &model.a * &b_block;
        }
        assert_eq!(numerical_rank(&obs, RANK_REL_TOL), n);
        assert_eq!(numerical_rank(&ctr, RANK_REL_TOL), n);
    }

    #[test]
    fn lag_of_scalar_system_is_one() {
        let m = scalar_model(0.5, 1.0, 1.0, 0.0);
        assert_eq!(m.lag().unwrap(), 1);
    }

    #[test]
    fn lag_with_full_state_measurement_is_one() {
        let m = StateSpaceModel::without_disturbance(
            dmatrix![0.1, 0.3; 0.0, 0.2],
            dmatrix![1.0; 1.0],
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            1.0,
        )
        .unwrap();
        assert_eq!(m.lag().unwrap(), 1);
    }

    #[test]
    fn lag_of_companion_single_output_is_n() {
        // Observable companion form: only the chain of powers reaches rank 3.
        let a = dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 0.1, -0.3, 0.5];
        let c = dmatrix![1.0, 0.0, 0.0];
        assert_eq!(compute_lag(&a, &c).unwrap(), 3);
    }

    #[test]
    fn unobservable_model_reports_error() {
        // Second state is invisible: C only reads x1 and A is diagonal.
        let a = dmatrix![0.5, 0.0; 0.0, 0.3];
        let c = dmatrix![1.0, 0.0];
        assert!(matches!(compute_lag(&a, &c), Err(Error::Unobservable { .. })));
    }
}
