//! Robust min-max controllers over bounded future disturbances: the plain
//! min-max variant, its disturbance-feedback refinement, disturbance
//! downsampling/interpolation, and the vertex-enumeration cutting-plane
//! solver they share.

use nalgebra::{DMatrix, DVector};

use crate::datamat::DataBlocks;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, pseudo_inverse, vstack, PINV_REL_CUTOFF, RANK_REL_TOL};
use crate::predictive::{DeePCConfig, IniBuffer};
use crate::qp::{solve_qp, QpStatus, QuadraticProgram};

/// Box of admissible future disturbances `[w_lo, w_hi]^(qN)`, downsampled by
/// keeping one of every `downsample` steps; the kept samples (plus the
/// horizon endpoint) are the uncertain coordinates.
#[derive(Debug, Clone)]
pub struct DisturbanceBox {
    pub w_lo: f64,
    pub w_hi: f64,
    /// Downsampling factor M >= 1.
    pub downsample: usize,
    /// Refuse to enumerate more than this many vertices.
    pub vertex_cap: usize,
}

impl DisturbanceBox {
    pub fn new(w_lo: f64, w_hi: f64, downsample: usize) -> Self {
        Self { w_lo, w_hi, downsample, vertex_cap: 4096 }
    }

    /// Number of reduced points per channel: `floor(N/M) + 1`.
    pub fn points_per_channel(&self, horizon: usize) -> usize {
        horizon / self.downsample + 1
    }

    /// Reduced uncertainty dimension `n_r = q (floor(N/M) + 1)`.
    pub fn reduced_dim(&self, q: usize, horizon: usize) -> usize {
        q * self.points_per_channel(horizon)
    }

    pub fn validate(&self, q: usize, horizon: usize) -> Result<()> {
        if self.w_lo > self.w_hi {
            return Err(Error::InvalidParameter(format!(
                "disturbance bounds out of order: [{}, {}]",
                self.w_lo, self.w_hi
            )));
        }
        if self.downsample == 0 || self.downsample > horizon {
            return Err(Error::InvalidParameter(format!(
                "downsampling factor {} outside 1..={horizon}",
                self.downsample
            )));
        }
        let dims = self.reduced_dim(q, horizon);
        if dims >= usize::BITS as usize || (1usize << dims) > self.vertex_cap {
            return Err(Error::VertexCapExceeded { dims, cap: self.vertex_cap });
        }
        Ok(())
    }
}

/// Min-max configuration: the deterministic controller settings plus the
/// disturbance box and robust-solver controls.
#[derive(Debug, Clone)]
pub struct MinMaxConfig {
    pub base: DeePCConfig,
    pub disturbance: DisturbanceBox,
    /// Pin the free null-space component of `g` to zero (the default);
    /// otherwise it joins the decision variables.
    pub fix_x_to_zero: bool,
    /// Slack on the recent disturbance trajectory with its penalty weight;
    /// off by default.
    pub sigma_w: Option<f64>,
    pub robust_tol: f64,
    pub robust_max_iter: usize,
}

impl MinMaxConfig {
    pub fn new(base: DeePCConfig, disturbance: DisturbanceBox) -> Self {
        Self {
            base,
            disturbance,
            fix_x_to_zero: true,
            sigma_w: None,
            robust_tol: 1e-6,
            robust_max_iter: 500,
        }
    }
}

/// Affine disturbance-feedback policy `u = v + L w` with `L` strictly lower
/// block-triangular Toeplitz: block `(i, j)` is `gains[i - j - 1]` for
/// `i > j`, so the policy has `m q (N-1)` independent entries.
#[derive(Debug, Clone)]
pub struct DfPolicy {
    pub v: DVector<f64>,
    /// `N - 1` blocks of size `m x q`; block `d` acts on the disturbance
    /// `d + 1` steps in the past.
    pub gains: Vec<DMatrix<f64>>,
}

impl DfPolicy {
    pub fn expand(&self, horizon: usize) -> Result<DMatrix<f64>> {
        toeplitz_expand(&self.gains, horizon)
    }
}

/// Expand the Toeplitz generator blocks into the full `mN x qN` policy matrix.
pub fn toeplitz_expand(gains: &[DMatrix<f64>], horizon: usize) -> Result<DMatrix<f64>> {
    if horizon == 0 || gains.len() + 1 != horizon {
        return Err(Error::dim(
            "toeplitz generator blocks",
            horizon.saturating_sub(1),
            gains.len(),
        ));
    }
    if horizon == 1 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (m, q) = gains[0].shape();
    for g in gains {
        if g.shape() != (m, q) {
            return Err(Error::dim("gain block shape", m * q, g.nrows() * g.ncols()));
        }
    }
    let mut full = DMatrix::zeros(m * horizon, q * horizon);
    for i in 0..horizon {
        for j in 0..i {
            full.view_mut((i * m, j * q), (m, q)).copy_from(&gains[i - j - 1]);
        }
    }
    Ok(full)
}

/// Piecewise-linear interpolation from the reduced disturbance `w_tilde`
/// (time-major, `q (floor(N/M)+1)` entries) back to the full horizon.
pub fn interpolate_disturbance(
    w_tilde: &DVector<f64>,
    q: usize,
    horizon: usize,
    factor: usize,
) -> Result<DVector<f64>> {
    let j = interpolation_matrix(q, horizon, factor)?;
    if w_tilde.len() != j.ncols() {
        return Err(Error::dim("reduced disturbance length", j.ncols(), w_tilde.len()));
    }
    Ok(j * w_tilde)
}

/// The linear map from the reduced disturbance to the interpolated `qN`
/// trajectory. Rows follow time-major channel layout.
pub fn interpolation_matrix(q: usize, horizon: usize, factor: usize) -> Result<DMatrix<f64>> {
    if q == 0 || horizon == 0 {
        return Err(Error::InvalidParameter("interpolation needs q >= 1 and N >= 1".into()));
    }
    if factor == 0 || factor > horizon {
        return Err(Error::InvalidParameter(format!(
            "downsampling factor {factor} outside 1..={horizon}"
        )));
    }
    let points = horizon / factor + 1;
    let mut j = DMatrix::zeros(q * horizon, q * points);
    // i_bar marks where the regular grid ends and the tail segment begins.
    let k_last = horizon / factor;
    let i_bar = factor * (k_last - 1);
    for i in 0..horizon {
        if i <= i_bar {
            let cell = i / factor;
            let frac = (i % factor) as f64 / factor as f64;
            for ch in 0..q {
                j[(i * q + ch, cell * q + ch)] += 1.0 - frac;
                if frac != 0.0 {
                    j[(i * q + ch, (cell + 1) * q + ch)] += frac;
                }
            }
        } else {
            let denom = (horizon - 1 - i_bar) as f64;
            let frac = (i - i_bar) as f64 / denom;
            for ch in 0..q {
                j[(i * q + ch, (k_last - 1) * q + ch)] += 1.0 - frac;
                j[(i * q + ch, k_last * q + ch)] += frac;
            }
        }
    }
    Ok(j)
}

/// All `2^{n_r}` sign patterns of `{w_lo, w_hi}` over the reduced coordinates.
pub fn enumerate_vertices(
    bounds: &DisturbanceBox,
    q: usize,
    horizon: usize,
) -> Result<Vec<DVector<f64>>> {
    bounds.validate(q, horizon)?;
    let dims = bounds.reduced_dim(q, horizon);
    let count = 1usize << dims;
    let mut out = Vec::with_capacity(count);
    for pattern in 0..count {
        out.push(DVector::from_fn(dims, |i, _| {
            if pattern >> i & 1 == 1 {
                bounds.w_hi
            } else {
                bounds.w_lo
            }
        }));
    }
    Ok(out)
}

/// Decision-vector layout shared by both robust variants:
/// `[u-or-v | theta (DF only) | sigma_y | sigma_w (optional) | x (optional)]`.
#[derive(Debug, Clone, Copy)]
struct ZLayout {
    input: usize,
    theta: usize,
    sigma_y: usize,
    sigma_w: usize,
    free_x: usize,
}

impl ZLayout {
    fn dim(&self) -> usize {
        self.input + self.theta + self.sigma_y + self.sigma_w + self.free_x
    }
    fn input_at(&self) -> usize {
        0
    }
    fn theta_at(&self) -> usize {
        self.input
    }
    fn sigma_y_at(&self) -> usize {
        self.input + self.theta
    }
    fn sigma_w_at(&self) -> usize {
        self.input + self.theta + self.sigma_y
    }
    fn x_at(&self) -> usize {
        self.input + self.theta + self.sigma_y + self.sigma_w
    }
}

#[derive(Debug, Clone, Copy)]
struct RhsRows {
    u_ini: usize,
    w_ini: usize,
    y_ini: usize,
    u_fut: usize,
    w_fut: usize,
}

impl RhsRows {
    fn total(&self) -> usize {
        self.u_ini + self.w_ini + self.y_ini + self.u_fut + self.w_fut
    }
}

/// Precomputed affine structure of the pseudoinverse relaxation
/// `g = H^+ col(u_ini, w_ini + sigma_w, y_ini + sigma_y, u, w_hat) [+ H_perp x]`.
struct RelaxedPredictor {
    g_u: DMatrix<f64>,
    g_sigma_y: DMatrix<f64>,
    g_sigma_w: DMatrix<f64>,
    g_wtilde: DMatrix<f64>,
    h_pinv: DMatrix<f64>,
    h_perp: Option<DMatrix<f64>>,
    interp: DMatrix<f64>,
    rows: RhsRows,
}

fn build_relaxed_predictor(blocks: &DataBlocks, cfg: &MinMaxConfig) -> Result<RelaxedPredictor> {
    let (w_p, w_f) = match (&blocks.w_p, &blocks.w_f) {
        (Some(p), Some(f)) => (p, f),
        _ => {
            return Err(Error::InvalidParameter(
                "min-max control needs disturbance blocks W_P, W_F".into(),
            ))
        }
    };
    let depth = blocks.t_ini + blocks.horizon;

    // Joint excitation check on the (u, w) rows. Disturbance channels that
    // are identically zero carry no excitation requirement: they are
    // degenerate but valid records, e.g. an open tie line.
    let live: Vec<usize> = (0..blocks.q)
        .filter(|&ch| {
            let past = (0..blocks.t_ini).any(|i| w_p.row(i * blocks.q + ch).amax() != 0.0);
            let fut = (0..blocks.horizon).any(|i| w_f.row(i * blocks.q + ch).amax() != 0.0);
            past || fut
        })
        .collect();
    let mut live_rows_p = DMatrix::zeros(live.len() * blocks.t_ini, blocks.h_c);
    let mut live_rows_f = DMatrix::zeros(live.len() * blocks.horizon, blocks.h_c);
    for (k, &ch) in live.iter().enumerate() {
        for i in 0..blocks.t_ini {
            live_rows_p.row_mut(i * live.len() + k).copy_from(&w_p.row(i * blocks.q + ch));
        }
        for i in 0..blocks.horizon {
            live_rows_f.row_mut(i * live.len() + k).copy_from(&w_f.row(i * blocks.q + ch));
        }
    }
    let excitation = if live.is_empty() {
        vstack(&[&blocks.u_p, &blocks.u_f])
    } else {
        vstack(&[&blocks.u_p, &blocks.u_f, &live_rows_p, &live_rows_f])
    };
    let needed = (blocks.m + live.len()) * depth;
    let rank = numerical_rank(&excitation, RANK_REL_TOL);
    if rank < needed {
        return Err(Error::RankDeficientData { rank, rows: needed });
    }

    let h = vstack(&[&blocks.u_p, w_p, &blocks.y_p, &blocks.u_f, w_f]);
    let h_pinv = pseudo_inverse(&h, PINV_REL_CUTOFF);
    let rows = RhsRows {
        u_ini: blocks.m * blocks.t_ini,
        w_ini: blocks.q * blocks.t_ini,
        y_ini: blocks.p * blocks.t_ini,
        u_fut: blocks.m * blocks.horizon,
        w_fut: blocks.q * blocks.horizon,
    };
    debug_assert_eq!(rows.total(), h.nrows());

    let interp = interpolation_matrix(blocks.q, blocks.horizon, cfg.disturbance.downsample)?;
    let at_u_fut = rows.u_ini + rows.w_ini + rows.y_ini;
    let g_u = h_pinv.columns(at_u_fut, rows.u_fut).into_owned();
    let g_sigma_y = h_pinv.columns(rows.u_ini + rows.w_ini, rows.y_ini).into_owned();
    let g_sigma_w = h_pinv.columns(rows.u_ini, rows.w_ini).into_owned();
    let g_wtilde = h_pinv.columns(at_u_fut + rows.u_fut, rows.w_fut).into_owned() * &interp;
    let h_perp = if cfg.fix_x_to_zero {
        None
    } else {
        Some(DMatrix::identity(blocks.h_c, blocks.h_c) - &h_pinv * &h)
    };
    Ok(RelaxedPredictor { g_u, g_sigma_y, g_sigma_w, g_wtilde, h_pinv, h_perp, interp, rows })
}

/// Map from the Toeplitz generator entries to `L(theta) w_hat`: entry
/// `theta[d*m*q + r*q + c]` is `gains[d][(r, c)]`.
fn theta_coupling(m: usize, q: usize, horizon: usize, w_hat: &DVector<f64>) -> DMatrix<f64> {
    let theta_dim = m * q * (horizon - 1);
    let mut t = DMatrix::zeros(m * horizon, theta_dim);
    for i in 0..horizon {
        for j in 0..i {
            let d = i - j - 1;
            for r in 0..m {
                for c in 0..q {
                    t[(i * m + r, d * m * q + r * q + c)] += w_hat[j * q + c];
                }
            }
        }
    }
    t
}

/// The assembled robust problem: per-vertex convex quadratics in the
/// first-stage decision plus linear constraints enforced at every vertex.
pub struct MinMaxProblem {
    layout: ZLayout,
    vertices: Vec<DVector<f64>>,
    /// Effective plant input per vertex: `u = U_v z` (identity on the input
    /// block, plus the theta coupling for the DF variant).
    u_of_z: Vec<DMatrix<f64>>,
    /// g = g0 + G_u u_eff + G_sy sigma_y + G_sw sigma_w + X x + G_w w_tilde.
    g0: DVector<f64>,
    g_u: DMatrix<f64>,
    g_sy: DMatrix<f64>,
    g_sw: DMatrix<f64>,
    g_x: Option<DMatrix<f64>>,
    g_w: DMatrix<f64>,
    /// y = Y_F g, stored as composed maps.
    y0: DVector<f64>,
    y_u: DMatrix<f64>,
    y_sy: DMatrix<f64>,
    y_sw: DMatrix<f64>,
    y_x: Option<DMatrix<f64>>,
    y_w: DMatrix<f64>,
    interp: DMatrix<f64>,
    r_w: DMatrix<f64>,
    q_w: DMatrix<f64>,
    reference: DVector<f64>,
    lambda_g: f64,
    lambda_y: f64,
    lambda_w: f64,
    constraints_g: DMatrix<f64>,
    constraints_h: DVector<f64>,
    /// True when all vertices share one Hessian (plain variant); the base
    /// quadratic is then the exact vertex cost at `w_tilde = 0` and cuts are
    /// affine.
    common_hessian: bool,
    control_horizon: usize,
    m: usize,
    q: usize,
    horizon: usize,
    tol: f64,
    max_iter: usize,
    solver: crate::qp::QpSettings,
}

impl MinMaxProblem {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn decision_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn is_disturbance_feedback(&self) -> bool {
        self.layout.theta > 0
    }

    fn u_map(&self, vertex: usize) -> &DMatrix<f64> {
        if self.u_of_z.len() == 1 {
            &self.u_of_z[0]
        } else {
            &self.u_of_z[vertex]
        }
    }

    fn parts<'a>(
        &self,
        z: &'a DVector<f64>,
    ) -> (
        nalgebra::DVectorView<'a, f64>,
        nalgebra::DVectorView<'a, f64>,
        nalgebra::DVectorView<'a, f64>,
        nalgebra::DVectorView<'a, f64>,
    ) {
        (
            z.rows(self.layout.input_at(), self.layout.input),
            z.rows(self.layout.sigma_y_at(), self.layout.sigma_y),
            z.rows(self.layout.sigma_w_at(), self.layout.sigma_w),
            z.rows(self.layout.x_at(), self.layout.free_x),
        )
    }

    fn assemble(
        &self,
        z: &DVector<f64>,
        u_eff: &DVector<f64>,
        w_tilde: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let (_, sy, sw, x) = self.parts(z);
        let mut g = &self.g0 + &self.g_u * u_eff + &self.g_w * w_tilde;
        let mut y = &self.y0 + &self.y_u * u_eff + &self.y_w * w_tilde;
        if self.layout.sigma_y > 0 {
            g += &self.g_sy * sy;
            y += &self.y_sy * sy;
        }
        if self.layout.sigma_w > 0 {
            g += &self.g_sw * sw;
            y += &self.y_sw * sw;
        }
        if let (Some(gx), Some(yx)) = (&self.g_x, &self.y_x) {
            g += gx * x;
            y += yx * x;
        }
        (g, y)
    }

    fn cost_from(&self, z: &DVector<f64>, g: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let (v, sy, sw, _) = self.parts(z);
        let dy = y - &self.reference;
        (v.transpose() * &self.r_w * v)[(0, 0)]
            + (dy.transpose() * &self.q_w * &dy)[(0, 0)]
            + self.lambda_g * g.norm_squared()
            + self.lambda_y * sy.norm_squared()
            + self.lambda_w * sw.norm_squared()
    }

    /// Cost `|v|_R^2 + |y - r|_Q^2 + lambda_g |g|^2 + lambda_y |sigma_y|^2
    /// (+ lambda_w |sigma_w|^2)` at a first-stage point under vertex `v_ix`.
    pub fn evaluate(&self, z: &DVector<f64>, v_ix: usize) -> f64 {
        let u_eff = self.u_map(v_ix) * z;
        let (g, y) = self.assemble(z, &u_eff, &self.vertices[v_ix]);
        self.cost_from(z, &g, &y)
    }

    /// Same cost under an arbitrary reduced disturbance, for convexity spot
    /// checks against interior points.
    pub fn evaluate_at_disturbance(&self, z: &DVector<f64>, w_tilde: &DVector<f64>) -> f64 {
        let u_eff = if self.is_disturbance_feedback() {
            let w_hat = &self.interp * w_tilde;
            let coupling = theta_coupling(self.m, self.q, self.horizon, &w_hat);
            let (v, ..) = self.parts(z);
            let theta = z.rows(self.layout.theta_at(), self.layout.theta);
            DVector::from(v) + coupling * theta
        } else {
            self.u_of_z[0].clone() * z
        };
        let (g, y) = self.assemble(z, &u_eff, w_tilde);
        self.cost_from(z, &g, &y)
    }

    fn gradient(&self, z: &DVector<f64>, v_ix: usize) -> DVector<f64> {
        let u_map = self.u_map(v_ix);
        let u_eff = u_map * z;
        let (g, y) = self.assemble(z, &u_eff, &self.vertices[v_ix]);
        let (v, sy, sw, x) = self.parts(z);
        let dy = &y - &self.reference;

        let qdy = &self.q_w * dy;
        let mut grad = DVector::zeros(self.layout.dim());
        // |v|_R^2 term acts on the input block directly.
        grad.rows_mut(self.layout.input_at(), self.layout.input)
            .copy_from(&(2.0 * &self.r_w * v));
        // Output tracking and g regularization flow through u_eff.
        let through_u = 2.0 * self.y_u.transpose() * &qdy
            + 2.0 * self.lambda_g * self.g_u.transpose() * &g;
        grad += u_map.transpose() * through_u;
        if self.layout.sigma_y > 0 {
            let mut block = 2.0 * self.y_sy.transpose() * &qdy
                + 2.0 * self.lambda_g * self.g_sy.transpose() * &g;
            block += 2.0 * self.lambda_y * DVector::from(sy);
            let at = self.layout.sigma_y_at();
            for i in 0..self.layout.sigma_y {
                grad[at + i] += block[i];
            }
        }
        if self.layout.sigma_w > 0 {
            let mut block = 2.0 * self.y_sw.transpose() * &qdy
                + 2.0 * self.lambda_g * self.g_sw.transpose() * &g;
            block += 2.0 * self.lambda_w * DVector::from(sw);
            let at = self.layout.sigma_w_at();
            for i in 0..self.layout.sigma_w {
                grad[at + i] += block[i];
            }
        }
        if let (Some(gx), Some(yx)) = (&self.g_x, &self.y_x) {
            let block =
                2.0 * yx.transpose() * &qdy + 2.0 * self.lambda_g * gx.transpose() * &g;
            let at = self.layout.x_at();
            for i in 0..self.layout.free_x {
                grad[at + i] += block[i] + 0.0 * x[i];
            }
        }
        grad
    }

    /// Jacobian of the predicted output with respect to the first-stage
    /// decision, at one vertex.
    fn output_jacobian(&self, v_ix: usize) -> DMatrix<f64> {
        let u_map = self.u_map(v_ix);
        let mut y_z = &self.y_u * u_map;
        if self.layout.sigma_y > 0 {
            y_z.view_mut((0, self.layout.sigma_y_at()), (y_z.nrows(), self.layout.sigma_y))
                .copy_from(&self.y_sy);
        }
        if self.layout.sigma_w > 0 {
            y_z.view_mut((0, self.layout.sigma_w_at()), (y_z.nrows(), self.layout.sigma_w))
                .copy_from(&self.y_sw);
        }
        if let Some(yx) = &self.y_x {
            y_z.view_mut((0, self.layout.x_at()), (y_z.nrows(), self.layout.free_x))
                .copy_from(yx);
        }
        y_z
    }

    /// Vertex-independent convex underestimator carried by the master QP.
    /// With a common Hessian this is the exact cost at `w_tilde = 0`, so the
    /// per-vertex remainders are affine and their cuts exact.
    fn base_quadratic(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let dim = self.layout.dim();
        let mut p = DMatrix::zeros(dim, dim);
        let mut c = DVector::zeros(dim);
        let mut e = 0.0;

        // Common to both variants: |v|_R^2 and the slack penalties.
        p.view_mut((self.layout.input_at(), self.layout.input_at()), (self.layout.input, self.layout.input))
            .copy_from(&(2.0 * &self.r_w));
        for i in 0..self.layout.sigma_y {
            let at = self.layout.sigma_y_at() + i;
            p[(at, at)] += 2.0 * self.lambda_y;
        }
        for i in 0..self.layout.sigma_w {
            let at = self.layout.sigma_w_at() + i;
            p[(at, at)] += 2.0 * self.lambda_w;
        }

        if self.common_hessian {
            // Tracking and g-regularization terms at w_tilde = 0; u_eff == v.
            let u_map = &self.u_of_z[0];
            let mut y_z = &self.y_u * u_map;
            let mut g_z = &self.g_u * u_map;
            if self.layout.sigma_y > 0 {
                y_z.view_mut((0, self.layout.sigma_y_at()), (y_z.nrows(), self.layout.sigma_y))
                    .copy_from(&self.y_sy);
                g_z.view_mut((0, self.layout.sigma_y_at()), (g_z.nrows(), self.layout.sigma_y))
                    .copy_from(&self.g_sy);
            }
            if self.layout.sigma_w > 0 {
                y_z.view_mut((0, self.layout.sigma_w_at()), (y_z.nrows(), self.layout.sigma_w))
                    .copy_from(&self.y_sw);
                g_z.view_mut((0, self.layout.sigma_w_at()), (g_z.nrows(), self.layout.sigma_w))
                    .copy_from(&self.g_sw);
            }
            if let (Some(gx), Some(yx)) = (&self.g_x, &self.y_x) {
                y_z.view_mut((0, self.layout.x_at()), (y_z.nrows(), self.layout.free_x))
                    .copy_from(yx);
                g_z.view_mut((0, self.layout.x_at()), (g_z.nrows(), self.layout.free_x))
                    .copy_from(gx);
            }
            let dy0 = &self.y0 - &self.reference;
            p += 2.0 * (y_z.transpose() * &self.q_w * &y_z
                + self.lambda_g * g_z.transpose() * &g_z);
            c += 2.0 * (y_z.transpose() * (&self.q_w * &dy0)
                + self.lambda_g * g_z.transpose() * &self.g0);
            e += (dy0.transpose() * &self.q_w * &dy0)[(0, 0)]
                + self.lambda_g * self.g0.norm_squared();
        }
        p = (&p + p.transpose()) * 0.5;
        (p, c, e)
    }
}

/// Result of a robust solve.
#[derive(Debug, Clone)]
pub struct MinMaxSolution {
    /// First `k*m` inputs to apply (the nominal `v` for the DF variant).
    pub inputs: DVector<f64>,
    /// Full nominal input plan (`u` or `v`).
    pub plan: DVector<f64>,
    /// Disturbance-feedback gains, present for the DF variant.
    pub policy: Option<DfPolicy>,
    pub sigma_y: DVector<f64>,
    pub worst_case_value: f64,
    pub active_vertex: usize,
    pub iterations: usize,
    pub gap: f64,
    /// Full first-stage decision, usable to warm start the next solve.
    pub z: DVector<f64>,
}

fn shared_checks(blocks: &DataBlocks, cfg: &MinMaxConfig) -> Result<()> {
    cfg.base.validate(blocks.m, blocks.p)?;
    cfg.disturbance.validate(blocks.q, blocks.horizon)?;
    if blocks.t_ini != cfg.base.t_ini || blocks.horizon != cfg.base.horizon {
        return Err(Error::InvalidParameter(format!(
            "blocks built for (T_ini, N) = ({}, {}), config wants ({}, {})",
            blocks.t_ini, blocks.horizon, cfg.base.t_ini, cfg.base.horizon
        )));
    }
    Ok(())
}

fn measured_offsets(
    pred: &RelaxedPredictor,
    ini: &IniBuffer,
) -> Result<DVector<f64>> {
    let u_ini = ini.u_ini()?;
    let w_ini = ini.w_ini()?;
    let y_ini = ini.y_ini()?;
    let mut rhs0 = DVector::zeros(pred.rows.total());
    rhs0.rows_mut(0, pred.rows.u_ini).copy_from(&u_ini);
    rhs0.rows_mut(pred.rows.u_ini, pred.rows.w_ini).copy_from(&w_ini);
    rhs0.rows_mut(pred.rows.u_ini + pred.rows.w_ini, pred.rows.y_ini).copy_from(&y_ini);
    Ok(&pred.h_pinv * rhs0)
}

fn assemble_problem(
    blocks: &DataBlocks,
    cfg: &MinMaxConfig,
    ini: &IniBuffer,
    df: bool,
) -> Result<MinMaxProblem> {
    shared_checks(blocks, cfg)?;
    if df && !cfg.fix_x_to_zero {
        return Err(Error::InvalidParameter(
            "the DF variant always pins the free component to zero".into(),
        ));
    }
    let pred = build_relaxed_predictor(blocks, cfg)?;
    let m_n = blocks.m * blocks.horizon;
    let layout = ZLayout {
        input: m_n,
        theta: if df { blocks.m * blocks.q * (blocks.horizon - 1) } else { 0 },
        sigma_y: blocks.p * blocks.t_ini,
        sigma_w: if cfg.sigma_w.is_some() { blocks.q * blocks.t_ini } else { 0 },
        free_x: if cfg.fix_x_to_zero { 0 } else { blocks.h_c },
    };
    let dim = layout.dim();
    let g0 = measured_offsets(&pred, ini)?;

    let vertices = enumerate_vertices(&cfg.disturbance, blocks.q, blocks.horizon)?;
    let mut u_of_z = Vec::new();
    let mut input_selector = DMatrix::zeros(m_n, dim);
    input_selector
        .view_mut((0, layout.input_at()), (m_n, m_n))
        .copy_from(&DMatrix::identity(m_n, m_n));
    if df {
        for w in &vertices {
            let w_hat = &pred.interp * w;
            let coupling = theta_coupling(blocks.m, blocks.q, blocks.horizon, &w_hat);
            let mut u_map = input_selector.clone();
            u_map
                .view_mut((0, layout.theta_at()), (m_n, layout.theta))
                .copy_from(&coupling);
            u_of_z.push(u_map);
        }
    } else {
        u_of_z.push(input_selector);
    }

    let y0 = &blocks.y_f * &g0;
    let y_u = &blocks.y_f * &pred.g_u;
    let y_sy = &blocks.y_f * &pred.g_sigma_y;
    let y_sw = &blocks.y_f * &pred.g_sigma_w;
    let y_w = &blocks.y_f * &pred.g_wtilde;
    let (g_x, y_x) = match &pred.h_perp {
        Some(h_perp) => {
            let yx = &blocks.y_f * h_perp;
            (Some(h_perp.clone()), Some(yx))
        }
        None => (None, None),
    };

    let mut problem = MinMaxProblem {
        layout,
        vertices,
        u_of_z,
        g0,
        g_u: pred.g_u,
        g_sy: pred.g_sigma_y,
        g_sw: pred.g_sigma_w,
        g_x,
        g_w: pred.g_wtilde,
        y0,
        y_u,
        y_sy,
        y_sw,
        y_x,
        y_w,
        interp: pred.interp,
        r_w: cfg.base.r.clone(),
        q_w: cfg.base.q.clone(),
        reference: cfg.base.reference.clone(),
        lambda_g: if df { 0.0 } else { cfg.base.lambda_g },
        lambda_y: cfg.base.lambda_y,
        lambda_w: cfg.sigma_w.unwrap_or(0.0),
        constraints_g: DMatrix::zeros(0, dim),
        constraints_h: DVector::zeros(0),
        common_hessian: !df,
        control_horizon: cfg.base.control_horizon,
        m: blocks.m,
        q: blocks.q,
        horizon: blocks.horizon,
        tol: cfg.robust_tol,
        max_iter: cfg.robust_max_iter,
        solver: cfg.base.solver.clone(),
    };
    let (g, h) = vertex_constraints(&cfg.base, &problem);
    problem.constraints_g = g;
    problem.constraints_h = h;
    Ok(problem)
}

/// Linear rows valid for every vertex: the input box on the effective input
/// and the output box on the per-vertex output prediction. Infinite bounds
/// contribute no rows.
fn vertex_constraints(base: &DeePCConfig, problem: &MinMaxProblem) -> (DMatrix<f64>, DVector<f64>) {
    let dim = problem.layout.dim();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let input_bounded = base.u_min.is_finite() || base.u_max.is_finite();
    let output_bounded = base.y_min.is_finite() || base.y_max.is_finite();

    let vertex_count = if problem.u_of_z.len() > 1 || output_bounded {
        problem.vertices.len()
    } else {
        1
    };
    for v_ix in 0..vertex_count {
        let u_map = problem.u_map(v_ix);
        if input_bounded && (v_ix == 0 || problem.u_of_z.len() > 1) {
            for r in 0..u_map.nrows() {
                let row = u_map.row(r).transpose();
                if base.u_max.is_finite() {
                    rows.push((row.clone(), base.u_max));
                }
                if base.u_min.is_finite() {
                    rows.push((-&row, -base.u_min));
                }
            }
        }
        if output_bounded {
            let w = &problem.vertices[v_ix];
            let offset = &problem.y0 + &problem.y_w * w;
            let y_z = problem.output_jacobian(v_ix);
            for r in 0..y_z.nrows() {
                let row = y_z.row(r).transpose();
                if base.y_max.is_finite() {
                    rows.push((row.clone(), base.y_max - offset[r]));
                }
                if base.y_min.is_finite() {
                    rows.push((-&row, offset[r] - base.y_min));
                }
            }
        }
    }

    let mut g = DMatrix::zeros(rows.len(), dim);
    let mut h = DVector::zeros(rows.len());
    for (i, (row, bound)) in rows.iter().enumerate() {
        g.row_mut(i).copy_from(&row.transpose());
        h[i] = *bound;
    }
    (g, h)
}

/// Assemble the plain min-max problem: the decision is `(u, sigma_y)` plus
/// optional slack and free components, and every vertex contributes one
/// convex quadratic sharing a common Hessian.
pub fn minmax_formulate(
    blocks: &DataBlocks,
    cfg: &MinMaxConfig,
    ini: &IniBuffer,
) -> Result<MinMaxProblem> {
    assemble_problem(blocks, cfg, ini, false)
}

/// Assemble the disturbance-feedback problem: the decision is
/// `(v, theta, sigma_y)` with `u = v + L(theta) w_hat` per vertex and the
/// regularization of `g` dropped.
pub fn df_minmax_formulate(
    blocks: &DataBlocks,
    cfg: &MinMaxConfig,
    ini: &IniBuffer,
) -> Result<MinMaxProblem> {
    assemble_problem(blocks, cfg, ini, true)
}

/// Cutting-plane minimization of `max_v f_v(z)` over the linear constraint
/// set: the master QP carries the vertex-independent quadratic and
/// accumulates one linearization of the most-violated vertex per round,
/// stopping when the epigraph gap drops below the relative tolerance.
pub fn minmax_solve(problem: &MinMaxProblem, warm: Option<&DVector<f64>>) -> Result<MinMaxSolution> {
    let dim = problem.layout.dim();
    let (p_base, c_base, e_base) = problem.base_quadratic();

    let start = match warm {
        Some(w) if w.len() == dim => w.clone(),
        _ => DVector::zeros(dim),
    };
    let mut trust = 1e2_f64;
    // The common-Hessian variant has affine remainders whose cuts are exact,
    // so the plain master certifies optimality through the epigraph gap. The
    // DF variant has vertex-dependent curvature and runs as a variable-metric
    // proximal bundle: the prox metric borrows the worst vertex's tracking
    // Hessian so each master behaves like an SQP step.
    let prox_metric = |v_ix: usize| -> DMatrix<f64> {
        let j = problem.output_jacobian(v_ix);
        let mut m = 2.0 * j.transpose() * &problem.q_w * &j;
        let tau = 1e-6 * (1.0 + m.diagonal().amax());
        for i in 0..dim {
            m[(i, i)] += tau;
        }
        (&m + m.transpose()) * 0.5
    };

    let worst_at = |z: &DVector<f64>| -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for v in 0..problem.num_vertices() {
            let f = problem.evaluate(z, v);
            if f > best.1 {
                best = (v, f);
            }
        }
        best
    };
    let base_at = |z: &DVector<f64>| -> (f64, DVector<f64>) {
        let pz = &p_base * z;
        (0.5 * pz.dot(z) + c_base.dot(z) + e_base, pz + &c_base)
    };

    // Accumulated cuts: t >= cut_c[j] + cut_g[j] . z
    let mut cut_g: Vec<DVector<f64>> = Vec::new();
    let mut cut_c: Vec<f64> = Vec::new();
    let add_cut = |z: &DVector<f64>,
                   v: usize,
                   cut_g: &mut Vec<DVector<f64>>,
                   cut_c: &mut Vec<f64>| {
        let (b, bg) = base_at(z);
        let grad = problem.gradient(z, v) - bg;
        cut_c.push(problem.evaluate(z, v) - b - grad.dot(z));
        cut_g.push(grad);
    };
    let (v0, _) = worst_at(&start);
    add_cut(&start, v0, &mut cut_g, &mut cut_c);

    let mut center = start;
    let mut center_feasible = problem.constraints_g.nrows() == 0;
    let mut gap = f64::INFINITY;
    let mut master_warm: Option<crate::qp::QpWarmStart> = None;

    let finish = |z: DVector<f64>, iterations: usize, gap: f64| -> MinMaxSolution {
        let (v_act, f_act) = worst_at(&z);
        let sigma_y = z.rows(problem.layout.sigma_y_at(), problem.layout.sigma_y).into_owned();
        let plan = z.rows(problem.layout.input_at(), problem.layout.input).into_owned();
        let policy = if problem.is_disturbance_feedback() {
            Some(DfPolicy {
                v: plan.clone(),
                gains: unpack_gains(&z, problem.layout.theta_at(), problem.m, problem.q, problem.horizon),
            })
        } else {
            None
        };
        MinMaxSolution {
            inputs: plan.rows(0, problem.control_horizon * problem.m).into_owned(),
            plan,
            policy,
            sigma_y,
            worst_case_value: f_act,
            active_vertex: v_act,
            iterations,
            gap: gap.max(0.0),
            z,
        }
    };

    for iter in 0..problem.max_iter {
        let n_cuts = cut_g.len();
        let fixed_rows = problem.constraints_g.nrows();
        let rows = fixed_rows + n_cuts + 2 * dim;
        let mut g = DMatrix::zeros(rows, dim + 1);
        let mut h = DVector::zeros(rows);
        g.view_mut((0, 0), (fixed_rows, dim)).copy_from(&problem.constraints_g);
        h.rows_mut(0, fixed_rows).copy_from(&problem.constraints_h);
        for j in 0..n_cuts {
            for i in 0..dim {
                g[(fixed_rows + j, i)] = cut_g[j][i];
            }
            g[(fixed_rows + j, dim)] = -1.0;
            h[fixed_rows + j] = -cut_c[j];
        }
        for i in 0..dim {
            let at = fixed_rows + n_cuts + 2 * i;
            g[(at, i)] = 1.0;
            h[at] = center[i] + trust;
            g[(at + 1, i)] = -1.0;
            h[at + 1] = -(center[i] - trust);
        }

        let mut p_master = DMatrix::zeros(dim + 1, dim + 1);
        p_master.view_mut((0, 0), (dim, dim)).copy_from(&p_base);
        let mut c_master = DVector::zeros(dim + 1);
        c_master.rows_mut(0, dim).copy_from(&c_base);
        c_master[dim] = 1.0;
        let metric = if problem.common_hessian {
            None
        } else {
            let (v_c, _) = worst_at(&center);
            let m = prox_metric(v_c);
            p_master.view_mut((0, 0), (dim, dim)).copy_from(&(&p_base + &m));
            let shift = &m * &center;
            for i in 0..dim {
                c_master[i] -= shift[i];
            }
            Some(m)
        };
        // Hair of curvature on the epigraph variable; the active cut pins t
        // long before the unconstrained minimizer could matter.
        p_master[(dim, dim)] = 1e-9 * (1.0 + p_base.amax());

        let qp = QuadraticProgram {
            p: p_master,
            c: c_master,
            a_eq: DMatrix::zeros(0, dim + 1),
            b_eq: DVector::zeros(0),
            g,
            h,
        };
        let mut master_settings = problem.solver.clone();
        master_settings.tol = (problem.tol * 1e-2).clamp(1e-12, 1e-8);
        let sol = solve_qp(&qp, &master_settings, master_warm.as_ref())?;
        // An inexact master iterate is still a usable bundle step as long as
        // its residuals are reasonable; only hard failures abort.
        let usable = sol.status == QpStatus::Optimal
            || (sol.status == QpStatus::MaxIterations
                && sol.primal_residual.max(sol.dual_residual)
                    <= 1e-5 * (1.0 + problem.constraints_h.amax()));
        if !usable {
            return Err(Error::SolverFailure {
                status: sol.status.as_str(),
                detail: format!(
                    "robust master returned {} at round {iter} (primal {:.3e}, dual {:.3e}, {} iterations)",
                    sol.status.as_str(),
                    sol.primal_residual,
                    sol.dual_residual,
                    sol.iterations
                ),
            });
        }
        let z = sol.z.rows(0, dim).into_owned();
        let t = sol.z[dim];
        master_warm = Some(crate::qp::QpWarmStart { z: sol.z.clone(), duals: DVector::zeros(0) });
        let (v_worst, f_worst) = worst_at(&z);
        let (bz, _) = base_at(&z);
        let trust_hit = (0..dim).any(|i| (z[i] - center[i]).abs() >= trust * (1.0 - 1e-9));

        if problem.common_hessian {
            // Exact regime: the model matches the objective once every
            // active vertex contributed its (affine) cut.
            gap = f_worst - (bz + t);
            if gap <= problem.tol * (1.0 + f_worst.abs()) && !trust_hit {
                return Ok(finish(z, iter + 1, gap));
            }
            if trust_hit {
                trust = (trust * 10.0).min(1e9);
            }
            add_cut(&z, v_worst, &mut cut_g, &mut cut_c);
            center = z;
        } else {
            // Bundle regime: predicted descent from the incumbent decides
            // both termination and the serious/null step.
            let step = &z - &center;
            let prox = match &metric {
                Some(m) => 0.5 * (step.transpose() * m * &step)[(0, 0)],
                None => 0.0,
            };
            let model = bz + t + prox;
            if center_feasible {
                let (_, f_center) = worst_at(&center);
                let descent = f_center - model;
                gap = descent;
                let threshold = problem.tol * (1.0 + f_center.abs());
                // Done when the model predicts no useful descent, or when an
                // SQP-quality step achieved nothing and stayed local.
                let stalled =
                    (f_center - f_worst).abs() <= threshold && prox <= 10.0 * threshold;
                if (descent <= threshold || stalled) && !trust_hit {
                    let best = if f_worst < f_center { z } else { center };
                    return Ok(finish(best, iter + 1, descent.min(gap)));
                }
                add_cut(&z, v_worst, &mut cut_g, &mut cut_c);
                if f_worst <= f_center - 0.3 * descent.max(0.0) {
                    center = z;
                }
            } else {
                add_cut(&z, v_worst, &mut cut_g, &mut cut_c);
                center = z;
                center_feasible = true;
            }
            if trust_hit {
                trust = (trust * 10.0).min(1e9);
            }
        }
    }

    Err(Error::SolverFailure {
        status: "max-iterations",
        detail: format!(
            "cutting-plane loop exhausted {} rounds with gap {:.3e}",
            problem.max_iter, gap
        ),
    })
}

fn unpack_gains(z: &DVector<f64>, at: usize, m: usize, q: usize, horizon: usize) -> Vec<DMatrix<f64>> {
    (0..horizon.saturating_sub(1))
        .map(|d| DMatrix::from_fn(m, q, |r, c| z[at + d * m * q + r * q + c]))
        .collect()
}

/// Formulate-and-solve convenience for the plain min-max controller.
pub fn minmax_step(
    blocks: &DataBlocks,
    cfg: &MinMaxConfig,
    ini: &IniBuffer,
    warm: Option<&DVector<f64>>,
) -> Result<MinMaxSolution> {
    let problem = minmax_formulate(blocks, cfg, ini)?;
    minmax_solve(&problem, warm)
}

/// Formulate-and-solve for the disturbance-feedback variant; the applied
/// inputs are the first `k` entries of the nominal plan `v`.
pub fn df_minmax_solve(
    blocks: &DataBlocks,
    cfg: &MinMaxConfig,
    ini: &IniBuffer,
    warm: Option<&DVector<f64>>,
) -> Result<MinMaxSolution> {
    let problem = df_minmax_formulate(blocks, cfg, ini)?;
    minmax_solve(&problem, warm)
}

/// Receding-horizon wrapper: keeps the warm-start decision between solves.
pub struct MinMaxController {
    blocks: DataBlocks,
    cfg: MinMaxConfig,
    df: bool,
    warm: Option<DVector<f64>>,
}

impl MinMaxController {
    pub fn new(blocks: DataBlocks, cfg: MinMaxConfig, df: bool) -> Result<Self> {
        cfg.base.validate(blocks.m, blocks.p)?;
        cfg.disturbance.validate(blocks.q, blocks.horizon)?;
        Ok(Self { blocks, cfg, df, warm: None })
    }

    pub fn config(&self) -> &MinMaxConfig {
        &self.cfg
    }

    pub fn is_disturbance_feedback(&self) -> bool {
        self.df
    }

    pub fn step(&mut self, ini: &IniBuffer) -> Result<MinMaxSolution> {
        let sol = if self.df {
            df_minmax_solve(&self.blocks, &self.cfg, ini, self.warm.as_ref())?
        } else {
            minmax_step(&self.blocks, &self.cfg, ini, self.warm.as_ref())?
        };
        self.warm = Some(sol.z.clone());
        Ok(sol)
    }
}
