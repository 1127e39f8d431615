//! Trajectory storage, Hankel/Page data matrices, excitation and
//! identifiability rank checks, past/future partitioning, and SVD-based
//! Page-matrix denoising.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, RANK_REL_TOL};

/// Multi-channel, uniformly sampled signal record stored time-major:
/// sample `t` occupies scalars `[t*c, (t+1)*c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    channels: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn empty(channels: usize) -> Self {
        assert!(channels >= 1, "trajectory needs at least one channel");
        Self { channels, data: Vec::new() }
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        assert!(channels >= 1);
        Self { channels, data: vec![0.0; channels * len] }
    }

    pub fn from_fn(channels: usize, len: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * len);
        for t in 0..len {
            for ch in 0..channels {
                data.push(f(t, ch));
            }
        }
        Self { channels, data }
    }

    /// Wrap raw time-major data; its length must be a multiple of `channels`.
    pub fn from_data(channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() % channels != 0 {
            return Err(Error::dim("trajectory data length", channels, data.len()));
        }
        Ok(Self { channels, data })
    }

    /// Split a stacked column `col(x_0, ..., x_{T-1})` into a trajectory.
    pub fn from_stacked(channels: usize, stacked: &DVector<f64>) -> Result<Self> {
        Self::from_data(channels, stacked.iter().copied().collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sample(&self, t: usize) -> DVector<f64> {
        let c = self.channels;
        DVector::from_column_slice(&self.data[t * c..(t + 1) * c])
    }

    pub fn set_sample(&mut self, t: usize, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.channels {
            return Err(Error::dim("sample channels", self.channels, v.len()));
        }
        let c = self.channels;
        self.data[t * c..(t + 1) * c].copy_from_slice(v.as_slice());
        Ok(())
    }

    pub fn push(&mut self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.channels {
            return Err(Error::dim("sample channels", self.channels, v.len()));
        }
        self.data.extend_from_slice(v.as_slice());
        Ok(())
    }

    /// Contiguous sub-trajectory of `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Trajectory {
        let c = self.channels;
        Trajectory { channels: c, data: self.data[start * c..(start + len) * c].to_vec() }
    }

    /// New trajectory holding the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Trajectory> {
        if channels.is_empty() {
            return Err(Error::InvalidParameter("channel selection is empty".into()));
        }
        for &ch in channels {
            if ch >= self.channels {
                return Err(Error::dim("channel index", self.channels, ch));
            }
        }
        let mut out = Trajectory::empty(channels.len());
        for t in 0..self.len() {
            let v = DVector::from_iterator(
                channels.len(),
                channels.iter().map(|&ch| self.data[t * self.channels + ch]),
            );
            out.push(&v)?;
        }
        Ok(out)
    }

    /// The stacked column `col(x_0, ..., x_{T-1})`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    /// Write as CSV `t,ch0,ch1,...` with the time column in seconds.
    pub fn write_csv<W: Write>(&self, ts: f64, out: &mut W) -> Result<()> {
        write!(out, "t")?;
        for ch in 0..self.channels {
            write!(out, ",ch{ch}")?;
        }
        out.write_all(b"\n")?;
        for t in 0..self.len() {
            write!(out, "{}", t as f64 * ts)?;
            for ch in 0..self.channels {
                write!(out, ",{}", self.data[t * self.channels + ch])?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Read the CSV form produced by [`Trajectory::write_csv`]. Returns the
    /// trajectory and the sampling period inferred from the time column
    /// (1.0 when fewer than two rows are present).
    pub fn read_csv<R: BufRead>(reader: R) -> Result<(Trajectory, f64)> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::CsvParse { line: 1, msg: "empty file".into() })?;
        let header = header?;
        let channels = header.split(',').count().saturating_sub(1);
        if channels == 0 {
            return Err(Error::CsvParse { line: 1, msg: "expected header t,ch0,...".into() });
        }
        let mut traj = Trajectory::empty(channels);
        let mut times = Vec::new();
        for (ix, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != channels + 1 {
                return Err(Error::CsvParse {
                    line: ix + 1,
                    msg: format!("expected {} fields, got {}", channels + 1, fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|e| Error::CsvParse {
                    line: ix + 1,
                    msg: format!("bad number {s:?}: {e}"),
                })
            };
            times.push(parse(fields[0])?);
            let v = fields[1..].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
            traj.push(&DVector::from_vec(v))?;
        }
        let ts = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
        Ok((traj, ts))
    }
}

/// Data-matrix structure used as the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Hankel,
    Page,
}

/// Block Hankel matrix of depth `L`: column `j` is `col(x_j, ..., x_{j+L-1})`.
pub fn hankel(traj: &Trajectory, depth: usize) -> Result<DMatrix<f64>> {
    let t = traj.len();
    let c = traj.channels();
    if depth == 0 || depth > t {
        return Err(Error::InvalidParameter(format!("hankel depth {depth} outside 1..={t}")));
    }
    let cols = t - depth + 1;
    Ok(DMatrix::from_fn(c * depth, cols, |row, col| {
        let (i, r) = (row / c, row % c);
        traj.data()[(i + col) * c + r]
    }))
}

/// Block Page matrix of depth `L`: column `j` is `col(x_{jL}, ..., x_{jL+L-1})`;
/// no entry is repeated. Requires the length to be a multiple of `L`.
pub fn page(traj: &Trajectory, depth: usize) -> Result<DMatrix<f64>> {
    let t = traj.len();
    let c = traj.channels();
    if depth == 0 || t == 0 || t % depth != 0 {
        return Err(Error::InvalidParameter(format!(
            "page depth {depth} must divide trajectory length {t}"
        )));
    }
    let cols = t / depth;
    Ok(DMatrix::from_fn(c * depth, cols, |row, col| {
        let (i, r) = (row / c, row % c);
        traj.data()[(col * depth + i) * c + r]
    }))
}

/// Persistency of excitation of order `L`: the depth-`L` Hankel matrix has
/// full row rank. Fails fast on the necessary condition `T >= (m+1)L - 1`.
pub fn is_persistently_exciting(u: &Trajectory, order: usize) -> bool {
    let m = u.channels();
    let t = u.len();
    if order == 0 || t + 1 < (m + 1) * order {
        return false;
    }
    let h = hankel(u, order).expect("depth fits: T >= (m+1)L - 1 >= L");
    numerical_rank(&h, RANK_REL_TOL) == h.nrows()
}

/// Joint identifiability condition: the depth-`L` Hankel of the interleaved
/// `(u, y)` record has numerical rank exactly `m*L + n`.
pub fn check_identifiability_rank(
    u: &Trajectory,
    y: &Trajectory,
    depth: usize,
    n: usize,
) -> Result<bool> {
    if u.len() != y.len() {
        return Err(Error::dim("trajectory lengths", u.len(), y.len()));
    }
    let m = u.channels();
    let p = y.channels();
    let joint = Trajectory::from_fn(m + p, u.len(), |t, ch| {
        if ch < m {
            u.data()[t * m + ch]
        } else {
            y.data()[t * p + (ch - m)]
        }
    });
    let h = hankel(&joint, depth)?;
    Ok(numerical_rank(&h, RANK_REL_TOL) == m * depth + n)
}

/// Partitioned data-matrix predictor: past/future blocks sharing `H_c` columns.
#[derive(Debug, Clone)]
pub struct DataBlocks {
    pub u_p: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub w_p: Option<DMatrix<f64>>,
    pub w_f: Option<DMatrix<f64>>,
    pub t_ini: usize,
    pub horizon: usize,
    pub h_c: usize,
    pub kind: MatrixKind,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

impl DataBlocks {
    pub fn has_disturbance(&self) -> bool {
        self.q > 0
    }
}

fn split_past_future(
    block: DMatrix<f64>,
    channels: usize,
    t_ini: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let past = block.rows(0, channels * t_ini).into_owned();
    let future = block.rows(channels * t_ini, block.nrows() - channels * t_ini).into_owned();
    (past, future)
}

/// Build the partitioned predictor from recorded trajectories. The first
/// `t_ini` block-rows of each depth-`t_ini + horizon` data matrix form the
/// past blocks, the remaining `horizon` block-rows the future blocks.
pub fn partition(
    u: &Trajectory,
    y: &Trajectory,
    w: Option<&Trajectory>,
    t_ini: usize,
    horizon: usize,
    kind: MatrixKind,
) -> Result<DataBlocks> {
    if u.len() != y.len() {
        return Err(Error::dim("trajectory lengths", u.len(), y.len()));
    }
    if let Some(w) = w {
        if w.len() != u.len() {
            return Err(Error::dim("disturbance length", u.len(), w.len()));
        }
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("prediction horizon must be at least 1".into()));
    }
    let depth = t_ini + horizon;
    let build = |traj: &Trajectory| -> Result<DMatrix<f64>> {
        match kind {
            MatrixKind::Hankel => hankel(traj, depth),
            MatrixKind::Page => page(traj, depth),
        }
    };
    let hu = build(u)?;
    let hy = build(y)?;
    let h_c = hu.ncols();
    let (u_p, u_f) = split_past_future(hu, u.channels(), t_ini);
    let (y_p, y_f) = split_past_future(hy, y.channels(), t_ini);
    let (w_p, w_f, q) = match w {
        Some(w) => {
            let (wp, wf) = split_past_future(build(w)?, w.channels(), t_ini);
            (Some(wp), Some(wf), w.channels())
        }
        None => (None, None, 0),
    };
    Ok(DataBlocks {
        u_p,
        u_f,
        y_p,
        y_f,
        w_p,
        w_f,
        t_ini,
        horizon,
        h_c,
        kind,
        m: u.channels(),
        p: y.channels(),
        q,
    })
}

/// Zero out singular values strictly below `sigma0` and reconstruct.
/// `sigma0 = 0` reproduces the input to numerical accuracy.
pub fn svd_denoise_page(matrix: &DMatrix<f64>, sigma0: f64) -> Result<DMatrix<f64>> {
    if sigma0 < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "denoising threshold must be non-negative, got {sigma0}"
        )));
    }
    let svd = nalgebra::SVD::new(matrix.clone(), true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut truncated = svd.singular_values.clone();
    for s in truncated.iter_mut() {
        if *s < sigma0 {
            *s = 0.0;
        }
    }
    let mut scaled_vt = vt.clone();
    for (i, s) in truncated.iter().enumerate() {
        scaled_vt.row_mut(i).scale_mut(*s);
    }
    Ok(u * scaled_vt)
}

/// Interleave `p` per-channel matrices into one block matrix: row `i*p + r`
/// of the result is row `i` of channel `r`'s matrix.
pub fn stack_denoised_outputs(per_channel: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let p = per_channel.len();
    if p == 0 {
        return Err(Error::InvalidParameter("no channel matrices supplied".into()));
    }
    let (rows, cols) = per_channel[0].shape();
    for m in per_channel {
        if m.shape() != (rows, cols) {
            return Err(Error::dim("channel matrix rows", rows, m.nrows()));
        }
    }
    Ok(DMatrix::from_fn(rows * p, cols, |row, col| {
        let (i, r) = (row / p, row % p);
        per_channel[r][(i, col)]
    }))
}

/// Apply per-output-channel SVD denoising to the stacked `col(Y_P, Y_F)`
/// blocks of a Page-kind predictor. Denoising a Hankel-kind predictor
/// destroys its sliding-window structure, so it is refused unless
/// `allow_hankel` is set.
pub fn denoise_outputs(blocks: &DataBlocks, sigma0: f64, allow_hankel: bool) -> Result<DataBlocks> {
    if blocks.kind == MatrixKind::Hankel && !allow_hankel {
        return Err(Error::InvalidParameter(
            "SVD denoising of Hankel-kind blocks requires the explicit unsafe flag".into(),
        ));
    }
    let p = blocks.p;
    let depth = blocks.t_ini + blocks.horizon;
    let stacked = crate::linalg::vstack(&[&blocks.y_p, &blocks.y_f]);
    let mut denoised = Vec::with_capacity(p);
    for r in 0..p {
        let channel = DMatrix::from_fn(depth, blocks.h_c, |i, j| stacked[(i * p + r, j)]);
        denoised.push(svd_denoise_page(&channel, sigma0)?);
    }
    let restacked = stack_denoised_outputs(&denoised)?;
    let (y_p, y_f) = split_past_future(restacked, p, blocks.t_ini);
    Ok(DataBlocks { y_p, y_f, ..blocks.clone() })
}
