//! Shared test support: independent oracles kept deliberately separate from
//! the library's solver paths.

use nalgebra::{DMatrix, DVector};

/// Independent active-set solver for box-constrained strictly convex QPs
/// `min 1/2 z'Pz + c'z  s.t. lo <= z <= hi`.
///
/// Guesses the active set from the semismooth-Newton indicator `z - g`,
/// solves the free block exactly, and iterates until the set is stable and
/// the KKT conditions hold. Falls back to a long projected-gradient run
/// plus a final exact solve if the set iteration cycles.
pub fn solve_box_qp_oracle(
    p: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let n = c.len();
    let clamp = |z: &mut DVector<f64>| {
        for i in 0..n {
            z[i] = z[i].max(lo[i]).min(hi[i]);
        }
    };

    let solve_on_sets = |state: &[u8]| -> DVector<f64> {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        let mut z = DVector::zeros(n);
        for i in 0..n {
            if state[i] == 1 {
                z[i] = lo[i];
            } else if state[i] == 2 {
                z[i] = hi[i];
            }
        }
        if !free.is_empty() {
            let nf = free.len();
            let pff = DMatrix::from_fn(nf, nf, |a, b| p[(free[a], free[b])]);
            let mut rhs = DVector::from_fn(nf, |a, _| -c[free[a]]);
            for a in 0..nf {
                for j in 0..n {
                    if state[j] != 0 {
                        rhs[a] -= p[(free[a], j)] * z[j];
                    }
                }
            }
            let zf = pff.cholesky().expect("strictly convex free block").solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                z[i] = zf[a];
            }
        }
        z
    };

    let kkt_ok = |z: &DVector<f64>, state: &[u8]| -> bool {
        let g = p * z + c;
        let scale = 1.0 + g.amax();
        (0..n).all(|i| match state[i] {
            0 => g[i].abs() <= 1e-8 * scale && z[i] >= lo[i] - 1e-9 && z[i] <= hi[i] + 1e-9,
            1 => g[i] >= -1e-8 * scale,
            _ => g[i] <= 1e-8 * scale,
        })
    };

    // Start from the clamped unconstrained minimum.
    let mut z = p
        .clone()
        .cholesky()
        .expect("strictly convex")
        .solve(&(-c));
    clamp(&mut z);
    let mut state: Vec<u8> = (0..n)
        .map(|i| {
            if z[i] <= lo[i] {
                1
            } else if z[i] >= hi[i] {
                2
            } else {
                0
            }
        })
        .collect();

    let mut seen: Vec<Vec<u8>> = Vec::new();
    for _ in 0..200 {
        let z_try = solve_on_sets(&state);
        let g = p * &z_try + c;
        let next: Vec<u8> = (0..n)
            .map(|i| {
                let w = z_try[i] - g[i];
                if w < lo[i] {
                    1
                } else if w > hi[i] {
                    2
                } else {
                    0
                }
            })
            .collect();
        if next == state {
            if kkt_ok(&z_try, &state) {
                return z_try;
            }
            break;
        }
        if seen.contains(&next) {
            break;
        }
        seen.push(state.clone());
        state = next;
    }

    // Fallback: accelerated projected gradient, then one exact solve on the
    // active set it identifies.
    let lip = p.norm() + 1e-12;
    let step = 1.0 / lip;
    let mut zk = z.clone();
    let mut yk = z;
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let grad = p * &yk + c;
        let mut z_next = &yk - step * grad;
        clamp(&mut z_next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = &z_next + ((t - 1.0) / t_next) * (&z_next - &zk);
        clamp(&mut yk);
        if (&z_next - &zk).amax() < 1e-15 {
            zk = z_next;
            break;
        }
        zk = z_next;
        t = t_next;
    }
    let state: Vec<u8> = (0..n)
        .map(|i| {
            if zk[i] - lo[i] < 1e-7 {
                1
            } else if hi[i] - zk[i] < 1e-7 {
                2
            } else {
                0
            }
        })
        .collect();
    let z_final = solve_on_sets(&state);
    assert!(kkt_ok(&z_final, &state), "oracle failed to certify KKT");
    z_final
}

/// Random strictly convex QP with a feasible box, for oracle comparisons.
pub fn random_box_qp(
    rng: &mut impl rand::Rng,
    n: usize,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &m * m.transpose() + DMatrix::identity(n, n) * rng.random_range(0.1..2.0);
    let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let center = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let width = DVector::from_fn(n, |_, _| rng.random_range(0.05..2.0));
    let lo = &center - &width;
    let hi = &center + &width;
    (p, c, lo, hi)
}
