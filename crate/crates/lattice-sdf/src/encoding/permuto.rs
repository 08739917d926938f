//! Permutohedral lattice hash encoding with analytic derivatives.
//!
//! The lattice A*_d tiles the hyperplane H_d = {y in R^(d+1) : sum y_i = 0}
//! with uniform simplices of exactly d+1 vertices. A vertex is a
//! "remainder-k" point: integer coordinates summing to zero, all congruent
//! to k modulo d+1. Inputs are elevated onto H_d by a linear map, the
//! containing simplex is found in O(d^2), and features hashed from the d+1
//! vertices are blended barycentrically.
//!
//! Elevation matrix. With columns indexed by j = 1..d, the map is
//! y = B * diag(sigma) * (scale * x), where
//!
//!   B[i][j] = 1 for i < j,  B[j][j] = -j,  B[i][j] = 0 for i > j
//!   sigma_j = (d+1) / sqrt(j*(j+1))
//!
//! Every column of B sums to zero (so y lands on H_d), columns are mutually
//! orthogonal with |B e_j| = sqrt(j*(j+1)), hence the scaled columns all have
//! norm d+1. Remainder-0 lattice points are (d+1) * (A_d root lattice), with
//! nearest-neighbor spacing sqrt(d*(d+1)), so one unit of scaled input moves
//! roughly one simplex edge: scale ~= lattice resolution per input unit.

use super::hash::hash_vertex;
use super::{
    as_atomic_f64, atomic_add_f64, check_window, check_xs, BatchEncoder, EncodeStats,
    FeatureTable, LatticeConfig, SimplexFootprint, BOUNDARY_TOL, MAX_D,
};
use crate::error::{Error, Result};
use rayon::prelude::*;

const MAX_DP1: usize = MAX_D + 1;

/// Simplex location for one elevated point: the nearest remainder-0 corner,
/// the residual ranking that identifies the simplex, and barycentric weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Located {
    pub rem0: [i32; MAX_DP1],
    pub rank: [u8; MAX_DP1],
    /// Barycentric weights for vertices k = 0..=d (index d+1 is scratch).
    pub bary: [f64; MAX_DP1 + 1],
}

impl Located {
    /// Coordinate i of the remainder-k vertex of the located simplex.
    #[inline]
    pub fn vertex_coord(&self, k: usize, i: usize, d: usize) -> i32 {
        let mut c = self.rem0[i] + k as i32;
        if self.rank[i] as usize > d - k {
            c -= (d + 1) as i32;
        }
        c
    }

    #[inline]
    pub fn min_weight(&self, d: usize) -> f64 {
        let mut m = f64::INFINITY;
        for k in 0..=d {
            m = m.min(self.bary[k]);
        }
        m
    }
}

/// Elevation scale factors sigma_j for j = 1..=d (see module docs).
#[inline]
fn sigma(d: usize) -> [f64; MAX_D] {
    let mut s = [0.0; MAX_D];
    for m in 0..d {
        let j = (m + 1) as f64;
        s[m] = (d + 1) as f64 / (j * (j + 1.0)).sqrt();
    }
    s
}

#[inline]
pub(crate) fn elevate_into(x: &[f64], scale: f64, d: usize, sf: &[f64; MAX_D], y: &mut [f64]) {
    let mut sm = 0.0;
    for m in (1..=d).rev() {
        let cf = x[m - 1] * scale * sf[m - 1];
        y[m] = sm - m as f64 * cf;
        sm += cf;
    }
    y[0] = sm;
}

/// Entry (i, j) of the unscaled elevation basis B (column j in 1..=d).
#[inline]
fn basis(i: usize, j: usize) -> f64 {
    use std::cmp::Ordering::*;
    match i.cmp(&j) {
        Less => 1.0,
        Equal => -(j as f64),
        Greater => 0.0,
    }
}

/// Finds the simplex of A*_d containing the elevated point `y`.
///
/// Rounds each coordinate to the nearest multiple of d+1, repairs the
/// rounding so the corner sums to zero (shifting the coordinates whose
/// residual rank falls outside [0, d]), and reads the barycentric weights
/// off the sorted residual differences.
pub(crate) fn locate(y: &[f64], d: usize) -> Located {
    let dp1 = d + 1;
    let dp1f = dp1 as f64;
    let mut rem0 = [0i32; MAX_DP1];
    let mut rank = [0i8; MAX_DP1];
    let mut res = [0.0f64; MAX_DP1];

    let mut sum = 0i32;
    for i in 0..dp1 {
        let v = y[i] / dp1f;
        let r = v.round();
        rem0[i] = (r as i32) * dp1 as i32;
        res[i] = y[i] - rem0[i] as f64;
        sum += r as i32;
    }

    // Residual ranking: rank d for the smallest residual. Ties broken by
    // index so ranks are always a permutation of 0..=d.
    for i in 0..dp1 {
        for j in (i + 1)..dp1 {
            if res[i] < res[j] {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }

    // Repair the corner so its coordinates sum to zero.
    let dmax = d as i8;
    for i in 0..dp1 {
        rank[i] += sum as i8;
        if rank[i] < 0 {
            rank[i] += dp1 as i8;
            rem0[i] += dp1 as i32;
        } else if rank[i] > dmax {
            rank[i] -= dp1 as i8;
            rem0[i] -= dp1 as i32;
        }
    }

    let mut bary = [0.0f64; MAX_DP1 + 1];
    for i in 0..dp1 {
        let v = (y[i] - rem0[i] as f64) / dp1f;
        let r = rank[i] as usize;
        bary[d - r] += v;
        bary[d + 1 - r] -= v;
    }
    bary[0] += 1.0 + bary[dp1];

    let mut rank_u8 = [0u8; MAX_DP1];
    for i in 0..dp1 {
        rank_u8[i] = rank[i] as u8;
    }
    Located {
        rem0,
        rank: rank_u8,
        bary,
    }
}

/// Row k of the barycentric weight Jacobian d w_k / d y. Each weight is an
/// affine function of y inside its simplex; the gradient has exactly two
/// nonzero entries of magnitude 1/(d+1), selected by residual rank.
#[inline]
fn weight_grad_indices(k: usize, d: usize, inv_rank: &[u8; MAX_DP1]) -> (usize, usize) {
    let plus = inv_rank[d - k] as usize;
    let minus = inv_rank[(d - k + 1) % (d + 1)] as usize;
    (plus, minus)
}

#[inline]
fn inverse_rank(rank: &[u8], d: usize) -> [u8; MAX_DP1] {
    let mut inv = [0u8; MAX_DP1];
    for i in 0..=d {
        inv[rank[i] as usize] = i as u8;
    }
    inv
}

/// Elevates a point onto the zero-sum hyperplane. Linear and injective in
/// `x`; rejects non-finite input.
pub fn elevate(x: &[f64], scale: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 || d > MAX_D {
        return Err(Error::domain(format!("elevate: d must be 2..=6, got {d}")));
    }
    if x.iter().any(|v| !v.is_finite()) || !scale.is_finite() || scale <= 0.0 {
        return Err(Error::domain("elevate: non-finite input or scale"));
    }
    let sf = sigma(d);
    let mut y = vec![0.0; d + 1];
    elevate_into(x, scale, d, &sf, &mut y);
    Ok(y)
}

/// Locates the simplex containing an elevated point and returns its vertex
/// keys and barycentric weights (hash slots left unfilled).
pub fn locate_simplex(y: &[f64]) -> Result<SimplexFootprint> {
    let dp1 = y.len();
    let d = dp1 - 1;
    if d < 2 || d > MAX_D {
        return Err(Error::domain("locate_simplex: d must be 2..=6"));
    }
    let s: f64 = y.iter().sum();
    let mag = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if s.abs() > 1e-6 * mag {
        return Err(Error::domain(format!(
            "locate_simplex: point is off the zero-sum hyperplane (sum {s:.3e})"
        )));
    }
    let loc = locate(y, d);
    let mut keys = Vec::with_capacity(dp1);
    let mut weights = Vec::with_capacity(dp1);
    for k in 0..dp1 {
        let key: Vec<i32> = (0..dp1).map(|i| loc.vertex_coord(k, i, d)).collect();
        keys.push(key);
        weights.push(loc.bary[k]);
    }
    Ok(SimplexFootprint {
        level: 0,
        vertex_keys: keys,
        slots: Vec::new(),
        weights,
    })
}

/// Compact struct-of-arrays footprints for a batched encode: hash slots,
/// barycentric weights and residual ranks per (point, level), plus the
/// window and scales in effect at encode time.
#[derive(Debug, Clone)]
pub struct PermutoFootprints {
    pub d: usize,
    pub levels: usize,
    pub n_points: usize,
    pub window: Vec<f64>,
    pub scales: Vec<f64>,
    pub slots: Vec<u32>,
    pub weights: Vec<f64>,
    pub ranks: Vec<u8>,
    /// Per (point, level): some barycentric weight is within `BOUNDARY_TOL`
    /// of zero, so the input Jacobian there is one-sided.
    pub boundary: Vec<bool>,
}

impl PermutoFootprints {
    fn with_capacity(d: usize, levels: usize, n: usize, window: &[f64], scales: Vec<f64>) -> Self {
        let verts = d + 1;
        PermutoFootprints {
            d,
            levels,
            n_points: n,
            window: window.to_vec(),
            scales,
            slots: vec![0; n * levels * verts],
            weights: vec![0.0; n * levels * verts],
            ranks: vec![0; n * levels * verts],
            boundary: vec![false; n * levels],
        }
    }

    /// True when any level of the given point sat on a simplex boundary.
    pub fn any_boundary(&self, point: usize) -> bool {
        self.boundary[point * self.levels..(point + 1) * self.levels]
            .iter()
            .any(|&b| b)
    }
}

/// Multi-resolution permutohedral hash encoder. Holds the configuration;
/// parameters are passed per call so tables can be shared and swapped.
#[derive(Debug, Clone)]
pub struct PermutoEncoder {
    cfg: LatticeConfig,
    sf: [f64; MAX_D],
    scales: Vec<f64>,
}

impl PermutoEncoder {
    pub fn new(cfg: LatticeConfig) -> Result<Self> {
        cfg.validate()?;
        let sf = sigma(cfg.d);
        let scales = cfg.scales();
        Ok(PermutoEncoder { cfg, sf, scales })
    }

    pub fn cfg(&self) -> &LatticeConfig {
        &self.cfg
    }

    fn check_theta(&self, theta: &FeatureTable) -> Result<()> {
        if !theta.matches(&self.cfg) {
            return Err(Error::domain("feature table shape does not match config"));
        }
        Ok(())
    }

    fn check_footprints(&self, fp: &PermutoFootprints) -> Result<()> {
        if fp.d != self.cfg.d || fp.levels != self.cfg.levels {
            return Err(Error::domain("footprints do not match encoder config"));
        }
        Ok(())
    }

    /// Encodes one point into `out` (length L*F) and records its footprints.
    /// Returns the number of table reads performed.
    #[inline]
    fn encode_point(
        &self,
        x: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        out: &mut [f64],
        slots: &mut [u32],
        weights: &mut [f64],
        ranks: &mut [u8],
        boundary: &mut [bool],
    ) -> u64 {
        let d = self.cfg.d;
        let dp1 = d + 1;
        let f_dim = self.cfg.features;
        let t = self.cfg.table_size;
        let mut y = [0.0f64; MAX_DP1];
        let mut reads = 0u64;

        for (l, &scale) in self.scales.iter().enumerate() {
            elevate_into(x, scale, d, &self.sf, &mut y[..dp1]);
            let loc = locate(&y[..dp1], d);
            let base = l * dp1;
            let w_l = window[l];
            let out_l = &mut out[l * f_dim..(l + 1) * f_dim];
            out_l.iter_mut().for_each(|v| *v = 0.0);
            let mut key = [0i32; MAX_DP1];
            for k in 0..dp1 {
                for (i, ki) in key[..dp1].iter_mut().enumerate() {
                    *ki = loc.vertex_coord(k, i, d);
                }
                let slot = hash_vertex(&key[..dp1], d, t);
                slots[base + k] = slot;
                weights[base + k] = loc.bary[k];
                // Coordinate ranks (k doubles as the coordinate index here
                // since both vertices and coordinates number d+1).
                ranks[base + k] = loc.rank[k];
                // Masked levels still fetch their rows: reads per point per
                // level are exactly d+1 regardless of the window.
                let row = theta.row_index(l, slot as usize);
                let coeff = w_l * loc.bary[k];
                let feats = &theta.values[row..row + f_dim];
                reads += 1;
                for (o, &fv) in out_l.iter_mut().zip(feats) {
                    *o += coeff * fv;
                }
            }
            boundary[l] = loc.min_weight(d) <= BOUNDARY_TOL;
        }
        reads
    }

    /// Batched forward slice: `h[l*F..][..F] = window_l * sum_k w_k * theta[l, slot_k]`.
    pub fn encode(
        &self,
        xs: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        parallel: bool,
    ) -> Result<(Vec<f64>, PermutoFootprints, EncodeStats)> {
        let d = self.cfg.d;
        let n = check_xs(xs, d)?;
        check_window(window, self.cfg.levels)?;
        self.check_theta(theta)?;

        let lf = self.cfg.output_dim();
        let dp1 = d + 1;
        let lv = self.cfg.levels;
        let mut out = vec![0.0; n * lf];
        let mut fp = PermutoFootprints::with_capacity(d, lv, n, window, self.scales.clone());

        let reads: u64 = if parallel && n > 1 {
            xs.par_chunks(d)
                .zip(out.par_chunks_mut(lf))
                .zip(fp.slots.par_chunks_mut(lv * dp1))
                .zip(fp.weights.par_chunks_mut(lv * dp1))
                .zip(fp.ranks.par_chunks_mut(lv * dp1))
                .zip(fp.boundary.par_chunks_mut(lv))
                .map(|(((((x, o), s), w), r), b)| {
                    self.encode_point(x, theta, window, o, s, w, r, b)
                })
                .sum()
        } else {
            let mut total = 0u64;
            for p in 0..n {
                total += self.encode_point(
                    &xs[p * d..(p + 1) * d],
                    theta,
                    window,
                    &mut out[p * lf..(p + 1) * lf],
                    &mut fp.slots[p * lv * dp1..(p + 1) * lv * dp1],
                    &mut fp.weights[p * lv * dp1..(p + 1) * lv * dp1],
                    &mut fp.ranks[p * lv * dp1..(p + 1) * lv * dp1],
                    &mut fp.boundary[p * lv..(p + 1) * lv],
                );
            }
            total
        };
        Ok((out, fp, EncodeStats { table_reads: reads }))
    }

    /// Scatter-accumulates `dL/dtheta[l, slot_k] += window_l * w_k * upstream[l*F..]`.
    pub fn backward_theta(
        &self,
        upstream: &[f64],
        fp: &PermutoFootprints,
        grad: &mut FeatureTable,
        parallel: bool,
    ) -> Result<EncodeStats> {
        self.check_footprints(fp)?;
        if !grad.matches(&self.cfg) {
            return Err(Error::domain("gradient table shape does not match config"));
        }
        let lf = self.cfg.output_dim();
        if upstream.len() != fp.n_points * lf {
            return Err(Error::domain(format!(
                "upstream length {} does not match {} points x {}",
                upstream.len(),
                fp.n_points,
                lf
            )));
        }
        let d = self.cfg.d;
        let dp1 = d + 1;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let window = fp.window.clone();

        if parallel && fp.n_points > 1 {
            let cells = as_atomic_f64(&mut grad.values);
            upstream
                .par_chunks(lf)
                .zip(fp.slots.par_chunks(lv * dp1))
                .zip(fp.weights.par_chunks(lv * dp1))
                .for_each(|((up, slots), weights)| {
                    for l in 0..lv {
                        let w_l = window[l];
                        if w_l == 0.0 {
                            continue;
                        }
                        let up_l = &up[l * f_dim..(l + 1) * f_dim];
                        for k in 0..dp1 {
                            let coeff = w_l * weights[l * dp1 + k];
                            let row = (l * self.cfg.table_size
                                + slots[l * dp1 + k] as usize)
                                * f_dim;
                            for (f, &u) in up_l.iter().enumerate() {
                                atomic_add_f64(&cells[row + f], coeff * u);
                            }
                        }
                    }
                });
        } else {
            for p in 0..fp.n_points {
                let up = &upstream[p * lf..(p + 1) * lf];
                let slots = &fp.slots[p * lv * dp1..(p + 1) * lv * dp1];
                let weights = &fp.weights[p * lv * dp1..(p + 1) * lv * dp1];
                for l in 0..lv {
                    let w_l = window[l];
                    if w_l == 0.0 {
                        continue;
                    }
                    let up_l = &up[l * f_dim..(l + 1) * f_dim];
                    for k in 0..dp1 {
                        let coeff = w_l * weights[l * dp1 + k];
                        let row =
                            (l * self.cfg.table_size + slots[l * dp1 + k] as usize) * f_dim;
                        for (f, &u) in up_l.iter().enumerate() {
                            grad.values[row + f] += coeff * u;
                        }
                    }
                }
            }
        }
        Ok(EncodeStats {
            table_reads: (fp.n_points * lv * dp1) as u64,
        })
    }

    /// Jacobian rows d w_k / d x for one (point, level) footprint.
    /// `rows[k][m]` with k = 0..=d vertices, m = 0..d input axes.
    #[inline]
    fn weight_jacobian(
        &self,
        ranks: &[u8],
        scale: f64,
        rows: &mut [[f64; MAX_D]; MAX_DP1],
    ) {
        let d = self.cfg.d;
        let dp1f = (d + 1) as f64;
        let inv = inverse_rank(ranks, d);
        for (k, row) in rows.iter_mut().enumerate().take(d + 1) {
            let (ip, im) = weight_grad_indices(k, d, &inv);
            for m in 0..d {
                let e_plus = basis(ip, m + 1);
                let e_minus = basis(im, m + 1);
                row[m] = scale * self.sf[m] * (e_plus - e_minus) / dp1f;
            }
        }
    }

    /// Materialized input Jacobian, `n x (L*F) x d`, row-major per point.
    /// Constant within each simplex; one-sided on boundary footprints.
    pub fn input_jacobian(
        &self,
        fp: &PermutoFootprints,
        theta: &FeatureTable,
    ) -> Result<Vec<f64>> {
        self.check_footprints(fp)?;
        self.check_theta(theta)?;
        let d = self.cfg.d;
        let dp1 = d + 1;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let lf = self.cfg.output_dim();
        let n = fp.n_points;
        let mut jac = vec![0.0; n * lf * d];
        let mut rows = [[0.0; MAX_D]; MAX_DP1];
        for p in 0..n {
            for l in 0..lv {
                let w_l = fp.window[l];
                if w_l == 0.0 {
                    continue;
                }
                let base = p * lv * dp1 + l * dp1;
                self.weight_jacobian(&fp.ranks[base..base + dp1], fp.scales[l], &mut rows);
                for k in 0..dp1 {
                    let slot = fp.slots[base + k] as usize;
                    let row = theta.row_index(l, slot);
                    for f in 0..f_dim {
                        let coeff = w_l * theta.values[row + f];
                        let jrow = p * lf * d + (l * f_dim + f) * d;
                        for m in 0..d {
                            jac[jrow + m] += coeff * rows[k][m];
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Fused Jacobian-transpose product `dL/dx = (dh/dx)^T dL/dh`, one
    /// d-vector per point. This is the pass used in training.
    pub fn backward_input(
        &self,
        upstream: &[f64],
        fp: &PermutoFootprints,
        theta: &FeatureTable,
        parallel: bool,
    ) -> Result<(Vec<f64>, EncodeStats)> {
        self.check_footprints(fp)?;
        self.check_theta(theta)?;
        let lf = self.cfg.output_dim();
        if upstream.len() != fp.n_points * lf {
            return Err(Error::domain("upstream length mismatch in backward_input"));
        }
        let d = self.cfg.d;
        let dp1 = d + 1;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let n = fp.n_points;
        let mut out = vec![0.0; n * d];

        let point_pass = |p: usize, up: &[f64], o: &mut [f64]| -> u64 {
            let mut rows = [[0.0; MAX_D]; MAX_DP1];
            let mut reads = 0u64;
            for l in 0..lv {
                let w_l = fp.window[l];
                if w_l == 0.0 {
                    continue;
                }
                let base = p * lv * dp1 + l * dp1;
                self.weight_jacobian(&fp.ranks[base..base + dp1], fp.scales[l], &mut rows);
                let up_l = &up[l * f_dim..(l + 1) * f_dim];
                for k in 0..dp1 {
                    let slot = fp.slots[base + k] as usize;
                    let row = theta.row_index(l, slot);
                    let feats = &theta.values[row..row + f_dim];
                    reads += 1;
                    // t = window_l * <upstream_l, theta[slot]>
                    let mut t = 0.0;
                    for (u, &fv) in up_l.iter().zip(feats) {
                        t += u * fv;
                    }
                    t *= w_l;
                    for m in 0..d {
                        o[m] += t * rows[k][m];
                    }
                }
            }
            reads
        };

        let reads: u64 = if parallel && n > 1 {
            upstream
                .par_chunks(lf)
                .zip(out.par_chunks_mut(d))
                .enumerate()
                .map(|(p, (up, o))| point_pass(p, up, o))
                .sum()
        } else {
            (0..n)
                .map(|p| {
                    // Split borrow: the output chunk for point p.
                    let (up, o) = (
                        &upstream[p * lf..(p + 1) * lf],
                        &mut out[p * d..(p + 1) * d],
                    );
                    point_pass(p, up, o)
                })
                .sum()
        };
        Ok((out, EncodeStats { table_reads: reads }))
    }

    /// Double-backward products for the map (theta, g_h) -> g_x where
    /// g_x = backward_input(g_h). Given `upstream2 = dL2/d g_x` returns the
    /// contributions `dL2/dtheta` (scattered into `grad_theta`) and
    /// `dL2/d g_h` (written to `grad_gh`). Both are exact since g_x is
    /// bilinear in (theta, g_h) for fixed footprints.
    #[allow(clippy::too_many_arguments)]
    pub fn double_backward(
        &self,
        upstream2: &[f64],
        g_h: &[f64],
        fp: &PermutoFootprints,
        theta: &FeatureTable,
        grad_theta: &mut FeatureTable,
        grad_gh: &mut [f64],
        parallel: bool,
    ) -> Result<()> {
        self.check_footprints(fp)?;
        self.check_theta(theta)?;
        if !grad_theta.matches(&self.cfg) {
            return Err(Error::domain("grad_theta shape mismatch"));
        }
        let d = self.cfg.d;
        let dp1 = d + 1;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let lf = self.cfg.output_dim();
        let n = fp.n_points;
        if upstream2.len() != n * d {
            return Err(Error::domain("upstream2 length mismatch (expected n*d)"));
        }
        if g_h.len() != n * lf {
            return Err(Error::domain(
                "double_backward requires the first-backward context g_h (n*L*F values)",
            ));
        }
        if grad_gh.len() != n * lf {
            return Err(Error::domain("grad_gh length mismatch"));
        }

        let point_pass = |p: usize,
                          v: &[f64],
                          gh: &[f64],
                          out_gh: &mut [f64],
                          scatter: &mut dyn FnMut(usize, f64)| {
            let mut rows = [[0.0; MAX_D]; MAX_DP1];
            for l in 0..lv {
                let w_l = fp.window[l];
                if w_l == 0.0 {
                    continue;
                }
                let base = p * lv * dp1 + l * dp1;
                self.weight_jacobian(&fp.ranks[base..base + dp1], fp.scales[l], &mut rows);
                let gh_l = &gh[l * f_dim..(l + 1) * f_dim];
                let out_l = &mut out_gh[l * f_dim..(l + 1) * f_dim];
                for k in 0..dp1 {
                    // gdot = <upstream2, d w_k / d x>
                    let mut gdot = 0.0;
                    for m in 0..d {
                        gdot += v[m] * rows[k][m];
                    }
                    let slot = fp.slots[base + k] as usize;
                    let row = self.cfg_row(l, slot);
                    let coeff = w_l * gdot;
                    for f in 0..f_dim {
                        scatter(row + f, coeff * gh_l[f]);
                        out_l[f] += coeff * theta.values[row + f];
                    }
                }
            }
        };

        if parallel && n > 1 {
            let cells = as_atomic_f64(&mut grad_theta.values);
            upstream2
                .par_chunks(d)
                .zip(g_h.par_chunks(lf))
                .zip(grad_gh.par_chunks_mut(lf))
                .enumerate()
                .for_each(|(p, ((v, gh), out_gh))| {
                    let mut scatter = |idx: usize, val: f64| atomic_add_f64(&cells[idx], val);
                    point_pass(p, v, gh, out_gh, &mut scatter);
                });
        } else {
            for p in 0..n {
                let v = &upstream2[p * d..(p + 1) * d];
                let gh = &g_h[p * lf..(p + 1) * lf];
                // Take the grad table by cell index to satisfy the borrow in
                // the shared closure shape.
                let gvals = &mut grad_theta.values;
                let mut scatter = |idx: usize, val: f64| gvals[idx] += val;
                let out_gh = &mut grad_gh[p * lf..(p + 1) * lf];
                point_pass(p, v, gh, out_gh, &mut scatter);
            }
        }
        Ok(())
    }

    #[inline]
    fn cfg_row(&self, level: usize, slot: usize) -> usize {
        (level * self.cfg.table_size + slot) * self.cfg.features
    }
}

impl BatchEncoder for PermutoEncoder {
    type Footprints = PermutoFootprints;

    fn config(&self) -> &LatticeConfig {
        &self.cfg
    }
    fn footprint_size(&self) -> usize {
        self.cfg.d + 1
    }
    fn encode(
        &self,
        xs: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        parallel: bool,
    ) -> Result<(Vec<f64>, PermutoFootprints, EncodeStats)> {
        PermutoEncoder::encode(self, xs, theta, window, parallel)
    }
    fn backward_theta(
        &self,
        upstream: &[f64],
        fp: &PermutoFootprints,
        grad: &mut FeatureTable,
        parallel: bool,
    ) -> Result<EncodeStats> {
        PermutoEncoder::backward_theta(self, upstream, fp, grad, parallel)
    }
    fn backward_input(
        &self,
        upstream: &[f64],
        fp: &PermutoFootprints,
        theta: &FeatureTable,
        parallel: bool,
    ) -> Result<(Vec<f64>, EncodeStats)> {
        PermutoEncoder::backward_input(self, upstream, fp, theta, parallel)
    }
}
