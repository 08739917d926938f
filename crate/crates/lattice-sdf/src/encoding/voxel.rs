//! Hyper-cubical voxel hash encoding baseline.
//!
//! Same interface, hash, init and scale schedule as the permutohedral
//! encoder so benchmark comparisons isolate the footprint size: d-linear
//! interpolation over the 2^d hashed corners of the containing cell versus
//! the d+1 simplex vertices.

use super::hash::hash_vertex;
use super::{
    as_atomic_f64, atomic_add_f64, check_window, check_xs, BatchEncoder, EncodeStats,
    FeatureTable, LatticeConfig, BOUNDARY_TOL, MAX_D,
};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Shares the lattice configuration type; `d > 6` is rejected at
/// construction since the 2^d footprint becomes unreasonable.
pub type VoxelConfig = LatticeConfig;

#[derive(Debug, Clone)]
pub struct VoxelFootprints {
    pub d: usize,
    pub levels: usize,
    pub n_points: usize,
    pub window: Vec<f64>,
    pub scales: Vec<f64>,
    /// n * levels * 2^d hashed corner slots.
    pub slots: Vec<u32>,
    /// n * levels * d per-axis interpolation fractions in [0,1).
    pub fracs: Vec<f64>,
    /// Per (point, level): some fraction within `BOUNDARY_TOL` of 0 or 1.
    pub boundary: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct VoxelEncoder {
    cfg: VoxelConfig,
    scales: Vec<f64>,
}

/// Interpolation weight of corner `c` (bitmask over axes).
#[inline]
fn corner_weight(c: usize, fracs: &[f64]) -> f64 {
    let mut w = 1.0;
    for (m, &f) in fracs.iter().enumerate() {
        w *= if (c >> m) & 1 == 1 { f } else { 1.0 - f };
    }
    w
}

/// Leave-one-out products for the weight gradient: out[m] = prod_{m' != m}
/// of the per-axis factor of corner `c`.
#[inline]
fn corner_loo(c: usize, fracs: &[f64], out: &mut [f64]) {
    let d = fracs.len();
    let mut prefix = 1.0;
    for m in 0..d {
        out[m] = prefix;
        prefix *= if (c >> m) & 1 == 1 { fracs[m] } else { 1.0 - fracs[m] };
    }
    let mut suffix = 1.0;
    for m in (0..d).rev() {
        out[m] *= suffix;
        suffix *= if (c >> m) & 1 == 1 { fracs[m] } else { 1.0 - fracs[m] };
    }
}

impl VoxelEncoder {
    pub fn new(cfg: VoxelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.d > MAX_D {
            return Err(Error::config(format!(
                "voxel encoder supports d <= {MAX_D} (2^d footprint), got {}",
                cfg.d
            )));
        }
        let scales = cfg.scales();
        Ok(VoxelEncoder { cfg, scales })
    }

    pub fn cfg(&self) -> &VoxelConfig {
        &self.cfg
    }

    fn corners(&self) -> usize {
        1 << self.cfg.d
    }

    #[inline]
    fn encode_point(
        &self,
        x: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        out: &mut [f64],
        slots: &mut [u32],
        fracs_out: &mut [f64],
        boundary: &mut [bool],
    ) -> u64 {
        let d = self.cfg.d;
        let f_dim = self.cfg.features;
        let t = self.cfg.table_size;
        let corners = self.corners();
        let mut cell = [0i32; MAX_D];
        let mut fr = [0.0f64; MAX_D];
        let mut key = [0i32; MAX_D];
        let mut reads = 0u64;

        for (l, &scale) in self.scales.iter().enumerate() {
            let mut near_edge = false;
            for m in 0..d {
                let pos = x[m] * scale;
                let fl = pos.floor();
                cell[m] = fl as i32;
                fr[m] = pos - fl;
                if fr[m] <= BOUNDARY_TOL || fr[m] >= 1.0 - BOUNDARY_TOL {
                    near_edge = true;
                }
            }
            let w_l = window[l];
            let out_l = &mut out[l * f_dim..(l + 1) * f_dim];
            out_l.iter_mut().for_each(|v| *v = 0.0);
            let base = l * corners;
            for c in 0..corners {
                for m in 0..d {
                    key[m] = cell[m] + ((c >> m) & 1) as i32;
                }
                let slot = hash_vertex(&key[..d], d, t);
                slots[base + c] = slot;
                let wc = corner_weight(c, &fr[..d]);
                let row = theta.row_index(l, slot as usize);
                let feats = &theta.values[row..row + f_dim];
                reads += 1;
                let coeff = w_l * wc;
                for (o, &fv) in out_l.iter_mut().zip(feats) {
                    *o += coeff * fv;
                }
            }
            fracs_out[l * d..(l + 1) * d].copy_from_slice(&fr[..d]);
            boundary[l] = near_edge;
        }
        reads
    }

    pub fn encode(
        &self,
        xs: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        parallel: bool,
    ) -> Result<(Vec<f64>, VoxelFootprints, EncodeStats)> {
        let d = self.cfg.d;
        let n = check_xs(xs, d)?;
        check_window(window, self.cfg.levels)?;
        if !theta.matches(&self.cfg) {
            return Err(Error::domain("feature table shape does not match config"));
        }
        let lf = self.cfg.output_dim();
        let lv = self.cfg.levels;
        let corners = self.corners();
        let mut out = vec![0.0; n * lf];
        let mut fp = VoxelFootprints {
            d,
            levels: lv,
            n_points: n,
            window: window.to_vec(),
            scales: self.scales.clone(),
            slots: vec![0; n * lv * corners],
            fracs: vec![0.0; n * lv * d],
            boundary: vec![false; n * lv],
        };

        let reads: u64 = if parallel && n > 1 {
            xs.par_chunks(d)
                .zip(out.par_chunks_mut(lf))
                .zip(fp.slots.par_chunks_mut(lv * corners))
                .zip(fp.fracs.par_chunks_mut(lv * d))
                .zip(fp.boundary.par_chunks_mut(lv))
                .map(|((((x, o), s), fr), b)| self.encode_point(x, theta, window, o, s, fr, b))
                .sum()
        } else {
            let mut total = 0u64;
            for p in 0..n {
                total += self.encode_point(
                    &xs[p * d..(p + 1) * d],
                    theta,
                    window,
                    &mut out[p * lf..(p + 1) * lf],
                    &mut fp.slots[p * lv * corners..(p + 1) * lv * corners],
                    &mut fp.fracs[p * lv * d..(p + 1) * lv * d],
                    &mut fp.boundary[p * lv..(p + 1) * lv],
                );
            }
            total
        };
        Ok((out, fp, EncodeStats { table_reads: reads }))
    }

    pub fn backward_theta(
        &self,
        upstream: &[f64],
        fp: &VoxelFootprints,
        grad: &mut FeatureTable,
        parallel: bool,
    ) -> Result<EncodeStats> {
        if fp.d != self.cfg.d || fp.levels != self.cfg.levels {
            return Err(Error::domain("footprints do not match encoder config"));
        }
        if !grad.matches(&self.cfg) {
            return Err(Error::domain("gradient table shape mismatch"));
        }
        let lf = self.cfg.output_dim();
        if upstream.len() != fp.n_points * lf {
            return Err(Error::domain("upstream length mismatch"));
        }
        let d = self.cfg.d;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let corners = self.corners();
        let ts = self.cfg.table_size;
        let window = fp.window.clone();

        let scatter_point = |up: &[f64],
                             slots: &[u32],
                             fracs: &[f64],
                             add: &mut dyn FnMut(usize, f64)| {
            for l in 0..lv {
                let w_l = window[l];
                if w_l == 0.0 {
                    continue;
                }
                let up_l = &up[l * f_dim..(l + 1) * f_dim];
                let fr = &fracs[l * d..(l + 1) * d];
                for c in 0..corners {
                    let coeff = w_l * corner_weight(c, fr);
                    let row = (l * ts + slots[l * corners + c] as usize) * f_dim;
                    for (f, &u) in up_l.iter().enumerate() {
                        add(row + f, coeff * u);
                    }
                }
            }
        };

        if parallel && fp.n_points > 1 {
            let cells = as_atomic_f64(&mut grad.values);
            upstream
                .par_chunks(lf)
                .zip(fp.slots.par_chunks(lv * corners))
                .zip(fp.fracs.par_chunks(lv * d))
                .for_each(|((up, slots), fracs)| {
                    let mut add = |idx: usize, v: f64| atomic_add_f64(&cells[idx], v);
                    scatter_point(up, slots, fracs, &mut add);
                });
        } else {
            for p in 0..fp.n_points {
                let gvals = &mut grad.values;
                let mut add = |idx: usize, v: f64| gvals[idx] += v;
                scatter_point(
                    &upstream[p * lf..(p + 1) * lf],
                    &fp.slots[p * lv * corners..(p + 1) * lv * corners],
                    &fp.fracs[p * lv * d..(p + 1) * lv * d],
                    &mut add,
                );
            }
        }
        Ok(EncodeStats {
            table_reads: (fp.n_points * lv * corners) as u64,
        })
    }

    /// Materialized input Jacobian, `n x (L*F) x d`.
    pub fn input_jacobian(&self, fp: &VoxelFootprints, theta: &FeatureTable) -> Result<Vec<f64>> {
        if !theta.matches(&self.cfg) {
            return Err(Error::domain("feature table shape mismatch"));
        }
        let d = self.cfg.d;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let lf = self.cfg.output_dim();
        let corners = self.corners();
        let n = fp.n_points;
        let mut jac = vec![0.0; n * lf * d];
        let mut loo = [0.0f64; MAX_D];
        for p in 0..n {
            for l in 0..lv {
                let w_l = fp.window[l];
                if w_l == 0.0 {
                    continue;
                }
                let scale = fp.scales[l];
                let fr = &fp.fracs[(p * lv + l) * d..(p * lv + l + 1) * d];
                for c in 0..corners {
                    corner_loo(c, fr, &mut loo[..d]);
                    let slot = fp.slots[(p * lv + l) * corners + c] as usize;
                    let row = theta.row_index(l, slot);
                    for f in 0..f_dim {
                        let coeff = w_l * theta.values[row + f] * scale;
                        let jrow = p * lf * d + (l * f_dim + f) * d;
                        for m in 0..d {
                            let sign = if (c >> m) & 1 == 1 { 1.0 } else { -1.0 };
                            jac[jrow + m] += coeff * sign * loo[m];
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Fused Jacobian-transpose product, one d-vector per point.
    pub fn backward_input(
        &self,
        upstream: &[f64],
        fp: &VoxelFootprints,
        theta: &FeatureTable,
        parallel: bool,
    ) -> Result<(Vec<f64>, EncodeStats)> {
        if !theta.matches(&self.cfg) {
            return Err(Error::domain("feature table shape mismatch"));
        }
        let lf = self.cfg.output_dim();
        if upstream.len() != fp.n_points * lf {
            return Err(Error::domain("upstream length mismatch"));
        }
        let d = self.cfg.d;
        let lv = self.cfg.levels;
        let f_dim = self.cfg.features;
        let corners = self.corners();
        let n = fp.n_points;
        let mut out = vec![0.0; n * d];

        let point_pass = |p: usize, up: &[f64], o: &mut [f64]| -> u64 {
            let mut loo = [0.0f64; MAX_D];
            let mut reads = 0u64;
            for l in 0..lv {
                let w_l = fp.window[l];
                if w_l == 0.0 {
                    continue;
                }
                let scale = fp.scales[l];
                let fr = &fp.fracs[(p * lv + l) * d..(p * lv + l + 1) * d];
                let up_l = &up[l * f_dim..(l + 1) * f_dim];
                for c in 0..corners {
                    let slot = fp.slots[(p * lv + l) * corners + c] as usize;
                    let row = theta.row_index(l, slot);
                    let feats = &theta.values[row..row + f_dim];
                    reads += 1;
                    let mut tdot = 0.0;
                    for (u, &fv) in up_l.iter().zip(feats) {
                        tdot += u * fv;
                    }
                    tdot *= w_l * scale;
                    corner_loo(c, fr, &mut loo[..d]);
                    for m in 0..d {
                        let sign = if (c >> m) & 1 == 1 { 1.0 } else { -1.0 };
                        o[m] += tdot * sign * loo[m];
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
}

impl BatchEncoder for VoxelEncoder {
    type Footprints = VoxelFootprints;

    fn config(&self) -> &LatticeConfig {
        &self.cfg
    }
    fn footprint_size(&self) -> usize {
        1 << self.cfg.d
    }
    fn encode(
        &self,
        xs: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        parallel: bool,
    ) -> Result<(Vec<f64>, VoxelFootprints, EncodeStats)> {
        VoxelEncoder::encode(self, xs, theta, window, parallel)
    }
    fn backward_theta(
        &self,
        upstream: &[f64],
        fp: &VoxelFootprints,
        grad: &mut FeatureTable,
        parallel: bool,
    ) -> Result<EncodeStats> {
        VoxelEncoder::backward_theta(self, upstream, fp, grad, parallel)
    }
    fn backward_input(
        &self,
        upstream: &[f64],
        fp: &VoxelFootprints,
        theta: &FeatureTable,
        parallel: bool,
    ) -> Result<(Vec<f64>, EncodeStats)> {
        VoxelEncoder::backward_input(self, upstream, fp, theta, parallel)
    }
}
