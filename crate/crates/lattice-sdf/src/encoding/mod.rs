//! Multi-resolution hash encodings.
//!
//! Two encoders share one interface: the permutohedral lattice encoder
//! ([`permuto::PermutoEncoder`]) with a d+1 vertex footprint per simplex, and
//! the hyper-cubical baseline ([`voxel::VoxelEncoder`]) with a 2^d corner
//! footprint. Both slice features from `L` hashed levels, concatenate, and
//! expose parameter gradients, input Jacobians and (for the permutohedral
//! encoder) double-backward products.

pub mod hash;
pub mod permuto;
pub mod voxel;

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Largest supported input dimensionality.
pub const MAX_D: usize = 6;

/// Weights closer than this to zero mark a point as sitting on a simplex
/// boundary; input Jacobians there are one-sided.
pub const BOUNDARY_TOL: f64 = 1e-7;

/// Per-level lattice scales and table shape shared by both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    /// Input dimensionality, 2..=6.
    pub d: usize,
    /// Number of resolution levels.
    pub levels: usize,
    /// Feature table capacity per level; power of two.
    pub table_size: usize,
    /// Features per table entry.
    pub features: usize,
    /// Scale of the coarsest level (lattice cells per unit of input).
    pub coarsest_scale: f64,
    /// Scale of the finest level; must exceed `coarsest_scale` unless L == 1.
    pub finest_scale: f64,
}

impl LatticeConfig {
    pub fn new(
        d: usize,
        levels: usize,
        table_size: usize,
        features: usize,
        coarsest_scale: f64,
        finest_scale: f64,
    ) -> Result<Self> {
        let cfg = LatticeConfig {
            d,
            levels,
            table_size,
            features,
            coarsest_scale,
            finest_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for a unit scene: the coarsest level covers it in a handful of
    /// cells, the finest in ~2048 across the [-1,1] extent.
    pub fn default_for_dim(d: usize) -> Self {
        LatticeConfig {
            d,
            levels: 16,
            table_size: 1 << 15,
            features: 2,
            coarsest_scale: 2.0,
            finest_scale: 1024.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d > MAX_D {
            return Err(Error::config(format!("d must be in 2..=6, got {}", self.d)));
        }
        if self.levels < 1 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.features < 1 {
            return Err(Error::config("features must be >= 1"));
        }
        if self.table_size < 2 || !self.table_size.is_power_of_two() {
            return Err(Error::config(format!(
                "table_size must be a power of two >= 2, got {}",
                self.table_size
            )));
        }
        if !(self.coarsest_scale > 0.0) || !(self.finest_scale > 0.0) {
            return Err(Error::config("scales must be positive"));
        }
        if self.levels > 1 && self.finest_scale <= self.coarsest_scale {
            return Err(Error::config("finest_scale must exceed coarsest_scale"));
        }
        Ok(())
    }

    /// Geometric progression of per-level scales, strictly increasing.
    pub fn scale(&self, level: usize) -> f64 {
        debug_assert!(level < self.levels);
        if self.levels == 1 {
            return self.coarsest_scale;
        }
        let t = level as f64 / (self.levels - 1) as f64;
        self.coarsest_scale * (self.finest_scale / self.coarsest_scale).powf(t)
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.levels).map(|l| self.scale(l)).collect()
    }

    /// Length of the concatenated encoding vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn table_len(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// The trainable encoding parameters: an `L x T x F` array stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn zeros(cfg: &LatticeConfig) -> Self {
        FeatureTable {
            levels: cfg.levels,
            table_size: cfg.table_size,
            features: cfg.features,
            values: vec![0.0; cfg.table_len()],
        }
    }

    /// Near-zero uniform init in [-amp, amp]; keeps a sphere-initialized SDF
    /// intact when fine levels switch on.
    pub fn init_uniform(cfg: &LatticeConfig, amp: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(cfg);
        for v in t.values.iter_mut() {
            *v = rng.random_range(-amp..=amp);
        }
        t
    }

    #[inline]
    pub fn row_index(&self, level: usize, slot: usize) -> usize {
        (level * self.table_size + slot) * self.features
    }

    pub fn matches(&self, cfg: &LatticeConfig) -> bool {
        self.levels == cfg.levels
            && self.table_size == cfg.table_size
            && self.features == cfg.features
            && self.values.len() == cfg.table_len()
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Instrumented counters returned by every encode/backward call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Number of table-entry fetches (one per vertex per level per point).
    pub table_reads: u64,
}

impl EncodeStats {
    pub fn reads_per_point_per_level(&self, n_points: usize, levels: usize) -> f64 {
        self.table_reads as f64 / (n_points * levels) as f64
    }
}

/// One simplex (or voxel) footprint for a single point at a single level:
/// lattice vertices in the elevated space, their hash slots and barycentric
/// weights. Returned by the single-point location APIs and used by tests;
/// batched passes keep the compact struct-of-arrays form instead.
#[derive(Debug, Clone)]
pub struct SimplexFootprint {
    pub level: usize,
    /// d+1 vertex coordinate vectors, each of length d+1, coordinate-sum 0.
    pub vertex_keys: Vec<Vec<i32>>,
    /// Hash slots, one per vertex, each in [0, T).
    pub slots: Vec<u32>,
    /// Barycentric weights, one per vertex; sum to 1, each >= -1e-6.
    pub weights: Vec<f64>,
}

/// Common batched interface, used by the benchmark harness.
pub trait BatchEncoder {
    type Footprints;

    fn config(&self) -> &LatticeConfig;
    /// Table entries touched per point per level (d+1 or 2^d).
    fn footprint_size(&self) -> usize;

    fn encode(
        &self,
        xs: &[f64],
        theta: &FeatureTable,
        window: &[f64],
        parallel: bool,
    ) -> Result<(Vec<f64>, Self::Footprints, EncodeStats)>;

    fn backward_theta(
        &self,
        upstream: &[f64],
        footprints: &Self::Footprints,
        grad: &mut FeatureTable,
        parallel: bool,
    ) -> Result<EncodeStats>;

    /// Fused Jacobian-transpose product: dL/dx = (dh/dx)^T dL/dh.
    fn backward_input(
        &self,
        upstream: &[f64],
        footprints: &Self::Footprints,
        theta: &FeatureTable,
        parallel: bool,
    ) -> Result<(Vec<f64>, EncodeStats)>;
}

pub(crate) fn check_xs(xs: &[f64], d: usize) -> Result<usize> {
    if xs.len() % d != 0 {
        return Err(Error::domain(format!(
            "input length {} is not a multiple of d={}",
            xs.len(),
            d
        )));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite input coordinate"));
    }
    Ok(xs.len() / d)
}

pub(crate) fn check_window(window: &[f64], levels: usize) -> Result<()> {
    if window.len() != levels {
        return Err(Error::domain(format!(
            "window has {} entries, expected {}",
            window.len(),
            levels
        )));
    }
    if window.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::domain("window weights must lie in [0,1]"));
    }
    Ok(())
}

/// Lock-free f64 accumulation into a shared table, used by parallel gradient
/// scatter. The result depends on accumulation order only at the level of
/// floating-point rounding (callers tolerate 1e-5 relative).
#[inline]
pub(crate) fn atomic_add_f64(cell: &AtomicU64, add: f64) {
    let mut cur = cell.load(Ordering::Relaxed);
    loop {
        let new = (f64::from_bits(cur) + add).to_bits();
        match cell.compare_exchange_weak(cur, new, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(c) => cur = c,
        }
    }
}

/// Views an exclusively borrowed f64 buffer as atomic bit cells so rayon
/// workers can scatter into it concurrently. Sound: `AtomicU64` has the same
/// size and alignment as `f64`, and the exclusive borrow guarantees no other
/// non-atomic access for the lifetime of the view.
pub(crate) fn as_atomic_f64(vals: &mut [f64]) -> &[AtomicU64] {
    const _: () = assert!(std::mem::size_of::<f64>() == std::mem::size_of::<AtomicU64>());
    const _: () = assert!(std::mem::align_of::<f64>() == std::mem::align_of::<AtomicU64>());
    unsafe { std::slice::from_raw_parts(vals.as_mut_ptr() as *const AtomicU64, vals.len()) }
}
