//! Scratch harness for tuning sphere initialization.

use lattice_sdf::encoding::LatticeConfig;
use lattice_sdf::fields::{coarse_to_fine_window, SdfField, SdfFieldParams};
use lattice_sdf::math::{Aabb, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(768);
    let active: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let levels: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);

    let mut r = ChaCha8Rng::seed_from_u64(3);
    let params = SdfFieldParams {
        cfg: LatticeConfig::new(3, levels, 1 << 12, 2, 2.0, 64.0).unwrap(),
        chi_dim: 8,
        hidden: 32,
        hidden_layers: 2,
    };
    let mut field = SdfField::new(&params, Aabb::unit(), &mut r).unwrap();
    field.window = coarse_to_fine_window(0, 10_000, field.levels(), active);
    let t0 = std::time::Instant::now();
    let report = field.sphere_initialize(0.5, iters, batch, &mut r).unwrap();
    println!(
        "iters={iters} batch={batch} active={active}: mean_abs={:.5} eik={:.5}  ({:.1?})",
        report.mean_abs_err,
        report.eikonal_residual,
        t0.elapsed()
    );

    // Residual distribution by radius bucket.
    let m = 8000;
    let xs: Vec<Vec3> = (0..m)
        .map(|_| {
            Vec3::from_array([
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ])
        })
        .collect();
    let ev = field.eval(&xs, true).unwrap();
    let mut buckets = vec![(0.0f64, 0usize); 9];
    for (i, &p) in xs.iter().enumerate() {
        let err = (ev.sdf[i] - (p.norm() - 0.5)).abs();
        let b = ((p.norm() / 0.2) as usize).min(8);
        buckets[b].0 += err;
        buckets[b].1 += 1;
    }
    for (b, (s, c)) in buckets.iter().enumerate() {
        if *c > 0 {
            println!("  r in [{:.1},{:.1}): mean abs {:.5}", 0.2 * b as f64, 0.2 * (b + 1) as f64, s / *c as f64);
        }
    }
}
