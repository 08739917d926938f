//! The SDF field g(enc(x)) with normals and geometric features, and the
//! view-dependent color field with per-camera calibration.

use crate::encoding::permuto::{PermutoEncoder, PermutoFootprints};
use crate::encoding::{FeatureTable, LatticeConfig};
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};
use crate::nn::{sigmoid, Activation, InputGradCache, Mlp, MlpCache, MlpGrads, MlpSpec};
use crate::opt::{Adam, AdamParams};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Coarse-to-fine annealing: per-level linear ramps with staggered onsets.
/// `init_active` levels are fully on from the start; every level is fully on
/// once `step >= anneal_steps`. Weights are monotone non-decreasing in step.
pub fn coarse_to_fine_window(
    step: usize,
    anneal_steps: usize,
    levels: usize,
    init_active: usize,
) -> Vec<f64> {
    let a = init_active.clamp(1, levels);
    if levels == a || anneal_steps == 0 {
        return vec![1.0; levels];
    }
    let stride = anneal_steps as f64 / (levels - a) as f64;
    (0..levels)
        .map(|l| {
            if l < a {
                1.0
            } else {
                let onset = (l - a) as f64 * stride;
                ((step as f64 - onset) / stride).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Batched SDF evaluation with every intermediate needed by backward passes.
pub struct SdfBatchEval {
    pub n: usize,
    pub sdf: Vec<f64>,
    /// n x chi_dim geometric features.
    pub chi: Vec<f64>,
    /// Points that fell outside the domain box and were clamped.
    pub clamped: Vec<bool>,
    pub enc_out: Vec<f64>,
    pub footprints: PermutoFootprints,
    pub mlp_cache: MlpCache,
}

impl SdfBatchEval {
    pub fn chi_of(&self, i: usize, chi_dim: usize) -> &[f64] {
        &self.chi[i * chi_dim..(i + 1) * chi_dim]
    }
}

/// Gradient context from a normals pass, kept for the double backward.
pub struct NormalCtx {
    /// dL/dh seeds, i.e. d sdf / d enc per point (n x L*F).
    pub g_h: Vec<f64>,
    pub igc: InputGradCache,
    pub normals: Vec<Vec3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdfFieldParams {
    pub cfg: LatticeConfig,
    pub chi_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for SdfFieldParams {
    fn default() -> Self {
        SdfFieldParams {
            cfg: LatticeConfig::default_for_dim(3),
            chi_dim: 32,
            hidden: 64,
            hidden_layers: 2,
        }
    }
}

/// SDF network: permutohedral encoding into a small MLP that outputs the
/// signed distance plus a geometric feature vector.
pub struct SdfField {
    pub enc: PermutoEncoder,
    pub theta: FeatureTable,
    pub mlp: Mlp,
    pub chi_dim: usize,
    pub window: Vec<f64>,
    pub bbox: Aabb,
}

impl SdfField {
    pub fn new(params: &SdfFieldParams, bbox: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let enc = PermutoEncoder::new(params.cfg.clone())?;
        let theta = FeatureTable::init_uniform(&params.cfg, 1e-4, rng);
        let mut widths = vec![params.cfg.output_dim()];
        widths.extend(std::iter::repeat(params.hidden).take(params.hidden_layers));
        widths.push(1 + params.chi_dim);
        let mut acts = vec![Activation::Softplus { beta: 10.0 }; params.hidden_layers];
        acts.push(Activation::Identity);
        let spec = MlpSpec::new(widths, acts, false)?;
        let mlp = Mlp::init(spec, rng);
        let window = vec![1.0; params.cfg.levels];
        Ok(SdfField {
            enc,
            theta,
            mlp,
            chi_dim: params.chi_dim,
            window,
            bbox,
        })
    }

    pub fn levels(&self) -> usize {
        self.enc.cfg().levels
    }

    /// Flattens points into encoder input, clamping to the domain box.
    fn flatten_clamped(&self, xs: &[Vec3]) -> (Vec<f64>, Vec<bool>) {
        let mut flat = Vec::with_capacity(xs.len() * 3);
        let mut clamped = Vec::with_capacity(xs.len());
        for &p in xs {
            let c = p.clamp(self.bbox.min, self.bbox.max);
            clamped.push(c != p);
            flat.extend_from_slice(&c.to_array());
        }
        (flat, clamped)
    }

    /// Deterministic batched evaluation; caches enable the gradient passes.
    pub fn eval(&self, xs: &[Vec3], parallel: bool) -> Result<SdfBatchEval> {
        let n = xs.len();
        let (flat, clamped) = self.flatten_clamped(xs);
        let (enc_out, footprints, _) =
            self.enc.encode(&flat, &self.theta, &self.window, parallel)?;
        let mlp_cache = self.mlp.forward_batch(&enc_out, n)?;
        let out = mlp_cache.output();
        let width = 1 + self.chi_dim;
        let mut sdf = Vec::with_capacity(n);
        let mut chi = Vec::with_capacity(n * self.chi_dim);
        for s in 0..n {
            sdf.push(out[s * width]);
            chi.extend_from_slice(&out[s * width + 1..(s + 1) * width]);
        }
        Ok(SdfBatchEval {
            n,
            sdf,
            chi,
            clamped,
            enc_out,
            footprints,
            mlp_cache,
        })
    }

    /// SDF gradients via the chain of MLP input-gradient and encoding input
    /// Jacobian. Not normalized.
    pub fn normals(&self, ev: &SdfBatchEval, parallel: bool) -> Result<NormalCtx> {
        let mut seed = vec![0.0; 1 + self.chi_dim];
        seed[0] = 1.0;
        let (g_h, igc) = self.mlp.input_gradient_batch(&ev.mlp_cache, &seed)?;
        let (gx, _) = self
            .enc
            .backward_input(&g_h, &ev.footprints, &self.theta, parallel)?;
        let normals = gx
            .chunks_exact(3)
            .map(|c| Vec3::from_array([c[0], c[1], c[2]]))
            .collect();
        Ok(NormalCtx { g_h, igc, normals })
    }

    /// Convenience scalar evaluation (used by tracing and mesh extraction).
    pub fn sdf_at(&self, p: Vec3) -> f64 {
        self.eval(std::slice::from_ref(&p), false).map(|e| e.sdf[0]).unwrap_or(f64::NAN)
    }

    /// Short supervised pre-training against the analytic sphere SDF
    /// |x| - radius, so optimization starts from a watertight surface.
    pub fn sphere_initialize(
        &mut self,
        radius: f64,
        iters: usize,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<SphereInitReport> {
        if !(0.0 < radius && radius < 1.0) {
            return Err(Error::domain("sphere radius must lie in (0,1)"));
        }
        let mut adam_theta = Adam::new(self.theta.values.len(), AdamParams::for_tables(2e-2));
        let mut mlp_flat = flatten_mlp(&self.mlp);
        let mut adam_mlp = Adam::new(mlp_flat.len(), AdamParams::for_mlps(2e-3));
        let mut grads = MlpGrads::zeros_like(&self.mlp);
        let mut grad_theta = FeatureTable::zeros(self.enc.cfg());

        for it in 0..iters {
            let lr_scale = crate::opt::cosine_decay(it, iters, 0.05);
            let xs: Vec<Vec3> = (0..batch)
                .map(|_| {
                    Vec3::from_array([
                        rng.random_range(self.bbox.min.x..self.bbox.max.x),
                        rng.random_range(self.bbox.min.y..self.bbox.max.y),
                        rng.random_range(self.bbox.min.z..self.bbox.max.z),
                    ])
                })
                .collect();
            let ev = self.eval(&xs, true)?;
            let ctx = self.normals(&ev, true)?;
            // L = mean (g - (|x| - r))^2 + lambda_n * mean |grad g - x/|x||^2:
            // both the value and the gradient of the analytic sphere SDF are
            // supervised, since value fitting alone leaves the lattice
            // gradients noisy between sample points.
            let lambda_n = 0.1;
            let width = 1 + self.chi_dim;
            let mut upstream = vec![0.0; batch * width];
            let mut v_n = vec![0.0; batch * 3];
            let mut loss = 0.0;
            for (i, &p) in xs.iter().enumerate() {
                let target = p.norm() - radius;
                let diff = ev.sdf[i] - target;
                loss += diff * diff;
                upstream[i * width] = 2.0 * diff / batch as f64;
                let r_n = p.norm();
                if r_n > 1e-6 {
                    let t = p / r_n;
                    let dn = ctx.normals[i] - t;
                    loss += lambda_n * dn.dot(dn);
                    let coeff = 2.0 * lambda_n / batch as f64;
                    v_n[i * 3] = coeff * dn.x;
                    v_n[i * 3 + 1] = coeff * dn.y;
                    v_n[i * 3 + 2] = coeff * dn.z;
                }
            }
            loss /= batch as f64;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "sphere init diverged at iter {it} (loss {loss})"
                )));
            }
            grads.fill_zero();
            grad_theta.fill_zero();
            // Value path.
            let gh = self
                .mlp
                .backward_batch(&ev.mlp_cache, &upstream, Some(&mut grads), true)?
                .unwrap();
            self.enc
                .backward_theta(&gh, &ev.footprints, &mut grad_theta, false)?;
            // Gradient path: encode double-backward plus MLP double-backward.
            let lf = self.enc.cfg().output_dim();
            let mut grad_gh = vec![0.0; batch * lf];
            self.enc.double_backward(
                &v_n,
                &ctx.g_h,
                &ev.footprints,
                &self.theta,
                &mut grad_theta,
                &mut grad_gh,
                false,
            )?;
            let extra_h = self
                .mlp
                .double_backward_batch(&ev.mlp_cache, &ctx.igc, &grad_gh, &mut grads)?;
            self.enc
                .backward_theta(&extra_h, &ev.footprints, &mut grad_theta, false)?;
            let gflat = flatten_grads(&grads, &self.mlp);
            adam_mlp.step(&mut mlp_flat, &gflat, lr_scale);
            unflatten_mlp(&mlp_flat, &mut self.mlp);
            adam_theta.step(&mut self.theta.values, &grad_theta.values, lr_scale);
        }

        // Convergence report over fresh random points.
        let m = 4096;
        let xs: Vec<Vec3> = (0..m)
            .map(|_| {
                Vec3::from_array([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ])
            })
            .collect();
        let ev = self.eval(&xs, true)?;
        let ctx = self.normals(&ev, true)?;
        let mut mean_abs = 0.0;
        let mut eik = 0.0;
        for (i, &p) in xs.iter().enumerate() {
            mean_abs += (ev.sdf[i] - (p.norm() - radius)).abs();
            let nn = ctx.normals[i].norm();
            eik += (nn - 1.0) * (nn - 1.0);
        }
        Ok(SphereInitReport {
            mean_abs_err: mean_abs / m as f64,
            eikonal_residual: eik / m as f64,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SphereInitReport {
    pub mean_abs_err: f64,
    pub eikonal_residual: f64,
}

pub(crate) fn flatten_mlp(mlp: &Mlp) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &mlp.layers {
        out.extend_from_slice(&l.w);
        out.extend_from_slice(&l.b);
        if let Some(k) = l.k {
            out.push(k);
        }
    }
    out
}

pub(crate) fn unflatten_mlp(flat: &[f64], mlp: &mut Mlp) {
    let mut off = 0;
    for l in mlp.layers.iter_mut() {
        let wn = l.w.len();
        l.w.copy_from_slice(&flat[off..off + wn]);
        off += wn;
        let bn = l.b.len();
        l.b.copy_from_slice(&flat[off..off + bn]);
        off += bn;
        if let Some(k) = &mut l.k {
            *k = flat[off];
            off += 1;
        }
    }
    debug_assert_eq!(off, flat.len());
}

/// Flattens gradients in the same layout as [`flatten_mlp`]; the layer's
/// `k` slot is present exactly when the layer carries one.
pub(crate) fn flatten_grads(g: &MlpGrads, mlp: &Mlp) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, l) in mlp.layers.iter().enumerate() {
        out.extend_from_slice(&g.w[i]);
        out.extend_from_slice(&g.b[i]);
        if l.k.is_some() {
            out.push(g.k[i]);
        }
    }
    out
}

/// Per-camera affine color calibration; camera 0 is pinned to the identity.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CamCalib {
    pub dgain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorFieldParams {
    pub cfg: LatticeConfig,
    pub chi_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub n_cameras: usize,
}

impl Default for ColorFieldParams {
    fn default() -> Self {
        ColorFieldParams {
            cfg: LatticeConfig::default_for_dim(3),
            chi_dim: 32,
            hidden: 64,
            hidden_layers: 3,
            n_cameras: 1,
        }
    }
}

/// Color network c(h_c, v, n, chi): Lipschitz-normalized MLP over the
/// concatenated inputs, with sigmoid(c_raw * gain + bias) output.
pub struct ColorField {
    pub enc: PermutoEncoder,
    pub theta: FeatureTable,
    pub mlp: Mlp,
    pub chi_dim: usize,
    pub window: Vec<f64>,
    pub calib: Vec<CamCalib>,
    pub bbox: Aabb,
}

pub struct ColorBatchEval {
    pub rgb: Vec<Vec3>,
    /// Raw network output before calibration and sigmoid.
    pub raw: Vec<f64>,
    pub mlp_cache: MlpCache,
    pub footprints: PermutoFootprints,
    pub input: Vec<f64>,
}

impl ColorField {
    pub fn new(params: &ColorFieldParams, bbox: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let enc = PermutoEncoder::new(params.cfg.clone())?;
        let theta = FeatureTable::init_uniform(&params.cfg, 1e-4, rng);
        let in_dim = params.cfg.output_dim() + 3 + 3 + params.chi_dim;
        let mut widths = vec![in_dim];
        widths.extend(std::iter::repeat(params.hidden).take(params.hidden_layers));
        widths.push(3);
        let mut acts = vec![Activation::Softplus { beta: 100.0 }; params.hidden_layers];
        acts.push(Activation::Identity);
        let spec = MlpSpec::new(widths, acts, true)?;
        let mlp = Mlp::init(spec, rng);
        Ok(ColorField {
            enc,
            theta,
            mlp,
            chi_dim: params.chi_dim,
            window: vec![1.0; params.cfg.levels],
            calib: vec![CamCalib::default(); params.n_cameras],
            bbox,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.enc.cfg().output_dim() + 6 + self.chi_dim
    }

    fn gain_bias(&self, cam: u32) -> Result<(f64, f64)> {
        let c = self
            .calib
            .get(cam as usize)
            .ok_or_else(|| Error::domain(format!("unknown camera id {cam}")))?;
        if cam == 0 {
            // The reference camera is pinned to gain 1, bias 0.
            Ok((1.0, 0.0))
        } else {
            Ok((1.0 + c.dgain, c.bias))
        }
    }

    /// Full evaluation from positions: encode, concatenate (h, v, n, chi),
    /// run the MLP and apply per-camera calibration inside the sigmoid.
    pub fn eval(
        &self,
        xs: &[Vec3],
        view_dirs: &[Vec3],
        normals: &[Vec3],
        chi: &[f64],
        cams: &[u32],
        parallel: bool,
    ) -> Result<ColorBatchEval> {
        let n = xs.len();
        if view_dirs.len() != n || normals.len() != n || cams.len() != n {
            return Err(Error::domain("color eval batch length mismatch"));
        }
        if chi.len() != n * self.chi_dim {
            return Err(Error::domain("chi length mismatch"));
        }
        let mut flat = Vec::with_capacity(n * 3);
        for &p in xs {
            let c = p.clamp(self.bbox.min, self.bbox.max);
            flat.extend_from_slice(&c.to_array());
        }
        let (enc_out, footprints, _) =
            self.enc.encode(&flat, &self.theta, &self.window, parallel)?;
        let lf = self.enc.cfg().output_dim();
        let in_dim = self.input_dim();
        let mut input = vec![0.0; n * in_dim];
        for s in 0..n {
            let row = &mut input[s * in_dim..(s + 1) * in_dim];
            row[..lf].copy_from_slice(&enc_out[s * lf..(s + 1) * lf]);
            row[lf..lf + 3].copy_from_slice(&view_dirs[s].to_array());
            row[lf + 3..lf + 6].copy_from_slice(&normals[s].to_array());
            row[lf + 6..].copy_from_slice(&chi[s * self.chi_dim..(s + 1) * self.chi_dim]);
        }
        let mlp_cache = self.mlp.forward_batch(&input, n)?;
        let raw = mlp_cache.output().to_vec();
        let mut rgb = Vec::with_capacity(n);
        for s in 0..n {
            let (g, b) = self.gain_bias(cams[s])?;
            rgb.push(Vec3::from_array([
                sigmoid(raw[s * 3] * g + b),
                sigmoid(raw[s * 3 + 1] * g + b),
                sigmoid(raw[s * 3 + 2] * g + b),
            ]));
        }
        Ok(ColorBatchEval {
            rgb,
            raw,
            mlp_cache,
            footprints,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_params() -> SdfFieldParams {
        SdfFieldParams {
            cfg: LatticeConfig::new(3, 8, 1 << 12, 2, 2.0, 64.0).unwrap(),
            chi_dim: 8,
            hidden: 32,
            hidden_layers: 2,
        }
    }

    #[test]
    fn window_boundaries_and_monotonicity() {
        let w0 = coarse_to_fine_window(0, 1000, 6, 1);
        assert_eq!(w0[0], 1.0);
        assert!(w0[1..].iter().all(|&w| w == 0.0), "{w0:?}");
        let w_end = coarse_to_fine_window(1000, 1000, 6, 1);
        assert!(w_end.iter().all(|&w| w == 1.0));
        let w_past = coarse_to_fine_window(5000, 1000, 6, 1);
        assert!(w_past.iter().all(|&w| w == 1.0));

        let mut prev = w0;
        for s in (0..=1000).step_by(10) {
            let w = coarse_to_fine_window(s, 1000, 6, 1);
            for (a, b) in prev.iter().zip(&w) {
                assert!(b >= a, "window not monotone at step {s}");
            }
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prev = w;
        }
    }

    #[test]
    fn eval_deterministic_and_clamps() {
        let mut r = rng(1);
        let field = SdfField::new(&small_params(), Aabb::unit(), &mut r).unwrap();
        let xs = vec![
            Vec3::from_array([0.3, -0.2, 0.7]),
            Vec3::from_array([2.0, 0.0, 0.0]),
        ];
        let a = field.eval(&xs, false).unwrap();
        let b = field.eval(&xs, false).unwrap();
        assert_eq!(a.sdf[0].to_bits(), b.sdf[0].to_bits());
        assert!(!a.clamped[0]);
        assert!(a.clamped[1]);
        // The clamped point equals evaluation at the box face.
        let c = field
            .eval(&[Vec3::from_array([1.0, 0.0, 0.0])], false)
            .unwrap();
        assert_eq!(a.sdf[1].to_bits(), c.sdf[0].to_bits());
    }

    #[test]
    fn zero_theta_gradient_is_zero_wrt_x() {
        let mut r = rng(2);
        let mut field = SdfField::new(&small_params(), Aabb::unit(), &mut r).unwrap();
        field.theta.fill_zero();
        let xs = vec![Vec3::from_array([0.1, 0.2, -0.3]); 4];
        let ev = field.eval(&xs, false).unwrap();
        let ctx = field.normals(&ev, false).unwrap();
        for n in &ctx.normals {
            assert_eq!(n.norm(), 0.0);
        }
    }

    /// Sphere init convergence oracle plus everything it implies: small
    /// residual, Eikonal residual, center value, interior signs, normals
    /// aligned with the radial direction.
    #[test]
    fn sphere_initialization_converges() {
        let mut r = rng(3);
        let mut field = SdfField::new(&small_params(), Aabb::unit(), &mut r).unwrap();
        // Init runs under the training-start window: only the coarse levels
        // are active, which keeps gradients smooth.
        field.window = coarse_to_fine_window(0, 10_000, field.levels(), 5);
        let report = field.sphere_initialize(0.5, 2000, 768, &mut r).unwrap();
        assert!(
            report.mean_abs_err <= 5e-3,
            "mean abs err {}",
            report.mean_abs_err
        );
        assert!(
            report.eikonal_residual <= 1e-2,
            "eikonal residual {}",
            report.eikonal_residual
        );

        // Non-constant in x after init.
        let probe = field.eval(
            &[Vec3::ZERO, Vec3::from_array([0.9, 0.0, 0.0])],
            false,
        )
        .unwrap();
        assert!((probe.sdf[0] - probe.sdf[1]).abs() > 0.1);
        // Center point close to -r.
        assert!((probe.sdf[0] + 0.5).abs() < 0.02, "center {}", probe.sdf[0]);

        // Negative sign strictly inside radius/2.
        let inner: Vec<Vec3> = (0..1000)
            .map(|_| {
                loop {
                    let p = Vec3::from_array([
                        r.random_range(-0.25..0.25),
                        r.random_range(-0.25..0.25),
                        r.random_range(-0.25..0.25),
                    ]);
                    if p.norm() < 0.25 {
                        return p;
                    }
                }
            })
            .collect();
        let ev = field.eval(&inner, true).unwrap();
        assert!(ev.sdf.iter().all(|&s| s < 0.0));

        // Normal direction within 2 degrees of radial at |x| = 0.4.
        let shell: Vec<Vec3> = (0..200)
            .map(|_| {
                let p = Vec3::from_array([
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ]);
                p.normalized() * 0.4
            })
            .collect();
        let ev = field.eval(&shell, true).unwrap();
        let ctx = field.normals(&ev, true).unwrap();
        let mut max_angle: f64 = 0.0;
        for (p, n) in shell.iter().zip(&ctx.normals) {
            let cos = n.normalized().dot(p.normalized()).clamp(-1.0, 1.0);
            max_angle = max_angle.max(cos.acos().to_degrees());
        }
        assert!(max_angle <= 2.0, "max normal deviation {max_angle} deg");
    }

    /// Normals against directional finite differences at interior points.
    #[test]
    fn normals_match_finite_differences() {
        let mut r = rng(4);
        let mut field = SdfField::new(&small_params(), Aabb::unit(), &mut r).unwrap();
        // Give the field some structure first.
        field.sphere_initialize(0.5, 300, 256, &mut r).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let p = Vec3::from_array([
                r.random_range(-0.8..0.8),
                r.random_range(-0.8..0.8),
                r.random_range(-0.8..0.8),
            ]);
            let ev = field.eval(&[p], false).unwrap();
            let minw = ev
                .footprints
                .weights
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if minw < 1e-3 {
                continue; // too close to a simplex boundary for central FD
            }
            checked += 1;
            let ctx = field.normals(&ev, false).unwrap();
            let n = ctx.normals[0];
            for axis in 0..3 {
                let mut dp = [0.0; 3];
                dp[axis] = h;
                let d = Vec3::from_array(dp);
                let sp = field.eval(&[p + d], false).unwrap().sdf[0];
                let sm = field.eval(&[p + (-d)], false).unwrap().sdf[0];
                let fd = (sp - sm) / (2.0 * h);
                let an = n.get(axis);
                let err = (an - fd).abs() / fd.abs().max(1e-3);
                assert!(err <= 1e-3, "axis {axis}: analytic {an} fd {fd}");
            }
        }
    }

    #[test]
    fn color_field_basics() {
        let mut r = rng(5);
        let params = ColorFieldParams {
            cfg: LatticeConfig::new(3, 4, 1 << 10, 2, 2.0, 32.0).unwrap(),
            chi_dim: 8,
            hidden: 16,
            hidden_layers: 2,
            n_cameras: 3,
        };
        let field = ColorField::new(&params, Aabb::unit(), &mut r).unwrap();
        let xs = vec![Vec3::from_array([0.1, 0.2, 0.3]); 2];
        let v = vec![Vec3::from_array([0.0, 0.0, 1.0]); 2];
        let n = vec![Vec3::from_array([1.0, 0.0, 0.0]); 2];
        let chi = vec![0.1; 2 * 8];
        // Outputs bounded in (0,1).
        let ev = field.eval(&xs, &v, &n, &chi, &[0, 2], true).unwrap();
        for c in &ev.rgb {
            for ch in c.to_array() {
                assert!(ch > 0.0 && ch < 1.0);
            }
        }
        // Unknown camera id is an error.
        assert!(field.eval(&xs, &v, &n, &chi, &[0, 7], false).is_err());
        // Camera 0 calibration is the identity on the raw output.
        let mut field2 = ColorField::new(&params, Aabb::unit(), &mut r).unwrap();
        field2.calib[0] = CamCalib {
            dgain: 0.5,
            bias: 0.3,
        };
        let e1 = field2.eval(&xs, &v, &n, &chi, &[0, 0], false).unwrap();
        for (c, raw) in e1.rgb.iter().zip(e1.raw.chunks(3)) {
            for (ch, &rv) in c.to_array().iter().zip(raw) {
                assert!((ch - sigmoid(rv)).abs() < 1e-15);
            }
        }
    }
}
