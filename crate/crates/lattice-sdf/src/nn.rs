//! Small fully-connected networks with hand-written backprop.
//!
//! Three passes are supported: forward, first-order backward (parameter and
//! input gradients), and a double-backward through the input-gradient map,
//! which training needs because SDF normals are themselves gradients.
//! Layers can carry a trainable Lipschitz bound `k`; their weight rows are
//! then rescaled so each absolute row-sum stays within softplus(k), bounding
//! the layer's operator norm under the infinity norm.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus` for positive y.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// softplus(beta * x) / beta; C-infinity, slope in (0,1).
    Softplus { beta: f64 },
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Softplus { beta } => softplus(beta * x) / beta,
            Activation::Sigmoid => sigmoid(x),
        }
    }
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus { beta } => sigmoid(beta * x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
    #[inline]
    pub fn deriv2(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Softplus { beta } => {
                let s = sigmoid(beta * x);
                beta * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output: [in, h1, ..., out].
    pub widths: Vec<usize>,
    /// One activation per layer (len = widths.len() - 1).
    pub activations: Vec<Activation>,
    /// Apply row-sum weight normalization with trainable per-layer bounds.
    pub lipschitz: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, lipschitz: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("MLP needs at least one layer"));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::config("one activation required per layer"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("zero-width layer"));
        }
        Ok(MlpSpec {
            widths,
            activations,
            lipschitz,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// Row-major out x in.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Trainable Lipschitz bound parameter; bound is softplus(k).
    pub k: Option<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

/// Rescales each row of `w` so its absolute row-sum is at most
/// softplus(k); rows already within the bound are untouched.
pub fn lipschitz_normalize(w: &[f64], k: f64, n_in: usize, n_out: usize) -> Vec<f64> {
    let kappa = softplus(k);
    let mut out = w.to_vec();
    for r in 0..n_out {
        let row = &mut out[r * n_in..(r + 1) * n_in];
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > kappa {
            let scale = kappa / s;
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    out
}

/// Product of per-layer softplus(k): the network-wide Lipschitz bound that
/// training regularizes.
pub fn lipschitz_loss(layers: &[LinearLayer]) -> f64 {
    layers
        .iter()
        .map(|l| softplus(l.k.expect("lipschitz_loss requires k on every layer")))
        .product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<LinearLayer>,
}

/// Parameter gradients mirroring [`Mlp`] layout.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub k: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            w: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            k: vec![0.0; mlp.layers.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.w.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        self.b.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        self.k.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, c: f64) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        self.k.iter_mut().zip(&other.k).for_each(|(x, y)| *x += c * y);
    }
}

/// Forward activations retained for the backward passes.
pub struct MlpCache {
    pub n: usize,
    /// acts[0] is the input; acts[i+1] = sigma(zs[i]).
    pub acts: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    /// Normalized weights per layer when the spec is Lipschitz-normalized.
    pub w_eff: Option<Vec<Vec<f64>>>,
    /// Per layer, per row: absolute row-sum of the raw weights.
    pub row_sums: Option<Vec<Vec<f64>>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Adjoint chain of the seed backward, retained for double-backward.
pub struct InputGradCache {
    /// dz[i] per layer, n x out_i.
    pub dz: Vec<Vec<f64>>,
    /// da[i]: adjoint of acts[i+1] in the seed backward (da[last] = seed).
    pub da: Vec<Vec<f64>>,
}

impl Mlp {
    /// Xavier-uniform init. Lipschitz layers get `k` set so the initial
    /// bound sits ~20% above the largest row-sum and normalization starts
    /// as the identity.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.n_layers());
        for i in 0..spec.n_layers() {
            let (n_in, n_out) = (spec.widths[i], spec.widths[i + 1]);
            let amp = (6.0 / (n_in + n_out) as f64).sqrt();
            let w: Vec<f64> = (0..n_in * n_out)
                .map(|_| rng.random_range(-amp..=amp))
                .collect();
            let b = vec![0.0; n_out];
            let k = if spec.lipschitz {
                let max_row: f64 = (0..n_out)
                    .map(|r| w[r * n_in..(r + 1) * n_in].iter().map(|v| v.abs()).sum())
                    .fold(0.0, f64::max);
                Some(softplus_inv(1.2 * max_row + 1e-3))
            } else {
                None
            };
            layers.push(LinearLayer {
                w,
                b,
                k,
                n_in,
                n_out,
            });
        }
        Mlp { spec, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Effective (possibly normalized) weights per layer.
    fn effective_weights(&self) -> (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>) {
        if !self.spec.lipschitz {
            return (None, None);
        }
        let mut w_eff = Vec::with_capacity(self.layers.len());
        let mut sums = Vec::with_capacity(self.layers.len());
        for l in self.layers.iter() {
            let k = l.k.expect("lipschitz spec requires k");
            let mut rs = Vec::with_capacity(l.n_out);
            for r in 0..l.n_out {
                rs.push(l.w[r * l.n_in..(r + 1) * l.n_in].iter().map(|v| v.abs()).sum());
            }
            w_eff.push(lipschitz_normalize(&l.w, k, l.n_in, l.n_out));
            sums.push(rs);
        }
        (Some(w_eff), Some(sums))
    }

    pub fn forward_batch(&self, input: &[f64], n: usize) -> Result<MlpCache> {
        let w0 = self.input_dim();
        if input.len() != n * w0 {
            return Err(Error::domain(format!(
                "mlp input length {} != {} x {}",
                input.len(),
                n,
                w0
            )));
        }
        let (w_eff, row_sums) = self.effective_weights();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let w = w_eff.as_ref().map(|v| v[i].as_slice()).unwrap_or(&l.w);
            let prev = &acts[i];
            let mut z = vec![0.0; n * l.n_out];
            for s in 0..n {
                let a = &prev[s * l.n_in..(s + 1) * l.n_in];
                let zrow = &mut z[s * l.n_out..(s + 1) * l.n_out];
                for (o, zo) in zrow.iter_mut().enumerate() {
                    let wrow = &w[o * l.n_in..(o + 1) * l.n_in];
                    let mut acc = l.b[o];
                    for (wv, av) in wrow.iter().zip(a) {
                        acc += wv * av;
                    }
                    *zo = acc;
                }
            }
            let act = self.spec.activations[i];
            let a_next: Vec<f64> = z.iter().map(|&v| act.eval(v)).collect();
            zs.push(z);
            acts.push(a_next);
        }
        Ok(MlpCache {
            n,
            acts,
            zs,
            w_eff,
            row_sums,
        })
    }

    /// First-order backward. Accumulates parameter gradients into `grads`
    /// when given (routing Lipschitz normalization to `w` and `k`), and
    /// returns input gradients when `want_input` is set.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        mut grads: Option<&mut MlpGrads>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let n = cache.n;
        let w_out = self.output_dim();
        if upstream.len() != n * w_out {
            return Err(Error::domain("mlp upstream length mismatch"));
        }
        let mut da = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let act = self.spec.activations[i];
            let z = &cache.zs[i];
            let w = cache
                .w_eff
                .as_ref()
                .map(|v| v[i].as_slice())
                .unwrap_or(&l.w);
            // dz = da .* sigma'(z)
            let mut dz = vec![0.0; n * l.n_out];
            for (j, dzj) in dz.iter_mut().enumerate() {
                *dzj = da[j] * act.deriv(z[j]);
            }
            if let Some(g) = grads.as_deref_mut() {
                // Gradient w.r.t. effective weights first, then through the
                // normalization when active.
                let mut gw_eff = vec![0.0; l.w.len()];
                let gb = &mut g.b[i];
                for s in 0..n {
                    let a = &cache.acts[i][s * l.n_in..(s + 1) * l.n_in];
                    let dzrow = &dz[s * l.n_out..(s + 1) * l.n_out];
                    for (o, &dv) in dzrow.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        gb[o] += dv;
                        let grow = &mut gw_eff[o * l.n_in..(o + 1) * l.n_in];
                        for (gv, av) in grow.iter_mut().zip(a) {
                            *gv += dv * av;
                        }
                    }
                }
                if self.spec.lipschitz {
                    let kappa = softplus(l.k.unwrap());
                    let sums = &cache.row_sums.as_ref().unwrap()[i];
                    let gw = &mut g.w[i];
                    let mut gkappa = 0.0;
                    for r in 0..l.n_out {
                        let s = sums[r];
                        let ge = &gw_eff[r * l.n_in..(r + 1) * l.n_in];
                        let wr = &l.w[r * l.n_in..(r + 1) * l.n_in];
                        let grow = &mut gw[r * l.n_in..(r + 1) * l.n_in];
                        if s <= kappa {
                            for (gv, &gev) in grow.iter_mut().zip(ge) {
                                *gv += gev;
                            }
                        } else {
                            // w_hat = kappa * w / s with s = sum |w|.
                            let dot: f64 = ge.iter().zip(wr).map(|(a, b)| a * b).sum();
                            let inv_s = 1.0 / s;
                            for ((gv, &gev), &wv) in grow.iter_mut().zip(ge).zip(wr) {
                                *gv += kappa * inv_s * (gev - dot * inv_s * wv.signum());
                            }
                            gkappa += dot * inv_s;
                        }
                    }
                    g.k[i] += gkappa * sigmoid(l.k.unwrap());
                } else {
                    let gw = &mut g.w[i];
                    for (gv, &gev) in gw.iter_mut().zip(&gw_eff) {
                        *gv += gev;
                    }
                }
            }
            if i == 0 && !want_input {
                return Ok(None);
            }
            // da_prev = W^T dz
            let mut da_prev = vec![0.0; n * l.n_in];
            for s in 0..n {
                let dzrow = &dz[s * l.n_out..(s + 1) * l.n_out];
                let drow = &mut da_prev[s * l.n_in..(s + 1) * l.n_in];
                for (o, &dv) in dzrow.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * l.n_in..(o + 1) * l.n_in];
                    for (dp, wv) in drow.iter_mut().zip(wrow) {
                        *dp += dv * wv;
                    }
                }
            }
            da = da_prev;
        }
        Ok(Some(da))
    }

    /// Gradient of one fixed scalar direction of the output with respect to
    /// the input, for every sample: g_h = (dy/dh)^T seed. The adjoint chain
    /// is returned for [`Mlp::double_backward_batch`].
    pub fn input_gradient_batch(
        &self,
        cache: &MlpCache,
        seed: &[f64],
    ) -> Result<(Vec<f64>, InputGradCache)> {
        if self.spec.lipschitz {
            return Err(Error::domain(
                "input-gradient/double-backward on Lipschitz-normalized nets is unsupported",
            ));
        }
        if seed.len() != self.output_dim() {
            return Err(Error::domain("seed length must equal output dim"));
        }
        let n = cache.n;
        let n_l = self.layers.len();
        let mut dz_store: Vec<Vec<f64>> = vec![Vec::new(); n_l];
        let mut da_store: Vec<Vec<f64>> = vec![Vec::new(); n_l];
        let mut da: Vec<f64> = (0..n).flat_map(|_| seed.iter().copied()).collect();
        for i in (0..n_l).rev() {
            let l = &self.layers[i];
            let act = self.spec.activations[i];
            let z = &cache.zs[i];
            let mut dz = vec![0.0; n * l.n_out];
            for (j, dzj) in dz.iter_mut().enumerate() {
                *dzj = da[j] * act.deriv(z[j]);
            }
            let mut da_prev = vec![0.0; n * l.n_in];
            for s in 0..n {
                let dzrow = &dz[s * l.n_out..(s + 1) * l.n_out];
                let drow = &mut da_prev[s * l.n_in..(s + 1) * l.n_in];
                for (o, &dv) in dzrow.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wrow = &l.w[o * l.n_in..(o + 1) * l.n_in];
                    for (dp, wv) in drow.iter_mut().zip(wrow) {
                        *dp += dv * wv;
                    }
                }
            }
            da_store[i] = da;
            dz_store[i] = dz;
            da = da_prev;
        }
        Ok((
            da,
            InputGradCache {
                dz: dz_store,
                da: da_store,
            },
        ))
    }

    /// Backward through the input-gradient map: given v = dL2/d(g_h),
    /// accumulates dL2/d(params) into `grads` and returns dL2/d(input).
    /// The seed used for `input_gradient_batch` is treated as constant.
    pub fn double_backward_batch(
        &self,
        cache: &MlpCache,
        igc: &InputGradCache,
        v: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        if self.spec.lipschitz {
            return Err(Error::domain("double backward unsupported on Lipschitz nets"));
        }
        let n = cache.n;
        let w0 = self.input_dim();
        if v.len() != n * w0 {
            return Err(Error::domain("double-backward upstream length mismatch"));
        }
        let n_l = self.layers.len();

        // Sweep the backward chain in reverse (ascending layer index),
        // collecting z-adjoints through the sigma'(z) factors.
        let mut r_z: Vec<Vec<f64>> = (0..n_l)
            .map(|i| vec![0.0; n * self.layers[i].n_out])
            .collect();
        let mut r_da_prev = v.to_vec(); // adjoint of the layer's input-side delta
        for i in 0..n_l {
            let l = &self.layers[i];
            let act = self.spec.activations[i];
            let z = &cache.zs[i];
            let dz = &igc.dz[i];
            let da = &igc.da[i];
            let mut r_dz = vec![0.0; n * l.n_out];
            {
                let gw = &mut grads.w[i];
                for s in 0..n {
                    let rprev = &r_da_prev[s * l.n_in..(s + 1) * l.n_in];
                    let dzrow = &dz[s * l.n_out..(s + 1) * l.n_out];
                    let rdz_row = &mut r_dz[s * l.n_out..(s + 1) * l.n_out];
                    for (o, rv) in rdz_row.iter_mut().enumerate() {
                        let wrow = &l.w[o * l.n_in..(o + 1) * l.n_in];
                        let mut acc = 0.0;
                        for (wv, rp) in wrow.iter().zip(rprev) {
                            acc += wv * rp;
                        }
                        *rv = acc;
                        let dv = dzrow[o];
                        if dv != 0.0 {
                            let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                            for (gv, rp) in grow.iter_mut().zip(rprev) {
                                *gv += dv * rp;
                            }
                        }
                    }
                }
            }
            let rz = &mut r_z[i];
            let mut r_da_next = vec![0.0; n * l.n_out];
            for j in 0..n * l.n_out {
                r_da_next[j] = r_dz[j] * act.deriv(z[j]);
                rz[j] += r_dz[j] * da[j] * act.deriv2(z[j]);
            }
            r_da_prev = r_da_next;
        }
        // The topmost delta is the constant seed; its adjoint is dropped.

        // Propagate z-adjoints down the forward chain z_i = W_i a_i + b_i.
        let mut r_a: Vec<f64> = Vec::new();
        for i in (0..n_l).rev() {
            if !r_a.is_empty() {
                let act = self.spec.activations[i];
                let z = &cache.zs[i];
                let rz = &mut r_z[i];
                for j in 0..rz.len() {
                    rz[j] += r_a[j] * act.deriv(z[j]);
                }
            }
            let l = &self.layers[i];
            let rz = &r_z[i];
            let gw = &mut grads.w[i];
            let gb = &mut grads.b[i];
            let mut r_a_prev = vec![0.0; n * l.n_in];
            for s in 0..n {
                let a = &cache.acts[i][s * l.n_in..(s + 1) * l.n_in];
                let rzrow = &rz[s * l.n_out..(s + 1) * l.n_out];
                let rap = &mut r_a_prev[s * l.n_in..(s + 1) * l.n_in];
                for (o, &rv) in rzrow.iter().enumerate() {
                    if rv == 0.0 {
                        continue;
                    }
                    gb[o] += rv;
                    let wrow = &l.w[o * l.n_in..(o + 1) * l.n_in];
                    let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                    for m in 0..l.n_in {
                        grow[m] += rv * a[m];
                        rap[m] += rv * wrow[m];
                    }
                }
            }
            r_a = r_a_prev;
        }
        Ok(r_a)
    }

    /// Adds the gradient of coeff * prod_i softplus(k_i) to `grads` and
    /// returns the product.
    pub fn lipschitz_loss_grad(&self, coeff: f64, grads: &mut MlpGrads) -> f64 {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .map(|l| softplus(l.k.expect("lipschitz layers carry k")))
            .collect();
        let prod: f64 = vals.iter().product();
        for (i, l) in self.layers.iter().enumerate() {
            let others: f64 = vals
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .product();
            grads.k[i] += coeff * others * sigmoid(l.k.unwrap());
        }
        prod
    }

    /// Visits every parameter tensor with a stable name, for serialization
    /// and optimizer plumbing.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a [f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.w"), &l.w);
            f(format!("{prefix}.{i}.b"), &l.b);
            if let Some(k) = &l.k {
                f(format!("{prefix}.{i}.k"), std::slice::from_ref(k));
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.w"), &mut l.w);
            f(format!("{prefix}.{i}.b"), &mut l.b);
            if let Some(k) = &mut l.k {
                f(format!("{prefix}.{i}.k"), std::slice::from_mut(k));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        assert!((softplus(-50.0) - (-50.0f64).exp()).abs() < 1e-30);
        for x in [-5.0, -0.3, 0.0, 2.0, 40.0] {
            let y = softplus(x);
            assert!((softplus_inv(y) - x).abs() < 1e-9, "roundtrip at {x}");
        }
    }

    #[test]
    fn lipschitz_normalize_cases() {
        // Row (3, 1) with bound 2 scales to (1.5, 0.5).
        let k = softplus_inv(2.0);
        let w = lipschitz_normalize(&[3.0, 1.0], k, 2, 1);
        assert!((w[0] - 1.5).abs() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12);

        // Rows already under the bound are bit-identical.
        let orig = [0.5, -0.5, 0.1, 0.2];
        let w = lipschitz_normalize(&orig, softplus_inv(2.0), 2, 2);
        assert_eq!(&w[..], &orig[..]);

        // Postcondition on random matrices.
        let mut r = rng(1);
        for _ in 0..100 {
            let (n_in, n_out) = (5, 4);
            let w: Vec<f64> = (0..20).map(|_| r.random_range(-2.0..2.0)).collect();
            let k = r.random_range(-2.0..3.0);
            let wn = lipschitz_normalize(&w, k, n_in, n_out);
            let bound = softplus(k);
            for row in wn.chunks(n_in) {
                let s: f64 = row.iter().map(|v| v.abs()).sum();
                assert!(s <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn lipschitz_loss_values_and_grad() {
        let mk = |k: f64| LinearLayer {
            w: vec![1.0],
            b: vec![0.0],
            k: Some(k),
            n_in: 1,
            n_out: 1,
        };
        let layers = vec![mk(0.0), mk(0.0), mk(0.0)];
        let loss = lipschitz_loss(&layers);
        assert!((loss - std::f64::consts::LN_2.powi(3)).abs() < 1e-4);
        assert!((loss - 0.333).abs() < 1e-3);

        // k -> -inf drives the product to zero.
        let layers2 = vec![mk(0.0), mk(-100.0), mk(0.0)];
        assert!(lipschitz_loss(&layers2) < 1e-30);

        // d loss / d k_i = sigmoid(k_i) * prod_{j != i} softplus(k_j).
        let mut r = rng(2);
        let spec = MlpSpec::new(
            vec![2, 3, 2],
            vec![Activation::Softplus { beta: 1.0 }, Activation::Identity],
            true,
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        mlp.layers[0].k = Some(0.3);
        mlp.layers[1].k = Some(-0.7);
        let mut grads = MlpGrads::zeros_like(&mlp);
        let base = mlp.lipschitz_loss_grad(1.0, &mut grads);
        let h = 1e-7;
        for i in 0..2 {
            let orig = mlp.layers[i].k.unwrap();
            mlp.layers[i].k = Some(orig + h);
            let lp = lipschitz_loss(&mlp.layers);
            mlp.layers[i].k = Some(orig - h);
            let lm = lipschitz_loss(&mlp.layers);
            mlp.layers[i].k = Some(orig);
            let fd = (lp - lm) / (2.0 * h);
            assert!((grads.k[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        assert!((base - lipschitz_loss(&mlp.layers)).abs() < 1e-12);
    }

    #[test]
    fn forward_trivials() {
        let mut r = rng(3);
        // Zero weights, zero bias, softplus-at-zero... identity-at-zero
        // activation means Identity here.
        let spec = MlpSpec::new(vec![3, 4, 2], vec![Activation::Identity; 2], false).unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        for l in mlp.layers.iter_mut() {
            l.w.iter_mut().for_each(|v| *v = 0.0);
        }
        let cache = mlp.forward_batch(&[0.3, -0.2, 0.9], 1).unwrap();
        assert!(cache.output().iter().all(|&v| v == 0.0));

        // A single linear layer is matmul + bias.
        let spec = MlpSpec::new(vec![2, 2], vec![Activation::Identity], false).unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        mlp.layers[0].w = vec![1.0, 2.0, -3.0, 0.5];
        mlp.layers[0].b = vec![0.25, -1.0];
        let cache = mlp.forward_batch(&[2.0, -1.0], 1).unwrap();
        assert!((cache.output()[0] - (2.0 - 2.0 + 0.25)).abs() < 1e-15);
        assert!((cache.output()[1] - (-6.0 - 0.5 - 1.0)).abs() < 1e-15);

        // Width mismatch is a domain error.
        assert!(mlp.forward_batch(&[1.0, 2.0, 3.0], 1).is_err());
    }

    fn fd_check_params(mlp: &mut Mlp, input: &[f64], n: usize, upstream: &[f64], tol: f64) {
        let cache = mlp.forward_batch(input, n).unwrap();
        let mut grads = MlpGrads::zeros_like(mlp);
        let gin = mlp
            .backward_batch(&cache, upstream, Some(&mut grads), true)
            .unwrap()
            .unwrap();

        let loss = |m: &Mlp| -> f64 {
            let c = m.forward_batch(input, n).unwrap();
            c.output().iter().zip(upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut r = rng(99);
        for li in 0..mlp.layers.len() {
            for _ in 0..20 {
                let wi = r.random_range(0..mlp.layers[li].w.len());
                // Stay away from the |w| kink under normalization.
                if mlp.spec.lipschitz && mlp.layers[li].w[wi].abs() < 1e-3 {
                    continue;
                }
                let orig = mlp.layers[li].w[wi];
                mlp.layers[li].w[wi] = orig + h;
                let lp = loss(mlp);
                mlp.layers[li].w[wi] = orig - h;
                let lm = loss(mlp);
                mlp.layers[li].w[wi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (grads.w[li][wi] - fd).abs() / fd.abs().max(1e-4);
                assert!(err <= tol, "w[{li}][{wi}]: {} vs {fd}", grads.w[li][wi]);
            }
            for bi in 0..mlp.layers[li].b.len() {
                let orig = mlp.layers[li].b[bi];
                mlp.layers[li].b[bi] = orig + h;
                let lp = loss(mlp);
                mlp.layers[li].b[bi] = orig - h;
                let lm = loss(mlp);
                mlp.layers[li].b[bi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (grads.b[li][bi] - fd).abs() / fd.abs().max(1e-4);
                assert!(err <= tol, "b[{li}][{bi}]");
            }
            if mlp.spec.lipschitz {
                let orig = mlp.layers[li].k.unwrap();
                mlp.layers[li].k = Some(orig + h);
                let lp = loss(mlp);
                mlp.layers[li].k = Some(orig - h);
                let lm = loss(mlp);
                mlp.layers[li].k = Some(orig);
                let fd = (lp - lm) / (2.0 * h);
                let err = (grads.k[li] - fd).abs() / fd.abs().max(1e-4);
                assert!(err <= tol, "k[{li}]: {} vs {fd}", grads.k[li]);
            }
        }
        // Input gradients.
        let mut input_v = input.to_vec();
        let mut r2 = rng(100);
        for _ in 0..30 {
            let idx = r2.random_range(0..input_v.len());
            let orig = input_v[idx];
            input_v[idx] = orig + h;
            let lp: f64 = {
                let c = mlp.forward_batch(&input_v, n).unwrap();
                c.output().iter().zip(upstream).map(|(a, b)| a * b).sum()
            };
            input_v[idx] = orig - h;
            let lm: f64 = {
                let c = mlp.forward_batch(&input_v, n).unwrap();
                c.output().iter().zip(upstream).map(|(a, b)| a * b).sum()
            };
            input_v[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (gin[idx] - fd).abs() / fd.abs().max(1e-4);
            assert!(err <= tol, "input[{idx}]");
        }
    }

    #[test]
    fn backward_matches_finite_differences_plain() {
        let mut r = rng(4);
        let spec = MlpSpec::new(
            vec![5, 8, 8, 3],
            vec![
                Activation::Softplus { beta: 2.0 },
                Activation::Softplus { beta: 2.0 },
                Activation::Identity,
            ],
            false,
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        let n = 6;
        let input: Vec<f64> = (0..n * 5).map(|_| r.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        fd_check_params(&mut mlp, &input, n, &upstream, 1e-4);
    }

    #[test]
    fn backward_matches_finite_differences_lipschitz() {
        let mut r = rng(5);
        let spec = MlpSpec::new(
            vec![4, 6, 3],
            vec![Activation::Softplus { beta: 1.0 }, Activation::Sigmoid],
            true,
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        // Force some rows over the bound so the normalization branch is hot.
        mlp.layers[0].k = Some(softplus_inv(0.4));
        mlp.layers[1].k = Some(softplus_inv(0.6));
        let n = 5;
        let input: Vec<f64> = (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        fd_check_params(&mut mlp, &input, n, &upstream, 1e-4);
    }

    /// Empirical Lipschitz bound under the infinity norm: the row-sum
    /// normalization makes prod softplus(k_i) an operator-norm bound, and
    /// the softplus/sigmoid activations are 1-Lipschitz.
    #[test]
    fn empirical_lipschitz_bound_holds() {
        let mut r = rng(6);
        let spec = MlpSpec::new(
            vec![8, 16, 16, 3],
            vec![
                Activation::Softplus { beta: 100.0 },
                Activation::Softplus { beta: 100.0 },
                Activation::Sigmoid,
            ],
            true,
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        // Tight bounds so normalization is active.
        for l in mlp.layers.iter_mut() {
            l.k = Some(softplus_inv(r.random_range(0.5..1.5)));
        }
        let bound = lipschitz_loss(&mlp.layers);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = a
                .iter()
                .map(|v| v + r.random_range(-0.5..0.5))
                .collect();
            let fa = mlp.forward_batch(&a, 1).unwrap().output().to_vec();
            let fb = mlp.forward_batch(&b, 1).unwrap().output().to_vec();
            let dout = fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            let din = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if din > 1e-12 {
                worst = worst.max(dout / din);
            }
        }
        assert!(
            worst <= bound * (1.0 + 1e-6),
            "worst ratio {worst} vs bound {bound}"
        );
    }

    /// FD oracle for the double-backward: L2 = <v, g_h(params, input)> and
    /// both returned gradients must match numeric perturbation.
    #[test]
    fn double_backward_matches_finite_differences() {
        let mut r = rng(7);
        let spec = MlpSpec::new(
            vec![4, 6, 5, 2],
            vec![
                Activation::Softplus { beta: 2.0 },
                Activation::Softplus { beta: 3.0 },
                Activation::Identity,
            ],
            false,
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut r);
        let n = 4;
        let seed = [1.0, 0.0];
        let mut input: Vec<f64> = (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect();

        let cache = mlp.forward_batch(&input, n).unwrap();
        let (_, igc) = mlp.input_gradient_batch(&cache, &seed).unwrap();
        let mut grads = MlpGrads::zeros_like(&mlp);
        let g_input = mlp.double_backward_batch(&cache, &igc, &v, &mut grads).unwrap();

        let l2 = |m: &Mlp, inp: &[f64]| -> f64 {
            let c = m.forward_batch(inp, n).unwrap();
            let (gh, _) = m.input_gradient_batch(&c, &seed).unwrap();
            gh.iter().zip(&v).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for li in 0..mlp.layers.len() {
            for _ in 0..25 {
                let wi = r.random_range(0..mlp.layers[li].w.len());
                let orig = mlp.layers[li].w[wi];
                mlp.layers[li].w[wi] = orig + h;
                let lp = l2(&mlp, &input);
                mlp.layers[li].w[wi] = orig - h;
                let lm = l2(&mlp, &input);
                mlp.layers[li].w[wi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (grads.w[li][wi] - fd).abs() / fd.abs().max(1e-4);
                assert!(err <= 1e-3, "w[{li}][{wi}]: {} vs {fd}", grads.w[li][wi]);
            }
            for bi in 0..mlp.layers[li].b.len() {
                let orig = mlp.layers[li].b[bi];
                mlp.layers[li].b[bi] = orig + h;
                let lp = l2(&mlp, &input);
                mlp.layers[li].b[bi] = orig - h;
                let lm = l2(&mlp, &input);
                mlp.layers[li].b[bi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (grads.b[li][bi] - fd).abs() / fd.abs().max(1e-4);
                assert!(err <= 1e-3, "b[{li}][{bi}]: {} vs {fd}", grads.b[li][bi]);
            }
        }
        for idx in 0..input.len() {
            let orig = input[idx];
            input[idx] = orig + h;
            let lp = l2(&mlp, &input);
            input[idx] = orig - h;
            let lm = l2(&mlp, &input);
            input[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (g_input[idx] - fd).abs() / fd.abs().max(1e-4);
            assert!(err <= 1e-3, "input[{idx}]: {} vs {fd}", g_input[idx]);
        }
    }

    #[test]
    fn input_gradient_matches_backward() {
        let mut r = rng(8);
        let spec = MlpSpec::new(
            vec![3, 8, 2],
            vec![Activation::Softplus { beta: 2.0 }, Activation::Identity],
            false,
        )
        .unwrap();
        let mlp = Mlp::init(spec, &mut r);
        let n = 3;
        let input: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let cache = mlp.forward_batch(&input, n).unwrap();
        let seed = [0.0, 1.0];
        let (gh, _) = mlp.input_gradient_batch(&cache, &seed).unwrap();
        let upstream: Vec<f64> = (0..n).flat_map(|_| seed.iter().copied()).collect();
        let gh2 = mlp
            .backward_batch(&cache, &upstream, None, true)
            .unwrap()
            .unwrap();
        for (a, b) in gh.iter().zip(&gh2) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
