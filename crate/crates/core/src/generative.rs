//! CVAE head with an optional residual Gaussian-mixture output.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamStore, Tensor, Var};

pub const LOG_VAR_BOUND: f64 = 10.0;
const HIDDEN: [usize; 2] = [512, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::LengthMismatch { expected: mean.len(), got: log_var.len() });
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("gaussian parameters must be finite".into()));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND)).collect();
        Ok(GaussianParams { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn from_rows(mean: &Tensor, log_var: &Tensor, row: usize) -> Self {
        GaussianParams { mean: mean.row(row).to_vec(), log_var: log_var.row(row).to_vec() }
    }
}

/// Diagonal Gaussian mixture; `means[k]` and `log_vars[k]` have the output
/// dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub log_vars: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, log_vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || log_vars.len() != k {
            return Err(Error::LengthMismatch { expected: k, got: means.len().min(log_vars.len()) });
        }
        let dim = means[0].len();
        if means.iter().chain(&log_vars).any(|m| m.len() != dim) {
            return Err(Error::Invalid("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid("mixture weights must form a simplex".into()));
        }
        let log_vars =
            log_vars.into_iter().map(|v| v.into_iter().map(|x| x.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND)).collect()).collect();
        Ok(GmmParams { weights, means, log_vars })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    fn from_rows(logits: &Tensor, means: &Tensor, log_vars: &Tensor, row: usize, dim: usize) -> Self {
        let l = logits.row(row);
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let k = l.len();
        let split = |t: &Tensor| (0..k).map(|c| t.row(row)[c * dim..(c + 1) * dim].to_vec()).collect();
        GmmParams { weights: e.iter().map(|v| v / z).collect(), means: split(means), log_vars: split(log_vars) }
    }
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparam_sample(g: &GaussianParams, noise: &[f64]) -> Vec<f64> {
    assert_eq!(noise.len(), g.dim());
    g.mean.iter().zip(&g.log_var).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `log sum_k w_k N(residual; mu_k, diag exp(log_var_k))` via log-sum-exp.
pub fn gmm_log_prob(gmm: &GmmParams, residual: &[f64]) -> f64 {
    assert_eq!(residual.len(), gmm.dim());
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let comps: Vec<f64> = (0..gmm.k())
        .map(|c| {
            let ll: f64 = residual
                .iter()
                .zip(&gmm.means[c])
                .zip(&gmm.log_vars[c])
                .map(|((r, m), lv)| -0.5 * (ln_2pi + lv + (r - m).powi(2) * (-lv).exp()))
                .sum();
            gmm.weights[c].ln() + ll
        })
        .collect();
    let max = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + comps.iter().map(|c| (c - max).exp()).sum::<f64>().ln()
}

/// Draws a component by weight, then a diagonal Gaussian residual from it.
pub fn gmm_sample(gmm: &GmmParams, rng: &mut impl Rng) -> Vec<f64> {
    gmm_sample_with_component(gmm, rng).1
}

pub fn gmm_sample_with_component(gmm: &GmmParams, rng: &mut impl Rng) -> (usize, Vec<f64>) {
    let k = if gmm.k() == 1 { 0 } else { WeightedIndex::new(&gmm.weights).expect("valid weights").sample(rng) };
    let noise = standard_normal(rng, gmm.dim());
    let draw = gmm.means[k].iter().zip(&gmm.log_vars[k]).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect();
    (k, draw)
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim());
    (0..q.dim())
        .map(|i| {
            let (a, b) = (q.log_var[i], p.log_var[i]);
            let d = q.mean[i] - p.mean[i];
            0.5 * (b - a + (a.exp() + d * d) * (-b).exp() - 1.0)
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub cond_dim: usize,
    /// Width of the target fed to the recognition network.
    pub target_dim: usize,
    pub out_dim: usize,
    pub latent_dim: usize,
    pub components: usize,
    /// Residual mixture on; otherwise a plain CVAE trained with squared error.
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct CvaeHead {
    pub cfg: HeadConfig,
    prior: Mlp,
    recog: Mlp,
    decoder: Mlp,
    gmm: Option<Mlp>,
}

/// Graph nodes of one decode.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    pub y_hat: Var,
    /// `(logits, means, log_vars)` when the residual mixture is on.
    pub gmm: Option<(Var, Var, Var)>,
}

fn mlp_dims(input: usize, output: usize) -> Vec<usize> {
    vec![input, HIDDEN[0], HIDDEN[1], output]
}

impl CvaeHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: HeadConfig, rng: &mut impl Rng) -> Self {
        let (c, l) = (cfg.cond_dim, cfg.latent_dim);
        let gmm_out = cfg.components + 2 * cfg.components * cfg.out_dim;
        CvaeHead {
            cfg,
            prior: Mlp::new(store, &format!("{name}.prior"), &mlp_dims(c, 2 * l), rng),
            recog: Mlp::new(store, &format!("{name}.recog"), &mlp_dims(c + cfg.target_dim, 2 * l), rng),
            decoder: Mlp::new(store, &format!("{name}.dec"), &mlp_dims(c + l, cfg.out_dim), rng),
            gmm: cfg.residual.then(|| Mlp::new(store, &format!("{name}.gmm"), &mlp_dims(c + l, gmm_out), rng)),
        }
    }

    fn split_gaussian(&self, g: &mut Graph, out: Var) -> (Var, Var) {
        let l = self.cfg.latent_dim;
        let mean = g.slice_cols(out, 0, l);
        let lv = g.slice_cols(out, l, l);
        (mean, g.clamp(lv, -LOG_VAR_BOUND, LOG_VAR_BOUND))
    }

    /// `P(Z | X)`: `(mean, log_var)` rows.
    pub fn prior_vars(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let out = self.prior.forward(g, store, x);
        self.split_gaussian(g, out)
    }

    /// `Q(Z | X, Y)`.
    pub fn recognize_vars(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> (Var, Var) {
        let xy = g.concat_cols(&[x, y]);
        let out = self.recog.forward(g, store, xy);
        self.split_gaussian(g, out)
    }

    pub fn decode_vars(&self, g: &mut Graph, store: &ParamStore, x: Var, z: Var) -> DecodeVars {
        let xz = g.concat_cols(&[x, z]);
        let y_hat = self.decoder.forward(g, store, xz);
        let gmm = self.gmm.as_ref().map(|net| {
            let (k, d) = (self.cfg.components, self.cfg.out_dim);
            let out = net.forward(g, store, xz);
            let logits = g.slice_cols(out, 0, k);
            let means = g.slice_cols(out, k, k * d);
            let lv = g.slice_cols(out, k + k * d, k * d);
            (logits, means, g.clamp(lv, -LOG_VAR_BOUND, LOG_VAR_BOUND))
        });
        DecodeVars { y_hat, gmm }
    }

    /// Per-row reconstruction loss of `target`: mixture NLL of the residual
    /// `target - y_hat`, or the squared error without the mixture.
    pub fn reconstruction(&self, g: &mut Graph, dec: &DecodeVars, target: Var) -> Var {
        let resid = g.sub(target, dec.y_hat);
        match dec.gmm {
            Some((logits, means, lv)) => g.gmm_nll(logits, means, lv, resid),
            None => {
                let sq = g.mul(resid, resid);
                g.row_sum(sq)
            }
        }
    }

    /// Expected output under the head: `y_hat` plus the mixture mean.
    pub fn point_estimate(&self, g: &Graph, dec: &DecodeVars, row: usize) -> Vec<f64> {
        let mut y = g.value(dec.y_hat).row(row).to_vec();
        if let Some(gmm) = self.gmm_at(g, dec, row) {
            for (o, m) in y.iter_mut().zip(gmm.mean()) {
                *o += m;
            }
        }
        y
    }

    /// `y_hat` plus the mean of the component most responsible for
    /// `target`'s residual; `y_hat` alone without the mixture.
    pub fn responsible_estimate(&self, g: &Graph, dec: &DecodeVars, row: usize, target: &[f64]) -> Vec<f64> {
        let mut y = g.value(dec.y_hat).row(row).to_vec();
        if let Some(gmm) = self.gmm_at(g, dec, row) {
            let resid: Vec<f64> = target.iter().zip(&y).map(|(t, h)| t - h).collect();
            let best = (0..gmm.k())
                .map(|c| {
                    let one = GmmParams { weights: vec![1.0], means: vec![gmm.means[c].clone()], log_vars: vec![gmm.log_vars[c].clone()] };
                    (c, gmm.weights[c].ln() + gmm_log_prob(&one, &resid))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(c, _)| c);
            for (o, m) in y.iter_mut().zip(&gmm.means[best]) {
                *o += m;
            }
        }
        y
    }

    /// Draws `y_hat + residual` for one row.
    pub fn sample_output(&self, g: &Graph, dec: &DecodeVars, row: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut y = g.value(dec.y_hat).row(row).to_vec();
        if let Some(gmm) = self.gmm_at(g, dec, row) {
            for (o, r) in y.iter_mut().zip(gmm_sample(&gmm, rng)) {
                *o += r;
            }
        }
        y
    }

    pub fn gmm_at(&self, g: &Graph, dec: &DecodeVars, row: usize) -> Option<GmmParams> {
        dec.gmm.map(|(l, m, v)| GmmParams::from_rows(g.value(l), g.value(m), g.value(v), row, self.cfg.out_dim))
    }

    // Single-instance conveniences over plain vectors.

    pub fn prior(&self, store: &ParamStore, x: &[f64]) -> GaussianParams {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row_vector(x.to_vec()));
        let (m, lv) = self.prior_vars(&mut g, store, xv);
        GaussianParams::from_rows(g.value(m), g.value(lv), 0)
    }

    pub fn recognize(&self, store: &ParamStore, x: &[f64], y: &[f64]) -> GaussianParams {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row_vector(x.to_vec()));
        let yv = g.leaf(Tensor::row_vector(y.to_vec()));
        let (m, lv) = self.recognize_vars(&mut g, store, xv, yv);
        GaussianParams::from_rows(g.value(m), g.value(lv), 0)
    }

    pub fn decode(&self, store: &ParamStore, x: &[f64], z: &[f64]) -> (Vec<f64>, Option<GmmParams>) {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row_vector(x.to_vec()));
        let zv = g.leaf(Tensor::row_vector(z.to_vec()));
        let dec = self.decode_vars(&mut g, store, xv, zv);
        (g.value(dec.y_hat).row(0).to_vec(), self.gmm_at(&g, &dec, 0))
    }

    /// Negative ELBO of one `(x, y)` pair with a single posterior draw:
    /// reconstruction of `y` plus `KL(Q || P)`. Requires `target_dim ==
    /// out_dim`.
    pub fn cvae_loss(&self, store: &ParamStore, x: &[f64], y: &[f64], rng: &mut impl Rng) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, store, x, y, &standard_normal(rng, self.cfg.latent_dim));
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, detail: format!("cvae loss {v}") });
        }
        Ok(v)
    }

    /// Single-instance objective with explicit latent noise: reconstruction
    /// under the posterior draw plus KL to the prior.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, x: &[f64], y: &[f64], noise: &[f64]) -> Var {
        let xv = g.leaf(Tensor::row_vector(x.to_vec()));
        let yv = g.leaf(Tensor::row_vector(y.to_vec()));
        let (mq, lq) = self.recognize_vars(g, store, xv, yv);
        let (mp, lp) = self.prior_vars(g, store, xv);
        let z = sample_vars(g, mq, lq, Tensor::row_vector(noise.to_vec()));
        let dec = self.decode_vars(g, store, xv, z);
        let rec = self.reconstruction(g, &dec, yv);
        let kl = g.kl_diag(mq, lq, mp, lp);
        let total = g.add(rec, kl);
        g.sum_all(total)
    }
}

/// Reparameterized draw inside the graph.
pub fn sample_vars(g: &mut Graph, mean: Var, log_var: Var, noise: Tensor) -> Var {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let e = g.leaf(noise);
    let s = g.mul(std, e);
    g.add(mean, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(residual: bool) -> HeadConfig {
        HeadConfig { cond_dim: 6, target_dim: 2, out_dim: 2, latent_dim: 3, components: 3, residual }
    }

    fn head(seed: u64, cfg: HeadConfig) -> (ParamStore, CvaeHead, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = CvaeHead::new(&mut store, "h", cfg, &mut rng);
        (store, h, rng)
    }

    fn vecr(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn prior_deterministic_and_clamped() {
        let (mut store, h, mut rng) = head(1, small_cfg(true));
        let x = vecr(&mut rng, 6);
        assert_eq!(h.prior(&store, &x), h.prior(&store, &x));
        // Blow up the last layer so raw log-variances leave the bound.
        let id = store.id("h.prior.l2.b").unwrap();
        for v in store.get_mut(id).data_mut() {
            *v = 1e3;
        }
        let p = h.prior(&store, &x);
        assert!(p.log_var.iter().all(|&v| v == LOG_VAR_BOUND));
    }

    #[test]
    fn recognition_differs_from_prior() {
        let (store, h, mut rng) = head(2, small_cfg(true));
        let x = vecr(&mut rng, 6);
        let q = h.recognize(&store, &x, &[0.4, -0.9]);
        let p = h.prior(&store, &x);
        assert_ne!(q, p);
    }

    #[test]
    fn reparam_laws() {
        let g = GaussianParams::new(vec![0.5, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]), g.mean);
        assert_eq!(reparam_sample(&g, &[1.0, 0.0]), vec![1.5, -1.0]);

        let g = GaussianParams::new(vec![0.0], vec![0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| reparam_sample(&g, &standard_normal(&mut rng, 1))[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.7f64.exp() - 1.0).abs() < 0.05);
    }

    #[test]
    fn decode_weights_simplex_and_deterministic() {
        let (store, h, mut rng) = head(4, small_cfg(true));
        let x = vecr(&mut rng, 6);
        let z = vecr(&mut rng, 3);
        let (y1, g1) = h.decode(&store, &x, &z);
        let (y2, g2) = h.decode(&store, &x, &z);
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
        let gmm = g1.unwrap();
        assert!((gmm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(gmm.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn gmm_log_prob_examples() {
        let g = GmmParams::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]).unwrap();
        let expect = (1.0 / (2.0 * std::f64::consts::PI)).ln();
        assert!((gmm_log_prob(&g, &[0.0, 0.0]) - expect).abs() < 1e-12);
        assert!((expect + 1.837877).abs() < 1e-6);

        let single = GmmParams::new(vec![1.0], vec![vec![0.3, -0.2]], vec![vec![0.4, -0.6]]).unwrap();
        let twin = GmmParams::new(vec![0.5, 0.5], vec![vec![0.3, -0.2]; 2], vec![vec![0.4, -0.6]; 2]).unwrap();
        for r in [[0.0, 0.0], [1.2, -3.0], [-0.4, 0.9]] {
            assert!((gmm_log_prob(&single, &r) - gmm_log_prob(&twin, &r)).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_sample_degenerate_and_single() {
        let g = GmmParams::new(
            vec![0.3, 0.7],
            vec![vec![1.0, 2.0], vec![-3.0, 0.5]],
            vec![vec![-10.0, -10.0], vec![-10.0, -10.0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (k, s) = gmm_sample_with_component(&g, &mut rng);
            assert!((s[0] - g.means[k][0]).abs() < 0.05 && (s[1] - g.means[k][1]).abs() < 0.05);
        }
        let one = GmmParams::new(vec![1.0], vec![vec![2.0, -1.0]], vec![vec![0.0, 0.0]]).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let s = gmm_sample(&one, &mut a);
        let e = standard_normal(&mut b, 2);
        assert_eq!(s, vec![2.0 + e[0], -1.0 + e[1]]);
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::new(vec![0.2, -0.1], vec![0.3, -0.5]).unwrap();
        assert_eq!(kl_gaussians(&p, &p), 0.0);
        let q = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        let p = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert!((kl_gaussians(&q, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn plain_cvae_loss_is_squared_error_plus_kl() {
        let (store, h, mut rng) = head(6, small_cfg(false));
        let x = vecr(&mut rng, 6);
        let y = [0.3, -0.7];
        let noise = standard_normal(&mut rng, 3);
        let mut g = Graph::new();
        let loss = h.loss_graph(&mut g, &store, &x, &y, &noise);
        let q = h.recognize(&store, &x, &y);
        let p = h.prior(&store, &x);
        let z = reparam_sample(&q, &noise);
        let (y_hat, gmm) = h.decode(&store, &x, &z);
        assert!(gmm.is_none());
        let sq: f64 = y.iter().zip(&y_hat).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((g.value(loss).item() - (sq + kl_gaussians(&q, &p))).abs() < 1e-10);
    }

    #[test]
    fn loss_matches_manual_composition() {
        let (store, h, mut rng) = head(7, small_cfg(true));
        let x = vecr(&mut rng, 6);
        let y = [0.3, -0.7];
        let noise = standard_normal(&mut rng, 3);
        let mut g = Graph::new();
        let loss = h.loss_graph(&mut g, &store, &x, &y, &noise);
        let q = h.recognize(&store, &x, &y);
        let p = h.prior(&store, &x);
        let (y_hat, gmm) = h.decode(&store, &x, &reparam_sample(&q, &noise));
        let resid: Vec<f64> = y.iter().zip(&y_hat).map(|(a, b)| a - b).collect();
        let expect = -gmm_log_prob(&gmm.unwrap(), &resid) + kl_gaussians(&q, &p);
        assert!((g.value(loss).item() - expect).abs() < 1e-10);
        assert!(h.cvae_loss(&store, &x, &y, &mut rng).unwrap().is_finite());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for residual in [true, false] {
            let (mut store, h, mut rng) = head(8, small_cfg(residual));
            let x = vecr(&mut rng, 6);
            let y = [0.3, -0.7];
            let noise = standard_normal(&mut rng, 3);
            let build = |g: &mut Graph, s: &ParamStore| h.loss_graph(g, s, &x, &y, &noise);
            for c in check_params(&mut store, 16, &build) {
                assert!(c.rel_error <= 1e-4, "{}: {}", c.name, c.rel_error);
            }
        }
    }

    #[test]
    fn gmm_nll_and_kl_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = |r, c| Tensor::from_vec(r, c, vecr(&mut rng, r * c));
        let inputs = vec![t(3, 4), t(3, 8), t(3, 8), t(3, 2)];
        let errs = check_inputs(&inputs, &|g, v| {
            let n = g.gmm_nll(v[0], v[1], v[2], v[3]);
            g.sum_all(n)
        });
        assert!(errs.iter().all(|&e| e <= 1e-4), "{errs:?}");
        let inputs = vec![t(2, 5), t(2, 5), t(2, 5), t(2, 5)];
        let errs = check_inputs(&inputs, &|g, v| {
            let n = g.kl_diag(v[0], v[1], v[2], v[3]);
            g.sum_all(n)
        });
        assert!(errs.iter().all(|&e| e <= 1e-4), "{errs:?}");
    }
}
