#![allow(dead_code)]

use lpt_core::model::{Lpt, ModelConfig, TransportMode};
use lpt_core::numerics::rng::standard_normals;
use lpt_core::numerics::{RngStreams, Stream};

/// Small model used for exhaustive and finite-difference checks.
pub fn reduced(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        latent_tokens: 2,
        latent_channels: 16,
        n_layers: 1,
        embed_dim: 16,
        n_heads: 2,
        ffn_dim: 32,
        max_len,
        vocab_size,
        unet_width: 4,
        regressor_hidden: 16,
        transport: TransportMode::Unet,
        ..ModelConfig::default()
    }
}

/// Adds `N(0, std²)` noise to every parameter so zero-initialized heads and
/// unit gains stop hiding mistakes.
pub fn perturb(model: &mut Lpt, seed: u64, std: f64) {
    let mut rng = RngStreams::new(seed).rng(Stream::Init, &[0xfeed]);
    let params = model.params_mut();
    for i in 0..params.len() {
        let t = params.tensor_mut(i);
        let noise = standard_normals(&mut rng, t.numel());
        for (v, e) in t.data_mut().iter_mut().zip(noise) {
            *v += std * e;
        }
    }
}

pub fn randomized(cfg: ModelConfig, seed: u64) -> Lpt {
    let mut m = Lpt::new(cfg, &RngStreams::new(seed)).unwrap();
    perturb(&mut m, seed, 0.3);
    m
}

pub fn normals(seed: u64, key: u64, n: usize) -> Vec<f64> {
    standard_normals(&mut RngStreams::new(seed).rng(Stream::Sampling, &[key]), n)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central difference of `f` at `x` along every coordinate.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|j| {
            buf[j] = x[j] + h;
            let plus = f(&buf);
            buf[j] = x[j] - h;
            let minus = f(&buf);
            buf[j] = x[j];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Every id sequence the model can score: terminated ones of length ≤ `max_len`
/// plus the unterminated ones of length exactly `max_len`.
pub fn all_sequences(vocab_size: usize, max_len: usize) -> Vec<Vec<u32>> {
    let content: Vec<u32> = (3..vocab_size as u32).collect();
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
    for len in 0..max_len {
        for p in &prefixes {
            let mut t = p.clone();
            t.push(2);
            out.push(t);
        }
        prefixes = prefixes
            .iter()
            .flat_map(|p| {
                content.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
        if len + 1 == max_len {
            out.extend(prefixes.iter().cloned());
        }
    }
    out
}

/// Identity transport with a linear head `y = w·z0 + b + N(0, σ²)`, so the
/// y-only posterior is Gaussian with precision `I + w wᵀ/σ²`.
pub struct Conjugate {
    pub model: Lpt,
    pub w: Vec<f64>,
    pub b: f64,
    pub sigma2: f64,
}

impl Conjugate {
    pub fn new(latent_tokens: usize, latent_channels: usize, seed: u64) -> Self {
        let sigma2 = 0.5;
        let cfg = ModelConfig {
            latent_tokens,
            latent_channels,
            transport: TransportMode::Identity,
            regressor: lpt_core::model::RegressorKind::Linear,
            sigma2: vec![sigma2],
            ..reduced(5, 4)
        };
        let mut model = Lpt::new(cfg, &RngStreams::new(seed)).unwrap();
        let d = latent_tokens * latent_channels;
        let w: Vec<f64> = normals(seed, 1, d).iter().map(|v| v / (d as f64).sqrt()).collect();
        let b = 0.3;
        let params = model.params_mut();
        let iw = params.find("reg.linear.w").unwrap();
        params.tensor_mut(iw).data_mut().copy_from_slice(&w);
        let ib = params.find("reg.linear.b").unwrap();
        params.tensor_mut(ib).data_mut()[0] = b;
        Conjugate { model, w, b, sigma2 }
    }

    /// Posterior mean and covariance of `z0` given `y`.
    pub fn posterior(&self, y: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let ww: f64 = self.w.iter().map(|v| v * v).sum();
        let denom = self.sigma2 + ww;
        let mean = self.w.iter().map(|wi| wi * (y - self.b) / denom).collect();
        let d = self.w.len();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (i == j) as u8 as f64 - self.w[i] * self.w[j] / denom)
                    .collect()
            })
            .collect();
        (mean, cov)
    }
}
