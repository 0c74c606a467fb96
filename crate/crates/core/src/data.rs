//! Synthetic 2D Gaussian-mixture datasets and the latent prior.
//!
//! Randomness comes from a SplitMix64 generator with Box-Muller normals.
//! The algorithm is fixed here so runs reproduce bit-for-bit across
//! builds and platforms. Independent streams are derived from a run seed
//! by mixing a salt through the same SplitMix64 finalizer:
//! `derive(seed, salt) = Rng::new(mix(seed) ^ mix(salt ^ 0x9E3779B97F4A7C15))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// SplitMix64 PRNG with a Box-Muller normal sampler.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream for a sub-task of a seeded run.
    pub fn derive(seed: u64, salt: u64) -> Self {
        Rng::new(mix(seed) ^ mix(salt ^ 0x9E3779B97F4A7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in {0, 1, ..., n-1}.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal draw (Box-Muller, one spare cached).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// 2D isotropic Gaussian mixture: shared std, explicit centers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureSpec {
    pub name: String,
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
}

/// Latent prior: d-dimensional standard normal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorSpec {
    pub d: usize,
}

/// Eight equally spaced centers on a circle.
pub fn make_ring(radius: f64, std: f64) -> Result<MixtureSpec> {
    if radius <= 0.0 || std <= 0.0 {
        return Err(Error::Contract(format!(
            "make_ring needs positive radius and std, got {radius}, {std}"
        )));
    }
    let centers = (0..8)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / 8.0;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    Ok(MixtureSpec {
        name: "ring8".into(),
        centers,
        std,
    })
}

/// Twenty-five centers on a 5x5 lattice spanning [-halfwidth, halfwidth]^2.
pub fn make_grid(halfwidth: f64, std: f64) -> Result<MixtureSpec> {
    if halfwidth <= 0.0 || std <= 0.0 {
        return Err(Error::Contract(format!(
            "make_grid needs positive halfwidth and std, got {halfwidth}, {std}"
        )));
    }
    let ticks: Vec<f64> = (-2..=2).map(|i| halfwidth * i as f64 / 2.0).collect();
    let mut centers = Vec::with_capacity(25);
    for &x in &ticks {
        for &y in &ticks {
            centers.push([x, y]);
        }
    }
    Ok(MixtureSpec {
        name: "grid25".into(),
        centers,
        std,
    })
}

/// n x 2 draws: uniform component choice plus isotropic noise.
pub fn sample_real(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let c = spec.centers[rng.next_below(spec.centers.len())];
        data.push(c[0] + spec.std * rng.next_normal());
        data.push(c[1] + spec.std * rng.next_normal());
    }
    Tensor::matrix(n, 2, data).expect("shape by construction")
}

/// As `sample_real` but also reporting the chosen component per sample.
pub fn sample_real_labeled(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> (Tensor<f64>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.next_below(spec.centers.len());
        let c = spec.centers[k];
        labels.push(k);
        data.push(c[0] + spec.std * rng.next_normal());
        data.push(c[1] + spec.std * rng.next_normal());
    }
    (Tensor::matrix(n, 2, data).expect("shape by construction"), labels)
}

/// m x d standard-normal latent batch.
pub fn sample_latent(prior: &PriorSpec, m: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(m * prior.d);
    for _ in 0..m * prior.d {
        data.push(rng.next_normal());
    }
    Tensor::matrix(m, prior.d, data).expect("shape by construction")
}
