//! Evaluation of a trained generator: mode coverage, Frechet distance
//! between 2D sample clouds, and the latent-space collapse probe.

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::data::{sample_latent, MixtureSpec, PriorSpec, Rng};
use crate::error::{Error, Result};
use crate::models::{bind_params, mlp_eval, mlp_forward, MlpParams, MlpSpec};
use crate::scalar::Real;
use crate::similarity::scaled_gram;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Quantitative summary for one generator evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub modes_captured: usize,
    pub hq_fraction: f64,
    pub frechet: f64,
    pub per_mode_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_latent_similarity_of_near_duplicates: Option<f64>,
}

/// A sample is high-quality iff it lies within three standard deviations
/// of its nearest center; a mode is captured iff it is the nearest center
/// of at least one high-quality sample.
pub fn mode_coverage(samples: &Tensor<f64>, spec: &MixtureSpec) -> (usize, f64, Vec<usize>) {
    let n = samples.rows();
    let mut per_mode = vec![0usize; spec.centers.len()];
    let mut hq_count = 0usize;
    for i in 0..n {
        let p = samples.row(i);
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (k, c) in spec.centers.iter().enumerate() {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        if best_d2.sqrt() <= 3.0 * spec.std {
            hq_count += 1;
            per_mode[best] += 1;
        }
    }
    let modes = per_mode.iter().filter(|&&c| c > 0).count();
    let hq_fraction = if n == 0 { 0.0 } else { hq_count as f64 / n as f64 };
    (modes, hq_fraction, per_mode)
}

fn mean2<F: Real>(samples: &Tensor<F>) -> [F; 2] {
    let n = F::from_f64_lit(samples.rows() as f64);
    let mut mu = [F::zero(); 2];
    for i in 0..samples.rows() {
        mu[0] += samples.get2(i, 0);
        mu[1] += samples.get2(i, 1);
    }
    [mu[0] / n, mu[1] / n]
}

fn cov2<F: Real>(samples: &Tensor<F>, mu: [F; 2]) -> [[F; 2]; 2] {
    let n = F::from_f64_lit(samples.rows() as f64);
    let mut c = [[F::zero(); 2]; 2];
    for i in 0..samples.rows() {
        let dx = samples.get2(i, 0) - mu[0];
        let dy = samples.get2(i, 1) - mu[1];
        c[0][0] += dx * dx;
        c[0][1] += dx * dy;
        c[1][1] += dy * dy;
    }
    c[0][0] = c[0][0] / n;
    c[0][1] = c[0][1] / n;
    c[1][0] = c[0][1];
    c[1][1] = c[1][1] / n;
    c
}

/// Principal square root of a symmetric 2x2 PSD matrix via
/// eigendecomposition, with symmetrization and eigenvalue clamping at 0.
fn sqrtm2<F: Real>(m: [[F; 2]; 2]) -> Result<[[F; 2]; 2]> {
    let half = F::from_f64_lit(0.5);
    let a = m[0][0];
    let b = half * (m[0][1] + m[1][0]);
    let c = m[1][1];
    let tr_half = half * (a + c);
    let det_gap = half * (a - c);
    let disc = (det_gap * det_gap + b * b).sqrt();
    let l1 = tr_half + disc;
    let l2 = tr_half - disc;
    let tol = F::from_f64_lit(-1e-9) * F::one().max(l1.abs());
    if l2 < tol {
        return Err(Error::Contract(format!(
            "matrix square root of a non-PSD matrix (eigenvalues {l1:?}, {l2:?})"
        )));
    }
    let l1 = l1.max(F::zero()).sqrt();
    let l2 = l2.max(F::zero()).sqrt();
    // eigenvector for l1
    let (vx, vy) = if b.abs() > F::from_f64_lit(1e-300) {
        (l1 * l1 - c, b)
    } else if a >= c {
        (F::one(), F::zero())
    } else {
        (F::zero(), F::one())
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = if norm > F::zero() {
        (vx / norm, vy / norm)
    } else {
        (F::one(), F::zero())
    };
    // V diag(sqrt l) V^T with the orthogonal complement (-vy, vx)
    let s00 = l1 * vx * vx + l2 * vy * vy;
    let s01 = l1 * vx * vy - l2 * vx * vy;
    let s11 = l1 * vy * vy + l2 * vx * vx;
    Ok([[s00, s01], [s01, s11]])
}

fn matmul2<F: Real>(a: [[F; 2]; 2], b: [[F; 2]; 2]) -> [[F; 2]; 2] {
    let mut out = [[F::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// Frechet distance between the Gaussians fitted to two 2D sample sets:
/// ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca^1/2 Cb Ca^1/2)^1/2).
pub fn frechet_distance<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    if a.cols() != 2 || b.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 3 || b.rows() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: a.rows().min(b.rows()),
        });
    }
    let mu_a = mean2(a);
    let mu_b = mean2(b);
    let ca = cov2(a, mu_a);
    let cb = cov2(b, mu_b);

    let sa = sqrtm2(ca)?;
    let middle = matmul2(matmul2(sa, cb), sa);
    let cross = sqrtm2(middle)?;

    let dmu0 = mu_a[0] - mu_b[0];
    let dmu1 = mu_a[1] - mu_b[1];
    let mean_term = dmu0 * dmu0 + dmu1 * dmu1;
    let two = F::from_f64_lit(2.0);
    let trace_term =
        ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - two * (cross[0][0] + cross[1][1]);
    Ok(mean_term + trace_term.max(F::zero()))
}

/// Result of one back-propagation search for a second latent mapping to
/// the same output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub mse: f64,
    /// Sigmoid-scaled cosine similarity of (z1, z2).
    pub latent_similarity: f64,
    pub converged: bool,
}

pub const PROBE_STEPS: usize = 2000;
pub const PROBE_LR: f64 = 1e-2;
pub const PROBE_MSE_THRESHOLD: f64 = 1e-4;
/// Random candidates evaluated per probe run before descent begins.
pub const PROBE_INIT_POOL: usize = 64;

/// Starting from a random z2, minimizes ||G(z2) - G(z1)||^2 by Adam on
/// z2. With `steps = 0` the initialization's mse is returned untouched.
pub fn collapse_probe(
    gen_params: &MlpParams,
    gen_spec: &MlpSpec,
    z1: &Tensor<f64>,
    rng: &mut Rng,
    steps: usize,
    lr: f64,
    sigmoid_scale: f64,
    mse_threshold: f64,
) -> Result<ProbeResult> {
    let d = gen_spec.input_dim;
    let target = {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, gen_params);
        let z = tape.leaf(z1.clone());
        let (out, _) = mlp_forward(&mut tape, &bound, gen_spec, z)?;
        tape.value(out).clone()
    };

    // Start descent from the best of a pool of random candidates: the
    // objective is full of flat regions for sharp generators, and a lone
    // random init routinely strands in the wrong basin.
    let mut z2 = sample_latent(&PriorSpec { d }, 1, rng);
    let mut init_mse = {
        let out = mlp_eval(gen_params, gen_spec, &z2)?;
        out.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64
    };
    for _ in 1..PROBE_INIT_POOL {
        let cand = sample_latent(&PriorSpec { d }, 1, rng);
        let out = mlp_eval(gen_params, gen_spec, &cand)?;
        let m = out
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        if m < init_mse {
            init_mse = m;
            z2 = cand;
        }
    }
    let mut flat = vec![z2.clone()];
    let mut state = AdamState::new(&flat);
    let hyper = AdamHyper {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    let mut mse = f64::NAN;
    for step in 0..=steps {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, gen_params);
        let z = tape.leaf(z2.clone());
        let (out, _) = mlp_forward(&mut tape, &bound, gen_spec, z)?;
        let target_leaf = tape.leaf(target.clone());
        let diff = tape.sub(out, target_leaf)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        mse = tape.value(loss).item();
        if !mse.is_finite() {
            return Err(Error::NumericAbort {
                step,
                detail: "collapse probe produced a non-finite mse".into(),
            });
        }
        if step == steps {
            break;
        }
        let grads = tape.backward(loss)?;
        let g = vec![tape.grad(&grads, z)];
        adam_step(&mut flat, &g, &mut state, hyper)?;
        z2 = flat[0].clone();
    }

    let stacked = Tensor::matrix(
        2,
        d,
        z1.data().iter().chain(z2.data()).copied().collect(),
    )?;
    let sim = scaled_gram(&stacked, sigmoid_scale)?.get(0, 1);
    Ok(ProbeResult {
        z1: z1.data().to_vec(),
        z2: z2.data().to_vec(),
        mse,
        latent_similarity: sim,
        converged: mse < mse_threshold,
    })
}

/// Mean and histogram of latent similarities over probe pairs whose
/// outputs were matched below the mse threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NearDuplicateStat {
    pub n_pairs: usize,
    pub n_converged: usize,
    pub mean_similarity: f64,
    /// 20 equal bins over (0, 1).
    pub histogram: Vec<usize>,
    pub similarities: Vec<f64>,
}

pub const PROBE_RESTARTS: usize = 5;

pub fn near_duplicate_similarity_stat(
    gen_params: &MlpParams,
    gen_spec: &MlpSpec,
    n_pairs: usize,
    mse_threshold: f64,
    sigmoid_scale: f64,
    seed: u64,
) -> Result<NearDuplicateStat> {
    let prior = PriorSpec { d: gen_spec.input_dim };
    let mut similarities = Vec::new();
    let mut n_converged = 0usize;
    for pair in 0..n_pairs {
        let mut z_rng = Rng::derive(seed, 1000 + pair as u64);
        let z1 = sample_latent(&prior, 1, &mut z_rng);
        // several restarts per pair; keep the best-matching z2 so the
        // statistic reflects the map's preimage structure and not the
        // luck of a single initialization
        let mut best: Option<ProbeResult> = None;
        for restart in 0..PROBE_RESTARTS {
            let salt = 2000 + (pair * PROBE_RESTARTS + restart) as u64;
            let mut probe_rng = Rng::derive(seed, salt);
            let probe = collapse_probe(
                gen_params,
                gen_spec,
                &z1,
                &mut probe_rng,
                PROBE_STEPS,
                PROBE_LR,
                sigmoid_scale,
                mse_threshold,
            )?;
            if best.as_ref().is_none_or(|b| probe.mse < b.mse) {
                best = Some(probe);
            }
        }
        let probe = best.expect("at least one restart");
        if probe.converged {
            n_converged += 1;
            similarities.push(probe.latent_similarity);
        }
    }
    if n_converged < 10 {
        return Err(Error::InsufficientData {
            needed: 10,
            got: n_converged,
        });
    }
    let mean = similarities.iter().sum::<f64>() / similarities.len() as f64;
    let mut histogram = vec![0usize; 20];
    for &s in &similarities {
        let bin = ((s * 20.0) as usize).min(19);
        histogram[bin] += 1;
    }
    Ok(NearDuplicateStat {
        n_pairs,
        n_converged,
        mean_similarity: mean,
        histogram,
        similarities,
    })
}
