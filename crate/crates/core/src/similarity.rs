//! Pairwise similarity of batch rows and the diversity penalty.
//!
//! `raw_gram` / `scaled_gram` are the reference (non-differentiable)
//! computations, done once per unordered pair so the matrix is exactly
//! symmetric and the raw diagonal is exactly 1. The tape builders mirror
//! them with differentiable ops for use inside the training objective.

use crate::error::{Error, Result};
use crate::scalar::{Real, DIV_GUARD};
use crate::tape::{sigmoid, NodeId, Tape};
use crate::tensor::Tensor;

/// m x m matrix of pairwise row similarities, raw cosine or
/// sigmoid-scaled.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<F: Real> {
    m: usize,
    values: Vec<F>,
    scaled: bool,
    s: F,
}

impl<F: Real> SimilarityMatrix<F> {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn scaled(&self) -> bool {
        self.scaled
    }

    pub fn scale_factor(&self) -> F {
        self.s
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

fn row_cosines<F: Real>(batch: &Tensor<F>) -> Result<(usize, Vec<F>)> {
    let m = batch.rows();
    let guard = F::from_f64_lit(DIV_GUARD);
    let norms: Vec<F> = (0..m)
        .map(|i| {
            batch
                .row(i)
                .iter()
                .fold(F::zero(), |s, &x| s + x * x)
                .sqrt()
        })
        .collect();
    if let Some(row) = norms.iter().position(|&n| n <= guard) {
        return Err(Error::DegenerateRow { row });
    }
    let mut cos = vec![F::zero(); m * m];
    for i in 0..m {
        cos[i * m + i] = F::one();
        for j in (i + 1)..m {
            let dot = batch
                .row(i)
                .iter()
                .zip(batch.row(j))
                .fold(F::zero(), |s, (&a, &b)| s + a * b);
            let c = dot / (norms[i] * norms[j]);
            cos[i * m + j] = c;
            cos[j * m + i] = c;
        }
    }
    Ok((m, cos))
}

/// Normalized Gram matrix: cosine similarity of every row pair.
pub fn raw_gram<F: Real>(batch: &Tensor<F>) -> Result<SimilarityMatrix<F>> {
    let (m, values) = row_cosines(batch)?;
    Ok(SimilarityMatrix {
        m,
        values,
        scaled: false,
        s: F::zero(),
    })
}

/// Sigmoid-scaled Gram matrix: entry (i,j) = sigmoid(s * cosine).
pub fn scaled_gram<F: Real>(batch: &Tensor<F>, s: F) -> Result<SimilarityMatrix<F>> {
    if !s.is_finite() {
        return Err(Error::Contract("scaled_gram: scale factor must be finite".into()));
    }
    let (m, cos) = row_cosines(batch)?;
    let values = cos.into_iter().map(|c| sigmoid(s * c)).collect();
    Ok(SimilarityMatrix {
        m,
        values,
        scaled: true,
        s,
    })
}

/// Diversity penalty: mean over all ordered pairs of the ratio of
/// feature similarity to latent similarity. Exactly 1 when the two
/// matrices coincide.
pub fn dp_value<F: Real>(gz: &SimilarityMatrix<F>, gf: &SimilarityMatrix<F>) -> Result<F> {
    if gz.m != gf.m {
        return Err(Error::Contract(format!(
            "dp_value: size mismatch {} vs {}",
            gz.m, gf.m
        )));
    }
    if !gz.scaled || !gf.scaled || gz.s != gf.s {
        return Err(Error::Contract(
            "dp_value: both sides must be sigmoid-scaled with the same factor".into(),
        ));
    }
    let mut acc = F::zero();
    for (f, z) in gf.values.iter().zip(&gz.values) {
        acc += *f / *z;
    }
    let m2 = F::from_f64_lit((gz.m * gz.m) as f64);
    Ok(acc / m2)
}

/// Differentiable scaled Gram matrix of a batch living on the tape.
pub fn scaled_gram_node<F: Real>(tape: &mut Tape<F>, batch: NodeId, s: F) -> Result<NodeId> {
    let n = tape.row_normalize(batch)?;
    let nt = tape.transpose(n)?;
    let cos = tape.matmul(n, nt)?;
    let scaled = tape.scalar_mul(cos, s)?;
    tape.sigmoid(scaled)
}

/// Differentiable diversity penalty between a latent batch and a feature
/// batch (node ids on the same tape).
pub fn dp_node<F: Real>(tape: &mut Tape<F>, latents: NodeId, features: NodeId, s: F) -> Result<NodeId> {
    let m = tape.value(latents).rows();
    if tape.value(features).rows() != m {
        return Err(Error::Contract(format!(
            "dp_node: batch size mismatch {} vs {}",
            m,
            tape.value(features).rows()
        )));
    }
    let gz = scaled_gram_node(tape, latents, s)?;
    let gf = scaled_gram_node(tape, features, s)?;
    let ratio = tape.div(gf, gz)?;
    let total = tape.sum(ratio)?;
    tape.scalar_mul(total, F::one() / F::from_f64_lit((m * m) as f64))
}

/// Outcome of numerically checking that the product of two normal
/// densities is proportional to a normal density.
#[derive(Debug, Clone)]
pub struct GaussianProductResult {
    pub mu: f64,
    pub sigma: f64,
    /// Proportionality constant, obtained by trapezoidal integration of
    /// the pointwise product over the grid.
    pub scale: f64,
    pub max_proportionality_error: f64,
}

fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Checks that N(x; mu_f, sigma_f) * N(x; mu_g, sigma_g) is a constant
/// multiple of N(x; mu, sigma) with
/// mu = (mu_f sigma_g^2 + mu_g sigma_f^2) / (sigma_f^2 + sigma_g^2) and
/// sigma = sqrt(sigma_f^2 sigma_g^2 / (sigma_f^2 + sigma_g^2)),
/// on a grid of `grid_points` spanning `mu +- grid_halfwidth`.
pub fn verify_gaussian_product(
    mu_f: f64,
    sigma_f: f64,
    mu_g: f64,
    sigma_g: f64,
    grid_halfwidth: f64,
    grid_points: usize,
) -> Result<GaussianProductResult> {
    if sigma_f <= 0.0 || sigma_g <= 0.0 {
        return Err(Error::Contract(format!(
            "verify_gaussian_product: sigmas must be positive, got {sigma_f}, {sigma_g}"
        )));
    }
    if grid_points < 1001 {
        return Err(Error::Contract(format!(
            "verify_gaussian_product: grid_points must be >= 1001, got {grid_points}"
        )));
    }
    let vf = sigma_f * sigma_f;
    let vg = sigma_g * sigma_g;
    let mu = (mu_f * vg + mu_g * vf) / (vf + vg);
    let sigma = (vf * vg / (vf + vg)).sqrt();

    let lo = mu - grid_halfwidth;
    let h = 2.0 * grid_halfwidth / (grid_points - 1) as f64;
    // ratios are taken in log space so tail products cannot underflow
    let mut log_ratios = Vec::with_capacity(grid_points);
    let mut integral = 0.0;
    let mut prev_product = 0.0;
    for k in 0..grid_points {
        let x = lo + h * k as f64;
        let log_product = normal_log_pdf(x, mu_f, sigma_f) + normal_log_pdf(x, mu_g, sigma_g);
        log_ratios.push(log_product - normal_log_pdf(x, mu, sigma));
        let product = log_product.exp();
        if k > 0 {
            integral += 0.5 * h * (product + prev_product);
        }
        prev_product = product;
    }
    let mean_log = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
    let max_err = log_ratios
        .iter()
        .map(|lr| ((lr - mean_log).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(GaussianProductResult {
        mu,
        sigma,
        scale: integral,
        max_proportionality_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    fn random_batch(m: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
        let data = (0..m * d).map(|_| rng.next_normal()).collect();
        Tensor::matrix(m, d, data).unwrap()
    }

    /// Independent two-nested-loop oracle for the raw Gram matrix.
    pub fn gram_oracle(batch: &Tensor<f64>) -> Vec<f64> {
        let m = batch.rows();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut dot = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for k in 0..batch.cols() {
                    dot += batch.get2(i, k) * batch.get2(j, k);
                    ni += batch.get2(i, k).powi(2);
                    nj += batch.get2(j, k).powi(2);
                }
                out[i * m + j] = dot / (ni.sqrt() * nj.sqrt());
            }
        }
        out
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let b = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = raw_gram(&b).unwrap();
        assert_eq!(g.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn parallel_rows_all_ones() {
        let b = Tensor::matrix(2, 2, vec![2.0, 0.0, 5.0, 0.0]).unwrap();
        let g = raw_gram(&b).unwrap();
        for &v in g.values() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn raw_gram_matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let b = random_batch(4, 6, &mut rng);
        let g = raw_gram(&b).unwrap();
        let oracle = gram_oracle(&b);
        for (a, b) in g.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_gram_exact_symmetry_and_unit_diagonal() {
        let mut rng = Rng::new(9);
        let b = random_batch(8, 5, &mut rng);
        let g = raw_gram(&b).unwrap();
        for i in 0..8 {
            assert_eq!(g.get(i, i), 1.0);
            for j in 0..8 {
                assert_eq!(g.get(i, j), g.get(j, i));
                assert!(g.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let b = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        match raw_gram(&b) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate-row error, got {other:?}"),
        }
    }

    #[test]
    fn scaled_gram_parallel_and_orthogonal() {
        let parallel: Tensor<f64> = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let g = scaled_gram(&parallel, 1.0).unwrap();
        for &v in g.values() {
            assert!((v - 0.7310585786300049).abs() < 1e-12);
        }
        let ortho: Tensor<f64> = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = scaled_gram(&ortho, 7.3).unwrap();
        assert!((g.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((g.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scaled_gram_composes_raw_with_sigmoid() {
        let mut rng = Rng::new(17);
        let b = random_batch(6, 4, &mut rng);
        let s = 5.0;
        let raw = gram_oracle(&b);
        let g = scaled_gram(&b, s).unwrap();
        for (i, &v) in g.values().iter().enumerate() {
            // diagonal is set from cosine exactly 1, oracle's may differ in ulps
            let expect = 1.0 / (1.0 + (-s * if i % 7 == 0 { 1.0 } else { raw[i] }).exp());
            assert!((v - expect).abs() < 1e-12);
        }
    }

    /// Double-loop evaluation of the penalty ratio sum.
    pub fn dp_oracle(gz: &[f64], gf: &[f64], m: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                acc += gf[i * m + j] / gz[i * m + j];
            }
        }
        acc / (m * m) as f64
    }

    #[test]
    fn dp_is_one_for_equal_structures() {
        let mut rng = Rng::new(23);
        let b = random_batch(5, 7, &mut rng);
        let gz = scaled_gram(&b, 2.5).unwrap();
        let gf = scaled_gram(&b, 2.5).unwrap();
        assert!((dp_value(&gz, &gf).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dp_hand_case_m2() {
        // identical features (cosine 1), orthogonal latents (cosine 0), s = 1
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let gz = scaled_gram(&z, 1.0).unwrap();
        let gf = scaled_gram(&f, 1.0).unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        let expect = (2.0 * 1.0 + 2.0 * (sig1 / 0.5)) / 4.0;
        assert!((dp_value(&gz, &gf).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_double_loop_oracle() {
        let mut rng = Rng::new(31);
        let z = random_batch(8, 6, &mut rng);
        let f = random_batch(8, 10, &mut rng);
        let gz = scaled_gram(&z, 1.0).unwrap();
        let gf = scaled_gram(&f, 1.0).unwrap();
        let expect = dp_oracle(gz.values(), gf.values(), 8);
        assert!((dp_value(&gz, &gf).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dp_rejects_mismatched_sides() {
        let mut rng = Rng::new(37);
        let z = random_batch(4, 6, &mut rng);
        let f = random_batch(5, 6, &mut rng);
        let gz = scaled_gram(&z, 1.0).unwrap();
        let gf = scaled_gram(&f, 1.0).unwrap();
        assert!(dp_value(&gz, &gf).is_err());
        let graw = raw_gram(&z).unwrap();
        let gz2 = scaled_gram(&z, 1.0).unwrap();
        assert!(dp_value(&graw, &gz2).is_err());
    }

    #[test]
    fn tape_dp_matches_plain_value() {
        let mut rng = Rng::new(41);
        let z = random_batch(8, 6, &mut rng);
        let f = random_batch(8, 12, &mut rng);
        let plain = dp_value(&scaled_gram(&z, 1.0).unwrap(), &scaled_gram(&f, 1.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let zi = tape.leaf(z);
        let fi = tape.leaf(f);
        let dp = dp_node(&mut tape, zi, fi, 1.0).unwrap();
        assert!((tape.value(dp).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn dp_gradient_matches_finite_differences() {
        let mut rng = Rng::new(43);
        let z = random_batch(4, 8, &mut rng);
        let f = random_batch(4, 8, &mut rng);
        let mut tape = Tape::new();
        let zi = tape.leaf(z);
        let fi = tape.leaf(f);
        let dp = dp_node(&mut tape, zi, fi, 1.0).unwrap();
        let err = tape.finite_diff_check(dp, fi, 1e-5).unwrap();
        assert!(err < 1e-5, "finite-difference error {err}");
    }

    #[test]
    fn raw_gram_invariant_under_row_rescaling() {
        let mut rng = Rng::new(47);
        let b = random_batch(6, 5, &mut rng);
        let g1 = raw_gram(&b).unwrap();
        let mut scaled_rows = b.clone();
        for i in 0..6 {
            let c = 0.1 + rng.next_f64() * 5.0;
            for j in 0..5 {
                let idx = i * 5 + j;
                scaled_rows.data_mut()[idx] *= c;
            }
        }
        let g2 = raw_gram(&scaled_rows).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_monotone_in_feature_similarity() {
        // pushing a feature pair closer together raises the penalty
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gz = scaled_gram(&z, 1.0).unwrap();
        let mut prev = 0.0;
        for t in [0.0, 0.3, 0.6, 0.9] {
            let f = Tensor::matrix(2, 2, vec![1.0, 0.0, t, 1.0]).unwrap();
            let gf = scaled_gram(&f, 1.0).unwrap();
            let v = dp_value(&gz, &gf).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn gaussian_product_symmetric_case() {
        let r = verify_gaussian_product(0.0, 1.0, 0.0, 1.0, 8.0, 2001).unwrap();
        assert!(r.mu.abs() < 1e-15);
        assert!((r.sigma - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
        assert!(r.max_proportionality_error < 1e-10);
    }

    #[test]
    fn gaussian_product_equal_variances_average_means() {
        let r = verify_gaussian_product(1.0, 1.0, -1.0, 1.0, 8.0, 2001).unwrap();
        assert!(r.mu.abs() < 1e-15);
    }

    fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn gaussian_product_scale_matches_integral() {
        let r = verify_gaussian_product(0.3, 0.7, -1.1, 1.9, 8.0, 4001).unwrap();
        // trapezoidal integral against the analytic constant
        // (the integral of the product equals N(mu_f; mu_g, sqrt(vf+vg)))
        let vf = 0.7f64 * 0.7;
        let vg = 1.9f64 * 1.9;
        let analytic = normal_pdf(0.3, -1.1, (vf + vg).sqrt());
        assert!((r.scale - analytic).abs() < 1e-8);
    }

    #[test]
    fn gaussian_product_contract_errors() {
        assert!(verify_gaussian_product(0.0, 0.0, 0.0, 1.0, 8.0, 2001).is_err());
        assert!(verify_gaussian_product(0.0, 1.0, 0.0, 1.0, 8.0, 100).is_err());
    }
}
