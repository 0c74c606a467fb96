//! Adversarial objectives, the gradient penalty, and the mode-seeking
//! regularizer, all as differentiable tape builders.
//!
//! Sign convention: every builder returns a quantity that is *minimized*.
//! The generator objective is the negated score expectation (or its BCE
//! analogue) plus `lambda * DP` minus `lambda_ms * MS`.

use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::models::{mlp_forward, BoundParams, MlpSpec};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Vanilla,
    WganGp,
}

/// Discriminator loss. For `WganGp`: mean(fake) - mean(real)
/// (+ gp_coefficient * gp added by the caller). For `Vanilla`:
/// binary cross-entropy with real -> 1, fake -> 0 on sigmoid(score),
/// written with softplus for stability.
pub fn d_loss(
    tape: &mut Tape<f64>,
    objective: Objective,
    scores_fake: NodeId,
    scores_real: NodeId,
) -> Result<NodeId> {
    if tape.value(scores_fake).rows() != tape.value(scores_real).rows() {
        return Err(Error::ShapeMismatch {
            op: "d_loss",
            lhs: tape.value(scores_fake).shape().to_vec(),
            rhs: tape.value(scores_real).shape().to_vec(),
        });
    }
    match objective {
        Objective::WganGp => {
            let mf = tape.mean(scores_fake)?;
            let mr = tape.mean(scores_real)?;
            tape.sub(mf, mr)
        }
        Objective::Vanilla => {
            // -log sigmoid(s_real) = softplus(-s_real); -log(1 - sigmoid(s_fake)) = softplus(s_fake)
            let neg_real = tape.scalar_mul(scores_real, -1.0)?;
            let sp_real = tape.softplus(neg_real)?;
            let real_term = tape.mean(sp_real)?;
            let sp_fake = tape.softplus(scores_fake)?;
            let fake_term = tape.mean(sp_fake)?;
            tape.add(real_term, fake_term)
        }
    }
}

/// Generator adversarial term (minimized). WGAN: -mean(fake score);
/// vanilla: BCE toward the real label, softplus(-s_fake).
pub fn g_adversarial(
    tape: &mut Tape<f64>,
    objective: Objective,
    scores_fake: NodeId,
) -> Result<NodeId> {
    match objective {
        Objective::WganGp => {
            let m = tape.mean(scores_fake)?;
            tape.scalar_mul(m, -1.0)
        }
        Objective::Vanilla => {
            let neg = tape.scalar_mul(scores_fake, -1.0)?;
            let sp = tape.softplus(neg)?;
            tape.mean(sp)
        }
    }
}

/// Total generator loss: adversarial + lambda * dp - lambda_ms * ms.
pub fn g_loss(
    tape: &mut Tape<f64>,
    adversarial: NodeId,
    dp: Option<(NodeId, f64)>,
    ms: Option<(NodeId, f64)>,
) -> Result<NodeId> {
    let mut total = adversarial;
    if let Some((dp_node, lambda)) = dp {
        let scaled = tape.scalar_mul(dp_node, lambda)?;
        total = tape.add(total, scaled)?;
    }
    if let Some((ms_node, lambda_ms)) = ms {
        let scaled = tape.scalar_mul(ms_node, -lambda_ms)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// WGAN-GP penalty: E[(||grad_xhat D(xhat)||_2 - 1)^2] with xhat a
/// per-sample uniform interpolation of real and fake points. The nested
/// gradient is built as tape nodes, so the result is differentiable
/// w.r.t. the discriminator parameters.
pub fn gradient_penalty(
    tape: &mut Tape<f64>,
    d_bound: &BoundParams,
    d_spec: &MlpSpec,
    x_real: &Tensor<f64>,
    x_fake: &Tensor<f64>,
    rng: &mut Rng,
) -> Result<NodeId> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradient_penalty",
            lhs: x_real.shape().to_vec(),
            rhs: x_fake.shape().to_vec(),
        });
    }
    let (m, c) = (x_real.rows(), x_real.cols());
    let mut mixed = Vec::with_capacity(m * c);
    for i in 0..m {
        let u = rng.next_f64();
        for j in 0..c {
            mixed.push(u * x_real.get2(i, j) + (1.0 - u) * x_fake.get2(i, j));
        }
    }
    let x_hat = tape.leaf(Tensor::matrix(m, c, mixed)?);
    let (scores, _) = mlp_forward(tape, d_bound, d_spec, x_hat)?;
    let total = tape.sum(scores)?;
    let grads = tape.backward(total)?;
    let grad_x = grads
        .node(x_hat)
        .ok_or_else(|| Error::Contract("gradient_penalty: score independent of input".into()))?;
    let norms = tape.l2_norm_axis(grad_x, 1)?;
    let shifted = tape.scalar_add(norms, -1.0)?;
    let sq = tape.square(shifted)?;
    tape.mean(sq)
}

/// Mode-seeking ratio (maximized): mean over consecutive disjoint pairs
/// of L1 output distance over L1 latent distance.
pub fn ms_regularizer(
    tape: &mut Tape<f64>,
    latents: NodeId,
    outputs: NodeId,
) -> Result<NodeId> {
    let m = tape.value(latents).rows();
    if m < 2 || tape.value(outputs).rows() != m {
        return Err(Error::Contract(format!(
            "ms_regularizer: needs matched batches of at least 2 rows, got {} and {}",
            m,
            tape.value(outputs).rows()
        )));
    }
    let pairs = m / 2;
    let even: Vec<usize> = (0..pairs).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..pairs).map(|i| 2 * i + 1).collect();

    let za = tape.take_rows(latents, even.clone())?;
    let zb = tape.take_rows(latents, odd.clone())?;
    let ga = tape.take_rows(outputs, even)?;
    let gb = tape.take_rows(outputs, odd)?;

    let dz = tape.sub(za, zb)?;
    let dz = tape.abs(dz)?;
    let dz = tape.sum_axis(dz, 1)?;
    let dz = tape.scalar_add(dz, 1e-8)?;

    let dg = tape.sub(ga, gb)?;
    let dg = tape.abs(dg)?;
    let dg = tape.sum_axis(dg, 1)?;

    let ratio = tape.div(dg, dz)?;
    tape.mean(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_latent, PriorSpec};
    use crate::models::{bind_params, discriminator_spec, init_params, Layer, MlpParams};
    use crate::models::{Activation, OutputActivation};

    fn leaf_scores(tape: &mut Tape<f64>, v: Vec<f64>) -> NodeId {
        let n = v.len();
        tape.leaf(Tensor::matrix(n, 1, v).unwrap())
    }

    #[test]
    fn wgan_d_loss_zero_for_symmetric_scores() {
        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, vec![0.3, -0.7, 1.2]);
        let r = leaf_scores(&mut tape, vec![0.3, -0.7, 1.2]);
        let l = d_loss(&mut tape, Objective::WganGp, f, r).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn vanilla_d_loss_at_zero_scores_is_two_ln2() {
        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, vec![0.0, 0.0]);
        let r = leaf_scores(&mut tape, vec![0.0, 0.0]);
        let l = d_loss(&mut tape, Objective::Vanilla, f, r).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn d_loss_matches_per_sample_loop_oracle() {
        let mut rng = Rng::new(3);
        let fake: Vec<f64> = (0..9).map(|_| rng.next_normal()).collect();
        let real: Vec<f64> = (0..9).map(|_| rng.next_normal()).collect();
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());

        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, fake.clone());
        let r = leaf_scores(&mut tape, real.clone());
        let lw = d_loss(&mut tape, Objective::WganGp, f, r).unwrap();
        let lv = d_loss(&mut tape, Objective::Vanilla, f, r).unwrap();

        let expect_w = fake.iter().sum::<f64>() / 9.0 - real.iter().sum::<f64>() / 9.0;
        let expect_v = real.iter().map(|&s| -(sigmoid(s)).ln()).sum::<f64>() / 9.0
            + fake.iter().map(|&s| -(1.0 - sigmoid(s)).ln()).sum::<f64>() / 9.0;
        assert!((tape.value(lw).item() - expect_w).abs() < 1e-12);
        assert!((tape.value(lv).item() - expect_v).abs() < 1e-12);
    }

    #[test]
    fn g_loss_reduces_to_baseline_at_zero_lambda() {
        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, vec![0.4, -0.2, 0.9]);
        let adv = g_adversarial(&mut tape, Objective::WganGp, f).unwrap();
        let total = g_loss(&mut tape, adv, None, None).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(adv).item());
    }

    #[test]
    fn g_loss_arithmetic() {
        // lambda=10, dp=1, mean score 0 -> loss 10
        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, vec![1.0, -1.0]);
        let adv = g_adversarial(&mut tape, Objective::WganGp, f).unwrap();
        let dp = tape.leaf(Tensor::scalar(1.0));
        let total = g_loss(&mut tape, adv, Some((dp, 10.0)), None).unwrap();
        assert!((tape.value(total).item() - 10.0).abs() < 1e-15);
    }

    #[test]
    fn g_loss_matches_scalar_recomputation() {
        let mut rng = Rng::new(8);
        let scores: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let dpv = 1.0 + rng.next_f64();
        let msv = rng.next_f64();
        let (lambda, lambda_ms) = (2.5, 0.7);
        let mut tape = Tape::new();
        let f = leaf_scores(&mut tape, scores.clone());
        let adv = g_adversarial(&mut tape, Objective::WganGp, f).unwrap();
        let dp = tape.leaf(Tensor::scalar(dpv));
        let ms = tape.leaf(Tensor::scalar(msv));
        let total = g_loss(&mut tape, adv, Some((dp, lambda)), Some((ms, lambda_ms))).unwrap();
        let expect =
            -scores.iter().sum::<f64>() / 6.0 + lambda * dpv - lambda_ms * msv;
        assert!((tape.value(total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_slope_linear_discriminator_has_zero_penalty() {
        // D(x) = w.x with ||w|| = 1 through a pass-through "hidden" layer
        let spec = MlpSpec {
            input_dim: 2,
            hidden: vec![(2, Activation::LeakyRelu)],
            output_dim: 1,
            output_activation: OutputActivation::None,
            feature_layer_index: 0,
        };
        // hidden carries (x0, -x0); for x0 > 0 the LeakyReLU pair gives
        // h = (x0, -0.2 x0) and the head below reads s = 1.2 x0, rescaled
        // to unit slope. All test points keep x0 > 0 so D is linear there.
        let w1 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let w2 = Tensor::matrix(2, 1, vec![0.6 / 1.2, -3.0 / 1.2]).unwrap();
        let params = MlpParams {
            layers: vec![
                Layer {
                    weight: w1,
                    bias: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
                },
                Layer {
                    weight: w2,
                    bias: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                },
            ],
        };
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let x_real = Tensor::matrix(4, 2, vec![0.5, 0.1, 1.5, -0.3, 0.2, 0.9, 2.0, 0.0]).unwrap();
        let x_fake = Tensor::matrix(4, 2, vec![0.1, 0.4, 0.7, 0.2, 0.3, -0.5, 1.0, 1.0]).unwrap();
        let gp = gradient_penalty(
            &mut tape,
            &bound,
            &spec,
            &x_real,
            &x_fake,
            &mut Rng::new(4),
        )
        .unwrap();
        assert!(tape.value(gp).item().abs() < 1e-12, "gp {}", tape.value(gp).item());
    }

    #[test]
    fn constant_discriminator_has_unit_penalty() {
        let spec = discriminator_spec(4);
        let mut params = init_params(&spec, &mut Rng::new(5));
        for l in &mut params.layers {
            *l = Layer {
                weight: Tensor::zeros(l.weight.shape().to_vec()),
                bias: Tensor::zeros(l.bias.shape().to_vec()),
            };
        }
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let x = sample_latent(&PriorSpec { d: 2 }, 5, &mut Rng::new(6));
        let y = sample_latent(&PriorSpec { d: 2 }, 5, &mut Rng::new(7));
        let gp = gradient_penalty(&mut tape, &bound, &spec, &x, &y, &mut Rng::new(8)).unwrap();
        assert!((tape.value(gp).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_inner_gradient_matches_finite_differences() {
        // check d(sum scores)/d(x_hat) against central differences by
        // probing the same interpolation points as leaves
        let spec = discriminator_spec(8);
        let params = init_params(&spec, &mut Rng::new(11));
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let x = sample_latent(&PriorSpec { d: 2 }, 4, &mut Rng::new(12));
        let xi = tape.leaf(x);
        let (scores, _) = mlp_forward(&mut tape, &bound, &spec, xi).unwrap();
        let total = tape.sum(scores).unwrap();
        let err = tape.finite_diff_check(total, xi, 1e-5).unwrap();
        assert!(err < 1e-4, "finite-difference error {err}");
    }

    #[test]
    fn gradient_penalty_is_second_order_differentiable() {
        // the penalty's gradient w.r.t. discriminator weights must match
        // finite differences of the penalty value
        let spec = discriminator_spec(6);
        let params = init_params(&spec, &mut Rng::new(13));
        let x_real = sample_latent(&PriorSpec { d: 2 }, 4, &mut Rng::new(14));
        let x_fake = sample_latent(&PriorSpec { d: 2 }, 4, &mut Rng::new(15));

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let gp = gradient_penalty(&mut tape, &bound, &spec, &x_real, &x_fake, &mut Rng::new(16))
            .unwrap();
        let (w0, _) = bound.layers[0];
        let err = tape.finite_diff_check(gp, w0, 1e-5).unwrap();
        assert!(err < 1e-4, "nested-gradient finite-difference error {err}");
    }

    #[test]
    fn ms_regularizer_zero_for_constant_outputs() {
        let mut tape = Tape::new();
        let z = tape.leaf(sample_latent(&PriorSpec { d: 4 }, 6, &mut Rng::new(17)));
        let g = tape.leaf(Tensor::matrix(6, 2, vec![1.0; 12]).unwrap());
        let ms = ms_regularizer(&mut tape, z, g).unwrap();
        assert_eq!(tape.value(ms).item(), 0.0);
    }

    #[test]
    fn ms_regularizer_identity_map_ratio_one() {
        let mut tape = Tape::new();
        let z = sample_latent(&PriorSpec { d: 2 }, 6, &mut Rng::new(18));
        let zi = tape.leaf(z.clone());
        let gi = tape.leaf(z);
        let ms = ms_regularizer(&mut tape, zi, gi).unwrap();
        assert!((tape.value(ms).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ms_regularizer_matches_pairwise_loop_oracle() {
        let mut rng = Rng::new(19);
        let z = sample_latent(&PriorSpec { d: 5 }, 8, &mut rng);
        let g = sample_latent(&PriorSpec { d: 2 }, 8, &mut rng);
        let mut expect = 0.0;
        for i in 0..4 {
            let (a, b) = (2 * i, 2 * i + 1);
            let dz: f64 = (0..5).map(|k| (z.get2(a, k) - z.get2(b, k)).abs()).sum();
            let dg: f64 = (0..2).map(|k| (g.get2(a, k) - g.get2(b, k)).abs()).sum();
            expect += dg / (dz + 1e-8);
        }
        expect /= 4.0;
        let mut tape = Tape::new();
        let zi = tape.leaf(z);
        let gi = tape.leaf(g);
        let ms = ms_regularizer(&mut tape, zi, gi).unwrap();
        assert!((tape.value(ms).item() - expect).abs() < 1e-12);
    }
}
