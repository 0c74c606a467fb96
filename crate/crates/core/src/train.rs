//! The training schedule: k discriminator updates on fresh batches, then
//! one generator update, all driven by mini-batch Adam.
//!
//! The batch stream depends only on (seed, step schedule), never on the
//! penalty coefficients, so a penalized run and its baseline twin see
//! identical data. With `lambda = lambda_ms = 0` the generator update
//! takes a dedicated baseline path that never builds penalty nodes;
//! `force_penalty_path` exercises the penalized graph at zero
//! coefficients for the equivalence check.

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::data::{sample_latent, sample_real, MixtureSpec, PriorSpec, Rng};
use crate::error::{Error, Result};
use crate::losses::{d_loss, g_adversarial, g_loss, gradient_penalty, ms_regularizer, Objective};
use crate::models::{
    bind_params, discriminator_spec, generator_spec, init_params, mlp_eval, mlp_forward,
    Checkpoint, MlpParams, MlpSpec,
};
use crate::similarity::{dp_node, dp_value, scaled_gram};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn default_hidden_width() -> usize {
    64
}
fn default_latent_dim() -> usize {
    32
}
fn default_checkpoint_every() -> usize {
    1000
}
fn default_false() -> bool {
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Diversity-penalty coefficient (0 disables the penalty).
    pub lambda: f64,
    /// Mode-seeking coefficient (0 disables the regularizer).
    pub lambda_ms: f64,
    /// Sigmoid scale of the similarity matrices.
    pub s: f64,
    /// Batch size.
    pub m: usize,
    /// Discriminator steps per generator step.
    pub k: usize,
    pub generator_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gp_coefficient: f64,
    pub seed: u64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Build the penalized generator graph even at zero coefficients.
    /// Only used by the baseline-equivalence check.
    #[serde(default = "default_false")]
    pub force_penalty_path: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Vanilla,
            lambda: 1.0,
            lambda_ms: 0.0,
            s: 1.0,
            m: 128,
            k: 1,
            generator_steps: 10_000,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            gp_coefficient: 10.0,
            seed: 0,
            latent_dim: default_latent_dim(),
            hidden_width: default_hidden_width(),
            checkpoint_every: default_checkpoint_every(),
            force_penalty_path: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.m < 2 {
            problems.push(format!(
                "m must be at least 2 (the diversity penalty needs an off-diagonal pair), got {}",
                self.m
            ));
        }
        if self.k < 1 {
            problems.push(format!("k must be at least 1, got {}", self.k));
        }
        if self.lambda < 0.0 {
            problems.push(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.lambda_ms < 0.0 {
            problems.push(format!("lambda_ms must be nonnegative, got {}", self.lambda_ms));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.generator_steps == 0 {
            problems.push("generator_steps must be positive".to_string());
        }
        if self.latent_dim == 0 || self.hidden_width == 0 {
            problems.push("latent_dim and hidden_width must be positive".to_string());
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper<f64> {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Per-generator-step log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub dp: f64,
    pub ms: f64,
    /// Measured and therefore not reproducible across runs.
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub config: TrainConfig,
    pub generator_spec: MlpSpec,
    pub discriminator_spec: MlpSpec,
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    pub history: Vec<StepRecord>,
    /// (step, checkpoint) snapshots at `checkpoint_every` intervals plus
    /// the final state.
    pub checkpoints: Vec<(usize, Checkpoint)>,
}

fn tensors_of(params: &MlpParams) -> Vec<Tensor<f64>> {
    params
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect()
}

fn write_back(params: &mut MlpParams, flat: &[Tensor<f64>]) {
    for (i, l) in params.layers.iter_mut().enumerate() {
        l.weight = flat[2 * i].clone();
        l.bias = flat[2 * i + 1].clone();
    }
}

/// Runs the full schedule on one mixture. Aborts with the step index if
/// any loss goes non-finite; the last checkpoint is kept in the error
/// message's step context by the harness.
pub fn train(config: &TrainConfig, mixture: &MixtureSpec) -> Result<TrainedRun> {
    config.validate()?;
    let g_spec = generator_spec(config.latent_dim, config.hidden_width);
    let d_spec = discriminator_spec(config.hidden_width);
    let prior = PriorSpec { d: config.latent_dim };

    // independent streams: parameter init, batch sampling, gp mixing
    let mut init_rng = Rng::derive(config.seed, 0);
    let mut batch_rng = Rng::derive(config.seed, 1);
    let mut gp_rng = Rng::derive(config.seed, 2);

    let mut g_params = init_params(&g_spec, &mut init_rng);
    let mut d_params = init_params(&d_spec, &mut init_rng);
    let mut g_flat = tensors_of(&g_params);
    let mut d_flat = tensors_of(&d_params);
    let mut g_state = AdamState::new(&g_flat);
    let mut d_state = AdamState::new(&d_flat);
    let hyper = config.adam_hyper();

    let use_penalty = config.lambda > 0.0 || config.force_penalty_path;
    let use_ms = config.lambda_ms > 0.0;

    let mut history = Vec::with_capacity(config.generator_steps);
    let mut checkpoints = Vec::new();
    let started = std::time::Instant::now();

    for step in 0..config.generator_steps {
        // -- k discriminator updates on fresh batches --------------------
        let mut last_d_loss = 0.0;
        for _ in 0..config.k {
            let z = sample_latent(&prior, config.m, &mut batch_rng);
            let x_real = sample_real(mixture, config.m, &mut batch_rng);
            let x_fake = mlp_eval(&g_params, &g_spec, &z)
                .map_err(|e| abort(step, e))?;

            let mut tape = Tape::new();
            let d_bound = bind_params(&mut tape, &d_params);
            let fake_leaf = tape.leaf(x_fake.clone());
            let real_leaf = tape.leaf(x_real.clone());
            let step_result = (|| -> Result<f64> {
                let (scores_fake, _) = mlp_forward(&mut tape, &d_bound, &d_spec, fake_leaf)?;
                let (scores_real, _) = mlp_forward(&mut tape, &d_bound, &d_spec, real_leaf)?;
                let mut loss = d_loss(&mut tape, config.objective, scores_fake, scores_real)?;
                if config.objective == Objective::WganGp {
                    let gp = gradient_penalty(
                        &mut tape, &d_bound, &d_spec, &x_real, &x_fake, &mut gp_rng,
                    )?;
                    let gp_scaled = tape.scalar_mul(gp, config.gp_coefficient)?;
                    loss = tape.add(loss, gp_scaled)?;
                }
                let grads = tape.backward(loss)?;
                let d_grads: Vec<Tensor<f64>> = d_bound
                    .node_ids()
                    .iter()
                    .map(|&id| tape.grad(&grads, id))
                    .collect();
                adam_step(&mut d_flat, &d_grads, &mut d_state, hyper)?;
                write_back(&mut d_params, &d_flat);
                Ok(tape.value(loss).item())
            })();
            last_d_loss = step_result.map_err(|e| abort(step, e))?;
        }

        // -- one generator update on a fresh batch -----------------------
        let z = sample_latent(&prior, config.m, &mut batch_rng);
        let step_result = (|| -> Result<(f64, f64, f64)> {
            let mut tape = Tape::new();
            let g_bound = bind_params(&mut tape, &g_params);
            let d_bound = bind_params(&mut tape, &d_params);
            let z_leaf = tape.leaf(z.clone());
            let (fake, _) = mlp_forward(&mut tape, &g_bound, &g_spec, z_leaf)?;
            let (scores_fake, features) = mlp_forward(&mut tape, &d_bound, &d_spec, fake)?;
            let adv = g_adversarial(&mut tape, config.objective, scores_fake)?;

            let ms = if use_ms {
                Some((ms_regularizer(&mut tape, z_leaf, fake)?, config.lambda_ms))
            } else {
                None
            };
            let total = if use_penalty {
                let dp = dp_node(&mut tape, z_leaf, features, config.s)?;
                g_loss(&mut tape, adv, Some((dp, config.lambda)), ms)?
            } else {
                // baseline path: no penalty nodes on the tape at all
                g_loss(&mut tape, adv, None, ms)?
            };
            // the logged DP always comes from the reference computation so
            // both code paths report comparable (and identical) values
            let gz = scaled_gram(&z, config.s)?;
            let gf = scaled_gram(tape.value(features), config.s)?;
            let dp_logged = dp_value(&gz, &gf)?;

            let ms_logged = if use_ms {
                // recompute the plain ratio for the log (cheap at this size)
                let mut probe = Tape::new();
                let zi = probe.leaf(z.clone());
                let gi = probe.leaf(tape.value(fake).clone());
                let node = ms_regularizer(&mut probe, zi, gi)?;
                probe.value(node).item()
            } else {
                0.0
            };

            let grads = tape.backward(total)?;
            let g_grads: Vec<Tensor<f64>> = g_bound
                .node_ids()
                .iter()
                .map(|&id| tape.grad(&grads, id))
                .collect();
            adam_step(&mut g_flat, &g_grads, &mut g_state, hyper)?;
            write_back(&mut g_params, &g_flat);
            Ok((tape.value(total).item(), dp_logged, ms_logged))
        })();
        let (g_loss_value, dp_logged, ms_logged) = step_result.map_err(|e| abort(step, e))?;

        history.push(StepRecord {
            step,
            g_loss: g_loss_value,
            d_loss: last_d_loss,
            dp: dp_logged,
            ms: ms_logged,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });

        if (step + 1) % config.checkpoint_every == 0 && step + 1 < config.generator_steps {
            checkpoints.push((
                step + 1,
                Checkpoint::new(config.seed, &g_spec, &g_params, &d_spec, &d_params),
            ));
        }
    }

    checkpoints.push((
        config.generator_steps,
        Checkpoint::new(config.seed, &g_spec, &g_params, &d_spec, &d_params),
    ));

    Ok(TrainedRun {
        config: config.clone(),
        generator_spec: g_spec,
        discriminator_spec: d_spec,
        generator: g_params,
        discriminator: d_params,
        history,
        checkpoints,
    })
}

fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericAbort {
            step,
            detail: format!("non-finite value in `{op}`"),
        },
        Error::DivisionGuard { op } => Error::NumericAbort {
            step,
            detail: format!("division guard in `{op}`"),
        },
        other => other,
    }
}
