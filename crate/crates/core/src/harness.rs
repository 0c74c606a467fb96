//! Experiment orchestration: run directories, the paired comparison
//! matrix, probe statistics, plot emission, and self-verification.
//!
//! Run directory layout (fixed):
//!   config.json      exact configuration snapshot, defaults echoed
//!   losses.csv       step,g_loss,d_loss,dp,ms
//!   checkpoints/     step_NNNNNN.json plus final.json
//!   metrics.json     MetricsReport of the final generator
//!   plots/           scatter.svg, losses.svg (when enabled)

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_grid, make_ring, sample_latent, MixtureSpec, PriorSpec, Rng};
use crate::error::{Error, Result};
use crate::metrics::{
    frechet_distance, mode_coverage, near_duplicate_similarity_stat, MetricsReport,
    NearDuplicateStat, PROBE_MSE_THRESHOLD,
};
use crate::models::{mlp_eval, Checkpoint, MlpParams, MlpSpec};
use crate::plot::{lines_svg, scatter_svg};
use crate::similarity::{scaled_gram, verify_gaussian_product};
use crate::tensor::Tensor;
use crate::train::{train, StepRecord, TrainConfig, TrainedRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Ring8,
    Grid25,
    Custom(MixtureSpec),
}

impl Dataset {
    pub fn mixture(&self) -> Result<MixtureSpec> {
        match self {
            Dataset::Ring8 => make_ring(1.0, 0.01),
            Dataset::Grid25 => make_grid(4.0, 0.05),
            Dataset::Custom(spec) => {
                if spec.centers.is_empty() || spec.std <= 0.0 {
                    return Err(Error::Validation(vec![
                        "custom dataset needs at least one center and a positive std".into(),
                    ]));
                }
                Ok(spec.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Dataset::Ring8 => "ring8".into(),
            Dataset::Grid25 => "grid25".into(),
            Dataset::Custom(spec) => format!("custom_{}", spec.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub train: TrainConfig,
    /// Generated-sample count per evaluation.
    pub eval_samples: usize,
    /// Probe pairs for the near-duplicate statistic.
    pub probe_pairs: usize,
    pub n_seeds: usize,
    pub emit_plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: Dataset::Ring8,
            train: TrainConfig::default(),
            eval_samples: 10_000,
            probe_pairs: 24,
            n_seeds: 5,
            emit_plots: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = match self.train.validate() {
            Ok(()) => Vec::new(),
            Err(Error::Validation(v)) => v,
            Err(e) => return Err(e),
        };
        if self.eval_samples < 3 {
            problems.push(format!("eval_samples must be at least 3, got {}", self.eval_samples));
        }
        if self.n_seeds == 0 {
            problems.push("n_seeds must be positive".into());
        }
        if let Err(Error::Validation(v)) = self.dataset.mixture().map(|_| ()) {
            problems.extend(v);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Salt offsets for the evaluation RNG streams, disjoint from the
/// training salts (0..=2).
const SALT_EVAL_LATENT: u64 = 10;
const SALT_EVAL_REAL: u64 = 11;

/// Draws fresh latents, pushes them through the generator, and scores
/// the cloud against the mixture.
pub fn evaluate_generator(
    params: &MlpParams,
    spec: &MlpSpec,
    mixture: &MixtureSpec,
    n_samples: usize,
    seed: u64,
) -> Result<(MetricsReport, Tensor<f64>, Tensor<f64>)> {
    let mut z_rng = Rng::derive(seed, SALT_EVAL_LATENT);
    let z = sample_latent(&PriorSpec { d: spec.input_dim }, n_samples, &mut z_rng);
    let generated = mlp_eval(params, spec, &z)?;
    let mut real_rng = Rng::derive(seed, SALT_EVAL_REAL);
    let real = crate::data::sample_real(mixture, n_samples, &mut real_rng);
    let (modes, hq, per_mode) = mode_coverage(&generated, mixture);
    let frechet = frechet_distance(&real, &generated)?;
    let report = MetricsReport {
        n_samples,
        modes_captured: modes,
        hq_fraction: hq,
        frechet,
        per_mode_counts: per_mode,
        mean_latent_similarity_of_near_duplicates: None,
    };
    Ok((report, real, generated))
}

fn losses_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,g_loss,d_loss,dp,ms\n");
    for r in history {
        // {:?} is shortest-roundtrip formatting: reproducible and lossless
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.step, r.g_loss, r.d_loss, r.dp, r.ms
        ));
    }
    out
}

pub fn parse_losses_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "step,g_loss,d_loss,dp,ms" {
                return Err(Error::Contract(format!("unexpected losses.csv header: {line}")));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Contract(format!("bad losses.csv row: {line}")));
        }
        rows.push(StepRecord {
            step: cols[0].parse().map_err(|_| Error::Contract("bad step".into()))?,
            g_loss: cols[1].parse().map_err(|_| Error::Contract("bad g_loss".into()))?,
            d_loss: cols[2].parse().map_err(|_| Error::Contract("bad d_loss".into()))?,
            dp: cols[3].parse().map_err(|_| Error::Contract("bad dp".into()))?,
            ms: cols[4].parse().map_err(|_| Error::Contract("bad ms".into()))?,
            wallclock_ms: 0,
        });
    }
    Ok(rows)
}

fn write_run_dir(dir: &Path, config: &ExperimentConfig, run: &TrainedRun) -> Result<MetricsReport> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    config.save(&dir.join("config.json"))?;
    fs::write(dir.join("losses.csv"), losses_csv(&run.history))?;
    for (step, ck) in &run.checkpoints {
        ck.save(&dir.join(format!("checkpoints/step_{step:06}.json")))?;
    }
    let last = run
        .checkpoints
        .last()
        .ok_or(Error::MissingArtifact("final checkpoint".into()))?;
    last.1.save(&dir.join("checkpoints/final.json"))?;

    let mixture = config.dataset.mixture()?;
    let (report, real, generated) = evaluate_generator(
        &run.generator,
        &run.generator_spec,
        &mixture,
        config.eval_samples,
        config.train.seed,
    )?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;

    if config.emit_plots {
        fs::create_dir_all(dir.join("plots"))?;
        let shown = config.eval_samples.min(1000);
        let real_sub = Tensor::matrix(shown, 2, real.data()[..shown * 2].to_vec())?;
        let gen_sub = Tensor::matrix(shown, 2, generated.data()[..shown * 2].to_vec())?;
        let title = format!(
            "{} seed={} lambda={}",
            config.dataset.label(),
            config.train.seed,
            config.train.lambda
        );
        fs::write(
            dir.join("plots/scatter.svg"),
            scatter_svg(&mixture, &real_sub, &gen_sub, &title)?,
        )?;
        write_loss_plot(dir, &run.history, &title)?;
    }
    Ok(report)
}

fn write_loss_plot(dir: &Path, history: &[StepRecord], title: &str) -> Result<()> {
    let g: Vec<(f64, f64)> =
        history.iter().map(|r| (r.step as f64, r.g_loss)).collect();
    let d: Vec<(f64, f64)> =
        history.iter().map(|r| (r.step as f64, r.d_loss)).collect();
    let dp: Vec<(f64, f64)> = history.iter().map(|r| (r.step as f64, r.dp)).collect();
    let svg = lines_svg(
        &[("g_loss", &g[..]), ("d_loss", &d[..]), ("dp", &dp[..])],
        title,
    )?;
    fs::create_dir_all(dir.join("plots"))?;
    fs::write(dir.join("plots/losses.svg"), svg)?;
    Ok(())
}

/// Trains one configuration and materializes the run directory.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    config.validate()?;
    let mixture = config.dataset.mixture()?;
    let run = train(&config.train, &mixture)?;
    write_run_dir(out, config, &run)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

pub fn aggregate(values: &[f64]) -> AggregateStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    AggregateStat { mean, std: var.sqrt(), median }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub lambda: f64,
    pub seed: u64,
    pub run_dir: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub modes: AggregateStat,
    pub hq: AggregateStat,
    pub frechet: AggregateStat,
    /// Per-seed mean differences against the lambda = 0 rows.
    pub delta_modes_vs_baseline: f64,
    pub delta_hq_vs_baseline: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub cells: Vec<CellReport>,
    pub summary: Vec<LambdaSummary>,
    pub incomplete: bool,
    pub failures: Vec<String>,
}

impl AggregateReport {
    /// Recomputes the summary rows from the stored cells; aggregation is
    /// idempotent by construction.
    pub fn summarize(cells: &[CellReport], lambdas: &[f64]) -> Vec<LambdaSummary> {
        let baseline: Vec<&CellReport> =
            cells.iter().filter(|c| c.lambda == 0.0).collect();
        let base_modes = if baseline.is_empty() {
            f64::NAN
        } else {
            baseline.iter().map(|c| c.metrics.modes_captured as f64).sum::<f64>()
                / baseline.len() as f64
        };
        let base_hq = if baseline.is_empty() {
            f64::NAN
        } else {
            baseline.iter().map(|c| c.metrics.hq_fraction).sum::<f64>() / baseline.len() as f64
        };
        let mut out = Vec::new();
        for &lambda in lambdas {
            let rows: Vec<&CellReport> =
                cells.iter().filter(|c| c.lambda == lambda).collect();
            if rows.is_empty() {
                continue;
            }
            let modes: Vec<f64> =
                rows.iter().map(|c| c.metrics.modes_captured as f64).collect();
            let hq: Vec<f64> = rows.iter().map(|c| c.metrics.hq_fraction).collect();
            let fr: Vec<f64> = rows.iter().map(|c| c.metrics.frechet).collect();
            let modes_stat = aggregate(&modes);
            let hq_stat = aggregate(&hq);
            out.push(LambdaSummary {
                lambda,
                delta_modes_vs_baseline: modes_stat.mean - base_modes,
                delta_hq_vs_baseline: hq_stat.mean - base_hq,
                modes: modes_stat,
                hq: hq_stat,
                frechet: aggregate(&fr),
            });
        }
        out
    }

    pub fn text_table(&self) -> String {
        let mut s = format!(
            "dataset: {}   seeds: {:?}\n{:<10} {:>12} {:>12} {:>12} {:>12}\n",
            self.dataset, self.seeds, "lambda", "modes", "hq", "frechet", "d_modes"
        );
        for row in &self.summary {
            s.push_str(&format!(
                "{:<10} {:>6.2}±{:<5.2} {:>6.3}±{:<5.3} {:>6.3}±{:<5.3} {:>+12.2}\n",
                row.lambda,
                row.modes.mean,
                row.modes.std,
                row.hq.mean,
                row.hq.std,
                row.frechet.mean,
                row.frechet.std,
                row.delta_modes_vs_baseline
            ));
        }
        if self.incomplete {
            s.push_str("INCOMPLETE: some runs aborted\n");
            for f in &self.failures {
                s.push_str(&format!("  failed: {f}\n"));
            }
        }
        s
    }
}

/// Trains lambda = 0 plus every listed lambda for every seed, paired on
/// identical per-seed RNG streams. Independent runs are scheduled on a
/// worker pool; returns an incomplete report if any one aborts.
pub fn cmd_compare(
    base: &ExperimentConfig,
    seeds: &[u64],
    lambdas: &[f64],
    out: &Path,
    workers: usize,
) -> Result<AggregateReport> {
    base.validate()?;
    if seeds.len() < 3 {
        return Err(Error::Validation(vec![format!(
            "compare needs at least 3 seeds, got {}",
            seeds.len()
        )]));
    }
    let mut all_lambdas: Vec<f64> = lambdas.to_vec();
    if !all_lambdas.contains(&0.0) {
        all_lambdas.insert(0, 0.0);
    }
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &lambda in &all_lambdas {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.train.lambda = lambda;
            let dir = out.join(format!("lambda_{lambda}/seed_{seed}"));
            jobs.push((lambda, seed, dir, cfg));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
    let results: Vec<(f64, u64, PathBuf, Result<MetricsReport>)> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(lambda, seed, dir, cfg)| {
                (*lambda, *seed, dir.clone(), cmd_train(cfg, dir))
            })
            .collect()
    });

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (lambda, seed, dir, res) in results {
        match res {
            Ok(metrics) => cells.push(CellReport {
                lambda,
                seed,
                run_dir: dir.display().to_string(),
                metrics,
            }),
            Err(e) => failures.push(format!("lambda={lambda} seed={seed}: {e}")),
        }
    }
    let summary = AggregateReport::summarize(&cells, &all_lambdas);
    let report = AggregateReport {
        dataset: base.dataset.label(),
        seeds: seeds.to_vec(),
        lambdas: all_lambdas,
        cells,
        summary,
        incomplete: !failures.is_empty(),
        failures,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("table.txt"), report.text_table())?;
    Ok(report)
}

/// Runs the near-duplicate probe statistic against a run directory's
/// final checkpoint; writes JSON plus a histogram CSV.
pub fn cmd_probe(run_dir: &Path, n_pairs: usize) -> Result<NearDuplicateStat> {
    cmd_probe_with_threshold(run_dir, n_pairs, PROBE_MSE_THRESHOLD)
}

pub fn cmd_probe_with_threshold(
    run_dir: &Path,
    n_pairs: usize,
    mse_threshold: f64,
) -> Result<NearDuplicateStat> {
    let ck_path = run_dir.join("checkpoints/final.json");
    if !ck_path.exists() {
        return Err(Error::MissingArtifact("checkpoints/final.json".into()));
    }
    let ck = Checkpoint::load(&ck_path)?;
    let params = ck.generator_params()?;
    let config = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let stat = near_duplicate_similarity_stat(
        &params,
        &ck.generator_spec,
        n_pairs,
        mse_threshold,
        config.train.s,
        ck.seed,
    )?;
    fs::write(run_dir.join("probe.json"), serde_json::to_string_pretty(&stat)?)?;
    let mut csv = String::from("bin_low,bin_high,count\n");
    for (i, &c) in stat.histogram.iter().enumerate() {
        csv.push_str(&format!("{:?},{:?},{}\n", i as f64 / 20.0, (i + 1) as f64 / 20.0, c));
    }
    fs::write(run_dir.join("probe_histogram.csv"), csv)?;
    Ok(stat)
}

/// Re-renders the plots of an existing run directory from its stored
/// CSV/JSON artifacts alone.
pub fn cmd_plot(run_dir: &Path) -> Result<()> {
    let config = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let history = parse_losses_csv(&fs::read_to_string(run_dir.join("losses.csv"))?)?;
    let ck_path = run_dir.join("checkpoints/final.json");
    if !ck_path.exists() {
        return Err(Error::MissingArtifact("checkpoints/final.json".into()));
    }
    let ck = Checkpoint::load(&ck_path)?;
    let params = ck.generator_params()?;
    let mixture = config.dataset.mixture()?;
    let shown = config.eval_samples.min(1000).max(3);
    let (_, real, generated) =
        evaluate_generator(&params, &ck.generator_spec, &mixture, shown, ck.seed)?;
    let title = format!(
        "{} seed={} lambda={}",
        config.dataset.label(),
        config.train.seed,
        config.train.lambda
    );
    fs::create_dir_all(run_dir.join("plots"))?;
    fs::write(
        run_dir.join("plots/scatter.svg"),
        scatter_svg(&mixture, &real, &generated, &title)?,
    )?;
    write_loss_plot(run_dir, &history, &title)
}

/// Self-checks: the Gaussian-product identity on random parameter draws
/// and the similarity core against loop oracles. Returns the number of
/// checks performed.
pub fn cmd_verify(seed: u64) -> Result<usize> {
    let mut checks = 0usize;
    let mut rng = Rng::derive(seed, 77);
    for _ in 0..50 {
        let mu_f = -3.0 + 6.0 * rng.next_f64();
        let mu_g = -3.0 + 6.0 * rng.next_f64();
        let sigma_f = 0.2 + 2.8 * rng.next_f64();
        let sigma_g = 0.2 + 2.8 * rng.next_f64();
        let r = verify_gaussian_product(mu_f, sigma_f, mu_g, sigma_g, 8.0, 2001)?;
        if r.max_proportionality_error >= 1e-8 {
            return Err(Error::NumericAbort {
                step: checks,
                detail: format!(
                    "gaussian product deviates: {} for mu=({mu_f},{mu_g}) sigma=({sigma_f},{sigma_g})",
                    r.max_proportionality_error
                ),
            });
        }
        checks += 1;
    }
    // similarity core vs a direct loop on a random instance
    for trial in 0..20 {
        let m = 2 + (rng.next_u64() % 8) as usize;
        let d = 2 + (rng.next_u64() % 8) as usize;
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m * d {
            data.push(rng.next_normal());
        }
        let x = Tensor::matrix(m, d, data)?;
        let g = scaled_gram(&x, 1.0)?;
        for i in 0..m {
            for j in 0..m {
                let xi = x.row(i);
                let xj = x.row(j);
                let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                let ni: f64 = xi.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj: f64 = xj.iter().map(|a| a * a).sum::<f64>().sqrt();
                let expect = 1.0 / (1.0 + (-dot / (ni * nj)).exp());
                if (g.get(i, j) - expect).abs() > 1e-12 {
                    return Err(Error::NumericAbort {
                        step: trial,
                        detail: format!(
                            "scaled gram mismatch at ({i},{j}): {} vs {expect}",
                            g.get(i, j)
                        ),
                    });
                }
            }
        }
        checks += 1;
    }
    Ok(checks)
}
