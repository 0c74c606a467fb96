use ganlab::data::*;
use ganlab::metrics::*;
use ganlab::models::*;
use std::path::Path;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap();
    let restarts: usize = args.next().unwrap().parse().unwrap();
    let steps: usize = args.next().unwrap().parse().unwrap();
    let pairs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(24);
    let ck =
        Checkpoint::load(Path::new(&dir).join("checkpoints/final.json").as_path()).unwrap();
    let params = ck.generator_params().unwrap();
    let spec = &ck.generator_spec;
    let prior = PriorSpec { d: spec.input_dim };
    let seed = ck.seed;
    let mut n_conv = 0usize;
    let mut sims = Vec::new();
    for pair in 0..pairs {
        let mut z_rng = Rng::derive(seed, 1000 + pair as u64);
        let z1 = sample_latent(&prior, 1, &mut z_rng);
        let mut best_mse = f64::INFINITY;
        let mut best_sim = f64::NAN;
        for r in 0..restarts {
            let mut probe_rng = Rng::derive(seed, 2000 + (pair * restarts + r) as u64);
            let p = collapse_probe(
                &params, spec, &z1, &mut probe_rng, steps, PROBE_LR, 1.0, 1e-4,
            )
            .unwrap();
            if p.mse < best_mse {
                best_mse = p.mse;
                best_sim = p.latent_similarity;
            }
        }
        let conv = best_mse <= 1e-4;
        if conv {
            n_conv += 1;
            sims.push(best_sim);
        }
        print!("{:.1e} ", best_mse);
    }
    let mean = sims.iter().sum::<f64>() / sims.len().max(1) as f64;
    println!("\nconverged {n_conv}/{pairs} mean_sim {mean:.4}");
}
