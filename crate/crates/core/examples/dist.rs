use ganlab::data::*;
use ganlab::models::*;
use ganlab::harness::*;
fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let ck = Checkpoint::load(std::path::Path::new(&dir).join("checkpoints/final.json").as_path()).unwrap();
    let params = ck.generator_params().unwrap();
    let mixture = make_grid(4.0, 0.05).unwrap();
    let (_, _, generated) = evaluate_generator(&params, &ck.generator_spec, &mixture, 10000, ck.seed).unwrap();
    let mut dists: Vec<f64> = (0..generated.rows()).map(|i| {
        let p = generated.row(i);
        mixture.centers.iter().map(|c| ((p[0]-c[0]).powi(2)+(p[1]-c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }).collect();
    dists.sort_by(|a,b| a.partial_cmp(b).unwrap());
    for q in [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99] {
        println!("q{q}: {:.4}", dists[(q * 9999.0) as usize]);
    }
}
