use ganlab::data::*;
use ganlab::metrics::*;
use ganlab::models::*;
use ganlab::harness::*;
use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let mixture = make_grid(4.0, 0.05).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(Path::new(&dir).join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for f in files {
        let ck = Checkpoint::load(&f).unwrap();
        let params = ck.generator_params().unwrap();
        let (_, real, generated) =
            evaluate_generator(&params, &ck.generator_spec, &mixture, 10000, ck.seed).unwrap();
        let (modes, hq, _) = mode_coverage(&generated, &mixture);
        let fd = frechet_distance(&real, &generated).unwrap();
        println!(
            "{}: modes {} hq {:.4} frechet {:.4}",
            f.file_name().unwrap().to_string_lossy(),
            modes,
            hq,
            fd
        );
    }
}
