//! Writes synthetic clouds for trying out the pipeline.
//!
//! ```text
//! cargo run -p neuroface --example synth -- benchmark OUT.xyz [POINTS] [NOISE] [SEED]
//! cargo run -p neuroface --example synth -- identities OUT_DIR [IDENTITIES] [CLOUDS] [POINTS] [NOISE]
//! ```
//!
//! `identities` writes `OUT_DIR/id<i>_<k>.xyz`, one random three-bump
//! surface per identity, matching the acceptance data set.

use std::path::PathBuf;
use std::process::ExitCode;

use neuroface::cloud::save_cloud;
use neuroface::synth::BumpSurface;

const CLOUD_SEED: u64 = 7000;

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match args.first().map(String::as_str) {
        Some("benchmark") if args.len() >= 2 => {
            let cloud = BumpSurface::benchmark().sample(arg(&args, 2, 5000), arg(&args, 3, 0.005), arg(&args, 4, 1));
            cloud.and_then(|c| save_cloud(&c, &PathBuf::from(&args[1])))
        }
        Some("identities") if args.len() >= 2 => {
            let dir = PathBuf::from(&args[1]);
            std::fs::create_dir_all(&dir).expect("create output directory");
            let (ids, clouds) = (arg(&args, 2, 10u64), arg(&args, 3, 4u64));
            (0..ids).flat_map(|i| (0..clouds).map(move |k| (i, k))).try_for_each(|(i, k)| {
                let surface = BumpSurface::random(3, 1000 + i);
                let cloud = surface.sample(arg(&args, 4, 2000), arg(&args, 5, 0.005), CLOUD_SEED + 100 * i + k)?;
                save_cloud(&cloud, &dir.join(format!("id{i}_{k}.xyz")))
            })
        }
        _ => {
            eprintln!("usage: synth benchmark OUT.xyz [POINTS] [NOISE] [SEED]");
            eprintln!("       synth identities OUT_DIR [IDENTITIES] [CLOUDS] [POINTS] [NOISE]");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
