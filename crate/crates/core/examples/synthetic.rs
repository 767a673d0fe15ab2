//! Trains on a synthetic taxonomy and prints test metrics.
//!
//! Usage: `cargo run --release -p taxbox-core --example synthetic [seed] [epochs] [d_box]`

use taxbox::metrics::{breakdown, Metrics};
use taxbox::synthetic::{generate, SyntheticSpec};
use taxbox::taxonomy::Role;
use taxbox::train::{train, RunConfig};

fn main() -> taxbox::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let seed = args.next().flatten().unwrap_or(0);
    let epochs = args.next().flatten().unwrap_or(100) as usize;
    let d_box = args.next().flatten().unwrap_or(64) as usize;

    let task = generate(&SyntheticSpec {
        seed,
        ..Default::default()
    })?;
    let view = task.split.view(&task.taxonomy)?;
    let features = task.embeddings.features_for(&view.seed)?;
    let valid = task.embeddings.queries(&view, Role::Valid)?;
    let test = task.embeddings.queries(&view, Role::Test)?;
    let cfg = RunConfig {
        epochs,
        seed,
        d_box,
        ..Default::default()
    };

    let start = std::time::Instant::now();
    let out = train(&view.seed, &features, &valid, &cfg, None)?;
    for row in out.log.iter().filter(|r| r.epoch % 10 == 0) {
        println!("{}", row.tsv_row());
    }
    let (ranks, _) = out.best.evaluate(&test)?;
    println!("best epoch {} after {:.1?}", out.best_epoch, start.elapsed());
    println!("{:?}", Metrics::compute(&ranks));
    println!("{:?}", breakdown(&ranks));
    Ok(())
}
