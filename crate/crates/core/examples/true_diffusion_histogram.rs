//! Rescaled endpoints of the diffusion at `t = 0.01` against the inverted
//! limit density, as an L1 distance on a coarsened grid.
//!
//! ```bash
//! cargo run --release --example true_diffusion_histogram
//! ```

use std::time::Instant;

use kbm::density::{invert, GridSpec};
use kbm::simulator::micro_histogram;

fn main() -> kbm::Result<()> {
    let spec = GridSpec::default();
    let start = Instant::now();
    let grid = invert(&spec)?.coarsen(32, 2, 2)?;
    println!("density grid in {:.1?}", start.elapsed());
    let start = Instant::now();
    let hist = micro_histogram(0.01, 500_000, 128, 2, &grid.spec)?;
    println!(
        "{} paths, {} inside the box ({:.1?})",
        hist.total,
        hist.inside(),
        start.elapsed()
    );
    let empirical = hist.to_density();
    println!("L1 distance to the limit density: {:.4}", empirical.l1_distance(&grid)?);
    Ok(())
}
