//! Tabulates the limit density on the default grid and prints its summary.
//!
//! ```bash
//! cargo run --release --example density_grid
//! ```

use std::time::Instant;

use kbm::density::{invert_all, GridSpec, Outputs};

fn main() -> kbm::Result<()> {
    let spec = GridSpec::default();
    let start = Instant::now();
    let set = invert_all(
        &spec,
        Outputs {
            density: true,
            dx: true,
            dy: true,
        },
    )?;
    println!("inverted {} nodes in {:.1?}", spec.len(), start.elapsed());
    println!("resolution estimate {:.2e}", set.report.estimate());
    let s = set.density.summary();
    println!("{}", serde_json::to_string_pretty(&s)?);
    if let Some(dx) = &set.dx {
        println!("integral of dx density {:.3e}", dx.integral());
    }
    Ok(())
}
