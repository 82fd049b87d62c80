//! First Duhamel correction at `tau = 0.3` and the order ladder of the
//! leading term and the correction.
//!
//! ```bash
//! cargo run --release --example first_correction
//! ```

use std::time::Instant;

use kbm::cli::order_ladder;
use kbm::density::{invert_all, GridSpec, Outputs};
use kbm::duhamel::{default_correction_spec, error_term_integral, first_correction, CorrectionQuadrature, GridKernel};

fn main() -> kbm::Result<()> {
    let start = Instant::now();
    let set = invert_all(
        &GridSpec::default(),
        Outputs {
            density: true,
            dx: true,
            dy: true,
        },
    )?;
    let grids = GridKernel::new(set.density, set.dx.expect("dx"), set.dy.expect("dy"))?;
    println!("grids in {:.1?}", start.elapsed());
    println!("integral of the error term at tau = 0.3: {:.2e}", error_term_integral(0.3, &grids));

    let quad = CorrectionQuadrature::default();
    let start = Instant::now();
    let c = first_correction(0.3, &default_correction_spec(), &grids, &quad)?;
    println!(
        "tau = 0.3: max |tau^8 (E*u)| = {:.4e}, {} inner cells ({:.1?})",
        c.grid.max_abs(),
        c.report.inner_cells,
        start.elapsed()
    );

    let ladder = order_ladder(&grids, &[0.04, 0.09, 0.16, 0.25], &quad)?;
    for i in 0..ladder.t.len() {
        println!(
            "t = {:.2}: leading {:.4e}  correction {:.4e}",
            ladder.t[i], ladder.leading[i], ladder.correction[i]
        );
    }
    println!("fitted orders: leading {:.4}, correction {:.4}", ladder.leading_order, ladder.correction_order);
    Ok(())
}
