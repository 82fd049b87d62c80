//! Closed-form characteristic function against the infinite product on a
//! frequency cube, and the `lambda = 0` Gaussian slice.
//!
//! ```bash
//! cargo run --release --example charfn_compare
//! ```

use std::time::Instant;

use kbm::charfn::{closed_form, compare_grid, gaussian_slice, FreqPoint};

fn main() {
    let axis: Vec<f64> = (0..21).map(|i| -10.0 + i as f64).collect();
    let start = Instant::now();
    let cmp = compare_grid(&axis, &axis, &axis, 5e-7, 1024);
    println!(
        "21^3 cube: max disagreement {:.3e}, certified truncation {:.3e} ({:.1?})",
        cmp.max_disagreement,
        cmp.max_certified_truncation,
        start.elapsed()
    );
    println!("worst point {:?}", cmp.worst_point);
    let terms = cmp.terms_per_lambda.iter().map(|t| t.1).max().unwrap_or(0);
    println!("largest product truncation {terms} factors");

    let slice: Vec<f64> = (0..41).map(|i| -10.0 + 0.5 * i as f64).collect();
    let mut worst = 0.0f64;
    for &mu in &slice {
        for &nu in &slice {
            worst = worst.max((closed_form(FreqPoint::new(0.0, mu, nu)) - gaussian_slice(mu, nu)).norm());
        }
    }
    println!("lambda = 0 slice vs Gaussian: max error {worst:.2e}");
}
