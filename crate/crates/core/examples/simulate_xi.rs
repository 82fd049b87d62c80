//! Samples the limit variable `xi = (-1/2 int W^2, int W, W_1)` and checks its
//! moments and the support inequality `y^2 <= -2x`.
//!
//! ```bash
//! cargo run --release --example simulate_xi
//! ```

use kbm::simulator::xi_batch;

fn main() -> kbm::Result<()> {
    let n = 200_000;
    let xs = xi_batch(n, 128, 1)?;
    let nf = n as f64;
    let mean = |f: &dyn Fn(&kbm::simulator::XiSample) -> f64| xs.iter().map(f).sum::<f64>() / nf;
    println!("E xi_x       {:+.4}  (exact -1/4)", mean(&|s| s.xi_x));
    println!("Var xi_y     {:+.4}  (exact 1/3)", mean(&|s| s.xi_y * s.xi_y));
    println!("Cov(y, phi)  {:+.4}  (exact 1/2)", mean(&|s| s.xi_y * s.xi_phi));
    println!("Var xi_phi   {:+.4}  (exact 1)", mean(&|s| s.xi_phi * s.xi_phi));
    let excess = xs.iter().map(|s| -s.support_slack()).fold(f64::NEG_INFINITY, f64::max);
    println!("max of y^2 + 2x over samples: {excess:.3e}");
    Ok(())
}
