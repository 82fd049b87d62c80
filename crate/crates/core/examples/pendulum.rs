//! Shooting solution of the pendulum problem for closed curves, compared with
//! the variational rate at the origin. The optimality of this curve is a
//! conjecture.
//!
//! ```bash
//! cargo run --release --example pendulum
//! ```

use std::f64::consts::PI;

use kbm::ldp::{i_meso, pendulum_shoot, LdpOptions};
use kbm::scaling::Point;

fn main() -> kbm::Result<()> {
    let s = pendulum_shoot(1e-8, 256)?;
    println!("a = {:.10}, b = {:.10}", s.a, s.b);
    println!("residuals {:?}", s.residuals);
    println!("energy {:.8} (lower bound 2 pi^2 = {:.8})", s.energy, 2.0 * PI * PI);
    let r = i_meso(Point::ORIGIN, &LdpOptions::default())?;
    if let Some(v) = r.value.value() {
        println!("variational rate at the origin {v:.8}, difference {:.2e}", s.energy - v);
    }
    Ok(())
}
