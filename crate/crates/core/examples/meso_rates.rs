//! Mesoscopic rates at constant-curvature endpoints, at the origin and
//! outside the unit disc, next to the macroscopic rate.
//!
//! ```bash
//! cargo run --release --example meso_rates
//! ```

use std::f64::consts::PI;

use kbm::ldp::{i_macro, i_meso, LdpOptions, Rate};
use kbm::scaling::Point;

fn show(label: &str, p: Point, exact: Option<f64>) -> kbm::Result<()> {
    let r = i_meso(p, &LdpOptions::default())?;
    let v = match r.value {
        Rate::Finite(v) => format!("{v:.7}"),
        Rate::Infinite => "+inf".to_string(),
    };
    let exact = exact.map_or(String::new(), |e| format!("  (exact {e:.7})"));
    println!("{label:<22} I_meso = {v}{exact}  certified {}", r.certified);
    Ok(())
}

fn main() -> kbm::Result<()> {
    for c in [PI / 2.0, PI, 2.0 * PI] {
        let p = Point::new(c.sin() / c, (1.0 - c.cos()) / c, c);
        show(&format!("curvature {c:.4}"), p, Some(c * c / 2.0))?;
    }
    show("rest point", Point::new(1.0, 0.0, 0.0), Some(0.0))?;
    show("origin", Point::ORIGIN, None)?;
    println!("  lower bound at the origin: 2 pi^2 = {:.7}", 2.0 * PI * PI);
    show("outside the disc", Point::new(0.0, 1.2, 0.0), None)?;
    println!("I_macro(0, 0, 2) = {:?}", i_macro(Point::new(0.0, 0.0, 2.0)));
    println!("I_macro(0.5, 0, 0) = {:?}", i_macro(Point::new(0.5, 0.0, 0.0)));
    Ok(())
}
