//! Numerical checks of the fused-margin algebra and the softmax Jacobian.

use dpspg::theory::{analytic_checks, binary_jacobian_bound_check, margin_report};

fn main() -> dpspg::Result<()> {
    let m = margin_report(&[2.0, 1.0, 0.5], &[0.3, 1.4, 0.9], 0, 0.2)?;
    println!("smallest negative gap {:.3}, bound holds: {}", m.delta_constraint, m.bound_satisfied);
    for e in &m.entries {
        println!("  class {}: {:.3} -> {:.3}", e.class, e.delta_plus, e.delta_combined);
    }

    println!("delta   ||J||    bound");
    for delta in [0.0, 0.05, 0.1, 0.3, 1.0] {
        let r = binary_jacobian_bound_check(delta, 0.1)?;
        println!("{delta:<6}  {:.4}  {:.4}", r.analytic_norm, r.bound);
    }

    let checks = analytic_checks(2024)?;
    let mut names: Vec<&str> = Vec::new();
    for c in &checks {
        if !names.contains(&c.check.as_str()) {
            names.push(&c.check);
        }
    }
    for name in names {
        let rows: Vec<_> = checks.iter().filter(|c| c.check == name).collect();
        let pass = rows.iter().filter(|c| c.pass).count();
        println!("{name}: {pass}/{} pass", rows.len());
    }
    Ok(())
}
