//! Pseudo-healthy synthesis of a unilateral hematoma phantom.
//!
//! Usage: `cargo run --release --example synthesize -- [iterations]`

use std::time::Instant;

use brainshift::diffeo::{jacobian_determinant, VelocityField};
use brainshift::metrics::MetricsConfig;
use brainshift::phantom::{generate_case, PhantomSpec};
use brainshift::synth::{compound_loss, optimize_velocity, ventricle_loss, SynthConfig};

fn main() -> brainshift::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let case = generate_case(&PhantomSpec::default())?;
    let cfg = SynthConfig { iterations, ..SynthConfig::default() };
    let metrics = MetricsConfig::default();

    let zero = VelocityField::zeros(case.volume.dims(), cfg.control_factor)?;
    let initial = compound_loss(&case.volume, &case.masks, &zero, &cfg, &metrics)?;
    println!("initial loss {:.4} (hematoma term {:.3})", initial.total, initial.hematoma);

    let start = Instant::now();
    let result = optimize_velocity(&case.volume, &case.masks, &cfg, &metrics)?;
    let elapsed = start.elapsed();
    let best = &result.trace[result.best_iteration];
    println!("best loss {:.4} at iteration {} ({elapsed:.1?})", best.total, result.best_iteration);
    for (name, value) in [
        ("jeffrey", best.jeffrey),
        ("ssim", best.ssim),
        ("ventricle", best.ventricle),
        ("hematoma", best.hematoma),
        ("skull", best.skull),
        ("jacobian", best.jacobian),
        ("gradient", best.gradient),
    ] {
        println!("  {name:>9} {value:.5}");
    }
    println!("hematoma reduction {:.3}", result.hematoma_reduction.unwrap_or(0.0));
    println!(
        "ventricle loss {:.4} -> {:.4}",
        ventricle_loss(&case.masks)?.value,
        ventricle_loss(&result.warped_masks)?.value
    );
    let det = jacobian_determinant(&result.deformation);
    println!("min det J {:.4}", det.data().iter().cloned().fold(f64::INFINITY, f64::min));
    Ok(())
}
