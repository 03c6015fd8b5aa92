//! Compare the adjoint gradient of the compound loss with central finite
//! differences on a small phantom, for the full loss and for each term alone.

use std::time::Instant;

use brainshift::diffeo::VelocityField;
use brainshift::metrics::MetricsConfig;
use brainshift::phantom::{generate_downsampled, HematomaSide, PhantomSpec};
use brainshift::synth::{gradient_check, LossWeights, Term};

fn main() -> brainshift::error::Result<()> {
    let spec = PhantomSpec { side: HematomaSide::Left, thickness: 3.0, ..PhantomSpec::default() };
    let (x, masks) = generate_downsampled(&spec, 12)?;
    // Offsetting the field keeps sample points away from grid nodes, where
    // trilinear interpolation has kinks that finite differences straddle.
    let v = VelocityField::random_smooth(x.dims(), 2, 0.3, 7)?.shifted([0.5, 0.5, 0.5]);
    let metrics = MetricsConfig::default();

    let start = Instant::now();
    let full = gradient_check(&x, &masks, &LossWeights::default(), &v, 100, 1, 7, &metrics)?;
    println!("compound loss: max relative error {full:.3e}");
    for term in Term::ALL {
        let err = gradient_check(&x, &masks, &LossWeights::only(term, 1.0), &v, 100, 1, 7, &metrics)?;
        println!("{:>9}: max relative error {err:.3e}", term.name());
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
