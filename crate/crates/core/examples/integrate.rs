//! Scaling and squaring of random smooth velocity fields: Jacobian
//! determinants and inverse consistency.

use brainshift::diffeo::{compose, integrate_velocity, invert_deformation, jacobian_determinant, VelocityField};
use brainshift::volume::Dims;

fn main() -> brainshift::error::Result<()> {
    let dims = Dims([32, 32, 32]);
    for seed in 0..5 {
        let v = VelocityField::random_smooth(dims, 2, 2.0, seed)?;
        let phi = integrate_velocity(&v, 7)?;
        let det = jacobian_determinant(&phi);
        let (lo, hi) = det.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        let inverse = integrate_velocity(&VelocityField::from_control(v.control().scaled(-1.0), v.factor(), dims)?, 7)?;
        let round_trip = compose(&phi, &inverse)?;
        let fixed_point = compose(&phi, &invert_deformation(&phi, 30))?;
        println!(
            "seed {seed}: max |u| {:.3}, det J in [{lo:.3}, {hi:.3}], |phi(-v) o phi(v)| mean {:.4}, fixed-point inverse mean {:.4}",
            phi.displacement().max_norm(),
            round_trip.displacement().mean_norm(),
            fixed_point.displacement().mean_norm(),
        );
    }
    Ok(())
}
