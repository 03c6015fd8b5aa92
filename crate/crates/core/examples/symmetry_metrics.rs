//! The three symmetry measures on a healthy and a diseased phantom.

use brainshift::metrics::{jeffreys_loss, ssim_loss, volume_balance_loss, MetricsConfig};
use brainshift::phantom::{generate_case, inject_hematoma, HematomaSide, PhantomSpec};
use brainshift::volume::{split_halves, ScalarVolume};

fn report(name: &str, vol: &ScalarVolume, m: &MetricsConfig) -> brainshift::error::Result<()> {
    let (left, right) = split_halves(vol)?;
    let range = (m.range[0], m.range[1]);
    let jeffreys = jeffreys_loss(&left, &right, m.n_bins, range, None)?.value;
    let ssim = ssim_loss(&left, &right, &m.ssim())?.value;
    let balance = volume_balance_loss(vol, m.binarize_threshold, m.binarize_sharpness)?.value;
    println!("{name:>13}: jeffreys {jeffreys:.5}  ssim {ssim:.5}  volume balance {balance:.5}");
    Ok(())
}

fn main() -> brainshift::error::Result<()> {
    let metrics = MetricsConfig::default();
    let healthy = generate_case(&PhantomSpec::healthy())?;
    report("healthy", &healthy.volume, &metrics)?;
    for thickness in [2.0, 4.0, 6.0] {
        let case = inject_hematoma(&healthy, HematomaSide::Left, thickness)?;
        report(&format!("left {thickness:.0} vox"), &case.volume, &metrics)?;
    }
    Ok(())
}
