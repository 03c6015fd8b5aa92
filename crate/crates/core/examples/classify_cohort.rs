//! Cross-validated surgery classification on a phantom cohort, per laterality
//! subgroup, with a shuffled-label baseline.

use std::time::Instant;

use brainshift::biomarkers::cohort_records;
use brainshift::classify::{shuffle_labels, subgroup_analysis, ClassifyConfig, FeatureSet};
use brainshift::phantom::{generate_cohort, CohortSpec};

fn main() -> brainshift::error::Result<()> {
    let start = Instant::now();
    let cohort = generate_cohort(40, 0, &CohortSpec::default())?;
    let records = cohort_records(&cohort)?;
    let cfg = ClassifyConfig::default();
    let sets = FeatureSet::standard();

    for (group, results) in subgroup_analysis(&records, &sets, &cfg)? {
        println!("{} ({} cases)", group.name(), records.iter().filter(|r| group.contains(r)).count());
        for r in results {
            println!("  {:<14} mean AUC {:.3}  folds {:?}", r.name, r.mean_auc, r.fold_aucs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
    }
    let shuffled = shuffle_labels(&records, 1);
    let baseline = subgroup_analysis(&shuffled, &[FeatureSet::deformation()], &cfg)?;
    println!("shuffled labels, deformation set: mean AUC {:.3}", baseline[0].1[0].mean_auc);
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
