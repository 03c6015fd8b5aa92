//! Logistic-regression surgery classifiers, ROC analysis, stratified k-fold
//! cross-validation and laterality subgroups.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biomarkers::{BiomarkerRecord, Laterality, BILATERAL_THRESHOLD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Mls,
    Volume,
    MaxShift,
    MeanShift,
    SumShift,
}

impl Feature {
    pub const ALL: [Feature; 5] = [Feature::Mls, Feature::Volume, Feature::MaxShift, Feature::MeanShift, Feature::SumShift];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Mls => "mls",
            Feature::Volume => "volume",
            Feature::MaxShift => "max_shift",
            Feature::MeanShift => "mean_shift",
            Feature::SumShift => "sum_shift",
        }
    }

    pub fn value(self, r: &BiomarkerRecord) -> Option<f64> {
        match self {
            Feature::Mls => r.mls_mm,
            Feature::Volume => Some(r.hematoma_volume_mm3),
            Feature::MaxShift => Some(r.max_shift_mm),
            Feature::MeanShift => Some(r.mean_shift_mm),
            Feature::SumShift => Some(r.sum_shift_mm),
        }
    }
}

/// A named group of features fitted jointly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub name: String,
    pub features: Vec<Feature>,
}

impl FeatureSet {
    pub fn new(name: &str, features: &[Feature]) -> Self {
        FeatureSet { name: name.to_string(), features: features.to_vec() }
    }

    pub fn conventional() -> Self {
        Self::new("conventional", &[Feature::Mls, Feature::Volume])
    }

    pub fn deformation() -> Self {
        Self::new("deformation", &[Feature::MaxShift, Feature::MeanShift, Feature::SumShift])
    }

    pub fn joint() -> Self {
        Self::new("joint", &Feature::ALL)
    }

    /// Each single marker, the conventional pair, the deformation triple and all five.
    pub fn standard() -> Vec<FeatureSet> {
        let mut sets: Vec<_> = Feature::ALL.iter().map(|f| Self::new(f.name(), &[*f])).collect();
        sets.extend([Self::conventional(), Self::deformation(), Self::joint()]);
        sets
    }

    /// Feature rows for the records that have every feature of this set.
    fn rows(&self, records: &[BiomarkerRecord]) -> (Vec<Vec<f64>>, Vec<bool>) {
        records
            .iter()
            .filter_map(|r| {
                let row: Option<Vec<f64>> = self.features.iter().map(|f| f.value(r)).collect();
                row.map(|row| (row, r.surgery))
            })
            .unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub k: usize,
    pub seed: u64,
    pub bilateral_threshold: f64,
    pub l2_penalty: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            k: 5,
            seed: 0,
            bilateral_threshold: BILATERAL_THRESHOLD,
            l2_penalty: 1e-4,
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("classify.k must be >= 2".into()));
        }
        if !(self.bilateral_threshold > 0.0 && self.bilateral_threshold <= 0.5) {
            return Err(Error::Config("classify.bilateral_threshold must lie in (0, 0.5]".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.tolerance > 0.0 && self.max_iterations >= 1) {
            return Err(Error::Config("classify.l2_penalty/tolerance/max_iterations out of range".into()));
        }
        Ok(())
    }
}

/// Standardized logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit by IRLS on standardized features, minimizing mean negative log-likelihood
/// plus `penalty / 2 * |w|^2` (intercept unpenalized).
pub fn logistic_fit(
    x: &[Vec<f64>],
    y: &[bool],
    names: &[String],
    penalty: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<LogisticModel> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Classification("feature rows and labels differ in length".into()));
    }
    let positives = y.iter().filter(|&&b| b).count();
    if positives < 2 || n - positives < 2 {
        return Err(Error::Classification("need at least 2 records per class".into()));
    }
    let d = names.len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Classification("feature rows have inconsistent width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Classification("non-finite feature value".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    // A constant feature is only centred; its weight stays at zero under the L2 penalty.
    let std: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .map(|s| if s > 1e-9 { s } else { 1.0 })
        .collect();
    // Column 0 is the intercept.
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { (x[i][j - 1] - mean[j - 1]) / std[j - 1] });
    let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(d + 1);
    let mut ridge = DMatrix::identity(d + 1, d + 1) * penalty;
    ridge[(0, 0)] = 0.0;
    for _ in 0..max_iterations {
        let p = (&design * &beta).map(sigmoid);
        let w = p.map(|pi| (pi * (1.0 - pi)).max(1e-12));
        let grad = design.transpose() * (&p - &target) / n as f64 + &ridge * &beta;
        let weighted = DMatrix::from_fn(n, d + 1, |i, j| design[(i, j)] * w[i]);
        let hessian = design.transpose() * weighted / n as f64 + &ridge;
        let step = hessian
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Classification("singular IRLS system".into()))?;
        beta -= &step;
        if step.norm() < tolerance {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Classification("logistic fit diverged".into()));
    }
    Ok(LogisticModel { features: names.to_vec(), mean, std, weights: beta.iter().skip(1).copied().collect(), intercept: beta[0] })
}

impl LogisticModel {
    /// Probability of the positive class.
    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(self.decision(row))
    }

    /// Linear score before the logistic link; monotone in `predict`.
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.intercept
            + row.iter().zip(&self.weights).enumerate().map(|(j, (v, w))| w * (v - self.mean[j]) / self.std[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve with one point per distinct score and trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Classification("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Classification("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&b| b).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Classification("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    // Twice the trapezoid area in counts, so the single final division is exact.
    let (mut tp, mut fp, mut area) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp0 + tp);
        points.push((fp as f64 / neg, tp as f64 / pos));
    }
    Ok(RocCurve { points, auc: area as f64 / (2.0 * pos * neg) })
}

/// Cross-validation outcome for one feature set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureSetResult {
    pub name: String,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    /// Held-out scores pooled over folds, with labels.
    pub out_of_fold: Vec<(f64, bool)>,
}

impl FeatureSetResult {
    pub fn pooled_roc(&self) -> Result<RocCurve> {
        let (s, l): (Vec<f64>, Vec<bool>) = self.out_of_fold.iter().copied().unzip();
        roc_auc(&s, &l)
    }
}

/// Stratified fold index per record: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::Classification(format!(
                "{} records of class {} cannot fill {k} stratified folds",
                idx.len(),
                u8::from(class)
            )));
        }
        idx.shuffle(&mut rng);
        for (n, i) in idx.into_iter().enumerate() {
            folds[i] = n % k;
        }
    }
    Ok(folds)
}

/// Stratified k-fold cross-validation of every feature set. Records lacking a
/// feature are excluded from the sets that use it; sets left with too few
/// records are skipped.
pub fn cross_validate(records: &[BiomarkerRecord], sets: &[FeatureSet], cfg: &ClassifyConfig) -> Result<Vec<FeatureSetResult>> {
    cfg.validate()?;
    let results: Vec<Result<Option<FeatureSetResult>>> = sets
        .par_iter()
        .map(|set| {
            let (x, y) = set.rows(records);
            let folds = match stratified_folds(&y, cfg.k, cfg.seed) {
                Ok(f) => f,
                Err(e) if x.len() < records.len() => {
                    log::warn!("skipping feature set `{}`: {e}", set.name);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let names: Vec<String> = set.features.iter().map(|f| f.name().to_string()).collect();
            let mut fold_aucs = Vec::with_capacity(cfg.k);
            let mut out_of_fold = Vec::with_capacity(x.len());
            for fold in 0..cfg.k {
                let split = |held: bool| -> (Vec<Vec<f64>>, Vec<bool>) {
                    (0..x.len()).filter(|&i| (folds[i] == fold) == held).map(|i| (x[i].clone(), y[i])).unzip()
                };
                let (train_x, train_y) = split(false);
                let (test_x, test_y) = split(true);
                let model =
                    logistic_fit(&train_x, &train_y, &names, cfg.l2_penalty, cfg.tolerance, cfg.max_iterations)?;
                let scores: Vec<f64> = test_x.iter().map(|r| model.decision(r)).collect();
                fold_aucs.push(roc_auc(&scores, &test_y)?.auc);
                out_of_fold.extend(scores.into_iter().zip(test_y));
            }
            let mean_auc = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
            Ok(Some(FeatureSetResult { name: set.name.clone(), fold_aucs, mean_auc, out_of_fold }))
        })
        .collect();
    results.into_iter().filter_map(Result::transpose).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    All,
    Bilateral,
    Unilateral,
}

impl Subgroup {
    pub const ALL: [Subgroup; 3] = [Subgroup::All, Subgroup::Bilateral, Subgroup::Unilateral];

    pub fn name(self) -> &'static str {
        match self {
            Subgroup::All => "all",
            Subgroup::Bilateral => "bilateral",
            Subgroup::Unilateral => "unilateral",
        }
    }

    pub fn contains(self, r: &BiomarkerRecord) -> bool {
        match self {
            Subgroup::All => true,
            Subgroup::Bilateral => r.laterality == Laterality::Bilateral,
            Subgroup::Unilateral => r.laterality == Laterality::Unilateral,
        }
    }
}

/// Cross-validation per laterality subgroup. Subgroups too small to stratify are skipped.
pub fn subgroup_analysis(
    records: &[BiomarkerRecord],
    sets: &[FeatureSet],
    cfg: &ClassifyConfig,
) -> Result<Vec<(Subgroup, Vec<FeatureSetResult>)>> {
    let mut out = Vec::new();
    for group in Subgroup::ALL {
        let subset: Vec<BiomarkerRecord> = records.iter().filter(|r| group.contains(r)).cloned().collect();
        match cross_validate(&subset, sets, cfg) {
            Ok(results) => out.push((group, results)),
            Err(Error::Classification(msg)) if group != Subgroup::All => {
                log::warn!("skipping subgroup `{}`: {msg}", group.name());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Copy of `records` with surgery labels permuted.
pub fn shuffle_labels(records: &[BiomarkerRecord], seed: u64) -> Vec<BiomarkerRecord> {
    let mut labels: Vec<bool> = records.iter().map(|r| r.surgery).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records.iter().zip(labels).map(|(r, surgery)| BiomarkerRecord { surgery, ..r.clone() }).collect()
}

/// `auc_report.csv`: feature_set, subgroup, fold (index or `mean`), auc.
pub fn auc_report_csv(groups: &[(Subgroup, Vec<FeatureSetResult>)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["feature_set", "subgroup", "fold", "auc"])?;
    for (group, results) in groups {
        for r in results {
            for (i, auc) in r.fold_aucs.iter().enumerate() {
                w.write_record([r.name.as_str(), group.name(), &i.to_string(), &format!("{auc:.6}")])?;
            }
            w.write_record([r.name.as_str(), group.name(), "mean", &format!("{:.6}", r.mean_auc)])?;
        }
    }
    w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn roc_hand_cases() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_abs_diff_eq!(r.auc, 0.75, epsilon = 1e-12);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap().auc, 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise(raw in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let r = roc_auc(&scores, &labels).unwrap();
            prop_assert!((r.auc - pairwise(&scores, &labels)).abs() < 1e-12);
            let trap: f64 = r.points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
            prop_assert!((trap - r.auc).abs() < 1e-9);
            prop_assert!(r.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            // Strictly increasing transforms leave the AUC unchanged.
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            prop_assert_eq!(roc_auc(&warped, &labels).unwrap().auc, r.auc);
        }
    }

    #[test]
    fn constant_feature_gets_zero_weight() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.5]).collect();
        let y: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let m = logistic_fit(&x, &y, &names(2), 1e-4, 1e-8, 100).unwrap();
        assert_eq!(m.weights[1], 0.0);
        assert!(m.weights[0].is_finite());
    }

    #[test]
    fn separable_fit_is_monotone() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        let m = logistic_fit(&x, &y, &names(1), 1e-4, 1e-8, 100).unwrap();
        let s: Vec<f64> = x.iter().map(|r| m.predict(r)).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(roc_auc(&s, &y).unwrap().auc, 1.0);
        assert!(logistic_fit(&x, &[true; 10], &names(1), 1e-4, 1e-8, 100).is_err());
    }

    fn noisy_dataset(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(0.0..10.0);
                let p = sigmoid(1.5 * a - 0.3 * (b - 5.0) + 0.2);
                (vec![a, b], rng.gen_bool(p))
            })
            .unzip()
    }

    #[test]
    fn duplicated_data_gives_same_weights() {
        let (x, y) = noisy_dataset(30, 1);
        let a = logistic_fit(&x, &y, &names(2), 1e-4, 1e-8, 100).unwrap();
        let x2: Vec<_> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<_> = y.iter().chain(&y).copied().collect();
        let b = logistic_fit(&x2, &y2, &names(2), 1e-4, 1e-8, 100).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_abs_diff_eq!(wa, wb, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(a.intercept, b.intercept, epsilon = 1e-6);
    }

    #[test]
    fn irls_matches_gradient_descent() {
        let (x, y) = noisy_dataset(40, 2);
        let model = logistic_fit(&x, &y, &names(2), 1e-4, 1e-8, 100).unwrap();
        // Plain gradient descent on the same standardized, penalized objective.
        let n = x.len() as f64;
        let z: Vec<[f64; 2]> =
            x.iter().map(|r| [(r[0] - model.mean[0]) / model.std[0], (r[1] - model.mean[1]) / model.std[1]]).collect();
        let mut beta = [0.0; 3];
        for _ in 0..50_000 {
            let mut g = [0.0; 3];
            for (zi, &yi) in z.iter().zip(&y) {
                let p = sigmoid(beta[0] + beta[1] * zi[0] + beta[2] * zi[1]);
                let r = p - if yi { 1.0 } else { 0.0 };
                g[0] += r / n;
                g[1] += r * zi[0] / n;
                g[2] += r * zi[1] / n;
            }
            g[1] += 1e-4 * beta[1];
            g[2] += 1e-4 * beta[2];
            for j in 0..3 {
                beta[j] -= 0.1 * g[j];
            }
        }
        assert_abs_diff_eq!(model.intercept, beta[0], epsilon = 1e-3);
        assert_abs_diff_eq!(model.weights[0], beta[1], epsilon = 1e-3);
        assert_abs_diff_eq!(model.weights[1], beta[2], epsilon = 1e-3);
    }

    #[test]
    fn rescaling_a_feature_keeps_predictions() {
        let (x, y) = noisy_dataset(30, 3);
        let a = logistic_fit(&x, &y, &names(2), 1e-4, 1e-8, 100).unwrap();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] * 7.0 + 3.0, r[1]]).collect();
        let b = logistic_fit(&xs, &y, &names(2), 1e-4, 1e-8, 100).unwrap();
        let sa: Vec<f64> = x.iter().map(|r| a.predict(r)).collect();
        let sb: Vec<f64> = xs.iter().map(|r| b.predict(r)).collect();
        assert_abs_diff_eq!(roc_auc(&sa, &y).unwrap().auc, roc_auc(&sb, &y).unwrap().auc, epsilon = 1e-6);
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let labels: Vec<bool> = (0..23).map(|i| i % 3 == 0).collect();
        let f = stratified_folds(&labels, 5, 9).unwrap();
        assert_eq!(f, stratified_folds(&labels, 5, 9).unwrap());
        for fold in 0..5 {
            assert!((0..23).any(|i| f[i] == fold && labels[i]));
            assert!((0..23).any(|i| f[i] == fold && !labels[i]));
        }
        assert!(stratified_folds(&[true, true, false, false, false, false], 5, 0).is_err());
    }
}
