//! ROC point tables and SVG plots of cross-validated classifiers.

use std::fmt::Write as _;

use crate::classify::{FeatureSetResult, RocCurve, Subgroup};
use crate::error::{Error, Result};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Pooled out-of-fold ROC curve of every feature set, in input order.
pub fn pooled_curves(results: &[FeatureSetResult]) -> Result<Vec<(String, RocCurve)>> {
    results.iter().map(|r| Ok((r.name.clone(), r.pooled_roc()?))).collect()
}

/// CSV with columns feature_set, fpr, tpr, one row per ROC point.
pub fn roc_points_csv(curves: &[(String, RocCurve)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["feature_set", "fpr", "tpr"])?;
    for (name, curve) in curves {
        for (fpr, tpr) in &curve.points {
            w.write_record([name.as_str(), &format!("{fpr:.6}"), &format!("{tpr:.6}")])?;
        }
    }
    w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

/// ROC curves as polylines with a legend of pooled AUCs.
pub fn roc_svg(title: &str, curves: &[(String, RocCurve)]) -> String {
    const SIZE: f64 = 360.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 30.0;
    let legend_h = 16.0 * curves.len() as f64;
    let (width, height) = (LEFT + SIZE + 200.0, TOP + SIZE.max(legend_h) + 50.0);
    let px = |x: f64| LEFT + x * SIZE;
    let py = |y: f64| TOP + (1.0 - y) * SIZE;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle">{}</text>"#, px(0.5), escape(title));
    let _ = writeln!(s, r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{SIZE:.1}" height="{SIZE:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for tick in 0..=4 {
        let t = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#, px(t), py(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"#, px(0.0) - 4.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positive rate</text>"#, px(0.5), py(0.0) + 34.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">true positive rate</text>"#,
        py(0.5),
        py(0.5)
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        let ly = TOP + 10.0 + 16.0 * i as f64;
        let lx = LEFT + SIZE + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{} (AUC {:.3})</text>"#, lx + 24.0, ly + 4.0, escape(name), curve.auc);
    }
    s.push_str("</svg>\n");
    s
}

/// File stem for per-subgroup outputs, e.g. `roc_unilateral`.
pub fn subgroup_stem(group: Subgroup) -> String {
    format!("roc_{}", group.name())
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
