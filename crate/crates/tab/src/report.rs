//! Ablation summaries: mean ± std over seeds, text table and SVG bars.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use tab_core::metrics::MetricsReport;
use tab_core::model::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub per_annotator: Vec<MeanStd>,
    pub average: MeanStd,
    pub mean_voting: MeanStd,
    pub runs: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: Vec<VariantSummary>,
}

impl AblationSummary {
    pub fn from_runs(rows: &[(Variant, Vec<MetricsReport>)]) -> Self {
        let variants = rows
            .iter()
            .map(|(v, runs)| {
                let r = runs.first().map_or(0, |x| x.per_annotator_soft_dice.len());
                VariantSummary {
                    variant: *v,
                    seeds: runs.iter().map(|x| x.seed).collect(),
                    per_annotator: (0..r)
                        .map(|a| MeanStd::of(&runs.iter().map(|x| x.per_annotator_soft_dice[a]).collect::<Vec<_>>()))
                        .collect(),
                    average: MeanStd::of(&runs.iter().map(|x| x.average).collect::<Vec<_>>()),
                    mean_voting: MeanStd::of(&runs.iter().map(|x| x.mean_voting).collect::<Vec<_>>()),
                    runs: runs.clone(),
                }
            })
            .collect();
        Self { variants }
    }

    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

fn cell(m: &MeanStd) -> String {
    format!("{:.2}±{:.2}", m.mean, m.std)
}

/// Columns A1..AR, Average, Mean Voting; one row per variant.
pub fn ablation_table(s: &AblationSummary) -> String {
    let r = s.variants.first().map_or(0, |v| v.per_annotator.len());
    let mut head = vec![format!("{:<12}", "Variant")];
    head.extend((1..=r).map(|a| format!("{:>13}", format!("A{a}"))));
    head.push(format!("{:>13}", "Average"));
    head.push(format!("{:>13}", "Mean Voting"));
    let mut out = head.join(" ");
    out.push('\n');
    for v in &s.variants {
        let mut row = vec![format!("{:<12}", v.variant.name())];
        row.extend(v.per_annotator.iter().map(|m| format!("{:>13}", cell(m))));
        row.push(format!("{:>13}", cell(&v.average)));
        row.push(format!("{:>13}", cell(&v.mean_voting)));
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Grouped bars of Average and Mean Voting per variant with ±std whiskers.
/// The value axis spans the observed range so small gaps stay visible.
pub fn ablation_svg(s: &AblationSummary) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 56.0;
    const BOTTOM: f64 = 48.0;
    const TOP: f64 = 24.0;
    let colors = ["#4c72b0", "#dd8452"];
    let lo_hi = s
        .variants
        .iter()
        .flat_map(|v| [v.average, v.mean_voting])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m.mean - m.std), hi.max(m.mean + m.std))
        });
    let lo = (lo_hi.0.min(100.0) - 1.0).floor().max(0.0);
    let hi = (lo_hi.1.max(lo + 1.0) + 0.5).ceil().min(100.0);
    let plot_h = H - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" x2="{}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/>"##, W - 8.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, yy + 4.0);
    }
    let n = s.variants.len().max(1) as f64;
    let group = (W - LEFT - 8.0) / n;
    let bar = group * 0.3;
    for (i, v) in s.variants.iter().enumerate() {
        let x0 = LEFT + group * i as f64 + group * 0.2;
        for (j, m) in [v.average, v.mean_voting].iter().enumerate() {
            let x = x0 + bar * j as f64;
            let top = y(m.mean.max(lo));
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                bar - 2.0,
                y(lo) - top,
                colors[j]
            );
            let cx = x + (bar - 2.0) / 2.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y((m.mean + m.std).min(hi)),
                y((m.mean - m.std).max(lo))
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar,
            H - BOTTOM + 18.0,
            v.variant.name()
        );
    }
    for (j, label) in ["Average", "Mean Voting"].iter().enumerate() {
        let x = LEFT + 10.0 + 110.0 * j as f64;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, H - 18.0, colors[j]);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{label}</text>"#, x + 14.0, H - 9.0);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, per: Vec<f64>, mv: f64) -> MetricsReport {
        let average = per.iter().sum::<f64>() / per.len() as f64;
        MetricsReport {
            per_annotator_soft_dice: per,
            average,
            mean_voting: mv,
            thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            samples: 1,
            seed,
            config_hash: String::new(),
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn table_and_svg_list_every_variant() {
        let s = AblationSummary::from_runs(&[
            (Variant::Full, vec![report(0, vec![90.0, 92.0], 91.0), report(1, vec![94.0, 96.0], 93.0)]),
            (Variant::NoPfe, vec![report(0, vec![80.0, 82.0], 85.0), report(1, vec![80.0, 82.0], 85.0)]),
        ]);
        assert_eq!(s.get(Variant::Full).unwrap().average.mean, 93.0);
        let t = ablation_table(&s);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("A1") && lines[0].contains("A2") && lines[0].ends_with("Mean Voting"));
        assert!(lines[1].starts_with("full") && lines[1].contains("93.00±2.83"));
        let svg = ablation_svg(&s);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 2);
        assert!(svg.contains(">no_pfe<"));
    }
}
