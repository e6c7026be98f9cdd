use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{ExperimentError, ExperimentRecord, Method};

/// Mean and sample standard deviation over seeds for one
/// (method, system, d, SNR) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub system: usize,
    pub d: usize,
    pub snr_db: f64,
    pub seeds: usize,
    pub nrmse_mean: f64,
    pub nrmse_std: f64,
    pub nrmse_multi_mean: f64,
    pub nrmse_multi_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub samples_mean: f64,
    pub samples_std: f64,
}

/// Relative comparisons for one (d, SNR) setting. A value is `None` when a
/// method it needs is missing or its denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Headline {
    pub d: usize,
    pub snr_db: f64,
    /// `(1 - proposed / baseline1) * 100` on suite-total samples.
    pub sample_reduction_pct: Option<f64>,
    /// The same ratio restricted to the adapted plants.
    pub adapted_sample_reduction_pct: Option<f64>,
    /// Mean over adapted plants of `(1 - proposed / baseline2) * 100` on NRMSE.
    pub nrmse_improvement_pct: Option<f64>,
    /// Mean over adapted plants of proposed score divided by baseline1 score.
    pub score_ratio_vs_baseline1: Option<f64>,
    /// `(proposed - baseline2) / baseline2 * 100` on the adapted plants' mean score.
    pub control_improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub headlines: Vec<Headline>,
}

impl Summary {
    pub fn row(&self, method: Method, system: usize, d: usize, snr_db: f64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.system == system && r.d == d && r.snr_db == snr_db)
    }

    pub fn headline(&self, d: usize, snr_db: f64) -> Option<&Headline> {
        self.headlines.iter().find(|h| h.d == d && h.snr_db == snr_db)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0 && num.is_finite() && den.is_finite()).then(|| num / den)
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregates records over seeds. `reference` names the plant without
/// adapters; every other plant counts as adapted.
pub fn summarize(records: &[ExperimentRecord], reference: Option<usize>) -> Result<Summary, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::Metric("no records to summarize".into()));
    }
    type Key = (usize, u64, Method, usize);
    let mut cells: BTreeMap<Key, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.d, r.snr_db.to_bits(), r.method, r.system)).or_default().push(r);
    }
    let rows: Vec<SummaryRow> = cells
        .iter()
        .map(|(&(d, snr, method, system), rs)| {
            let col = |f: fn(&ExperimentRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (nrmse_mean, nrmse_std) = col(|r| r.nrmse_pct);
            let (nrmse_multi_mean, nrmse_multi_std) = col(|r| r.nrmse_multi_pct);
            let (score_mean, score_std) = col(|r| r.avg_score);
            let (samples_mean, samples_std) = col(|r| r.samples as f64);
            SummaryRow {
                method,
                system,
                d,
                snr_db: f64::from_bits(snr),
                seeds: rs.len(),
                nrmse_mean,
                nrmse_std,
                nrmse_multi_mean,
                nrmse_multi_std,
                score_mean,
                score_std,
                samples_mean,
                samples_std,
            }
        })
        .collect();

    let mut settings: Vec<(usize, f64)> = rows.iter().map(|r| (r.d, r.snr_db)).collect();
    settings.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    settings.dedup();
    let headlines = settings
        .into_iter()
        .map(|(d, snr_db)| {
            let get = |m: Method, s: usize| rows.iter().find(|r| r.method == m && r.system == s && r.d == d && r.snr_db == snr_db);
            let mut systems: Vec<usize> = rows.iter().filter(|r| r.d == d && r.snr_db == snr_db).map(|r| r.system).collect();
            systems.dedup();
            let adapted: Vec<usize> = systems.iter().copied().filter(|s| Some(*s) != reference).collect();
            let total = |m: Method, set: &[usize]| -> Option<f64> {
                set.iter().map(|&s| get(m, s).map(|r| r.samples_mean)).sum()
            };
            let reduction = |set: &[usize]| {
                ratio(total(Method::Proposed, set)?, total(Method::Baseline1, set)?).map(|q| (1.0 - q) * 100.0)
            };
            let nrmse_improvement_pct = mean(adapted.iter().map(|&s| {
                ratio(get(Method::Proposed, s)?.nrmse_mean, get(Method::Baseline2, s)?.nrmse_mean).map(|q| (1.0 - q) * 100.0)
            }));
            let score_ratio_vs_baseline1 = mean(
                adapted
                    .iter()
                    .map(|&s| ratio(get(Method::Proposed, s)?.score_mean, get(Method::Baseline1, s)?.score_mean)),
            );
            let scores = |m: Method| mean(adapted.iter().map(|&s| get(m, s).map(|r| r.score_mean)));
            let control_improvement_pct = (|| {
                let (p, b) = (scores(Method::Proposed)?, scores(Method::Baseline2)?);
                ratio(p - b, b).map(|q| q * 100.0)
            })();
            Headline {
                d,
                snr_db,
                sample_reduction_pct: reduction(&systems),
                adapted_sample_reduction_pct: reduction(&adapted),
                nrmse_improvement_pct,
                score_ratio_vs_baseline1,
                control_improvement_pct,
            }
        })
        .collect();
    Ok(Summary { rows, headlines })
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Writes the per-cell table, and the headline comparisons next to it with
/// a `_headline` suffix.
pub fn write_summary(path: &Path, summary: &Summary) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &summary.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    let mut w = csv::Writer::from_path(path.with_file_name(format!("{stem}_headline.csv")))?;
    for h in &summary.headlines {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

/// Grouped bar chart of one metric: systems along the axis, one bar per
/// method, error bars at one standard deviation.
pub fn write_svg(
    path: &Path,
    summary: &Summary,
    d: usize,
    snr_db: f64,
    metric: &str,
    title: &str,
) -> Result<(), ExperimentError> {
    let pick = |r: &SummaryRow| -> Result<(f64, f64), ExperimentError> {
        match metric {
            "nrmse" => Ok((r.nrmse_mean, r.nrmse_std)),
            "score" => Ok((r.score_mean, r.score_std)),
            "samples" => Ok((r.samples_mean, r.samples_std)),
            other => Err(ExperimentError::Config(format!("unknown chart metric `{other}`"))),
        }
    };
    let rows: Vec<&SummaryRow> = summary.rows.iter().filter(|r| r.d == d && r.snr_db == snr_db).collect();
    let mut systems: Vec<usize> = rows.iter().map(|r| r.system).collect();
    systems.sort_unstable();
    systems.dedup();
    let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| rows.iter().any(|r| r.method == *m)).collect();
    let mut top: f64 = 0.0;
    for r in &rows {
        let (m, s) = pick(r)?;
        top = top.max(m + s);
    }
    let top = if top > 0.0 { top * 1.1 } else { 1.0 };
    let (w, h, left, bottom, pad) = (640.0, 360.0, 60.0, 40.0, 30.0);
    let plot_h = h - bottom - pad;
    let group_w = (w - left - pad) / systems.len().max(1) as f64;
    let bar_w = group_w * 0.8 / methods.len().max(1) as f64;
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c"];
    let y = |v: f64| pad + plot_h * (1.0 - v / top);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{pad}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - bottom, w - pad);
    for i in 0..=4 {
        let v = top * f64::from(i) / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y(v) + 4.0);
    }
    for (gi, sys) in systems.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (mi, m) in methods.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.system == *sys && r.method == *m) else {
                continue;
            };
            let (mean, std) = pick(r)?;
            let x = gx + mi as f64 * bar_w;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                y(mean),
                bar_w * 0.9,
                (h - bottom - y(mean)).max(0.0),
                colors[mi % colors.len()]
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                svg,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y((mean - std).max(0.0)),
                y(mean + std)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">system {sys}</text>"#,
            left + (gi as f64 + 0.5) * group_w,
            h - bottom + 16.0
        );
    }
    for (mi, m) in methods.iter().enumerate() {
        let lx = w - pad - 110.0;
        let ly = pad + 14.0 * mi as f64;
        let _ = writeln!(svg, r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/>"#, colors[mi % colors.len()]);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{m}</text>"#, lx + 14.0, ly + 9.0);
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, system: usize, seed: u64, nrmse: f64, score: f64, samples: usize) -> ExperimentRecord {
        ExperimentRecord {
            method,
            system,
            d: 4,
            snr_db: 15.0,
            seed,
            nrmse_pct: nrmse,
            avg_score: score,
            samples,
            nrmse_multi_pct: nrmse,
        }
    }

    #[test]
    fn identical_methods_show_no_improvement() {
        let mut rs = Vec::new();
        for m in Method::ALL {
            for s in 1..=3 {
                rs.push(rec(m, s, 0, 2.0, 0.5, 100));
            }
        }
        let sum = summarize(&rs, Some(1)).unwrap();
        let h = sum.headline(4, 15.0).unwrap();
        assert_eq!(h.sample_reduction_pct, Some(0.0));
        assert_eq!(h.adapted_sample_reduction_pct, Some(0.0));
        assert_eq!(h.nrmse_improvement_pct, Some(0.0));
        assert_eq!(h.score_ratio_vs_baseline1, Some(1.0));
        assert_eq!(h.control_improvement_pct, Some(0.0));
    }

    #[test]
    fn reduction_of_hundred_against_twelve_hundred() {
        let rs = vec![rec(Method::Proposed, 2, 0, 1.0, 1.0, 100), rec(Method::Baseline1, 2, 0, 1.0, 1.0, 1200)];
        let h = summarize(&rs, None).unwrap().headlines[0].clone();
        let got = h.sample_reduction_pct.unwrap();
        assert!((got - 91.666_666_666_666_67).abs() < 1e-9, "{got}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(summarize(&[], None).is_err());
    }

    #[test]
    fn std_over_seeds() {
        let rs = vec![rec(Method::Proposed, 1, 0, 1.0, 0.0, 10), rec(Method::Proposed, 1, 1, 3.0, 1.0, 20)];
        let sum = summarize(&rs, None).unwrap();
        let r = sum.row(Method::Proposed, 1, 4, 15.0).unwrap();
        assert_eq!(r.seeds, 2);
        assert_eq!(r.nrmse_mean, 2.0);
        assert!((r.nrmse_std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.samples_mean, 15.0);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rs = vec![rec(Method::Baseline2, 3, 7, 1.25, 0.5, 0)];
        write_records(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,system,d,snr_db,seed,nrmse_pct,avg_score,samples"));
        assert_eq!(read_records(&path).unwrap(), rs);
        let sum = summarize(&rs, None).unwrap();
        write_summary(&dir.path().join("s.csv"), &sum).unwrap();
        assert!(dir.path().join("s_headline.csv").exists());
        write_svg(&dir.path().join("f.svg"), &sum, 4, 15.0, "nrmse", "NRMSE").unwrap();
        assert!(std::fs::read_to_string(dir.path().join("f.svg")).unwrap().contains("<rect"));
        assert!(write_svg(&dir.path().join("g.svg"), &sum, 4, 15.0, "bogus", "x").is_err());
    }
}
