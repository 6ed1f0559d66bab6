//! Publication-style outputs assembled from persisted pipeline artifacts:
//! per-stage metric summaries, regional frequency tables, and the two
//! standard figures (frequency bars, junction-distance histograms) as CSV
//! plus deterministic standalone SVG renderings.

use std::fmt::Write as _;

use crate::cohort::RegionStats;
use crate::error::{Error, Result};
use crate::metrics::CaseMetrics;

/// Mean and uncorrected standard deviation; a single sample has sd 0.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

/// Per-case scalar scores: label-averaged overlap and surface distances.
fn case_scalars(m: &CaseMetrics) -> Option<(f64, f64, f64, f64)> {
    if m.dsc_per_label.is_empty() || m.hd_per_label.is_empty() {
        return None;
    }
    let avg = |map: &std::collections::BTreeMap<i32, f64>| {
        map.values().sum::<f64>() / map.len() as f64
    };
    Some((
        avg(&m.dsc_per_label),
        avg(&m.hd_per_label),
        avg(&m.assd_per_label),
        m.fof,
    ))
}

/// Stage-by-stage metric summary over a cohort, one CSV row per stage with
/// mean and standard deviation of Dice, Hausdorff distance, average surface
/// distance and fraction of foldings, plus the optional tumour summaries.
pub fn metrics_table(stages: &[(String, Vec<CaseMetrics>)]) -> Result<String> {
    if stages.iter().any(|(_, cases)| cases.is_empty()) || stages.is_empty() {
        return Err(Error::InvalidArgument(
            "metric summary needs at least one scored case per stage".into(),
        ));
    }
    let mut out = String::from(
        "stage,cases,dsc_mean,dsc_sd,hd_mean,hd_sd,assd_mean,assd_sd,fof_mean,fof_sd,\
         volume_factor_mean,volume_factor_sd,jacobian_ratio_mean,jacobian_ratio_sd\n",
    );
    for (stage, cases) in stages {
        let scalars: Vec<(f64, f64, f64, f64)> =
            cases.iter().filter_map(case_scalars).collect();
        if scalars.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} has no scorable cases"
            )));
        }
        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| -> (f64, f64) {
            mean_sd(&scalars.iter().map(f).collect::<Vec<_>>())
        };
        let (dsc, hd, assd, fof) = (
            col(|s| s.0),
            col(|s| s.1),
            col(|s| s.2),
            col(|s| s.3),
        );
        let opt = |get: fn(&CaseMetrics) -> Option<f64>| -> Option<(f64, f64)> {
            let vals: Vec<f64> = cases.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| mean_sd(&vals))
        };
        let vf = opt(|m| m.tumour_volume_factor);
        let jr = opt(|m| m.jacobian_ratio);
        let pair = |p: Option<(f64, f64)>| match p {
            Some((m, s)) => format!("{},{}", fmt(m), fmt(s)),
            None => ",".into(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(stage),
            scalars.len(),
            fmt(dsc.0),
            fmt(dsc.1),
            fmt(hd.0),
            fmt(hd.1),
            fmt(assd.0),
            fmt(assd.1),
            fmt(fof.0),
            fmt(fof.1),
            pair(vf),
            pair(jr),
        )
        .expect("string write");
    }
    Ok(out)
}

/// Regional frequency table: measured against volume-corrected expected
/// counts with the screen results, one CSV row per region.
pub fn frequency_table(
    stats: &[RegionStats],
    name: impl Fn(i32) -> String,
) -> Result<String> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("empty frequency table".into()));
    }
    let mut out = String::from(
        "region,label,measured,expected,ci_low,ci_high,chi_square,p_value,tested,significant\n",
    );
    for s in stats {
        let (lo, hi) = match s.ci {
            Some((lo, hi)) => (lo.to_string(), hi.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&name(s.region)),
            s.region,
            s.measured,
            fmt(s.expected),
            lo,
            hi,
            s.chi_square.map(fmt).unwrap_or_default(),
            s.p_value.map(fmt).unwrap_or_default(),
            s.tested,
            s.significant,
        )
        .expect("string write");
    }
    Ok(out)
}

/// Equal-width histogram over `range`: per bin (lower edge, upper edge,
/// count). Values on the upper boundary land in the last bin; values
/// outside the range are dropped.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !(range.1 > range.0) || !range.0.is_finite() || !range.1.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bad histogram range [{}, {}]",
            range.0, range.1
        )));
    }
    let width = (range.1 - range.0) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !v.is_finite() || v < range.0 || v > range.1 {
            continue;
        }
        let b = (((v - range.0) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (range.0 + b as f64 * width, range.0 + (b + 1) as f64 * width, c))
        .collect())
}

/// Histogram CSV for one or more series over a common binning.
pub fn histogram_table(
    series: &[(String, Vec<f64>)],
    bins: usize,
    range: (f64, f64),
) -> Result<String> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("no histogram series".into()));
    }
    let mut out = String::from("series,bin_low,bin_high,count,fraction\n");
    for (label, values) in series {
        let hist = histogram(values, bins, range)?;
        let total: usize = hist.iter().map(|(_, _, c)| c).sum();
        for (lo, hi, count) in hist {
            let fraction = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(label),
                fmt(lo),
                fmt(hi),
                count,
                fmt(fraction)
            )
            .expect("string write");
        }
    }
    Ok(out)
}

const CHART_W: f64 = 900.0;
const CHART_H: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 90.0;
const MEASURED_FILL: &str = "#4472a8";
const EXPECTED_FILL: &str = "#d98c3f";
const SERIES_FILLS: [&str; 4] = ["#4472a8", "#d98c3f", "#6aa556", "#a85858"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        CHART_W / 2.0,
        xml_escape(title)
    );
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Left axis with `ticks` evenly spaced labels from 0 to `max`.
fn y_axis(s: &mut String, max: f64, ticks: usize, label: &str) {
    let h = CHART_H - MARGIN_T - MARGIN_B;
    for t in 0..=ticks {
        let v = max * t as f64 / ticks as f64;
        let y = CHART_H - MARGIN_B - h * t as f64 / ticks as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            CHART_W - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0,
            trim_number(v),
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">{}</text>",
        MARGIN_T + h / 2.0,
        MARGIN_T + h / 2.0,
        xml_escape(label)
    );
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() { "0".into() } else { s.into() }
}

/// One bar-chart group: a measured count with an optional confidence
/// interval next to its expected count.
#[derive(Debug, Clone)]
pub struct BarGroup {
    pub label: String,
    pub measured: f64,
    pub expected: f64,
    pub ci: Option<(f64, f64)>,
    pub flagged: bool,
}

/// Render measured-versus-expected frequency bars. Flagged groups get a
/// marker above their bars; intervals are drawn as whiskers.
pub fn bar_chart_svg(title: &str, groups: &[BarGroup]) -> Result<String> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("empty bar chart".into()));
    }
    let mut max = 0.0f64;
    for g in groups {
        for v in [g.measured, g.expected, g.ci.map(|c| c.1).unwrap_or(0.0)] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite bar value for {}",
                    g.label
                )));
            }
            max = max.max(v);
        }
    }
    let max = if max > 0.0 { max * 1.08 } else { 1.0 };

    let mut s = svg_open(title);
    y_axis(&mut s, max, 5, "lesions");
    let w = CHART_W - MARGIN_L - MARGIN_R;
    let h = CHART_H - MARGIN_T - MARGIN_B;
    let slot = w / groups.len() as f64;
    let bar = (slot * 0.32).min(28.0);
    let scale = |v: f64| -> f64 { CHART_H - MARGIN_B - h * v / max };

    for (i, g) in groups.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        for (value, offset, fill) in [
            (g.measured, -bar, MEASURED_FILL),
            (g.expected, 0.0, EXPECTED_FILL),
        ] {
            let y = scale(value.max(0.0));
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" \
                 fill=\"{fill}\"/>",
                cx + offset,
                CHART_H - MARGIN_B - y,
            );
        }
        if let Some((lo, hi)) = g.ci {
            let x = cx - bar / 2.0;
            let (ylo, yhi) = (scale(lo.max(0.0)), scale(hi.max(0.0)));
            let _ = writeln!(
                s,
                "<line x1=\"{x:.1}\" y1=\"{ylo:.1}\" x2=\"{x:.1}\" y2=\"{yhi:.1}\" \
                 stroke=\"black\"/>\
                 <line x1=\"{:.1}\" y1=\"{ylo:.1}\" x2=\"{:.1}\" y2=\"{ylo:.1}\" stroke=\"black\"/>\
                 <line x1=\"{:.1}\" y1=\"{yhi:.1}\" x2=\"{:.1}\" y2=\"{yhi:.1}\" stroke=\"black\"/>",
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0,
            );
        }
        if g.flagged {
            let top = scale(g.measured.max(g.expected).max(g.ci.map(|c| c.1).unwrap_or(0.0)));
            let _ = writeln!(
                s,
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">*</text>",
                top - 6.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"end\" \
             transform=\"rotate(-45 {cx:.1} {:.1})\">{}</text>",
            CHART_H - MARGIN_B + 14.0,
            CHART_H - MARGIN_B + 14.0,
            xml_escape(&g.label)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{:.1}\" y=\"{MARGIN_T}\" width=\"12\" height=\"12\" fill=\"{MEASURED_FILL}\"/>\
         <text x=\"{:.1}\" y=\"{:.1}\">measured</text>\
         <rect x=\"{:.1}\" y=\"{MARGIN_T}\" width=\"12\" height=\"12\" fill=\"{EXPECTED_FILL}\"/>\
         <text x=\"{:.1}\" y=\"{:.1}\">expected</text>",
        CHART_W - 220.0,
        CHART_W - 204.0,
        MARGIN_T + 10.0,
        CHART_W - 120.0,
        CHART_W - 104.0,
        MARGIN_T + 10.0,
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Render overlaid per-series histograms of `series` on a shared binning,
/// normalized to per-series fractions so differently sized samples stay
/// comparable.
pub fn histogram_svg(
    title: &str,
    series: &[(String, Vec<f64>)],
    bins: usize,
    range: (f64, f64),
) -> Result<String> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("no histogram series".into()));
    }
    let hists: Vec<(&str, Vec<(f64, f64, usize)>, usize)> = series
        .iter()
        .map(|(label, values)| {
            let h = histogram(values, bins, range)?;
            let total = h.iter().map(|(_, _, c)| c).sum::<usize>().max(1);
            Ok((label.as_str(), h, total))
        })
        .collect::<Result<_>>()?;
    let max_frac = hists
        .iter()
        .flat_map(|(_, h, total)| h.iter().map(move |(_, _, c)| *c as f64 / *total as f64))
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.08;

    let mut s = svg_open(title);
    y_axis(&mut s, max_frac, 5, "fraction of lesions");
    let w = CHART_W - MARGIN_L - MARGIN_R;
    let h = CHART_H - MARGIN_T - MARGIN_B;
    let bin_w = w / bins as f64;

    for (si, (label, hist, total)) in hists.iter().enumerate() {
        let fill = SERIES_FILLS[si % SERIES_FILLS.len()];
        for (b, (_, _, count)) in hist.iter().enumerate() {
            let frac = *count as f64 / *total as f64;
            let bh = h * frac / max_frac;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" \
                 fill=\"{fill}\" fill-opacity=\"0.55\"/>",
                MARGIN_L + b as f64 * bin_w,
                CHART_H - MARGIN_B - bh,
                bin_w - 1.0,
            );
        }
        let ly = MARGIN_T + 16.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{ly:.1}\" width=\"12\" height=\"12\" fill=\"{fill}\" \
             fill-opacity=\"0.55\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            CHART_W - 220.0,
            CHART_W - 204.0,
            ly + 10.0,
            xml_escape(label)
        );
    }
    for t in 0..=4 {
        let v = range.0 + (range.1 - range.0) * t as f64 / 4.0;
        let x = MARGIN_L + w * t as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            CHART_H - MARGIN_B + 16.0,
            trim_number(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">distance to junction (mm)</text>",
        MARGIN_L + w / 2.0,
        CHART_H - MARGIN_B + 34.0,
    );
    s.push_str("</svg>\n");
    Ok(s)
}
