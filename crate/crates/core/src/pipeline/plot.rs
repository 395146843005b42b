use std::fmt::Write as _;
use std::path::Path;

use super::results::{write_atomic, ResultRow, ResultsTable};
use super::sweep::{LADDER_RUNGS, MINIMALITY_MODELS};
use crate::error::{Error, Result};

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const BUDGET_METHODS: [&str; 5] = ["BC", "IDM_RELABEL", "LAPO", "LAOM", "LAOM_SUP"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Budget,
    Dims,
    Ladder,
    Minimality,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(Self::Budget),
            "dims" => Ok(Self::Dims),
            "ladder" => Ok(Self::Ladder),
            "minimality" => Ok(Self::Minimality),
            _ => Err(Error::Config(format!("unknown plot kind {s:?}; expected budget|dims|ladder|minimality"))),
        }
    }
}

/// Mean over seeds; `std` is the sample deviation, absent for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, n })
    }

    fn label(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3} ± {:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }

    fn hi(&self) -> f64 {
        self.mean + self.std.unwrap_or(0.0)
    }

    fn lo(&self) -> f64 {
        self.mean - self.std.unwrap_or(0.0)
    }
}

struct Series {
    name: String,
    points: Vec<Option<Stat>>,
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    categories: Vec<String>,
    series: Vec<Series>,
    bars: bool,
}

fn stat_where(rows: &[ResultRow], pred: impl Fn(&ResultRow) -> bool, field: impl Fn(&ResultRow) -> Option<f64>) -> Option<Stat> {
    let vals: Vec<f64> = rows.iter().filter(|r| pred(r)).filter_map(field).collect();
    Stat::of(&vals)
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn chart_for(table: &ResultsTable, kind: PlotKind) -> Result<Chart> {
    let rows = table.rows();
    let chart = match kind {
        PlotKind::Budget => {
            let methods: Vec<&str> = BUDGET_METHODS.iter().copied().filter(|m| rows.iter().any(|r| r.method == *m)).collect();
            let budgets = sorted_unique(rows.iter().filter(|r| methods.contains(&r.method.as_str())).map(|r| r.budget).collect());
            Chart {
                title: "Normalized score vs labeled trajectories".into(),
                x_label: "labeled trajectories".into(),
                y_label: "normalized score".into(),
                categories: budgets.iter().map(|b| b.to_string()).collect(),
                series: methods
                    .iter()
                    .map(|m| Series {
                        name: m.to_string(),
                        points: budgets
                            .iter()
                            .map(|&b| stat_where(rows, |r| r.method == *m && r.budget == b, |r| r.norm_score))
                            .collect(),
                    })
                    .collect(),
                bars: false,
            }
        }
        PlotKind::Dims => {
            let methods = ["dims/LAOM", "dims/LAOM_SUP"];
            let dims = sorted_unique(rows.iter().filter(|r| methods.contains(&r.method.as_str())).filter_map(|r| r.d_z).collect());
            Chart {
                title: "Normalized score vs latent action dimension".into(),
                x_label: "latent action dimension".into(),
                y_label: "normalized score".into(),
                categories: dims.iter().map(|d| d.to_string()).collect(),
                series: methods
                    .iter()
                    .filter(|m| rows.iter().any(|r| r.method == **m))
                    .map(|m| Series {
                        name: m.trim_start_matches("dims/").to_string(),
                        points: dims
                            .iter()
                            .map(|&d| stat_where(rows, |r| r.method == *m && r.d_z == Some(d), |r| r.norm_score))
                            .collect(),
                    })
                    .collect(),
                bars: false,
            }
        }
        PlotKind::Ladder => {
            let rungs: Vec<&str> = LADDER_RUNGS.iter().copied().filter(|g| rows.iter().any(|r| r.method == format!("ladder/{g}"))).collect();
            Chart {
                title: "Latent action probe error along the ablation ladder".into(),
                x_label: "".into(),
                y_label: "normalized probe MSE (z → a)".into(),
                categories: rungs.iter().map(|g| g.to_string()).collect(),
                series: vec![Series {
                    name: "probe z → a".into(),
                    points: rungs
                        .iter()
                        .map(|g| stat_where(rows, |r| r.method == format!("ladder/{g}"), |r| r.probe_mse_z))
                        .collect(),
                }],
                bars: true,
            }
        }
        PlotKind::Minimality => {
            let models: Vec<&str> =
                MINIMALITY_MODELS.iter().copied().filter(|m| rows.iter().any(|r| r.method == format!("minimality/{m}"))).collect();
            let series = [
                ("action", (|r: &ResultRow| r.probe_mse_h_action) as fn(&ResultRow) -> Option<f64>),
                ("distractor", |r: &ResultRow| r.probe_mse_h_distractor),
            ];
            Chart {
                title: "Linear probes on frozen representations".into(),
                x_label: "".into(),
                y_label: "normalized probe MSE".into(),
                categories: models.iter().map(|m| m.to_string()).collect(),
                series: series
                    .iter()
                    .map(|(name, field)| Series {
                        name: name.to_string(),
                        points: models
                            .iter()
                            .map(|m| stat_where(rows, |r| r.method == format!("minimality/{m}"), field))
                            .collect(),
                    })
                    .collect(),
                bars: true,
            }
        }
    };
    if chart.categories.is_empty() || chart.series.iter().all(|s| s.points.iter().all(Option::is_none)) {
        return Err(Error::Format(format!("no rows for a {kind:?} plot")));
    }
    Ok(chart)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(chart: &Chart) -> String {
    let stats = chart.series.iter().flat_map(|s| s.points.iter().flatten());
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for st in stats {
        lo = lo.min(st.lo());
        hi = hi.max(st.hi());
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    hi += 0.1 * span;
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let y = |v: f64| TOP + ph * (hi - v) / (hi - lo);
    let nc = chart.categories.len();
    let slot = pw / nc as f64;
    let cx = |i: usize| LEFT + slot * (i as f64 + 0.5);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, esc(&chart.title));
    // Axes and y ticks.
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, y(lo.max(0.0).min(hi)), LEFT + pw, y(lo.max(0.0).min(hi)));
    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, LEFT, y(v), LEFT + pw, y(v));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y(v) + 4.0);
    }
    for (i, c) in chart.categories.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, cx(i), TOP + ph + 16.0, esc(c));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 14.0, esc(&chart.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&chart.y_label)
    );

    let ns = chart.series.len();
    let bar_w = slot * 0.8 / ns as f64;
    for (k, series) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, esc(&series.name));
        let xs = |i: usize| if chart.bars { LEFT + slot * i as f64 + slot * 0.1 + bar_w * (k as f64 + 0.5) } else { cx(i) };
        if chart.bars {
            for (i, p) in series.points.iter().enumerate() {
                if let Some(st) = p {
                    let (top, base) = (y(st.mean.max(0.0)), y(st.mean.min(0.0)));
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                        xs(i) - bar_w / 2.0,
                        top,
                        bar_w,
                        base - top
                    );
                }
            }
        } else {
            let pts: Vec<String> =
                series.points.iter().enumerate().filter_map(|(i, p)| p.map(|st| format!("{:.1},{:.1}", xs(i), y(st.mean)))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        }
        for (i, p) in series.points.iter().enumerate() {
            let Some(st) = p else { continue };
            if let Some(sd) = st.std {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#,
                    y(st.mean + sd),
                    y(st.mean - sd),
                    x = xs(i)
                );
            }
            if !chart.bars {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, xs(i), y(st.mean));
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#,
                xs(i),
                y(st.hi()) - 4.0,
                esc(&st.label())
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = TOP + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="10" fill="{color}"/>"#, W - RIGHT + 20.0, ly);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - RIGHT + 38.0, ly + 9.0, esc(&series.name));
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_svg(table: &ResultsTable, kind: PlotKind) -> Result<String> {
    Ok(render(&chart_for(table, kind)?))
}

/// Renders before touching the filesystem, so bad input leaves no file.
pub fn write_plot(table: &ResultsTable, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = render_svg(table, kind)?;
    write_atomic(out, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, budget: usize, seed: u64, score: f64) -> ResultRow {
        let mut r = ResultRow::new(method, budget, None, seed);
        r.norm_score = Some(score);
        r
    }

    #[test]
    fn empty_table_errors() {
        assert!(render_svg(&ResultsTable::new(), PlotKind::Budget).is_err());
        assert!(PlotKind::parse("pie").is_err());
    }

    #[test]
    fn single_seed_omits_std() {
        let mut t = ResultsTable::new();
        t.push(row("LAOM", 2, 0, 0.25));
        let svg = render_svg(&t, PlotKind::Budget).unwrap();
        assert!(svg.contains(">0.250<"));
        assert!(!svg.contains('±'));
        t.push(row("LAOM", 2, 1, 0.75));
        let svg = render_svg(&t, PlotKind::Budget).unwrap();
        assert!(svg.contains("0.500 ± 0.354"));
        assert_eq!(svg, render_svg(&t, PlotKind::Budget).unwrap());
    }

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));
        assert_eq!(Stat::of(&[4.0]).unwrap().std, None);
    }
}
