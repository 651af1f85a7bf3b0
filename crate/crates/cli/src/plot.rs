//! SVG plots rendered from the CSV artifacts through a fixed template and
//! layout file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::artifacts::ArtifactDir;
use crate::config::{self, PlotKind, PlotRun};
use crate::error::{CliError, CliResult};

const TEMPLATE: &str = include_str!("../templates/plot.svg");
const LAYOUT: &str = include_str!("../templates/layout.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Layout {
    width: f64,
    height: f64,
    margin_left: f64,
    margin_right: f64,
    margin_top: f64,
    margin_bottom: f64,
    font: String,
    font_size: f64,
    title_size: f64,
    background: String,
    axis_color: String,
    boundary_color: String,
    ticks: usize,
    marker_radius: f64,
    palette: Vec<String>,
}

fn layout() -> Layout {
    toml::from_str(LAYOUT).expect("bundled layout parses")
}

/// Rows of a CSV artifact keyed by column name; `#` lines are skipped.
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CliError::config("empty CSV"))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if let Some(bad) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(CliError::config(format!("CSV row has {} fields, expected {}", bad.len(), columns.len())));
        }
        Ok(Table { columns, rows })
    }

    fn col(&self, name: &str) -> CliResult<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::config(format!("CSV lacks column `{name}`")))
    }

    pub fn text(&self, name: &str) -> CliResult<Vec<&str>> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    /// Parses a column; empty cells become NaN.
    pub fn numbers(&self, name: &str) -> CliResult<Vec<f64>> {
        self.text(name)?
            .into_iter()
            .map(|v| {
                if v.is_empty() {
                    Ok(f64::NAN)
                } else {
                    v.parse().map_err(|_| CliError::config(format!("bad number `{v}` in `{name}`")))
                }
            })
            .collect()
    }
}

fn read_table(config_path: &Path, p: &Path) -> CliResult<Table> {
    let path = config::relative_to(config_path, p);
    let text = fs::read_to_string(&path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Table::parse(&text)
}

/// Maps data coordinates into the plot area.
struct Frame {
    x: [f64; 2],
    y: [f64; 2],
    log_x: bool,
    log_y: bool,
    area: [f64; 4],
}

impl Frame {
    fn new(xs: &[f64], ys: &[f64], log_x: bool, log_y: bool, l: &Layout) -> CliResult<Self> {
        let range = |v: &[f64], log: bool| -> CliResult<[f64; 2]> {
            let vals: Vec<f64> = v
                .iter()
                .filter(|a| a.is_finite() && (!log || **a > 0.0))
                .map(|&a| if log { a.log10() } else { a })
                .collect();
            if vals.is_empty() {
                return Err(CliError::config("nothing to plot"));
            }
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pad = if hi > lo { 0.04 * (hi - lo) } else { 0.5 };
            Ok([lo - pad, hi + pad])
        };
        Ok(Frame {
            x: range(xs, log_x)?,
            y: range(ys, log_y)?,
            log_x,
            log_y,
            area: [l.margin_left, l.width - l.margin_right, l.margin_top, l.height - l.margin_bottom],
        })
    }

    fn px(&self, x: f64) -> Option<f64> {
        let v = if self.log_x { x.log10() } else { x };
        v.is_finite()
            .then(|| self.area[0] + (v - self.x[0]) / (self.x[1] - self.x[0]) * (self.area[1] - self.area[0]))
    }

    fn py(&self, y: f64) -> Option<f64> {
        let v = if self.log_y { y.log10() } else { y };
        v.is_finite()
            .then(|| self.area[3] - (v - self.y[0]) / (self.y[1] - self.y[0]) * (self.area[3] - self.area[2]))
    }

    fn point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        Some((self.px(x)?, self.py(y)?))
    }

    fn axes(&self, l: &Layout) -> String {
        let [x0, x1, y0, y1] = self.area;
        let mut s = format!("<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\"/>\n", x1 - x0, y1 - y0);
        let label = |v: f64, log: bool| {
            let v = if log { 10f64.powf(v) } else { v };
            format!("{v:.3}")
        };
        for i in 0..=l.ticks {
            let t = i as f64 / l.ticks as f64;
            let xv = self.x[0] + t * (self.x[1] - self.x[0]);
            let xp = x0 + t * (x1 - x0);
            s.push_str(&format!(
                "<line x1=\"{xp:.2}\" y1=\"{y1:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\"/><text x=\"{xp:.2}\" y=\"{:.2}\" text-anchor=\"middle\" stroke=\"none\" fill=\"{}\">{}</text>\n",
                y1 + 5.0,
                y1 + 18.0,
                l.axis_color,
                label(xv, self.log_x)
            ));
            let yv = self.y[0] + t * (self.y[1] - self.y[0]);
            let yp = y1 - t * (y1 - y0);
            s.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{x0:.2}\" y2=\"{yp:.2}\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" stroke=\"none\" fill=\"{}\">{}</text>\n",
                x0 - 5.0,
                x0 - 8.0,
                yp + 4.0,
                l.axis_color,
                label(yv, self.log_y)
            ));
        }
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(frame: &Frame, pts: &[(f64, f64)], color: &str, l: &Layout, markers: bool) -> String {
    let mapped: Vec<(f64, f64)> = pts.iter().filter_map(|&(x, y)| frame.point(x, y)).collect();
    let coords: Vec<String> = mapped.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let mut s = format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        coords.join(" ")
    );
    if markers {
        for (x, y) in mapped {
            s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{}\" fill=\"{color}\"/>\n", l.marker_radius));
        }
    }
    s
}

fn legend(names: &[String], l: &Layout) -> String {
    let x = l.width - l.margin_right + 12.0;
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let y = l.margin_top + 10.0 + 18.0 * i as f64;
            format!(
                "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
                x + 18.0,
                l.palette[i % l.palette.len()],
                x + 24.0,
                y + 4.0,
                escape(n)
            )
        })
        .collect()
}

/// Series in first-appearance order.
fn group(series: &[&str], xs: &[f64], ys: &[f64]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((s, &x), &y) in series.iter().zip(xs).zip(ys) {
        if !map.contains_key(*s) {
            order.push(s.to_string());
        }
        map.entry(s.to_string()).or_default().push((x, y));
    }
    order.into_iter().map(|k| {
        let v = map.remove(&k).unwrap_or_default();
        (k, v)
    }).collect()
}

struct Rendered {
    frame: Frame,
    data: String,
    legend: String,
}

fn render_series(groups: Vec<(String, Vec<(f64, f64)>)>, run: &PlotRun, l: &Layout, sort_x: bool) -> CliResult<Rendered> {
    let xs: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().map(|p| p.1)).collect();
    let frame = Frame::new(&xs, &ys, run.log_x, run.log_y, l)?;
    let mut data = String::new();
    for (i, (_, mut pts)) in groups.iter().cloned().enumerate() {
        if sort_x {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        data.push_str(&polyline(&frame, &pts, &l.palette[i % l.palette.len()], l, true));
    }
    let names: Vec<String> = groups.into_iter().map(|g| g.0).collect();
    Ok(Rendered {
        frame,
        legend: legend(&names, l),
        data,
    })
}

fn render(config_path: &Path, run: &PlotRun, l: &Layout) -> CliResult<Rendered> {
    let t = read_table(config_path, &run.input)?;
    match run.kind {
        PlotKind::Rd => {
            let groups = group(&t.text("method")?, &t.numbers("rate")?, &t.numbers("distortion")?);
            render_series(groups, run, l, true)
        }
        PlotKind::Curve => {
            let groups = group(&t.text("series")?, &t.numbers("x")?, &t.numbers("y")?);
            render_series(groups, run, l, false)
        }
        PlotKind::Stalks => {
            let kind = t.text("kind")?;
            let pos = t.numbers("position")?;
            let prob = t.numbers("probability")?;
            let cv: Vec<(f64, f64)> = (0..kind.len())
                .filter(|&i| kind[i] == "codevector")
                .map(|i| (pos[i], prob[i]))
                .collect();
            let mut xs: Vec<f64> = pos.clone();
            xs.retain(|v| v.is_finite());
            let mut ys: Vec<f64> = cv.iter().map(|p| p.1).collect();
            ys.push(0.0);
            let frame = Frame::new(&xs, &ys, false, run.log_y, l)?;
            let mut data = String::new();
            let [_, _, top, bottom] = frame.area;
            for i in (0..kind.len()).filter(|&i| kind[i] == "boundary") {
                if let Some(x) = frame.px(pos[i]) {
                    data.push_str(&format!(
                        "<line x1=\"{x:.2}\" y1=\"{top:.2}\" x2=\"{x:.2}\" y2=\"{bottom:.2}\" stroke=\"{}\" stroke-dasharray=\"3 3\"/>\n",
                        l.boundary_color
                    ));
                }
            }
            let base = frame.py(0.0).unwrap_or(bottom);
            for &(x, p) in &cv {
                if let Some((px, py)) = frame.point(x, p) {
                    data.push_str(&format!(
                        "<line x1=\"{px:.2}\" y1=\"{base:.2}\" x2=\"{px:.2}\" y2=\"{py:.2}\" stroke=\"{c}\"/><circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"{}\" fill=\"{c}\"/>\n",
                        l.marker_radius,
                        c = l.palette[0]
                    ));
                }
            }
            Ok(Rendered {
                frame,
                data,
                legend: legend(&["codevector probability".into()], l),
            })
        }
        PlotKind::Partition => {
            let x = t.numbers("x")?;
            let y = t.numbers("y")?;
            let edge = t.numbers("boundary")?;
            let frame = Frame::new(&x, &y, false, false, l)?;
            let mut data = String::new();
            for i in (0..x.len()).filter(|&i| edge[i] > 0.5) {
                if let Some((px, py)) = frame.point(x[i], y[i]) {
                    data.push_str(&format!(
                        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"1\" height=\"1\" fill=\"{}\"/>\n",
                        px - 0.5,
                        py - 0.5,
                        l.boundary_color
                    ));
                }
            }
            if let Some(cv_path) = &run.codevectors {
                let cv = read_table(config_path, cv_path)?;
                let (cx, cy, p) = (cv.numbers("x")?, cv.numbers("y")?, cv.numbers("probability")?);
                let pmax = p.iter().cloned().fold(0.0, f64::max).max(1e-300);
                for i in 0..cx.len() {
                    if let Some((px, py)) = frame.point(cx[i], cy[i]) {
                        let r = l.marker_radius * (0.4 + (p[i] / pmax).sqrt());
                        data.push_str(&format!("<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"{r:.2}\" fill=\"{}\"/>\n", l.palette[0]));
                    }
                }
            }
            Ok(Rendered {
                frame,
                data,
                legend: legend(&["cell boundaries".into(), "codevectors".into()], l),
            })
        }
    }
}

/// Fills the SVG template.
fn fill(run: &PlotRun, r: &Rendered, l: &Layout) -> String {
    let [x0, x1, y0, y1] = r.frame.area;
    let vars: Vec<(&str, String)> = vec![
        ("width", format!("{}", l.width)),
        ("height", format!("{}", l.height)),
        ("font", l.font.clone()),
        ("font_size", format!("{}", l.font_size)),
        ("title_size", format!("{}", l.title_size)),
        ("background", l.background.clone()),
        ("axis_color", l.axis_color.clone()),
        ("title_x", format!("{:.2}", (x0 + x1) / 2.0)),
        ("title_y", format!("{:.2}", y0 - 14.0)),
        ("title", escape(&run.title)),
        ("axes", r.frame.axes(l)),
        ("data", r.data.clone()),
        ("legend", r.legend.clone()),
        ("x_label_x", format!("{:.2}", (x0 + x1) / 2.0)),
        ("x_label_y", format!("{:.2}", y1 + 40.0)),
        ("x_label", escape(&run.x_label)),
        ("y_label_x", format!("{:.2}", x0 - 52.0)),
        ("y_label_y", format!("{:.2}", (y0 + y1) / 2.0)),
        ("y_label", escape(&run.y_label)),
    ];
    let mut out = TEMPLATE.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), &v);
    }
    out
}

pub fn plot_cmd(config_path: &Path, out_dir: &Path, check: bool) -> CliResult<()> {
    let run: PlotRun = config::load(config_path)?;
    if check {
        return Ok(());
    }
    let l = layout();
    let rendered = render(config_path, &run, &l)?;
    let mut dir = ArtifactDir::create(out_dir)?;
    dir.write(&run.output, fill(&run, &rendered, &l).as_bytes())?;
    dir.finish(&config::to_toml(&run)?, &[])?;
    Ok(())
}
