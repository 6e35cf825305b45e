//! SVG rendering of the experiment CSV artifacts.
//!
//! Everything is emitted directly as SVG text: polyline charts for error
//! curves, banded traces for parameters, and heat maps with marching-squares
//! contour overlays for field snapshots. Rendering reads only the CSV files
//! in the artifact directory, so `fracfilter plot` works on any directory a
//! run produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{FfError, Result};
use crate::experiment::{read_fields, FieldRow};

/// Renders every supported figure for the artifact directory `dir` into
/// `dir/plots/` and returns the SVG paths written. Errors if a required CSV
/// (`rmse.csv`, `fields_reference.csv`, `fracture_profile.csv`) is missing.
pub fn render_plots(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut written = Vec::new();

    let rmse = read_rmse(&require(dir.join("rmse.csv"))?)?;
    written.push(write_svg(plots.join("rmse.svg"), &rmse_plot(&rmse))?);

    for (csv_name, svg_name, title) in [
        ("params.csv", "params.svg", "parameter traces"),
        (
            "params_augenkf.csv",
            "params_augenkf.svg",
            "parameter traces (Kalman baseline)",
        ),
    ] {
        let path = dir.join(csv_name);
        if path.exists() {
            let rows = read_params(&path)?;
            written.push(write_svg(plots.join(svg_name), &params_plot(&rows, title))?);
        }
    }

    require(dir.join("fields_reference.csv"))?;
    let mut field_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("fields_") && n.ends_with(".csv"))
        })
        .collect();
    field_files.sort();
    for csv_path in field_files {
        let stem = csv_path
            .file_stem()
            .and_then(|s| s.to_str())
            .expect("fields file names are utf-8")
            .to_owned();
        let rows = read_fields(&csv_path)?;
        let svg = field_plot(&rows, &stem);
        written.push(write_svg(plots.join(format!("{stem}.svg")), &svg)?);
    }

    let profile = read_profile(&require(dir.join("fracture_profile.csv"))?)?;
    written.push(write_svg(
        plots.join("fracture_profile.svg"),
        &profile_plot(&profile),
    )?);

    Ok(written)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(FfError::MissingArtifact(path.display().to_string()))
    }
}

fn write_svg(path: PathBuf, content: &str) -> Result<PathBuf> {
    std::fs::write(&path, content)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// CSV row mirrors

#[derive(Debug, Deserialize)]
struct RmseRow {
    step: usize,
    #[allow(dead_code)]
    time: f64,
    rmse: f64,
    filter: String,
}

#[derive(Debug, Deserialize)]
struct ParamRow {
    step: usize,
    component: usize,
    mean: f64,
    p05: f64,
    #[allow(dead_code)]
    p50: f64,
    p95: f64,
    truth: f64,
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    y: f64,
    series: String,
    value: f64,
}

fn read_rmse(path: &Path) -> Result<Vec<RmseRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn read_params(path: &Path) -> Result<Vec<ParamRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn read_profile(path: &Path) -> Result<Vec<ProfileRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// SVG primitives

struct Svg {
    out: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        let mut out = String::new();
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" \
             height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" \
             font-family=\"sans-serif\">\n"
        );
        let _ = write!(
            out,
            "<rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
        );
        Svg { out }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, style: &str) {
        let _ = write!(
            self.out,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" {style}/>\n"
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = write!(
            self.out,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" {style}/>\n"
        );
    }

    fn poly(&mut self, tag: &str, points: &[[f64; 2]], style: &str) {
        let mut attr = String::new();
        for p in points {
            let _ = write!(attr, "{:.2},{:.2} ", p[0], p[1]);
        }
        let _ = write!(
            self.out,
            "<{tag} points=\"{}\" {style}/>\n",
            attr.trim_end()
        );
    }

    fn polyline(&mut self, points: &[[f64; 2]], style: &str) {
        self.poly("polyline", points, style);
    }

    fn polygon(&mut self, points: &[[f64; 2]], style: &str) {
        self.poly("polygon", points, style);
    }

    fn path(&mut self, d: &str, style: &str) {
        let _ = write!(self.out, "<path d=\"{d}\" {style}/>\n");
    }

    fn text(&mut self, x: f64, y: f64, style: &str, content: &str) {
        let escaped = content
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = write!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" {style}>{escaped}</text>\n"
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Affine map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    /// Degenerate data ranges are widened so the map stays finite.
    fn new(mut d0: f64, mut d1: f64, p0: f64, p1: f64) -> Self {
        if d1 - d0 <= 0.0 {
            let pad = 0.5 * d0.abs().max(1.0);
            d0 -= pad;
            d1 += pad;
        }
        Scale { d0, d1, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

/// Tick positions at a "nice" step (1, 2, or 5 times a power of ten).
fn nice_ticks(d0: f64, d1: f64, target: usize) -> Vec<f64> {
    let range = d1 - d0;
    if !(range > 0.0) || target == 0 {
        return vec![d0];
    }
    let raw = range / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        mag
    } else if norm < 3.5 {
        2.0 * mag
    } else if norm < 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let mut ticks = Vec::new();
    let mut t = (d0 / step).ceil() * step;
    while t <= d1 + 1e-9 * step {
        // Snap values within rounding error of zero.
        ticks.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    ticks
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.4}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        s.pop();
    }
    s
}

const AXIS_STYLE: &str = "stroke=\"#333333\" stroke-width=\"1\"";
const GRID_STYLE: &str = "stroke=\"#dddddd\" stroke-width=\"0.7\"";
const TICK_TEXT: &str = "font-size=\"11\" fill=\"#333333\" text-anchor=\"middle\"";
const TICK_TEXT_RIGHT: &str = "font-size=\"11\" fill=\"#333333\" text-anchor=\"end\"";
const TITLE_TEXT: &str = "font-size=\"14\" fill=\"#111111\" text-anchor=\"middle\"";
const LABEL_TEXT: &str = "font-size=\"12\" fill=\"#333333\" text-anchor=\"middle\"";

/// Chart frame: border, grid lines, tick labels, axis labels, and title.
/// `y_labels` overrides the printed y tick labels (used by log axes).
#[allow(clippy::too_many_arguments)]
fn draw_frame(
    svg: &mut Svg,
    sx: &Scale,
    sy: &Scale,
    x_ticks: &[f64],
    y_ticks: &[f64],
    y_labels: Option<&[String]>,
    title: &str,
    x_label: &str,
    y_label: &str,
) {
    let (left, right) = (sx.p0, sx.p1);
    let (bottom, top) = (sy.p0, sy.p1);
    for (k, &t) in x_ticks.iter().enumerate() {
        let x = sx.map(t);
        svg.line(x, top, x, bottom, GRID_STYLE);
        svg.text(x, bottom + 16.0, TICK_TEXT, &fmt_num(t));
        let _ = k;
    }
    for (k, &t) in y_ticks.iter().enumerate() {
        let y = sy.map(t);
        svg.line(left, y, right, y, GRID_STYLE);
        let label = match y_labels {
            Some(labels) => labels[k].clone(),
            None => fmt_num(t),
        };
        svg.text(left - 6.0, y + 4.0, TICK_TEXT_RIGHT, &label);
    }
    svg.rect(
        left,
        top,
        right - left,
        bottom - top,
        "fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"",
    );
    svg.text(0.5 * (left + right), top - 10.0, TITLE_TEXT, title);
    svg.text(0.5 * (left + right), bottom + 34.0, LABEL_TEXT, x_label);
    let x = left - 44.0;
    let y = 0.5 * (top + bottom);
    let _ = write!(
        svg.out,
        "<text x=\"{x:.2}\" y=\"{y:.2}\" {LABEL_TEXT} transform=\"rotate(-90 {x:.2} {y:.2})\">{y_label}</text>\n"
    );
}

fn series_style(name: &str) -> (&'static str, &'static str) {
    match name {
        "reference" => ("#333333", ""),
        "united" => ("#1f77b4", ""),
        "augenkf" => ("#ff7f0e", " stroke-dasharray=\"6,3\""),
        _ => ("#2ca02c", ""),
    }
}

fn legend(svg: &mut Svg, x: f64, y: f64, entries: &[&str]) {
    for (k, name) in entries.iter().enumerate() {
        let yy = y + 16.0 * k as f64;
        let (color, dash) = series_style(name);
        svg.line(
            x,
            yy - 4.0,
            x + 22.0,
            yy - 4.0,
            &format!("stroke=\"{color}\" stroke-width=\"2\"{dash}"),
        );
        svg.text(
            x + 28.0,
            yy,
            "font-size=\"11\" fill=\"#333333\" text-anchor=\"start\"",
            name,
        );
    }
}

// ---------------------------------------------------------------------------
// Error curves

fn rmse_plot(rows: &[RmseRow]) -> String {
    let width = 640.0;
    let height = 420.0;
    let (left, right, top, bottom) = (70.0, width - 25.0, 40.0, height - 55.0);
    let mut svg = Svg::new(width, height);

    // Preserve first-appearance order so the legend matches the file.
    let mut series: Vec<(&str, Vec<[f64; 2]>)> = Vec::new();
    for row in rows {
        if !series.iter().any(|(name, _)| *name == row.filter) {
            series.push((&row.filter, Vec::new()));
        }
        let entry = series
            .iter_mut()
            .find(|(name, _)| *name == row.filter)
            .expect("inserted above");
        entry.1.push([row.step as f64, row.rmse]);
    }
    if series.is_empty() {
        return svg.finish();
    }

    let values: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let (x0, x1) = min_max(&steps);
    let (mut y0, mut y1) = min_max(&values);
    let log_axis = y0 > 0.0 && y1 / y0 > 100.0;
    if log_axis {
        y0 = y0.log10();
        y1 = y1.log10();
    }
    let pad = 0.05 * (y1 - y0).max(1e-12);
    let sx = Scale::new(x0, x1, left, right);
    let sy = Scale::new(y0 - pad, y1 + pad, bottom, top);

    let x_ticks = nice_ticks(sx.d0, sx.d1, 8);
    let (y_ticks, y_labels) = if log_axis {
        let ticks: Vec<f64> = (sy.d0.ceil() as i64..=sy.d1.floor() as i64)
            .map(|e| e as f64)
            .collect();
        let labels: Vec<String> = ticks.iter().map(|e| format!("1e{}", *e as i64)).collect();
        (ticks, Some(labels))
    } else {
        (nice_ticks(sy.d0, sy.d1, 6), None)
    };
    draw_frame(
        &mut svg,
        &sx,
        &sy,
        &x_ticks,
        &y_ticks,
        y_labels.as_deref(),
        "state error vs reference",
        "assimilation step",
        "rmse",
    );

    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    for (name, points) in &series {
        let (color, dash) = series_style(name);
        let mapped: Vec<[f64; 2]> = points
            .iter()
            .map(|[x, y]| {
                let v = if log_axis { y.log10() } else { *y };
                [sx.map(*x), sy.map(v)]
            })
            .collect();
        svg.polyline(
            &mapped,
            &format!("fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}"),
        );
    }
    legend(&mut svg, right - 110.0, top + 18.0, &names);
    svg.finish()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Parameter traces

fn params_plot(rows: &[ParamRow], title: &str) -> String {
    let n_components = rows.iter().map(|r| r.component + 1).max().unwrap_or(0);
    let panel_w = 280.0;
    let panel_h = 260.0;
    let (ml, mr, mt, mb, gap) = (62.0, 16.0, 46.0, 58.0, 26.0);
    let width = ml + n_components as f64 * panel_w + (n_components.max(1) - 1) as f64 * gap + mr;
    let height = mt + panel_h + mb;
    let mut svg = Svg::new(width, height);
    svg.text(0.5 * width, 20.0, TITLE_TEXT, title);

    for c in 0..n_components {
        let panel: Vec<&ParamRow> = rows.iter().filter(|r| r.component == c).collect();
        if panel.is_empty() {
            continue;
        }
        let left = ml + c as f64 * (panel_w + gap);
        let right = left + panel_w;
        let (top, bottom) = (mt, mt + panel_h);

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &panel {
            lo = lo.min(r.p05).min(r.truth);
            hi = hi.max(r.p95).max(r.truth);
        }
        let pad = 0.08 * (hi - lo).max(1e-12);
        let sx = Scale::new(
            panel.first().expect("non-empty").step as f64,
            panel.last().expect("non-empty").step as f64,
            left,
            right,
        );
        let sy = Scale::new(lo - pad, hi + pad, bottom, top);
        draw_frame(
            &mut svg,
            &sx,
            &sy,
            &nice_ticks(sx.d0, sx.d1, 5),
            &nice_ticks(sy.d0, sy.d1, 6),
            None,
            &format!("parameter {}", c + 1),
            "step",
            if c == 0 { "value" } else { "" },
        );

        // 5–95% band, then the mean on top of it, then the true value.
        let mut band: Vec<[f64; 2]> = panel
            .iter()
            .map(|r| [sx.map(r.step as f64), sy.map(r.p05)])
            .collect();
        band.extend(
            panel
                .iter()
                .rev()
                .map(|r| [sx.map(r.step as f64), sy.map(r.p95)]),
        );
        svg.polygon(&band, "fill=\"#9ecae1\" fill-opacity=\"0.45\" stroke=\"none\"");
        let mean: Vec<[f64; 2]> = panel
            .iter()
            .map(|r| [sx.map(r.step as f64), sy.map(r.mean)])
            .collect();
        svg.polyline(
            &mean,
            "fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.8\"",
        );
        let ty = sy.map(panel[0].truth);
        svg.line(
            left,
            ty,
            right,
            ty,
            "stroke=\"#d62728\" stroke-width=\"1.4\" stroke-dasharray=\"7,4\"",
        );
    }
    svg.finish()
}

// ---------------------------------------------------------------------------
// Field heat maps with contour overlays

/// Number of contour levels drawn strictly between the field min and max.
const CONTOUR_LEVELS: usize = 10;

fn field_plot(rows: &[FieldRow], title: &str) -> String {
    let grid = CellGrid::from_rows(rows);
    let (v_lo, v_hi) = min_max(&grid.values);

    let aspect = if grid.extent[1] > 0.0 {
        grid.extent[0] / grid.extent[1]
    } else {
        1.0
    };
    let ph = 300.0;
    let pw = (ph * aspect).clamp(160.0, 640.0);
    let (ml, mt, mb) = (60.0, 46.0, 52.0);
    let bar_w = 14.0;
    let width = ml + pw + 34.0 + bar_w + 56.0;
    let height = mt + ph + mb;
    let mut svg = Svg::new(width, height);

    // Heat cells.
    let cw = pw / grid.nx as f64;
    let ch = ph / grid.ny as f64;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let t = if v_hi > v_lo {
                (grid.values[j * grid.nx + i] - v_lo) / (v_hi - v_lo)
            } else {
                0.5
            };
            let x = ml + i as f64 * cw;
            let y = mt + (grid.ny - 1 - j) as f64 * ch;
            // Slight overdraw hides antialiasing seams between cells.
            svg.rect(
                x,
                y,
                cw + 0.5,
                ch + 0.5,
                &format!("fill=\"{}\" stroke=\"none\"", colormap(t)),
            );
        }
    }

    // Contours on vertex-averaged values.
    if v_hi > v_lo {
        let vertices = grid.vertex_values();
        for k in 1..=CONTOUR_LEVELS {
            let level = v_lo + (v_hi - v_lo) * k as f64 / (CONTOUR_LEVELS + 1) as f64;
            let segments = marching_squares(&vertices, grid.nx, grid.ny, level);
            if segments.is_empty() {
                continue;
            }
            let mut d = String::new();
            for [x1, y1, x2, y2] in segments {
                let _ = write!(
                    d,
                    "M{:.2} {:.2}L{:.2} {:.2}",
                    ml + x1 * cw,
                    mt + ph - y1 * ch,
                    ml + x2 * cw,
                    mt + ph - y2 * ch,
                );
            }
            svg.path(
                &d,
                "fill=\"none\" stroke=\"#222222\" stroke-width=\"0.7\" stroke-opacity=\"0.75\"",
            );
        }
    }

    svg.rect(
        ml,
        mt,
        pw,
        ph,
        "fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"",
    );
    svg.text(ml + 0.5 * pw, mt - 10.0, TITLE_TEXT, title);
    // Axis extent labels at the plot corners.
    svg.text(ml, mt + ph + 16.0, TICK_TEXT, &fmt_num(grid.origin[0]));
    svg.text(
        ml + pw,
        mt + ph + 16.0,
        TICK_TEXT,
        &fmt_num(grid.origin[0] + grid.extent[0]),
    );
    svg.text(
        ml - 6.0,
        mt + ph + 4.0,
        TICK_TEXT_RIGHT,
        &fmt_num(grid.origin[1]),
    );
    svg.text(
        ml - 6.0,
        mt + 4.0,
        TICK_TEXT_RIGHT,
        &fmt_num(grid.origin[1] + grid.extent[1]),
    );
    svg.text(ml + 0.5 * pw, mt + ph + 34.0, LABEL_TEXT, "x");

    // Colorbar.
    let bx = ml + pw + 34.0;
    let stops = 32;
    for s in 0..stops {
        let t = (s as f64 + 0.5) / stops as f64;
        let y = mt + ph * (1.0 - (s + 1) as f64 / stops as f64);
        svg.rect(
            bx,
            y,
            bar_w,
            ph / stops as f64 + 0.5,
            &format!("fill=\"{}\" stroke=\"none\"", colormap(t)),
        );
    }
    svg.rect(
        bx,
        mt,
        bar_w,
        ph,
        "fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"",
    );
    let value_text = "font-size=\"11\" fill=\"#333333\" text-anchor=\"start\"";
    svg.text(bx + bar_w + 5.0, mt + ph + 4.0, value_text, &fmt_num(v_lo));
    svg.text(bx + bar_w + 5.0, mt + 8.0, value_text, &fmt_num(v_hi));
    svg.finish()
}

/// Cell values collected onto the structured lattice, averaging the two
/// triangles that share a lattice rectangle.
struct CellGrid {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    origin: [f64; 2],
    extent: [f64; 2],
}

impl CellGrid {
    fn from_rows(rows: &[FieldRow]) -> Self {
        let nx = rows.iter().map(|r| r.i + 1).max().unwrap_or(1);
        let ny = rows.iter().map(|r| r.j + 1).max().unwrap_or(1);
        let mut sum = vec![0.0; nx * ny];
        let mut count = vec![0usize; nx * ny];
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in rows {
            sum[r.j * nx + r.i] += r.pressure;
            count[r.j * nx + r.i] += 1;
            x_lo = x_lo.min(r.x);
            x_hi = x_hi.max(r.x);
            y_lo = y_lo.min(r.y);
            y_hi = y_hi.max(r.y);
        }
        let values = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        // Cell centers sit half a cell inside the domain; recover the full
        // physical extent from the lattice shape.
        let dx = if nx > 1 { (x_hi - x_lo) / (nx - 1) as f64 } else { 0.0 };
        let dy = if ny > 1 { (y_hi - y_lo) / (ny - 1) as f64 } else { 0.0 };
        CellGrid {
            nx,
            ny,
            values,
            origin: [x_lo - 0.5 * dx, y_lo - 0.5 * dy],
            extent: [nx as f64 * dx, ny as f64 * dy],
        }
    }

    /// Vertex values as the mean of the 1, 2, or 4 touching cells, on the
    /// `(nx + 1) x (ny + 1)` lattice.
    fn vertex_values(&self) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![0.0; (nx + 1) * (ny + 1)];
        for jv in 0..=ny {
            for iv in 0..=nx {
                let mut sum = 0.0;
                let mut n = 0;
                for (ci, cj) in [
                    (iv.wrapping_sub(1), jv.wrapping_sub(1)),
                    (iv, jv.wrapping_sub(1)),
                    (iv.wrapping_sub(1), jv),
                    (iv, jv),
                ] {
                    if ci < nx && cj < ny {
                        sum += self.values[cj * nx + ci];
                        n += 1;
                    }
                }
                out[jv * (nx + 1) + iv] = sum / n as f64;
            }
        }
        out
    }
}

/// Contour segments of the level set `value == level` on a vertex lattice,
/// in grid coordinates (x in [0, nx], y in [0, ny]).
fn marching_squares(vertices: &[f64], nx: usize, ny: usize, level: f64) -> Vec<[f64; 4]> {
    let val = |i: usize, j: usize| vertices[j * (nx + 1) + i];
    let frac = |a: f64, b: f64| {
        if (b - a).abs() < f64::MIN_POSITIVE {
            0.5
        } else {
            ((level - a) / (b - a)).clamp(0.0, 1.0)
        }
    };
    let mut segments = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let bl = val(i, j);
            let br = val(i + 1, j);
            let tr = val(i + 1, j + 1);
            let tl = val(i, j + 1);
            let case = usize::from(bl > level)
                | usize::from(br > level) << 1
                | usize::from(tr > level) << 2
                | usize::from(tl > level) << 3;
            if case == 0 || case == 15 {
                continue;
            }
            let x = i as f64;
            let y = j as f64;
            let bottom = [x + frac(bl, br), y];
            let right = [x + 1.0, y + frac(br, tr)];
            let top = [x + frac(tl, tr), y + 1.0];
            let left = [x, y + frac(bl, tl)];
            let mut push = |a: [f64; 2], b: [f64; 2]| {
                segments.push([a[0], a[1], b[0], b[1]]);
            };
            match case {
                1 | 14 => push(left, bottom),
                2 | 13 => push(bottom, right),
                3 | 12 => push(left, right),
                4 | 11 => push(right, top),
                6 | 9 => push(bottom, top),
                7 | 8 => push(top, left),
                5 => {
                    push(left, bottom);
                    push(right, top);
                }
                10 => {
                    push(bottom, right);
                    push(top, left);
                }
                _ => unreachable!("cases 0 and 15 skipped above"),
            }
        }
    }
    segments
}

/// Five-stop approximation of a perceptually ordered dark-to-bright map.
fn colormap(t: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(STOPS[k][0], STOPS[k + 1][0]),
        mix(STOPS[k][1], STOPS[k + 1][1]),
        mix(STOPS[k][2], STOPS[k + 1][2]),
    )
}

// ---------------------------------------------------------------------------
// Fracture profiles

fn profile_plot(rows: &[ProfileRow]) -> String {
    let width = 640.0;
    let height = 420.0;
    let (left, right, top, bottom) = (70.0, width - 25.0, 40.0, height - 55.0);
    let mut svg = Svg::new(width, height);

    let mut series: Vec<(&str, Vec<[f64; 2]>)> = Vec::new();
    for row in rows {
        if !series.iter().any(|(name, _)| *name == row.series) {
            series.push((&row.series, Vec::new()));
        }
        let entry = series
            .iter_mut()
            .find(|(name, _)| *name == row.series)
            .expect("inserted above");
        entry.1.push([row.y, row.value]);
    }
    if series.is_empty() {
        return svg.finish();
    }
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let (x0, x1) = min_max(&ys);
    let (v0, v1) = min_max(&values);
    let pad = 0.05 * (v1 - v0).max(1e-12);
    let sx = Scale::new(x0, x1, left, right);
    let sy = Scale::new(v0 - pad, v1 + pad, bottom, top);
    draw_frame(
        &mut svg,
        &sx,
        &sy,
        &nice_ticks(sx.d0, sx.d1, 8),
        &nice_ticks(sy.d0, sy.d1, 6),
        None,
        "pressure along the fracture",
        "position along the fracture",
        "fracture pressure",
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    for (name, points) in &series {
        let (color, dash) = series_style(name);
        let mapped: Vec<[f64; 2]> = points
            .iter()
            .map(|[x, y]| [sx.map(*x), sy.map(*y)])
            .collect();
        svg.polyline(
            &mapped,
            &format!("fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}"),
        );
    }
    legend(&mut svg, right - 110.0, top + 18.0, &names);
    svg.finish()
}
