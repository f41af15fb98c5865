//! Raster figures from metrics streams and evaluation reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageEncoder, Rgb, RgbImage};
use serde_json::Value;

use crate::sim::CommandClass;
use crate::{Error, Result};

pub const WIDTH: u32 = 640;
pub const PANEL_HEIGHT: u32 = 240;
const MARGIN: i64 = 32;
/// Collapse reference `1/sqrt(d)` for a 16-channel code.
pub const COLLAPSE_REFERENCE: f64 = 0.25;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const REFERENCE: Rgb<u8> = Rgb([200, 30, 30]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([23, 190, 207]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    LossCurves,
    CollapseStd,
    TrackingError,
    SuccessBars,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        Self::LossCurves,
        Self::CollapseStd,
        Self::TrackingError,
        Self::SuccessBars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LossCurves => "loss_curves",
            Self::CollapseStd => "collapse_std",
            Self::TrackingError => "tracking_error",
            Self::SuccessBars => "success_bars",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown plot kind `{s}`")))
    }
}

/// Loss series drawn by `loss_curves`, one panel each.
pub const LOSS_SERIES: [&str; 4] = ["total", "surrogate", "value", "mixed"];

/// One parsed input: a metrics stream or one or more reports.
#[derive(Debug, Clone)]
pub struct Input {
    pub name: String,
    pub records: Vec<Value>,
}

/// Parses a JSON document or JSON lines.
pub fn parse_input(name: &str, text: &str) -> Result<Input> {
    let trimmed = text.trim();
    let records = if trimmed.is_empty() {
        Vec::new()
    } else if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        match v {
            Value::Array(items) => items,
            other => vec![other],
        }
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    };
    Ok(Input {
        name: name.to_string(),
        records,
    })
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |v, k| v.get(k))
}

fn number(v: &Value, key: &str) -> Option<f64> {
    lookup(v, key).and_then(Value::as_f64)
}

/// Errors naming every key that no record of some input provides.
fn require(inputs: &[Input], keys: &[&str]) -> Result<()> {
    let mut missing = Vec::new();
    for inp in inputs {
        for &k in keys {
            if !inp
                .records
                .iter()
                .any(|r| lookup(r, k).is_some_and(|v| !v.is_null()))
            {
                missing.push(format!("{}: {k}", inp.name));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "missing series: {}",
            missing.join(", ")
        )))
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(panels: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(WIDTH, PANEL_HEIGHT * panels.max(1), BACKGROUND),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dash: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err, mut k) = (x0, y0, dx + dy, 0u32);
        loop {
            if !dash || (k / 6) % 2 == 0 {
                self.put(x, y, c);
            }
            k += 1;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(
                self.img.as_raw(),
                self.img.width(),
                self.img.height(),
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out)
    }
}

/// Data-to-pixel map of one panel.
struct Panel {
    top: i64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn new(index: u32, x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Self {
            top: (index * PANEL_HEIGHT) as i64,
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH as i64 - 2 * MARGIN) as f64;
        let h = (PANEL_HEIGHT as i64 - 2 * MARGIN) as f64;
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (
            MARGIN + (fx * w).round() as i64,
            self.top + PANEL_HEIGHT as i64 - MARGIN - (fy * h).round() as i64,
        )
    }

    fn frame(&self, c: &mut Canvas) {
        for k in 1..4 {
            let y = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            c.line(self.px(self.x.0, y), self.px(self.x.1, y), GRID, false);
        }
        c.line(
            self.px(self.x.0, self.y.0),
            self.px(self.x.1, self.y.0),
            AXIS,
            false,
        );
        c.line(
            self.px(self.x.0, self.y.0),
            self.px(self.x.0, self.y.1),
            AXIS,
            false,
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    let pad = 0.05 * (hi - lo).abs().max(1e-9);
    (lo - pad, hi + pad)
}

fn series(inp: &Input, key: &str) -> Vec<(f64, f64)> {
    inp.records
        .iter()
        .filter_map(|r| Some((number(r, "update")?, number(r, key)?)))
        .collect()
}

fn draw_series(c: &mut Canvas, p: &Panel, pts: &[(f64, f64)], color: Rgb<u8>) {
    for w in pts.windows(2) {
        c.line(p.px(w[0].0, w[0].1), p.px(w[1].0, w[1].1), color, false);
    }
    if let [only] = pts {
        let (x, y) = p.px(only.0, only.1);
        c.rect(x - 1, y - 1, x + 1, y + 1, color);
    }
}

fn line_panels(inputs: &[Input], keys: &[String], reference: Option<f64>) -> Result<Canvas> {
    let mut canvas = Canvas::new(keys.len() as u32);
    for (i, key) in keys.iter().enumerate() {
        let all: Vec<Vec<(f64, f64)>> = inputs.iter().map(|inp| series(inp, key)).collect();
        let xr = range(all.iter().flatten().map(|p| p.0));
        let mut yr = range(all.iter().flatten().map(|p| p.1));
        if let Some(r) = reference {
            yr = (yr.0.min(0.0), yr.1.max(r * 1.2));
        }
        let panel = Panel::new(i as u32, xr, padded(yr));
        panel.frame(&mut canvas);
        if let Some(r) = reference {
            canvas.line(
                panel.px(panel.x.0, r),
                panel.px(panel.x.1, r),
                REFERENCE,
                true,
            );
        }
        for (k, pts) in all.iter().enumerate() {
            draw_series(&mut canvas, &panel, pts, PALETTE[k % PALETTE.len()]);
        }
    }
    Ok(canvas)
}

/// Grouped bars: `groups[g][k]` is input `k`'s `(value, whisker)` in group `g`.
fn bars(groups: &[Vec<Option<(f64, f64)>>], y_max: f64) -> Canvas {
    let mut canvas = Canvas::new(1);
    let n_groups = groups.len().max(1) as f64;
    let panel = Panel::new(0, (0.0, n_groups), (0.0, y_max));
    panel.frame(&mut canvas);
    for (g, group) in groups.iter().enumerate() {
        let k = group.len().max(1) as f64;
        let width = 0.8 / k;
        for (j, bar) in group.iter().enumerate() {
            let Some((v, whisker)) = bar else { continue };
            let x0 = g as f64 + 0.1 + j as f64 * width;
            let x1 = x0 + width * 0.9;
            let (a, b) = (panel.px(x0, 0.0), panel.px(x1, *v));
            canvas.rect(a.0, b.1, b.0, a.1, PALETTE[j % PALETTE.len()]);
            if *whisker > 0.0 {
                let xm = 0.5 * (x0 + x1);
                canvas.line(
                    panel.px(xm, (v - whisker).max(0.0)),
                    panel.px(xm, v + whisker),
                    AXIS,
                    false,
                );
            }
        }
    }
    canvas
}

/// Renders `kind` from parsed inputs to PNG bytes.
pub fn render(inputs: &[Input], kind: PlotKind) -> Result<Vec<u8>> {
    if inputs.is_empty() || inputs.iter().all(|i| i.records.is_empty()) {
        return Err(Error::Invalid("no input records to plot".into()));
    }
    let canvas = match kind {
        PlotKind::LossCurves => {
            let keys: Vec<String> = LOSS_SERIES.iter().map(|k| format!("losses.{k}")).collect();
            let mut need = vec!["update"];
            need.extend(keys.iter().map(String::as_str));
            require(inputs, &need)?;
            line_panels(inputs, &keys, None)?
        }
        PlotKind::CollapseStd => {
            require(inputs, &["update", "collapse"])?;
            line_panels(inputs, &["collapse".to_string()], Some(COLLAPSE_REFERENCE))?
        }
        PlotKind::TrackingError => {
            require(inputs, &["velocity_error"])?;
            let groups: Vec<Vec<Option<(f64, f64)>>> = CommandClass::ALL
                .iter()
                .map(|c| {
                    inputs
                        .iter()
                        .map(|inp| {
                            let vals: Vec<f64> = inp
                                .records
                                .iter()
                                .filter_map(|r| number(r, &format!("velocity_error.{}", c.name())))
                                .collect();
                            (!vals.is_empty())
                                .then(|| (vals.iter().sum::<f64>() / vals.len() as f64, 0.0))
                        })
                        .collect()
                })
                .collect();
            let top = range(groups.iter().flatten().flatten().map(|b| b.0)).1;
            bars(&groups, (top * 1.1).max(1e-3))
        }
        PlotKind::SuccessBars => {
            require(inputs, &["scenario", "success_rate", "wilson_half_width"])?;
            let mut names: Vec<String> = Vec::new();
            for inp in inputs {
                for r in &inp.records {
                    if let Some(s) = lookup(r, "scenario").and_then(Value::as_str) {
                        if !names.iter().any(|n| n == s) {
                            names.push(s.to_string());
                        }
                    }
                }
            }
            let groups: Vec<Vec<Option<(f64, f64)>>> = names
                .iter()
                .map(|s| {
                    inputs
                        .iter()
                        .map(|inp| {
                            inp.records.iter().find_map(|r| {
                                (lookup(r, "scenario").and_then(Value::as_str) == Some(s))
                                    .then(|| {
                                        Some((
                                            number(r, "success_rate")?,
                                            number(r, "wilson_half_width")?,
                                        ))
                                    })
                                    .flatten()
                            })
                        })
                        .collect()
                })
                .collect();
            bars(&groups, 1.0)
        }
    };
    canvas.png()
}

/// Reads `files`, renders `kind` and writes `<out_dir>/<kind>.png`.
pub fn plot(files: &[PathBuf], kind: PlotKind, out_dir: &Path) -> Result<PathBuf> {
    if files.is_empty() {
        return Err(Error::Invalid("no input files to plot".into()));
    }
    let inputs = files
        .iter()
        .map(|f| parse_input(&f.display().to_string(), &fs::read_to_string(f)?))
        .collect::<Result<Vec<_>>>()?;
    let bytes = render(&inputs, kind)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{kind}.png"));
    fs::write(&path, bytes)?;
    Ok(path)
}
