//! Report rendering.
//!
//! The machine table is comma-separated with header
//! `split,distance,condition,detector,defense,attack,detected,total`, one row
//! per cell. The human grid has one row per condition and attack, and one
//! column per split and distance; a cell lists `detected/total` for each
//! detector joined by ` ; `, or `n/a` when there are no frames.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{CellCounts, CellKey, DetectionRateReport};
use crate::data::{Distance, Split};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::image::Image;

pub const CSV_HEADER: &str = "split,distance,condition,detector,defense,attack,detected,total";
pub const TABLE_FILE: &str = "rates.csv";
pub const GRID_FILE: &str = "rates.txt";

fn check_field(s: &str) -> Result<&str> {
    if s.contains([',', '\n', '"']) {
        return Err(Error::InvalidConfig(format!("report field {s:?} contains a separator")));
    }
    Ok(s)
}

pub fn to_csv(report: &DetectionRateReport) -> Result<String> {
    cells_to_csv(&report.cells())
}

fn cells_to_csv(cells: &BTreeMap<CellKey, CellCounts>) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (k, c) in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            k.split.as_str(),
            k.distance.as_str(),
            check_field(&k.condition)?,
            check_field(&k.detector)?,
            check_field(&k.defense)?,
            check_field(&k.attack)?,
            c.detected,
            c.total
        )
        .expect("write to string");
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<BTreeMap<CellKey, CellCounts>> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        what: format!("report table line {line}"),
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(parse_err(1, "missing header".into())),
    }
    let mut cells = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(i + 1, format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(i + 1, e.to_string()));
        let key = CellKey {
            split: f[0].parse()?,
            distance: f[1].parse()?,
            condition: f[2].into(),
            detector: f[3].into(),
            defense: f[4].into(),
            attack: f[5].into(),
        };
        let counts = CellCounts {
            detected: num(f[6])?,
            total: num(f[7])?,
        };
        if counts.detected > counts.total {
            return Err(parse_err(i + 1, "detected exceeds total".into()));
        }
        cells.insert(key, counts);
    }
    Ok(cells)
}

/// Human-readable grids, one per defense.
pub fn render_grid(report: &DetectionRateReport) -> String {
    let cells = report.cells();
    let mut detectors: Vec<String> = Vec::new();
    for r in &report.records {
        if !detectors.contains(&r.key.detector) {
            detectors.push(r.key.detector.clone());
        }
    }
    let defenses: BTreeSet<&str> = cells.keys().map(|k| k.defense.as_str()).collect();
    let rows: BTreeSet<(&str, &str)> = cells.keys().map(|k| (k.condition.as_str(), k.attack.as_str())).collect();
    let columns: Vec<(Split, Distance)> = Split::ALL
        .into_iter()
        .flat_map(|s| Distance::ALL.into_iter().map(move |d| (s, d)))
        .collect();

    let mut out = String::new();
    for defense in defenses {
        writeln!(out, "defense: {defense}; detectors: {}", detectors.join(" ; ")).expect("write to string");
        let mut header = vec!["condition".to_string(), "attack".to_string()];
        header.extend(columns.iter().map(|(s, d)| format!("{}/{}", s.as_str(), d.as_str())));
        let mut table = vec![header];
        for &(condition, attack) in &rows {
            let mut line = vec![condition.to_string(), attack.to_string()];
            for &(split, distance) in &columns {
                let parts: Vec<String> = detectors
                    .iter()
                    .map(|det| {
                        let key = CellKey {
                            split,
                            distance,
                            condition: condition.into(),
                            detector: det.clone(),
                            defense: defense.into(),
                            attack: attack.into(),
                        };
                        match cells.get(&key) {
                            Some(c) if c.total > 0 => format!("{}/{}", c.detected, c.total),
                            _ => "n/a".into(),
                        }
                    })
                    .collect();
                line.push(if parts.iter().all(|p| p == "n/a") {
                    "n/a".into()
                } else {
                    parts.join(" ; ")
                });
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        for row in &table {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            writeln!(out, "| {} |", cells.join(" | ")).expect("write to string");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct RenderedReport {
    pub table: PathBuf,
    pub grid: PathBuf,
}

/// Writes the machine table and the human grid into `dir`.
pub fn render_report(report: &DetectionRateReport, dir: impl AsRef<Path>) -> Result<RenderedReport> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join(TABLE_FILE);
    std::fs::write(&table, to_csv(report)?).map_err(|e| Error::io(&table, e))?;
    let grid = dir.join(GRID_FILE);
    std::fs::write(&grid, render_grid(report)).map_err(|e| Error::io(&grid, e))?;
    Ok(RenderedReport { table, grid })
}

/// Draws 2-pixel rectangle outlines.
pub fn draw_boxes(image: &Image, boxes: &[(Rect, [f64; 3])]) -> Image {
    let mut out = image.clone();
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut put = |x: i64, y: i64, color: &[f64; 3]| {
        if x >= 0 && y >= 0 && x < w && y < h {
            for (c, v) in color.iter().enumerate().take(out.channels()) {
                out.set(x as usize, y as usize, c, *v);
            }
        }
    };
    for (r, color) in boxes {
        let (x0, y0) = (r.x_min.round() as i64, r.y_min.round() as i64);
        let (x1, y1) = (r.x_max.round() as i64 - 1, r.y_max.round() as i64 - 1);
        for t in 0..2 {
            for x in x0..=x1 {
                put(x, y0 + t, color);
                put(x, y1 - t, color);
            }
            for y in y0..=y1 {
                put(x0 + t, y, color);
                put(x1 - t, y, color);
            }
        }
    }
    out
}
