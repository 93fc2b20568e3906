//! Aggregation of evaluation records into a comparison table and charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kd_core::trainer::RunRecord;
use kd_core::CoreError;
use plotters::prelude::*;

use crate::error::{CliError, CliResult};
use crate::workspace::{write, Work};

/// One table row: a method at one transfer size and label budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub transfer_size: usize,
    pub label_budget: usize,
    pub runs: usize,
    pub mean_dice: f64,
}

impl ReportRow {
    fn series(&self) -> String {
        if self.transfer_size == 0 {
            self.method.clone()
        } else {
            format!("{} ({} transfer)", self.method, self.transfer_size)
        }
    }
}

fn collect_records(dir: &Path, out: &mut Vec<RunRecord>) -> CliResult<()> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(CoreError::io(dir, e).into()),
    };
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        if path.is_dir() {
            collect_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "record.json") {
            let record = RunRecord::load(&path)?;
            if record.pipeline == "evaluate" && record.notes.contains_key("method") {
                out.push(record);
            }
        }
    }
    Ok(())
}

fn note<T: std::str::FromStr>(r: &RunRecord, key: &str) -> CliResult<T> {
    r.notes
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Other(format!("evaluation record lacks a valid `{key}` note")))
}

/// Mean Dice per (method, transfer size, label budget). Records are keyed
/// and sorted first, so the result does not depend on their order.
pub fn aggregate(records: &[RunRecord]) -> CliResult<Vec<ReportRow>> {
    let mut cells: BTreeMap<(String, usize, usize), Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        let key = (
            note(r, "method")?,
            note(r, "transfer_size")?,
            note(r, "label_budget")?,
        );
        cells
            .entry(key)
            .or_default()
            .push((r.seed, note(r, "mean_dice")?));
    }
    Ok(cells
        .into_iter()
        .map(|((method, transfer_size, label_budget), mut v)| {
            v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            ReportRow {
                method,
                transfer_size,
                label_budget,
                runs: v.len(),
                mean_dice: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
            }
        })
        .collect())
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,transfer_size,label_budget,runs,mean_dice\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.method, r.transfer_size, r.label_budget, r.runs, r.mean_dice
        ));
    }
    out
}

fn chart_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Other(format!("chart rendering failed: {e}"))
}

/// Line chart of mean Dice against label budget, one line per series.
fn dice_vs_labels(rows: &[ReportRow], path: &Path) -> CliResult<()> {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry(r.series())
            .or_default()
            .push((r.label_budget, r.mean_dice));
    }
    let max_budget = rows.iter().map(|r| r.label_budget).max().unwrap_or(1);
    let (lo, hi) = dice_range(rows);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Dice vs number of labels", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0usize..max_budget + 1, lo..hi)
        .map_err(chart_err)?;
    chart
        .configure_mesh()
        .x_desc("labelled images")
        .y_desc("mean Dice")
        .draw()
        .map_err(chart_err)?;
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|p| p.0);
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(chart_err)?
            .label(name)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(chart_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(chart_err)?;
    root.present().map_err(chart_err)
}

/// Bar chart of mean Dice per series at the largest label budget.
fn dice_by_method(rows: &[ReportRow], path: &Path) -> CliResult<()> {
    let budget = rows.iter().map(|r| r.label_budget).max().unwrap_or(0);
    let bars: Vec<&ReportRow> = rows.iter().filter(|r| r.label_budget == budget).collect();
    let (lo, hi) = dice_range(rows);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let labels: Vec<String> = bars.iter().map(|r| r.series()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("Mean Dice with {budget} labels"),
            ("sans-serif", 20),
        )
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d((0..bars.len()).into_segmented(), lo..hi)
        .map_err(chart_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len().max(1))
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("mean Dice")
        .draw()
        .map_err(chart_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, r)| {
            let color = Palette99::pick(i).filled();
            let mut bar = Rectangle::new(
                [
                    (SegmentValue::Exact(i), lo),
                    (SegmentValue::Exact(i + 1), r.mean_dice),
                ],
                color,
            );
            bar.set_margin(0, 0, 8, 8);
            bar
        }))
        .map_err(chart_err)?;
    root.present().map_err(chart_err)
}

fn dice_range(rows: &[ReportRow]) -> (f64, f64) {
    let min = rows.iter().map(|r| r.mean_dice).fold(1.0, f64::min);
    ((min - 0.05).max(0.0), 1.0)
}

pub fn report(work: &Work, out: Option<PathBuf>) -> CliResult<()> {
    let mut records = Vec::new();
    collect_records(&work.students(), &mut records)?;
    if records.is_empty() {
        return Err(CliError::Missing {
            artifact: format!("evaluated runs under {}", work.students().display()),
            command: "evaluate",
        });
    }
    let rows = aggregate(&records)?;
    let dir = out.unwrap_or_else(|| work.report());
    write(&dir.join("summary.csv"), to_csv(&rows))?;
    dice_vs_labels(&rows, &dir.join("dice_vs_labels.svg"))?;
    dice_by_method(&rows, &dir.join("dice_by_method.svg"))?;
    print!("{}", to_csv(&rows));
    Ok(())
}
