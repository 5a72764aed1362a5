//! `report`: a consolidated table of a run's metrics plus two plot-ready
//! series written next to them.

use std::fs;
use std::path::Path;

use crate::failure::{config_error, runtime_error, Failure};
use crate::run::{METRICS_FILE, PRIVACY_FILE};

pub const LOSS_SERIES: &str = "loss_vs_step.csv";
pub const EPSILON_SERIES: &str = "epsilon_vs_step.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: u64,
    pub fields: Vec<String>,
}

pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Row>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| runtime_error(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            let fields: Vec<String> = l.split(',').map(str::to_string).collect();
            if fields.len() != header.len() {
                return Err(runtime_error(format!("malformed metrics row {l:?}")));
            }
            let step = fields[0].parse().map_err(|_| runtime_error(format!("bad step in {l:?}")))?;
            Ok(Row { step, fields })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize, Failure> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| runtime_error(format!("metrics file has no {name} column")))
}

pub fn report(run: &Path) -> Result<(), Failure> {
    let metrics = run.join(METRICS_FILE);
    if !metrics.is_file() {
        return Err(config_error(format!("{} holds no run (no {METRICS_FILE})", run.display())));
    }
    let (header, rows) = read_metrics(&metrics)?;
    if rows.is_empty() {
        return Err(runtime_error(format!("{} has no completed steps", metrics.display())));
    }
    let loss = column(&header, "loss_mean")?;
    let eps = column(&header, "epsilon")?;

    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r.fields[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |fields: &[String]| {
        fields
            .iter()
            .zip(&widths)
            .map(|(f, w)| format!("{f:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", fmt_row(&header));
    for r in &rows {
        println!("{}", fmt_row(&r.fields));
    }

    let series = |col: usize, name: &str| -> String {
        let mut s = format!("step,{name}\n");
        for r in &rows {
            s += &format!("{},{}\n", r.step, r.fields[col]);
        }
        s
    };
    let write = |file: &str, text: String| {
        fs::write(run.join(file), text).map_err(|e| runtime_error(format!("cannot write {file}: {e}")))
    };
    write(LOSS_SERIES, series(loss, "loss_mean"))?;
    write(EPSILON_SERIES, series(eps, "epsilon"))?;

    let statement = run.join(PRIVACY_FILE);
    if let Ok(text) = fs::read_to_string(&statement) {
        println!();
        print!("{text}");
    }
    Ok(())
}
