//! `fedsim plot`: render run summaries and sweeps as standalone SVG files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::failure::{CliResult, Failure};
use crate::plot;

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows: Vec<Vec<String>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    Ok(Csv { header, rows })
}

fn columns(csv: &Csv, wanted: &[&str]) -> Result<Vec<usize>, Failure> {
    let missing: Vec<&str> = wanted
        .iter()
        .copied()
        .filter(|w| !csv.header.iter().any(|h| h == w))
        .collect();
    if !missing.is_empty() {
        return Err(Failure::invalid(format!(
            "csv is missing required column(s): {}",
            missing.join(", ")
        )));
    }
    Ok(wanted
        .iter()
        .map(|w| csv.header.iter().position(|h| h == w).unwrap())
        .collect())
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize, what: &str) -> Result<T, Failure> {
    row.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Failure::invalid(format!("bad {what} value in csv row {row:?}")))
}

pub fn execute(csv_path: &Path, kind: &str, out: &Path) -> CliResult {
    let csv = read_csv(csv_path)?;
    if csv.rows.is_empty() {
        return Err(Failure::invalid("csv has no data rows"));
    }
    let svg = match kind {
        "loss-curves" => {
            let idx = columns(&csv, &["rule", "seed", "round", "objective_aggregate"])?;
            // rule -> round -> (sum over seeds, count)
            let mut series: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
            for row in &csv.rows {
                let rule = row
                    .get(idx[0])
                    .ok_or_else(|| Failure::invalid("short csv row"))?
                    .clone();
                let round: usize = parse_field(row, idx[2], "round")?;
                let value: f64 = parse_field(row, idx[3], "objective_aggregate")?;
                let slot = series
                    .entry(rule)
                    .or_default()
                    .entry(round)
                    .or_insert((0.0, 0));
                slot.0 += value;
                slot.1 += 1;
            }
            plot::loss_curves(
                &series,
                "objective per communication round (mean across seeds)",
            )
        }
        "skew-scatter" => {
            let idx = columns(&csv, &["skew", "diff"])?;
            let points: Vec<(f64, f64)> = csv
                .rows
                .iter()
                .map(|row| {
                    Ok((
                        parse_field(row, idx[0], "skew")?,
                        parse_field(row, idx[1], "diff")?,
                    ))
                })
                .collect::<Result<_, Failure>>()?;
            plot::skew_scatter(&points, "final loss difference vs participation skew")
        }
        other => {
            return Err(Failure::invalid(format!(
                "unknown plot kind {other:?}; expected loss-curves or skew-scatter"
            )))
        }
    };
    std::fs::write(out, svg)?;
    println!("wrote {}", out.display());
    Ok(0)
}
