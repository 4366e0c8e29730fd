//! Flat-file writers and readers. Floats are printed with 17 significant
//! digits so that a value round-trips exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use policy_transport::measures::{make_grid, DiscreteMeasure};
use policy_transport::sinkhorn::Coupling;
use policy_transport::trace::Diagnostics;

use crate::CliError;

pub const TRACE_HEADER: &str = "step,time,free_energy,entropy,expected_reward,tv_to_gibbs,w2eps_to_gibbs,residual";
pub const MEASURE_HEADER: &str = "center,weight";
pub const INTERMEDIATE_HEADER: &str = "step,time,center,weight";
pub const COMPARE_HEADER: &str = "a,b,tv,sinkhorn_divergence";
pub const PLAN_HEADER: &str = "source_center,target_center,mass";

pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `header` followed by one comma-joined line per row.
pub fn write_rows<I>(path: &Path, header: &str, rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = create(path)?;
    writeln!(w, "{header}").map_err(|e| CliError::io(path, e))?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(|e| CliError::io(path, e))?;
    }
    finish(path, w)
}

pub fn write_trace(path: &Path, rows: &[Diagnostics]) -> Result<(), CliError> {
    write_rows(
        path,
        TRACE_HEADER,
        rows.iter().map(|d| {
            vec![
                d.step.to_string(),
                fmt(d.time),
                fmt(d.free_energy),
                fmt(d.entropy),
                fmt(d.expected_reward),
                fmt(d.tv_to_gibbs),
                fmt(d.w2eps_to_gibbs),
                fmt(d.residual),
            ]
        }),
    )
}

pub fn write_measure(path: &Path, pi: &DiscreteMeasure) -> Result<(), CliError> {
    let centers = pi.grid().centers();
    write_rows(path, MEASURE_HEADER, centers.iter().zip(pi.weights()).map(|(c, w)| vec![fmt(*c), fmt(*w)]))
}

pub fn write_intermediate(path: &Path, rows: &[Diagnostics], measures: &[DiscreteMeasure]) -> Result<(), CliError> {
    let lines = rows.iter().zip(measures).flat_map(|(d, pi)| {
        let (step, time) = (d.step.to_string(), fmt(d.time));
        pi.grid()
            .centers()
            .iter()
            .zip(pi.weights())
            .map(move |(c, w)| vec![step.clone(), time.clone(), fmt(*c), fmt(*w)])
            .collect::<Vec<_>>()
    });
    write_rows(path, INTERMEDIATE_HEADER, lines)
}

pub fn write_plan(path: &Path, plan: &Coupling) -> Result<(), CliError> {
    let (xs, ys) = (plan.source().centers(), plan.target().centers());
    let mut rows = Vec::with_capacity(plan.rows() * plan.cols());
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            rows.push(vec![fmt(*x), fmt(*y), fmt(plan.get(i, j))]);
        }
    }
    write_rows(path, PLAN_HEADER, rows)
}

/// Reads a `center,weight` table on a uniform grid. Weights are normalized;
/// the grid is reconstructed from the centers.
pub fn read_measure(path: &Path) -> Result<DiscreteMeasure, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["center", "weight"] {
        return Err(bad(format!("expected header \"{MEASURE_HEADER}\"")));
    }
    let mut centers = Vec::new();
    let mut weights = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("row {}: {e}", k + 1)));
        centers.push(parse(&rec[0])?);
        weights.push(parse(&rec[1])?);
    }
    if centers.len() < 2 {
        return Err(bad("need at least two cells".into()));
    }
    let h = centers[1] - centers[0];
    if !(h > 0.0) {
        return Err(bad("centers must be increasing".into()));
    }
    for (k, pair) in centers.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - h).abs() > 1e-9 * h.max(1.0) {
            return Err(bad(format!("centers are not uniformly spaced at row {}", k + 2)));
        }
    }
    let n = centers.len();
    let lo = centers[0] - 0.5 * h;
    let hi = centers[n - 1] + 0.5 * h;
    let grid = make_grid(lo, hi, n).map_err(|e| bad(e.to_string()))?;
    DiscreteMeasure::from_unnormalized(grid, weights).map_err(|e| bad(e.to_string()))
}
