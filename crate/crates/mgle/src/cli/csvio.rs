//! CSV artifacts: header row, fixed-point `t` column, complex values as
//! paired re_*/im_* columns, UTF-8 with LF line endings.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{MgleError, Result};
use crate::volterra::{Series, TimeGrid, TwoTimeField};

fn format_t(t: f64) -> String {
    format!("{t:.9}")
}

/// Write one complex series under the given value-column stem.
pub fn write_series(path: &Path, stem: &str, series: &Series) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("t,re_{stem},im_{stem}\n"));
    for (k, v) in series.values.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", format_t(series.grid.node(k)), v.re, v.im));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write several complex series sharing one grid, column stems paired with
/// the series.
pub fn write_series_table(path: &Path, columns: &[(&str, &Series)]) -> Result<()> {
    let grid = columns
        .first()
        .map(|(_, s)| s.grid)
        .expect("at least one column");
    let mut header = String::from("t");
    for (stem, series) in columns {
        assert_eq!(series.grid.count, grid.count, "column grids must match");
        header.push_str(&format!(",re_{stem},im_{stem}"));
    }
    let mut out = header;
    out.push('\n');
    for k in 0..grid.count {
        out.push_str(&format_t(grid.node(k)));
        for (_, series) in columns {
            let v = series.values[k];
            out.push_str(&format!(",{},{}", v.re, v.im));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a series written by `write_series`: a header plus (t, re, im) rows.
pub fn read_series(path: &Path) -> Result<Series> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| MgleError::MissingArtifact(path.display().to_string()))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if !line.starts_with('t') {
                return Err(MgleError::Config(format!(
                    "{}: expected a header starting with 't'",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(MgleError::Config(format!(
                "{}:{}: expected t,re,im columns",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| {
                MgleError::Config(format!("{}:{}: bad number '{s}': {e}", path.display(), lineno + 1))
            })
        };
        times.push(parse(fields[0])?);
        values.push(Complex64::new(parse(fields[1])?, parse(fields[2])?));
    }
    if times.len() < 2 {
        return Err(MgleError::Config(format!(
            "{}: need at least two rows",
            path.display()
        )));
    }
    let dt = times[1] - times[0];
    for pair in times.windows(2) {
        if ((pair[1] - pair[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(MgleError::Config(format!(
                "{}: time column is not uniformly spaced",
                path.display()
            )));
        }
    }
    if dt <= 0.0 {
        return Err(MgleError::Config(format!(
            "{}: time column must increase",
            path.display()
        )));
    }
    let grid = TimeGrid::new(times[0], dt, times.len());
    Ok(Series::new(grid, values))
}

/// Write per-node force vectors: one row per grid node, one re/im column
/// pair per coordinate (or per reported sample).
pub fn write_frames(
    path: &Path,
    grid: TimeGrid,
    nodes: &[usize],
    frames: &[Vec<Complex64>],
    stem: &str,
) -> Result<()> {
    let width = frames.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for j in 0..width {
        out.push_str(&format!(",re_{stem}{j},im_{stem}{j}"));
    }
    out.push('\n');
    for (row, &node) in nodes.iter().enumerate() {
        out.push_str(&format_t(grid.node(node)));
        for v in &frames[row] {
            out.push_str(&format!(",{},{}", v.re, v.im));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a two-time field as (t, s, re, im) rows over the triangle.
pub fn write_two_time(path: &Path, stem: &str, field: &TwoTimeField) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "t,s,re_{stem},im_{stem}")?;
    let grid = field.grid;
    for k in 0..grid.count {
        for j in 0..=k {
            let v = field.get(k, j);
            writeln!(
                file,
                "{},{},{},{}",
                format_t(grid.node(k)),
                format_t(grid.node(j)),
                v.re,
                v.im
            )?;
        }
    }
    file.flush()?;
    Ok(())
}
