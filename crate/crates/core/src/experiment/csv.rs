use std::fs;
use std::io;
use std::path::Path;

use crate::experiment::runner::{CurvePoint, LearningCurve};

pub const HEADER: &str = "steps,mean_return,stderr,trials";

/// CSV text of a curve. Floats use Rust's shortest round-trip formatting,
/// which never depends on locale.
pub fn curve_to_csv(curve: &LearningCurve) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in &curve.points {
        out.push_str(&format!("{},{:?},{:?},{}\n", p.steps, p.mean_return, p.stderr, p.trials));
    }
    out
}

pub fn write_csv(curve: &LearningCurve, path: &Path) -> io::Result<()> {
    fs::write(path, curve_to_csv(curve))
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn parse_csv(text: &str) -> Result<LearningCurve, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        other => return Err(format!("bad header {other:?}")),
    }
    let mut points = Vec::new();
    for (k, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(format!("row {}: expected 4 columns", k + 1));
        }
        let bad = |c: &str| format!("row {}: bad number `{c}`", k + 1);
        points.push(CurvePoint {
            steps: cols[0].parse().map_err(|_| bad(cols[0]))?,
            mean_return: cols[1].parse().map_err(|_| bad(cols[1]))?,
            stderr: cols[2].parse().map_err(|_| bad(cols[2]))?,
            trials: cols[3].parse().map_err(|_| bad(cols[3]))?,
        });
    }
    Ok(LearningCurve { points })
}

pub fn read_csv(path: &Path) -> io::Result<LearningCurve> {
    let text = fs::read_to_string(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_csv(&text).map_err(|m| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display())))
}
