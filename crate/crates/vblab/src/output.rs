//! Atomic file output: write to a temporary file in the target directory,
//! then rename over the destination.

use crate::experiment::{write_records_csv, ExperimentReport};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";

pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes `records.csv` (with per-fit timings) and `report.json` (without
/// them, so reports differ only in `wall_clock_seconds`).
pub fn write_report(report: &ExperimentReport, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
    let records = dir.join(RECORDS_FILE);
    write_atomic(&records, |w| write_records_csv(&report.records, w))?;
    let mut stripped = report.clone();
    stripped.records.iter_mut().for_each(|r| r.seconds = None);
    let json = report_json(&stripped);
    let path = dir.join(REPORT_FILE);
    write_atomic(&path, |w| w.write_all(json.as_bytes()))?;
    Ok((path, records))
}

pub fn report_json(report: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
