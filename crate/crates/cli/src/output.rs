//! Metrics CSV and run-manifest writers. Files are written to a temp path in
//! the same directory and renamed into place, so readers never see a partial
//! file.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use gfl_core::RoundMetrics;

pub const CSV_HEADER: &str = "iteration,msd_centroid,msd_avg,disagreement,test_error,epsilon";

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.iteration,
            fmt_opt(row.msd_centroid),
            fmt_opt(row.msd_avg),
            row.disagreement,
            fmt_opt(row.test_error),
            fmt_opt(row.epsilon),
        );
    }
    out
}

pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

/// One line per finished run: file, scheme, sweep overrides, seed.
pub struct Manifest {
    lines: Vec<String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self { lines: vec!["file\tscheme\toverrides\tseed".to_string()] }
    }

    pub fn record(&mut self, file: &Path, scheme: &str, overrides: &[(String, String)], seed: u64) {
        let overrides = if overrides.is_empty() {
            "-".to_string()
        } else {
            overrides
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        self.lines
            .push(format!("{}\t{scheme}\t{overrides}\t{seed}", file.display()));
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        let path = dir.join("manifest.tsv");
        let mut body = self.lines.join("\n");
        body.push('\n');
        write_atomic(&path, &body)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: u64) -> RoundMetrics {
        RoundMetrics {
            iteration,
            msd_centroid: Some(0.125),
            msd_avg: Some(0.25),
            disagreement: 0.125,
            test_error: None,
            epsilon: Some(1.5),
        }
    }

    #[test]
    fn csv_shape_and_empty_fields() {
        let text = metrics_csv(&[row(1), row(2)]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.125,0.25,0.125,,1.5");
        assert_eq!(lines.next().unwrap(), "2,0.125,0.25,0.125,,1.5");
        assert!(lines.next().is_none());
    }

    #[test]
    fn floats_round_trip() {
        let mut r = row(7);
        r.msd_centroid = Some(0.1 + 0.2);
        let text = metrics_csv(&[r]);
        let field = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(field.parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, "one\n").unwrap();
        write_atomic(&path, "two\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two\n");
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn manifest_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new();
        m.record(Path::new("out/run.csv"), "none", &[], 3);
        m.record(
            Path::new("out/run2.csv"),
            "graph_homomorphic",
            &[("train.mu".into(), "0.5".into())],
            4,
        );
        let path = m.write(dir.path()).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "file\tscheme\toverrides\tseed");
        assert_eq!(lines[1], "out/run.csv\tnone\t-\t3");
        assert_eq!(lines[2], "out/run2.csv\tgraph_homomorphic\ttrain.mu=0.5\t4");
    }
}
