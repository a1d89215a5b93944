//! Versioned CSV emission. Every row starts with the schema tag and the
//! provenance columns `preset, model, seed, git`.

use std::fs::{self, File};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use crate::error::CliError;

pub const PROVENANCE: [&str; 5] = ["schema", "preset", "model", "seed", "git"];

/// `git describe` of the source tree this binary was built from, or
/// `unknown` outside a checkout.
pub fn git_describe() -> &'static str {
    static DESCRIBE: OnceLock<String> = OnceLock::new();
    DESCRIBE.get_or_init(|| {
        Command::new("git")
            .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".into())
    })
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub preset: String,
    pub model: String,
    pub seed: u64,
}

pub struct TableWriter {
    schema: &'static str,
    inner: csv::Writer<File>,
}

impl TableWriter {
    /// `schema` names the table and its version, e.g. `episode-steps/1`.
    pub fn create(path: &Path, schema: &'static str, columns: &[&str]) -> Result<Self, CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(PROVENANCE.iter().chain(columns))?;
        Ok(Self { schema, inner })
    }

    pub fn row(&mut self, prov: &Provenance, values: &[String]) -> Result<(), CliError> {
        let head = [
            self.schema.to_string(),
            prov.preset.clone(),
            prov.model.clone(),
            prov.seed.to_string(),
            git_describe().to_string(),
        ];
        self.inner.write_record(head.iter().chain(values))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Full-precision float formatting so CSV values round-trip.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_carry_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut w = TableWriter::create(&p, "test/1", &["value"]).unwrap();
        let prov = Provenance {
            preset: "rscp-tv".into(),
            model: "bilinear".into(),
            seed: 4,
        };
        w.row(&prov, &[num(0.25)]).unwrap();
        w.finish().unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "schema,preset,model,seed,git,value");
        assert!(lines[1].starts_with("test/1,rscp-tv,bilinear,4,"));
        assert!(lines[1].ends_with(",2.5e-1"));
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e7] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn population_statistics() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
