//! Run directories: CSV artifacts and the plain-text manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfsc_core::irl::{IdentifiedDrift, RankReport};
use mfsc_core::linalg::Vector;
use mfsc_core::Mat;
use sha2::{Digest, Sha256};

use crate::pipeline::{ConsistencyPoint, TableRow, TABLE_COLUMNS};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory of one run; remembers every file written so the
/// manifest can list them with their hashes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        std::fs::write(self.root.join(name), contents)?;
        let hash = sha256_hex(contents.as_bytes());
        match self.files.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = hash,
            None => self.files.push((name.to_string(), hash)),
        }
        Ok(())
    }

    /// Writes `manifest.txt`: tool version, command, seed, the hash of the
    /// effective configuration and one `file = sha256` line per artifact.
    /// Nothing time-dependent is recorded, so identical runs produce
    /// identical manifests.
    pub fn write_manifest(&mut self, command: &str, seed: u64, config_text: &str) -> std::io::Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "tool = mfsc {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "core = mfsc-core {}", mfsc_core::VERSION);
        let _ = writeln!(out, "command = {command}");
        let _ = writeln!(out, "seed = {seed}");
        let _ = writeln!(out, "config_sha256 = {}", sha256_hex(config_text.as_bytes()));
        for (name, hash) in &self.files {
            let _ = writeln!(out, "file {name} = {hash}");
        }
        std::fs::write(self.root.join("manifest.txt"), out)
    }
}

fn csv_string<I>(header: &[String], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is utf-8")
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Long-format matrices: `name,row,col,value` with 0-based indices.
pub fn matrices_csv(entries: &[(&str, &Mat)]) -> String {
    let rows = entries.iter().flat_map(|(name, m)| {
        (0..m.nrows()).flat_map(move |r| {
            (0..m.ncols()).map(move |c| vec![name.to_string(), r.to_string(), c.to_string(), num(m[(r, c)])])
        })
    });
    csv_string(&header(&["name", "row", "col", "value"]), rows)
}

/// Time series on a uniform grid: `t,<prefix>1..<prefix>n` per named
/// series, all series sharing the grid.
pub fn series_csv(dt: f64, series: &[(&str, &[Vector])]) -> String {
    let mut head = vec!["t".to_string()];
    for (prefix, values) in series {
        let width = values.first().map(|v| v.len()).unwrap_or(0);
        head.extend((1..=width).map(|i| format!("{prefix}{i}")));
    }
    let len = series.iter().map(|(_, v)| v.len()).min().unwrap_or(0);
    let rows = (0..len).map(|i| {
        let mut row = vec![format!("{}", i as f64 * dt)];
        for (_, values) in series {
            row.extend(values[i].iter().map(|e| num(*e)));
        }
        row
    });
    csv_string(&head, rows)
}

/// `k,P,L_p,K_p,Lambda,Pi,L_pi,K_pi`.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut head = vec!["k".to_string()];
    head.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    let body = rows.iter().map(|r| {
        let mut row = vec![r.k.to_string()];
        row.extend(r.errors.iter().map(|e| num(*e)));
        row
    });
    csv_string(&head, body)
}

/// `condition,rank,required,satisfied`.
pub fn rank_csv(r: &RankReport) -> String {
    let rows = [
        ("stochastic", r.stochastic_rank, r.stochastic_required, r.stochastic_ok()),
        ("mean_field", r.mean_field_rank, r.mean_field_required, r.mean_field_ok()),
    ]
    .into_iter()
    .map(|(name, rank, required, ok)| vec![name.into(), rank.to_string(), required.to_string(), ok.to_string()]);
    csv_string(&header(&["condition", "rank", "required", "satisfied"]), rows)
}

pub fn identified_csv(drift: &IdentifiedDrift) -> String {
    matrices_csv(&[("A", &drift.a), ("B", &drift.b), ("G", &drift.g)])
}

/// `agents,seed,rms_gap`.
pub fn consistency_csv(points: &[ConsistencyPoint]) -> String {
    let rows = points.iter().map(|p| vec![p.agents.to_string(), p.seed.to_string(), num(p.rms_gap)]);
    csv_string(&header(&["agents", "seed", "rms_gap"]), rows)
}

/// Outcome of one reproduction check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance condition, e.g. `<= 0.05`.
    pub condition: String,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, condition: format!("<= {limit:e}"), pass: value <= limit }
    }

    pub fn flag(name: &str, pass: bool, condition: &str) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(pass)), condition: condition.into(), pass }
    }
}

/// `check,value,condition,pass`.
pub fn checks_csv(checks: &[Check]) -> String {
    let rows = checks.iter().map(|c| vec![c.name.clone(), num(c.value), c.condition.clone(), c.pass.to_string()]);
    csv_string(&header(&["check", "value", "condition", "pass"]), rows)
}

/// `key,value` pairs.
pub fn key_values_csv(entries: &[(&str, String)]) -> String {
    let rows = entries.iter().map(|(k, v)| vec![k.to_string(), v.clone()]);
    csv_string(&header(&["key", "value"]), rows)
}
