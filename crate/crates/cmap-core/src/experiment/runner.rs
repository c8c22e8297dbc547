//! Run-directory plumbing shared by every subcommand.
//!
//! Each invocation gets its own directory under the runs root, stamped with
//! the resolved config before any work starts. Artifacts are written through
//! the context so the closing `run_record.json` can list them. Artifact
//! bytes depend only on the config and seed; wall-clock fields live solely
//! in the run record, which is the one file excluded from reproducibility
//! comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{invalid, Result};

/// Environment variable overriding the default `runs` root.
pub const RUNS_DIR_ENV: &str = "CMAP_LAB_RUNS_DIR";

/// Root precedence: explicit flag, then the environment override, then a
/// local `runs` directory.
pub fn resolve_runs_root(flag: Option<&Path>, env_value: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(v) = env_value {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("runs")
}

/// 64-bit FNV-1a; stable across platforms, used to fingerprint configs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes with sorted keys and a trailing newline; the canonical form
/// used for every JSON artifact and for config fingerprints.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// One run's output directory and artifact ledger.
pub struct RunContext {
    pub run_id: String,
    pub dir: PathBuf,
    kind: String,
    files: Vec<String>,
    started: Instant,
}

impl RunContext {
    /// Creates `root/<kind>-<unix-seconds>-<config-hash>/` and stamps the
    /// resolved config into it. A suffix disambiguates same-second runs.
    pub fn create(kind: &str, root: &Path, resolved: &Value) -> Result<Self> {
        fs::create_dir_all(root)?;
        let config_text = canonical_json(resolved)?;
        let hash = fnv1a64(config_text.as_bytes());
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_err(|_| invalid("system clock is before the epoch"))?
            .as_secs();
        let base = format!("{kind}-{secs}-{:08x}", hash as u32);
        let mut run_id = base.clone();
        let mut dir = root.join(&run_id);
        let mut attempt = 1u32;
        while let Err(e) = fs::create_dir(&dir) {
            if e.kind() != std::io::ErrorKind::AlreadyExists || attempt > 1000 {
                return Err(e.into());
            }
            attempt += 1;
            run_id = format!("{base}-{attempt}");
            dir = root.join(&run_id);
        }
        let mut ctx = Self {
            run_id,
            dir,
            kind: kind.to_string(),
            files: Vec::new(),
            started: Instant::now(),
        };
        ctx.write_text("config.json", &config_text)?;
        Ok(ctx)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.files.push(name.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = canonical_json(value)?;
        self.write_text(name, &text)
    }

    pub fn write_csv(&mut self, name: &str, csv: &Csv) -> Result<PathBuf> {
        self.write_text(name, &csv.render())
    }

    /// Registers an artifact produced outside `write_*` (e.g. a dataset
    /// directory) so the run record stays complete.
    pub fn note_artifact(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    /// Writes `run_record.json` and returns the run directory. The record
    /// carries timing, so it is deliberately not byte-reproducible.
    pub fn finalize(self) -> Result<PathBuf> {
        let record = serde_json::json!({
            "run_id": self.run_id,
            "kind": self.kind,
            "duration_seconds": self.started.elapsed().as_secs_f64(),
            "artifacts": self.files,
        });
        let text = canonical_json(&record)?;
        fs::write(self.dir.join("run_record.json"), text)?;
        Ok(self.dir)
    }
}

// ---------------------------------------------------------------------------
// CSV assembly
// ---------------------------------------------------------------------------

/// In-memory CSV with RFC-style quoting. Floats render through `Display`,
/// whose shortest round-trip form keeps artifacts byte-stable.
pub struct Csv {
    lines: Vec<String>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            lines: vec![join_fields(header.iter().map(|s| s.to_string()))],
        }
    }

    pub fn push_row(&mut self, fields: &[CsvField]) {
        self.lines
            .push(join_fields(fields.iter().map(|f| f.render())));
    }

    pub fn row_count(&self) -> usize {
        self.lines.len() - 1
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

pub enum CsvField {
    Str(String),
    Int(i64),
    Uint(u64),
    Float(f64),
    Bool(bool),
}

impl CsvField {
    fn render(&self) -> String {
        match self {
            CsvField::Str(s) => s.clone(),
            CsvField::Int(v) => v.to_string(),
            CsvField::Uint(v) => v.to_string(),
            CsvField::Float(v) => format_float(*v),
            CsvField::Bool(v) => v.to_string(),
        }
    }
}

impl From<&str> for CsvField {
    fn from(s: &str) -> Self {
        CsvField::Str(s.to_string())
    }
}

impl From<String> for CsvField {
    fn from(s: String) -> Self {
        CsvField::Str(s)
    }
}

impl From<f64> for CsvField {
    fn from(v: f64) -> Self {
        CsvField::Float(v)
    }
}

impl From<usize> for CsvField {
    fn from(v: usize) -> Self {
        CsvField::Uint(v as u64)
    }
}

impl From<bool> for CsvField {
    fn from(v: bool) -> Self {
        CsvField::Bool(v)
    }
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

fn join_fields(fields: impl Iterator<Item = String>) -> String {
    let mut line = String::new();
    for (i, field) in fields.enumerate() {
        if i > 0 {
            line.push(',');
        }
        if field.contains(',') || field.contains('"') || field.contains('\n') {
            write!(line, "\"{}\"", field.replace('"', "\"\"")).expect("string write");
        } else {
            line.push_str(&field);
        }
    }
    line
}

// ---------------------------------------------------------------------------
// Deterministic parallelism
// ---------------------------------------------------------------------------

/// Maps `f` over `0..n`, optionally on a scoped thread pool. Output order
/// and content are independent of the worker count; randomness must come
/// from per-index keys, never shared state.
pub fn par_map<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.min(n))
        .build()
        .map_err(|e| invalid(format!("worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        let mut csv = Csv::new(&["a", "b"]);
        csv.push_row(&["plain".into(), CsvField::Float(0.5)]);
        csv.push_row(&["needs,quote".into(), r#"has"quote"#.into()]);
        let text = csv.render();
        assert_eq!(
            text,
            "a,b\nplain,0.5\n\"needs,quote\",\"has\"\"quote\"\n"
        );
        assert_eq!(csv.row_count(), 2);
    }

    #[test]
    fn float_rendering_round_trips() {
        for v in [0.1, 1.0 / 3.0, 5e-4, 1e300, -0.0, 123456789.123456] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_float(f64::NAN), "nan");
    }

    #[test]
    fn runs_root_precedence() {
        let flag = PathBuf::from("/tmp/explicit");
        assert_eq!(resolve_runs_root(Some(&flag), Some("/tmp/env")), flag);
        assert_eq!(
            resolve_runs_root(None, Some("/tmp/env")),
            PathBuf::from("/tmp/env")
        );
        assert_eq!(resolve_runs_root(None, Some("")), PathBuf::from("runs"));
        assert_eq!(resolve_runs_root(None, None), PathBuf::from("runs"));
    }

    #[test]
    fn run_context_stamps_config_and_record() {
        let tmp = tempfile::tempdir().unwrap();
        let resolved = serde_json::json!({"seed": 7});
        let mut ctx = RunContext::create("eval", tmp.path(), &resolved).unwrap();
        assert!(ctx.run_id.starts_with("eval-"));
        ctx.write_text("out.csv", "a\n1\n").unwrap();
        let dir = ctx.finalize().unwrap();
        let config: Value =
            serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(config, resolved);
        let record: Value =
            serde_json::from_str(&fs::read_to_string(dir.join("run_record.json")).unwrap())
                .unwrap();
        assert_eq!(record["kind"], "eval");
        let artifacts = record["artifacts"].as_array().unwrap();
        assert_eq!(artifacts.len(), 2);
        assert_eq!(artifacts[0], "config.json");
        assert_eq!(artifacts[1], "out.csv");
    }

    #[test]
    fn same_second_runs_get_distinct_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let resolved = serde_json::json!({"seed": 7});
        let a = RunContext::create("eval", tmp.path(), &resolved).unwrap();
        let b = RunContext::create("eval", tmp.path(), &resolved).unwrap();
        assert_ne!(a.dir, b.dir);
    }

    #[test]
    fn par_map_is_order_stable_and_propagates_errors() {
        let seq = par_map(1, 16, |i| Ok(i * i)).unwrap();
        let par = par_map(4, 16, |i| Ok(i * i)).unwrap();
        assert_eq!(seq, par);
        let err = par_map(4, 8, |i| {
            if i == 5 {
                Err(crate::error::invalid("boom"))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
