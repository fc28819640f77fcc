//! Long-format CSV ingestion, model archives, key=value configuration and CSV output.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{DesignSums, FitConfig, FitDiagnostics, FittedModel, RandomEffects};
use crate::error::{MemoeError, Result};
use crate::model::{Dataset, Dims, ModelParams, Observation, Subject};
use crate::predict::{NewInput, SubjectEffects};

/// Column binding for a long-format file (one row per observation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongCsvSchema {
    pub subject_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub z_cols: Vec<String>,
    /// Subject-level covariates; must be constant within a subject.
    pub w_cols: Vec<String>,
    pub add_intercept_x: bool,
    pub add_intercept_z: bool,
    pub add_intercept_w: bool,
    /// Optional row identifier used in prediction output.
    pub row_id_col: Option<String>,
}

impl Default for LongCsvSchema {
    fn default() -> Self {
        Self {
            subject_col: "subject".into(),
            y_col: "y".into(),
            x_cols: Vec::new(),
            z_cols: Vec::new(),
            w_cols: Vec::new(),
            add_intercept_x: true,
            add_intercept_z: true,
            add_intercept_w: true,
            row_id_col: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(MemoeError::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<KeyValue>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| MemoeError::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(MemoeError::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = seen.insert(key.clone(), i + 1) {
            return Err(MemoeError::Config(format!("line {}: key '{key}' repeats line {prev}", i + 1)));
        }
        out.push(KeyValue {
            key,
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

impl LongCsvSchema {
    /// Parse a schema file: keys `subject`, `y`, `x`, `z`, `w` (comma-separated
    /// lists), `intercept_x`, `intercept_z`, `intercept_w`, `row_id`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Self::default();
        for kv in parse_key_values(text)? {
            let v = kv.value.as_str();
            match kv.key.as_str() {
                "subject" => schema.subject_col = v.to_string(),
                "y" => schema.y_col = v.to_string(),
                "x" => schema.x_cols = parse_list(v),
                "z" => schema.z_cols = parse_list(v),
                "w" => schema.w_cols = parse_list(v),
                "intercept_x" => schema.add_intercept_x = parse_bool(&kv.key, v)?,
                "intercept_z" => schema.add_intercept_z = parse_bool(&kv.key, v)?,
                "intercept_w" => schema.add_intercept_w = parse_bool(&kv.key, v)?,
                "row_id" => schema.row_id_col = Some(v.to_string()).filter(|s| !s.is_empty()),
                other => return Err(MemoeError::Config(format!("line {}: unknown schema key '{other}'", kv.line))),
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "subject = {}\ny = {}\nx = {}\nz = {}\nw = {}\nintercept_x = {}\nintercept_z = {}\nintercept_w = {}\n",
            self.subject_col,
            self.y_col,
            self.x_cols.join(", "),
            self.z_cols.join(", "),
            self.w_cols.join(", "),
            self.add_intercept_x,
            self.add_intercept_z,
            self.add_intercept_w
        );
        if let Some(r) = &self.row_id_col {
            s.push_str(&format!("row_id = {r}\n"));
        }
        s
    }

    /// Column sets must be disjoint, except that x and z may share covariates.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.p == 0 || dims.q == 0 || dims.d == 0 {
            return Err(MemoeError::Config(format!(
                "schema gives (p, q, d) = ({}, {}, {}); each needs a column or an intercept",
                dims.p, dims.q, dims.d
            )));
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        let groups: [(&str, Vec<&String>); 4] = [
            ("subject", vec![&self.subject_col]),
            ("y", vec![&self.y_col]),
            ("w", self.w_cols.iter().collect()),
            ("xz", self.x_cols.iter().chain(self.z_cols.iter()).collect()),
        ];
        for (group, cols) in &groups {
            let mut local = Vec::new();
            for c in cols {
                if let Some(prev) = owner.get(c.as_str()) {
                    if prev != group {
                        return Err(MemoeError::Config(format!("column '{c}' used as both {prev} and {group}")));
                    }
                }
                local.push(c.as_str());
            }
            for c in local {
                owner.insert(c, group);
            }
        }
        for (name, cols) in [("x", &self.x_cols), ("z", &self.z_cols), ("w", &self.w_cols)] {
            let mut sorted: Vec<&String> = cols.iter().collect();
            sorted.sort();
            if sorted.windows(2).any(|p| p[0] == p[1]) {
                return Err(MemoeError::Config(format!("duplicate column in {name}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            p: self.x_cols.len() + self.add_intercept_x as usize,
            q: self.z_cols.len() + self.add_intercept_z as usize,
            d: self.w_cols.len() + self.add_intercept_w as usize,
        }
    }
}

struct Binding {
    subject: usize,
    y: Option<usize>,
    x: Vec<usize>,
    z: Vec<usize>,
    w: Vec<usize>,
    row_id: Option<usize>,
}

fn bind(headers: &csv::StringRecord, schema: &LongCsvSchema, need_y: bool) -> Result<Binding> {
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let find = |name: &str| {
        index.get(name).copied().ok_or_else(|| MemoeError::Data {
            row: 1,
            column: name.to_string(),
            message: "missing column".into(),
        })
    };
    let all = |cols: &[String]| cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>();
    Ok(Binding {
        subject: find(&schema.subject_col)?,
        y: if need_y { Some(find(&schema.y_col)?) } else { index.get(schema.y_col.as_str()).copied() },
        x: all(&schema.x_cols)?,
        z: all(&schema.z_cols)?,
        w: all(&schema.w_cols)?,
        row_id: schema.row_id_col.as_deref().map(find).transpose()?,
    })
}

fn cell<'a>(rec: &'a csv::StringRecord, idx: usize, line: usize, headers: &csv::StringRecord) -> Result<&'a str> {
    rec.get(idx).map(str::trim).ok_or_else(|| MemoeError::Data {
        row: line,
        column: headers.get(idx).unwrap_or("?").to_string(),
        message: "row is too short".into(),
    })
}

fn number(rec: &csv::StringRecord, idx: usize, line: usize, headers: &csv::StringRecord) -> Result<f64> {
    let raw = cell(rec, idx, line, headers)?;
    let bad = |message: String| MemoeError::Data {
        row: line,
        column: headers.get(idx).unwrap_or("?").to_string(),
        message,
    };
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Err(bad("missing value".into()));
    }
    let v: f64 = raw.parse().map_err(|_| bad(format!("not a number: '{raw}'")))?;
    if !v.is_finite() {
        return Err(bad(format!("non-finite value '{raw}'")));
    }
    Ok(v)
}

fn design(intercept: bool, rec: &csv::StringRecord, cols: &[usize], line: usize, headers: &csv::StringRecord) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cols.len() + 1);
    if intercept {
        out.push(1.0);
    }
    for &c in cols {
        out.push(number(rec, c, line, headers)?);
    }
    Ok(out)
}

/// Read a long-format CSV into a [`Dataset`]. Subjects appear in order of first
/// occurrence; row order is kept within each subject. Errors carry the 1-based
/// file line and column name.
pub fn read_long_csv<R: Read>(reader: R, schema: &LongCsvSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let b = bind(&headers, schema, true)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, usize, Vec<Observation>)> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let id = cell(&rec, b.subject, line, &headers)?.to_string();
        if id.is_empty() {
            return Err(MemoeError::Data {
                row: line,
                column: schema.subject_col.clone(),
                message: "missing subject id".into(),
            });
        }
        let y = number(&rec, b.y.expect("bound"), line, &headers)?;
        let x = design(schema.add_intercept_x, &rec, &b.x, line, &headers)?;
        let z = design(schema.add_intercept_z, &rec, &b.z, line, &headers)?;
        let w = design(schema.add_intercept_w, &rec, &b.w, line, &headers)?;
        match groups.get_mut(&id) {
            Some((w0, first_line, obs)) => {
                if *w0 != w {
                    return Err(MemoeError::Subject {
                        subject: id,
                        message: format!("subject-level covariates differ between lines {first_line} and {line}"),
                    });
                }
                obs.push(Observation::new(y, x, z));
            }
            None => {
                order.push(id.clone());
                groups.insert(id, (w, line, vec![Observation::new(y, x, z)]));
            }
        }
    }
    if order.is_empty() {
        return Err(MemoeError::Input("no data rows".into()));
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let (w, _, obs) = groups.remove(&id).expect("grouped");
            Subject::new(id, w, obs)
        })
        .collect();
    Dataset::new(subjects)
}

pub fn load_long_csv(path: &Path, schema: &LongCsvSchema) -> Result<Dataset> {
    read_long_csv(File::open(path)?, schema)
}

/// Write a dataset in long format under `schema` (intercept columns are implied,
/// not written). A column shared by x and z is written once.
pub fn write_long_csv<W: Write>(dataset: &Dataset, schema: &LongCsvSchema, out: W) -> Result<()> {
    schema.validate()?;
    if schema.dims() != dataset.dims() {
        return Err(MemoeError::Dimension("schema does not match dataset dimensions".into()));
    }
    let ox = schema.add_intercept_x as usize;
    let oz = schema.add_intercept_z as usize;
    let ow = schema.add_intercept_w as usize;
    let z_only: Vec<(usize, &String)> = schema
        .z_cols
        .iter()
        .enumerate()
        .filter(|(_, c)| !schema.x_cols.contains(c))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![schema.subject_col.as_str(), schema.y_col.as_str()];
    header.extend(schema.x_cols.iter().map(String::as_str));
    header.extend(z_only.iter().map(|(_, c)| c.as_str()));
    header.extend(schema.w_cols.iter().map(String::as_str));
    w.write_record(&header)?;
    for s in dataset.subjects() {
        for o in &s.obs {
            let mut row = vec![s.id.clone(), fmt_f64(o.y)];
            row.extend((0..schema.x_cols.len()).map(|c| fmt_f64(o.x[ox + c])));
            row.extend(z_only.iter().map(|&(c, _)| fmt_f64(o.z[oz + c])));
            row.extend((0..schema.w_cols.len()).map(|c| fmt_f64(s.w[ow + c])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of a covariate file to predict for.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictRow {
    pub row_id: String,
    pub subject: String,
    pub input: NewInput,
    /// Response, when the file carries one.
    pub y: Option<f64>,
}

/// Read covariate rows for prediction. The response column is optional; row ids
/// come from the schema's `row_id` column or default to the 1-based data row.
pub fn read_predict_rows<R: Read>(reader: R, schema: &LongCsvSchema) -> Result<Vec<PredictRow>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let b = bind(&headers, schema, false)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let row_id = match b.row_id {
            Some(c) => cell(&rec, c, line, &headers)?.to_string(),
            None => (i + 1).to_string(),
        };
        let y = match b.y {
            Some(c) if !cell(&rec, c, line, &headers)?.is_empty() => Some(number(&rec, c, line, &headers)?),
            _ => None,
        };
        out.push(PredictRow {
            row_id,
            subject: cell(&rec, b.subject, line, &headers)?.to_string(),
            input: NewInput::new(
                design(schema.add_intercept_x, &rec, &b.x, line, &headers)?,
                design(schema.add_intercept_z, &rec, &b.z, line, &headers)?,
                design(schema.add_intercept_w, &rec, &b.w, line, &headers)?,
            ),
            y,
        });
    }
    if out.is_empty() {
        return Err(MemoeError::Input("no data rows".into()));
    }
    Ok(out)
}

pub fn load_predict_rows(path: &Path, schema: &LongCsvSchema) -> Result<Vec<PredictRow>> {
    read_predict_rows(File::open(path)?, schema)
}

/// Archive format identifier and version.
pub const ARCHIVE_FORMAT: &str = "memoe-model";
pub const ARCHIVE_VERSION: u32 = 1;

/// Everything prediction needs from a fit, plus fit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub params: ModelParams,
    pub design_sums: DesignSums,
    pub random_effects: RandomEffects,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
    pub config: FitConfig,
    pub schema: Option<LongCsvSchema>,
    /// Fitted random-effect modes of the training subjects.
    pub subject_effects: SubjectEffects,
}

impl ModelArchive {
    pub fn from_fitted(fitted: &FittedModel, schema: Option<LongCsvSchema>) -> Self {
        Self {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            dims: fitted.params.dims(),
            params: fitted.params.clone(),
            design_sums: fitted.design_sums.clone(),
            random_effects: fitted.random_effects,
            loglik: fitted.loglik(),
            loglik_trace: fitted.loglik_trace.clone(),
            converged: fitted.converged,
            diagnostics: fitted.diagnostics.clone(),
            config: fitted.config.clone(),
            schema,
            subject_effects: SubjectEffects::from_fitted(fitted),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| MemoeError::Archive(m);
        if self.format != ARCHIVE_FORMAT {
            return Err(bad(format!("not a model archive (format '{}')", self.format)));
        }
        if self.version != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported archive version {} (expected {ARCHIVE_VERSION})", self.version)));
        }
        self.params
            .validate(self.dims)
            .map_err(|e| bad(format!("invalid parameters: {e}")))?;
        let k = self.params.n_experts();
        let Dims { p, d, .. } = self.dims;
        if self.design_sums.expert_gram.len() != k
            || self.design_sums.expert_gram.iter().any(|g| g.shape() != (p, p))
            || self.design_sums.w_gram.shape() != (d, d)
        {
            return Err(bad("design sums do not match model dimensions".into()));
        }
        let sums = self.design_sums.expert_gram.iter().chain(std::iter::once(&self.design_sums.w_gram));
        for m in sums {
            if m.iter().any(|v| !v.is_finite()) || crate::linalg::asymmetry(m) > 1e-12 * m.amax().max(1.0) {
                return Err(bad("design sums must be finite and symmetric".into()));
            }
        }
        if self.subject_effects.0.values().any(|u| u.len() != self.dims.q || u.iter().any(|v| !v.is_finite())) {
            return Err(bad("subject effects must be finite q-vectors".into()));
        }
        if let Some(schema) = &self.schema {
            if schema.dims() != self.dims {
                return Err(bad("stored schema does not match model dimensions".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let archive: Self = serde_json::from_str(text).map_err(|e| MemoeError::Archive(format!("corrupt archive: {e}")))?;
        archive.validate()?;
        Ok(archive)
    }
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<()> {
    archive.validate()?;
    let text = archive.to_json()?;
    atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    ModelArchive::from_json(&fs::read_to_string(path)?)
}

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    Default,
    File,
    Flag,
}

impl ConfigSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::File => "file",
            Self::Flag => "flag",
        }
    }
}

/// A [`FitConfig`] together with the source of every key.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredConfig {
    pub config: FitConfig,
    pub sources: Vec<(String, ConfigSource)>,
}

pub const CONFIG_KEYS: [&str; 12] = [
    "k",
    "max_em_iters",
    "em_rel_tol",
    "n_starts",
    "seed",
    "sigma2_floor",
    "sigma_eig_floor",
    "mode_tol",
    "mode_max_iters",
    "gating_newton_iters",
    "gating",
    "random_effects",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| MemoeError::Config(format!("{key}: cannot parse '{v}'")))
}

/// Set one configuration key from its text value.
pub fn set_config_value(cfg: &mut FitConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "k" => cfg.k = parse_num(key, v)?,
        "max_em_iters" => cfg.max_em_iters = parse_num(key, v)?,
        "em_rel_tol" => cfg.em_rel_tol = parse_num(key, v)?,
        "n_starts" => cfg.n_starts = parse_num(key, v)?,
        "seed" => cfg.seed = parse_num(key, v)?,
        "sigma2_floor" => cfg.sigma2_floor = parse_num(key, v)?,
        "sigma_eig_floor" => cfg.sigma_eig_floor = parse_num(key, v)?,
        "mode_tol" => cfg.mode_tol = parse_num(key, v)?,
        "mode_max_iters" => cfg.mode_max_iters = parse_num(key, v)?,
        "gating_newton_iters" => cfg.gating_newton_iters = parse_num(key, v)?,
        "gating" => cfg.gating = v.parse()?,
        "random_effects" => cfg.random_effects = v.parse()?,
        other => return Err(MemoeError::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

impl Default for LayeredConfig {
    fn default() -> Self {
        Self {
            config: FitConfig::default(),
            sources: CONFIG_KEYS.iter().map(|k| (k.to_string(), ConfigSource::Default)).collect(),
        }
    }
}

impl LayeredConfig {
    pub fn set(&mut self, key: &str, value: &str, source: ConfigSource) -> Result<()> {
        set_config_value(&mut self.config, key, value)?;
        if let Some(entry) = self.sources.iter_mut().find(|(k, _)| k == key) {
            entry.1 = source;
        }
        Ok(())
    }

    /// Apply a key=value config file on top of the current values.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for kv in parse_key_values(text)? {
            self.set(&kv.key, &kv.value, ConfigSource::File)
                .map_err(|e| MemoeError::Config(format!("line {}: {e}", kv.line)))?;
        }
        Ok(())
    }

    pub fn source(&self, key: &str) -> ConfigSource {
        self.sources
            .iter()
            .find(|(k, _)| k == key)
            .map_or(ConfigSource::Default, |e| e.1)
    }

    /// Current value of `key` rendered as text.
    pub fn value(&self, key: &str) -> String {
        let c = &self.config;
        match key {
            "k" => c.k.to_string(),
            "max_em_iters" => c.max_em_iters.to_string(),
            "em_rel_tol" => c.em_rel_tol.to_string(),
            "n_starts" => c.n_starts.to_string(),
            "seed" => c.seed.to_string(),
            "sigma2_floor" => c.sigma2_floor.to_string(),
            "sigma_eig_floor" => c.sigma_eig_floor.to_string(),
            "mode_tol" => c.mode_tol.to_string(),
            "mode_max_iters" => c.mode_max_iters.to_string(),
            "gating_newton_iters" => c.gating_newton_iters.to_string(),
            "gating" => c.gating.name().to_string(),
            "random_effects" => c.random_effects.name().to_string(),
            _ => String::new(),
        }
    }
}

/// Decimal encoding with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `path` through a sibling temporary file and rename it into place; the
/// temporary file is removed on failure.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| MemoeError::Input(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Matrix to nested rows, for reports.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn vector_values(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
