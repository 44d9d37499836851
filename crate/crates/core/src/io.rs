//! File formats: series, labels and prior CSVs, model and library
//! persistence, dataset manifests and score reports.
//!
//! Column layouts are fixed; see the formats chapter of the guide.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::FitReport;
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::model::{join_violations, ArphmmParams, TimeSeries};
use crate::priors::{LabelSequence, SoftPrior};
use crate::prognostics::{LibraryEntry, ModelLibrary, RulImputation};

pub const SCHEMA_VERSION: u32 = 1;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Table {
    header: Vec<String>,
    /// (1-based file line, cells)
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = read_to_string(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::parse(path, 1, "missing header"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_f64(path: &Path, line: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::parse(path, line, format!("not a number: '{cell}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value '{cell}'")));
    }
    Ok(v)
}

fn check_time_column(path: &Path, table: &Table) -> Result<()> {
    if table.header[0] != "t" {
        return Err(Error::parse(path, 1, "first column must be 't'"));
    }
    let mut prev: Option<f64> = None;
    for (line, row) in &table.rows {
        let t = parse_f64(path, *line, &row[0])?;
        if let Some(p) = prev {
            if t != p + 1.0 {
                return Err(Error::parse(
                    path,
                    *line,
                    format!("t must increase by 1 (got {p} then {t})"),
                ));
            }
        }
        prev = Some(t);
    }
    if table.rows.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Ok(())
}

/// Reads `t,hi_1,…,hi_D[,rul]`. The series id is the file stem.
pub fn load_series(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let table = read_table(path)?;
    check_time_column(path, &table)?;
    let has_rul = table.header.last().map(String::as_str) == Some("rul");
    let n_hi = table.header.len() - 1 - usize::from(has_rul);
    if n_hi == 0 {
        return Err(Error::parse(path, 1, "no health-indicator columns"));
    }
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut rul = Vec::new();
    for (line, cells) in &table.rows {
        let vals: Vec<f64> = cells[1..1 + n_hi]
            .iter()
            .map(|c| parse_f64(path, *line, c))
            .collect::<Result<_>>()?;
        rows.push(vals);
        if has_rul {
            rul.push(parse_f64(path, *line, &cells[1 + n_hi])?);
        }
    }
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("series")
        .to_string();
    TimeSeries::new(id, rows, has_rul.then_some(rul)).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn series_to_csv(series: &TimeSeries) -> String {
    let mut out = String::from("t");
    for i in 1..=series.dim() {
        out.push_str(&format!(",hi_{i}"));
    }
    if series.rul().is_some() {
        out.push_str(",rul");
    }
    out.push('\n');
    for (t, x) in series.values().iter().enumerate() {
        out.push_str(&(t + 1).to_string());
        for v in x.iter() {
            out.push_str(&format!(",{v}"));
        }
        if let Some(r) = series.rul() {
            out.push_str(&format!(",{}", r[t]));
        }
        out.push('\n');
    }
    out
}

pub fn save_series(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    write_atomic(path.as_ref(), series_to_csv(series).as_bytes())
}

/// Reads `t,label` with labels in `1..=K`.
pub fn load_labels(path: impl AsRef<Path>, n_states: usize) -> Result<LabelSequence> {
    let path = path.as_ref();
    let table = read_table(path)?;
    check_time_column(path, &table)?;
    if table.header.len() != 2 {
        return Err(Error::parse(path, 1, "expected columns t,label"));
    }
    let mut labels = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        let l: usize = cells[1]
            .parse()
            .map_err(|_| Error::parse(path, *line, format!("not a label: '{}'", cells[1])))?;
        if l == 0 || l > n_states {
            return Err(Error::parse(path, *line, format!("label {l} outside 1..={n_states}")));
        }
        labels.push(l - 1);
    }
    LabelSequence::new(labels, n_states)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelSequence) -> Result<()> {
    let mut out = String::from("t,label\n");
    for (t, l) in labels.labels().iter().enumerate() {
        out.push_str(&format!("{},{}\n", t + 1, l + 1));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Reads `w_1,…,w_K`, one row per time step.
pub fn load_prior(path: impl AsRef<Path>, n_states: usize) -> Result<SoftPrior> {
    let path = path.as_ref();
    let table = read_table(path)?;
    if table.header.len() != n_states {
        return Err(Error::parse(
            path,
            1,
            format!("expected {n_states} weight columns, found {}", table.header.len()),
        ));
    }
    if table.rows.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    let mut rows = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        let w: Vec<f64> = cells.iter().map(|c| parse_f64(path, *line, c)).collect::<Result<_>>()?;
        if w.iter().any(|&v| v < 0.0) {
            return Err(Error::parse(path, *line, "negative weight"));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::parse(path, *line, "all-zero weight row"));
        }
        rows.push(w);
    }
    SoftPrior::from_rows(&rows)
}

pub fn prior_to_csv(prior: &SoftPrior) -> String {
    let k = prior.n_states();
    let mut out = (1..=k).map(|i| format!("w_{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for t in 0..prior.len() {
        let row: Vec<String> = (0..k).map(|i| prior.get(t, i).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn save_prior(path: impl AsRef<Path>, prior: &SoftPrior) -> Result<()> {
    write_atomic(path.as_ref(), prior_to_csv(prior).as_bytes())
}

/// On-disk model schema. `ar` is indexed `[state][lag][row][col]`, `sigma`
/// `[state][row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub delta: usize,
    pub pi: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub ar: Vec<Vec<Vec<Vec<f64>>>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl From<&ArphmmParams> for ModelFile {
    fn from(p: &ArphmmParams) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            k: p.n_states,
            d: p.dim,
            delta: p.order,
            pi: p.pi.iter().cloned().collect(),
            trans: matrix_rows(&p.trans),
            ar: (0..p.n_states)
                .map(|i| (1..=p.order).map(|lag| matrix_rows(&p.lag_matrix(i, lag))).collect())
                .collect(),
            sigma: p.sigma.iter().map(matrix_rows).collect(),
        }
    }
}

impl ModelFile {
    pub fn into_params(self) -> Result<ArphmmParams> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let (k, d, p) = (self.k, self.d, self.delta);
        if self.pi.len() != k || self.ar.len() != k || self.sigma.len() != k {
            return Err(Error::InvalidModel(format!(
                "pi, ar and sigma must have K = {k} entries"
            )));
        }
        let mut params = ArphmmParams::identity(k, d, p);
        params.pi = DVector::from_vec(self.pi);
        params.trans = matrix_from_rows(&self.trans, k, k, "trans")?;
        for i in 0..k {
            if self.ar[i].len() != p {
                return Err(Error::InvalidModel(format!("ar[{i}] must have delta = {p} lags")));
            }
            for lag in 1..=p {
                let r = matrix_from_rows(&self.ar[i][lag - 1], d, d, "AR lag matrix")?;
                params.set_lag_matrix(i, lag, &r);
            }
            params.sigma[i] = matrix_from_rows(&self.sigma[i], d, d, "sigma")?;
        }
        let v = params.validate();
        if !v.is_empty() {
            return Err(Error::InvalidModel(join_violations(&v)));
        }
        Ok(params)
    }
}

pub fn model_to_json(params: &ArphmmParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from(params))?)
}

pub fn model_from_json(text: &str) -> Result<ArphmmParams> {
    let probe: serde_json::Value = serde_json::from_str(text)?;
    let found = probe
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidModel("missing schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value::<ModelFile>(probe)?.into_params()
}

pub fn save_model(path: impl AsRef<Path>, params: &ArphmmParams) -> Result<()> {
    write_atomic(path.as_ref(), model_to_json(params)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ArphmmParams> {
    let path = path.as_ref();
    model_from_json(&read_to_string(path)?).map_err(|e| match e {
        Error::Json(j) => Error::parse(path, j.line(), j.to_string()),
        other => other,
    })
}

pub fn save_fit_report(path: impl AsRef<Path>, report: &FitReport) -> Result<()> {
    // non-finite log-likelihoods of failed restarts are written as null
    write_atomic(path.as_ref(), serde_json::to_string_pretty(report)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifestEntry {
    pub id: String,
    pub lifetime: f64,
    pub model: PathBuf,
    pub prior: PathBuf,
    pub series: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub imputation: RulImputation,
    pub entries: Vec<LibraryManifestEntry>,
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `manifest.json` plus `models/`, `priors/`, `series/` and
/// `reports/` under `dir`. Each file is written atomically.
pub fn save_library(dir: impl AsRef<Path>, library: &ModelLibrary) -> Result<()> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(library.len());
    for e in library.entries() {
        let stem = file_safe(&e.id);
        let m = PathBuf::from("models").join(format!("{stem}.json"));
        let p = PathBuf::from("priors").join(format!("{stem}.csv"));
        let s = PathBuf::from("series").join(format!("{stem}.csv"));
        save_model(dir.join(&m), &e.params)?;
        save_prior(dir.join(&p), &e.prior)?;
        save_series(dir.join(&s), &e.series)?;
        let report = match &e.report {
            Some(r) => {
                let path = PathBuf::from("reports").join(format!("{stem}.json"));
                save_fit_report(dir.join(&path), r)?;
                Some(path)
            }
            None => None,
        };
        entries.push(LibraryManifestEntry {
            id: e.id.clone(),
            lifetime: e.lifetime,
            model: m,
            prior: p,
            series: s,
            report,
        });
    }
    let manifest = LibraryManifest {
        schema_version: SCHEMA_VERSION,
        imputation: library.imputation,
        entries,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_library(dir: impl AsRef<Path>) -> Result<ModelLibrary> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest: LibraryManifest =
        serde_json::from_str(&read_to_string(&mpath)?).map_err(|e| Error::parse(&mpath, e.line(), e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for m in manifest.entries {
        for p in [&m.model, &m.prior, &m.series] {
            if !dir.join(p).exists() {
                return Err(Error::Contract(format!(
                    "library entry {}: missing file {}",
                    m.id,
                    p.display()
                )));
            }
        }
        let params = load_model(dir.join(&m.model))?;
        let prior = load_prior(dir.join(&m.prior), params.n_states)?;
        let series = load_series(dir.join(&m.series))?.with_id(m.id.clone());
        let report = match &m.report {
            Some(p) if dir.join(p).exists() => {
                let path = dir.join(p);
                Some(
                    serde_json::from_str(&read_to_string(&path)?)
                        .map_err(|e| Error::parse(&path, e.line(), e.to_string()))?,
                )
            }
            _ => None,
        };
        entries.push(LibraryEntry {
            id: m.id,
            params,
            prior,
            lifetime: m.lifetime,
            series,
            report,
        });
    }
    let mut lib = ModelLibrary::new(entries)?;
    lib.imputation = manifest.imputation;
    Ok(lib)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    pub series: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PathBuf>,
    /// Failure cycle; required to match the RUL channel when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifetime: Option<f64>,
}

/// A fleet of instances. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub instances: Vec<DatasetInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_hint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_hint: Option<usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// One loaded manifest instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInstance {
    pub series: TimeSeries,
    pub labels: Option<LabelSequence>,
    pub prior: Option<SoftPrior>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: DatasetManifest =
            serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for inst in &m.instances {
            for p in [Some(&inst.series), inst.labels.as_ref(), inst.prior.as_ref()]
                .into_iter()
                .flatten()
            {
                if !m.root.join(p).exists() {
                    return Err(Error::Contract(format!(
                        "manifest entry {}: missing file {}",
                        inst.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Loads every instance, checking label and prior lengths against the
    /// series and the declared lifetime against the RUL channel.
    pub fn load_instances(&self, n_states: usize) -> Result<Vec<LoadedInstance>> {
        self.instances
            .iter()
            .map(|inst| {
                let series = load_series(self.root.join(&inst.series))?.with_id(inst.id.clone());
                if let (Some(l), Some(have)) = (inst.lifetime, series.lifetime()) {
                    if (l - have).abs() > 1e-9 {
                        return Err(Error::Contract(format!(
                            "manifest entry {}: lifetime {l} disagrees with RUL channel ({have})",
                            inst.id
                        )));
                    }
                }
                let labels = inst
                    .labels
                    .as_ref()
                    .map(|p| load_labels(self.root.join(p), n_states))
                    .transpose()?;
                if let Some(l) = &labels {
                    if l.len() != series.len() {
                        return Err(Error::Contract(format!(
                            "manifest entry {}: {} labels for {} steps",
                            inst.id,
                            l.len(),
                            series.len()
                        )));
                    }
                }
                let prior = inst
                    .prior
                    .as_ref()
                    .map(|p| load_prior(self.root.join(p), n_states))
                    .transpose()?;
                if let Some(p) = &prior {
                    p.check_shape(series.len(), n_states)?;
                }
                Ok(LoadedInstance { series, labels, prior })
            })
            .collect()
    }
}

/// `id,true,hat,d,s,pct_err`.
pub fn score_report_csv(report: &ScoreReport) -> String {
    let mut out = String::from("id,true,hat,d,s,pct_err\n");
    for r in &report.per_instance {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.true_rul, r.rul_hat, r.d, r.s, r.pct_err
        ));
    }
    out
}

pub fn save_score_report(csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>, report: &ScoreReport) -> Result<()> {
    write_atomic(csv_path.as_ref(), score_report_csv(report).as_bytes())?;
    write_atomic(json_path.as_ref(), serde_json::to_string_pretty(report)?.as_bytes())
}

/// Reads a two-column `id,<value>` CSV (truth files, prediction files use
/// their first two columns).
pub fn load_id_values(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    if table.header.len() < 2 || table.header[0] != "id" {
        return Err(Error::parse(path, 1, "expected columns id,<value>"));
    }
    table
        .rows
        .iter()
        .map(|(line, cells)| Ok((cells[0].clone(), parse_f64(path, *line, &cells[1])?)))
        .collect()
}
