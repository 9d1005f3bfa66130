//! Cohort manifest: `# key=value` metadata lines, then an RFC 4180 CSV table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::GridSpec;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const COLUMNS: [&str; 11] = [
    "subject_id",
    "age",
    "sex",
    "mmse",
    "brain_ml",
    "gm_ml",
    "ventricle_ml",
    "image_path",
    "style_seed",
    "noise_seed",
    "flagged",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: f64,
    pub sex: f64,
    pub mmse: f64,
    pub brain_ml: f64,
    pub gm_ml: f64,
    pub ventricle_ml: f64,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub style_seed: u64,
    pub noise_seed: u64,
    /// The requested volumes could not be realized exactly.
    pub flagged: bool,
}

impl SubjectRecord {
    pub fn volumes(&self) -> [f64; 3] {
        [self.brain_ml, self.gm_ml, self.ventricle_ml]
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.subject_id.is_empty() {
            return Err("empty subject id".into());
        }
        if self.volumes().iter().any(|v| !(*v > 0.0)) {
            return Err(format!("{}: volumes must be positive", self.subject_id));
        }
        if !(0.0..=30.0).contains(&self.mmse) {
            return Err(format!("{}: score {} outside [0, 30]", self.subject_id, self.mmse));
        }
        if Path::new(&self.image_path).is_absolute() {
            return Err(format!("{}: image path must be relative", self.subject_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub grid: GridSpec,
    /// Hashes and seeds of everything the cohort was generated from.
    pub provenance: BTreeMap<String, String>,
    pub records: Vec<SubjectRecord>,
}

/// Problems found when checking a manifest against the files on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub duplicate_ids: Vec<String>,
    pub invalid: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.duplicate_ids.is_empty() && self.invalid.is_empty()
    }
}

impl DatasetManifest {
    pub fn new(grid: GridSpec) -> Self {
        DatasetManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            grid,
            provenance: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    pub fn validate(&self, base_dir: &Path) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.subject_id.as_str()) {
                report.duplicate_ids.push(r.subject_id.clone());
            }
            if let Err(e) = r.check() {
                report.invalid.push(e);
            }
            if !base_dir.join(&r.image_path).is_file() {
                report.missing.push(r.image_path.clone());
            }
        }
        report
    }

    pub fn image_path(&self, base_dir: &Path, record: &SubjectRecord) -> PathBuf {
        base_dir.join(&record.image_path)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&format!("# format_version={}\n", self.format_version));
        out.push_str(&format!(
            "# grid={}x{}x{}\n# spacing_mm={}\n",
            self.grid.dims[0], self.grid.dims[1], self.grid.dims[2], self.grid.spacing_mm
        ));
        for (k, v) in &self.provenance {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidConfig(format!("provenance entry `{k}` cannot be written")));
            }
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in &self.records {
            w.write_record([
                r.subject_id.clone(),
                r.age.to_string(),
                r.sex.to_string(),
                r.mmse.to_string(),
                r.brain_ml.to_string(),
                r.gm_ml.to_string(),
                r.ventricle_ml.to_string(),
                r.image_path.clone(),
                r.style_seed.to_string(),
                r.noise_seed.to_string(),
                u8::from(r.flagged).to_string(),
            ])?;
        }
        let body = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut body_start = 0;
        let mut meta_lines = 0u64;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            body_start += line.len();
            meta_lines += 1;
            let rest = rest.trim();
            let (k, v) = rest.split_once('=').ok_or_else(|| Error::ManifestRow {
                line: meta_lines,
                reason: format!("metadata line `{rest}` is not key=value"),
            })?;
            meta.insert(k.trim().to_string(), v.to_string());
        }
        let take = |meta: &mut BTreeMap<String, String>, k: &str| {
            meta.remove(k).ok_or_else(|| Error::ManifestRow {
                line: 1,
                reason: format!("missing `# {k}=` metadata"),
            })
        };
        let version: u32 = take(&mut meta, "format_version")?
            .parse()
            .map_err(|_| Error::FormatVersion(0))?;
        if version != MANIFEST_FORMAT_VERSION {
            return Err(Error::FormatVersion(version));
        }
        let grid_text = take(&mut meta, "grid")?;
        let dims: Vec<usize> = grid_text.split('x').filter_map(|s| s.parse().ok()).collect();
        let spacing_mm: f64 = take(&mut meta, "spacing_mm")?.parse().map_err(|_| Error::ManifestRow {
            line: 1,
            reason: "spacing_mm is not a number".into(),
        })?;
        let dims: [usize; 3] = dims.try_into().map_err(|_| Error::ManifestRow {
            line: 1,
            reason: format!("grid `{grid_text}` is not NXxNYxNZ"),
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(&text.as_bytes()[body_start..]);
        let mut rows = reader.records();
        let header = rows.next().transpose()?.ok_or_else(|| Error::ManifestHeader {
            expected: COLUMNS.join(","),
            found: String::new(),
        })?;
        if header.iter().ne(COLUMNS) {
            return Err(Error::ManifestHeader {
                expected: COLUMNS.join(","),
                found: header.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut records = Vec::new();
        for row in rows {
            let row = row?;
            let line = meta_lines + row.position().map_or(0, |p| p.line());
            let bad = |reason: String| Error::ManifestRow { line, reason };
            if row.len() != COLUMNS.len() {
                return Err(bad(format!("expected {} fields, found {}", COLUMNS.len(), row.len())));
            }
            let num = |i: usize| -> Result<f64> {
                row[i].parse().map_err(|_| bad(format!("{} `{}` is not a number", COLUMNS[i], &row[i])))
            };
            let int = |i: usize| -> Result<u64> {
                row[i].parse().map_err(|_| bad(format!("{} `{}` is not an integer", COLUMNS[i], &row[i])))
            };
            let flagged = match &row[10] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("flagged `{other}` is not 0 or 1"))),
            };
            records.push(SubjectRecord {
                subject_id: row[0].to_string(),
                age: num(1)?,
                sex: num(2)?,
                mmse: num(3)?,
                brain_ml: num(4)?,
                gm_ml: num(5)?,
                ventricle_ml: num(6)?,
                image_path: row[7].to_string(),
                style_seed: int(8)?,
                noise_seed: int(9)?,
                flagged,
            });
        }
        Ok(DatasetManifest {
            format_version: version,
            grid: GridSpec { dims, spacing_mm },
            provenance: meta,
            records,
        })
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    super::write_atomic(path, manifest.to_csv()?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_csv(&text)
}

/// Score against ventricle volume, one row per subject.
pub fn scatter_csv(manifest: &DatasetManifest) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "mmse", "ventricle_ml"])?;
    for r in &manifest.records {
        w.write_record([r.subject_id.clone(), r.mmse.to_string(), r.ventricle_ml.to_string()])?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(body).expect("csv output is utf-8"))
}
