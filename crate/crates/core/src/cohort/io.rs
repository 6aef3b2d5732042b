//! Cohort directory format.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<slide_id>/expr.csv     spot_id,<gene names...>   raw counts
//! <root>/<slide_id>/coords.csv   spot_id,x,y
//! <root>/<slide_id>/feats.csv    spot_id,f0,...,f{D_img-1}
//! ```
//!
//! Rows are joined on `spot_id`; the order of `expr.csv` fixes spot order.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{validate_hvg, Cohort, SlideSource, SpotRecord, DEFAULT_LIB_SCALE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub gene_names: Vec<String>,
    pub slides: Vec<String>,
    pub d_img: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvg_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lib_scale: Option<f64>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Records every file path opened by a [`DiskCohort`].
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<Vec<PathBuf>>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, p: &Path) {
        self.0.lock().expect("access log poisoned").push(p.to_path_buf());
    }

    pub fn entries(&self) -> Vec<PathBuf> {
        self.0.lock().expect("access log poisoned").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("access log poisoned").clear();
    }

    /// Paths under `dir` that were opened since the last clear.
    pub fn touched_under(&self, dir: &Path) -> Vec<PathBuf> {
        self.entries().into_iter().filter(|p| p.starts_with(dir)).collect()
    }
}

/// Cohort read slide-by-slide from disk on every request.
#[derive(Debug, Clone)]
pub struct DiskCohort {
    root: PathBuf,
    manifest: Manifest,
    hvg_index: Vec<usize>,
    log: Option<AccessLog>,
}

impl DiskCohort {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Manifest::read(&root)?;
        let hvg_index = manifest
            .hvg_index
            .clone()
            .unwrap_or_else(|| (0..manifest.gene_names.len()).collect());
        validate_hvg(&hvg_index, manifest.gene_names.len())?;
        Ok(Self {
            root,
            manifest,
            hvg_index,
            log: None,
        })
    }

    pub fn with_log(mut self, log: AccessLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_hvg(mut self, hvg_index: Vec<usize>) -> Result<Self> {
        validate_hvg(&hvg_index, self.manifest.gene_names.len())?;
        self.hvg_index = hvg_index;
        Ok(self)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn slide_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn open_csv(&self, path: &Path) -> Result<csv::Reader<fs::File>> {
        if let Some(log) = &self.log {
            log.record(path);
        }
        csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))
    }

    fn read_table(&self, path: &Path, expected_cols: usize) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
        let mut rdr = self.open_csv(path)?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() != expected_cols + 1 || header[0] != "spot_id" {
            return Err(Error::Format(format!(
                "{}: expected spot_id plus {expected_cols} columns, header has {}",
                path.display(),
                header.len()
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let vals = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::Format(format!("{}: spot {id}: bad number '{f}'", path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != expected_cols {
                return Err(Error::Format(format!(
                    "{}: spot {id} has {} values, expected {expected_cols}",
                    path.display(),
                    vals.len()
                )));
            }
            rows.push((id, vals));
        }
        Ok((header, rows))
    }

    fn read_slide(&self, id: &str) -> Result<Vec<SpotRecord>> {
        let dir = self.slide_dir(id);
        let g_all = self.manifest.gene_names.len();
        let (header, expr) = self.read_table(&dir.join("expr.csv"), g_all)?;
        if header[1..] != self.manifest.gene_names[..] {
            return Err(Error::Format(format!(
                "{}: gene columns do not match the manifest",
                dir.join("expr.csv").display()
            )));
        }
        let (_, coords) = self.read_table(&dir.join("coords.csv"), 2)?;
        let (_, feats) = self.read_table(&dir.join("feats.csv"), self.manifest.d_img)?;
        let coords: HashMap<String, Vec<f64>> = coords.into_iter().collect();
        let feats: HashMap<String, Vec<f64>> = feats.into_iter().collect();
        expr.into_iter()
            .map(|(spot_id, expr_raw)| {
                let c = coords.get(&spot_id).ok_or_else(|| {
                    Error::Format(format!("slide {id}: spot {spot_id} missing from coords.csv"))
                })?;
                let f = feats.get(&spot_id).ok_or_else(|| {
                    Error::Format(format!("slide {id}: spot {spot_id} missing from feats.csv"))
                })?;
                if expr_raw.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::InvalidInput(format!(
                        "slide {id}: spot {spot_id} has a negative count"
                    )));
                }
                Ok(SpotRecord {
                    slide_id: id.to_string(),
                    spot_id,
                    coord: [c[0], c[1]],
                    feat: f.clone(),
                    expr_raw,
                })
            })
            .collect()
    }

    /// Reads every slide into memory.
    pub fn load_all(&self) -> Result<Cohort> {
        let mut spots = Vec::new();
        for id in &self.manifest.slides {
            let s = self.read_slide(id)?;
            if s.is_empty() {
                return Err(Error::InvalidInput(format!("slide '{id}' has no spots")));
            }
            spots.extend(s);
        }
        let mut c = Cohort::new(
            self.manifest.name.clone(),
            self.manifest.gene_names.clone(),
            Some(self.hvg_index.clone()),
            self.manifest.d_img,
            spots,
        )?;
        c.lib_scale = self.manifest.lib_scale.unwrap_or(DEFAULT_LIB_SCALE);
        Ok(c)
    }
}

impl SlideSource for DiskCohort {
    fn gene_names(&self) -> &[String] {
        &self.manifest.gene_names
    }

    fn hvg_index(&self) -> &[usize] {
        &self.hvg_index
    }

    fn d_img(&self) -> usize {
        self.manifest.d_img
    }

    fn lib_scale(&self) -> f64 {
        self.manifest.lib_scale.unwrap_or(DEFAULT_LIB_SCALE)
    }

    fn slide_ids(&self) -> Vec<String> {
        let mut ids = self.manifest.slides.clone();
        ids.sort();
        ids
    }

    fn load_slide(&self, id: &str) -> Result<Cow<'_, [SpotRecord]>> {
        if !self.manifest.slides.iter().any(|s| s == id) {
            return Err(Error::InvalidFold(format!("unknown slide '{id}'")));
        }
        Ok(Cow::Owned(self.read_slide(id)?))
    }
}

/// Loads a cohort directory fully into memory.
pub fn read_cohort(root: &Path) -> Result<Cohort> {
    DiskCohort::open(root)?.load_all()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_line(id: &str, vals: &[f64]) -> String {
    let mut line = String::from(id);
    for v in vals {
        line.push(',');
        line.push_str(&v.to_string());
    }
    line.push('\n');
    line
}

/// Writes `cohort` in the directory format. The HVG list is recorded in the manifest.
pub fn write_cohort(cohort: &Cohort, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = Manifest {
        name: cohort.name.clone(),
        gene_names: cohort.gene_names.clone(),
        slides: cohort.slides.keys().cloned().collect(),
        d_img: cohort.d_img,
        hvg_index: Some(cohort.hvg_index.clone()),
        lib_scale: (cohort.lib_scale != DEFAULT_LIB_SCALE).then_some(cohort.lib_scale),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&root.join("manifest.json"), &(text + "\n"))?;
    for (id, spots) in &cohort.slides {
        let dir = root.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut expr = String::from("spot_id");
        for g in &cohort.gene_names {
            expr.push(',');
            expr.push_str(g);
        }
        expr.push('\n');
        let mut coords = String::from("spot_id,x,y\n");
        let mut feats = String::from("spot_id");
        for k in 0..cohort.d_img {
            feats.push_str(&format!(",f{k}"));
        }
        feats.push('\n');
        for s in spots {
            expr.push_str(&csv_line(&s.spot_id, &s.expr_raw));
            coords.push_str(&csv_line(&s.spot_id, &s.coord));
            feats.push_str(&csv_line(&s.spot_id, &s.feat));
        }
        write_file(&dir.join("expr.csv"), &expr)?;
        write_file(&dir.join("coords.csv"), &coords)?;
        write_file(&dir.join("feats.csv"), &feats)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Cohort {
        let spots = vec![
            SpotRecord {
                slide_id: "s1".into(),
                spot_id: "a".into(),
                coord: [1.5, -2.0],
                feat: vec![0.1, 0.2],
                expr_raw: vec![3.0, 0.0, 1.0],
            },
            SpotRecord {
                slide_id: "s2".into(),
                spot_id: "a".into(),
                coord: [0.0, 7.25],
                feat: vec![-1.0, 1e-17],
                expr_raw: vec![0.0, 12.0, 5.0],
            },
        ];
        Cohort::new("tiny", vec!["G1".into(), "G2".into(), "G3".into()], Some(vec![0, 2]), 2, spots).unwrap()
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        write_cohort(&c, dir.path()).unwrap();
        assert_eq!(read_cohort(dir.path()).unwrap(), c);
    }

    #[test]
    fn disk_cohort_logs_opened_files() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&tiny(), dir.path()).unwrap();
        let log = AccessLog::new();
        let disk = DiskCohort::open(dir.path()).unwrap().with_log(log.clone());
        disk.load_slide("s2").unwrap();
        assert_eq!(log.touched_under(&dir.path().join("s2")).len(), 3);
        assert!(log.touched_under(&dir.path().join("s1")).is_empty());
        assert!(disk.load_slide("nope").is_err());
    }

    #[test]
    fn mismatched_gene_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("s1/expr.csv");
        let text = fs::read_to_string(&p).unwrap().replace("G2", "GX");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_cohort(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_join_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("s1/coords.csv"), "spot_id,x,y\n").unwrap();
        assert!(read_cohort(dir.path()).is_err());
    }
}
