//! On-disk datasets: a `manifest.json` naming an annotation file with one
//! JSON record per line, and PNG images referenced relative to the manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crowdage_core::synth::{AnnotationRecord, DatasetManifest, Scene};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{load_image, save_png};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub name: String,
    /// Sampling weight; the scene count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub annotations: String,
    pub scenes: usize,
}

/// Accepts either a dataset directory or its manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<ManifestFile> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path,
        line: 1,
        source,
    })
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Loads every scene of a dataset. Image sizes must match their records.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(path);
    let root = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = read_manifest(&mpath)?;
    let records = read_annotations(&root.join(&manifest.annotations))?;
    if records.len() != manifest.scenes {
        return Err(Error::Mismatch(format!(
            "{}: manifest lists {} scenes, annotation file has {}",
            mpath.display(),
            manifest.scenes,
            records.len()
        )));
    }
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let ipath = root.join(&rec.image_path);
        let image = load_image(&ipath)?;
        if (image.width, image.height) != (rec.width, rec.height) {
            return Err(Error::Mismatch(format!(
                "{}: image is {}x{}, annotation says {}x{}",
                ipath.display(),
                image.width,
                image.height,
                rec.width,
                rec.height
            )));
        }
        scenes.push(Scene {
            image,
            faces: rec.faces()?,
            source: manifest.name.clone(),
        });
    }
    Ok(DatasetManifest {
        name: manifest.name,
        scenes,
        weight: manifest.weight,
    })
}

/// Writes `images/NNNNNN.png`, the annotation file and the manifest into `dir`.
pub fn save_dataset(dataset: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(Error::io(&images))?;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        save_png(&scene.image, &dir.join(&rel))?;
        records.push(AnnotationRecord::from_scene(scene, rel));
    }
    write_jsonl(&dir.join(ANNOTATION_FILE), &records)?;
    let manifest = ManifestFile {
        name: dataset.name.clone(),
        weight: dataset.weight,
        annotations: ANNOTATION_FILE.into(),
        scenes: dataset.len(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(Error::io(&mpath))?;
    Ok(mpath)
}
