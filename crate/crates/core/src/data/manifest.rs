//! Dataset manifests.
//!
//! A manifest is a text file listing PGM image paths, one per line, relative
//! to the manifest's directory. Blank lines and `#` comments are skipped. An
//! optional `contours = <path>` line names the annotation CSV; it defaults to
//! `contours.csv` beside the manifest. Image ids are file stems.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::contours::parse_contours_within;
use super::pgm::{parse_pgm, GrayImage};
use super::roi::{crop_roi, gcn, RoiPatch, GCN_EPSILON};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub images: Vec<PathBuf>,
    pub contours: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Manifest> {
        let mut images = Vec::new();
        let mut contours = PathBuf::from("contours.csv");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if key.trim() != "contours" {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown key {:?}",
                        i + 1,
                        key.trim()
                    )));
                }
                contours = PathBuf::from(value.trim());
            } else {
                images.push(PathBuf::from(line));
            }
        }
        if images.is_empty() {
            return Err(Error::Data("manifest lists no images".into()));
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            images,
            contours,
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, root)
    }

    /// Reads every image and annotation, crops each annotated lesion to
    /// `size x size` and contrast-normalizes it.
    pub fn build_dataset(&self, size: usize) -> Result<Vec<RoiPatch>> {
        let mut images: BTreeMap<String, GrayImage> = BTreeMap::new();
        for rel in &self.images {
            let path = self.root.join(rel);
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("image path {} has no file stem", path.display())))?
                .to_string();
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = parse_pgm(&bytes)?;
            if images.insert(id.clone(), image).is_some() {
                return Err(Error::Data(format!("duplicate image id {id}")));
            }
        }
        let csv_path = self.root.join(&self.contours);
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let annotations =
            parse_contours_within(&text, |id| images.get(id).map(|im| (im.width, im.height)))?;
        annotations
            .iter()
            .map(|ann| {
                let image = images
                    .get(&ann.image_id)
                    .ok_or_else(|| Error::Data(format!("annotation for unknown image {}", ann.image_id)))?;
                Ok(gcn(&crop_roi(image, ann, size)?, GCN_EPSILON))
            })
            .collect()
    }
}
