//! Paired samples, the on-disk dataset layout, and batch preparation.
//!
//! A dataset directory holds `input/ID.png`, `gt/ID.png` and `ann/ID.json`,
//! where the annotation is `{"polygons": [{"points": [[x, y], ...]}, ...]}`.

pub mod glyphs;
mod prepare;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, OffsetBands, TextPolygon};
use crate::image::{Image, ImageError};
use crate::rtv::RtvError;

pub use prepare::{prepare_sample, prepare_samples, PreparedSample, StructureCache};
pub use synth::{synth_sample, BackgroundKind, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: invalid annotation JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("sample {id}: invalid polygon: {source}")]
    Polygon {
        id: String,
        #[source]
        source: GeometryError,
    },
    #[error("sample {0}: missing ground-truth image")]
    MissingGroundTruth(String),
    #[error("sample {0}: missing annotation file")]
    MissingAnnotation(String),
    #[error("sample {0}: input and ground truth differ in shape")]
    ShapeMismatch(String),
    #[error(transparent)]
    Rtv(#[from] RtvError),
    #[error("structure cache entry {0} is corrupt")]
    CacheCorrupt(PathBuf),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One training pair: the text image, its text-free counterpart, and the
/// text regions.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub i_in: Image,
    pub i_gt: Image,
    pub polygons: Vec<TextPolygon>,
}

impl AnnotatedSample {
    /// Checks that input and ground truth agree (to 8-bit rounding) everywhere
    /// outside the dilated outlines at `ratio`.
    pub fn is_consistent(&self, ratio: f64) -> Result<bool, GeometryError> {
        if self.i_in.shape() != self.i_gt.shape() {
            return Ok(false);
        }
        let bands = self
            .polygons
            .iter()
            .map(|p| OffsetBands::new(p, ratio))
            .collect::<Result<Vec<_>, _>>()?;
        let (h, w, c) = self.i_in.shape();
        for y in 0..h {
            for x in 0..w {
                let p = crate::geometry::pixel_center(y, x);
                if bands.iter().any(|b| b.outer.contains(p)) {
                    continue;
                }
                for ch in 0..c {
                    if (self.i_in.get(y, x, ch) - self.i_gt.get(y, x, ch)).abs() > 0.5 / 255.0 {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonRecord {
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub polygons: Vec<PolygonRecord>,
}

impl AnnotationFile {
    pub fn from_polygons(polys: &[TextPolygon]) -> Self {
        Self {
            polygons: polys
                .iter()
                .map(|p| PolygonRecord { points: p.coords() })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string(self).expect("annotation serializes");
        fs::write(path, text).map_err(|e| DataError::io(path, e))
    }

    pub fn to_polygons(&self, id: &str) -> Result<Vec<TextPolygon>, DataError> {
        self.polygons
            .iter()
            .map(|r| {
                TextPolygon::from_coords(&r.points).map_err(|source| DataError::Polygon {
                    id: id.to_string(),
                    source,
                })
            })
            .collect()
    }
}

pub fn save_dataset(samples: &[AnnotatedSample], dir: &Path) -> Result<(), DataError> {
    for sub in ["input", "gt", "ann"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    for s in samples {
        s.i_in
            .save_png(dir.join("input").join(format!("{}.png", s.id)))?;
        s.i_gt
            .save_png(dir.join("gt").join(format!("{}.png", s.id)))?;
        AnnotationFile::from_polygons(&s.polygons)
            .write(&dir.join("ann").join(format!("{}.json", s.id)))?;
    }
    Ok(())
}

/// Lazily loaded dataset: ids are discovered up front, samples are read on
/// iteration.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    ids: Vec<String>,
}

impl Dataset {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(&self, id: &str) -> Result<AnnotatedSample, DataError> {
        let gt_path = self.root.join("gt").join(format!("{id}.png"));
        if !gt_path.exists() {
            return Err(DataError::MissingGroundTruth(id.to_string()));
        }
        let ann_path = self.root.join("ann").join(format!("{id}.json"));
        if !ann_path.exists() {
            return Err(DataError::MissingAnnotation(id.to_string()));
        }
        let i_in = Image::load(self.root.join("input").join(format!("{id}.png")))?;
        let i_gt = Image::load(&gt_path)?;
        if i_in.shape() != i_gt.shape() {
            return Err(DataError::ShapeMismatch(id.to_string()));
        }
        let polygons = AnnotationFile::read(&ann_path)?.to_polygons(id)?;
        Ok(AnnotatedSample {
            id: id.to_string(),
            i_in,
            i_gt,
            polygons,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<AnnotatedSample, DataError>> + '_ {
        self.ids.iter().map(move |id| self.load(id))
    }

    pub fn load_all(&self) -> Result<Vec<AnnotatedSample>, DataError> {
        self.iter().collect()
    }
}

/// Opens a dataset directory. A directory without `input/` is an empty
/// dataset.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let input = dir.join("input");
    let mut ids = Vec::new();
    if input.is_dir() {
        for entry in fs::read_dir(&input).map_err(|e| DataError::io(&input, e))? {
            let path = entry.map_err(|e| DataError::io(&input, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
    } else if !dir.exists() {
        return Err(DataError::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset directory does not exist",
            ),
        ));
    }
    ids.sort();
    Ok(Dataset {
        root: dir.to_path_buf(),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.iter().count(), 0);
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        let samples: Vec<_> = (0..3).map(|i| synth_sample(&cfg, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&samples, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap().load_all().unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn missing_gt_names_the_id() {
        let cfg = SynthConfig::default();
        let s = synth_sample(&cfg, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(std::slice::from_ref(&s), dir.path()).unwrap();
        fs::remove_file(dir.path().join("gt").join(format!("{}.png", s.id))).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let err = ds.load_all().unwrap_err();
        assert!(matches!(&err, DataError::MissingGroundTruth(id) if id == &s.id));
        assert!(err.to_string().contains(&s.id));
    }

    #[test]
    fn zero_texts_means_identical_pair() {
        let cfg = SynthConfig {
            texts_per_image: (0, 0),
            ..SynthConfig::default()
        };
        let s = synth_sample(&cfg, 0);
        assert_eq!(s.i_in, s.i_gt);
        assert!(s.polygons.is_empty());
    }
}
