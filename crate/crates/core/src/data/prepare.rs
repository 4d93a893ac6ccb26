//! Turns annotated samples into training inputs: soft masks and structure
//! images, with structure images cached on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{AnnotatedSample, DataError};
use crate::exec::Exec;
use crate::geometry::{render_soft_mask_with, MaskMode, SoftMask};
use crate::image::{Image, StructureImage};
use crate::rtv::{rtv_smooth_with, RtvParams};

const MAGIC: &[u8; 4] = b"TWSC";
const HEADER_LEN: usize = 4 + 3 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub i_in: Image,
    pub i_gt: Image,
    pub m_s: SoftMask,
    pub s_in: StructureImage,
    pub s_gt: StructureImage,
}

/// Directory of smoothed images keyed by a hash of the source pixels and
/// the smoothing parameters.
#[derive(Debug, Clone)]
pub struct StructureCache {
    dir: PathBuf,
}

impl StructureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(image: &Image, params: &RtvParams) -> String {
        let (h, w, c) = image.shape();
        let mut hasher = Sha256::new();
        for d in [h, w, c] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in image.data() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(params.fingerprint());
        hex::encode(hasher.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.twsc"))
    }

    pub fn get(&self, key: &str) -> Result<Option<StructureImage>, DataError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(DataError::io(&path, e)),
        };
        decode(&bytes)
            .map(Some)
            .ok_or(DataError::CacheCorrupt(path))
    }

    pub fn put(&self, key: &str, image: &StructureImage) -> Result<(), DataError> {
        let path = self.path_for(key);
        let mut tmp =
            tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| DataError::io(&self.dir, e))?;
        tmp.write_all(&encode(image))
            .map_err(|e| DataError::io(tmp.path(), e))?;
        tmp.persist(&path)
            .map_err(|e| DataError::io(&path, e.error))?;
        Ok(())
    }

    pub fn get_or_compute(
        &self,
        exec: Exec,
        image: &Image,
        params: &RtvParams,
    ) -> Result<StructureImage, DataError> {
        let key = Self::key(image, params);
        if let Some(hit) = self.get(&key)? {
            if hit.shape() == image.shape() {
                return Ok(hit);
            }
        }
        let s = rtv_smooth_with(exec, image, params)?;
        self.put(&key, &s)?;
        Ok(s)
    }
}

fn encode(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + image.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<Image> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return None;
    }
    let dim = |i: usize| -> Option<usize> {
        let b: [u8; 8] = bytes[4 + 8 * i..12 + 8 * i].try_into().ok()?;
        usize::try_from(u64::from_le_bytes(b)).ok()
    };
    let (h, w, c) = (dim(0)?, dim(1)?, dim(2)?);
    let n = h.checked_mul(w)?.checked_mul(c)?;
    if bytes.len() != HEADER_LEN + n.checked_mul(4)? {
        return None;
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Image::from_vec(h, w, c, data).ok()
}

fn structure(
    exec: Exec,
    image: &Image,
    rtv: &RtvParams,
    cache: Option<&StructureCache>,
) -> Result<StructureImage, DataError> {
    match cache {
        Some(c) => c.get_or_compute(exec, image, rtv),
        None => Ok(rtv_smooth_with(exec, image, rtv)?),
    }
}

pub fn prepare_sample(
    exec: Exec,
    sample: &AnnotatedSample,
    ratio: f64,
    mode: MaskMode,
    rtv: &RtvParams,
    cache: Option<&StructureCache>,
) -> Result<PreparedSample, DataError> {
    if sample.i_in.shape() != sample.i_gt.shape() {
        return Err(DataError::ShapeMismatch(sample.id.clone()));
    }
    let (h, w, _) = sample.i_in.shape();
    let m_s =
        render_soft_mask_with(exec, &sample.polygons, h, w, ratio, mode).map_err(|source| {
            DataError::Polygon {
                id: sample.id.clone(),
                source,
            }
        })?;
    Ok(PreparedSample {
        id: sample.id.clone(),
        i_in: sample.i_in.clone(),
        i_gt: sample.i_gt.clone(),
        m_s,
        s_in: structure(exec, &sample.i_in, rtv, cache)?,
        s_gt: structure(exec, &sample.i_gt, rtv, cache)?,
    })
}

/// Prepares every sample, parallel across samples under `Exec::Parallel`.
pub fn prepare_samples(
    exec: Exec,
    samples: &[AnnotatedSample],
    ratio: f64,
    mode: MaskMode,
    rtv: &RtvParams,
    cache: Option<&StructureCache>,
) -> Result<Vec<PreparedSample>, DataError> {
    exec.map(samples, |s| {
        prepare_sample(Exec::Sequential, s, ratio, mode, rtv, cache)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sample, SynthConfig};

    fn fast_rtv() -> RtvParams {
        RtvParams {
            iterations: 2,
            ..RtvParams::default()
        }
    }

    #[test]
    fn cache_hit_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StructureCache::new(dir.path()).unwrap();
        let s = synth_sample(&SynthConfig::default(), 1);
        let rtv = fast_rtv();
        let fresh = prepare_sample(Exec::Sequential, &s, 0.9, MaskMode::Soft, &rtv, None).unwrap();
        let first = prepare_sample(
            Exec::Sequential,
            &s,
            0.9,
            MaskMode::Soft,
            &rtv,
            Some(&cache),
        )
        .unwrap();
        let second = prepare_sample(
            Exec::Sequential,
            &s,
            0.9,
            MaskMode::Soft,
            &rtv,
            Some(&cache),
        )
        .unwrap();
        assert_eq!(fresh, first);
        assert_eq!(first, second);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn params_change_invalidates() {
        let img = synth_sample(&SynthConfig::default(), 2).i_in;
        let a = StructureCache::key(&img, &fast_rtv());
        let b = StructureCache::key(
            &img,
            &RtvParams {
                lambda: 0.02,
                ..fast_rtv()
            },
        );
        assert_ne!(a, b);
    }

    #[test]
    fn corrupt_entry_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StructureCache::new(dir.path()).unwrap();
        let img = Image::filled(4, 4, 3, 0.5);
        let key = StructureCache::key(&img, &fast_rtv());
        cache.put(&key, &img).unwrap();
        let path = cache.path_for(&key);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(cache.get(&key), Err(DataError::CacheCorrupt(_))));
    }

    #[test]
    fn encode_round_trip() {
        let img = Image::from_fn(3, 5, 2, |y, x, c| (y * 10 + x + c) as f32 / 7.0);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let samples: Vec<_> = (0..3)
            .map(|i| synth_sample(&SynthConfig::default(), i))
            .collect();
        let rtv = fast_rtv();
        let a =
            prepare_samples(Exec::Sequential, &samples, 0.9, MaskMode::Soft, &rtv, None).unwrap();
        let b =
            prepare_samples(Exec::default(), &samples, 0.9, MaskMode::Soft, &rtv, None).unwrap();
        assert_eq!(a, b);
    }
}
