use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VelvetError};

/// Dense single-channel grid stored z-major, then y, then x.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[z, y, x]` extents.
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(VelvetError::ShapeMismatch(format!(
                "volume dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn cube(side: usize, data: Vec<f32>) -> Result<Self> {
        Self::new([side; 3], data)
    }

    pub fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(z, y, x)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Raw scan as a stack of `S` frames of `H' x W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub slices: Volume,
}

impl VolumeRecord {
    pub fn num_slices(&self) -> usize {
        self.slices.dims[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub id: String,
    /// `[S, H', W']`
    pub shape: [usize; 3],
    pub dtype: String,
}

/// Write `dir/meta.json` and `dir/volume.raw` (little-endian f32, z-major).
pub fn write_volume_dir(dir: &Path, id: &str, vol: &Volume) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = VolumeMeta { id: id.to_string(), shape: vol.dims, dtype: "f32".into() };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("volume.raw"))?);
    f.write_all(&vol.to_le_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_volume_dir(dir: &Path) -> Result<VolumeRecord> {
    let meta: VolumeMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    if meta.dtype != "f32" {
        return Err(VelvetError::Data(format!("{}: unsupported dtype {}", meta.id, meta.dtype)));
    }
    let bytes = std::fs::read(dir.join("volume.raw"))?;
    let expected = meta.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(VelvetError::Data(format!(
            "{}: volume.raw has {} bytes, shape {:?} needs {expected}",
            meta.id,
            bytes.len(),
            meta.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(VolumeRecord { id: meta.id, slices: Volume::new(meta.shape, data)? })
}

/// Scan directories under `root`, sorted by directory name.
pub fn list_volume_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// One scan id per line; blank lines ignored.
pub fn read_exclusion_list(path: &Path) -> Result<HashSet<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
