//! Raw little-endian f32 volumes with a JSON sidecar:
//! `name.raw` holds the samples, `name.json` holds
//! `{"shape": [nz, ny, nx], "voxel_size_um": [sz, sy, sx]}`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub voxel_size_um: [f64; 3],
}

pub(crate) fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn read_sidecar(raw: impl AsRef<Path>) -> Result<VolumeHeader> {
    let f = std::fs::File::open(sidecar_path(raw.as_ref()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

impl Volume3D<f32> {
    pub fn header(&self) -> VolumeHeader {
        VolumeHeader { shape: self.shape(), voxel_size_um: self.voxel_size() }
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.len() * 4);
        for v in self.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R, header: &VolumeHeader) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let n: usize = header.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!("raw volume has {} bytes, expected {}", bytes.len(), n * 4)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Volume3D::from_vec(header.shape, header.voxel_size_um, data)
    }

    /// Writes `path` (raw samples) and the sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_raw(BufWriter::new(std::fs::File::create(path)?))?;
        let side = std::fs::File::create(sidecar_path(path))?;
        serde_json::to_writer(BufWriter::new(side), &self.header())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header = read_sidecar(path)?;
        Volume3D::read_raw(BufReader::new(std::fs::File::open(path)?), &header)
    }
}
