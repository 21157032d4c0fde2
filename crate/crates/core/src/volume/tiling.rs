//! Patch decomposition of large volumes and reconstruction of per-patch
//! detections in the original frame.
//!
//! A volume of `n` voxels per axis is zero-padded by `l_pad` on both sides.
//! Input windows of `l_in` voxels are placed so that their output tiles
//! (`l_out_tile` voxels, `l_pad` in from the input start) are adjacent. The last
//! tile along an axis is shifted back to end exactly at the volume border, so it
//! may overlap its predecessor.
//!
//! All boxes in a [`PatchGrid`] are in padded voxel coordinates; subtract
//! `origin_offset` to get original voxel coordinates.

use serde::{Deserialize, Serialize};

use crate::coords::CoordSet;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TilingStrategy {
    /// Output tile equals the regressor output.
    #[serde(rename = "M_conv")]
    Conv,
    /// Output tile is the regressor output minus a supplementary margin.
    #[serde(rename = "M_peak")]
    Peak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub l_in: [usize; 3],
    /// One-sided number of voxels lost by the regressor per axis.
    pub conv_margin: [usize; 3],
    /// One-sided supplementary margin per axis, zero under `M_conv`.
    pub peak_margin: [usize; 3],
    pub strategy: TilingStrategy,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig::peak([64, 156, 156], [20; 3], [4; 3])
    }
}

impl TilingConfig {
    pub fn conv(l_in: [usize; 3], conv_margin: [usize; 3]) -> Self {
        TilingConfig { l_in, conv_margin, peak_margin: [0; 3], strategy: TilingStrategy::Conv }
    }

    pub fn peak(l_in: [usize; 3], conv_margin: [usize; 3], peak_margin: [usize; 3]) -> Self {
        TilingConfig { l_in, conv_margin, peak_margin, strategy: TilingStrategy::Peak }
    }

    /// Supplementary margin in voxels for a margin given in micrometers.
    pub fn margin_voxels(margin_um: f64, voxel_size: [f64; 3]) -> [usize; 3] {
        voxel_size.map(|s| (margin_um / s).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == TilingStrategy::Conv && self.peak_margin != [0; 3] {
            return Err(Error::InvalidConfig("M_conv tiling has no peak margin".into()));
        }
        for a in 0..3 {
            let lost = 2 * (self.conv_margin[a] + self.peak_margin[a]);
            if self.l_in[a] <= lost {
                return Err(Error::InvalidConfig(format!(
                    "axis {a}: l_in {} leaves no output after margins {}+{}",
                    self.l_in[a], self.conv_margin[a], self.peak_margin[a]
                )));
            }
        }
        Ok(())
    }

    pub fn l_out(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.l_in[a] - 2 * self.conv_margin[a])
    }

    pub fn l_out_tile(&self) -> [usize; 3] {
        let out = self.l_out();
        [0, 1, 2].map(|a| out[a] - 2 * self.peak_margin[a])
    }

    pub fn l_pad(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.conv_margin[a] + self.peak_margin[a])
    }

    pub fn l_overlap(&self) -> [usize; 3] {
        let tile = self.l_out_tile();
        [0, 1, 2].map(|a| self.l_in[a] - tile[a])
    }
}

/// Axis-aligned voxel box `[lo, lo + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [i64; 3],
    pub size: [usize; 3],
}

impl VoxelBox {
    pub fn hi(&self) -> [i64; 3] {
        [0, 1, 2].map(|a| self.lo[a] + self.size[a] as i64)
    }

    pub fn shifted(&self, by: [i64; 3]) -> VoxelBox {
        VoxelBox { lo: [0, 1, 2].map(|a| self.lo[a] + by[a]), size: self.size }
    }

    pub fn contains_voxel(&self, v: [i64; 3]) -> bool {
        let hi = self.hi();
        (0..3).all(|a| v[a] >= self.lo[a] && v[a] < hi[a])
    }

    /// Half-open containment of a micrometer position.
    pub fn contains_point(&self, pos: &[f64; 3], voxel_size: [f64; 3]) -> bool {
        let hi = self.hi();
        (0..3).all(|a| pos[a] >= self.lo[a] as f64 * voxel_size[a] && pos[a] < hi[a] as f64 * voxel_size[a])
    }

    pub fn num_voxels(&self) -> usize {
        self.size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub index: usize,
    /// Position in the patch lattice.
    pub grid_pos: [usize; 3],
    /// `l_in` window fed to the regressor.
    pub input: VoxelBox,
    /// `l_out` window the regressor predicts.
    pub cnn_output: VoxelBox,
    /// `l_out_tile` window kept from the prediction.
    pub output: VoxelBox,
    /// Part of `output` not already covered by a preceding patch.
    pub owned: VoxelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patches: Vec<Patch>,
    pub padded_shape: [usize; 3],
    pub origin_offset: [usize; 3],
    pub volume_shape: [usize; 3],
    pub counts: [usize; 3],
}

fn axis_origins(n: usize, tile: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile <= n {
        out.push(o);
        o += tile;
    }
    if out.last().is_none_or(|&l| l + tile < n) {
        out.push(n - tile);
    }
    out
}

pub fn plan_tiling(shape: [usize; 3], cfg: &TilingConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let tile = cfg.l_out_tile();
    let pad = cfg.l_pad();
    for a in 0..3 {
        if shape[a] + 2 * pad[a] < cfg.l_in[a] {
            return Err(Error::VolumeTooSmall { axis: a, size: shape[a], tile: tile[a] });
        }
    }
    let origins: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(shape[a], tile[a])).collect();
    // start of the owned part of each tile along each axis
    let owned_lo: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            origins[a]
                .iter()
                .enumerate()
                .map(|(k, &o)| if k == 0 { o } else { o.max(origins[a][k - 1] + tile[a]) })
                .collect()
        })
        .collect();
    let counts = [origins[0].len(), origins[1].len(), origins[2].len()];
    let mut patches = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[0] {
        for iy in 0..counts[1] {
            for ix in 0..counts[2] {
                let g = [iz, iy, ix];
                let o = [0, 1, 2].map(|a| origins[a][g[a]] as i64);
                let own = [0, 1, 2].map(|a| owned_lo[a][g[a]] as i64);
                let pad_i = pad.map(|p| p as i64);
                let input = VoxelBox { lo: o, size: cfg.l_in };
                let cnn_output =
                    VoxelBox { lo: [0, 1, 2].map(|a| o[a] + cfg.conv_margin[a] as i64), size: cfg.l_out() };
                let output = VoxelBox { lo: [0, 1, 2].map(|a| o[a] + pad_i[a]), size: tile };
                let owned = VoxelBox {
                    lo: [0, 1, 2].map(|a| own[a] + pad_i[a]),
                    size: [0, 1, 2].map(|a| (o[a] + tile[a] as i64 - own[a]) as usize),
                };
                patches.push(Patch { index: patches.len(), grid_pos: g, input, cnn_output, output, owned });
            }
        }
    }
    Ok(PatchGrid {
        patches,
        padded_shape: [0, 1, 2].map(|a| shape[a] + 2 * pad[a]),
        origin_offset: pad,
        volume_shape: shape,
        counts,
    })
}

impl PatchGrid {
    fn offset(&self) -> [i64; 3] {
        self.origin_offset.map(|o| -(o as i64))
    }

    /// A padded-frame box expressed in original voxel coordinates.
    pub fn to_original(&self, b: &VoxelBox) -> VoxelBox {
        b.shifted(self.offset())
    }

    /// Extracts a padded-frame window from an unpadded volume, zero outside.
    pub fn extract(&self, v: &Volume3D, b: &VoxelBox) -> Volume3D {
        v.crop(&self.to_original(b), 0.0)
    }

    /// Converts positions measured from the `cnn_output` window origin to
    /// positions measured from the `output` window origin.
    pub fn cnn_to_output_local(&self, patch: &Patch, c: &CoordSet, voxel_size: [f64; 3]) -> CoordSet {
        let shift = [0, 1, 2].map(|a| (patch.output.lo[a] - patch.cnn_output.lo[a]) as f64 * voxel_size[a]);
        let mut out = c.clone();
        for p in &mut out.points {
            for a in 0..3 {
                p[a] -= shift[a];
            }
        }
        out
    }

    /// The coordinates a perfect detector would report for each patch: every
    /// point inside the patch's regressor output, in output-local micrometers.
    pub fn split_coordinates(&self, coords: &CoordSet, voxel_size: [f64; 3]) -> Vec<CoordSet> {
        self.patches
            .iter()
            .map(|patch| {
                let win = self.to_original(&patch.cnn_output);
                let origin = self.to_original(&patch.output).lo;
                let mut sub = coords.filter(|i| win.contains_point(&coords.points[i], voxel_size));
                for p in &mut sub.points {
                    for a in 0..3 {
                        p[a] -= origin[a] as f64 * voxel_size[a];
                    }
                }
                sub
            })
            .collect()
    }
}

/// Maps per-patch detections (micrometers relative to each patch's output
/// window origin) back into the original volume.
///
/// Under `M_peak` a detection is kept only if it falls inside the part of the
/// output tile owned by its patch, so every location is reported by exactly one
/// patch. Under `M_conv` every detection inside the volume is kept. The result
/// is ordered by patch index, then by the per-patch order.
pub fn reconstruct_coordinates(
    per_patch: &[CoordSet],
    grid: &PatchGrid,
    cfg: &TilingConfig,
    voxel_size: [f64; 3],
) -> Result<CoordSet> {
    if per_patch.len() != grid.patches.len() {
        return Err(Error::InvalidConfig(format!(
            "{} coordinate sets for {} patches",
            per_patch.len(),
            grid.patches.len()
        )));
    }
    let whole = VoxelBox { lo: [0; 3], size: grid.volume_shape };
    let mut out = CoordSet::default();
    let mut first = true;
    for (patch, local) in grid.patches.iter().zip(per_patch) {
        let origin = grid.to_original(&patch.output).lo;
        let owned = grid.to_original(&patch.owned);
        let mut moved = local.clone();
        for p in &mut moved.points {
            for a in 0..3 {
                p[a] += origin[a] as f64 * voxel_size[a];
            }
        }
        let kept = moved.filter(|i| {
            let q = &moved.points[i];
            whole.contains_point(q, voxel_size)
                && (cfg.strategy == TilingStrategy::Conv || owned.contains_point(q, voxel_size))
        });
        if first {
            out = kept;
            first = false;
        } else {
            out.extend(&kept);
        }
    }
    Ok(out)
}
