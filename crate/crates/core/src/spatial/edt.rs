//! Exact Euclidean distance transform with anisotropic voxels.
//!
//! Three separable passes of the 1D lower-envelope-of-parabolas transform on
//! squared distances, one per axis, each parallel over lines.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Squared distance transform of one line: `out[p] = min_q f[q] + w (p - q)^2`.
/// Infinite entries of `f` are treated as absent.
fn dt1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let (qf, rf) = (q as f64, r as f64);
                    let s = ((fq + w * qf * qf) - (f[r] + w * rf * rf)) / (2.0 * w * (qf - rf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = f[v[k]] + w * d * d;
    }
}

/// Runs `dt1d` along `axis` of a C-order `shape` buffer.
fn pass(data: &mut [f64], shape: [usize; 3], axis: usize, w: f64) {
    let [nz, ny, nx] = shape;
    match axis {
        2 => data.par_chunks_mut(nx).for_each_init(
            || (vec![0.0; nx], Vec::new(), Vec::new()),
            |(buf, v, z), line| {
                dt1d(line, w, buf, v, z);
                line.copy_from_slice(buf);
            },
        ),
        1 => data.par_chunks_mut(ny * nx).for_each_init(
            || (vec![0.0; ny], vec![0.0; ny], Vec::new(), Vec::new()),
            |(line, buf, v, z), slab| {
                for x in 0..nx {
                    for y in 0..ny {
                        line[y] = slab[y * nx + x];
                    }
                    dt1d(line, w, buf, v, z);
                    for y in 0..ny {
                        slab[y * nx + x] = buf[y];
                    }
                }
            },
        ),
        _ => {
            let plane = ny * nx;
            let src: &[f64] = data;
            let cols: Vec<Vec<f64>> = (0..plane)
                .into_par_iter()
                .map_init(
                    || (vec![0.0; nz], Vec::new(), Vec::new()),
                    |(line, v, z), i| {
                        for k in 0..nz {
                            line[k] = src[k * plane + i];
                        }
                        let mut out = vec![0.0; nz];
                        dt1d(line, w, &mut out, v, z);
                        out
                    },
                )
                .collect();
            for (i, col) in cols.iter().enumerate() {
                for k in 0..nz {
                    data[k * plane + i] = col[k];
                }
            }
        }
    }
}

/// Distance (micrometers) from every voxel center to the nearest voxel with
/// `foreground(voxel) == true`; zero on the foreground.
pub fn edt_from(
    shape: [usize; 3],
    voxel_size: [f64; 3],
    foreground: impl Fn(usize) -> bool + Sync,
) -> Result<Volume3D<f64>> {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).into_par_iter().map(|i| if foreground(i) { 0.0 } else { f64::INFINITY }).collect();
    if !d.contains(&0.0) {
        return Err(Error::EmptyStructure);
    }
    for axis in [2, 1, 0] {
        pass(&mut d, shape, axis, voxel_size[axis] * voxel_size[axis]);
    }
    d.par_iter_mut().for_each(|v| *v = v.sqrt());
    Volume3D::from_vec(shape, voxel_size, d)
}
