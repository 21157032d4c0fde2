//! Point sets in micrometers, ordered `(z, y, x)`, with optional per-point
//! probability and density-map value columns.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoordSet {
    pub points: Vec<[f64; 3]>,
    pub p: Option<Vec<f64>>,
    pub dm_value: Option<Vec<f64>>,
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    dz * dz + dy * dy + dx * dx
}

impl CoordSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        CoordSet { points, p: None, dm_value: None }
    }

    pub fn with_p(points: Vec<[f64; 3]>, p: Vec<f64>) -> Self {
        assert_eq!(points.len(), p.len());
        CoordSet { points, p: Some(p), dm_value: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Probability of point `i`; points without a probability column are
    /// deterministic detections and count as 1.
    pub fn prob(&self, i: usize) -> f64 {
        self.p.as_ref().map_or(1.0, |p| p[i])
    }

    /// Keeps the points for which `keep` returns true, carrying the optional columns.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> CoordSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> CoordSet {
        CoordSet {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            p: self.p.as_ref().map(|p| idx.iter().map(|&i| p[i]).collect()),
            dm_value: self.dm_value.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Appends `other`. Optional columns survive only if both sides carry them.
    pub fn extend(&mut self, other: &CoordSet) {
        let n = self.len();
        self.points.extend_from_slice(&other.points);
        self.p = match (self.p.take(), &other.p) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(_)) if n == 0 => other.p.clone(),
            _ => None,
        };
        self.dm_value = match (self.dm_value.take(), &other.dm_value) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(_)) if n == 0 => other.dm_value.clone(),
            _ => None,
        };
    }

    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = dist(&self.points[i], &self.points[j]);
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    }

    /// CSV with header `z_um,y_um,x_um[,p][,dm_value]`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["z_um", "y_um", "x_um"];
        if self.p.is_some() {
            header.push("p");
        }
        if self.dm_value.is_some() {
            header.push("dm_value");
        }
        wr.write_record(&header)?;
        for (i, pt) in self.points.iter().enumerate() {
            let mut rec: Vec<String> = pt.iter().map(|v| v.to_string()).collect();
            if let Some(p) = &self.p {
                rec.push(p[i].to_string());
            }
            if let Some(v) = &self.dm_value {
                rec.push(v[i].to_string());
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<CoordSet> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (z, y, x) = match (col("z_um"), col("y_um"), col("x_um")) {
            (Some(z), Some(y), Some(x)) => (z, y, x),
            _ => return Err(Error::Format("coordinate CSV needs z_um,y_um,x_um columns".into())),
        };
        let pc = col("p");
        let vc = col("dm_value");
        let mut out = CoordSet { points: Vec::new(), p: pc.map(|_| Vec::new()), dm_value: vc.map(|_| Vec::new()) };
        for rec in rd.records() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad number in CSV row {rec:?}")))
            };
            out.points.push([num(z)?, num(y)?, num(x)?]);
            if let (Some(c), Some(v)) = (pc, out.p.as_mut()) {
                v.push(num(c)?);
            }
            if let (Some(c), Some(v)) = (vc, out.dm_value.as_mut()) {
                v.push(num(c)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CoordSet> {
        let f = std::fs::File::open(path)?;
        CoordSet::read_csv(std::io::BufReader::new(f))
    }
}
