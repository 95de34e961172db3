//! The dense (time x space) data carrier shared by all modules, with its
//! binary file format and CSV export.

use crate::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"STSD";
const VERSION: u32 = 1;

/// Dense matrix of potentials u(t,s), row-major over time.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalField {
    pub n_time: usize,
    pub n_space: usize,
    pub values: Vec<f64>,
    /// Recording step in ms.
    pub dt: f64,
}

impl SpatioTemporalField {
    pub fn zeros(n_time: usize, n_space: usize, dt: f64) -> Self {
        SpatioTemporalField {
            n_time,
            n_space,
            values: vec![0.0; n_time * n_space],
            dt,
        }
    }

    pub fn new(n_time: usize, n_space: usize, values: Vec<f64>, dt: f64) -> Result<Self> {
        if values.len() != n_time * n_space {
            return Err(Error::ShapeMismatch(format!(
                "field storage {} != {} x {}",
                values.len(),
                n_time,
                n_space
            )));
        }
        Ok(SpatioTemporalField {
            n_time,
            n_space,
            values,
            dt,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_space..(t + 1) * self.n_space]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.n_space..(t + 1) * self.n_space]
    }

    /// Rows [t0, t1) as a new field.
    pub fn slice_time(&self, t0: usize, t1: usize) -> SpatioTemporalField {
        SpatioTemporalField {
            n_time: t1 - t0,
            n_space: self.n_space,
            values: self.values[t0 * self.n_space..t1 * self.n_space].to_vec(),
            dt: self.dt,
        }
    }

    pub fn max_abs_diff(&self, other: &SpatioTemporalField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n_time as u64).to_le_bytes())?;
        w.write_all(&(self.n_space as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "field file",
                detail: "bad magic bytes".into(),
            });
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format {
                what: "field file",
                detail: format!("unsupported version {version}"),
            });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n_time = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let n_space = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        let mut values = vec![0.0; n_time * n_space];
        for v in &mut values {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        SpatioTemporalField::new(n_time, n_space, values, dt)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,s,value")?;
        for t in 0..self.n_time {
            for s in 0..self.n_space {
                writeln!(w, "{},{},{}", t, s, self.values[t * self.n_space + s])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let bad = || Error::Format {
                what: "field csv",
                detail: format!("line {}", i + 1),
            };
            let t: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let s: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let v: f64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            entries.push((t, s, v));
        }
        let n_time = entries.iter().map(|e| e.0).max().map_or(0, |m| m + 1);
        let n_space = entries.iter().map(|e| e.1).max().map_or(0, |m| m + 1);
        let mut values = vec![0.0; n_time * n_space];
        for (t, s, v) in entries {
            values[t * n_space + s] = v;
        }
        SpatioTemporalField::new(n_time, n_space, values, 1.0)
    }
}
