//! Classified point clouds and their two on-disk encodings.
//!
//! ASCII: one `x y z class` record per line; blank lines and lines starting
//! with `#` are skipped. Binary `PCB1`: magic, u64 count, then per point
//! three f64 and one u32, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub class: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-finite point {p:?}")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<Bounds> {
        let first = self.points.first()?;
        let mut b = Bounds {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        for p in &self.points[1..] {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        Some(b)
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            s.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, p.class));
        }
        s
    }

    pub fn from_ascii(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("line {}: expected `x y z class`", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            points.push(Point {
                x: num(f[0])?,
                y: num(f[1])?,
                z: num(f[2])?,
                class: f[3].parse().map_err(|_| bad())?,
            });
        }
        Self::new(points)
    }

    pub fn to_pcb(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.points.len() * 28);
        out.extend_from_slice(PCB_MAGIC);
        out.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            for v in [p.x, p.y, p.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&p.class.to_le_bytes());
        }
        out
    }

    pub fn from_pcb(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != PCB_MAGIC {
            return Err(Error::InvalidArgument("not a PCB1 point cloud".into()));
        }
        let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if count.checked_mul(28) != Some(body.len()) {
            return Err(Error::InvalidArgument(format!(
                "PCB1 header declares {count} points but {} payload bytes follow",
                body.len()
            )));
        }
        let f = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let points = body
            .chunks_exact(28)
            .map(|r| Point {
                x: f(&r[0..8]),
                y: f(&r[8..16]),
                z: f(&r[16..24]),
                class: u32::from_le_bytes(r[24..28].try_into().unwrap()),
            })
            .collect();
        Self::new(points)
    }

    /// Reads either encoding, recognising PCB1 by its magic.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(PCB_MAGIC) {
            Self::from_pcb(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::InvalidArgument(format!("{} is neither PCB1 nor text", path.display())))?;
            Self::from_ascii(&text)
        }
    }

    pub fn write_pcb(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pcb()).map_err(|e| Error::io(path, e))
    }

    pub fn write_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ascii()).map_err(|e| Error::io(path, e))
    }
}
