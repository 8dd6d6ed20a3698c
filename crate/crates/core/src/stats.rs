//! Dataset statistics: height histograms, per-pixel mean height, class
//! distributions per group and a long-tail summary.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts per `[k·w, (k+1)·w)` bin, keyed by `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: BTreeMap<i64, u64>,
}

impl Histogram {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::InvalidArgument(format!("bin width {bin_width} must be positive")));
        }
        Ok(Self {
            bin_width,
            bins: BTreeMap::new(),
        })
    }

    pub fn add(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            *self.bins.entry((v / self.bin_width).floor() as i64).or_insert(0) += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.values().sum()
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if other.bin_width != self.bin_width {
            return Err(Error::InvalidArgument("histograms have different bin widths".into()));
        }
        for (&k, &n) in &other.bins {
            *self.bins.entry(k).or_insert(0) += n;
        }
        Ok(())
    }

    /// Count with values in `[lo, hi)`, for bin-aligned bounds.
    pub fn mass_between(&self, lo: f64, hi: f64) -> u64 {
        self.bins
            .iter()
            .filter(|(&k, _)| {
                let start = k as f64 * self.bin_width;
                start >= lo && start < hi
            })
            .map(|(_, &n)| n)
            .sum()
    }

    fn center(&self, k: i64) -> f64 {
        (k as f64 + 0.5) * self.bin_width
    }
}

pub fn height_histogram<'a>(tiles: impl IntoIterator<Item = &'a [f32]>, bin_width: f64) -> Result<Histogram> {
    let mut h = Histogram::new(bin_width)?;
    for t in tiles {
        h.add(t.iter().map(|&v| v as f64));
    }
    Ok(h)
}

/// Per-pixel mean over equally sized tiles, accumulated incrementally.
pub fn spatial_mean_map<'a>(tiles: impl IntoIterator<Item = &'a [f32]>) -> Result<Vec<f64>> {
    let mut mean: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for t in tiles {
        n += 1;
        match &mut mean {
            None => mean = Some(t.iter().map(|&v| v as f64).collect()),
            Some(m) => {
                if m.len() != t.len() {
                    return Err(Error::MixedTileSizes);
                }
                for (acc, &v) in m.iter_mut().zip(t) {
                    *acc += (v as f64 - *acc) / n as f64;
                }
            }
        }
    }
    mean.ok_or_else(|| Error::InvalidArgument("no tiles".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Split,
    City,
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(GroupKey::Split),
            "city" => Ok(GroupKey::City),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// Per-class pixel counts and fractions of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

/// Class fractions per group, ignoring labels outside `0..classes`.
/// Groups without any counted pixel are omitted.
pub fn class_distribution<'a>(tiles: impl IntoIterator<Item = (&'a str, &'a [u8])>, classes: usize) -> BTreeMap<String, ClassShare> {
    let mut counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (group, labels) in tiles {
        let row = counts.entry(group.to_string()).or_insert_with(|| vec![0; classes]);
        for &l in labels {
            if (l as usize) < classes {
                row[l as usize] += 1;
            }
        }
    }
    counts
        .into_iter()
        .filter_map(|(g, c)| {
            let total: u64 = c.iter().sum();
            (total > 0).then(|| {
                let fractions = c.iter().map(|&n| n as f64 / total as f64).collect();
                (g, ClassShare { counts: c, fractions })
            })
        })
        .collect()
}

/// Pearson chi-squared statistic of the group × class contingency table.
pub fn chi_squared(table: &BTreeMap<String, ClassShare>) -> f64 {
    let rows: Vec<&Vec<u64>> = table.values().map(|s| &s.counts).collect();
    let Some(first) = rows.first() else { return 0.0 };
    let classes = first.len();
    let total: f64 = rows.iter().flat_map(|r| r.iter()).map(|&n| n as f64).sum();
    let col: Vec<f64> = (0..classes).map(|c| rows.iter().map(|r| r[c] as f64).sum()).collect();
    let mut chi = 0.0;
    for r in &rows {
        let row_total: f64 = r.iter().map(|&n| n as f64).sum();
        for c in 0..classes {
            let expected = row_total * col[c] / total;
            if expected > 0.0 {
                let d = r[c] as f64 - expected;
                chi += d * d / expected;
            }
        }
    }
    chi
}

/// Largest total-variation distance `½·Σ|p − q|` between the class
/// fractions of any two groups; 0 with fewer than two groups.
pub fn max_total_variation(table: &BTreeMap<String, ClassShare>) -> f64 {
    let rows: Vec<&Vec<f64>> = table.values().map(|s| &s.fractions).collect();
    let mut worst = 0.0f64;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let tv = 0.5 * a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>();
            worst = worst.max(tv);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailReport {
    pub count: u64,
    pub mean: f64,
    pub median: f64,
    pub skewness: f64,
    pub long_tailed: bool,
}

/// Moments are taken at bin centres; the median interpolates linearly
/// inside its bin; skewness is the adjusted Fisher-Pearson coefficient.
/// The flag needs mean > median and positive skewness beyond a `1e-9`
/// relative margin, so exactly symmetric data is not flagged by rounding.
pub fn long_tail_report(h: &Histogram) -> Result<LongTailReport> {
    let n = h.total();
    if n == 0 {
        return Err(Error::InvalidArgument("empty histogram".into()));
    }
    let nf = n as f64;
    let mean = h.bins.iter().map(|(&k, &c)| h.center(k) * c as f64).sum::<f64>() / nf;
    let (mut m2, mut m3) = (0.0, 0.0);
    for (&k, &c) in &h.bins {
        let d = h.center(k) - mean;
        m2 += c as f64 * d * d;
        m3 += c as f64 * d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    let skewness = if n > 2 && m2 > 0.0 {
        (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * m3 / m2.powf(1.5)
    } else {
        0.0
    };
    let half = nf / 2.0;
    let mut cum = 0.0;
    let mut median = mean;
    for (&k, &c) in &h.bins {
        let next = cum + c as f64;
        if next >= half {
            let frac = (half - cum) / c as f64;
            median = (k as f64 + frac) * h.bin_width;
            break;
        }
        cum = next;
    }
    let scale = mean.abs().max(median.abs()).max(h.bin_width);
    Ok(LongTailReport {
        count: n,
        mean,
        median,
        skewness,
        long_tailed: mean - median > 1e-9 * scale && skewness > 1e-9,
    })
}

/// Writes a binary `P5` greyscale image, mapping `[min, max]` to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], width: usize, height: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(values, width, height)?).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "pgm",
            detail: format!("{} values for {width}×{height}", values.len()),
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    Ok(out)
}
