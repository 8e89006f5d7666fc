use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Time-major `frames × dim` matrix of acoustic features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    pub frame_shift_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "D")]
    dim: usize,
    frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, frame_shift_ms: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::invalid("feature matrix needs T >= 1 and D >= 1"));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} values for {frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(FeatureMatrix {
            frames,
            dim,
            data,
            frame_shift_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.dim + d]
    }

    /// Linearly interpolated frame at fractional time `pos` (clamped).
    fn sample(&self, pos: f64, out: &mut [f64]) {
        let pos = pos.clamp(0.0, (self.frames - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(self.frames - 1);
        let w = pos - lo as f64;
        for (d, o) in out.iter_mut().enumerate() {
            let a = self.get(lo, d);
            *o = if w == 0.0 {
                a
            } else {
                a + (self.get(hi, d) - a) * w
            };
        }
    }

    /// JSON header line `{"T":..,"D":..,"frame_shift_ms":..}` followed by one
    /// line of space-separated values per frame.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            frames: self.frames,
            dim: self.dim,
            frame_shift_ms: self.frame_shift_ms,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for t in 0..self.frames {
            let row: Vec<String> = self.frame(t).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("missing feature header".into())),
        };
        let mut data = Vec::with_capacity(header.frames * header.dim);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|e| Error::Format(e.to_string()))?);
            }
        }
        FeatureMatrix::new(header.frames, header.dim, data, header.frame_shift_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecAugmentParams {
    /// Maximum time-warp displacement in frames.
    pub warp: usize,
    /// Maximum frequency-mask width.
    pub freq_mask: usize,
    /// Maximum time-mask width.
    pub time_mask: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
}

impl Default for SpecAugmentParams {
    fn default() -> Self {
        SpecAugmentParams {
            warp: 5,
            freq_mask: 30,
            time_mask: 40,
            n_freq_masks: 1,
            n_time_masks: 1,
        }
    }
}

/// Time warp around the midpoint anchor, then frequency and time masking with
/// zero fill.
pub fn spec_augment(
    feat: &FeatureMatrix,
    p: SpecAugmentParams,
    seed: u64,
) -> Result<FeatureMatrix> {
    let (t_len, d_len) = (feat.frames, feat.dim);
    if p.freq_mask > 0 && p.freq_mask >= d_len {
        return Err(Error::invalid(format!(
            "frequency mask {} >= D={d_len}",
            p.freq_mask
        )));
    }
    if p.time_mask > 0 && p.time_mask >= t_len {
        return Err(Error::invalid(format!(
            "time mask {} >= T={t_len}",
            p.time_mask
        )));
    }
    if p.warp > 0 && 2 * p.warp >= t_len {
        return Err(Error::invalid(format!(
            "time warp {} too large for T={t_len}",
            p.warp
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = feat.clone();

    if p.warp > 0 && t_len >= 3 {
        let w = p.warp as i64;
        let anchor = (t_len / 2) as f64;
        let shift = rng.gen_range(-w..=w) as f64;
        let target = (anchor + shift).clamp(1.0, (t_len - 2) as f64);
        let last = (t_len - 1) as f64;
        let mut row = vec![0.0; d_len];
        for t in 0..t_len {
            let tf = t as f64;
            let src = if tf <= target {
                tf * anchor / target
            } else {
                anchor + (tf - target) * (last - anchor) / (last - target)
            };
            feat.sample(src, &mut row);
            out.data[t * d_len..(t + 1) * d_len].copy_from_slice(&row);
        }
    }
    for _ in 0..p.n_freq_masks {
        let f = rng.gen_range(0..=p.freq_mask);
        let f0 = rng.gen_range(0..=d_len - f);
        for t in 0..t_len {
            out.data[t * d_len + f0..t * d_len + f0 + f].fill(0.0);
        }
    }
    for _ in 0..p.n_time_masks {
        let w = rng.gen_range(0..=p.time_mask);
        let t0 = rng.gen_range(0..=t_len - w);
        out.data[t0 * d_len..(t0 + w) * d_len].fill(0.0);
    }
    Ok(out)
}

/// Feature-domain speed perturbation: `round(T / factor)` output frames, frame
/// `i` interpolated at source time `i * factor`.
pub fn speed_perturb(feat: &FeatureMatrix, factor: f64) -> Result<FeatureMatrix> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!(
            "speed factor must be positive, got {factor}"
        )));
    }
    let out_len = (feat.frames as f64 / factor).round() as usize;
    if out_len == 0 {
        return Err(Error::invalid("speed perturbation yields zero frames"));
    }
    let mut data = vec![0.0; out_len * feat.dim];
    for (i, row) in data.chunks_mut(feat.dim).enumerate() {
        feat.sample(i as f64 * factor, row);
    }
    FeatureMatrix::new(out_len, feat.dim, data, feat.frame_shift_ms)
}
