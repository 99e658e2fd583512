//! Framed log-power spectra of AIR taps: the detector's input.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::room_sim::Air;

/// Floor added to the power before the logarithm.
pub const POWER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann if len < 2 => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hann" => Some(Window::Hann),
            "rect" | "rectangular" => Some(Window::Rectangular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub target_duration_s: f64,
    pub n_fft: usize,
    pub window: Window,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { frame_len_s: 0.003, hop_s: 0.0015, target_duration_s: 0.2, n_fft: 64, window: Window::Hann }
    }
}

impl FeatureConfig {
    /// `(frame length, hop, padded signal length)` in samples.
    pub fn sizes(&self, sample_rate: u32) -> (usize, usize, usize) {
        let fs = sample_rate as f64;
        (
            (self.frame_len_s * fs).round() as usize,
            (self.hop_s * fs).round() as usize,
            (self.target_duration_s * fs).round() as usize,
        )
    }

    /// Output shape `(frames, bins)` for a sample rate.
    pub fn shape(&self, sample_rate: u32) -> (usize, usize) {
        let (l, h, n) = self.sizes(sample_rate);
        let t = if n >= l && h > 0 { (n - l) / h + 1 } else { 0 };
        (t, self.n_fft / 2 + 1)
    }
}

/// Pad or truncate to the target duration from the first sample and cut into
/// overlapping frames.
pub fn frame_signal(air: &Air, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    if air.taps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (l, h, n) = cfg.sizes(air.sample_rate);
    if l < 2 || h == 0 {
        return Err(Error::Config(format!("frame of {l} samples / hop {h} too short at {} Hz", air.sample_rate)));
    }
    if n < l {
        return Err(Error::Config("target duration shorter than one frame".into()));
    }
    let mut padded = vec![0.0; n];
    let m = n.min(air.taps.len());
    padded[..m].copy_from_slice(&air.taps[..m]);
    let t = (n - l) / h + 1;
    Ok((0..t).map(|i| padded[i * h..i * h + l].to_vec()).collect())
}

/// `ln(|X[k]|^2 + 1e-12)` for `k = 0..=n_fft/2` of the windowed, zero-padded frame.
pub fn log_power_spectrum(frame: &[f64], n_fft: usize, window: Window) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    log_power_with(frame, n_fft, &window.coefficients(frame.len()), fft.as_ref())
}

fn log_power_with(frame: &[f64], n_fft: usize, window: &[f64], fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    assert!(n_fft >= frame.len(), "n_fft {} shorter than frame {}", n_fft, frame.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(window) {
        b.re = x * w;
    }
    fft.process(&mut buf);
    buf[..=n_fft / 2].iter().map(|c| (c.norm_sqr() + POWER_FLOOR).ln()).collect()
}

/// `T x F` log-power matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    const MAGIC: [u8; 4] = *b"MDFT";

    /// Cache layout: 16-byte header (magic, T, F, reserved, u32 LE) then
    /// row-major f32 LE values.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.values.len());
        bytes.extend_from_slice(&Self::MAGIC);
        bytes.extend_from_slice(&(self.frames as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.bins as u32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for &v in &self.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    /// Read a cache file; returns `(frames, bins, values)`.
    pub fn read_cache(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || bytes[..4] != Self::MAGIC {
            return Err(Error::format(path, "not a feature cache"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (t, f) = (word(4), word(8));
        if bytes.len() != 16 + 4 * t * f {
            return Err(Error::format(path, "truncated feature cache"));
        }
        let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((t, f, values))
    }
}

pub fn extract_features(air: &Air, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let frames = frame_signal(air, cfg)?;
    let (l, _, _) = cfg.sizes(air.sample_rate);
    if cfg.n_fft < l {
        return Err(Error::Config(format!("n_fft {} shorter than frame length {l}", cfg.n_fft)));
    }
    let window = cfg.window.coefficients(l);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut values = Vec::with_capacity(frames.len() * bins);
    for frame in &frames {
        values.extend(log_power_with(frame, cfg.n_fft, &window, fft.as_ref()));
    }
    Ok(FeatureMatrix {
        values,
        frames: frames.len(),
        bins,
        frame_len_s: cfg.frame_len_s,
        hop_s: cfg.hop_s,
        n_fft: cfg.n_fft,
        sample_rate: air.sample_rate,
    })
}

/// Per-bin standardization statistics, fitted on training features only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for fm in features {
            if sum.is_empty() {
                sum = vec![0.0; fm.bins];
                sq = vec![0.0; fm.bins];
            } else if fm.bins != sum.len() {
                return Err(Error::ShapeMismatch("feature bin counts differ".into()));
            }
            for t in 0..fm.frames {
                for (f, &v) in fm.row(t).iter().enumerate() {
                    sum[f] += v;
                    sq[f] += v * v;
                }
            }
            count += fm.frames;
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(bins: usize) -> Self {
        Self { mean: vec![0.0; bins], std: vec![1.0; bins] }
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Vec<f64> {
        fm.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = i % fm.bins;
                (v - self.mean[f]) / self.std[f]
            })
            .collect()
    }
}
