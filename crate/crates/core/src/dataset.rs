//! Dataset manifest (one JSON record per line) and WAV I/O for AIRs.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::room_sim::Air;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One AIR of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirRecord {
    /// Path of the WAV file, relative to the manifest's directory.
    pub air_path: String,
    pub room_id: u32,
    pub source_id: u32,
    pub receiver_id: u32,
    pub split: Split,
    pub dims: [f64; 3],
    pub wall_material_ids: [u32; 6],
    pub label_vector: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<AirRecord>,
    /// Directory that `air_path` entries are relative to.
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &AirRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn air_path(&self, record: &AirRecord) -> PathBuf {
        self.root.join(&record.air_path)
    }

    pub fn load_air(&self, record: &AirRecord) -> Result<Air> {
        let mut air = read_wav(self.air_path(record))?;
        air.room_id = record.room_id;
        air.source_id = record.source_id;
        air.receiver_id = record.receiver_id;
        Ok(air)
    }

    pub fn theta_tot(&self) -> usize {
        self.records.first().map_or(0, |r| r.label_vector.len())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Write to `path`; `root` is not stored, the manifest's directory is used on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Load a manifest file, or `manifest.jsonl` inside a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let reader = BufReader::new(std::fs::File::open(&path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: AirRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let theta = records.first().map_or(0, |r| r.label_vector.len());
        if records.iter().any(|r| r.label_vector.len() != theta) {
            return Err(Error::format(&path, "label vectors differ in length"));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, root })
    }
}

/// Write a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, air: &Air) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: air.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &v in &air.taps {
        w.write_sample(v as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// Read a mono WAV (float or integer PCM) into an [`Air`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Air> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono, found {} channels", spec.channels)));
    }
    let taps: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    Ok(Air { taps, sample_rate: spec.sample_rate, room_id: 0, source_id: 0, receiver_id: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let air = Air { taps: vec![0.0, 0.5, -0.25, 1e-3], sample_rate: 16000, room_id: 0, source_id: 0, receiver_id: 0 };
        write_wav(dir.path().join("a.wav"), &air).unwrap();
        let back = read_wav(dir.path().join("a.wav")).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in air.taps.iter().zip(&back.taps) {
            assert_eq!(*a as f32, *b as f32);
        }
        let m = DatasetManifest {
            records: vec![AirRecord {
                air_path: "a.wav".into(),
                room_id: 3,
                source_id: 1,
                receiver_id: 0,
                split: Split::Val,
                dims: [3.0, 4.0, 2.5],
                wall_material_ids: [0, 1, 2, 3, 4, 5],
                label_vector: vec![1, 0, 1],
            }],
            root: dir.path().to_path_buf(),
        };
        m.save(dir.path().join(MANIFEST_FILE)).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"split\":\"val\""));
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.load_air(&loaded.records[0]).unwrap().room_id, 3);
    }
}
