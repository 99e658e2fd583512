//! Material absorption data and the reflection/absorption relations.
//!
//! A material is described by its energy absorption coefficient in eight
//! octave bands. The material file is line oriented:
//!
//! ```text
//! # comment
//! id;name;a1,a2,a3,a4,a5,a6,a7,a8
//! ```
//!
//! Coefficients must lie strictly inside `(0, 1)`. Values on or outside the
//! boundary are rejected rather than clamped.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of octave bands per absorption spectrum.
pub const N_BANDS: usize = 8;

/// Default band centers in Hz. The eighth band is the upper-edge band above
/// 8 kHz (centered one half-octave step past the 8 kHz band edge).
pub const DEFAULT_BAND_CENTERS_HZ: [f64; N_BANDS] = [
    125.0,
    250.0,
    500.0,
    1000.0,
    2000.0,
    4000.0,
    8000.0,
    8000.0 * std::f64::consts::SQRT_2,
];

/// Energy absorption coefficients in [`N_BANDS`] octave bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionSpectrum {
    coefficients: [f64; N_BANDS],
    band_centers: [f64; N_BANDS],
}

impl AbsorptionSpectrum {
    /// Validates `0 < a < 1` for every coefficient and uses the default band centers.
    pub fn new(coefficients: [f64; N_BANDS]) -> Result<Self> {
        Self::with_band_centers(coefficients, DEFAULT_BAND_CENTERS_HZ)
    }

    pub fn with_band_centers(coefficients: [f64; N_BANDS], band_centers: [f64; N_BANDS]) -> Result<Self> {
        for &a in &coefficients {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::DomainError { value: a, lo: 0.0, hi: 1.0 });
            }
        }
        if band_centers.windows(2).any(|w| !(w[1] > w[0])) || band_centers[0] <= 0.0 {
            return Err(Error::Config("band centers must be positive and strictly increasing".into()));
        }
        Ok(Self { coefficients, band_centers })
    }

    /// Uniform absorption in all bands.
    pub fn flat(alpha: f64) -> Result<Self> {
        Self::new([alpha; N_BANDS])
    }

    pub fn coefficients(&self) -> &[f64; N_BANDS] {
        &self.coefficients
    }

    pub fn band_centers(&self) -> &[f64; N_BANDS] {
        &self.band_centers
    }

    /// Per-band reflection factor magnitudes `sqrt(1 - a)`.
    pub fn reflection_magnitudes(&self) -> [f64; N_BANDS] {
        self.coefficients.map(|a| (1.0 - a).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub id: u32,
    pub name: String,
    pub spectrum: AbsorptionSpectrum,
}

/// An ordered, non-empty list of materials with unique ids and names.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDatabase {
    materials: Vec<Material>,
}

impl MaterialDatabase {
    pub fn new(materials: Vec<Material>) -> Result<Self> {
        if materials.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for (i, m) in materials.iter().enumerate() {
            if m.name.trim().is_empty() {
                return Err(Error::MalformedRecord { line: i + 1, reason: "empty name".into() });
            }
            if !ids.insert(m.id) {
                return Err(Error::DuplicateId { line: i + 1, id: m.id });
            }
            if !names.insert(m.name.clone()) {
                return Err(Error::DuplicateName { line: i + 1, name: m.name.clone() });
            }
        }
        Ok(Self { materials })
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Material> {
        self.materials.iter().find(|m| m.id == id)
    }

    /// Position of the material with `id` in database order.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.materials.iter().position(|m| m.id == id)
    }

    /// Spectra as an `n x 8` row list, in database order.
    pub fn spectra_matrix(&self) -> Vec<[f64; N_BANDS]> {
        self.materials.iter().map(|m| *m.spectrum.coefficients()).collect()
    }

    /// Serialize in the canonical material-file layout.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.materials {
            out.push_str(&format_record(m.id, &m.name, m.spectrum.coefficients()));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub(crate) fn format_record(id: u32, name: &str, coefficients: &[f64; N_BANDS]) -> String {
    let mut s = format!("{id};{name};");
    for (i, a) in coefficients.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{a}").unwrap();
    }
    s
}

/// Parse one `id;name;a1,...,a8` record. `line` is 1-based, for diagnostics.
pub(crate) fn parse_record(text: &str, line: usize) -> Result<Material> {
    let malformed = |reason: &str| Error::MalformedRecord { line, reason: reason.to_string() };
    let fields: Vec<&str> = text.split(';').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(malformed(&format!("expected 3 ';'-separated fields, found {}", fields.len())));
    }
    let id: u32 = fields[0].parse().map_err(|_| malformed("id is not a non-negative integer"))?;
    let name = fields[1];
    if name.is_empty() {
        return Err(malformed("empty name"));
    }
    let values: Vec<&str> = fields[2].split(',').map(str::trim).collect();
    if values.len() != N_BANDS {
        return Err(malformed(&format!("expected {N_BANDS} coefficients, found {}", values.len())));
    }
    let mut coefficients = [0.0; N_BANDS];
    for (slot, v) in coefficients.iter_mut().zip(&values) {
        let a: f64 = v.parse().map_err(|_| malformed(&format!("'{v}' is not a number")))?;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::CoefficientOutOfRange { line, name: name.to_string(), value: a });
        }
        *slot = a;
    }
    Ok(Material { id, name: name.to_string(), spectrum: AbsorptionSpectrum::new(coefficients)? })
}

/// Parse a material file from memory.
pub fn parse_materials(text: &str) -> Result<MaterialDatabase> {
    let mut materials = Vec::new();
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let m = parse_record(trimmed, line)?;
        if !ids.insert(m.id) {
            return Err(Error::DuplicateId { line, id: m.id });
        }
        if !names.insert(m.name.clone()) {
            return Err(Error::DuplicateName { line, name: m.name });
        }
        materials.push(m);
    }
    MaterialDatabase::new(materials)
}

/// Load a material file from disk.
pub fn load_materials(path: impl AsRef<Path>) -> Result<MaterialDatabase> {
    let text = std::fs::read_to_string(path)?;
    parse_materials(&text)
}

/// Reflection factor magnitude `|R| = sqrt(1 - alpha)`.
pub fn reflection_magnitude(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::DomainError { value: alpha, lo: 0.0, hi: 1.0 });
    }
    Ok((1.0 - alpha).sqrt())
}

/// Energy absorption coefficient `alpha = 1 - |R|^2`.
pub fn absorption_of(r_mag: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_mag) {
        return Err(Error::DomainError { value: r_mag, lo: 0.0, hi: 1.0 });
    }
    Ok(1.0 - r_mag * r_mag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO: &str = "0;Brick;0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n\
                       1;Carpet;0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9\n";

    #[test]
    fn two_records() {
        let db = parse_materials(TWO).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(db.materials()[0].id, 0);
        assert_eq!(db.materials()[1].id, 1);
        assert_eq!(db.materials()[1].spectrum.coefficients()[7], 0.9);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = format!("# header\n\n{TWO}# trailer\n");
        assert_eq!(parse_materials(&text).unwrap().len(), 2);
    }

    #[test]
    fn boundary_coefficient_rejected() {
        let text = "0;Mirror;1.0,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n";
        match parse_materials(text) {
            Err(Error::CoefficientOutOfRange { line: 1, value, .. }) => assert_eq!(value, 1.0),
            other => panic!("unexpected {other:?}"),
        }
        let text = "0;Void;0.0,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n";
        assert!(matches!(parse_materials(text), Err(Error::CoefficientOutOfRange { .. })));
    }

    #[test]
    fn malformed_and_duplicates() {
        assert!(matches!(
            parse_materials("0;A;0.1,0.1\n"),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(matches!(
            parse_materials("x;A;0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n"),
            Err(Error::MalformedRecord { .. })
        ));
        let dup = "0;A;0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n1;A;0.2,0.1,0.1,0.1,0.1,0.1,0.1,0.1\n";
        assert!(matches!(parse_materials(dup), Err(Error::DuplicateName { line: 2, .. })));
        assert!(matches!(parse_materials("# nothing\n"), Err(Error::EmptyDatabase)));
    }

    #[test]
    fn shipped_sample_database() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_materials.txt");
        let db = load_materials(path).unwrap();
        assert_eq!(db.len(), 24);
        for m in db.materials() {
            assert_eq!(m.spectrum.coefficients().len(), 8);
        }
    }

    #[test]
    fn reflection_absorption_examples() {
        assert_eq!(reflection_magnitude(0.0).unwrap(), 1.0);
        assert_eq!(reflection_magnitude(1.0).unwrap(), 0.0);
        assert_eq!(reflection_magnitude(0.75).unwrap(), 0.5);
        assert_eq!(absorption_of(1.0).unwrap(), 0.0);
        assert_eq!(absorption_of(0.5).unwrap(), 0.75);
        assert!((absorption_of(0.9).unwrap() - 0.19).abs() < 1e-15);
        assert!(reflection_magnitude(1.5).is_err());
        assert!(absorption_of(-0.1).is_err());
    }

    fn coefficient() -> impl Strategy<Value = f64> {
        (1u32..1_000_000).prop_map(|k| k as f64 / 1_000_000.0)
    }

    proptest! {
        #[test]
        fn round_trip_relation(alpha in 0.0f64..=1.0) {
            let back = absorption_of(reflection_magnitude(alpha).unwrap()).unwrap();
            prop_assert!((back - alpha).abs() <= 1e-12);
        }

        #[test]
        fn canonical_text_round_trips(rows in proptest::collection::vec(proptest::array::uniform8(coefficient()), 1..12)) {
            let materials: Vec<Material> = rows.iter().enumerate().map(|(i, c)| Material {
                id: i as u32 * 3,
                name: format!("mat {i}"),
                spectrum: AbsorptionSpectrum::new(*c).unwrap(),
            }).collect();
            let db = MaterialDatabase::new(materials).unwrap();
            let text = db.to_text();
            let back = parse_materials(&text).unwrap();
            prop_assert_eq!(&back, &db);
            prop_assert_eq!(back.to_text(), text);
        }

        #[test]
        fn fuzzed_files_never_yield_out_of_range(values in proptest::collection::vec(-0.5f64..1.5, 8)) {
            let line = format!("0;Fuzz;{}", values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            match parse_materials(&line) {
                Ok(db) => {
                    for &a in db.materials()[0].spectrum.coefficients() {
                        prop_assert!(a > 0.0 && a < 1.0);
                    }
                }
                Err(e) => { let ok = matches!(e, Error::CoefficientOutOfRange { .. }); prop_assert!(ok) },
            }
        }
    }
}
