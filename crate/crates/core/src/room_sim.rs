//! Shoebox-room AIR synthesis with frequency-dependent wall absorption.
//!
//! Each octave band is rendered separately with the image-source method using
//! that band's reflection magnitudes; arrivals are placed with a Hann-windowed
//! sinc fractional delay. The band signals are then weighted by a zero-phase
//! octave filterbank and summed.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::clustering::CategoryTable;
use crate::dataset::{write_wav, AirRecord, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{stratified_partition_rooms, SplitRatios};
use crate::material_db::{MaterialDatabase, DEFAULT_BAND_CENTERS_HZ, N_BANDS};
use crate::par::{self, Exec};
use crate::util::derive_seed;

pub type Vec3 = [f64; 3];

/// Room geometry, wall materials and one source/receiver pair.
///
/// Walls are ordered `[x=0, x=Lx, y=0, y=Ly, z=0, z=Lz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    pub dimensions: Vec3,
    pub wall_materials: [u32; 6],
    pub source: Vec3,
    pub receiver: Vec3,
}

/// A sampled acoustic impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Air {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    pub room_id: u32,
    pub source_id: u32,
    pub receiver_id: u32,
}

impl Air {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Self {
        Self { taps, sample_rate, room_id: 0, source_id: 0, receiver_id: 0 }
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub sample_rate: u32,
    /// Output length in seconds.
    pub duration: f64,
    pub speed_of_sound: f64,
    /// `None` includes every image that arrives within the output length.
    pub max_reflection_order: Option<usize>,
    pub frac_delay_halfwidth: usize,
    pub band_centers: [f64; N_BANDS],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration: 0.2,
            speed_of_sound: 343.0,
            max_reflection_order: None,
            frac_delay_halfwidth: 32,
            band_centers: DEFAULT_BAND_CENTERS_HZ,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || self.sample_rate == 0 || !(self.speed_of_sound > 0.0) || self.frac_delay_halfwidth == 0 {
            return Err(Error::Config("simulation parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Zero-phase octave filterbank built from cascaded Linkwitz-Riley
/// (squared second-order Butterworth) crossovers.
///
/// With crossover `e`, the low and high branch magnitudes are
/// `L = 1 / (1 + (f/e)^4)` and `H = 1 - L`. Band `k` is
/// `H(e_0) ... H(e_{k-1}) L(e_k)`, so the band magnitudes sum to one at every
/// frequency.
#[derive(Debug, Clone)]
pub struct OctaveFilterbank {
    crossovers: [f64; N_BANDS - 1],
}

impl OctaveFilterbank {
    pub fn new(band_centers: &[f64; N_BANDS], sample_rate: u32) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if band_centers.windows(2).any(|w| !(w[1] > w[0])) || !(band_centers[0] > 0.0) {
            return Err(Error::UnstableFilter("band centers must be positive and increasing".into()));
        }
        let mut crossovers = [0.0; N_BANDS - 1];
        for (i, c) in crossovers.iter_mut().enumerate() {
            *c = (band_centers[i] * band_centers[i + 1]).sqrt();
        }
        if crossovers[0] >= nyquist {
            return Err(Error::UnstableFilter(format!(
                "first crossover {:.1} Hz is above Nyquist {nyquist} Hz",
                crossovers[0]
            )));
        }
        Ok(Self { crossovers })
    }

    pub fn crossovers(&self) -> &[f64; N_BANDS - 1] {
        &self.crossovers
    }

    /// Magnitude responses of all bands at `freq` Hz.
    pub fn responses(&self, freq: f64) -> [f64; N_BANDS] {
        let mut out = [0.0; N_BANDS];
        let mut pass = 1.0;
        for (b, &e) in self.crossovers.iter().enumerate() {
            let r = (freq / e).powi(4);
            let low = 1.0 / (1.0 + r);
            out[b] = pass * low;
            pass *= r / (1.0 + r);
        }
        out[N_BANDS - 1] = pass;
        out
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Hann-windowed sinc taps for a fractional delay of `delay` samples.
/// Returns the first tap index and the taps.
pub fn frac_delay_kernel(delay: f64, halfwidth: usize) -> (isize, Vec<f64>) {
    let w = halfwidth as f64;
    let base = delay.floor() as isize;
    let start = base - halfwidth as isize + 1;
    let taps = (0..2 * halfwidth)
        .map(|i| {
            let x = (start + i as isize) as f64 - delay;
            let win = if x.abs() < w { 0.5 * (1.0 + (PI * x / w).cos()) } else { 0.0 };
            win * sinc(x)
        })
        .collect();
    (start, taps)
}

fn check_inside(room: &RoomSpec) -> Result<()> {
    let l = room.dimensions;
    if l.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InfeasibleGeometry("room dimensions must be positive".into()));
    }
    for (what, p) in [("source", room.source), ("receiver", room.receiver)] {
        if (0..3).any(|i| !(p[i] > 0.0 && p[i] < l[i])) {
            return Err(Error::InfeasibleGeometry(format!("{what} {p:?} not strictly inside room")));
        }
    }
    if room.source == room.receiver {
        return Err(Error::InfeasibleGeometry("source and receiver coincide".into()));
    }
    Ok(())
}

/// Reflection magnitudes per wall and band.
fn wall_reflections(room: &RoomSpec, db: &MaterialDatabase) -> Result<[[f64; N_BANDS]; 6]> {
    let mut out = [[0.0; N_BANDS]; 6];
    for (slot, &id) in out.iter_mut().zip(&room.wall_materials) {
        let m = db.get(id).ok_or(Error::UnknownMaterial(id))?;
        *slot = m.spectrum.reflection_magnitudes();
    }
    Ok(out)
}

/// One image along one axis: offset to the receiver, reflection count and
/// per-band attenuation product.
struct AxisImage {
    offset: f64,
    order: usize,
    gain: [f64; N_BANDS],
}

fn axis_images(len: f64, src: f64, rcv: f64, r_lo: &[f64; N_BANDS], r_hi: &[f64; N_BANDS], reach: f64) -> Vec<AxisImage> {
    let m_max = (reach / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::new();
    for m in -m_max..=m_max {
        for q in 0..2i64 {
            let offset = (1 - 2 * q) as f64 * src + 2.0 * m as f64 * len - rcv;
            if offset.abs() > reach {
                continue;
            }
            let n_lo = (m - q).unsigned_abs() as i32;
            let n_hi = m.unsigned_abs() as i32;
            let mut gain = [0.0; N_BANDS];
            for b in 0..N_BANDS {
                gain[b] = r_lo[b].powi(n_lo) * r_hi[b].powi(n_hi);
            }
            out.push(AxisImage { offset, order: (n_lo + n_hi) as usize, gain });
        }
    }
    out
}

/// Visit every image source within `reach` meters (and the order limit).
fn for_each_image(
    room: &RoomSpec,
    refl: &[[f64; N_BANDS]; 6],
    reach: f64,
    max_order: Option<usize>,
    mut visit: impl FnMut(f64, usize, &[f64; N_BANDS]),
) {
    let axes: Vec<Vec<AxisImage>> = (0..3)
        .map(|a| axis_images(room.dimensions[a], room.source[a], room.receiver[a], &refl[2 * a], &refl[2 * a + 1], reach))
        .collect();
    let limit = max_order.unwrap_or(usize::MAX);
    let reach2 = reach * reach;
    for ix in &axes[0] {
        for iy in &axes[1] {
            let dxy = ix.offset * ix.offset + iy.offset * iy.offset;
            if dxy > reach2 || ix.order + iy.order > limit {
                continue;
            }
            for iz in &axes[2] {
                let order = ix.order + iy.order + iz.order;
                let d2 = dxy + iz.offset * iz.offset;
                if d2 > reach2 || order > limit {
                    continue;
                }
                let mut gain = [0.0; N_BANDS];
                for b in 0..N_BANDS {
                    gain[b] = ix.gain[b] * iy.gain[b] * iz.gain[b];
                }
                visit(d2.sqrt(), order, &gain);
            }
        }
    }
}

fn reach_m(cfg: &SimConfig) -> f64 {
    (cfg.n_samples() + cfg.frac_delay_halfwidth) as f64 / cfg.sample_rate as f64 * cfg.speed_of_sound
}

/// Highest reflection order among images arriving within the output length.
pub fn auto_max_order(room: &RoomSpec, cfg: &SimConfig) -> usize {
    let refl = [[0.5; N_BANDS]; 6];
    let mut max = 0;
    for_each_image(room, &refl, reach_m(cfg), None, |_, order, _| max = max.max(order));
    max
}

/// Per-band image-source responses before band filtering.
pub fn render_subbands(room: &RoomSpec, db: &MaterialDatabase, cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_inside(room)?;
    let refl = wall_reflections(room, db)?;
    let n = cfg.n_samples();
    let fs = cfg.sample_rate as f64;
    let hw = cfg.frac_delay_halfwidth;
    let mut bands = vec![vec![0.0; n]; N_BANDS];
    for_each_image(room, &refl, reach_m(cfg), cfg.max_reflection_order, |d, _, gain| {
        let delay = d / cfg.speed_of_sound * fs;
        let (start, kernel) = frac_delay_kernel(delay, hw);
        let spread = 1.0 / (4.0 * PI * d);
        for (i, &k) in kernel.iter().enumerate() {
            let idx = start + i as isize;
            if idx < 0 || idx as usize >= n {
                continue;
            }
            let idx = idx as usize;
            for b in 0..N_BANDS {
                bands[b][idx] += gain[b] * spread * k;
            }
        }
    });
    Ok(bands)
}

/// Weight each band signal by its filterbank response and sum them.
pub fn combine_subbands(bands: &[Vec<f64>], band_centers: &[f64; N_BANDS], sample_rate: u32) -> Result<Vec<f64>> {
    let bank = OctaveFilterbank::new(band_centers, sample_rate)?;
    let n = bands.first().map_or(0, Vec::len);
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let fs = sample_rate as f64;
    let weights: Vec<[f64; N_BANDS]> = (0..m)
        .map(|k| {
            let bin = if k <= m / 2 { k } else { m - k };
            bank.responses(bin as f64 * fs / m as f64)
        })
        .collect();
    let mut total = vec![Complex64::new(0.0, 0.0); m];
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (b, band) in bands.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (c, &v) in buf.iter_mut().zip(band) {
            c.re = v;
        }
        fwd.process(&mut buf);
        for (t, (c, w)) in total.iter_mut().zip(buf.iter().zip(&weights)) {
            *t += c * w[b];
        }
    }
    inv.process(&mut total);
    Ok(total[..n].iter().map(|c| c.re / m as f64).collect())
}

/// Simulate the AIR between the room's source and receiver.
pub fn simulate_air(room: &RoomSpec, db: &MaterialDatabase, cfg: &SimConfig) -> Result<Air> {
    // Build the filterbank first so an unusable sample rate fails before rendering.
    OctaveFilterbank::new(&cfg.band_centers, cfg.sample_rate)?;
    let bands = render_subbands(room, db, cfg)?;
    let taps = combine_subbands(&bands, &cfg.band_centers, cfg.sample_rate)?;
    Ok(Air::new(taps, cfg.sample_rate))
}

/// Reverberation time from the Schroeder energy-decay curve, fitting a line
/// between `start_db` and `end_db` (e.g. -5 and -25) and extrapolating to -60 dB.
pub fn estimate_t60(taps: &[f64], sample_rate: u32, start_db: f64, end_db: f64) -> Option<f64> {
    let mut edc: Vec<f64> = taps.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let fs = sample_rate as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if db <= start_db && db >= end_db {
            let t = i as f64 / fs;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
            cnt += 1.0;
        }
    }
    if cnt < 2.0 {
        return None;
    }
    let slope = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Sampling ranges for room dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for RoomBounds {
    fn default() -> Self {
        Self { min: [2.5, 2.5, 2.5], max: [7.0, 7.0, 2.6] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryOptions {
    pub bounds: RoomBounds,
    pub wall_margin: f64,
    pub min_src_rcv_dist: f64,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self { bounds: RoomBounds::default(), wall_margin: 0.3, min_src_rcv_dist: 0.5 }
    }
}

/// A sampled room with several sources and receivers.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomLayout {
    pub dimensions: Vec3,
    pub wall_materials: [u32; 6],
    pub sources: Vec<Vec3>,
    pub receivers: Vec<Vec3>,
}

impl RoomLayout {
    pub fn spec(&self, source: usize, receiver: usize) -> RoomSpec {
        RoomSpec {
            dimensions: self.dimensions,
            wall_materials: self.wall_materials,
            source: self.sources[source],
            receiver: self.receivers[receiver],
        }
    }
}

const MAX_REJECTIONS: usize = 10_000;

fn euclid(a: &Vec3, b: &Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Sample a room layout. Every source is at least `min_src_rcv_dist` from
/// every receiver.
pub fn sample_layout<R: Rng>(
    rng: &mut R,
    db: &MaterialDatabase,
    geom: &GeometryOptions,
    n_sources: usize,
    n_receivers: usize,
) -> Result<RoomLayout> {
    let RoomBounds { min, max } = geom.bounds;
    if (0..3).any(|i| !(min[i] > 0.0) || min[i] > max[i]) {
        return Err(Error::InfeasibleGeometry(format!("bad bounds {min:?} .. {max:?}")));
    }
    let shrunk: Vec<f64> = min.iter().map(|l| l - 2.0 * geom.wall_margin).collect();
    if shrunk.iter().any(|&s| s <= 0.0) {
        return Err(Error::InfeasibleGeometry(format!(
            "wall margin {} leaves no interior in a {min:?} room",
            geom.wall_margin
        )));
    }
    let diag = shrunk.iter().map(|s| s * s).sum::<f64>().sqrt();
    if diag < geom.min_src_rcv_dist {
        return Err(Error::InfeasibleGeometry(format!(
            "interior diagonal {diag:.3} m shorter than source-receiver distance {}",
            geom.min_src_rcv_dist
        )));
    }
    let mut dims = [0.0; 3];
    for i in 0..3 {
        dims[i] = if max[i] > min[i] { rng.gen_range(min[i]..=max[i]) } else { min[i] };
    }
    let mut walls = [0u32; 6];
    for w in walls.iter_mut() {
        *w = db.materials()[rng.gen_range(0..db.len())].id;
    }
    let point = |rng: &mut R| -> Vec3 {
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = rng.gen_range(geom.wall_margin..=dims[i] - geom.wall_margin);
        }
        p
    };
    let receivers: Vec<Vec3> = (0..n_receivers).map(|_| point(rng)).collect();
    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let mut tries = 0;
        loop {
            let s = point(rng);
            if receivers.iter().all(|r| euclid(&s, r) >= geom.min_src_rcv_dist) {
                sources.push(s);
                break;
            }
            tries += 1;
            if tries >= MAX_REJECTIONS {
                return Err(Error::InfeasibleGeometry("could not place source away from receivers".into()));
            }
        }
    }
    Ok(RoomLayout { dimensions: dims, wall_materials: walls, sources, receivers })
}

/// Sample one room with a single source and receiver.
pub fn sample_room<R: Rng>(rng: &mut R, db: &MaterialDatabase, geom: &GeometryOptions) -> Result<RoomSpec> {
    Ok(sample_layout(rng, db, geom, 1, 1)?.spec(0, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub n_rooms: usize,
    pub sources_per_room: usize,
    pub receivers_per_room: usize,
    pub geometry: GeometryOptions,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_rooms: 141,
            sources_per_room: 10,
            receivers_per_room: 5,
            geometry: GeometryOptions::default(),
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }
}

pub const AIR_DIR: &str = "airs";

/// Simulate and write a full labeled dataset into `out_dir`.
pub fn generate_dataset(
    opts: &GenerateOptions,
    db: &MaterialDatabase,
    table: &CategoryTable,
    cfg: &SimConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_dataset_with(Exec::default(), opts, db, table, cfg, out_dir)
}

pub fn generate_dataset_with(
    exec: Exec,
    opts: &GenerateOptions,
    db: &MaterialDatabase,
    table: &CategoryTable,
    cfg: &SimConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir.join(AIR_DIR))?;
    let layouts = par::try_map_range(exec, opts.n_rooms, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[r as u64]));
        sample_layout(&mut rng, db, &opts.geometry, opts.sources_per_room, opts.receivers_per_room)
    })?;
    let labels = layouts
        .iter()
        .map(|l| table.label_vector(&l.wall_materials))
        .collect::<Result<Vec<_>>>()?;
    let rooms: Vec<(u32, Vec<u8>)> = labels.iter().enumerate().map(|(i, y)| (i as u32, y.clone())).collect();
    let splits = stratified_partition_rooms(&rooms, opts.ratios, opts.seed)?;

    let per_room = opts.sources_per_room * opts.receivers_per_room;
    let records = par::try_map_range(exec, opts.n_rooms * per_room, |job| {
        let r = job / per_room;
        let s = (job % per_room) / opts.receivers_per_room;
        let q = job % opts.receivers_per_room;
        let layout = &layouts[r];
        let mut air = simulate_air(&layout.spec(s, q), db, cfg)?;
        air.room_id = r as u32;
        air.source_id = s as u32;
        air.receiver_id = q as u32;
        let rel = format!("{AIR_DIR}/room{r:05}_s{s:02}_r{q:02}.wav");
        write_wav(out_dir.join(&rel), &air)?;
        Ok::<_, Error>(AirRecord {
            air_path: rel,
            room_id: r as u32,
            source_id: s as u32,
            receiver_id: q as u32,
            split: splits.split_of(r as u32).expect("every room assigned"),
            dims: layout.dimensions,
            wall_material_ids: layout.wall_materials,
            label_vector: labels[r].clone(),
        })
    })?;
    let manifest = DatasetManifest { records, root: out_dir.to_path_buf() };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material_db::{AbsorptionSpectrum, Material};

    fn uniform_db(alphas: &[f64]) -> MaterialDatabase {
        MaterialDatabase::new(
            alphas
                .iter()
                .enumerate()
                .map(|(i, &a)| Material { id: i as u32, name: format!("m{i}"), spectrum: AbsorptionSpectrum::flat(a).unwrap() })
                .collect(),
        )
        .unwrap()
    }

    fn shoebox(walls: [u32; 6]) -> RoomSpec {
        RoomSpec { dimensions: [4.0, 5.0, 2.6], wall_materials: walls, source: [1.0, 1.3, 1.2], receiver: [3.1, 3.7, 1.5] }
    }

    #[test]
    fn kernel_is_unit_impulse_at_integer_delay() {
        let (start, k) = frac_delay_kernel(10.0, 4);
        assert_eq!(start, 7);
        for (i, &v) in k.iter().enumerate() {
            let expect = if start + i as isize == 10 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_path_only() {
        let db = uniform_db(&[0.3]);
        let room = shoebox([0; 6]);
        let cfg = SimConfig { max_reflection_order: Some(0), ..Default::default() };
        let bands = render_subbands(&room, &db, &cfg).unwrap();
        let d = euclid(&room.source, &room.receiver);
        let delay = d / cfg.speed_of_sound * cfg.sample_rate as f64;
        let amp = 1.0 / (4.0 * PI * d);
        for band in &bands {
            let sum: f64 = band.iter().sum();
            let centroid: f64 = band.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / sum;
            assert!((sum - amp).abs() / amp < 0.01, "{sum} vs {amp}");
            assert!((centroid - delay).abs() < 0.05, "{centroid} vs {delay}");
            let peak = band.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            assert!((peak as f64 - delay).abs() <= 0.5 + 1e-9);
        }
        // Equal band signals pass the filterbank unchanged.
        let air = simulate_air(&room, &db, &cfg).unwrap();
        for (a, b) in air.taps.iter().zip(&bands[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn filterbank_sums_to_unity() {
        let bank = OctaveFilterbank::new(&DEFAULT_BAND_CENTERS_HZ, 16_000).unwrap();
        let mut f = 100.0;
        while f <= 7900.0 {
            let s: f64 = bank.responses(f).iter().sum();
            assert!((20.0 * s.log10()).abs() < 3.0);
            assert!((s - 1.0).abs() < 1e-12);
            f *= 1.05;
        }
        // Each band peaks near its own center.
        for (b, &c) in DEFAULT_BAND_CENTERS_HZ[..7].iter().enumerate() {
            let r = bank.responses(c);
            let best = (0..N_BANDS).max_by(|&i, &j| r[i].partial_cmp(&r[j]).unwrap()).unwrap();
            assert_eq!(best, b);
        }
        assert!(matches!(OctaveFilterbank::new(&DEFAULT_BAND_CENTERS_HZ, 200), Err(Error::UnstableFilter(_))));
    }

    #[test]
    fn more_absorption_less_tail_energy() {
        let db = uniform_db(&[0.1, 0.2]);
        let room = shoebox([0; 6]);
        let cfg = SimConfig::default();
        let lo = simulate_air(&room, &db, &cfg).unwrap();
        let hi = simulate_air(&shoebox([1; 6]), &db, &cfg).unwrap();
        let d = euclid(&room.source, &room.receiver);
        let direct = (d / cfg.speed_of_sound * cfg.sample_rate as f64) as usize + cfg.frac_delay_halfwidth;
        let tail = |a: &Air| a.taps[direct..].iter().map(|v| v * v).sum::<f64>();
        assert!(tail(&hi) < tail(&lo));
        assert!(hi.energy() < lo.energy());
    }

    #[test]
    fn deterministic_and_sized() {
        let db = uniform_db(&[0.1, 0.5]);
        let room = shoebox([0, 1, 0, 1, 0, 1]);
        let cfg = SimConfig::default();
        let a = simulate_air(&room, &db, &cfg).unwrap();
        let b = simulate_air(&room, &db, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.taps.len(), 3200);
        assert!(a.taps.iter().all(|v| v.is_finite()));
        assert!(auto_max_order(&room, &cfg) > 10);
    }

    #[test]
    fn errors() {
        let db = uniform_db(&[0.1]);
        let mut room = shoebox([0; 6]);
        assert!(matches!(simulate_air(&shoebox([7; 6]), &db, &SimConfig::default()), Err(Error::UnknownMaterial(7))));
        room.source = [5.0, 1.0, 1.0];
        assert!(matches!(simulate_air(&room, &db, &SimConfig::default()), Err(Error::InfeasibleGeometry(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let geom = GeometryOptions {
            bounds: RoomBounds { min: [2.5; 3], max: [2.5; 3] },
            wall_margin: 2.0,
            min_src_rcv_dist: 1.0,
        };
        assert!(matches!(sample_room(&mut rng, &db, &geom), Err(Error::InfeasibleGeometry(_))));
    }

    #[test]
    fn degenerate_bounds_fix_size() {
        let db = uniform_db(&[0.1, 0.2, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = GeometryOptions { bounds: RoomBounds { min: [4.0, 5.0, 3.0], max: [4.0, 5.0, 3.0] }, ..Default::default() };
        for _ in 0..20 {
            let r = sample_room(&mut rng, &db, &geom).unwrap();
            assert_eq!(r.dimensions, [4.0, 5.0, 3.0]);
            assert!(euclid(&r.source, &r.receiver) >= 0.5);
            for i in 0..3 {
                assert!(r.source[i] >= 0.3 && r.source[i] <= r.dimensions[i] - 0.3);
            }
        }
    }

    #[test]
    fn dimension_means_match_midpoints() {
        let db = uniform_db(&[0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = GeometryOptions::default();
        let n = 10_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let r = sample_room(&mut rng, &db, &geom).unwrap();
            for i in 0..3 {
                assert!(r.dimensions[i] >= geom.bounds.min[i] && r.dimensions[i] <= geom.bounds.max[i]);
                sum[i] += r.dimensions[i];
            }
        }
        for i in 0..3 {
            let mid = 0.5 * (geom.bounds.min[i] + geom.bounds.max[i]);
            assert!((sum[i] / n as f64 - mid).abs() / mid < 0.02);
        }
    }
}
