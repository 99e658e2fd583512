//! Baseline detector: Prony IIR fits of each AIR, fed to one class-weighted
//! linear SVM per category.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::par::{map_range, try_map_range, Exec};
use crate::util::derive_seed;

/// Pole-zero model `B(z) / A(z)` with `A(z) = 1 + a_1 z^-1 + ... + a_p z^-p`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirModel {
    /// `q + 1` numerator coefficients.
    pub b: Vec<f64>,
    /// The `p` free denominator coefficients; the leading 1 is implicit.
    pub a: Vec<f64>,
    /// The normal equations needed the ridge fallback.
    pub regularized: bool,
}

impl IirModel {
    /// Denominator including the leading 1.
    pub fn denominator(&self) -> Vec<f64> {
        std::iter::once(1.0).chain(self.a.iter().copied()).collect()
    }

    /// First `n` samples of the impulse response.
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut h = vec![0.0; n];
        for i in 0..n {
            let mut v = self.b.get(i).copied().unwrap_or(0.0);
            for (k, &ak) in self.a.iter().enumerate() {
                if i > k {
                    v -= ak * h[i - k - 1];
                }
            }
            h[i] = v;
        }
        h
    }

    /// `b ‖ a_1..a_p ‖ zero padding` up to `dim` entries.
    pub fn feature_vector(&self, dim: usize) -> Result<Vec<f64>> {
        let mut v: Vec<f64> = self.b.iter().chain(&self.a).copied().collect();
        if v.len() > dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
        v.resize(dim, 0.0);
        Ok(v)
    }
}

/// Relative ridge used when the normal equations are not positive definite.
pub const PRONY_RIDGE: f64 = 1e-10;

/// Prony's method with numerator order `q` and denominator order `p`.
///
/// The denominator solves the covariance-form linear-prediction normal
/// equations over taps `q+1..N`; the numerator is the denominator convolved
/// with the leading taps.
pub fn prony(h: &[f64], q: usize, p: usize) -> Result<IirModel> {
    let n = h.len();
    if n < q + p + 1 {
        return Err(Error::InputTooShort { len: n, need: q + p + 1 });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let at = |i: isize| if i < 0 { 0.0 } else { h[i as usize] };
    let mut a = Vec::new();
    let mut regularized = false;
    if p > 0 {
        // c[i][j] = sum_{m=q+1}^{N-1} h[m-i] h[m-j], for i, j in 0..=p.
        let n0 = q + 1;
        let mut c = vec![vec![0.0; p + 1]; p + 1];
        for j in 0..=p {
            c[0][j] = (n0..n).map(|m| h[m] * at(m as isize - j as isize)).sum();
            c[j][0] = c[0][j];
        }
        for i in 0..p {
            for j in i..p {
                let v = c[i][j] + at(n0 as isize - 1 - i as isize) * at(n0 as isize - 1 - j as isize)
                    - at(n as isize - 1 - i as isize) * at(n as isize - 1 - j as isize);
                c[i + 1][j + 1] = v;
                c[j + 1][i + 1] = v;
            }
        }
        let m = DMatrix::from_fn(p, p, |i, j| c[i + 1][j + 1]);
        let rhs = DVector::from_fn(p, |i, _| -c[i + 1][0]);
        let sol = match m.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                regularized = true;
                let scale = (0..p).map(|i| m[(i, i)]).sum::<f64>() / p as f64;
                let ridge = PRONY_RIDGE * if scale > 0.0 { scale } else { 1.0 };
                let mr = &m + DMatrix::identity(p, p) * ridge;
                match mr.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => mr.lu().solve(&rhs).ok_or_else(|| Error::UnstableFilter("singular Prony system".into()))?,
                }
            }
        };
        a = sol.iter().copied().collect();
    }
    let b = (0..=q)
        .map(|i| h[i] + a.iter().enumerate().filter(|(k, _)| i > *k).map(|(k, &ak)| ak * h[i - k - 1]).sum::<f64>())
        .collect();
    let model = IirModel { b, a, regularized };
    if model.b.iter().chain(&model.a).any(|v| !v.is_finite()) {
        return Err(Error::UnstableFilter("non-finite Prony coefficients".into()));
    }
    Ok(model)
}

/// Coefficient counts of the baseline feature; orders are one less.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IirOrders {
    pub num_coeffs: usize,
    pub den_coeffs: usize,
}

impl Default for IirOrders {
    fn default() -> Self {
        Self { num_coeffs: 200, den_coeffs: 200 }
    }
}

impl IirOrders {
    /// Parse `"200,200"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("orders must look like '200,200', got '{s}'"));
        if parts.len() != 2 {
            return Err(bad());
        }
        let num: usize = parts[0].parse().map_err(|_| bad())?;
        let den: usize = parts[1].parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Self { num_coeffs: num, den_coeffs: den })
    }

    /// `b` (num) + free `a` (den - 1) + one padding zero.
    pub fn feature_dim(&self) -> usize {
        self.num_coeffs + self.den_coeffs
    }

    pub fn fit(&self, h: &[f64]) -> Result<IirModel> {
        prony(h, self.num_coeffs - 1, self.den_coeffs - 1)
    }
}

const IIR_MAGIC: &[u8; 8] = b"MDIIR001";

/// Binary cache of one fit: magic, `q+1` and `p` as u32 LE, a regularized
/// flag byte, then `b` and `a` as f64 LE.
pub fn write_iir(path: impl AsRef<Path>, m: &IirModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(IIR_MAGIC)?;
    f.write_all(&(m.b.len() as u32).to_le_bytes())?;
    f.write_all(&(m.a.len() as u32).to_le_bytes())?;
    f.write_all(&[u8::from(m.regularized)])?;
    for v in m.b.iter().chain(&m.a) {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_iir(path: impl AsRef<Path>) -> Result<IirModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 17 || &bytes[..8] != IIR_MAGIC {
        return Err(Error::format(path, "not an IIR cache"));
    }
    let nb = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let na = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let vals = f64s(&bytes[17..]);
    if vals.len() != nb + na || (bytes.len() - 17) % 8 != 0 {
        return Err(Error::format(path, "truncated IIR cache"));
    }
    Ok(IirModel { b: vals[..nb].to_vec(), a: vals[nb..].to_vec(), regularized: bytes[16] != 0 })
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

// ---------------------------------------------------------------- SVM

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, epochs: 60, seed: 0 }
    }
}

/// Linear SVM on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub bias: f64,
    /// Sample weights for labels `[absent, present]`.
    pub class_weights: [f64; 2],
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Objective of the kept averaged iterate after each epoch.
    pub objective_history: Vec<f64>,
}

/// Per-feature mean and standard deviation; constant features get std 1.
pub fn feature_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| {
            let s = (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], cw: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .zip(cw)
        .map(|((x, &y), &c)| c * (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * lambda * (dot(w, w) + b * b) + hinge / xs.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pegasos-style stochastic subgradient descent on the class-weighted hinge
/// loss with L2 penalty. The bias is handled as a constant augmented feature
/// and penalized with the weights; left free, the first large steps push it
/// far from any useful value. Each epoch's iterates are
/// averaged; the kept model is the epoch average with the lowest objective so
/// far, so the recorded objective never increases.
pub fn train_svm(xs: &[Vec<f64>], labels: &[u8], class_weights: [f64; 2], cfg: &SvmConfig) -> Result<SvmModel> {
    if xs.len() != labels.len() {
        return Err(Error::LengthMismatch(xs.len(), labels.len()));
    }
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, actual: x.len() });
    }
    if labels.iter().all(|&y| y > 0) || labels.iter().all(|&y| y == 0) {
        return Err(Error::SingleClassSplit(usize::from(labels[0] > 0)));
    }
    if !(cfg.lambda > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config("svm lambda and epochs must be positive".into()));
    }
    let (mean, std) = feature_stats(xs);
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| standardize(x, &mean, &std)).collect();
    let ys: Vec<f64> = labels.iter().map(|&y| if y > 0 { 1.0 } else { -1.0 }).collect();
    let cw: Vec<f64> = labels.iter().map(|&y| class_weights[usize::from(y > 0)]).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut t = 0u64;
    let mut best = (objective(&w, b, &zs, &ys, &cw, cfg.lambda), w.clone(), b);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..zs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        // Average over this epoch's iterates only: the 1/(lambda t) steps of
        // the first epoch are too large to be worth remembering.
        let (mut w_sum, mut b_sum) = (vec![0.0; d], 0.0);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let margin = ys[i] * (dot(&w, &zs[i]) + b);
            let shrink = 1.0 - eta * cfg.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
            if margin < 1.0 {
                let step = eta * cw[i] * ys[i];
                for (v, &z) in w.iter_mut().zip(&zs[i]) {
                    *v += step * z;
                }
                b += step;
            }
            for (s, &v) in w_sum.iter_mut().zip(&w) {
                *s += v;
            }
            b_sum += b;
        }
        let n = order.len() as f64;
        let w_avg: Vec<f64> = w_sum.iter().map(|s| s / n).collect();
        let b_avg = b_sum / n;
        let j = objective(&w_avg, b_avg, &zs, &ys, &cw, cfg.lambda);
        if j < best.0 {
            best = (j, w_avg, b_avg);
        }
        history.push(best.0);
    }
    Ok(SvmModel { w: best.1, bias: best.2, class_weights, mean, std, objective_history: history })
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::DimensionMismatch { expected: self.w.len(), actual: x.len() });
        }
        Ok(dot(&self.w, &standardize(x, &self.mean, &self.std)) + self.bias)
    }

    /// Present when the decision value is non-negative.
    pub fn predict(&self, x: &[f64]) -> Result<bool> {
        Ok(self.decision(x)? >= 0.0)
    }
}

const SVM_MAGIC: &[u8; 8] = b"MDSVM001";

impl SvmModel {
    /// Magic, dimension (u32 LE), then f64 LE: bias, the two class
    /// weights, `w`, feature means, feature stds.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(SVM_MAGIC)?;
        f.write_all(&(self.w.len() as u32).to_le_bytes())?;
        let head = [self.bias, self.class_weights[0], self.class_weights[1]];
        for v in head.iter().chain(&self.w).chain(&self.mean).chain(&self.std) {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != SVM_MAGIC {
            return Err(Error::format(path, "not an SVM model"));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 8 * (3 + 3 * d) {
            return Err(Error::format(path, "SVM model size does not match its dimension"));
        }
        let v = f64s(&bytes[12..]);
        Ok(Self {
            bias: v[0],
            class_weights: [v[1], v[2]],
            w: v[3..3 + d].to_vec(),
            mean: v[3 + d..3 + 2 * d].to_vec(),
            std: v[3 + 2 * d..].to_vec(),
            objective_history: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------- detector

/// One SVM per category over IIR coefficient features.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineDetector {
    pub orders: IirOrders,
    pub svms: Vec<SvmModel>,
}

/// `N / (2 * count)` per class for one category.
fn category_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y > 0).count() as f64;
    [n / (2.0 * (n - pos)), n / (2.0 * pos)]
}

impl BaselineDetector {
    /// Train one SVM per category; categories are independent jobs.
    pub fn train(features: &[Vec<f64>], labels: &[Vec<u8>], orders: IirOrders, cfg: &SvmConfig, exec: Exec) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch(features.len(), labels.len()));
        }
        if features.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let theta = labels[0].len();
        let svms = try_map_range(exec, theta, |t| {
            let y: Vec<u8> = labels.iter().map(|l| l[t]).collect();
            let cfg = SvmConfig { seed: derive_seed(cfg.seed, &[t as u64]), ..*cfg };
            train_svm(features, &y, category_weights(&y), &cfg)
        })?;
        Ok(Self { orders, svms })
    }

    pub fn predict(&self, feature: &[f64]) -> Result<Vec<u8>> {
        self.svms.iter().map(|s| s.predict(feature).map(u8::from)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("orders.txt"), format!("{},{}\n", self.orders.num_coeffs, self.orders.den_coeffs))?;
        for (t, s) in self.svms.iter().enumerate() {
            s.save(dir.join(format!("svm_{t:02}.bin")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let orders = IirOrders::parse(std::fs::read_to_string(dir.join("orders.txt"))?.trim())?;
        let mut svms = Vec::new();
        while dir.join(format!("svm_{:02}.bin", svms.len())).exists() {
            svms.push(SvmModel::load(dir.join(format!("svm_{:02}.bin", svms.len())))?);
        }
        if svms.is_empty() {
            return Err(Error::format(dir, "no SVM models found"));
        }
        if svms.iter().any(|s| s.w.len() != orders.feature_dim()) {
            return Err(Error::format(dir, "SVM dimension does not match the IIR orders"));
        }
        Ok(Self { orders, svms })
    }
}

/// IIR feature vectors for every AIR of a split, in manifest order.
pub fn split_iir_features(manifest: &DatasetManifest, split: Split, orders: IirOrders, exec: Exec) -> Result<(Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let records: Vec<_> = manifest.split(split).collect();
    let feats = try_map_range(exec, records.len(), |i| {
        let air = manifest.load_air(records[i])?;
        orders.fit(&air.taps)?.feature_vector(orders.feature_dim())
    })?;
    Ok((feats, records.iter().map(|r| r.label_vector.clone()).collect()))
}

/// Prony fits of a batch of responses.
pub fn fit_batch(exec: Exec, responses: &[Vec<f64>], orders: IirOrders) -> Vec<Result<IirModel>> {
    map_range(exec, responses.len(), |i| orders.fit(&responses[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn geometric_series() {
        let h: Vec<f64> = (0..64).map(|n| 0.5f64.powi(n)).collect();
        let m = prony(&h, 0, 1).unwrap();
        assert!((m.a[0] + 0.5).abs() < 1e-9);
        assert!((m.b[0] - 1.0).abs() < 1e-9);
        assert!(!m.regularized);
    }

    #[test]
    fn unit_impulse_trivial_orders() {
        let mut h = vec![0.0; 8];
        h[0] = 1.0;
        let m = prony(&h, 0, 0).unwrap();
        assert_eq!(m.b, vec![1.0]);
        assert!(m.a.is_empty());
        assert_eq!(m.denominator(), vec![1.0]);
    }

    /// Random stable filter from poles inside radius 0.9.
    fn stable_filter(rng: &mut ChaCha8Rng) -> IirModel {
        // Two conjugate pairs and one real pole.
        let mut den = vec![1.0];
        let mut mul = |c: &[f64]| {
            let mut out = vec![0.0; den.len() + c.len() - 1];
            for (i, &x) in den.iter().enumerate() {
                for (j, &y) in c.iter().enumerate() {
                    out[i + j] += x * y;
                }
            }
            den = out;
        };
        for _ in 0..2 {
            let r: f64 = rng.gen_range(0.3..0.9);
            let th: f64 = rng.gen_range(0.2..2.8);
            mul(&[1.0, -2.0 * r * th.cos(), r * r]);
        }
        mul(&[1.0, -rng.gen_range(-0.8..0.8)]);
        let b = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        IirModel { b, a: den[1..].to_vec(), regularized: false }
    }

    #[test]
    fn exact_order_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let truth = stable_filter(&mut rng);
            let h = truth.impulse_response(120);
            let fit = prony(&h, 5, 5).unwrap();
            let rec = fit.impulse_response(h.len());
            let err = rec.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                / h.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn too_short_and_orders() {
        assert!(matches!(prony(&[1.0, 0.5], 1, 1), Err(Error::InputTooShort { len: 2, need: 3 })));
        let o = IirOrders::parse("200,200").unwrap();
        assert_eq!(o.feature_dim(), 400);
        assert!(IirOrders::parse("200").is_err());
        let h: Vec<f64> = (0..1000).map(|n| 0.99f64.powi(n) * (0.3 * n as f64).sin()).collect();
        let m = o.fit(&h).unwrap();
        assert_eq!((m.b.len(), m.a.len()), (200, 199));
        let v = m.feature_vector(400).unwrap();
        assert_eq!(v.len(), 400);
        assert_eq!(v[399], 0.0);
    }

    #[test]
    fn iir_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = IirModel { b: vec![1.0, -0.25], a: vec![0.5, 1e-300], regularized: true };
        write_iir(dir.path().join("x.iir"), &m).unwrap();
        assert_eq!(read_iir(dir.path().join("x.iir")).unwrap(), m);
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = u8::from(i % 3 == 0);
                let c = if y == 1 { 2.0 } else { -2.0 };
                ((0..4).map(|_| c + rng.gen_range(-1.0..1.0)).collect(), y)
            })
            .unzip()
    }

    #[test]
    fn separable_training_accuracy() {
        let (xs, ys) = blobs(60, 1);
        let m = train_svm(&xs, &ys, category_weights(&ys), &SvmConfig::default()).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.predict(x).unwrap(), y == 1);
        }
        assert!(m.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn label_negation_flips_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<u8> = (0..40).map(|i| u8::from(i % 2 == 0)).collect();
        let flipped: Vec<u8> = ys.iter().map(|y| 1 - y).collect();
        let cfg = SvmConfig { epochs: 20, ..Default::default() };
        let a = train_svm(&xs, &ys, [1.0, 1.0], &cfg).unwrap();
        let b = train_svm(&xs, &flipped, [1.0, 1.0], &cfg).unwrap();
        for x in &xs {
            assert_eq!(a.decision(x).unwrap(), -b.decision(x).unwrap());
        }
    }

    #[test]
    fn prediction_by_hand() {
        let m = SvmModel {
            w: vec![2.0, -1.0],
            bias: 0.5,
            class_weights: [1.0, 1.0],
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
            objective_history: vec![],
        };
        // ((3-1)/2)*2 + ((6-2)/4)*(-1) + 0.5 = 1.5
        assert_eq!(m.decision(&[3.0, 6.0]).unwrap(), 1.5);
        let zero = SvmModel { w: vec![0.0; 2], mean: vec![0.0; 2], std: vec![1.0; 2], ..m.clone() };
        assert!(zero.predict(&[0.0, 0.0]).unwrap());
        assert!(matches!(m.decision(&[1.0]), Err(Error::DimensionMismatch { expected: 2, actual: 1 })));
    }

    #[test]
    fn svm_preconditions_and_io() {
        let (xs, ys) = blobs(12, 3);
        assert!(matches!(train_svm(&xs, &[1; 12], [1.0, 1.0], &SvmConfig::default()), Err(Error::SingleClassSplit(1))));
        let det = BaselineDetector::train(&xs, &ys.iter().map(|&y| vec![y, 1 - y]).collect::<Vec<_>>(), IirOrders { num_coeffs: 2, den_coeffs: 2 }, &SvmConfig::default(), Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        det.save(dir.path()).unwrap();
        let back = BaselineDetector::load(dir.path()).unwrap();
        for x in &xs {
            assert_eq!(back.predict(x).unwrap(), det.predict(x).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prony_is_deterministic(seed in any::<u64>(), q in 0usize..6, p in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = prony(&h, q, p).unwrap();
            let b = prony(&h, q, p).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
