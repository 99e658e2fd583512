//! k-means grouping of absorption spectra into material categories, plus the
//! Davies-Bouldin and variance-ratio (Calinski-Harabasz) validity criteria.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::material_db::{format_record, parse_record, AbsorptionSpectrum, MaterialDatabase, N_BANDS};
use crate::par::{self, Exec};
use crate::util::derive_seed;

pub type Point = [f64; N_BANDS];

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub inertia: f64,
    pub k: usize,
    pub seed: u64,
    /// Inertia after every Lloyd update, in iteration order.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-10 }
    }
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &Point, b: &Point) -> f64 {
    sq_dist(a, b).sqrt()
}

fn validate(points: &[Point], k: usize) -> Result<()> {
    if k < 2 || k > points.len() {
        return Err(Error::TooFewPoints { k, n: points.len() });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// center the lowest-index unchosen point is taken.
fn kmeans_pp_init(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        centers.push(points[next]);
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &points[next]));
        }
    }
    centers
}

/// Nearest centroid; lowest index wins ties.
fn nearest(p: &Point, centroids: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Assign every point, then re-seed empty clusters with the point farthest
/// from its current centroid (taken from a cluster that keeps a member).
fn assign(points: &[Point], centroids: &mut [Point]) -> Vec<usize> {
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, centroids)).collect();
    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        sizes[assignments[i]] -= 1;
        assignments[i] = c;
        sizes[c] = 1;
        centroids[c] = points[i];
    }
    assignments
}

fn means(points: &[Point], assignments: &[usize], k: usize) -> Vec<Point> {
    let mut sums = vec![[0.0; N_BANDS]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

fn cost(points: &[Point], assignments: &[usize], centroids: &[Point]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(points: &[Point], init: Vec<Point>, seed: u64, opts: KMeansOptions) -> Result<Clustering> {
    let k = init.len();
    validate(points, k)?;
    let mut centroids = init;
    let mut assignments = assign(points, &mut centroids);
    let mut history = Vec::new();
    for _ in 0..opts.max_iter.max(1) {
        let updated = means(points, &assignments, k);
        let shift = updated.iter().zip(&centroids).map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        centroids = updated;
        history.push(cost(points, &assignments, &centroids));
        if shift <= opts.tol {
            break;
        }
        let next = assign(points, &mut centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    // The loop may exit right after a re-assignment; make centroids the means
    // of the returned assignments.
    let centroids = means(points, &assignments, k);
    let inertia = cost(points, &assignments, &centroids);
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }
    Ok(Clustering { assignments, centroids, inertia, k, seed, inertia_history: history })
}

/// k-means with k-means++ initialization; deterministic given `seed`.
pub fn kmeans(points: &[Point], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Clustering> {
    validate(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(points, k, &mut rng);
    lloyd(points, init, seed, KMeansOptions { max_iter, tol })
}

/// Best (lowest inertia) of `restarts` seeded k-means runs. Ties keep the
/// earliest restart.
pub fn kmeans_best_of(
    exec: Exec,
    points: &[Point],
    k: usize,
    restarts: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<Clustering> {
    validate(points, k)?;
    let runs = par::try_map_range(exec, restarts.max(1), |r| {
        kmeans(points, k, derive_seed(seed, &[k as u64, r as u64]), opts.max_iter, opts.tol)
    })?;
    let mut best: Option<Clustering> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn dispersions(points: &[Point], c: &Clustering) -> Result<Vec<f64>> {
    if c.assignments.len() != points.len() {
        return Err(Error::SizeMismatch { expected: points.len(), actual: c.assignments.len() });
    }
    let mut sum = vec![0.0; c.k];
    let mut count = vec![0usize; c.k];
    for (p, &a) in points.iter().zip(&c.assignments) {
        sum[a] += dist(p, &c.centroids[a]);
        count[a] += 1;
    }
    if let Some(empty) = count.iter().position(|&n| n == 0) {
        return Err(Error::ShapeMismatch(format!("cluster {empty} is empty")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect())
}

/// Davies-Bouldin index (lower is better).
pub fn davies_bouldin(points: &[Point], clustering: &Clustering) -> Result<f64> {
    let k = clustering.k;
    if k < 2 {
        return Err(Error::TooFewPoints { k, n: points.len() });
    }
    let s = dispersions(points, clustering)?;
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let m = dist(&clustering.centroids[i], &clustering.centroids[j]);
            if m == 0.0 {
                return Err(Error::DegenerateClusters(i.min(j), i.max(j)));
            }
            worst = worst.max((s[i] + s[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Variance-ratio criterion value. `degenerate` marks zero within-cluster
/// scatter, in which case `value` is `+inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrcScore {
    pub value: f64,
    pub degenerate: bool,
}

/// Calinski-Harabasz variance ratio (higher is better).
pub fn vrc(points: &[Point], clustering: &Clustering) -> Result<VrcScore> {
    let n = points.len();
    let k = clustering.k;
    if k < 2 || k + 1 > n {
        return Err(Error::TooFewPoints { k, n });
    }
    dispersions(points, clustering)?;
    let mut grand = [0.0; N_BANDS];
    for p in points {
        for (g, v) in grand.iter_mut().zip(p) {
            *g += v / n as f64;
        }
    }
    let sizes = clustering.cluster_sizes();
    let between: f64 = clustering
        .centroids
        .iter()
        .zip(&sizes)
        .map(|(c, &m)| m as f64 * sq_dist(c, &grand))
        .sum();
    let within = cost(points, &clustering.assignments, &clustering.centroids);
    if within == 0.0 {
        return Ok(VrcScore { value: f64::INFINITY, degenerate: true });
    }
    Ok(VrcScore { value: (between / (k - 1) as f64) / (within / (n - k) as f64), degenerate: false })
}

/// Both criteria evaluated over a range of cluster counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionSweep {
    pub k_values: Vec<usize>,
    pub db_scores: Vec<f64>,
    pub vrc_scores: Vec<f64>,
    pub inertias: Vec<f64>,
}

impl CriterionSweep {
    /// CSV with header `k,davies_bouldin,vrc,inertia`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,davies_bouldin,vrc,inertia\n");
        for i in 0..self.k_values.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.k_values[i], self.db_scores[i], self.vrc_scores[i], self.inertias[i]
            )
            .unwrap();
        }
        out
    }
}

/// Sweep `k_min..=k_max`, scoring the best-of-restarts clustering at each k.
/// The cluster count is not selected automatically.
pub fn sweep_criteria(points: &[Point], k_min: usize, k_max: usize, restarts: usize, seed: u64) -> Result<CriterionSweep> {
    sweep_criteria_with(Exec::default(), points, k_min, k_max, restarts, seed)
}

pub fn sweep_criteria_with(
    exec: Exec,
    points: &[Point],
    k_min: usize,
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<CriterionSweep> {
    if k_min > k_max {
        return Err(Error::Config(format!("k_min {k_min} > k_max {k_max}")));
    }
    validate(points, k_min)?;
    validate(points, k_max)?;
    let opts = KMeansOptions::default();
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let mut runs = par::try_map_range(exec, ks.len(), |i| {
        kmeans_best_of(Exec::Sequential, points, ks[i], restarts, seed, opts)
    })?;
    // Adding a center at the worst-served point and refining can only lower
    // the inertia, so this pass makes inertia non-increasing in k.
    for i in 1..runs.len() {
        if runs[i].inertia > runs[i - 1].inertia {
            let prev = &runs[i - 1];
            let worst = (0..points.len())
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &prev.centroids[prev.assignments[a]]);
                    let db = sq_dist(&points[b], &prev.centroids[prev.assignments[b]]);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("non-empty");
            let mut init = prev.centroids.clone();
            init.push(points[worst]);
            let grown = lloyd(points, init, prev.seed, opts)?;
            if grown.inertia < runs[i].inertia {
                runs[i] = grown;
            }
        }
    }
    let mut sweep = CriterionSweep {
        k_values: ks.clone(),
        db_scores: Vec::with_capacity(ks.len()),
        vrc_scores: Vec::with_capacity(ks.len()),
        inertias: Vec::with_capacity(ks.len()),
    };
    for (k, run) in ks.iter().zip(&runs) {
        let db = match davies_bouldin(points, run) {
            Ok(v) => v,
            Err(Error::DegenerateClusters(a, b)) => {
                log::warn!("k = {k}: clusters {a} and {b} coincide; Davies-Bouldin undefined");
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let ch = if *k < points.len() { vrc(points, run)?.value } else { f64::INFINITY };
        sweep.db_scores.push(db);
        sweep.vrc_scores.push(ch);
        sweep.inertias.push(run.inertia);
    }
    Ok(sweep)
}

/// Per-category mean spectra (the category matrix) and the material map.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTable {
    pub centroid_spectra: Vec<AbsorptionSpectrum>,
    pub material_to_category: BTreeMap<u32, usize>,
    pub theta_tot: usize,
}

const MAP_HEADER: &str = "[material_to_category]";

impl CategoryTable {
    pub fn category_of(&self, material_id: u32) -> Option<usize> {
        self.material_to_category.get(&material_id).copied()
    }

    /// Row `theta` of the category matrix.
    pub fn row(&self, theta: usize) -> &[f64; N_BANDS] {
        self.centroid_spectra[theta].coefficients()
    }

    /// Multi-hot presence vector for a set of wall materials.
    pub fn label_vector(&self, wall_materials: &[u32]) -> Result<Vec<u8>> {
        let mut y = vec![0u8; self.theta_tot];
        for &m in wall_materials {
            let theta = self.category_of(m).ok_or(Error::UnknownMaterial(m))?;
            y[theta] = 1;
        }
        Ok(y)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# category table, theta_tot = {}\n", self.theta_tot);
        for (theta, spec) in self.centroid_spectra.iter().enumerate() {
            out.push_str(&format_record(theta as u32, &format!("category {theta}"), spec.coefficients()));
            out.push('\n');
        }
        out.push_str(MAP_HEADER);
        out.push('\n');
        for (id, theta) in &self.material_to_category {
            writeln!(out, "{id};{theta}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut map = BTreeMap::new();
        let mut in_map = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if t == MAP_HEADER {
                in_map = true;
                continue;
            }
            if in_map {
                let (id, theta) = t.split_once(';').ok_or_else(|| Error::MalformedRecord {
                    line,
                    reason: "expected 'material_id;theta'".into(),
                })?;
                let bad = |what: &str| Error::MalformedRecord { line, reason: format!("bad {what}") };
                let id: u32 = id.trim().parse().map_err(|_| bad("material id"))?;
                let theta: usize = theta.trim().parse().map_err(|_| bad("category index"))?;
                if map.insert(id, theta).is_some() {
                    return Err(Error::DuplicateId { line, id });
                }
            } else {
                let m = parse_record(t, line)?;
                if m.id as usize != rows.len() {
                    return Err(Error::MalformedRecord { line, reason: "category rows must be numbered 0..".into() });
                }
                rows.push(m.spectrum);
            }
        }
        let theta_tot = rows.len();
        if theta_tot == 0 {
            return Err(Error::EmptyDatabase);
        }
        if let Some((&id, &theta)) = map.iter().find(|(_, &t)| t >= theta_tot) {
            return Err(Error::Config(format!("material {id} mapped to category {theta} >= {theta_tot}")));
        }
        Ok(Self { centroid_spectra: rows, material_to_category: map, theta_tot })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Category rows are the arithmetic mean spectra of each cluster's members.
pub fn build_category_table(db: &MaterialDatabase, clustering: &Clustering) -> Result<CategoryTable> {
    if clustering.assignments.len() != db.len() {
        return Err(Error::SizeMismatch { expected: db.len(), actual: clustering.assignments.len() });
    }
    let points = db.spectra_matrix();
    let k = clustering.k;
    if clustering.assignments.iter().any(|&a| a >= k) {
        return Err(Error::ShapeMismatch("assignment outside [0, k)".into()));
    }
    let sizes = clustering.cluster_sizes();
    if let Some(empty) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::ShapeMismatch(format!("cluster {empty} is empty")));
    }
    let rows = means(&points, &clustering.assignments, k)
        .into_iter()
        .map(AbsorptionSpectrum::new)
        .collect::<Result<Vec<_>>>()?;
    let material_to_category = db
        .materials()
        .iter()
        .zip(&clustering.assignments)
        .map(|(m, &a)| (m.id, a))
        .collect();
    Ok(CategoryTable { centroid_spectra: rows, material_to_category, theta_tot: k })
}

/// Cluster a database into `k` categories (best of `restarts`).
pub fn cluster_materials(db: &MaterialDatabase, k: usize, restarts: usize, seed: u64) -> Result<(Clustering, CategoryTable)> {
    let points = db.spectra_matrix();
    let clustering = kmeans_best_of(Exec::default(), &points, k, restarts, seed, KMeansOptions::default())?;
    let table = build_category_table(db, &clustering)?;
    Ok((clustering, table))
}
