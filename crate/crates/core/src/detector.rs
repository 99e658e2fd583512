//! CRNN material-category detector: model assembly, training with two-patience
//! early stopping, posterior estimation, thresholding and reconstruction of
//! the detected absorption rows.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::CategoryTable;
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureConfig, FeatureMatrix, Standardizer, Window};
use crate::material_db::N_BANDS;
use crate::nn::{
    balanced_class_weights, from_sequence, last_step, last_step_backward, maxpool_freq_backward, maxpool_freq_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, to_sequence, weighted_bce, AdamState, ClassWeights, Conv2d, Dense, Gru, GruCache,
    Module, Real, Tensor,
};
use crate::par::{try_map_range, Exec};
use crate::room_sim::Air;
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    /// Max-pool width along frequency.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnnConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub gru_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_train: usize,
    pub patience_val: usize,
    /// One value (applied to every category) or one per category.
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            conv_blocks: vec![ConvBlock { filters: 16, kernel: 3, pool: 2 }, ConvBlock { filters: 32, kernel: 3, pool: 2 }],
            gru_hidden: 64,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience_train: 10,
            patience_val: 15,
            thresholds: vec![0.5],
            seed: 0,
        }
    }
}

impl CrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.iter().any(|b| b.filters == 0 || b.kernel % 2 == 0 || b.pool == 0) {
            return Err(Error::Config("conv blocks need filters > 0, odd kernels and pool > 0".into()));
        }
        if self.gru_hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("gru_hidden, batch_size and max_epochs must be positive".into()));
        }
        if self.patience_train == 0 || self.patience_val == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&z| !(z > 0.0 && z < 1.0)) {
            return Err(Error::Config(format!("thresholds {:?} must lie in (0, 1)", self.thresholds)));
        }
        Ok(())
    }

    /// Thresholds expanded to `theta` categories.
    pub fn threshold_vector(&self, theta: usize) -> Result<Vec<f64>> {
        match self.thresholds.len() {
            1 => Ok(vec![self.thresholds[0]; theta]),
            n if n == theta => Ok(self.thresholds.clone()),
            n => Err(Error::Config(format!("{n} thresholds given for {theta} categories"))),
        }
    }
}

// ---------------------------------------------------------------- model

/// Conv blocks -> per-step flatten -> GRU -> final state -> dense -> sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Crnn<T> {
    pub convs: Vec<Conv2d<T>>,
    pub pools: Vec<usize>,
    pub gru: Gru<T>,
    pub dense: Dense<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CrnnCache<T> {
    conv_in: Vec<Tensor<T>>,
    conv_out: Vec<Tensor<T>>,
    relu_out: Vec<Tensor<T>>,
    pooled_shape: Vec<usize>,
    seq: Tensor<T>,
    gru: GruCache<T>,
    last: Tensor<T>,
    pub posteriors: Tensor<T>,
}

impl<T: Real> Crnn<T> {
    pub fn new(cfg: &CrnnConfig, bins: usize, theta: usize) -> Result<Self> {
        cfg.validate()?;
        if theta == 0 {
            return Err(Error::Config("at least one category is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]));
        let (mut c_in, mut f) = (1, bins);
        let mut convs = Vec::new();
        for b in &cfg.conv_blocks {
            convs.push(Conv2d::new(c_in, b.filters, b.kernel, b.kernel, &mut rng));
            f /= b.pool;
            if f == 0 {
                return Err(Error::Config(format!("{bins} frequency bins cannot be pooled by {:?}", cfg.conv_blocks)));
            }
            c_in = b.filters;
        }
        let gru = Gru::new(c_in * f, cfg.gru_hidden, &mut rng);
        let dense = Dense::new(cfg.gru_hidden, theta, &mut rng);
        Ok(Self { convs, pools: cfg.conv_blocks.iter().map(|b| b.pool).collect(), gru, dense })
    }

    pub fn theta(&self) -> usize {
        self.dense.weight.shape[0]
    }

    /// Human-readable layer description stored in checkpoints.
    pub fn spec_string(&self) -> String {
        let mut parts: Vec<String> = self
            .convs
            .iter()
            .zip(&self.pools)
            .map(|(c, p)| format!("conv{}x{}x{}-relu-pool1x{p}", c.weight.shape[0], c.weight.shape[2], c.weight.shape[3]))
            .collect();
        parts.push(format!("gru{}", self.gru.hidden_size()));
        parts.push(format!("dense{}-sigmoid", self.theta()));
        parts.join("|")
    }

    /// `x` is `B x 1 x T x F`; returns `B x theta` posteriors with the cache.
    pub fn forward(&self, x: &Tensor<T>) -> Result<CrnnCache<T>> {
        let mut h = x.clone();
        let (mut conv_in, mut conv_out, mut relu_out) = (Vec::new(), Vec::new(), Vec::new());
        for (conv, &pool) in self.convs.iter().zip(&self.pools) {
            let y = conv.forward(&h)?;
            let r = relu_forward(&y);
            let p = maxpool_freq_forward(&r, pool)?;
            conv_in.push(h);
            conv_out.push(y);
            relu_out.push(r);
            h = p;
        }
        let pooled_shape = h.shape.clone();
        let seq = to_sequence(&h)?;
        let gru = self.gru.forward(&seq)?;
        let last = last_step(&gru.hidden);
        let posteriors = sigmoid_forward(&self.dense.forward(&last)?);
        Ok(CrnnCache { conv_in, conv_out, relu_out, pooled_shape, seq, gru, last, posteriors })
    }

    pub fn posteriors(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.posteriors)
    }

    /// Parameter gradients given the loss gradient w.r.t. the posteriors.
    pub fn backward(&self, cache: &CrnnCache<T>, g_post: &Tensor<T>) -> Result<Crnn<T>> {
        let mut grads = self.zeros_like();
        let g_logits = sigmoid_backward(&cache.posteriors, g_post);
        let g_last = self.dense.backward(&cache.last, &g_logits, &mut grads.dense)?;
        let g_hidden = last_step_backward(&g_last, &cache.gru.hidden.shape);
        let g_seq = self.gru.backward(&cache.seq, &cache.gru, &g_hidden, &mut grads.gru)?;
        let mut g = from_sequence(&g_seq, &cache.pooled_shape)?;
        for i in (0..self.convs.len()).rev() {
            g = maxpool_freq_backward(&cache.relu_out[i], &g, self.pools[i])?;
            g = relu_backward(&cache.conv_out[i], &g);
            g = self.convs[i].backward(&cache.conv_in[i], &g, &mut grads.convs[i])?;
        }
        Ok(grads)
    }
}

impl<T: Real> Module<T> for Crnn<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.gru.params());
        v.extend(self.dense.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.gru.params_mut());
        v.extend(self.dense.params_mut());
        v
    }
    fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Module::zeros_like).collect(),
            pools: self.pools.clone(),
            gru: self.gru.zeros_like(),
            dense: self.dense.zeros_like(),
        }
    }
}

// ---------------------------------------------------------------- detector

#[derive(Debug, Clone, PartialEq)]
pub struct CrnnDetector {
    pub model: Crnn<f32>,
    pub standardizer: Standardizer,
    pub features: FeatureConfig,
    pub sample_rate: u32,
    pub frames: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub posteriors: Vec<f64>,
    /// Categories whose posterior reaches their threshold, ascending.
    pub present: Vec<usize>,
    /// Category-table rows of the present categories, in the same order.
    pub a_hat: Vec<[f64; N_BANDS]>,
}

/// Threshold posteriors (ties count as present) and copy the matching rows.
pub fn detect_from_posteriors(posteriors: &[f64], thresholds: &[f64], table: &CategoryTable) -> Result<DetectionResult> {
    if posteriors.len() != thresholds.len() || posteriors.len() != table.theta_tot {
        return Err(Error::ShapeMismatch(format!(
            "{} posteriors, {} thresholds, {} table categories",
            posteriors.len(),
            thresholds.len(),
            table.theta_tot
        )));
    }
    let present: Vec<usize> = (0..posteriors.len()).filter(|&t| posteriors[t] >= thresholds[t]).collect();
    let a_hat = present.iter().map(|&t| *table.row(t)).collect();
    Ok(DetectionResult { posteriors: posteriors.to_vec(), present, a_hat })
}

impl CrnnDetector {
    pub fn theta(&self) -> usize {
        self.model.theta()
    }

    fn input(&self, fm: &FeatureMatrix) -> Result<Tensor<f32>> {
        if fm.bins != self.standardizer.mean.len() || fm.frames != self.frames {
            return Err(Error::ShapeMismatch(format!(
                "features are {}x{}, model expects {}x{}",
                fm.frames,
                fm.bins,
                self.frames,
                self.standardizer.mean.len()
            )));
        }
        to_input(&self.standardizer, fm)
    }

    pub fn posteriors_from_features(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        let p = self.model.posteriors(&self.input(fm)?)?;
        Ok(p.data.iter().map(|v| v.f64()).collect())
    }

    pub fn posteriors(&self, air: &Air) -> Result<Vec<f64>> {
        if air.sample_rate != self.sample_rate {
            return Err(Error::SampleRateMismatch { expected: self.sample_rate, actual: air.sample_rate });
        }
        self.posteriors_from_features(&extract_features(air, &self.features)?)
    }

    pub fn posteriors_batch(&self, exec: Exec, features: &[FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
        try_map_range(exec, features.len(), |i| self.posteriors_from_features(&features[i]))
    }

    pub fn detect(&self, air: &Air, table: &CategoryTable) -> Result<DetectionResult> {
        detect_from_posteriors(&self.posteriors(air)?, &self.thresholds, table)
    }

    pub fn present(&self, posteriors: &[f64]) -> Vec<u8> {
        posteriors.iter().zip(&self.thresholds).map(|(p, z)| u8::from(p >= z)).collect()
    }
}

fn to_input(st: &Standardizer, fm: &FeatureMatrix) -> Result<Tensor<f32>> {
    Tensor::new(vec![1, 1, fm.frames, fm.bins], st.apply(fm).into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    TrainPatience,
    ValPatience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept (minimum validation loss).
    pub selected_epoch: usize,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
    pub class_weights: ClassWeights,
}

/// The two-patience stopping rule: stop `patience_train` epochs after the
/// training loss last improved, or `patience_val` epochs after the
/// validation loss last improved.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience_train: usize,
    patience_val: usize,
    best_train: f64,
    best_val: f64,
    since_train: usize,
    since_val: usize,
}

impl EarlyStopping {
    pub fn new(patience_train: usize, patience_val: usize) -> Self {
        Self { patience_train, patience_val, best_train: f64::INFINITY, best_val: f64::INFINITY, since_train: 0, since_val: 0 }
    }

    /// Record one epoch; returns whether validation improved and the stop
    /// decision.
    pub fn update(&mut self, train: f64, val: f64) -> (bool, Option<StopReason>) {
        if train < self.best_train {
            self.best_train = train;
            self.since_train = 0;
        } else {
            self.since_train += 1;
        }
        let improved = val < self.best_val;
        if improved {
            self.best_val = val;
            self.since_val = 0;
        } else {
            self.since_val += 1;
        }
        let stop = if self.since_train >= self.patience_train {
            Some(StopReason::TrainPatience)
        } else if self.since_val >= self.patience_val {
            Some(StopReason::ValPatience)
        } else {
            None
        };
        (improved, stop)
    }
}

fn label_tensor(y: &[u8]) -> Tensor<f32> {
    Tensor { shape: vec![1, y.len()], data: y.iter().map(|&v| f32::from(v)).collect() }
}

fn mean_loss(model: &Crnn<f32>, exec: Exec, xs: &[Tensor<f32>], ys: &[Tensor<f32>], w: &[[f64; 2]]) -> Result<f64> {
    let losses = try_map_range(exec, xs.len(), |i| Ok::<_, Error>(weighted_bce(&model.posteriors(&xs[i])?, &ys[i], w)?.0))?;
    Ok(losses.iter().sum::<f64>() / xs.len() as f64)
}

/// Train on precomputed features. Standardization statistics and class
/// weights come from the training set only. Per-sample gradients may be
/// computed in parallel; they are reduced in sample order.
pub fn train_on_features(
    train_x: &[FeatureMatrix],
    train_y: &[Vec<u8>],
    val_x: &[FeatureMatrix],
    val_y: &[Vec<u8>],
    cfg: &CrnnConfig,
    exec: Exec,
) -> Result<(CrnnDetector, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    if train_x.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_x.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    if train_x.len() != train_y.len() {
        return Err(Error::LengthMismatch(train_x.len(), train_y.len()));
    }
    if val_x.len() != val_y.len() {
        return Err(Error::LengthMismatch(val_x.len(), val_y.len()));
    }
    let theta = train_y[0].len();
    let (frames, bins) = (train_x[0].frames, train_x[0].bins);
    if train_x.iter().chain(val_x).any(|f| f.frames != frames || f.bins != bins)
        || train_y.iter().chain(val_y).any(|y| y.len() != theta)
    {
        return Err(Error::ShapeMismatch("inconsistent feature or label shapes".into()));
    }
    let thresholds = cfg.threshold_vector(theta)?;
    let standardizer = Standardizer::fit(train_x)?;
    let weights = balanced_class_weights(train_y);
    let xs: Vec<Tensor<f32>> = train_x.iter().map(|f| to_input(&standardizer, f)).collect::<Result<_>>()?;
    let ys: Vec<Tensor<f32>> = train_y.iter().map(|y| label_tensor(y)).collect();
    let vxs: Vec<Tensor<f32>> = val_x.iter().map(|f| to_input(&standardizer, f)).collect::<Result<_>>()?;
    let vys: Vec<Tensor<f32>> = val_y.iter().map(|y| label_tensor(y)).collect();

    let mut model = Crnn::<f32>::new(cfg, bins, theta)?;
    let mut adam = AdamState::new(&model.params(), cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience_train, cfg.patience_val);
    let (mut best, mut selected) = (model.clone(), 0);
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..xs.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = try_map_range(exec, batch.len(), |j| {
                let i = batch[j];
                let cache = model.forward(&xs[i])?;
                let (loss, g) = weighted_bce(&cache.posteriors, &ys[i], &weights)?;
                Ok::<_, Error>((loss, model.backward(&cache, &g)?))
            })?;
            let mut total = model.zeros_like();
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                total.accumulate(g);
            }
            let scale = 1.0 / batch.len() as f32;
            for p in total.params_mut() {
                p.scale(scale);
            }
            adam.step(model.params_mut(), total.params())?;
        }
        let tl = epoch_loss / xs.len() as f64;
        let vl = mean_loss(&model, exec, &vxs, &vys, &weights)?;
        if !tl.is_finite() || !vl.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        train_loss.push(tl);
        val_loss.push(vl);
        log::debug!("epoch {epoch}: train loss {tl:.5}, val loss {vl:.5}");
        let (improved, stop) = stopper.update(tl, vl);
        if improved {
            best = model.clone();
            selected = epoch;
        }
        if let Some(reason) = stop {
            stop_reason = reason;
            break;
        }
    }
    log::info!(
        "crnn: {} epochs, selected epoch {selected} (val loss {:.5}), stop: {stop_reason:?}",
        train_loss.len(),
        val_loss[selected]
    );
    let detector = CrnnDetector { model: best, standardizer, features: FeatureConfig::default(), sample_rate: train_x[0].sample_rate, frames, thresholds };
    let report = TrainReport {
        train_loss,
        val_loss,
        selected_epoch: selected,
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
        class_weights: weights,
    };
    Ok((detector, report))
}

/// Features and label vectors of one split, in manifest order.
pub fn split_features(
    manifest: &DatasetManifest,
    split: Split,
    features: &FeatureConfig,
    exec: Exec,
) -> Result<(Vec<FeatureMatrix>, Vec<Vec<u8>>)> {
    let records: Vec<_> = manifest.split(split).collect();
    let fms = try_map_range(exec, records.len(), |i| extract_features(&manifest.load_air(records[i])?, features))?;
    Ok((fms, records.iter().map(|r| r.label_vector.clone()).collect()))
}

/// Extract features from the manifest's train and validation splits and train.
pub fn train(
    manifest: &DatasetManifest,
    table: &CategoryTable,
    cfg: &CrnnConfig,
    features: &FeatureConfig,
    exec: Exec,
) -> Result<(CrnnDetector, TrainReport)> {
    if manifest.theta_tot() != table.theta_tot {
        return Err(Error::ShapeMismatch(format!(
            "manifest has {} categories, table has {}",
            manifest.theta_tot(),
            table.theta_tot
        )));
    }
    let (tx, ty) = split_features(manifest, Split::Train, features, exec)?;
    let (vx, vy) = split_features(manifest, Split::Val, features, exec)?;
    if let Some(f) = tx.iter().chain(&vx).find(|f| f.sample_rate != tx[0].sample_rate) {
        return Err(Error::SampleRateMismatch { expected: tx[0].sample_rate, actual: f.sample_rate });
    }
    let (mut det, report) = train_on_features(&tx, &ty, &vx, &vy, cfg, exec)?;
    det.features = *features;
    Ok((det, report))
}

// ---------------------------------------------------------------- checkpoint

const CKPT_MAGIC: &[u8; 8] = b"MDCRNN01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: String,
    conv_blocks: Vec<ConvBlock>,
    gru_hidden: usize,
    theta: usize,
    frames: usize,
    bins: usize,
    sample_rate: u32,
    frame_len_s: f64,
    hop_s: f64,
    target_duration_s: f64,
    n_fft: usize,
    window: String,
    thresholds: Vec<f64>,
    shapes: Vec<Vec<usize>>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

impl CrnnDetector {
    /// Magic, header length (u32 LE), JSON header, then every parameter
    /// tensor as f32 LE in declaration order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = &self.model;
        let header = CheckpointHeader {
            spec: m.spec_string(),
            conv_blocks: m
                .convs
                .iter()
                .zip(&m.pools)
                .map(|(c, &pool)| ConvBlock { filters: c.weight.shape[0], kernel: c.weight.shape[2], pool })
                .collect(),
            gru_hidden: m.gru.hidden_size(),
            theta: m.theta(),
            frames: self.frames,
            bins: self.standardizer.mean.len(),
            sample_rate: self.sample_rate,
            frame_len_s: self.features.frame_len_s,
            hop_s: self.features.hop_s,
            target_duration_s: self.features.target_duration_s,
            n_fft: self.features.n_fft,
            window: self.features.window.name().to_string(),
            thresholds: self.thresholds.clone(),
            shapes: m.params().iter().map(|p| p.shape.clone()).collect(),
            feature_mean: self.standardizer.mean.clone(),
            feature_std: self.standardizer.std.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        for p in m.params() {
            for v in &p.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::format(path, "not a detector checkpoint"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let window = Window::parse(&h.window).ok_or_else(|| Error::format(path, format!("unknown window {}", h.window)))?;
        let cfg = CrnnConfig { conv_blocks: h.conv_blocks.clone(), gru_hidden: h.gru_hidden, thresholds: h.thresholds.clone(), ..Default::default() };
        let mut model = Crnn::<f32>::new(&cfg, h.bins, h.theta)?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape.clone()).collect();
        if shapes != h.shapes || model.spec_string() != h.spec {
            return Err(Error::format(path, "parameter shapes do not match the layer spec"));
        }
        let mut data = &bytes[12 + hlen..];
        for p in model.params_mut() {
            let need = p.len() * 4;
            if data.len() < need {
                return Err(Error::format(path, "truncated parameters"));
            }
            for (v, chunk) in p.data.iter_mut().zip(data[..need].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        if h.feature_mean.len() != h.bins || h.feature_std.len() != h.bins || h.thresholds.len() != h.theta {
            return Err(Error::format(path, "standardization or threshold sizes are inconsistent"));
        }
        Ok(Self {
            model,
            standardizer: Standardizer { mean: h.feature_mean, std: h.feature_std },
            features: FeatureConfig {
                frame_len_s: h.frame_len_s,
                hop_s: h.hop_s,
                target_duration_s: h.target_duration_s,
                n_fft: h.n_fft,
                window,
            },
            sample_rate: h.sample_rate,
            frames: h.frames,
            thresholds: h.thresholds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::score;
    use crate::material_db::AbsorptionSpectrum;
    use crate::nn::gradcheck::{numeric_gradient, relative_error};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg(seed: u64) -> CrnnConfig {
        CrnnConfig {
            conv_blocks: vec![ConvBlock { filters: 3, kernel: 3, pool: 2 }],
            gru_hidden: 6,
            lr: 1e-2,
            batch_size: 8,
            max_epochs: 40,
            seed,
            ..Default::default()
        }
    }

    fn fm(values: Vec<f64>, frames: usize, bins: usize) -> FeatureMatrix {
        FeatureMatrix { values, frames, bins, frame_len_s: 0.003, hop_s: 0.0015, n_fft: 2 * (bins - 1), sample_rate: 16000 }
    }

    /// Category t present <=> its own block of bins is bright.
    fn toy(n: usize, seed: u64) -> (Vec<FeatureMatrix>, Vec<Vec<u8>>) {
        let (frames, bins) = (8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let y: Vec<u8> = (0..3).map(|_| u8::from(rng.gen_bool(0.5))).collect();
                let mut v = vec![0.0; frames * bins];
                for t in 0..frames {
                    for f in 0..bins {
                        let cat = (f / 3).min(2);
                        v[t * bins + f] = rng.gen_range(-0.3..0.3) + if y[cat] == 1 { 2.0 } else { 0.0 };
                    }
                }
                (fm(v, frames, bins), y)
            })
            .unzip()
    }

    fn table(theta: usize) -> CategoryTable {
        CategoryTable {
            centroid_spectra: (0..theta).map(|t| AbsorptionSpectrum::flat(0.05 + 0.05 * t as f64).unwrap()).collect(),
            material_to_category: BTreeMap::new(),
            theta_tot: theta,
        }
    }

    #[test]
    fn whole_model_gradient_check() {
        let cfg = CrnnConfig {
            conv_blocks: vec![ConvBlock { filters: 2, kernel: 3, pool: 2 }, ConvBlock { filters: 2, kernel: 3, pool: 2 }],
            gru_hidden: 3,
            ..Default::default()
        };
        let model = Crnn::<f64>::new(&cfg, 9, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 1, 4, 9], 1.0, &mut rng);
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let w = [[0.8, 1.3], [1.1, 0.6]];
        let loss = |m: &Crnn<f64>| weighted_bce(&m.posteriors(&x).unwrap(), &y, &w).unwrap().0;
        let cache = model.forward(&x).unwrap();
        let (_, g) = weighted_bce(&cache.posteriors, &y, &w).unwrap();
        let grads = model.backward(&cache, &g).unwrap();
        for (pi, analytic) in grads.params().iter().enumerate() {
            let base = model.params()[pi].data.clone();
            let num = numeric_gradient(&base, 1e-5, |v| {
                let mut m = model.clone();
                m.params_mut()[pi].data = v.to_vec();
                loss(&m)
            });
            assert!(relative_error(&analytic.data, &num) < 1e-6, "param {pi}");
        }
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut model = Crnn::<f64>::new(&tiny_cfg(0), 9, 4).unwrap();
        model.dense.zero();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = model.posteriors(&Tensor::uniform(&[1, 1, 5, 9], 3.0, &mut rng)).unwrap();
        assert_eq!(p.data, vec![0.5; 4]);
    }

    #[test]
    fn detection_rules() {
        let t = table(10);
        let d = detect_from_posteriors(&[0.49; 10], &[0.5; 10], &t).unwrap();
        assert!(d.present.is_empty() && d.a_hat.is_empty());
        let mut p = vec![0.2; 10];
        p[0] = 0.9;
        p[9] = 0.7;
        p[4] = 0.5;
        let d = detect_from_posteriors(&p, &[0.5; 10], &t).unwrap();
        assert_eq!(d.present, vec![0, 4, 9]);
        assert_eq!(d.a_hat, vec![*t.row(0), *t.row(4), *t.row(9)]);
        let mut raised = vec![0.5; 10];
        raised[4] = 0.6;
        assert_eq!(detect_from_posteriors(&p, &raised, &t).unwrap().present, vec![0, 9]);
        assert!(detect_from_posteriors(&p, &[0.5; 9], &t).is_err());
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStopping::new(10, 15);
        for e in 0..100 {
            let (_, stop) = s.update(1.0 / (e + 1) as f64, 1.0 / (e + 1) as f64);
            assert_eq!(stop, None);
        }
        let mut s = EarlyStopping::new(10, 15);
        s.update(1.0, 1.0);
        let stops: Vec<_> = (0..10).map(|e| s.update(2.0, 0.5 / (e + 1) as f64).1).collect();
        assert_eq!(stops[9], Some(StopReason::TrainPatience));
        assert!(stops[..9].iter().all(Option::is_none));
        let mut s = EarlyStopping::new(10, 3);
        s.update(1.0, 1.0);
        let stops: Vec<_> = (0..3).map(|e| s.update(0.5 / (e + 1) as f64, 2.0).1).collect();
        assert_eq!(stops, vec![None, None, Some(StopReason::ValPatience)]);
    }

    #[test]
    fn class_weights_balance_training_split() {
        let (_, y) = toy(37, 5);
        let w = balanced_class_weights(&y);
        for t in 0..3 {
            let (neg, pos): (f64, f64) = y.iter().fold((0.0, 0.0), |(n, p), v| if v[t] == 1 { (n, p + w[t][1]) } else { (n + w[t][0], p) });
            assert!((neg - pos).abs() <= 1.0, "{neg} {pos}");
        }
    }

    #[test]
    fn separable_toy_and_determinism() {
        let (tx, ty) = toy(64, 1);
        let (vx, vy) = toy(24, 2);
        let (det, report) = train_on_features(&tx, &ty, &vx, &vy, &tiny_cfg(7), Exec::Sequential).unwrap();
        let best = report.val_loss[report.selected_epoch];
        assert!(report.val_loss.iter().all(|&v| best <= v));
        let preds: Vec<Vec<u8>> = vx.iter().map(|f| det.present(&det.posteriors_from_features(f).unwrap())).collect();
        let m = score(&preds, &vy).unwrap();
        assert!(m.macro_f1 >= 0.9, "{m:?}");
        for f in &vx {
            assert!(det.posteriors_from_features(f).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let (det2, report2) = train_on_features(&tx, &ty, &vx, &vy, &tiny_cfg(7), Exec::Parallel).unwrap();
        assert_eq!(report.train_loss, report2.train_loss);
        assert_eq!(report.val_loss, report2.val_loss);
        assert_eq!(det, det2);
    }

    #[test]
    fn checkpoint_round_trip_and_rate_check() {
        let (tx, ty) = toy(8, 3);
        let mut cfg = tiny_cfg(1);
        cfg.max_epochs = 2;
        let (det, _) = train_on_features(&tx, &ty, &tx, &ty, &cfg, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        det.save(&p).unwrap();
        let back = CrnnDetector::load(&p).unwrap();
        assert_eq!(back, det);
        assert_eq!(back.posteriors_from_features(&tx[0]).unwrap(), det.posteriors_from_features(&tx[0]).unwrap());
        let air = Air { taps: vec![0.0; 100], sample_rate: 8000, room_id: 0, source_id: 0, receiver_id: 0 };
        assert!(matches!(det.posteriors(&air), Err(Error::SampleRateMismatch { expected: 16000, actual: 8000 })));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(CrnnDetector::load(&p).is_err());
    }

    #[test]
    fn training_preconditions() {
        let (tx, ty) = toy(4, 0);
        let cfg = tiny_cfg(0);
        assert!(matches!(train_on_features(&tx, &ty, &[], &[], &cfg, Exec::Sequential), Err(Error::EmptySplit(_))));
        assert!(matches!(train_on_features(&[], &[], &tx, &ty, &cfg, Exec::Sequential), Err(Error::EmptySplit(_))));
        let bad = CrnnConfig { thresholds: vec![1.0], ..cfg };
        assert!(matches!(train_on_features(&tx, &ty, &tx, &ty, &bad, Exec::Sequential), Err(Error::Config(_))));
    }
}
