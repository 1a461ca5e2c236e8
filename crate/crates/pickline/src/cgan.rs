//! Phase two of data synthesis: a conditional GAN over the six numeric strip
//! columns, treating a window of consecutive strips as a small image and
//! conditioning multiplicatively on the window's steel grade.
//!
//! The generator maps a standard-normal noise row gated by the grade
//! embedding through a leaky-relu dense stack, reshapes to one row per strip
//! and projects each row to the numeric columns. The discriminator mirrors
//! the stack down to a single sigmoid unit and trains on label-smoothed
//! targets with `k` times as much data as the generator sees per step; the
//! two networks are never updated in the same step.

use crate::nn::{
    accumulate_grads, loss_and_grad, read_container, scale_grads, write_container, Activation, LayerSpec, Loss,
    LossTarget, Mat, NetInput, Network, NetworkSpec, OptimizerState,
};
use crate::strip::{destandardize, standardize, GradeVocabulary, LengthModel, StandardizationStats, Strip};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CganConfig {
    /// Noise vector length; the grade embedding has the same dimension.
    pub noise_length: usize,
    pub window_length: usize,
    pub numeric_columns: usize,
    /// Discriminator batches per generator batch.
    pub discriminator_data_ratio: usize,
    /// Target value for real examples (one-sided label smoothing).
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Hidden widths of the dense stacks.
    pub hidden_dims: [usize; 3],
    pub length_model: LengthModel,
}

impl Default for CganConfig {
    fn default() -> Self {
        CganConfig {
            noise_length: 32,
            window_length: 16,
            numeric_columns: 6,
            discriminator_data_ratio: 2,
            label_smoothing: 0.9,
            epochs: 2000,
            batch_size: 64,
            learning_rate: 2e-4,
            hidden_dims: [256, 128, 64],
            length_model: LengthModel::default(),
        }
    }
}

/// Trained conditional GAN with its bound vocabulary and standardization
/// statistics.
#[derive(Clone, Debug)]
pub struct CganModel {
    pub generator: Network,
    pub discriminator: Network,
    pub vocabulary: GradeVocabulary,
    pub stats: StandardizationStats,
    pub config: CganConfig,
    pub generator_loss: Vec<f64>,
    pub discriminator_loss: Vec<f64>,
    /// Epochs flagged by the mode-collapse monitor.
    pub collapse_warnings: usize,
}

fn generator_spec(cfg: &CganConfig, vocab_size: usize) -> Result<NetworkSpec> {
    let n = cfg.noise_length;
    let [h1, h2, h3] = cfg.hidden_dims;
    let leaky = Activation::LeakyRelu(0.2);
    NetworkSpec::new(
        vec![
            LayerSpec::embedding(vocab_size, n),
            LayerSpec::multiply(n),
            LayerSpec::dense(n, h1, leaky),
            LayerSpec::dense(h1, h2, leaky),
            LayerSpec::dense(h2, h3, leaky),
            LayerSpec::dense(h3, n * cfg.window_length, leaky),
            LayerSpec::reshape(n * cfg.window_length, n),
            LayerSpec::dense(n, cfg.numeric_columns, Activation::Identity),
        ],
        Loss::Mse,
    )
}

fn discriminator_spec(cfg: &CganConfig, vocab_size: usize) -> Result<NetworkSpec> {
    let flat = cfg.window_length * cfg.numeric_columns;
    let [h1, h2, h3] = cfg.hidden_dims;
    let leaky = Activation::LeakyRelu(0.2);
    NetworkSpec::new(
        vec![
            LayerSpec::embedding(vocab_size, flat),
            LayerSpec::multiply(flat),
            LayerSpec::dense(flat, h1, leaky),
            LayerSpec::dense(h1, h2, leaky),
            LayerSpec::dense(h2, h3, leaky),
            LayerSpec::dense(h3, 1, Activation::Sigmoid),
        ],
        Loss::BinaryCrossEntropy,
    )
}

/// One training window: standardized rows and the conditioning grade (the
/// first strip's grade).
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub rows: Mat,
    pub grade: usize,
}

/// Windows of consecutive strips, stride 1, standardized.
pub fn build_windows(strips: &[Strip], stats: &StandardizationStats, cfg: &CganConfig) -> Result<Vec<WindowSample>> {
    if strips.len() < cfg.window_length {
        return Err(Error::RejectedInput(format!(
            "need at least {} consecutive strips, got {}",
            cfg.window_length,
            strips.len()
        )));
    }
    let z = standardize(strips, stats)?;
    let mut windows = Vec::with_capacity(strips.len() - cfg.window_length + 1);
    for start in 0..=strips.len() - cfg.window_length {
        let mut rows = Mat::zeros(cfg.window_length, cfg.numeric_columns);
        for r in 0..cfg.window_length {
            rows.row_mut(r).copy_from_slice(&z[start + r][..cfg.numeric_columns]);
        }
        windows.push(WindowSample { rows, grade: strips[start].grade });
    }
    Ok(windows)
}

fn flatten(m: &Mat) -> Mat {
    Mat { rows: 1, cols: m.len(), data: m.data.clone() }
}

fn sample_noise<R: Rng>(n: usize, rng: &mut R) -> Mat {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Mat::row_vec((0..n).map(|_| normal.sample(rng)).collect())
}

/// Standardized numeric window for one noise row and grade window; the
/// conditioning uses the window's first grade.
pub fn generator_forward(model: &CganModel, noise: &Mat, grade_window: &[usize]) -> Result<Mat> {
    if grade_window.is_empty() {
        return Err(Error::RejectedInput("empty grade window".into()));
    }
    for &g in grade_window {
        if g >= model.vocabulary.len() {
            return Err(Error::RejectedInput(format!("grade id {g} outside vocabulary")));
        }
    }
    if noise.rows != 1 || noise.cols != model.config.noise_length {
        return Err(Error::Dimension(format!("noise must be 1x{}", model.config.noise_length)));
    }
    let out = model.generator.forward(NetInput { x: noise, tokens: &grade_window[..1] })?;
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("generator produced non-finite output".into()));
    }
    Ok(out)
}

struct Trainer {
    g: Network,
    d: Network,
    g_opt: OptimizerState,
    d_opt: OptimizerState,
    cfg: CganConfig,
}

impl Trainer {
    /// One discriminator step on `reals` plus an equal number of fakes; the
    /// generator stays frozen. Returns the mean BCE loss.
    fn d_step<R: Rng>(&mut self, reals: &[&WindowSample], rng: &mut R) -> Result<f64> {
        let mut grads = self.d.zero_grads();
        let mut total = 0.0;
        let mut count = 0usize;
        for w in reals {
            // real example, smoothed target
            let x = flatten(&w.rows);
            let tokens = [w.grade];
            let (out, cache) = self.d.forward_train(NetInput { x: &x, tokens: &tokens }, rng)?;
            let target = Mat::row_vec(vec![self.cfg.label_smoothing]);
            let (loss, dldy) = loss_and_grad(Loss::BinaryCrossEntropy, &out, &LossTarget::Values(&target))?;
            total += loss;
            count += 1;
            let (g, _) = self.d.backward(&cache, &dldy)?;
            accumulate_grads(&mut grads, &g);

            // fake example under the same condition, target 0
            let noise = sample_noise(self.cfg.noise_length, rng);
            let fake = self.g.forward(NetInput { x: &noise, tokens: &tokens })?;
            let fx = flatten(&fake);
            let (out, cache) = self.d.forward_train(NetInput { x: &fx, tokens: &tokens }, rng)?;
            let target = Mat::row_vec(vec![0.0]);
            let (loss, dldy) = loss_and_grad(Loss::BinaryCrossEntropy, &out, &LossTarget::Values(&target))?;
            total += loss;
            count += 1;
            let (g, _) = self.d.backward(&cache, &dldy)?;
            accumulate_grads(&mut grads, &g);
        }
        scale_grads(&mut grads, 1.0 / count as f64);
        crate::nn::adam_update(&mut self.d, &grads, &mut self.d_opt)?;
        Ok(total / count as f64)
    }

    /// One generator step with the discriminator frozen, non-saturating
    /// loss (fakes target 1). Returns the mean BCE loss.
    fn g_step<R: Rng>(&mut self, conditions: &[usize], rng: &mut R) -> Result<f64> {
        let mut grads = self.g.zero_grads();
        let mut total = 0.0;
        for &grade in conditions {
            let tokens = [grade];
            let noise = sample_noise(self.cfg.noise_length, rng);
            let (fake, g_cache) = self.g.forward_train(NetInput { x: &noise, tokens: &tokens }, rng)?;
            let fx = flatten(&fake);
            let (out, d_cache) = self.d.forward_train(NetInput { x: &fx, tokens: &tokens }, rng)?;
            let target = Mat::row_vec(vec![1.0]);
            let (loss, dldy) = loss_and_grad(Loss::BinaryCrossEntropy, &out, &LossTarget::Values(&target))?;
            total += loss;
            let (_, dinput) = self.d.backward(&d_cache, &dldy)?;
            let dfake = Mat { rows: fake.rows, cols: fake.cols, data: dinput.data };
            let (g, _) = self.g.backward(&g_cache, &dfake)?;
            accumulate_grads(&mut grads, &g);
        }
        scale_grads(&mut grads, 1.0 / conditions.len() as f64);
        crate::nn::adam_update(&mut self.g, &grads, &mut self.g_opt)?;
        Ok(total / conditions.len() as f64)
    }
}

/// Trains the CGAN on consecutive-strip windows. Alternates k discriminator
/// steps with one generator step, records per-epoch losses and counts
/// mode-collapse warnings (any generated column's standard deviation below
/// 0.1 of the real one for 50 consecutive epochs).
pub fn train_cgan<R: Rng>(
    strips: &[Strip],
    vocabulary: &GradeVocabulary,
    stats: &StandardizationStats,
    config: &CganConfig,
    rng: &mut R,
) -> Result<CganModel> {
    let windows = build_windows(strips, stats, config)?;
    let vocab_size = vocabulary.len();
    let mut trainer = Trainer {
        g: Network::init(generator_spec(config, vocab_size)?, rng)?,
        d: Network::init(discriminator_spec(config, vocab_size)?, rng)?,
        g_opt: OptimizerState::adam(config.learning_rate, 0),
        d_opt: OptimizerState::adam(config.learning_rate, 0),
        cfg: *config,
    };
    trainer.g_opt = OptimizerState::adam(config.learning_rate, trainer.g.param_count());
    trainer.d_opt = OptimizerState::adam(config.learning_rate, trainer.d.param_count());

    let k = config.discriminator_data_ratio.max(1);
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = 0usize;
    let mut generator_loss = Vec::with_capacity(config.epochs);
    let mut discriminator_loss = Vec::with_capacity(config.epochs);
    let mut collapse_streak = 0usize;
    let mut collapse_warnings = 0usize;

    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let gen_batches = windows.len().div_ceil(batch);
        let mut d_total = 0.0;
        let mut g_total = 0.0;
        for _ in 0..gen_batches {
            for _ in 0..k {
                let reals: Vec<&WindowSample> = (0..batch)
                    .map(|_| {
                        let w = &windows[order[cursor % order.len()]];
                        cursor += 1;
                        w
                    })
                    .collect();
                d_total += trainer.d_step(&reals, rng)?;
            }
            let conditions: Vec<usize> = (0..batch)
                .map(|_| {
                    let g = windows[order[cursor % order.len()]].grade;
                    cursor += 1;
                    g
                })
                .collect();
            g_total += trainer.g_step(&conditions, rng)?;
        }
        let d_mean = d_total / (gen_batches * k) as f64;
        let g_mean = g_total / gen_batches as f64;
        if !d_mean.is_finite() || !g_mean.is_finite() {
            return Err(Error::Training(format!("non-finite GAN loss at epoch {epoch}: d={d_mean} g={g_mean}")));
        }
        discriminator_loss.push(d_mean);
        generator_loss.push(g_mean);

        // mode-collapse monitor on a small probe set (standardized real sd is 1)
        let mut probe_sd = [0.0f64; 2];
        {
            let mut values: Vec<Vec<f64>> = vec![Vec::new(); config.numeric_columns];
            for _ in 0..16 {
                let grade = windows[order[cursor % order.len()]].grade;
                cursor += 1;
                let noise = sample_noise(config.noise_length, rng);
                let out = trainer.g.forward(NetInput { x: &noise, tokens: &[grade] })?;
                for r in 0..out.rows {
                    for c in 0..config.numeric_columns {
                        values[c].push(out.row(r)[c]);
                    }
                }
            }
            let mut min_sd = f64::INFINITY;
            for col in &values {
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                min_sd = min_sd.min(sd);
            }
            probe_sd[0] = min_sd;
            probe_sd[1] = 1.0;
        }
        if probe_sd[0] < 0.1 * probe_sd[1] {
            collapse_streak += 1;
            if collapse_streak == 50 {
                collapse_warnings += 1;
                eprintln!("warning: generated column variance collapsed for 50 consecutive epochs (epoch {epoch})");
                collapse_streak = 0;
            }
        } else {
            collapse_streak = 0;
        }
    }

    Ok(CganModel {
        generator: trainer.g,
        discriminator: trainer.d,
        vocabulary: vocabulary.clone(),
        stats: stats.clone(),
        config: *config,
        generator_loss,
        discriminator_loss,
        collapse_warnings,
    })
}

/// Strips generated for the given grade sequence. Numeric columns are
/// destandardized, clipped to the observed historical ranges and rounded
/// where the schema is integral; width ordering violations are repaired.
/// Returns the strips and the number of repaired values.
pub fn generate_strips<R: Rng>(model: &CganModel, grades: &[usize], rng: &mut R) -> Result<(Vec<Strip>, usize)> {
    if grades.is_empty() {
        return Err(Error::RejectedInput("empty grade sequence".into()));
    }
    let w = model.config.window_length;
    let mut strips = Vec::with_capacity(grades.len());
    let mut repairs = 0usize;
    for chunk in grades.chunks(w) {
        let noise = sample_noise(model.config.noise_length, rng);
        let out = generator_forward(model, &noise, chunk)?;
        let std_rows: Vec<[f64; 6]> = (0..chunk.len())
            .map(|r| {
                let mut row = [0.0; 6];
                row.copy_from_slice(&out.row(r)[..6]);
                row
            })
            .collect();
        let raw = destandardize(&std_rows, &model.stats)?;
        for (i, &grade) in chunk.iter().enumerate() {
            let mut row = raw[i];
            for (c, v) in row.iter_mut().enumerate() {
                let clipped = v.clamp(model.stats.columns[c].min, model.stats.columns[c].max);
                if (clipped - *v).abs() > 1e-9 {
                    repairs += 1;
                }
                *v = clipped;
            }
            let mut original_width = row[0].round().max(1.0) as i64;
            let mut resulting_width = row[1].round().max(1.0) as i64;
            if resulting_width > original_width {
                resulting_width = original_width;
                repairs += 1;
            }
            let thickness = row[2].round().max(1.0) as i64;
            let weight = row[3].round().max(1.0) as i64;
            if original_width < resulting_width {
                original_width = resulting_width;
            }
            let length = crate::strip::derive_length(original_width, thickness, weight, &model.config.length_model);
            let strip = Strip {
                grade,
                original_width,
                resulting_width,
                thickness,
                weight,
                coiling_temperature: row[4],
                strips_in_coil: row[5],
                length,
            };
            strip.validate(model.vocabulary.len())?;
            strips.push(strip);
        }
    }
    Ok((strips, repairs))
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Per-column marginal KS plus KS over adjacent |width| and |thickness|
/// differences (the sequential property of the data).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidelityReport {
    pub column_ks: Vec<(String, f64)>,
    pub adjacent_width_ks: f64,
    pub adjacent_thickness_ks: f64,
}

fn adjacent_abs_diffs(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
}

pub fn evaluate_fidelity(real: &[Strip], generated: &[Strip]) -> Result<FidelityReport> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::RejectedInput("fidelity needs non-empty strip sets".into()));
    }
    let mut column_ks = Vec::with_capacity(6);
    for (c, name) in crate::strip::NUMERIC_COLUMNS.iter().enumerate() {
        let a: Vec<f64> = real.iter().map(|s| s.numeric_row()[c]).collect();
        let b: Vec<f64> = generated.iter().map(|s| s.numeric_row()[c]).collect();
        column_ks.push((name.to_string(), ks_statistic(&a, &b)));
    }
    let rw: Vec<f64> = real.iter().map(|s| s.original_width as f64).collect();
    let gw: Vec<f64> = generated.iter().map(|s| s.original_width as f64).collect();
    let rt: Vec<f64> = real.iter().map(|s| s.thickness as f64).collect();
    let gt: Vec<f64> = generated.iter().map(|s| s.thickness as f64).collect();
    Ok(FidelityReport {
        column_ks,
        adjacent_width_ks: ks_statistic(&adjacent_abs_diffs(&rw), &adjacent_abs_diffs(&gw)),
        adjacent_thickness_ks: ks_statistic(&adjacent_abs_diffs(&rt), &adjacent_abs_diffs(&gt)),
    })
}

impl CganModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "vocabulary": self.vocabulary.names(),
            "stats": self.stats,
            "config": self.config,
            "generator_loss": self.generator_loss,
            "discriminator_loss": self.discriminator_loss,
            "collapse_warnings": self.collapse_warnings,
        });
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_container(&mut f, "cgan", &meta, &[&self.generator, &self.discriminator])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (kind, meta, mut nets) = read_container(&mut f)?;
        if kind != "cgan" || nets.len() != 2 {
            return Err(Error::Parse("checkpoint is not a CGAN model".into()));
        }
        let discriminator = nets.pop().unwrap();
        let generator = nets.pop().unwrap();
        let names: Vec<String> = serde_json::from_value(meta.get("vocabulary").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse(format!("vocabulary: {e}")))?;
        let stats: StandardizationStats = serde_json::from_value(meta.get("stats").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse(format!("stats: {e}")))?;
        let config: CganConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        Ok(CganModel {
            generator,
            discriminator,
            vocabulary: GradeVocabulary::new(names)?,
            stats,
            config,
            generator_loss: serde_json::from_value(meta.get("generator_loss").cloned().unwrap_or_default()).unwrap_or_default(),
            discriminator_loss: serde_json::from_value(meta.get("discriminator_loss").cloned().unwrap_or_default())
                .unwrap_or_default(),
            collapse_warnings: meta.get("collapse_warnings").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
        })
    }
}
