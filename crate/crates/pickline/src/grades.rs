//! Phase one of data synthesis: an LSTM language model over steel grades.
//!
//! Consecutive strips sharing (grade, width, thickness) form a batch; the
//! token stream inserts an END token after every batch and the model is
//! trained on fixed-length windows with next-token targets. Sampling draws
//! from the softmax (with temperature) and consumes END tokens as batch
//! separators.

use crate::nn::{
    accumulate_grads, loss_and_grad, lstm_step, scale_grads, Activation, LayerParams, LayerSpec, Loss, LossTarget, Mat,
    NetInput, Network, NetworkSpec, OptimizerState,
};
use crate::strip::{GradeVocabulary, Strip};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradeModelConfig {
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub sampling_temperature: f64,
}

impl Default for GradeModelConfig {
    fn default() -> Self {
        GradeModelConfig {
            hidden_units: 64,
            dropout_rate: 0.2,
            sequence_length: 20,
            batch_size: 256,
            epochs: 60,
            learning_rate: 1e-3,
            sampling_temperature: 1.0,
        }
    }
}

impl GradeModelConfig {
    /// The configuration the source line model used: 512 hidden units and a
    /// long training run.
    pub fn paper() -> Self {
        GradeModelConfig { hidden_units: 512, epochs: 500, ..Self::default() }
    }
}

/// Token stream plus the fixed-length training windows over it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequences {
    pub stream: Vec<usize>,
    pub window_len: usize,
    /// Start offsets; window i is `stream[o..o+len]` with targets shifted one.
    pub windows: Vec<usize>,
}

impl TrainingSequences {
    pub fn window(&self, i: usize) -> (&[usize], &[usize]) {
        let o = self.windows[i];
        (&self.stream[o..o + self.window_len], &self.stream[o + 1..o + 1 + self.window_len])
    }

    /// Mean number of strips per END-delimited batch in the stream.
    pub fn mean_batch_len(&self, end_id: usize) -> f64 {
        let ends = self.stream.iter().filter(|&&t| t == end_id).count();
        let grades = self.stream.len() - ends;
        if ends == 0 {
            grades as f64
        } else {
            grades as f64 / ends as f64
        }
    }
}

/// Builds the batch-terminated token stream and sliding windows. Runs break
/// when any of grade, original width or thickness changes.
pub fn build_training_sequences(strips: &[Strip], vocab: &GradeVocabulary, window_len: usize) -> Result<TrainingSequences> {
    if strips.is_empty() {
        return Err(Error::RejectedInput("no strips to build sequences from".into()));
    }
    if window_len < 2 {
        return Err(Error::Config("sequence length must be at least 2".into()));
    }
    let end = vocab.end_id();
    let mut stream = Vec::with_capacity(strips.len() * 2);
    for (i, s) in strips.iter().enumerate() {
        if s.grade >= vocab.len() {
            return Err(Error::RejectedInput(format!("strip {i} grade {} outside vocabulary", s.grade)));
        }
        stream.push(s.grade);
        let boundary = match strips.get(i + 1) {
            Some(n) => n.grade != s.grade || n.original_width != s.original_width || n.thickness != s.thickness,
            None => true,
        };
        if boundary {
            stream.push(end);
        }
    }
    let windows: Vec<usize> = if stream.len() > window_len { (0..stream.len() - window_len).collect() } else { Vec::new() };
    Ok(TrainingSequences { stream, window_len, windows })
}

/// Trained grade model: LSTM, dropout and a softmax head over the vocabulary
/// (END included), plus the per-epoch training losses.
#[derive(Clone, Debug)]
pub struct GradeModel {
    pub net: Network,
    pub vocabulary: GradeVocabulary,
    pub config: GradeModelConfig,
    pub epoch_loss: Vec<f64>,
}

fn one_hot_window(tokens: &[usize], vocab_size: usize) -> Mat {
    let mut m = Mat::zeros(tokens.len(), vocab_size);
    for (r, &t) in tokens.iter().enumerate() {
        m.row_mut(r)[t] = 1.0;
    }
    m
}

/// Trains the language model with Adam on shuffled mini-batches of windows,
/// minimizing per-token cross-entropy. Tokens are one-hot; there is no
/// embedding layer.
pub fn train_grade_model<R: Rng>(
    sequences: &TrainingSequences,
    vocab: &GradeVocabulary,
    config: &GradeModelConfig,
    rng: &mut R,
) -> Result<GradeModel> {
    if sequences.windows.is_empty() {
        return Err(Error::RejectedInput("token stream shorter than one training window".into()));
    }
    let vocab_size = vocab.len_with_end();
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::lstm(vocab_size, config.hidden_units),
            LayerSpec::dropout(config.hidden_units, config.dropout_rate),
            LayerSpec::dense(config.hidden_units, vocab_size, Activation::Softmax),
        ],
        Loss::CrossEntropy,
    )?;
    let mut net = Network::init(spec, rng)?;
    let mut opt = OptimizerState::adam(config.learning_rate, net.param_count());

    let mut order: Vec<usize> = (0..sequences.windows.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle from the run seed
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut grads = net.zero_grads();
            for &w in chunk {
                let (input, targets) = sequences.window(w);
                let x = one_hot_window(input, vocab_size);
                let (out, cache) = net.forward_train(NetInput::dense(&x), rng)?;
                let (loss, dldy) = loss_and_grad(Loss::CrossEntropy, &out, &LossTarget::Classes(targets))?;
                total += loss;
                tokens += targets.len();
                let (g, _) = net.backward(&cache, &dldy)?;
                accumulate_grads(&mut grads, &g);
            }
            scale_grads(&mut grads, 1.0 / (chunk.len() as f64 * sequences.window_len as f64));
            crate::nn::adam_update(&mut net, &grads, &mut opt)?;
        }
        let mean = total / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("non-finite cross-entropy {mean} at epoch {epoch}")));
        }
        epoch_loss.push(mean);
    }
    Ok(GradeModel { net, vocabulary: vocab.clone(), config: *config, epoch_loss })
}

/// A sampled grade sequence. `batch_lengths` covers the completed
/// END-delimited batches (a trailing unfinished batch is not counted).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGrades {
    pub grades: Vec<usize>,
    pub batch_lengths: Vec<usize>,
}

impl GradeModel {
    fn lstm_params(&self) -> (&Mat, &Mat, &[f64]) {
        match &self.net.params()[0] {
            LayerParams::Lstm { wx, wh, b } => (wx, wh, b),
            _ => unreachable!("grade model layer 0 is an lstm"),
        }
    }

    fn head_params(&self) -> (&Mat, &[f64]) {
        match &self.net.params()[2] {
            LayerParams::Dense { w, b } => (w, b),
            _ => unreachable!("grade model layer 2 is dense"),
        }
    }

    /// Next-token distribution given the recurrent state, with temperature
    /// applied to the logits. Temperatures below 1e-9 mean greedy sampling.
    fn next_distribution(&self, prev: usize, h: &mut Vec<f64>, c: &mut Vec<f64>, temperature: f64) -> Result<Vec<f64>> {
        let vocab_size = self.vocabulary.len_with_end();
        let (wx, wh, b) = self.lstm_params();
        let mut x = vec![0.0; vocab_size];
        x[prev] = 1.0;
        let (h_new, c_new, _) = lstm_step(wx, wh, b, &x, h, c)?;
        *h = h_new;
        *c = c_new;
        let (w, bias) = self.head_params();
        let mut logits = vec![0.0; vocab_size];
        for (r, l) in logits.iter_mut().enumerate() {
            let mut acc = bias[r];
            for (wv, hv) in w.row(r).iter().zip(h.iter()) {
                acc += wv * hv;
            }
            *l = acc;
        }
        if temperature > 1e-9 {
            for l in &mut logits {
                *l /= temperature;
            }
        }
        Activation::Softmax.apply(&mut logits);
        Ok(logits)
    }

    /// Draws grades until `count` are collected. END tokens delimit batches
    /// and are consumed, never returned. Deterministic under a fixed seed.
    pub fn sample_grades<R: Rng>(&self, count: usize, rng: &mut R) -> Result<SampledGrades> {
        if count == 0 {
            return Err(Error::RejectedInput("requested zero grades".into()));
        }
        let end = self.vocabulary.end_id();
        let temperature = self.config.sampling_temperature;
        let greedy = temperature <= 1e-9;
        let mut h = vec![0.0; self.config.hidden_units];
        let mut c = vec![0.0; self.config.hidden_units];
        let mut prev = end;
        let mut grades = Vec::with_capacity(count);
        let mut batch_lengths = Vec::new();
        let mut current_batch = 0usize;
        let mut consecutive_ends = 0usize;
        while grades.len() < count {
            let probs = self.next_distribution(prev, &mut h, &mut c, temperature)?;
            let tok = if greedy {
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            } else {
                crate::nn::sample_categorical(&probs, rng)?
            };
            let tok = if tok == end && consecutive_ends >= 64 {
                // degenerate END loop: force the most likely grade
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate().take(end) {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            } else {
                tok
            };
            if tok == end {
                consecutive_ends += 1;
                if current_batch > 0 {
                    batch_lengths.push(current_batch);
                    current_batch = 0;
                }
            } else {
                consecutive_ends = 0;
                grades.push(tok);
                current_batch += 1;
            }
            prev = tok;
        }
        Ok(SampledGrades { grades, batch_lengths })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let extra = serde_json::json!({
            "kind": "grade-model",
            "vocabulary": self.vocabulary.names(),
            "config": self.config,
            "epoch_loss": self.epoch_loss,
        });
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::nn::write_network(&mut f, &self.net, &extra)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (net, extra) = crate::nn::read_network(&mut f)?;
        if extra.get("kind").and_then(|v| v.as_str()) != Some("grade-model") {
            return Err(Error::Parse("checkpoint is not a grade model".into()));
        }
        let names: Vec<String> = serde_json::from_value(extra.get("vocabulary").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse(format!("vocabulary: {e}")))?;
        let config: GradeModelConfig = serde_json::from_value(extra.get("config").cloned().unwrap_or_default())
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        let epoch_loss: Vec<f64> =
            serde_json::from_value(extra.get("epoch_loss").cloned().unwrap_or_default()).unwrap_or_default();
        Ok(GradeModel { net, vocabulary: GradeVocabulary::new(names)?, config, epoch_loss })
    }
}
