use super::{Activation, LayerKind, Mat, NetworkSpec};
use crate::{Error, Result};
use rand::Rng;

/// Parameters of one layer. Parameter-free layers use `None`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// `w` is out×in row-major, `b` has length out.
    Dense { w: Mat, b: Vec<f64> },
    /// Gate order in the stacked matrices is input, forget, candidate, output.
    /// `wx` is 4h×in, `wh` is 4h×h, `b` has length 4h.
    Lstm { wx: Mat, wh: Mat, b: Vec<f64> },
    /// vocab×dim lookup table.
    Embedding { table: Mat },
    None,
}

impl LayerParams {
    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        match self {
            LayerParams::Dense { w, b } => vec![&w.data, b],
            LayerParams::Lstm { wx, wh, b } => vec![&wx.data, &wh.data, b],
            LayerParams::Embedding { table } => vec![&table.data],
            LayerParams::None => vec![],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            LayerParams::Dense { w, b } => vec![&mut w.data, b],
            LayerParams::Lstm { wx, wh, b } => vec![&mut wx.data, &mut wh.data, b],
            LayerParams::Embedding { table } => vec![&mut table.data],
            LayerParams::None => vec![],
        }
    }

    fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::Dense { w, b } => LayerParams::Dense { w: Mat::zeros(w.rows, w.cols), b: vec![0.0; b.len()] },
            LayerParams::Lstm { wx, wh, b } => LayerParams::Lstm {
                wx: Mat::zeros(wx.rows, wx.cols),
                wh: Mat::zeros(wh.rows, wh.cols),
                b: vec![0.0; b.len()],
            },
            LayerParams::Embedding { table } => LayerParams::Embedding { table: Mat::zeros(table.rows, table.cols) },
            LayerParams::None => LayerParams::None,
        }
    }
}

/// Network input: a row-major activation plus optional token side input for
/// embedding layers.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    pub x: &'a Mat,
    pub tokens: &'a [usize],
}

impl<'a> NetInput<'a> {
    pub fn dense(x: &'a Mat) -> Self {
        NetInput { x, tokens: &[] }
    }
}

struct LstmStep {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>,
}

enum LayerCache {
    Dense { input: Mat, preact: Mat, output: Mat },
    Lstm { input: Mat, steps: Vec<LstmStep> },
    Embedding { tokens: Vec<usize> },
    Dropout { mask: Vec<f64> },
    Multiply { input: Mat, side: Mat },
    Passthrough,
}

/// Cached activations from a train-mode forward pass.
pub struct Cache {
    layers: Vec<LayerCache>,
}

/// Gate outputs of a single LSTM step, all bounded by their squashing
/// functions: input/forget/output in (0,1), candidate in (-1,1).
#[derive(Clone, Debug)]
pub struct LstmGates {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output: Vec<f64>,
}

fn matvec(w: &Mat, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

fn matvec_t_add(w: &Mat, dz: &[f64], out: &mut [f64]) {
    for (r, &d) in dz.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(w.row(r)) {
            *o += a * d;
        }
    }
}

fn outer_add(dw: &mut Mat, dz: &[f64], x: &[f64]) {
    for (r, &d) in dz.iter().enumerate() {
        for (o, &v) in dw.row_mut(r).iter_mut().zip(x) {
            *o += d * v;
        }
    }
}

/// One LSTM cell step. Returns the new hidden state, new cell state and the
/// gate activations.
pub fn lstm_step(
    wx: &Mat,
    wh: &Mat,
    b: &[f64],
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmGates)> {
    let hidden = wh.cols;
    if wx.cols != x.len() || h.len() != hidden || c.len() != hidden || b.len() != 4 * hidden || wx.rows != 4 * hidden {
        return Err(Error::Dimension(format!(
            "lstm step: wx {}x{}, wh {}x{}, x {}, h {}, c {}",
            wx.rows,
            wx.cols,
            wh.rows,
            wh.cols,
            x.len(),
            h.len(),
            c.len()
        )));
    }
    let mut z = b.to_vec();
    for (r, zv) in z.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (a, v) in wx.row(r).iter().zip(x) {
            acc += a * v;
        }
        for (a, v) in wh.row(r).iter().zip(h) {
            acc += a * v;
        }
        *zv += acc;
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut gates = LstmGates {
        input: vec![0.0; hidden],
        forget: vec![0.0; hidden],
        candidate: vec![0.0; hidden],
        output: vec![0.0; hidden],
    };
    let mut c_new = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for j in 0..hidden {
        gates.input[j] = sig(z[j]);
        gates.forget[j] = sig(z[hidden + j]);
        gates.candidate[j] = z[2 * hidden + j].tanh();
        gates.output[j] = sig(z[3 * hidden + j]);
        c_new[j] = gates.forget[j] * c[j] + gates.input[j] * gates.candidate[j];
        h_new[j] = gates.output[j] * c_new[j].tanh();
    }
    Ok((h_new, c_new, gates))
}

/// A sequential network: spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<LayerParams>,
}

impl Network {
    /// Initializes weights uniformly in ±sqrt(6/(fan_in+fan_out)), biases at
    /// zero.
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let init_mat = |rows: usize, cols: usize, rng: &mut R| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut m = Mat::zeros(rows, cols);
            for v in &mut m.data {
                *v = rng.gen_range(-limit..limit);
            }
            m
        };
        let params = spec
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Dense => LayerParams::Dense { w: init_mat(l.output_dim, l.input_dim, rng), b: vec![0.0; l.output_dim] },
                LayerKind::Lstm => LayerParams::Lstm {
                    wx: init_mat(4 * l.output_dim, l.input_dim, rng),
                    wh: init_mat(4 * l.output_dim, l.output_dim, rng),
                    b: vec![0.0; 4 * l.output_dim],
                },
                LayerKind::Embedding => LayerParams::Embedding { table: init_mat(l.input_dim, l.output_dim, rng) },
                _ => LayerParams::None,
            })
            .collect();
        Ok(Network { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if spec.layers.len() != params.len() {
            return Err(Error::Dimension("layer/parameter count mismatch".into()));
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.blocks().iter().map(|b| b.len()).sum::<usize>()).sum()
    }

    /// Mutable access to the i-th scalar parameter in checkpoint order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.params {
            for block in layer.blocks_mut() {
                if index < block.len() {
                    return &mut block[index];
                }
                index -= block.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn zero_grads(&self) -> Vec<LayerParams> {
        self.params.iter().map(LayerParams::zeros_like).collect()
    }

    /// Sum of l1 penalties over all weight matrices (biases excluded).
    pub fn l1_penalty(&self) -> f64 {
        self.spec
            .layers
            .iter()
            .zip(&self.params)
            .map(|(spec, params)| {
                if spec.l1_coefficient == 0.0 {
                    return 0.0;
                }
                let sum: f64 = match params {
                    LayerParams::Dense { w, .. } => w.data.iter().map(|v| v.abs()).sum(),
                    LayerParams::Lstm { wx, wh, .. } => {
                        wx.data.iter().map(|v| v.abs()).sum::<f64>() + wh.data.iter().map(|v| v.abs()).sum::<f64>()
                    }
                    _ => 0.0,
                };
                spec.l1_coefficient * sum
            })
            .sum()
    }

    /// Deterministic inference pass: dropout is identity, no caches are built.
    pub fn forward(&self, input: NetInput) -> Result<Mat> {
        self.run(input, None, &mut NoRng)
    }

    /// Train-mode pass: dropout is sampled from `rng` (inverted scaling) and
    /// every layer caches what its backward pass needs.
    pub fn forward_train<R: Rng>(&self, input: NetInput, rng: &mut R) -> Result<(Mat, Cache)> {
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let out = self.run(input, Some(&mut caches), rng)?;
        Ok((out, Cache { layers: caches }))
    }

    fn run<R: Rng>(&self, input: NetInput, mut caches: Option<&mut Vec<LayerCache>>, rng: &mut R) -> Result<Mat> {
        let mut cur = input.x.clone();
        let mut side: Option<Mat> = None;
        for (spec, params) in self.spec.layers.iter().zip(&self.params) {
            match (spec.kind, params) {
                (LayerKind::Dense, LayerParams::Dense { w, b }) => {
                    if cur.cols != spec.input_dim {
                        return Err(Error::Dimension(format!("dense expects width {}, got {}", spec.input_dim, cur.cols)));
                    }
                    let mut preact = Mat::zeros(cur.rows, spec.output_dim);
                    for r in 0..cur.rows {
                        let row = preact.row_mut(r);
                        matvec(w, cur.row(r), row);
                        for (o, &bv) in row.iter_mut().zip(b) {
                            *o += bv;
                        }
                    }
                    let mut out = preact.clone();
                    for r in 0..out.rows {
                        spec.activation.apply(out.row_mut(r));
                    }
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Dense { input: cur, preact, output: out.clone() });
                    }
                    cur = out;
                }
                (LayerKind::Lstm, LayerParams::Lstm { wx, wh, b }) => {
                    if cur.cols != spec.input_dim {
                        return Err(Error::Dimension(format!("lstm expects width {}, got {}", spec.input_dim, cur.cols)));
                    }
                    let hidden = spec.output_dim;
                    let mut out = Mat::zeros(cur.rows, hidden);
                    let mut h = vec![0.0; hidden];
                    let mut c_state = vec![0.0; hidden];
                    let mut steps = Vec::with_capacity(cur.rows);
                    for t in 0..cur.rows {
                        let (h_new, c_new, gates) = lstm_step(wx, wh, b, cur.row(t), &h, &c_state)?;
                        if caches.is_some() {
                            steps.push(LstmStep {
                                h_prev: h.clone(),
                                c_prev: c_state.clone(),
                                gate_i: gates.input,
                                gate_f: gates.forget,
                                gate_g: gates.candidate,
                                gate_o: gates.output,
                                tanh_c: c_new.iter().map(|v| v.tanh()).collect(),
                            });
                        }
                        out.row_mut(t).copy_from_slice(&h_new);
                        h = h_new;
                        c_state = c_new;
                    }
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Lstm { input: cur, steps });
                    }
                    cur = out;
                }
                (LayerKind::Embedding, LayerParams::Embedding { table }) => {
                    if input.tokens.is_empty() {
                        return Err(Error::RejectedInput("embedding layer needs token input".into()));
                    }
                    let mut emb = Mat::zeros(input.tokens.len(), spec.output_dim);
                    for (r, &tok) in input.tokens.iter().enumerate() {
                        if tok >= table.rows {
                            return Err(Error::RejectedInput(format!("token {tok} out of vocabulary ({})", table.rows)));
                        }
                        emb.row_mut(r).copy_from_slice(table.row(tok));
                    }
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Embedding { tokens: input.tokens.to_vec() });
                    }
                    side = Some(emb);
                }
                (LayerKind::Multiply, LayerParams::None) => {
                    let s = side
                        .as_ref()
                        .ok_or_else(|| Error::Protocol("multiply before embedding output".into()))?;
                    if s.rows != cur.rows || s.cols != cur.cols {
                        return Err(Error::Dimension(format!(
                            "multiply: activation {}x{} vs condition {}x{}",
                            cur.rows, cur.cols, s.rows, s.cols
                        )));
                    }
                    let mut out = cur.clone();
                    for (o, &sv) in out.data.iter_mut().zip(&s.data) {
                        *o *= sv;
                    }
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Multiply { input: cur, side: s.clone() });
                    }
                    cur = out;
                }
                (LayerKind::Dropout, LayerParams::None) => {
                    if caches.is_none() || spec.dropout_rate == 0.0 {
                        // eval mode: inverted dropout needs no rescaling
                        if let Some(c) = caches.as_deref_mut() {
                            c.push(LayerCache::Dropout { mask: vec![1.0; cur.len()] });
                        }
                    } else {
                        let keep = 1.0 - spec.dropout_rate;
                        let mask: Vec<f64> = (0..cur.len())
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        for (v, &m) in cur.data.iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        if let Some(c) = caches.as_deref_mut() {
                            c.push(LayerCache::Dropout { mask });
                        }
                    }
                }
                (LayerKind::Reshape, LayerParams::None) => {
                    if cur.len() % spec.output_dim != 0 {
                        return Err(Error::Dimension(format!("cannot reshape {} values to rows of {}", cur.len(), spec.output_dim)));
                    }
                    cur = Mat { rows: cur.len() / spec.output_dim, cols: spec.output_dim, data: cur.data };
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Passthrough);
                    }
                }
                (kind, _) => return Err(Error::Protocol(format!("layer kind {kind:?} has mismatched parameters"))),
            }
        }
        Ok(cur)
    }

    /// Backpropagates `dloss_doutput` through the cached pass. Returns the
    /// parameter gradients (l1 subgradients included where configured) and
    /// the gradient with respect to the network input.
    pub fn backward(&self, cache: &Cache, dloss_doutput: &Mat) -> Result<(Vec<LayerParams>, Mat)> {
        if cache.layers.len() != self.spec.layers.len() {
            return Err(Error::Protocol("cache does not match network (run forward_train first)".into()));
        }
        let mut grads = self.zero_grads();
        let mut dcur = dloss_doutput.clone();
        let mut dside: Option<Mat> = None;
        for idx in (0..self.spec.layers.len()).rev() {
            let spec = &self.spec.layers[idx];
            match (&cache.layers[idx], &self.params[idx], &mut grads[idx]) {
                (LayerCache::Dense { input, preact, output }, LayerParams::Dense { w, .. }, LayerParams::Dense { w: dw, b: db }) => {
                    if dcur.rows != output.rows || dcur.cols != output.cols {
                        return Err(Error::Dimension("backward: gradient shape mismatch".into()));
                    }
                    let mut dinput = Mat::zeros(input.rows, input.cols);
                    let mut dz = vec![0.0; spec.output_dim];
                    for r in 0..output.rows {
                        let dy = dcur.row(r);
                        match spec.activation {
                            Activation::Identity => dz.copy_from_slice(dy),
                            Activation::Relu => {
                                for (j, d) in dz.iter_mut().enumerate() {
                                    *d = if preact.row(r)[j] > 0.0 { dy[j] } else { 0.0 };
                                }
                            }
                            Activation::LeakyRelu(slope) => {
                                for (j, d) in dz.iter_mut().enumerate() {
                                    *d = if preact.row(r)[j] > 0.0 { dy[j] } else { dy[j] * slope };
                                }
                            }
                            Activation::Sigmoid => {
                                for (j, d) in dz.iter_mut().enumerate() {
                                    let y = output.row(r)[j];
                                    *d = dy[j] * y * (1.0 - y);
                                }
                            }
                            Activation::Softmax => {
                                let y = output.row(r);
                                let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                                for (j, d) in dz.iter_mut().enumerate() {
                                    *d = y[j] * (dy[j] - dot);
                                }
                            }
                        }
                        outer_add(dw, &dz, input.row(r));
                        for (o, &d) in db.iter_mut().zip(&dz) {
                            *o += d;
                        }
                        matvec_t_add(w, &dz, dinput.row_mut(r));
                    }
                    if spec.l1_coefficient > 0.0 {
                        for (g, &v) in dw.data.iter_mut().zip(&w.data) {
                            *g += spec.l1_coefficient * l1_sign(v);
                        }
                    }
                    dcur = dinput;
                }
                (LayerCache::Lstm { input, steps }, LayerParams::Lstm { wx, wh, .. }, LayerParams::Lstm { wx: dwx, wh: dwh, b: dbv }) => {
                    let hidden = spec.output_dim;
                    let mut dinput = Mat::zeros(input.rows, input.cols);
                    let mut dh_next = vec![0.0; hidden];
                    let mut dc_next = vec![0.0; hidden];
                    let mut dz = vec![0.0; 4 * hidden];
                    for t in (0..input.rows).rev() {
                        let s = &steps[t];
                        for j in 0..hidden {
                            let dh = dcur.row(t)[j] + dh_next[j];
                            let tc = s.tanh_c[j];
                            let do_ = dh * tc;
                            let dc = dh * s.gate_o[j] * (1.0 - tc * tc) + dc_next[j];
                            let di = dc * s.gate_g[j];
                            let df = dc * s.c_prev[j];
                            let dg = dc * s.gate_i[j];
                            dc_next[j] = dc * s.gate_f[j];
                            dz[j] = di * s.gate_i[j] * (1.0 - s.gate_i[j]);
                            dz[hidden + j] = df * s.gate_f[j] * (1.0 - s.gate_f[j]);
                            dz[2 * hidden + j] = dg * (1.0 - s.gate_g[j] * s.gate_g[j]);
                            dz[3 * hidden + j] = do_ * s.gate_o[j] * (1.0 - s.gate_o[j]);
                        }
                        outer_add(dwx, &dz, input.row(t));
                        outer_add(dwh, &dz, &s.h_prev);
                        for (o, &d) in dbv.iter_mut().zip(&dz) {
                            *o += d;
                        }
                        matvec_t_add(wx, &dz, dinput.row_mut(t));
                        dh_next.fill(0.0);
                        matvec_t_add(wh, &dz, &mut dh_next);
                    }
                    if spec.l1_coefficient > 0.0 {
                        for (g, &v) in dwx.data.iter_mut().zip(&wx.data).chain(dwh.data.iter_mut().zip(&wh.data)) {
                            *g += spec.l1_coefficient * l1_sign(v);
                        }
                    }
                    dcur = dinput;
                }
                (LayerCache::Embedding { tokens }, LayerParams::Embedding { .. }, LayerParams::Embedding { table: dtable }) => {
                    if let Some(ds) = dside.take() {
                        for (r, &tok) in tokens.iter().enumerate() {
                            for (o, &d) in dtable.row_mut(tok).iter_mut().zip(ds.row(r)) {
                                *o += d;
                            }
                        }
                    }
                }
                (LayerCache::Multiply { input, side }, LayerParams::None, _) => {
                    let mut ds = Mat::zeros(side.rows, side.cols);
                    let mut dinput = Mat::zeros(input.rows, input.cols);
                    for i in 0..dcur.len() {
                        dinput.data[i] = dcur.data[i] * side.data[i];
                        ds.data[i] = dcur.data[i] * input.data[i];
                    }
                    dside = Some(ds);
                    dcur = dinput;
                }
                (LayerCache::Dropout { mask }, LayerParams::None, _) => {
                    for (v, &m) in dcur.data.iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                (LayerCache::Passthrough, LayerParams::None, _) => {
                    let total = dcur.len();
                    dcur = Mat { rows: 1, cols: total, data: dcur.data };
                }
                _ => return Err(Error::Protocol("cache does not match layer".into())),
            }
        }
        Ok((grads, dcur))
    }
}

/// Adds `other` into `acc`, block by block. Shapes must match.
pub fn accumulate_grads(acc: &mut [LayerParams], other: &[LayerParams]) {
    for (a, o) in acc.iter_mut().zip(other) {
        let ob = o.blocks();
        for (ab, ob) in a.blocks_mut().into_iter().zip(ob) {
            for (x, y) in ab.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }
}

/// Scales every gradient entry by `k`.
pub fn scale_grads(grads: &mut [LayerParams], k: f64) {
    for g in grads.iter_mut() {
        for b in g.blocks_mut() {
            for v in b {
                *v *= k;
            }
        }
    }
}

// zero subgradient at w == 0
fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Placeholder RNG for eval-mode passes; dropout never samples there.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode must not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode must not sample")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("eval mode must not sample")
    }
    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval mode must not sample")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss_and_grad, LayerSpec, Loss, LossTarget};
    use crate::nn::{adam_update, OptimizerState};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense_net(layers: Vec<LayerSpec>, loss: Loss, seed: u64) -> Network {
        Network::init(NetworkSpec::new(layers, loss).unwrap(), &mut StdRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_network_echoes_input() {
        let mut net = dense_net(vec![LayerSpec::dense(2, 2, Activation::Identity)], Loss::Mse, 0);
        if let LayerParams::Dense { w, b } = &mut net.params_mut()[0] {
            w.data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            b.fill(0.0);
        }
        let x = Mat::row_vec(vec![1.0, 2.0]);
        let out = net.forward(NetInput::dense(&x)).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut net = dense_net(vec![LayerSpec::dense(2, 2, Activation::Relu)], Loss::Mse, 0);
        if let LayerParams::Dense { w, b } = &mut net.params_mut()[0] {
            w.data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            b.fill(0.0);
        }
        let x = Mat::row_vec(vec![-3.0, 4.0]);
        let out = net.forward(NetInput::dense(&x)).unwrap();
        assert_eq!(out.data, vec![0.0, 4.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        // 2-layer net with fixed parameters against a hand-written
        // matrix-arithmetic evaluation.
        let mut net = dense_net(
            vec![LayerSpec::dense(2, 3, Activation::LeakyRelu(0.2)), LayerSpec::dense(3, 2, Activation::Sigmoid)],
            Loss::Mse,
            42,
        );
        let mut rng = StdRng::seed_from_u64(9);
        for i in 0..net.param_count() {
            *net.param_mut(i) = rng.gen_range(-1.0..1.0);
        }
        let x = [0.7, -0.3];

        // independent straight-line evaluation from raw parameter blocks
        let (w1, b1) = match &net.params()[0] {
            LayerParams::Dense { w, b } => (w.clone(), b.clone()),
            _ => unreachable!(),
        };
        let (w2, b2) = match &net.params()[1] {
            LayerParams::Dense { w, b } => (w.clone(), b.clone()),
            _ => unreachable!(),
        };
        let mut h = [0.0f64; 3];
        for r in 0..3 {
            let z = w1.row(r)[0] * x[0] + w1.row(r)[1] * x[1] + b1[r];
            h[r] = if z > 0.0 { z } else { 0.2 * z };
        }
        let mut expected = [0.0f64; 2];
        for r in 0..2 {
            let z = w2.row(r)[0] * h[0] + w2.row(r)[1] * h[1] + w2.row(r)[2] * h[2] + b2[r];
            expected[r] = 1.0 / (1.0 + (-z).exp());
        }

        let xm = Mat::row_vec(x.to_vec());
        let out = net.forward(NetInput::dense(&xm)).unwrap();
        for (o, e) in out.data.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn backward_chain_rule_by_hand() {
        // w = 2, x = 3, target = 0, mse: dL/dw = 2*(wx - t)*x = 36
        let mut net = dense_net(vec![LayerSpec::dense(1, 1, Activation::Identity)], Loss::Mse, 0);
        *net.param_mut(0) = 2.0;
        *net.param_mut(1) = 0.0;
        let x = Mat::row_vec(vec![3.0]);
        let (out, cache) = net.forward_train(NetInput::dense(&x), &mut StdRng::seed_from_u64(0)).unwrap();
        let t = Mat::row_vec(vec![0.0]);
        let (_, dldy) = loss_and_grad(Loss::Mse, &out, &LossTarget::Values(&t)).unwrap();
        let (grads, _) = net.backward(&cache, &dldy).unwrap();
        match &grads[0] {
            LayerParams::Dense { w, b } => {
                assert!((w.data[0] - 36.0).abs() < 1e-12);
                assert!((b[0] - 12.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn backward_without_matching_cache_is_a_protocol_error() {
        let net_a = dense_net(vec![LayerSpec::dense(2, 2, Activation::Identity)], Loss::Mse, 0);
        let net_b = dense_net(
            vec![LayerSpec::dense(2, 2, Activation::Identity), LayerSpec::dense(2, 1, Activation::Identity)],
            Loss::Mse,
            0,
        );
        let x = Mat::row_vec(vec![0.1, 0.2]);
        let (out, cache) = net_a.forward_train(NetInput::dense(&x), &mut StdRng::seed_from_u64(0)).unwrap();
        assert!(net_b.backward(&cache, &out).is_err());
    }

    #[test]
    fn lstm_step_zero_state_fixed_point() {
        let hidden = 3;
        let wx = Mat::zeros(4 * hidden, 2);
        let wh = Mat::zeros(4 * hidden, hidden);
        let b = vec![0.0; 4 * hidden];
        let (h, c, gates) = lstm_step(&wx, &wh, &b, &[5.0, -2.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
        for j in 0..hidden {
            assert!((gates.input[j] - 0.5).abs() < 1e-12);
            assert!((gates.forget[j] - 0.5).abs() < 1e-12);
            assert!(gates.candidate[j].abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_forget_gate_saturation() {
        // huge positive forget preactivation (via bias): c_new ~ c_prev + i*g
        let hidden = 2;
        let mut rng = StdRng::seed_from_u64(4);
        let mut rand_mat = |rows, cols| {
            let mut m = Mat::zeros(rows, cols);
            for v in &mut m.data {
                *v = rng.gen_range(-0.5..0.5);
            }
            m
        };
        let wx = rand_mat(4 * hidden, 2);
        let wh = rand_mat(4 * hidden, hidden);
        let mut b = vec![0.0; 4 * hidden];
        for j in 0..hidden {
            b[hidden + j] = 50.0;
        }
        let c_prev = [0.7, -0.4];
        let (_, c, gates) = lstm_step(&wx, &wh, &b, &[0.3, 0.1], &[0.2, -0.1], &c_prev).unwrap();
        for j in 0..hidden {
            let expected = c_prev[j] + gates.input[j] * gates.candidate[j];
            assert!((c[j] - expected).abs() < 1e-9, "{} vs {}", c[j], expected);
        }
    }

    #[test]
    fn lstm_step_matches_gate_by_gate_oracle() {
        // 4-unit cell with random parameters vs an independent sequential
        // evaluation of the gate equations.
        let hidden = 4;
        let input = 3;
        let mut rng = StdRng::seed_from_u64(21);
        let mut rand_vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let wx = Mat { rows: 4 * hidden, cols: input, data: rand_vec(4 * hidden * input) };
        let wh = Mat { rows: 4 * hidden, cols: hidden, data: rand_vec(4 * hidden * hidden) };
        let b = rand_vec(4 * hidden);
        let x = rand_vec(input);
        let h0 = rand_vec(hidden);
        let c0 = rand_vec(hidden);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_exp = vec![0.0; hidden];
        let mut c_exp = vec![0.0; hidden];
        for j in 0..hidden {
            let pre = |row: usize| -> f64 {
                let mut acc = b[row];
                for k in 0..input {
                    acc += wx.data[row * input + k] * x[k];
                }
                for k in 0..hidden {
                    acc += wh.data[row * hidden + k] * h0[k];
                }
                acc
            };
            let i = sig(pre(j));
            let f = sig(pre(hidden + j));
            let g = pre(2 * hidden + j).tanh();
            let o = sig(pre(3 * hidden + j));
            c_exp[j] = f * c0[j] + i * g;
            h_exp[j] = o * c_exp[j].tanh();
        }

        let (h, c, gates) = lstm_step(&wx, &wh, &b, &x, &h0, &c0).unwrap();
        for j in 0..hidden {
            assert!((h[j] - h_exp[j]).abs() < 1e-12);
            assert!((c[j] - c_exp[j]).abs() < 1e-12);
            assert!(gates.input[j] > 0.0 && gates.input[j] < 1.0);
            assert!(gates.forget[j] > 0.0 && gates.forget[j] < 1.0);
            assert!(gates.output[j] > 0.0 && gates.output[j] < 1.0);
            assert!(gates.candidate[j] > -1.0 && gates.candidate[j] < 1.0);
        }
    }

    #[test]
    fn lstm_step_rejects_dimension_mismatch() {
        let wx = Mat::zeros(8, 2);
        let wh = Mat::zeros(8, 2);
        let b = vec![0.0; 8];
        assert!(lstm_step(&wx, &wh, &b, &[1.0, 2.0, 3.0], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = dense_net(
            vec![LayerSpec::dense(3, 5, Activation::LeakyRelu(0.2)), LayerSpec::dropout(5, 0.5), LayerSpec::dense(5, 2, Activation::Identity)],
            Loss::Mse,
            13,
        );
        let x = Mat::row_vec(vec![0.1, -0.4, 0.9]);
        let a = net.forward(NetInput::dense(&x)).unwrap();
        let b = net.forward(NetInput::dense(&x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_train_mode_uses_rng_and_inverted_scaling() {
        let net = dense_net(vec![LayerSpec::dropout(8, 0.5)], Loss::Mse, 0);
        let x = Mat::row_vec(vec![1.0; 8]);
        let mut rng = StdRng::seed_from_u64(1);
        let (out, _) = net.forward_train(NetInput::dense(&x), &mut rng).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        // eval ignores dropout entirely
        let eval = net.forward(NetInput::dense(&x)).unwrap();
        assert_eq!(eval.data, vec![1.0; 8]);
    }

    #[test]
    fn embedding_multiply_conditioning_and_gradient() {
        // CGAN-style conditioning chain with a zero embedding row: the product
        // collapses, so the output is bias-driven and constant in the noise.
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::embedding(3, 4),
                LayerSpec::multiply(4),
                LayerSpec::dense(4, 2, Activation::Identity),
            ],
            Loss::Mse,
        )
        .unwrap();
        let mut net = Network::init(spec, &mut StdRng::seed_from_u64(2)).unwrap();
        if let LayerParams::Embedding { table } = &mut net.params_mut()[0] {
            table.row_mut(1).fill(0.0);
        }
        if let LayerParams::Dense { b, .. } = &mut net.params_mut()[2] {
            b.copy_from_slice(&[0.25, -0.5]);
        }
        let x1 = Mat::row_vec(vec![0.3, 0.4, -0.2, 0.9]);
        let x2 = Mat::row_vec(vec![-5.0, 2.0, 7.0, 0.0]);
        let out1 = net.forward(NetInput { x: &x1, tokens: &[1] }).unwrap();
        let out2 = net.forward(NetInput { x: &x2, tokens: &[1] }).unwrap();
        assert_eq!(out1.data, out2.data);
        assert_eq!(out1.data, vec![0.25, -0.5]);

        // and with a live embedding the whole chain differentiates cleanly
        let t = Mat::row_vec(vec![0.1, 0.2]);
        let err = crate::nn::gradient_check(&net, NetInput { x: &x1, tokens: &[2] }, &LossTarget::Values(&t), 1e-5).unwrap();
        assert!(err < 1e-6, "conditioning chain gradcheck {err}");
    }

    #[test]
    fn unknown_token_is_rejected() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::embedding(3, 2), LayerSpec::multiply(2), LayerSpec::dense(2, 1, Activation::Identity)],
            Loss::Mse,
        )
        .unwrap();
        let net = Network::init(spec, &mut StdRng::seed_from_u64(0)).unwrap();
        let x = Mat::row_vec(vec![1.0, 1.0]);
        assert!(net.forward(NetInput { x: &x, tokens: &[3] }).is_err());
    }

    #[test]
    fn lstm_network_gradient_check() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::lstm(3, 4), LayerSpec::dense(4, 3, Activation::Softmax)],
            Loss::CrossEntropy,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        for probe in 0..10 {
            let net = Network::init(spec.clone(), &mut rng).unwrap();
            let seq = Mat::from_rows((0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let err = crate::nn::gradient_check(&net, NetInput::dense(&seq), &LossTarget::Classes(&targets), 1e-5).unwrap();
            assert!(err < 1e-4, "probe {probe}: lstm gradcheck {err}");
        }
    }

    #[test]
    fn xor_trains_below_threshold() {
        // 2-8-1 net, Adam, loss under 0.05 within 5000 steps
        let spec = NetworkSpec::new(
            vec![LayerSpec::dense(2, 8, Activation::LeakyRelu(0.2)), LayerSpec::dense(8, 1, Activation::Sigmoid)],
            Loss::Mse,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let mut net = Network::init(spec, &mut rng).unwrap();
        let mut opt = OptimizerState::adam(0.01, net.param_count());
        let xs = Mat::from_rows(vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        let ts = Mat::from_rows(vec![vec![0.0], vec![1.0], vec![1.0], vec![0.0]]);
        let mut loss = f64::INFINITY;
        for _ in 0..5000 {
            let (out, cache) = net.forward_train(NetInput::dense(&xs), &mut rng).unwrap();
            let (value, dldy) = loss_and_grad(Loss::Mse, &out, &LossTarget::Values(&ts)).unwrap();
            loss = value / 4.0;
            if loss < 0.05 {
                break;
            }
            let (grads, _) = net.backward(&cache, &dldy).unwrap();
            adam_update(&mut net, &grads, &mut opt).unwrap();
        }
        assert!(loss < 0.05, "xor failed to converge: {loss}");
    }
}
