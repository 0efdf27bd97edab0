//! Sequence encoders, cross-modal interaction and pooled embeddings.
//!
//! Batches are laid out sample-major: a batch of `B` sequences padded to `L`
//! steps is a `(B * L) x D` matrix whose row `b * L + t` is step `t` of sample
//! `b`. Padding rows are zero on input and forced to zero on every output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    /// Bidirectional LSTM.
    Bilstm,
    /// Stack of temporal convolutions.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceEncoderKind {
    Bilstm,
    /// Per-word projection followed by a masked mean; insensitive to word order.
    Mean,
}

/// Zero-padded batch of feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub data: Matrix,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl PaddedBatch {
    /// Pads every sequence to the longest one.
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::Shape("empty batch".into()));
        };
        let dim = first.dim();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut data = Matrix::zeros((seqs.len() * len, dim));
        for (b, s) in seqs.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::Shape(format!(
                    "feature dimension {} differs from {dim} within a batch",
                    s.dim()
                )));
            }
            for (t, row) in s.data().rows().into_iter().enumerate() {
                for (d, &v) in row.iter().enumerate() {
                    data[[b * len + t, d]] = f64::from(v);
                }
            }
        }
        Ok(Self {
            data,
            lens: seqs.iter().map(|s| s.len()).collect(),
            len,
        })
    }

    /// Batch from an already padded matrix; rows past each length are zeroed.
    pub fn from_parts(mut data: Matrix, lens: Vec<usize>, len: usize) -> Result<Self> {
        if data.nrows() != lens.len() * len || lens.iter().any(|&l| l > len) || len == 0 {
            return Err(Error::Shape(format!(
                "{} rows do not hold {} sequences of {len} steps",
                data.nrows(),
                lens.len()
            )));
        }
        for (b, &l) in lens.iter().enumerate() {
            for t in l..len {
                data.row_mut(b * len + t).fill(0.0);
            }
        }
        Ok(Self { data, lens, len })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.nrows()];
        for (b, &l) in self.lens.iter().enumerate() {
            mask[b * self.len..b * self.len + l].fill(true);
        }
        mask
    }
}

fn mask_column(mask: &[bool]) -> Matrix {
    Matrix::from_shape_fn((mask.len(), 1), |(i, _)| f64::from(u8::from(mask[i])))
}

/// Encoder output for a whole batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub features: Var,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl EncodedBatch {
    /// The valid rows of sample `b`. A sample without valid steps yields its
    /// padded rows with an all-false mask.
    pub fn sequence(&self, g: &mut Graph, b: usize) -> EncodedSequence {
        let valid = self.lens[b];
        if valid == 0 {
            return EncodedSequence {
                features: g.slice_rows(self.features, b * self.len, self.len),
                mask: vec![false; self.len],
            };
        }
        EncodedSequence {
            features: g.slice_rows(self.features, b * self.len, valid),
            mask: vec![true; valid],
        }
    }

    pub fn sequences(&self, g: &mut Graph) -> Vec<EncodedSequence> {
        (0..self.lens.len()).map(|b| self.sequence(g, b)).collect()
    }
}

/// `L x D_h` features with per-step validity.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub features: Var,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn require_valid(&self, what: &str) -> Result<()> {
        if self.num_valid() == 0 {
            return Err(Error::Precondition(format!("{what} has no valid positions")));
        }
        Ok(())
    }

    /// `1 x L` row holding `1 / n` on the `n` valid positions.
    fn mean_weights(&self) -> Matrix {
        let n = self.num_valid() as f64;
        Matrix::from_shape_fn((1, self.len()), |(_, t)| {
            if self.mask[t] {
                1.0 / n
            } else {
                0.0
            }
        })
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_glorot(format!("{name}.w"), input, output, rng),
            b: store.insert_zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Temporal convolution with odd `kernel`, zero padding and stride 1.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub linear: Linear,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel must be odd");
        Self {
            linear: Linear::new(store, name, kernel * input, output, rng),
            kernel,
        }
    }

    /// `x` is a sample-major batch with `block` rows per sample.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, block: usize) -> Var {
        let half = (self.kernel / 2) as isize;
        let taps: Vec<Var> = (-half..=half)
            .map(|o| if o == 0 { x } else { g.shift_rows(x, o, block) })
            .collect();
        let stacked = g.concat_cols(&taps);
        self.linear.forward(g, store, stacked)
    }
}

/// One LSTM direction; the forget-gate bias starts at 1.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: ParamId,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let proj = Linear::new(store, &format!("{name}.in"), input, 4 * hidden, rng);
        store
            .get_mut(proj.b)
            .slice_mut(ndarray::s![.., hidden..2 * hidden])
            .fill(1.0);
        Self {
            input: proj,
            recurrent: store.insert_glorot(format!("{name}.rec"), hidden, 4 * hidden, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        reverse: bool,
    ) -> Var {
        let xproj = self.input.forward(g, store, x);
        let u = g.param(store, self.recurrent);
        g.lstm(xproj, u, batch, len, mask, reverse)
    }
}

/// Forward and backward LSTMs of `hidden / 2` units each, concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        assert!(hidden.is_multiple_of(2), "bidirectional hidden size must be even");
        Self {
            forward: Lstm::new(store, &format!("{name}.fw"), input, hidden / 2, rng),
            backward: Lstm::new(store, &format!("{name}.bw"), input, hidden / 2, rng),
        }
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, len: usize, mask: &[bool]) -> Var {
        let f = self.forward.forward(g, store, x, batch, len, mask, false);
        let b = self.backward.forward(g, store, x, batch, len, mask, true);
        g.concat_cols(&[f, b])
    }
}

#[derive(Debug, Clone)]
enum Temporal {
    Bilstm(BiLstm),
    Conv(Vec<Conv1d>),
}

impl Temporal {
    fn new<R: Rng>(
        kind: RecurrentKind,
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            RecurrentKind::Bilstm => Temporal::Bilstm(BiLstm::new(store, name, input, hidden, rng)),
            RecurrentKind::Conv => Temporal::Conv(
                (0..2)
                    .map(|i| {
                        let fan_in = if i == 0 { input } else { hidden };
                        Conv1d::new(store, &format!("{name}.conv{i}"), fan_in, hidden, 3, rng)
                    })
                    .collect(),
            ),
        }
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: &PaddedBatch, mask: &[bool]) -> Var {
        match self {
            Temporal::Bilstm(rnn) => rnn.run(g, store, x, batch.batch(), batch.len, mask),
            Temporal::Conv(layers) => {
                let keep = g.constant(mask_column(mask));
                layers.iter().fold(x, |h, conv| {
                    let y = conv.forward(g, store, h, batch.len);
                    let y = g.tanh(y);
                    g.mul_col(y, keep)
                })
            }
        }
    }
}

fn check_dim(batch: &PaddedBatch, expected: usize, what: &str) -> Result<()> {
    if batch.dim() != expected {
        return Err(Error::Shape(format!(
            "{what} features have dimension {}, model expects {expected}",
            batch.dim()
        )));
    }
    Ok(())
}

/// Temporal convolution with ReLU followed by a bidirectional recurrent layer.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    conv: Conv1d,
    temporal: Temporal,
}

impl VideoEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        kind: RecurrentKind,
        rng: &mut R,
    ) -> Self {
        Self {
            input_dim,
            hidden,
            conv: Conv1d::new(store, "video.conv", input_dim, hidden, 3, rng),
            temporal: Temporal::new(kind, store, "video.rnn", hidden, hidden, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<EncodedBatch> {
        check_dim(batch, self.input_dim, "video")?;
        let x = g.constant(batch.data.clone());
        self.encode_var(g, store, x, batch)
    }

    /// Like [`VideoEncoder::encode`], with the padded features entered as a
    /// differentiable input whose handle is returned.
    pub fn encode_tracked(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<(Var, EncodedBatch)> {
        check_dim(batch, self.input_dim, "video")?;
        let x = g.input(batch.data.clone());
        Ok((x, self.encode_var(g, store, x, batch)?))
    }

    fn encode_var(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: &PaddedBatch) -> Result<EncodedBatch> {
        let mask = batch.mask();
        let keep = g.constant(mask_column(&mask));
        let h = self.conv.forward(g, store, x, batch.len);
        let h = g.relu(h);
        let h = g.mul_col(h, keep);
        let features = self.temporal.run(g, store, h, batch, &mask);
        Ok(EncodedBatch {
            features,
            lens: batch.lens.clone(),
            len: batch.len,
        })
    }
}

#[derive(Debug, Clone)]
enum SentenceLayer {
    Bilstm(Temporal),
    Mean(Linear),
}

/// Bidirectional recurrent encoder over word vectors, or an order-insensitive
/// mean encoder.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    layer: SentenceLayer,
}

impl SentenceEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        kind: SentenceEncoderKind,
        recurrent: RecurrentKind,
        rng: &mut R,
    ) -> Self {
        let layer = match kind {
            SentenceEncoderKind::Bilstm => SentenceLayer::Bilstm(Temporal::new(
                recurrent,
                store,
                "sentence.rnn",
                input_dim,
                hidden,
                rng,
            )),
            SentenceEncoderKind::Mean => {
                SentenceLayer::Mean(Linear::new(store, "sentence.proj", input_dim, hidden, rng))
            }
        };
        Self {
            input_dim,
            hidden,
            layer,
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<EncodedBatch> {
        check_dim(batch, self.input_dim, "sentence")?;
        let mask = batch.mask();
        let x = g.constant(batch.data.clone());
        let features = match &self.layer {
            SentenceLayer::Bilstm(t) => t.run(g, store, x, batch, &mask),
            SentenceLayer::Mean(proj) => {
                let h = proj.forward(g, store, x);
                let h = g.tanh(h);
                let rows = mask.len();
                let mut avg = Matrix::zeros((rows, rows));
                for (b, &l) in batch.lens.iter().enumerate() {
                    for i in 0..l {
                        for j in 0..l {
                            avg[[b * batch.len + i, b * batch.len + j]] = 1.0 / l as f64;
                        }
                    }
                }
                let avg = g.constant(avg);
                g.matmul(avg, h)
            }
        };
        Ok(EncodedBatch {
            features,
            lens: batch.lens.clone(),
            len: batch.len,
        })
    }
}

/// Number of fixed positional features per timestep.
pub const POSITION_FEATURES: usize = 9;

/// Positional features of normalized time `u = t / (len - 1)`: `u`, and
/// `sin(k pi u)`, `cos(k pi u)` for `k = 1..=4`.
pub fn positional_features(len: usize) -> Matrix {
    Matrix::from_shape_fn((len, POSITION_FEATURES), |(t, j)| {
        let u = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
        match j {
            0 => u,
            _ => {
                let k = j.div_ceil(2) as f64;
                let x = k * std::f64::consts::PI * u;
                if j % 2 == 1 {
                    x.sin()
                } else {
                    x.cos()
                }
            }
        }
    })
}

/// Attention-weighted video for the regression model.
#[derive(Debug, Clone)]
pub struct AttendedVideo {
    /// `T x D_h`.
    pub h_r: Var,
    /// `1 x T`, on the simplex over valid positions.
    pub a: Var,
    pub mask: Vec<bool>,
}

/// Iterative bilinear co-attention.
///
/// Starting from the mean video vector `g_v`, each round attends over words
/// with `softmax(g_v W_s S^T / sqrt(D_h))` to get `g_s`, then over timesteps
/// with `a = softmax(g_s W_v V^T / sqrt(D_h))` to refresh `g_v = a V`. The
/// attended video is `h_r = tanh(V W_hv + g_s W_hs + P W_hp + b)` with `P` the
/// positional features, and `a` is the last round's video attention.
#[derive(Debug, Clone)]
pub struct CoAttention {
    pub rounds: usize,
    w_s: ParamId,
    w_v: ParamId,
    out_v: Linear,
    out_s: ParamId,
    out_p: ParamId,
}

impl CoAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, rounds: usize, rng: &mut R) -> Self {
        Self {
            rounds: rounds.max(1),
            w_s: store.insert_glorot("coattn.w_s", hidden, hidden, rng),
            w_v: store.insert_glorot("coattn.w_v", hidden, hidden, rng),
            out_v: Linear::new(store, "coattn.out_v", hidden, hidden, rng),
            out_s: store.insert_glorot("coattn.out_s", hidden, hidden, rng),
            out_p: store.insert_glorot("coattn.out_p", POSITION_FEATURES, hidden, rng),
        }
    }

    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &EncodedSequence,
        sentence: &EncodedSequence,
    ) -> Result<AttendedVideo> {
        video.require_valid("video")?;
        sentence.require_valid("sentence")?;
        let (t_len, hidden) = g.shape(video.features);
        let scale = 1.0 / (hidden as f64).sqrt();
        let w_s = g.param(store, self.w_s);
        let w_v = g.param(store, self.w_v);
        let v_t = g.transpose(video.features);
        let s_t = g.transpose(sentence.features);

        let mean = g.constant(video.mean_weights());
        let mut g_v = g.matmul(mean, video.features);
        let mut g_s = g_v;
        let mut a = mean;
        for _ in 0..self.rounds {
            let q = g.matmul(g_v, w_s);
            let logits = g.matmul(q, s_t);
            let logits = g.scale(logits, scale);
            let alpha = g.softmax_rows(logits, Some(&sentence.mask));
            g_s = g.matmul(alpha, sentence.features);

            let q = g.matmul(g_s, w_v);
            let logits = g.matmul(q, v_t);
            let logits = g.scale(logits, scale);
            a = g.softmax_rows(logits, Some(&video.mask));
            g_v = g.matmul(a, video.features);
        }

        let hv = self.out_v.forward(g, store, video.features);
        let out_s = g.param(store, self.out_s);
        let hs = g.matmul(g_s, out_s);
        let h = g.add_row(hv, hs);
        let pos = g.constant(positional_features(t_len));
        let out_p = g.param(store, self.out_p);
        let hp = g.matmul(pos, out_p);
        let h = g.add(h, hp);
        let h = g.tanh(h);
        let keep = g.constant(mask_column(&video.mask));
        let h_r = g.mul_col(h, keep);
        Ok(AttendedVideo {
            h_r,
            a,
            mask: video.mask.clone(),
        })
    }
}

/// Fused video for the proposal model, `T x D_h`.
#[derive(Debug, Clone)]
pub struct FusedVideo {
    pub h_p: Var,
    pub mask: Vec<bool>,
    /// Self-attention weights, `T x T`.
    pub attention: Var,
}

/// Linear fusion of every timestep with the pooled sentence, then one
/// residual scaled dot-product self-attention layer over valid timesteps.
#[derive(Debug, Clone)]
pub struct FuseSelfAttend {
    fuse: Linear,
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

impl FuseSelfAttend {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Self {
            fuse: Linear::new(store, "fuse.linear", 2 * hidden, hidden, rng),
            query: store.insert_glorot("fuse.query", hidden, hidden, rng),
            key: store.insert_glorot("fuse.key", hidden, hidden, rng),
            value: store.insert_glorot("fuse.value", hidden, hidden, rng),
        }
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &EncodedSequence,
        sentence: &EncodedSequence,
    ) -> Result<FusedVideo> {
        video.require_valid("video")?;
        sentence.require_valid("sentence")?;
        let (t_len, hidden) = g.shape(video.features);
        let mean = g.constant(sentence.mean_weights());
        let pooled = g.matmul(mean, sentence.features);
        let tiled = g.broadcast_rows(pooled, t_len);
        let joint = g.concat_cols(&[video.features, tiled]);
        let x = self.fuse.forward(g, store, joint);
        let x = g.relu(x);
        let keep = g.constant(mask_column(&video.mask));
        let x = g.mul_col(x, keep);

        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let k_t = g.transpose(k);
        let logits = g.matmul(q, k_t);
        let logits = g.scale(logits, 1.0 / (hidden as f64).sqrt());
        let attention = g.softmax_rows(logits, Some(&video.mask));
        let mixed = g.matmul(attention, v);
        let h = g.add(x, mixed);
        let h_p = g.mul_col(h, keep);
        Ok(FusedVideo {
            h_p,
            mask: video.mask.clone(),
            attention,
        })
    }
}

/// Linear projection used for contrastive embeddings.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    linear: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, hidden, output, rng),
        }
    }

    /// Masked weighted mean of `features` (uniform when `weights` is `None`),
    /// projected and scaled to unit L2 norm. Returns a `1 x D` row.
    pub fn pool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        mask: &[bool],
        weights: Option<Var>,
    ) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Precondition("cannot pool a fully masked sequence".into()));
        }
        let keep = Matrix::from_shape_fn((1, mask.len()), |(_, t)| f64::from(u8::from(mask[t])));
        let keep = g.constant(keep);
        let raw = match weights {
            Some(w) => g.mul(w, keep),
            None => keep,
        };
        let w = g.sum_normalize(raw);
        let pooled = g.matmul(w, features);
        let projected = self.linear.forward(g, store, pooled);
        Ok(g.row_normalize(projected))
    }

    pub fn pool_sequence(&self, g: &mut Graph, store: &ParamStore, seq: &EncodedSequence) -> Result<Var> {
        self.pool(g, store, seq.features, &seq.mask, None)
    }
}
