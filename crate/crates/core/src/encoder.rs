//! Compact multimodal token encoder with exact reverse-mode gradients.
//!
//! Per token `l` with id `v`, position `p` and box `b`:
//!
//! ```text
//! x_l   = E[v] + sinusoid(p) + bᵀ P                 (d_model)
//! z1_l  = tanh(x_l W0 + c0)                         (d_hidden)
//! ctx_l = mean(z1_k : |k - l| ≤ window)             (d_hidden)
//! m_l   = [z1_l ; ctx_l]                            (2·d_hidden)
//! z_i   = tanh(z_{i-1} W_i + c_i)   for i = 1..depth-1
//! h_l   = act(z W_out + c_out)                      (d_out)
//! ```
//!
//! All parameters live in one contiguous vector; the named components are
//! views into it.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenFeatures;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Identity,
    Tanh,
    /// Rows rescaled to Euclidean norm `sqrt(d_out)`.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Number of tanh hidden layers, at least 1.
    pub depth: usize,
    /// Half-width of the context window.
    pub window: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, d_out: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            d_hidden: 32,
            d_out,
            depth: 2,
            window: 4,
            output_activation: OutputActivation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::InvalidArch(
                "all widths and the vocabulary must be positive".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::InvalidArch("depth must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer in order, output layer last.
    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.d_hidden;
        let mut shapes = vec![(self.d_model, h)];
        for i in 1..self.depth {
            shapes.push((if i == 1 { 2 * h } else { h }, h));
        }
        shapes.push((if self.depth == 1 { 2 * h } else { h }, self.d_out));
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncoderLayout {
    token_embedding: Block,
    pos2d: Block,
    dense: Vec<(Block, Block)>,
    total: usize,
}

impl EncoderLayout {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut offset = 0;
        let mut take = |rows, cols| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let token_embedding = take(cfg.vocab_size, cfg.d_model);
        let pos2d = take(4, cfg.d_model);
        let dense = cfg
            .dense_shapes()
            .into_iter()
            .map(|(i, o)| (take(i, o), take(1, o)))
            .collect();
        Self {
            token_embedding,
            pos2d,
            dense,
            total: offset,
        }
    }
}

/// Flat parameter vectors that support elementwise meta-update arithmetic.
pub trait FlatParams<T: Scalar>: Clone {
    fn flat(&self) -> &[T];
    fn flat_mut(&mut self) -> &mut [T];
    fn layout_matches(&self, other: &Self) -> bool;
}

/// Elementwise `y + a·x`.
pub fn param_axpy<T: Scalar, P: FlatParams<T>>(a: T, x: &[T], y: &P) -> Result<P> {
    if x.len() != y.flat().len() {
        return Err(Error::LayoutMismatch(format!(
            "operand of length {} against parameters of length {}",
            x.len(),
            y.flat().len()
        )));
    }
    let mut out = y.clone();
    crate::scalar::axpy_slice(a, x, out.flat_mut());
    Ok(out)
}

/// Elementwise mean, reduced in list order.
pub fn param_average<T: Scalar, P: FlatParams<T>>(items: &[P]) -> Result<P> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| Error::LayoutMismatch("average of an empty list".into()))?;
    let mut out = first.clone();
    for p in rest {
        if !p.layout_matches(first) {
            return Err(Error::LayoutMismatch(
                "averaging incompatible parameter sets".into(),
            ));
        }
        for (o, &v) in out.flat_mut().iter_mut().zip(p.flat()) {
            *o += v;
        }
    }
    if !rest.is_empty() {
        let n = T::of_usize(items.len());
        for o in out.flat_mut() {
            *o /= n;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    layout: EncoderLayout,
    flat: Vec<T>,
}

impl<T: Scalar> FlatParams<T> for EncoderParams<T> {
    fn flat(&self) -> &[T] {
        &self.flat
    }

    fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    fn layout_matches(&self, other: &Self) -> bool {
        self.config == other.config
    }
}

/// Seeded initialization; dense weights and the box projection are drawn
/// from `U(-1/√fan_in, 1/√fan_in)`, token embeddings from `U(-1, 1)`
/// (one-hot input, fan-in 1), biases start at zero.
pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    use rand::Rng as _;
    config.validate()?;
    let layout = EncoderLayout::new(config);
    let mut flat = vec![T::zero(); layout.total];
    let mut rng = seed::rng(seed);
    let mut fill = |b: Block, fan_in: usize, flat: &mut [T]| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut flat[b.range()] {
            *v = T::of(rng.random_range(-bound..bound));
        }
    };
    fill(layout.token_embedding, 1, &mut flat);
    fill(layout.pos2d, 4, &mut flat);
    for (w, _) in &layout.dense {
        fill(*w, w.rows, &mut flat);
    }
    Ok(EncoderParams {
        config: config.clone(),
        layout,
        flat,
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn from_flat(config: &EncoderConfig, flat: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = EncoderLayout::new(config);
        if flat.len() != layout.total {
            return Err(Error::LayoutMismatch(format!(
                "expected {} encoder parameters, got {}",
                layout.total,
                flat.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            flat,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.flat.len()
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn token_embedding(&self) -> &[T] {
        &self.flat[self.layout.token_embedding.range()]
    }

    pub fn pos2d_projection(&self) -> &[T] {
        &self.flat[self.layout.pos2d.range()]
    }

    /// `(weight [fan_in × fan_out], bias)` of dense layer `i`; the output layer is last.
    pub fn dense_layer(&self, i: usize) -> (&[T], &[T]) {
        let (w, b) = self.layout.dense[i];
        (&self.flat[w.range()], &self.flat[b.range()])
    }

    pub fn n_dense_layers(&self) -> usize {
        self.layout.dense.len()
    }

    pub fn zero_grad(&self) -> GradientBuffer<T> {
        GradientBuffer {
            flat: vec![T::zero(); self.flat.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            flat: self.flat.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Gradient with the same layout as [`EncoderParams::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer<T> {
    pub flat: Vec<T>,
}

impl<T: Scalar> FlatParams<T> for GradientBuffer<T> {
    fn flat(&self) -> &[T] {
        &self.flat
    }

    fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    fn layout_matches(&self, other: &Self) -> bool {
        self.flat.len() == other.flat.len()
    }
}

/// Fixed sinusoidal features of a reading-order position.
pub fn sinusoid<T: Scalar>(pos: usize, dim: usize, out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate().take(dim) {
        let pair = (i / 2) as f64;
        let freq = 10_000f64.powf(-2.0 * pair / dim as f64);
        let angle = pos as f64 * freq;
        *o = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    input: Matrix<T>,
    /// tanh outputs of the hidden layers.
    hidden: Vec<Matrix<T>>,
    /// `[z1 | ctx]`
    mixed: Matrix<T>,
    /// Pre-activation row norms, kept for `Sphere`.
    out_norms: Vec<T>,
    pub output: Matrix<T>,
}

fn window_range(l: usize, len: usize, w: usize) -> std::ops::RangeInclusive<usize> {
    l.saturating_sub(w)..=(l + w).min(len - 1)
}

fn dense_forward<T: Scalar>(input: &Matrix<T>, w: &[T], b: &[T]) -> Matrix<T> {
    let mut out = input.matmul_raw(w, b.len());
    for r in 0..out.rows() {
        for (o, &bi) in out.row_mut(r).iter_mut().zip(b) {
            *o += bi;
        }
    }
    out
}

impl<T: Scalar> EncoderParams<T> {
    fn layer_input<'a>(&self, trace: &'a ForwardTrace<T>, i: usize) -> &'a Matrix<T> {
        match i {
            0 => &trace.input,
            1 => &trace.mixed,
            _ => &trace.hidden[i - 1],
        }
    }

    pub fn forward(&self, tokens: &[TokenFeatures]) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::ShapeMismatch(
                "cannot encode an empty document".into(),
            ));
        }
        let dm = cfg.d_model;
        let emb = self.token_embedding();
        let proj = self.pos2d_projection();
        let mut input = Matrix::zeros(tokens.len(), dm);
        for (l, t) in tokens.iter().enumerate() {
            let v = t.token_id as usize;
            if v >= cfg.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token_id: t.token_id,
                    vocab_size: cfg.vocab_size,
                });
            }
            let row = input.row_mut(l);
            sinusoid(t.pos_1d, dm, row);
            for (x, &e) in row.iter_mut().zip(&emb[v * dm..(v + 1) * dm]) {
                *x += e;
            }
            for (c, &bc) in t.bbox.iter().enumerate() {
                let bc = T::of(bc);
                for (x, &p) in row.iter_mut().zip(&proj[c * dm..(c + 1) * dm]) {
                    *x += bc * p;
                }
            }
        }

        let n_hidden = cfg.depth;
        let mut hidden = Vec::with_capacity(n_hidden);
        let (w0, b0) = self.dense_layer(0);
        let mut z1 = dense_forward(&input, w0, b0);
        z1.map_inplace(T::tanh);

        let (len, h) = (tokens.len(), cfg.d_hidden);
        let mut mixed = Matrix::zeros(len, 2 * h);
        for l in 0..len {
            let win = window_range(l, len, cfg.window);
            let scale = T::one() / T::of_usize(win.clone().count());
            let (own, ctx) = mixed.row_mut(l).split_at_mut(h);
            own.copy_from_slice(z1.row(l));
            for k in win {
                for (c, &z) in ctx.iter_mut().zip(z1.row(k)) {
                    *c += z;
                }
            }
            ctx.iter_mut().for_each(|c| *c *= scale);
        }
        hidden.push(z1);

        let mut trace = ForwardTrace {
            input,
            hidden,
            mixed,
            out_norms: Vec::new(),
            output: Matrix::zeros(0, 0),
        };
        for i in 1..n_hidden {
            let (w, b) = self.dense_layer(i);
            let mut z = dense_forward(self.layer_input(&trace, i), w, b);
            z.map_inplace(T::tanh);
            trace.hidden.push(z);
        }
        let (w, b) = self.dense_layer(n_hidden);
        let mut out = dense_forward(self.layer_input(&trace, n_hidden), w, b);
        match cfg.output_activation {
            OutputActivation::Identity => {}
            OutputActivation::Tanh => out.map_inplace(T::tanh),
            OutputActivation::Sphere => {
                let radius = T::of_usize(cfg.d_out).sqrt();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let norm = row
                        .iter()
                        .map(|&x| x * x)
                        .sum::<T>()
                        .sqrt()
                        .max(T::of(1e-12));
                    row.iter_mut().for_each(|x| *x *= radius / norm);
                    trace.out_norms.push(norm);
                }
            }
        }
        trace.output = out;
        Ok(trace)
    }

    /// Accumulates the gradient of `⟨upstream, output⟩` into `grad`.
    pub fn backward_into(
        &self,
        tokens: &[TokenFeatures],
        trace: &ForwardTrace<T>,
        upstream: &Matrix<T>,
        grad: &mut [T],
    ) -> Result<()> {
        let cfg = &self.config;
        if upstream.shape() != trace.output.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                trace.output.shape()
            )));
        }
        if grad.len() != self.flat.len() {
            return Err(Error::LayoutMismatch("gradient buffer length".into()));
        }
        let n_hidden = cfg.depth;
        let mut delta = upstream.clone();
        match cfg.output_activation {
            OutputActivation::Identity => {}
            OutputActivation::Tanh => {
                for (d, &y) in delta.as_mut_slice().iter_mut().zip(trace.output.as_slice()) {
                    *d *= T::one() - y * y;
                }
            }
            OutputActivation::Sphere => {
                let radius = T::of_usize(cfg.d_out).sqrt();
                for (r, &norm) in trace.out_norms.iter().enumerate() {
                    let y = trace.output.row(r);
                    let d = delta.row_mut(r);
                    let along =
                        d.iter().zip(y).map(|(&g, &v)| g * v).sum::<T>() / (radius * radius);
                    for (g, &v) in d.iter_mut().zip(y) {
                        *g = (*g - v * along) * radius / norm;
                    }
                }
            }
        }
        // Dense layers from the output down to layer 1.
        for i in (1..=n_hidden).rev() {
            let (wb, bb) = self.layout.dense[i];
            let input = self.layer_input(trace, i);
            input.t_matmul_acc(&delta, &mut grad[wb.range()]);
            delta.col_sums_acc(&mut grad[bb.range()]);
            let w = &self.flat[wb.range()];
            let mut d_in = delta.matmul_t_raw(w, wb.rows);
            if i >= 2 {
                // d_in is w.r.t. hidden[i-1] = tanh(...)
                for (d, &z) in d_in
                    .as_mut_slice()
                    .iter_mut()
                    .zip(trace.hidden[i - 1].as_slice())
                {
                    *d *= T::one() - z * z;
                }
            }
            delta = d_in;
        }
        // delta is now w.r.t. `mixed` (or, when depth == 1, also `mixed`).
        let (len, h) = (tokens.len(), cfg.d_hidden);
        let mut dz1 = Matrix::zeros(len, h);
        for l in 0..len {
            let row = delta.row(l);
            let (d_own, d_ctx) = row.split_at(h);
            for (o, &d) in dz1.row_mut(l).iter_mut().zip(d_own) {
                *o += d;
            }
            let win = window_range(l, len, cfg.window);
            let scale = T::one() / T::of_usize(win.clone().count());
            for k in win {
                for (o, &d) in dz1.row_mut(k).iter_mut().zip(d_ctx) {
                    *o += d * scale;
                }
            }
        }
        for (d, &z) in dz1
            .as_mut_slice()
            .iter_mut()
            .zip(trace.hidden[0].as_slice())
        {
            *d *= T::one() - z * z;
        }
        let (wb, bb) = self.layout.dense[0];
        trace.input.t_matmul_acc(&dz1, &mut grad[wb.range()]);
        dz1.col_sums_acc(&mut grad[bb.range()]);
        let dx = dz1.matmul_t_raw(&self.flat[wb.range()], wb.rows);

        let dm = cfg.d_model;
        let eb = self.layout.token_embedding;
        let pb = self.layout.pos2d;
        for (l, t) in tokens.iter().enumerate() {
            let v = t.token_id as usize;
            let dxl = dx.row(l);
            for (g, &d) in grad[eb.offset + v * dm..eb.offset + (v + 1) * dm]
                .iter_mut()
                .zip(dxl)
            {
                *g += d;
            }
            for (c, &bc) in t.bbox.iter().enumerate() {
                let bc = T::of(bc);
                let start = pb.offset + c * dm;
                for (g, &d) in grad[start..start + dm].iter_mut().zip(dxl) {
                    *g += bc * d;
                }
            }
        }
        Ok(())
    }
}

/// Embeds every token of a document; output row `l` belongs to token `l`.
pub fn encode_document<T: Scalar>(
    params: &EncoderParams<T>,
    tokens: &[TokenFeatures],
) -> Result<Matrix<T>> {
    Ok(params.forward(tokens)?.output)
}

/// Exact gradient of `⟨upstream, encode_document(params, tokens)⟩` w.r.t. the flat parameters.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    tokens: &[TokenFeatures],
    upstream: &Matrix<T>,
) -> Result<GradientBuffer<T>> {
    let trace = params.forward(tokens)?;
    let mut g = params.zero_grad();
    params.backward_into(tokens, &trace, upstream, &mut g.flat)?;
    Ok(g)
}
