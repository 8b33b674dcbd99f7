//! Linear token decoders: a plain softmax head over `{O} ∪ classes` and a
//! hierarchical head (binary `O` gate times an entity softmax).

use serde::{Deserialize, Serialize};

use crate::encoder::FlatParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampler::TaskLabel;
use crate::scalar::{log_sum_exp, sigmoid, softmax_into, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax cross-entropy over `N + 1` outputs.
    #[default]
    Plain,
    /// `P(O) = σ(z₀)`, `P(e) = (1 − P(O))·softmax(z₁..z_N)_e`.
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_in: usize,
    pub n_max: usize,
}

impl DecoderConfig {
    fn width(&self) -> usize {
        self.n_max + 1
    }

    fn block(&self) -> usize {
        self.d_in * self.width() + self.width()
    }

    pub fn n_params(&self) -> usize {
        2 * self.block()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.n_max == 0 {
            return Err(Error::InvalidArch(format!(
                "decoder {}×{} is empty",
                self.d_in, self.n_max
            )));
        }
        Ok(())
    }
}

/// Both decoders in one flat vector: the hierarchical block (column 0 is the
/// binary head, columns `1..=N_max` the entity head) followed by the plain
/// block (column 0 is `O`). Weights are `[d × (N_max + 1)]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    config: DecoderConfig,
    flat: Vec<T>,
}

impl<T: Scalar> FlatParams<T> for DecoderParams<T> {
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

impl<T: Scalar> DecoderParams<T> {
    /// Weights from `U(-1/√d, 1/√d)`, zero biases.
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        use rand::Rng as _;
        config.validate()?;
        let mut rng = crate::seed::rng(seed);
        let bound = 1.0 / (config.d_in as f64).sqrt();
        let mut flat = vec![T::zero(); config.n_params()];
        let wlen = config.d_in * config.width();
        for b in 0..2 {
            let off = b * config.block();
            for v in &mut flat[off..off + wlen] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            config: config.clone(),
            flat,
        })
    }

    pub fn from_flat(config: &DecoderConfig, flat: Vec<T>) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.n_params() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} decoder parameters, got {}",
                config.n_params(),
                flat.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            flat,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    fn offset(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Hierarchical => 0,
            HeadKind::Plain => self.config.block(),
        }
    }

    /// `(weights [d × (N_max+1)], bias)` of one head.
    pub fn head(&self, kind: HeadKind) -> (&[T], &[T]) {
        let off = self.offset(kind);
        let wlen = self.config.d_in * self.config.width();
        (
            &self.flat[off..off + wlen],
            &self.flat[off + wlen..off + self.config.block()],
        )
    }

    /// Binary column of the hierarchical head as `(weights [d], bias)`.
    pub fn binary_head(&self) -> (Vec<T>, T) {
        let (w, b) = self.head(HeadKind::Hierarchical);
        let k = self.config.width();
        ((0..self.config.d_in).map(|i| w[i * k]).collect(), b[0])
    }

    pub fn cast<U: Scalar>(&self) -> DecoderParams<U> {
        DecoderParams {
            config: self.config.clone(),
            flat: self.flat.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    fn check(&self, n_way: usize, d: usize) -> Result<()> {
        if n_way == 0 || n_way > self.config.n_max {
            return Err(Error::Config(format!(
                "{n_way}-way task exceeds decoder capacity {}",
                self.config.n_max
            )));
        }
        if d != self.config.d_in {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {d} vs decoder input {}",
                self.config.d_in
            )));
        }
        Ok(())
    }

    /// Active logits `z₀..z_N` of one token.
    pub(crate) fn logits(&self, kind: HeadKind, n_way: usize, h: &[T], out: &mut [T]) {
        let (w, b) = self.head(kind);
        let k = self.config.width();
        out[..=n_way].copy_from_slice(&b[..=n_way]);
        for (i, &hi) in h.iter().enumerate() {
            let row = &w[i * k..i * k + n_way + 1];
            for (o, &wi) in out.iter_mut().zip(row) {
                *o += hi * wi;
            }
        }
    }
}

/// Head output index of a label: `0` for `O`, `c + 1` for class `c`.
pub(crate) fn head_target(label: TaskLabel) -> Option<usize> {
    match label {
        TaskLabel::Outside => Some(0),
        TaskLabel::Class(c) => Some(c + 1),
        TaskLabel::Masked => None,
    }
}

/// Probability vector over `{O, 0..N−1}` from hierarchical logits.
fn hc_probs<T: Scalar>(z: &[T], out: &mut [T]) {
    let p_o = sigmoid(z[0]);
    out[0] = p_o;
    softmax_into(&z[1..], &mut out[1..]);
    for o in &mut out[1..] {
        *o *= T::one() - p_o;
    }
}

/// Hierarchical class distribution `(P(O), P(0), …, P(N−1))` of one token.
pub fn hc_forward<T: Scalar>(h: &[T], decoder: &DecoderParams<T>, n_way: usize) -> Result<Vec<T>> {
    decoder.check(n_way, h.len())?;
    let mut z = vec![T::zero(); n_way + 1];
    decoder.logits(HeadKind::Hierarchical, n_way, h, &mut z);
    let mut p = vec![T::zero(); n_way + 1];
    hc_probs(&z, &mut p);
    Ok(p)
}

/// Per-token distributions `[L × (N+1)]`, column 0 being `O`.
pub fn head_predict<T: Scalar>(
    decoder: &DecoderParams<T>,
    kind: HeadKind,
    n_way: usize,
    h: &Matrix<T>,
) -> Result<Matrix<T>> {
    decoder.check(n_way, h.cols())?;
    let mut out = Matrix::zeros(h.rows(), n_way + 1);
    let mut z = vec![T::zero(); n_way + 1];
    for (l, row) in h.iter_rows().enumerate() {
        decoder.logits(kind, n_way, row, &mut z);
        match kind {
            HeadKind::Plain => softmax_into(&z, out.row_mut(l)),
            HeadKind::Hierarchical => hc_probs(&z, out.row_mut(l)),
        }
    }
    Ok(out)
}

/// Token loss `−log P(y)` and its logit gradient `δ`.
pub(crate) fn token_loss<T: Scalar>(kind: HeadKind, z: &[T], y: usize, delta: &mut [T]) -> T {
    match kind {
        HeadKind::Plain => {
            softmax_into(z, delta);
            delta[y] -= T::one();
            log_sum_exp(z) - z[y]
        }
        HeadKind::Hierarchical => {
            let s = sigmoid(z[0]);
            if y == 0 {
                delta.iter_mut().for_each(|d| *d = T::zero());
                delta[0] = s - T::one();
                softplus(-z[0])
            } else {
                delta[0] = s;
                softmax_into(&z[1..], &mut delta[1..]);
                delta[y] -= T::one();
                softplus(z[0]) + log_sum_exp(&z[1..]) - z[y]
            }
        }
    }
}

/// Logit-space Hessian-vector product `∂δ/∂z · ż`.
pub(crate) fn token_hvp<T: Scalar>(
    kind: HeadKind,
    z: &[T],
    y: usize,
    zdot: &[T],
    out: &mut [T],
    scratch: &mut [T],
) {
    let softmax_hvp = |z: &[T], zd: &[T], out: &mut [T], p: &mut [T]| {
        softmax_into(z, p);
        let pz: T = p.iter().zip(zd).map(|(&a, &b)| a * b).sum();
        for ((o, &pi), &zi) in out.iter_mut().zip(p.iter()).zip(zd) {
            *o = pi * (zi - pz);
        }
    };
    match kind {
        HeadKind::Plain => softmax_hvp(z, zdot, out, scratch),
        HeadKind::Hierarchical => {
            let s = sigmoid(z[0]);
            out[0] = s * (T::one() - s) * zdot[0];
            if y == 0 {
                out[1..].iter_mut().for_each(|o| *o = T::zero());
            } else {
                softmax_hvp(&z[1..], &zdot[1..], &mut out[1..], &mut scratch[1..]);
            }
        }
    }
}

/// Mean token loss with gradients w.r.t. the decoder (full flat layout) and
/// the input features.
#[derive(Debug, Clone)]
pub struct HeadLoss<T> {
    pub loss: T,
    pub grad_decoder: Vec<T>,
    pub grad_features: Matrix<T>,
}

/// Mean of `−log P(y_i)` over the rows of `h`; targets use
/// `0 = O`, `c + 1 = class c`.
pub fn head_loss_grad<T: Scalar>(
    decoder: &DecoderParams<T>,
    kind: HeadKind,
    n_way: usize,
    h: &Matrix<T>,
    targets: &[usize],
) -> Result<HeadLoss<T>> {
    head_loss_grad_weighted(decoder, kind, n_way, h, targets, None)
}

/// `Σ w_i·(−log P(y_i))`; uniform `1/n` weights when `weights` is `None`.
pub fn head_loss_grad_weighted<T: Scalar>(
    decoder: &DecoderParams<T>,
    kind: HeadKind,
    n_way: usize,
    h: &Matrix<T>,
    targets: &[usize],
    weights: Option<&[T]>,
) -> Result<HeadLoss<T>> {
    decoder.check(n_way, h.cols())?;
    if targets.len() != h.rows() || weights.is_some_and(|w| w.len() != targets.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            h.rows()
        )));
    }
    let mut grad_decoder = vec![T::zero(); decoder.config.n_params()];
    let mut grad_features = Matrix::zeros(h.rows(), h.cols());
    if targets.is_empty() {
        return Ok(HeadLoss {
            loss: T::zero(),
            grad_decoder,
            grad_features,
        });
    }
    let uniform = T::one() / T::of_usize(targets.len());
    let k = decoder.config.width();
    let off = decoder.offset(kind);
    let wlen = decoder.config.d_in * k;
    let (w, _) = decoder.head(kind);
    let mut z = vec![T::zero(); n_way + 1];
    let mut delta = vec![T::zero(); n_way + 1];
    let mut loss = T::zero();
    for (i, (row, &y)) in h.iter_rows().zip(targets).enumerate() {
        let w_scale = weights.map_or(uniform, |w| w[i]);
        decoder.logits(kind, n_way, row, &mut z);
        loss += w_scale * token_loss(kind, &z, y, &mut delta);
        delta.iter_mut().for_each(|d| *d *= w_scale);
        let gh = grad_features.row_mut(i);
        for (a, &ha) in row.iter().enumerate() {
            let wr = &w[a * k..a * k + n_way + 1];
            gh[a] = wr.iter().zip(&delta).map(|(&x, &d)| x * d).sum();
            let gw = &mut grad_decoder[off + a * k..off + a * k + n_way + 1];
            for (g, &d) in gw.iter_mut().zip(&delta) {
                *g += ha * d;
            }
        }
        for (g, &d) in grad_decoder[off + wlen..off + wlen + n_way + 1]
            .iter_mut()
            .zip(&delta)
        {
            *g += d;
        }
    }
    Ok(HeadLoss {
        loss,
        grad_decoder,
        grad_features,
    })
}

/// Reverse step through one inner SGD update `ψ' = ψ − α ∇ψ L(ψ, H)`, with
/// `L` weighted as in [`head_loss_grad_weighted`].
///
/// Given the adjoint `psi_bar` of `ψ'`, overwrites it with the adjoint of `ψ`
/// and accumulates the adjoint of `H` into `h_bar`.
pub(crate) fn sgd_step_adjoint<T: Scalar>(
    decoder: &DecoderParams<T>,
    kind: HeadKind,
    n_way: usize,
    h: &Matrix<T>,
    targets: &[usize],
    weights: Option<&[T]>,
    lr: T,
    psi_bar: &mut [T],
    h_bar: &mut Matrix<T>,
) {
    if targets.is_empty() {
        return;
    }
    let uniform = T::one() / T::of_usize(targets.len());
    let k = decoder.config.width();
    let off = decoder.offset(kind);
    let wlen = decoder.config.d_in * k;
    let (w, _) = decoder.head(kind);
    let v_w = psi_bar[off..off + wlen].to_vec();
    let v_b = psi_bar[off + wlen..off + wlen + n_way + 1].to_vec();
    let mut z = vec![T::zero(); n_way + 1];
    let mut zdot = vec![T::zero(); n_way + 1];
    let mut delta = vec![T::zero(); n_way + 1];
    let mut ddot = vec![T::zero(); n_way + 1];
    let mut scratch = vec![T::zero(); n_way + 1];
    for (i, (row, &y)) in h.iter_rows().zip(targets).enumerate() {
        decoder.logits(kind, n_way, row, &mut z);
        token_loss(kind, &z, y, &mut delta);
        zdot.copy_from_slice(&v_b);
        for (a, &ha) in row.iter().enumerate() {
            for (zd, &v) in zdot.iter_mut().zip(&v_w[a * k..a * k + n_way + 1]) {
                *zd += ha * v;
            }
        }
        token_hvp(kind, &z, y, &zdot, &mut ddot, &mut scratch);
        let c = lr * weights.map_or(uniform, |w| w[i]);
        let hb = h_bar.row_mut(i);
        for (a, &ha) in row.iter().enumerate() {
            let wr = &w[a * k..a * k + n_way + 1];
            let vr = &v_w[a * k..a * k + n_way + 1];
            let mixed: T = (0..=n_way)
                .map(|j| wr[j] * ddot[j] + vr[j] * delta[j])
                .sum();
            hb[a] -= c * mixed;
            for (p, &dd) in psi_bar[off + a * k..off + a * k + n_way + 1]
                .iter_mut()
                .zip(&ddot)
            {
                *p -= c * ha * dd;
            }
        }
        for (p, &dd) in psi_bar[off + wlen..off + wlen + n_way + 1]
            .iter_mut()
            .zip(&ddot)
        {
            *p -= c * dd;
        }
    }
}
