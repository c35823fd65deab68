//! Discretized mixture-of-logistics output distribution.
//!
//! Each pixel is modelled with `K` logistic components shared across its
//! channels. Channel means are coupled linearly to the preceding channels of
//! the same pixel, so the joint is
//! `p(x) = sum_k pi_k * prod_c p_k(x_c | x_<c)`. Log-probabilities are reported
//! per channel as exact conditionals `log p(x_c | x_<c)`, which sum to the
//! joint pixel log-probability.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Function, Graph, Real, Tensor, TensorError, Var};

/// Lower clamp applied to log-scales before use.
pub const MIN_LOG_SCALE: f64 = -7.0;

/// Bins whose CDF difference falls below this use the midpoint density.
pub const CDF_UNDERFLOW: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("pixel value {value} outside alphabet of depth {depth}")]
    OutOfAlphabet { value: u32, depth: u16 },
    #[error("alphabet depth must be at least 2, got {0}")]
    BadDepth(u32),
    #[error("unsupported channel count {0}; expected 1 or 3")]
    Channels(usize),
    #[error("bits_per_dim: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The discrete set of pixel levels `0..depth` and their normalized centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelAlphabet {
    depth: u16,
}

impl PixelAlphabet {
    pub fn new(depth: u32) -> Result<Self, LikelihoodError> {
        if !(2..=256).contains(&depth) {
            return Err(LikelihoodError::BadDepth(depth));
        }
        Ok(PixelAlphabet {
            depth: depth as u16,
        })
    }

    pub fn depth(self) -> u16 {
        self.depth
    }

    /// Maps level `v` to `2v/(D-1) - 1`; endpoints land exactly on -1 and 1.
    pub fn normalize<T: Real>(self, v: u8) -> T {
        let top = self.depth as f64 - 1.0;
        T::lit(2.0 * v as f64 / top - 1.0)
    }

    /// Half-width of a bin in normalized space, `1/(D-1)`.
    pub fn half_width<T: Real>(self) -> T {
        T::lit(1.0 / (self.depth as f64 - 1.0))
    }

    /// Nearest level to a normalized value, after clamping to [-1, 1].
    pub fn quantize(self, x: f64) -> u8 {
        let x = x.clamp(-1.0, 1.0);
        let top = self.depth as f64 - 1.0;
        ((x + 1.0) * 0.5 * top).round().clamp(0.0, top) as u8
    }

    pub fn check(self, v: u8) -> Result<(), LikelihoodError> {
        if (v as u16) < self.depth {
            Ok(())
        } else {
            Err(LikelihoodError::OutOfAlphabet {
                value: v as u32,
                depth: self.depth,
            })
        }
    }
}

/// Channel layout of the head output at one location:
/// `[logits K | means C*K | log_scales C*K | coeffs 3*K (C=3 only)]`,
/// with per-channel blocks ordered channel-major (`c*K + k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureLayout {
    pub mixtures: usize,
    pub channels: usize,
}

impl MixtureLayout {
    pub fn new(mixtures: usize, channels: usize) -> Result<Self, LikelihoodError> {
        if channels != 1 && channels != 3 {
            return Err(LikelihoodError::Channels(channels));
        }
        Ok(MixtureLayout { mixtures, channels })
    }

    pub fn coupled(&self) -> bool {
        self.channels == 3
    }

    /// Number of head channels per location.
    pub fn width(&self) -> usize {
        let k = self.mixtures;
        k + 2 * k * self.channels + if self.coupled() { 3 * k } else { 0 }
    }

    fn mean_at(&self, k: usize, c: usize) -> usize {
        self.mixtures + c * self.mixtures + k
    }

    fn log_scale_at(&self, k: usize, c: usize) -> usize {
        self.mixtures * (1 + self.channels) + c * self.mixtures + k
    }

    fn coeff_at(&self, k: usize, j: usize) -> usize {
        self.mixtures * (1 + 2 * self.channels) + j * self.mixtures + k
    }
}

/// Mixture parameters at a single location, in raw (unconstrained) form.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams<T> {
    pub layout: MixtureLayout,
    /// Flat vector in [`MixtureLayout`] order.
    pub raw: Vec<T>,
}

impl<T: Real> MixtureParams<T> {
    pub fn new(layout: MixtureLayout, raw: Vec<T>) -> Self {
        assert_eq!(raw.len(), layout.width(), "raw mixture parameter length");
        MixtureParams { layout, raw }
    }

    /// Reads location `pos` of image `n` from a `[N, width, H*W]` head buffer.
    pub fn gather(layout: MixtureLayout, head: &[T], n: usize, pos: usize, plane: usize) -> Self {
        let width = layout.width();
        let raw = (0..width)
            .map(|p| head[(n * width + p) * plane + pos])
            .collect();
        MixtureParams { layout, raw }
    }

    pub fn logit(&self, k: usize) -> T {
        self.raw[k]
    }

    pub fn mean(&self, k: usize, c: usize) -> T {
        self.raw[self.layout.mean_at(k, c)]
    }

    /// Log-scale after the lower clamp.
    pub fn log_scale(&self, k: usize, c: usize) -> T {
        self.raw[self.layout.log_scale_at(k, c)].max(T::lit(MIN_LOG_SCALE))
    }

    /// Coupling coefficient `j` of component `k`, squashed into (-1, 1).
    pub fn coeff(&self, k: usize, j: usize) -> T {
        if self.layout.coupled() {
            self.raw[self.layout.coeff_at(k, j)].tanh()
        } else {
            T::zero()
        }
    }

    /// Log mixture weights (log-softmax of the logits).
    pub fn log_weights(&self) -> Vec<T> {
        let logits = &self.raw[..self.layout.mixtures];
        let lse = log_sum_exp(logits);
        logits.iter().map(|&l| l - lse).collect()
    }

    /// Effective mean of component `k`, channel `c`, given normalized values
    /// of the channels before `c` at the same pixel.
    pub fn coupled_mean(&self, k: usize, c: usize, prev: &[T]) -> T {
        let m = self.mean(k, c);
        match c {
            1 if self.layout.coupled() => m + self.coeff(k, 0) * prev[0],
            2 if self.layout.coupled() => {
                m + self.coeff(k, 1) * prev[0] + self.coeff(k, 2) * prev[1]
            }
            _ => m,
        }
    }
}

/// Per-component effective means, `K x C` row-major, using `observed` as the
/// normalized values of the pixel's channels.
pub fn channel_means<T: Real>(params: &MixtureParams<T>, observed: &[T]) -> Vec<T> {
    let (kk, cc) = (params.layout.mixtures, params.layout.channels);
    let mut out = Vec::with_capacity(kk * cc);
    for k in 0..kk {
        for c in 0..cc {
            out.push(params.coupled_mean(k, c, observed));
        }
    }
    out
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    crate::tensor::UnaryFn::Sigmoid.eval(x)
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Log-mass of one bin under one logistic component, with the partial
/// derivatives with respect to the mean and the (clamped) log-scale.
#[derive(Debug, Clone, Copy)]
struct BinMass<T> {
    log_mass: T,
    d_mean: T,
    d_log_scale: T,
}

fn bin_log_mass<T: Real>(v: u8, mean: T, log_scale: T, alphabet: PixelAlphabet) -> BinMass<T> {
    let w = alphabet.half_width::<T>();
    let centered = alphabet.normalize::<T>(v) - mean;
    let inv_s = (-log_scale).exp();
    let last = (alphabet.depth() - 1) as u8;
    if v == 0 {
        let z = inv_s * (centered + w);
        let tail = sigmoid(-z);
        return BinMass {
            log_mass: -softplus(-z),
            d_mean: -inv_s * tail,
            d_log_scale: -z * tail,
        };
    }
    if v == last {
        let z = inv_s * (centered - w);
        let head = sigmoid(z);
        return BinMass {
            log_mass: -softplus(z),
            d_mean: inv_s * head,
            d_log_scale: z * head,
        };
    }
    let zp = inv_s * (centered + w);
    let zm = inv_s * (centered - w);
    // sigmoid(zp) - sigmoid(zm) = sigmoid(zp) * sigmoid(-zm) * -expm1(zm - zp),
    // which avoids cancelling two nearly equal CDF values on narrow bins.
    let gap = zp - zm;
    let log_mass = -softplus(-zp) - softplus(zm) + (-(-gap).exp_m1()).ln();
    if log_mass.exp() > T::lit(CDF_UNDERFLOW) {
        let (tp, hm) = (sigmoid(-zp), sigmoid(zm));
        BinMass {
            log_mass,
            d_mean: inv_s * (hm - tp),
            d_log_scale: zm * hm - zp * tp - gap / gap.exp_m1(),
        }
    } else {
        let z = inv_s * centered;
        let slope = T::one() - T::lit(2.0) * sigmoid(z);
        BinMass {
            log_mass: z - log_scale - T::lit(2.0) * softplus(z) + (T::lit(2.0) * w).ln(),
            d_mean: -inv_s * slope,
            d_log_scale: -z * slope - T::one(),
        }
    }
}

/// Per-channel conditional log-probabilities of `pixel` (one value per
/// channel) at a location.
pub fn log_prob_at<T: Real>(
    params: &MixtureParams<T>,
    pixel: &[u8],
    alphabet: PixelAlphabet,
) -> Result<Vec<T>, LikelihoodError> {
    for &v in pixel {
        alphabet.check(v)?;
    }
    Ok(evaluate(params, pixel, alphabet, None).0)
}

/// Shared forward/backward evaluation at one location. When `upstream` is
/// given, also returns the gradient with respect to `params.raw`.
fn evaluate<T: Real>(
    params: &MixtureParams<T>,
    pixel: &[u8],
    alphabet: PixelAlphabet,
    upstream: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let layout = params.layout;
    let (kk, cc) = (layout.mixtures, layout.channels);
    let observed: Vec<T> = pixel.iter().map(|&v| alphabet.normalize(v)).collect();
    let log_w = params.log_weights();

    // per-component, per-channel bin masses
    let mut masses = Vec::with_capacity(kk * cc);
    for k in 0..kk {
        for c in 0..cc {
            let mean = params.coupled_mean(k, c, &observed);
            masses.push(bin_log_mass(
                pixel[c],
                mean,
                params.log_scale(k, c),
                alphabet,
            ));
        }
    }

    // cumulative joint log-probabilities J_c and component posteriors
    let mut acc = log_w.clone();
    let mut joint = Vec::with_capacity(cc);
    let mut posterior = Vec::with_capacity(cc * kk);
    for c in 0..cc {
        for k in 0..kk {
            acc[k] = acc[k] + masses[k * cc + c].log_mass;
        }
        let j = log_sum_exp(&acc);
        posterior.extend(acc.iter().map(|&a| (a - j).exp()));
        joint.push(j);
    }
    let out: Vec<T> = (0..cc)
        .map(|c| {
            if c == 0 {
                joint[0]
            } else {
                joint[c] - joint[c - 1]
            }
        })
        .collect();

    let Some(g) = upstream else {
        return (out, Vec::new());
    };

    // dL/dJ_c = g_c - g_{c+1}
    let h: Vec<T> = (0..cc)
        .map(|c| g[c] - if c + 1 < cc { g[c + 1] } else { T::zero() })
        .collect();
    let mut grad = vec![T::zero(); layout.width()];
    let mut d_log_w = vec![T::zero(); kk];
    for k in 0..kk {
        d_log_w[k] = (0..cc).map(|c| h[c] * posterior[c * kk + k]).sum();
    }
    let total: T = d_log_w.iter().copied().sum();
    for k in 0..kk {
        grad[k] = d_log_w[k] - log_w[k].exp() * total;
    }
    for k in 0..kk {
        // dL/dlog_mass_{k,c} = sum_{c' >= c} h_c' r_k^(c')
        let mut tail = T::zero();
        let mut d_mass = vec![T::zero(); cc];
        for c in (0..cc).rev() {
            tail = tail + h[c] * posterior[c * kk + k];
            d_mass[c] = tail;
        }
        for c in 0..cc {
            let bm = masses[k * cc + c];
            let d_mean = d_mass[c] * bm.d_mean;
            grad[layout.mean_at(k, c)] = d_mean;
            let raw_ls = params.raw[layout.log_scale_at(k, c)];
            if raw_ls >= T::lit(MIN_LOG_SCALE) {
                grad[layout.log_scale_at(k, c)] = d_mass[c] * bm.d_log_scale;
            }
            if layout.coupled() {
                let dtanh = |j: usize| {
                    let t = params.coeff(k, j);
                    T::one() - t * t
                };
                match c {
                    1 => grad[layout.coeff_at(k, 0)] = d_mean * dtanh(0) * observed[0],
                    2 => {
                        grad[layout.coeff_at(k, 1)] = d_mean * dtanh(1) * observed[0];
                        grad[layout.coeff_at(k, 2)] = d_mean * dtanh(2) * observed[1];
                    }
                    _ => {}
                }
            }
        }
    }
    (out, grad)
}

/// Draws one pixel: a component index from the mixture weights, then each
/// channel in turn from its logistic, with means coupled to the channels
/// already drawn. Samples are clamped to [-1, 1] and snapped to the nearest
/// level.
pub fn dlm_sample<T: Real, R: Rng + ?Sized>(
    params: &MixtureParams<T>,
    alphabet: PixelAlphabet,
    rng: &mut R,
) -> Vec<u8> {
    let layout = params.layout;
    let weights: Vec<f64> = params
        .log_weights()
        .iter()
        .map(|w| w.to_f64().unwrap().exp())
        .collect();
    let u: f64 = rng.gen();
    let mut k = layout.mixtures - 1;
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            k = i;
            break;
        }
    }
    let mut drawn: Vec<T> = Vec::with_capacity(layout.channels);
    let mut pixel = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        let mean = params.coupled_mean(k, c, &drawn).to_f64().unwrap();
        let scale = params.log_scale(k, c).to_f64().unwrap().exp();
        let u = loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        let x = mean + scale * (u.ln() - (-u).ln_1p());
        let v = alphabet.quantize(x);
        drawn.push(alphabet.normalize(v));
        pixel.push(v);
    }
    pixel
}

/// Converts a total negative log-likelihood in nats into bits per dimension.
pub fn bits_per_dim(
    total_nll_nats: f64,
    n_images: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<f64, LikelihoodError> {
    let dims = n_images * c * h * w;
    if dims == 0 {
        return Err(LikelihoodError::Argument(format!(
            "zero dimensions (n={n_images}, c={c}, h={h}, w={w})"
        )));
    }
    Ok(total_nll_nats / (dims as f64 * std::f64::consts::LN_2))
}

struct DlmLogProb {
    layout: MixtureLayout,
    alphabet: PixelAlphabet,
    pixels: Vec<u8>,
}

impl<T: Real> Function<T> for DlmLogProb {
    fn name(&self) -> &'static str {
        "dlm_log_prob"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>> {
        let head = inputs[0];
        let s = output.shape();
        let (n, cc, plane) = (s[0], s[1], s[2] * s[3]);
        let width = self.layout.width();
        let mut grad = vec![T::zero(); head.len()];
        let mut pixel = vec![0u8; cc];
        let mut up = vec![T::zero(); cc];
        for b in 0..n {
            for pos in 0..plane {
                for c in 0..cc {
                    pixel[c] = self.pixels[(b * cc + c) * plane + pos];
                    up[c] = grad_out[(b * cc + c) * plane + pos];
                }
                let params = MixtureParams::gather(self.layout, head.values(), b, pos, plane);
                let (_, g) = evaluate(&params, &pixel, self.alphabet, Some(&up));
                for (p, gv) in g.into_iter().enumerate() {
                    grad[(b * width + p) * plane + pos] = gv;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Per-subpixel conditional log-probabilities `[N,C,H,W]` of integer
/// `pixels` (flat `[N,C,H,W]`) under the head output `[N,width,H,W]`.
pub fn dlm_log_prob<T: Real>(
    graph: &mut Graph<T>,
    head: Var,
    pixels: &[u8],
    layout: MixtureLayout,
    alphabet: PixelAlphabet,
) -> Result<Var, LikelihoodError> {
    let s = graph.shape(head).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            op: "dlm_log_prob",
            expected: 4,
            got: s.len(),
        }
        .into());
    }
    if s[1] != layout.width() {
        return Err(TensorError::Dimension {
            op: "dlm_log_prob",
            axis: 1,
            expected: layout.width(),
            got: s[1],
        }
        .into());
    }
    let (n, cc, plane) = (s[0], layout.channels, s[2] * s[3]);
    if pixels.len() != n * cc * plane {
        return Err(TensorError::Dimension {
            op: "dlm_log_prob",
            axis: 0,
            expected: n * cc * plane,
            got: pixels.len(),
        }
        .into());
    }
    for &v in pixels {
        alphabet.check(v)?;
    }
    let values = graph.values(head);
    let mut out = vec![T::zero(); n * cc * plane];
    let mut pixel = vec![0u8; cc];
    for b in 0..n {
        for pos in 0..plane {
            for c in 0..cc {
                pixel[c] = pixels[(b * cc + c) * plane + pos];
            }
            let params = MixtureParams::gather(layout, values, b, pos, plane);
            let (lp, _) = evaluate(&params, &pixel, alphabet, None);
            for c in 0..cc {
                out[(b * cc + c) * plane + pos] = lp[c];
            }
        }
    }
    let tensor = Tensor::new(vec![n, cc, s[2], s[3]], out)?;
    let func = DlmLogProb {
        layout,
        alphabet,
        pixels: pixels.to_vec(),
    };
    Ok(graph.custom(&[head], tensor, Box::new(func))?)
}
