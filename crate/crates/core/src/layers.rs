//! Causal building blocks: the input stem, the gated residual block and the
//! masked attention block.
//!
//! Causal convolutions sum two branches so that no raster-preceding pixel is
//! left out of the receptive field:
//!
//! * the *down* branch sees only rows strictly above the output row, by
//!   shifting the input down one row before a top-padded convolution;
//! * the *down-right* branch sees the current row up to the output column
//!   (exclusive for the stem, inclusive inside blocks) and the rows above.

use rand::Rng;

use crate::tensor::{Graph, Padding, Real, Tensor, TensorError, Var};

/// Whether a causal convolution may see the input at its own position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalMode {
    /// Output at raster `t` depends on inputs `< t` only. Used by the stem.
    Strict,
    /// Output at raster `t` depends on inputs `<= t`. Used inside blocks,
    /// whose inputs are already shifted by the stem.
    Inclusive,
}

impl CausalMode {
    /// Kernel extents `(kh, kw)` of the down branch.
    pub fn down_kernel(self) -> (usize, usize) {
        match self {
            CausalMode::Strict => (3, 3),
            CausalMode::Inclusive => (2, 3),
        }
    }

    /// Kernel extents `(kh, kw)` of the down-right branch.
    pub fn down_right_kernel(self) -> (usize, usize) {
        match self {
            CausalMode::Strict => (3, 3),
            CausalMode::Inclusive => (2, 2),
        }
    }

    fn down_right_shift(self) -> usize {
        match self {
            CausalMode::Strict => 1,
            CausalMode::Inclusive => 0,
        }
    }
}

/// Graph handles of one two-branch causal convolution.
#[derive(Debug, Clone, Copy)]
pub struct CausalConvParams {
    pub down_kernel: Var,
    pub down_bias: Var,
    pub down_right_kernel: Var,
    pub down_right_bias: Var,
}

/// Graph handles of one attention block. The output projection has no bias
/// so that a query with empty context leaves its features untouched.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub key_weight: Var,
    pub key_bias: Var,
    pub value_weight: Var,
    pub value_bias: Var,
    pub query_weight: Var,
    pub query_bias: Var,
    pub out_weight: Var,
}

/// Shift that tolerates displacements past the edge (result is all zero).
fn shift_or_zero<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    down: usize,
    right: usize,
) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    if down >= s[2] || right >= s[3] {
        return Ok(g.constant(Tensor::zeros(&s)));
    }
    g.shift2d(x, down, right)
}

/// Two-branch causal convolution preserving spatial extents.
pub fn causal_conv<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &CausalConvParams,
    mode: CausalMode,
) -> Result<Var, TensorError> {
    let (dh, dw) = mode.down_kernel();
    let shifted = shift_or_zero(g, x, 1, 0)?;
    let down = g.conv2d(
        shifted,
        p.down_kernel,
        p.down_bias,
        Padding::new(dh - 1, 0, (dw - 1) / 2, dw / 2),
    )?;

    let (rh, rw) = mode.down_right_kernel();
    let shifted = match mode.down_right_shift() {
        0 => x,
        r => shift_or_zero(g, x, 0, r)?,
    };
    let down_right = g.conv2d(
        shifted,
        p.down_right_kernel,
        p.down_right_bias,
        Padding::new(rh - 1, 0, rw - 1, 0),
    )?;
    g.add(down, down_right)
}

/// Maps the normalized image to `F` feature channels whose value at raster
/// position `t` depends only on pixels before `t`.
pub fn causal_stem<T: Real>(
    g: &mut Graph<T>,
    image_norm: Var,
    params: &CausalConvParams,
) -> Result<Var, TensorError> {
    causal_conv(g, image_norm, params, CausalMode::Strict)
}

/// `R` gated residual repeats: `x <- x + a * sigmoid(b)` where `(a, b)` are
/// the channel halves of a causal convolution of `elu(x)`. Dropout follows
/// the first repeat's convolution.
pub fn gated_residual_block<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    repeats: &[CausalConvParams],
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let filters = g.shape(x)[1];
    let mut x = x;
    for (i, p) in repeats.iter().enumerate() {
        let u = g.elu(x)?;
        let mut c = causal_conv(g, u, p, CausalMode::Inclusive)?;
        if i == 0 && training && dropout_rate > 0.0 {
            c = g.dropout(c, dropout_rate, training, rng)?;
        }
        let a = g.slice_channels(c, 0, filters)?;
        let b = g.slice_channels(c, filters, filters)?;
        let gate = g.sigmoid(b)?;
        let update = g.mul(a, gate)?;
        x = g.add(x, update)?;
    }
    Ok(x)
}

/// Row and column coordinates normalized to [-1, 1], as `[1, 2, H, W]`.
/// A unit-length axis maps to 0.
pub fn positional_channels<T: Real>(h: usize, w: usize) -> Tensor<T> {
    positional_batch(1, h, w)
}

/// [`positional_channels`] repeated over a batch of `n`.
pub fn positional_batch<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let coord = |i: usize, extent: usize| {
        if extent == 1 {
            T::zero()
        } else {
            T::lit(2.0 * i as f64 / (extent - 1) as f64 - 1.0)
        }
    };
    let mut values = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for i in 0..h {
            values.extend((0..w).map(|_| coord(i, h)));
        }
        for _ in 0..h {
            values.extend((0..w).map(|j| coord(j, w)));
        }
    }
    Tensor::new(vec![n, 2, h, w], values).expect("positional shape")
}

/// `L x L` mask permitting query `t` to see keys `s < t`.
pub fn strictly_causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len < i / len).collect()
}

/// Single-head causal key/value lookup with a residual merge.
///
/// Keys and values read the features, the image delayed by one raster
/// position and the positional channels; queries read the features and the
/// positional channels.
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    image_norm: Var,
    positions: Var,
    p: &AttentionParams,
) -> Result<Var, TensorError> {
    let s = g.shape(features).to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let len = h * w;
    let key_dim = g.shape(p.key_weight)[0];
    let value_dim = g.shape(p.value_weight)[0];

    let delayed = g.raster_shift(image_norm, 1.min(len - 1))?;
    let kv_in = g.concat_channels(&[features, delayed, positions])?;
    let q_in = g.concat_channels(&[features, positions])?;

    let keys = g.pointwise_linear(kv_in, p.key_weight, p.key_bias)?;
    let values = g.pointwise_linear(kv_in, p.value_weight, p.value_bias)?;
    let queries = g.pointwise_linear(q_in, p.query_weight, p.query_bias)?;
    let keys = g.reshape(keys, &[n, key_dim, len])?;
    let values = g.reshape(values, &[n, value_dim, len])?;
    let queries = g.reshape(queries, &[n, key_dim, len])?;

    // scores[t, s] = q_t . k_s / sqrt(d_k)
    let scores = g.batch_matmul(queries, keys, true, false)?;
    let scores = g.scale(scores, T::lit(1.0 / (key_dim as f64).sqrt()))?;
    let weights = g.masked_softmax(scores, &strictly_causal_mask(len))?;
    // context[d, t] = sum_s v[d, s] * weights[t, s]
    let context = g.batch_matmul(values, weights, false, true)?;
    let context = g.reshape(context, &[n, value_dim, h, w])?;

    let zero_bias = g.constant(Tensor::zeros(&[s[1]]));
    let update = g.pointwise_linear(context, p.out_weight, zero_bias)?;
    g.add(features, update)
}
