mod common;

use common::{gradcheck, random_tensor, rng};
use pixelsnail::likelihood::{dlm_log_prob, MixtureLayout, PixelAlphabet};
use pixelsnail::tensor::{Padding, UnaryFn};
use rand::Rng;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-5;
/// Central differences of a summed log-likelihood carry absolute noise near
/// `eps * |L| / STEP`, about 1e-9 here, so tiny entries are judged absolutely.
const DLM_FLOOR: f64 = 1e-4;

fn assert_close(name: &str, err: f64) {
    assert!(err <= TOL, "{name}: max relative error {err:e}");
}

#[test]
fn conv2d_all_paddings() {
    let mut r = rng(1);
    for pad in [
        Padding::NONE,
        Padding::new(1, 0, 1, 1),
        Padding::new(2, 0, 2, 0),
        Padding::new(1, 1, 1, 1),
    ] {
        let inputs = [
            random_tensor(&[2, 3, 4, 5], &mut r, 1.0),
            random_tensor(&[4, 3, 2, 3], &mut r, 1.0),
            random_tensor(&[4], &mut r, 1.0),
        ];
        let err = gradcheck(
            &inputs,
            |g, v| g.conv2d(v[0], v[1], v[2], pad).unwrap(),
            STEP,
            FLOOR,
        );
        assert_close("conv2d", err);
    }
}

#[test]
fn pointwise_linear() {
    let mut r = rng(2);
    let inputs = [
        random_tensor(&[2, 3, 2, 2], &mut r, 1.0),
        random_tensor(&[5, 3], &mut r, 1.0),
        random_tensor(&[5], &mut r, 1.0),
    ];
    assert_close(
        "linear",
        gradcheck(
            &inputs,
            |g, v| g.pointwise_linear(v[0], v[1], v[2]).unwrap(),
            STEP,
            FLOOR,
        ),
    );
}

#[test]
fn unary_functions() {
    for f in [
        UnaryFn::Sigmoid,
        UnaryFn::Tanh,
        UnaryFn::Elu,
        UnaryFn::Exp,
        UnaryFn::Negate,
    ] {
        let inputs = [random_tensor(&[3, 4], &mut rng(3), 2.0)];
        assert_close(
            &format!("{f:?}"),
            gradcheck(&inputs, |g, v| g.unary(v[0], f).unwrap(), STEP, FLOOR),
        );
    }
    let mut positive = random_tensor(&[3, 4], &mut rng(4), 1.0);
    positive
        .values_mut()
        .iter_mut()
        .for_each(|x| *x = x.abs() + 0.2);
    assert_close(
        "log",
        gradcheck(
            &[positive],
            |g, v| g.unary(v[0], UnaryFn::Log).unwrap(),
            STEP,
            FLOOR,
        ),
    );
}

#[test]
fn binary_and_scaling() {
    let mut r = rng(5);
    let inputs = [
        random_tensor(&[2, 3], &mut r, 1.0),
        random_tensor(&[2, 3], &mut r, 1.0),
    ];
    assert_close(
        "add",
        gradcheck(&inputs, |g, v| g.add(v[0], v[1]).unwrap(), STEP, FLOOR),
    );
    assert_close(
        "mul",
        gradcheck(&inputs, |g, v| g.mul(v[0], v[1]).unwrap(), STEP, FLOOR),
    );
    assert_close(
        "mul self",
        gradcheck(&inputs[..1], |g, v| g.mul(v[0], v[0]).unwrap(), STEP, FLOOR),
    );
    assert_close(
        "scale",
        gradcheck(
            &inputs[..1],
            |g, v| g.scale(v[0], -2.5).unwrap(),
            STEP,
            FLOOR,
        ),
    );
    assert_close(
        "sum",
        gradcheck(&inputs[..1], |g, v| g.sum(v[0]).unwrap(), STEP, FLOOR),
    );
}

#[test]
fn shifts_and_channel_plumbing() {
    let mut r = rng(6);
    let x = random_tensor(&[2, 3, 3, 4], &mut r, 1.0);
    let y = random_tensor(&[2, 2, 3, 4], &mut r, 1.0);
    assert_close(
        "shift2d",
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| g.shift2d(v[0], 1, 2).unwrap(),
            STEP,
            FLOOR,
        ),
    );
    assert_close(
        "raster_shift",
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| g.raster_shift(v[0], 5).unwrap(),
            STEP,
            FLOOR,
        ),
    );
    assert_close(
        "concat",
        gradcheck(
            &[x.clone(), y],
            |g, v| g.concat_channels(&[v[0], v[1], v[0]]).unwrap(),
            STEP,
            FLOOR,
        ),
    );
    assert_close(
        "slice",
        gradcheck(
            std::slice::from_ref(&x),
            |g, v| g.slice_channels(v[0], 1, 2).unwrap(),
            STEP,
            FLOOR,
        ),
    );
    assert_close(
        "reshape",
        gradcheck(
            &[x],
            |g, v| g.reshape(v[0], &[2, 3, 12]).unwrap(),
            STEP,
            FLOOR,
        ),
    );
}

#[test]
fn batch_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut r = rng(7);
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let inputs = [
            random_tensor(&a_shape, &mut r, 1.0),
            random_tensor(&b_shape, &mut r, 1.0),
        ];
        let err = gradcheck(
            &inputs,
            |g, v| g.batch_matmul(v[0], v[1], ta, tb).unwrap(),
            STEP,
            FLOOR,
        );
        assert_close(&format!("matmul {ta} {tb}"), err);
    }
}

#[test]
fn masked_softmax_with_empty_rows() {
    let logits = random_tensor(&[2, 4, 4], &mut rng(8), 2.0);
    let mask: Vec<bool> = (0..16).map(|i| i % 4 < i / 4).collect();
    assert_close(
        "softmax",
        gradcheck(
            &[logits],
            |g, v| g.masked_softmax(v[0], &mask).unwrap(),
            STEP,
            FLOOR,
        ),
    );
}

#[test]
fn dropout_with_fixed_mask() {
    let x = random_tensor(&[2, 3, 4], &mut rng(9), 1.0);
    let err = gradcheck(
        &[x],
        |g, v| g.dropout(v[0], 0.4, true, &mut rng(10)).unwrap(),
        STEP,
        FLOOR,
    );
    assert_close("dropout", err);
}

fn dlm_check(channels: usize, depth: u32, seed: u64) {
    let layout = MixtureLayout::new(3, channels).unwrap();
    let alphabet = PixelAlphabet::new(depth).unwrap();
    let mut r = rng(seed);
    let head = random_tensor(&[2, layout.width(), 2, 3], &mut r, 1.5);
    let pixels: Vec<u8> = (0..2 * channels * 6)
        .map(|_| r.gen_range(0..depth) as u8)
        .collect();
    let err = gradcheck(
        &[head],
        |g, v| dlm_log_prob(g, v[0], &pixels, layout, alphabet).unwrap(),
        STEP,
        DLM_FLOOR,
    );
    assert_close(&format!("dlm C={channels} D={depth}"), err);
}

#[test]
fn dlm_log_prob_grayscale() {
    dlm_check(1, 16, 11);
    dlm_check(1, 2, 12);
}

#[test]
fn dlm_log_prob_rgb() {
    dlm_check(3, 256, 13);
    dlm_check(3, 4, 14);
}
