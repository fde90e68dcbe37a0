//! Reverse-mode gradients against central finite differences in f64.
//!
//! Inputs are registered as named parameters so that input and weight
//! gradients are read back the same way. Small problems check every
//! coordinate; full-size back-ends and the end-to-end model check a random
//! sample of coordinates per seed. Each case returns the worst relative
//! error over all of its seeds.

use asd_core::backends::{lstm, tc, Readout};
use asd_core::data::{generate_synthetic, make_examples, SyntheticConfig};
use asd_core::encoders::{EncoderConfig, Encoders, Preset};
use asd_core::model::PreparedTrack;
use asd_core::numcore::{apply_layer, max_relative_error, uniform, LayerSpec, ParamSet, Tape, Var};
use asd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[allow(dead_code)]
pub const CASES: &[(&str, fn() -> f64)] = &[
    ("conv2d", conv2d),
    ("conv3d", conv3d),
    ("maxpool2d", maxpool2d),
    ("relu", relu),
    ("linear", linear),
    ("fold_time", fold_time),
    ("flatten", flatten),
    ("tensor_ops", tensor_ops),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("blstm_small", blstm_small),
    ("tc_small", tc_small),
    ("blstm_full_size", blstm_full_size),
    ("tc_full_size", tc_full_size),
    ("encoders_to_loss", encoders_to_loss),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Max relative error between backprop and finite differences over all
/// coordinates, or over `sample` random ones when given.
pub fn gradient_error<F>(params: &ParamSet<f64>, sample: Option<(usize, u64)>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamSet<f64>) -> Result<Var<'t, f64>>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, &analytic).unwrap();
    tape.backward(loss).unwrap().write_to(&mut analytic).unwrap();

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    if let Some((n, seed)) = sample {
        let mut r = rng(seed ^ 0x5eed);
        coords = (0..n).map(|_| coords[r.random_range(0..coords.len())].clone()).collect();
    }

    let eval = |p: &ParamSet<f64>| -> f64 {
        let tape = Tape::inference();
        f(&tape, p).unwrap().value()[0]
    };
    let mut probe = params.clone();
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for (name, i) in coords {
        let orig = probe.get(&name).unwrap().data()[i];
        probe.get_mut(&name).unwrap().data_mut()[i] = orig + EPS;
        let up = eval(&probe);
        probe.get_mut(&name).unwrap().data_mut()[i] = orig - EPS;
        let down = eval(&probe);
        probe.get_mut(&name).unwrap().data_mut()[i] = orig;
        want.push((up - down) / (2.0 * EPS));
        got.push(analytic.get(&name).unwrap().grad().map_or(0.0, |g| g[i]));
    }
    max_relative_error(&got, &want, FLOOR)
}

/// `sum(out ⊙ mix)` with a fixed random `mix`, so every output matters differently.
fn weighted_sum<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    let mix = uniform::<f64>(&shape, 1.0, &mut rng(seed ^ 0xabc));
    let m = tape.constant(&shape, mix.into_data())?;
    out.mul(&m)?.sum()
}

fn over_seeds(mut case: impl FnMut(u64) -> f64) -> f64 {
    (0..SEEDS).map(&mut case).fold(0.0, f64::max)
}

fn layer_case(spec: LayerSpec, input: &[usize]) -> f64 {
    over_seeds(|seed| {
        let mut r = rng(seed);
        let mut params = ParamSet::<f64>::new();
        params.insert("input", uniform(input, 1.0, &mut r)).unwrap();
        spec.init("layer", input, &mut r, &mut params).unwrap();
        gradient_error(&params, None, |tape, p| {
            let x = tape.param(p, "input")?;
            let y = apply_layer(tape, &spec, "layer", p, x)?;
            weighted_sum(tape, y, seed)
        })
    })
}

pub fn conv2d() -> f64 {
    layer_case(LayerSpec::conv2d(4, 3, 2, 1), &[2, 3, 7, 7]).max(layer_case(LayerSpec::conv2d(3, 5, 1, 0), &[1, 2, 6, 8]))
}

pub fn conv3d() -> f64 {
    let spec = LayerSpec::Conv3d {
        out_channels: 3,
        kernel: [3, 3, 3],
        stride: [1, 2, 2],
        pad: [1, 1, 0],
    };
    layer_case(spec, &[2, 2, 5, 6, 6])
}

pub fn maxpool2d() -> f64 {
    layer_case(LayerSpec::maxpool([3, 3], [2, 2]), &[2, 3, 7, 7])
        .max(layer_case(LayerSpec::maxpool([1, 2], [1, 2]), &[1, 2, 4, 6]))
}

pub fn relu() -> f64 {
    layer_case(LayerSpec::Relu, &[3, 7])
}

pub fn linear() -> f64 {
    layer_case(LayerSpec::Linear { out_dim: 5 }, &[4, 6])
}

pub fn fold_time() -> f64 {
    layer_case(LayerSpec::FoldTime, &[2, 3, 2, 4, 4])
}

pub fn flatten() -> f64 {
    layer_case(LayerSpec::Flatten, &[2, 3, 4])
}

/// Elementwise nonlinearities, slicing, concatenation, reshapes and matmul in one graph.
pub fn tensor_ops() -> f64 {
    over_seeds(|seed| {
        let mut r = rng(seed);
        let mut params = ParamSet::<f64>::new();
        params.insert("a", uniform(&[3, 4], 1.5, &mut r)).unwrap();
        params.insert("b", uniform(&[3, 4], 1.5, &mut r)).unwrap();
        params.insert("m", uniform(&[4, 2], 1.0, &mut r)).unwrap();
        gradient_error(&params, None, |tape, p| {
            let a = tape.param(p, "a")?;
            let b = tape.param(p, "b")?;
            let m = tape.param(p, "m")?;
            let s = a.sigmoid()?.mul(&b.tanh()?)?.sub(&b.scale(0.3)?)?;
            let joined = tape.concat(&[s.narrow(1, 1, 2)?, a.narrow(1, 0, 2)?], 0)?;
            let prod = joined.reshape(&[3, 4])?.matmul(&m)?;
            let spread = tape.constant(&[3, 1], vec![1.0; 3])?.matmul(&prod.mean()?.reshape(&[1, 1])?)?;
            let logits = prod.add(&spread.matmul(&tape.constant(&[1, 2], vec![1.0, -1.0])?)?)?;
            let ce = logits.softmax_cross_entropy(&[0, 1, 1])?;
            ce.add(&weighted_sum(tape, s, seed)?.scale(0.1)?)
        })
    })
}

pub fn softmax_cross_entropy() -> f64 {
    over_seeds(|seed| {
        let mut params = ParamSet::<f64>::new();
        params.insert("logits", uniform(&[5, 2], 4.0, &mut rng(seed))).unwrap();
        gradient_error(&params, None, |tape, p| {
            tape.param(p, "logits")?.softmax_cross_entropy(&[1, 0, 0, 1, 1])
        })
    })
}

#[derive(Clone, Copy)]
enum Backend {
    Lstm,
    Tc,
}

fn backend_logits<'t>(
    tape: &'t Tape<f64>,
    p: &ParamSet<f64>,
    kind: Backend,
    audio: Var<'t, f64>,
    video: Var<'t, f64>,
    mode: Readout,
) -> Result<Var<'t, f64>> {
    match kind {
        Backend::Lstm => lstm::logits(tape, p, audio, video, mode),
        Backend::Tc => tc::logits(tape, p, audio, video, mode),
    }
}

fn backend_init(kind: Backend, dim: usize, width: usize, r: &mut ChaCha8Rng) -> ParamSet<f64> {
    match kind {
        Backend::Lstm => lstm::init(dim, width, r).unwrap(),
        Backend::Tc => tc::init(dim, width, r).unwrap(),
    }
}

/// Odd-length sequences use the centre readout, even-length ones the mean.
fn backend_seed(kind: Backend, dim: usize, width: usize, seed: u64, steps: usize, sample: Option<usize>) -> f64 {
    let mode = if steps % 2 == 1 { Readout::Center } else { Readout::Mean };
    let mut r = rng(seed);
    let mut params = backend_init(kind, dim, width, &mut r);
    params.insert("audio_in", uniform(&[2, steps, dim], 1.0, &mut r)).unwrap();
    params.insert("video_in", uniform(&[2, steps, dim], 1.0, &mut r)).unwrap();
    gradient_error(&params, sample.map(|n| (n, seed)), |tape, p| {
        let a = tape.param(p, "audio_in")?;
        let v = tape.param(p, "video_in")?;
        backend_logits(tape, p, kind, a, v, mode)?.softmax_cross_entropy(&[1, 0])
    })
}

pub fn blstm_small() -> f64 {
    over_seeds(|seed| backend_seed(Backend::Lstm, 6, 4, seed, 5, None).max(backend_seed(Backend::Lstm, 6, 4, seed, 4, None)))
}

pub fn tc_small() -> f64 {
    over_seeds(|seed| backend_seed(Backend::Tc, 6, 4, seed, 5, None).max(backend_seed(Backend::Tc, 6, 4, seed, 4, None)))
}

pub fn blstm_full_size() -> f64 {
    over_seeds(|seed| backend_seed(Backend::Lstm, 512, lstm::HIDDEN, seed, 5 - seed as usize % 2, Some(24)))
}

pub fn tc_full_size() -> f64 {
    over_seeds(|seed| backend_seed(Backend::Tc, 512, tc::FILTERS, seed, 5 - seed as usize % 2, Some(24)))
}

/// Tiny encoders feeding a narrow back-end, differentiated from the loss
/// down to the first convolution.
pub fn encoders_to_loss() -> f64 {
    let size = 67;
    let cfg = SyntheticConfig {
        num_tracks: 1,
        frames_per_track: 12,
        size,
        clip_len: 5,
        ..SyntheticConfig::default()
    };
    let track = PreparedTrack::new(generate_synthetic(&cfg, 4).unwrap().remove(0)).unwrap();
    let examples = make_examples(&track.bundle, 7).unwrap();
    let clips = [examples[3].clip(&track.bundle, &track.cepstra), examples[8].clip(&track.bundle, &track.cepstra)];
    let encoders = Encoders::new(EncoderConfig {
        preset: Preset::Tiny,
        resolution: size,
    })
    .unwrap();
    over_seeds(|seed| {
        let kind = if seed % 2 == 0 { Backend::Lstm } else { Backend::Tc };
        let mut r = rng(seed);
        let mut params: ParamSet<f64> = encoders.init(&mut r).unwrap();
        params.extend(backend_init(kind, 512, 16, &mut r)).unwrap();
        gradient_error(&params, Some((16, seed)), |tape, p| {
            let (a, v) = encoders.embed_clips(tape, p, &clips)?;
            backend_logits(tape, p, kind, a, v, Readout::Center)?.softmax_cross_entropy(&[1, 0])
        })
    })
}
