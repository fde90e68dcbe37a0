//! Two temporal convolutions per stream, kernel 3 with edge-replication padding.

use rand::Rng;

use super::{readout, Readout, STREAMS};
use crate::error::{Error, Result};
use crate::numcore::{uniform, ParamSet, Scalar, Tape, Var};

pub const PREFIX: &str = "tc_backend";
pub const FILTERS: usize = 128;
pub const KERNEL: usize = 3;

/// Conv weights are `[filters, 3·in]`, taps ordered previous, current, next.
pub fn init<T: Scalar>(input_dim: usize, filters: usize, rng: &mut impl Rng) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    for stream in STREAMS {
        for (layer, din) in [(1, input_dim), (2, filters)] {
            let fan_in = KERNEL * din;
            let b = 1.0 / (fan_in as f64).sqrt();
            p.insert(format!("{PREFIX}.{stream}.conv{layer}.weight"), uniform(&[filters, fan_in], b, rng))?;
            p.insert(format!("{PREFIX}.{stream}.conv{layer}.bias"), uniform(&[filters], b, rng))?;
        }
    }
    let din = STREAMS.len() * filters;
    let b = 1.0 / (din as f64).sqrt();
    p.insert(format!("{PREFIX}.classifier.weight"), uniform(&[2, din], b, rng))?;
    p.insert(format!("{PREFIX}.classifier.bias"), uniform(&[2], b, rng))?;
    Ok(p)
}

/// Length-preserving kernel-3 convolution over `[B, L, D]`.
fn temporal_conv<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    name: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let steps = x.shape()[1];
    let padded = tape.concat(&[x.narrow(1, 0, 1)?, x, x.narrow(1, steps - 1, 1)?], 1)?;
    let taps = [
        padded.narrow(1, 0, steps)?,
        padded.narrow(1, 1, steps)?,
        padded.narrow(1, 2, steps)?,
    ];
    let unfolded = tape.concat(&taps, 2)?;
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    unfolded.linear(&w, Some(&b))
}

/// Per-step `[B, F]` outputs of one stream.
pub fn stream_outputs<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    stream: &str,
    x: Var<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    let h = temporal_conv(tape, params, &format!("{PREFIX}.{stream}.conv1"), x)?.relu()?;
    let y = temporal_conv(tape, params, &format!("{PREFIX}.{stream}.conv2"), h)?;
    let s = y.shape();
    (0..s[1])
        .map(|t| y.narrow(1, t, 1)?.reshape(&[s[0], s[2]]))
        .collect()
}

pub fn logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    audio: Var<'t, T>,
    video: Var<'t, T>,
    mode: Readout,
) -> Result<Var<'t, T>> {
    let (sa, sv) = (audio.shape(), video.shape());
    if sa.len() != 3 || sv.len() != 3 {
        return Err(Error::dim("tc", 0, "inputs must be [batch, steps, features]"));
    }
    if sa[1] != sv[1] {
        return Err(Error::Alignment {
            audio: sa[1],
            video: sv[1],
        });
    }
    let a = readout(&stream_outputs(tape, params, STREAMS[0], audio)?, mode)?;
    let v = readout(&stream_outputs(tape, params, STREAMS[1], video)?, mode)?;
    let joint = tape.concat(&[a, v], 1)?;
    let w = tape.param(params, &format!("{PREFIX}.classifier.weight"))?;
    let b = tape.param(params, &format!("{PREFIX}.classifier.bias"))?;
    joint.linear(&w, Some(&b))
}
