//! Two-layer bidirectional LSTM per stream.

use rand::Rng;

use super::{readout, Readout, STREAMS};
use crate::error::{Error, Result};
use crate::numcore::{uniform, ParamSet, Scalar, Tape, Var};

pub const PREFIX: &str = "lstm_backend";
pub const HIDDEN: usize = 128;
pub const LAYERS: usize = 2;
pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

pub fn cell_name(stream: &str, layer: usize, dir: &str) -> String {
    format!("{PREFIX}.{stream}.l{layer}.{dir}")
}

/// Gate order within the `4·hidden` rows is input, forget, cell, output.
pub fn init<T: Scalar>(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    for stream in STREAMS {
        for layer in 0..LAYERS {
            let din = if layer == 0 { input_dim } else { 2 * hidden };
            for dir in DIRECTIONS {
                let name = cell_name(stream, layer, dir);
                p.insert(format!("{name}.w_ih"), uniform(&[4 * hidden, din], 1.0 / (din as f64).sqrt(), rng))?;
                let bh = 1.0 / (hidden as f64).sqrt();
                p.insert(format!("{name}.w_hh"), uniform(&[4 * hidden, hidden], bh, rng))?;
                p.insert(format!("{name}.bias"), uniform(&[4 * hidden], bh, rng))?;
            }
        }
    }
    let din = 2 * STREAMS.len() * hidden;
    let b = 1.0 / (din as f64).sqrt();
    p.insert(format!("{PREFIX}.classifier.weight"), uniform(&[2, din], b, rng))?;
    p.insert(format!("{PREFIX}.classifier.bias"), uniform(&[2], b, rng))?;
    Ok(p)
}

/// Runs one direction over `[B, L, D]`; returns per-step hidden states `[B, H]` in time order.
fn run_direction<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    name: &str,
    x: Var<'t, T>,
    reverse: bool,
) -> Result<Vec<Var<'t, T>>> {
    let w_ih = tape.param(params, &format!("{name}.w_ih"))?;
    let w_hh = tape.param(params, &format!("{name}.w_hh"))?;
    let bias = tape.param(params, &format!("{name}.bias"))?;
    let hidden = w_hh.shape()[1];
    let s = x.shape();
    let (batch, steps) = (s[0], s[1]);
    let proj = x.linear(&w_ih, Some(&bias))?;
    let mut h = tape.constant(&[batch, hidden], vec![T::zero(); batch * hidden])?;
    let mut c = h;
    let mut out = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let gates = proj
            .narrow(1, t, 1)?
            .reshape(&[batch, 4 * hidden])?
            .add(&h.linear(&w_hh, None)?)?;
        let i = gates.narrow(1, 0, hidden)?.sigmoid()?;
        let f = gates.narrow(1, hidden, hidden)?.sigmoid()?;
        let g = gates.narrow(1, 2 * hidden, hidden)?.tanh()?;
        let o = gates.narrow(1, 3 * hidden, hidden)?.sigmoid()?;
        c = f.mul(&c)?.add(&i.mul(&g)?)?;
        h = o.mul(&c.tanh()?)?;
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
}

/// Per-step `[B, L, 2H]` output of one stream's stacked BLSTM.
fn stream_outputs<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    stream: &str,
    x: Var<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    let s = x.shape();
    let (batch, steps) = (s[0], s[1]);
    let mut input = x;
    let mut steps_out = Vec::new();
    for layer in 0..LAYERS {
        let fwd = run_direction(tape, params, &cell_name(stream, layer, "fwd"), input, false)?;
        let bwd = run_direction(tape, params, &cell_name(stream, layer, "bwd"), input, true)?;
        steps_out = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| tape.concat(&[*f, *b], 1))
            .collect::<Result<Vec<_>>>()?;
        if layer + 1 < LAYERS {
            let width = steps_out[0].shape()[1];
            let stacked: Vec<Var<'t, T>> = steps_out
                .iter()
                .map(|v| v.reshape(&[batch, 1, width]))
                .collect::<Result<_>>()?;
            input = tape.concat(&stacked, 1)?;
            debug_assert_eq!(input.shape(), vec![batch, steps, width]);
        }
    }
    Ok(steps_out)
}

/// `[B, 2]` logits from `[B, L, D]` audio and video embeddings.
pub fn logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &ParamSet<T>,
    audio: Var<'t, T>,
    video: Var<'t, T>,
    mode: Readout,
) -> Result<Var<'t, T>> {
    let (sa, sv) = (audio.shape(), video.shape());
    if sa.len() != 3 || sv.len() != 3 {
        return Err(Error::dim("blstm", 0, "inputs must be [batch, steps, features]"));
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
