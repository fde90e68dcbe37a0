//! Sequence classifiers over paired audio/video embedding sequences.
//!
//! Each back-end processes the two streams separately, reads one feature
//! vector per stream (by default at the centre step `⌊(L−1)/2⌋`),
//! concatenates audio then video, and maps the result to two logits:
//! class 0 not speaking, class 1 speaking.

pub mod lstm;
pub mod tc;

use crate::encoders::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Scalar, Tape, Var};

pub const STREAMS: [&str; 2] = ["audio", "video"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    #[default]
    Center,
    /// Mean over steps; kept for ablations.
    Mean,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Readout::Center),
            "mean" => Ok(Readout::Mean),
            other => Err(Error::Config(format!("unknown readout `{other}`"))),
        }
    }
}

pub fn center_step(len: usize) -> usize {
    (len - 1) / 2
}

pub(crate) fn readout<'t, T: Scalar>(steps: &[Var<'t, T>], mode: Readout) -> Result<Var<'t, T>> {
    if steps.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    match mode {
        Readout::Center => Ok(steps[center_step(steps.len())]),
        Readout::Mean => {
            let mut acc = steps[0];
            for s in &steps[1..] {
                acc = acc.add(s)?;
            }
            acc.scale(T::one() / T::of(steps.len() as f64))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Lstm,
    Tc,
    /// Inference only: equal-weight mean of the two members' probabilities.
    Ensemble,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(BackendKind::Lstm),
            "tc" => Ok(BackendKind::Tc),
            "ensemble" | "both" => Ok(BackendKind::Ensemble),
            other => Err(Error::Config(format!("unknown back-end `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipLogits {
    pub logits: [f64; 2],
    pub center_frame: i64,
}

impl ClipLogits {
    pub fn speaking_probability(&self) -> f64 {
        speaking_probability(self.logits)
    }
}

/// Class-1 softmax probability of a logit pair.
pub fn speaking_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

fn sequences_to_vars<'t, T: Scalar>(
    tape: &'t Tape<T>,
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if audio.cols() != video.cols() {
        return Err(Error::Alignment {
            audio: audio.cols(),
            video: video.cols(),
        });
    }
    if audio.cols() == 0 {
        return Err(Error::Input("empty embedding sequence".into()));
    }
    let conv = |s: &EmbeddingSequence| -> Vec<T> {
        s.as_time_major().iter().map(|&v| T::of(f64::from(v))).collect()
    };
    let shape = [1, audio.cols(), audio.rows()];
    Ok((tape.constant(&shape, conv(audio))?, tape.constant(&shape, conv(video))?))
}

fn clip_logits<T: Scalar>(
    kind: BackendKind,
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
    params: &ParamSet<T>,
    mode: Readout,
) -> Result<ClipLogits> {
    let tape = Tape::inference();
    let (a, v) = sequences_to_vars(&tape, audio, video)?;
    let out = match kind {
        BackendKind::Lstm => lstm::logits(&tape, params, a, v, mode)?,
        BackendKind::Tc => tc::logits(&tape, params, a, v, mode)?,
        BackendKind::Ensemble => {
            return Err(Error::Config("the ensemble has no logits of its own".into()))
        }
    };
    let val = out.value();
    Ok(ClipLogits {
        logits: [val[0].to_f64().unwrap_or(f64::NAN), val[1].to_f64().unwrap_or(f64::NAN)],
        center_frame: video.center_frame_indices[center_step(video.cols())],
    })
}

pub fn blstm_forward<T: Scalar>(
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
    params: &ParamSet<T>,
    mode: Readout,
) -> Result<ClipLogits> {
    clip_logits(BackendKind::Lstm, audio, video, params, mode)
}

pub fn tc_forward<T: Scalar>(
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
    params: &ParamSet<T>,
    mode: Readout,
) -> Result<ClipLogits> {
    clip_logits(BackendKind::Tc, audio, video, params, mode)
}

/// Speaking probability from one back-end, or the mean of both for the ensemble.
pub fn predict_proba<T: Scalar>(
    kind: BackendKind,
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
    params: &ParamSet<T>,
    mode: Readout,
) -> Result<f64> {
    match kind {
        BackendKind::Ensemble => {
            let l = clip_logits(BackendKind::Lstm, audio, video, params, mode)?;
            let t = clip_logits(BackendKind::Tc, audio, video, params, mode)?;
            Ok(ensemble(&[l.speaking_probability(), t.speaking_probability()]))
        }
        k => Ok(clip_logits(k, audio, video, params, mode)?.speaking_probability()),
    }
}

/// Equal-weight mean of member probabilities.
pub fn ensemble(members: &[f64]) -> f64 {
    members.iter().sum::<f64>() / members.len() as f64
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::Stream;

    const D: usize = 512;

    fn seq(stream: Stream, cols: usize, rng: &mut impl Rng) -> EmbeddingSequence {
        let data = (0..cols * D).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingSequence::new(stream, data, (0..cols as i64).map(|j| j + 2).collect()).unwrap()
    }

    fn params(seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = lstm::init(D, lstm::HIDDEN, &mut rng).unwrap();
        p.extend(tc::init(D, tc::FILTERS, &mut rng).unwrap()).unwrap();
        p
    }

    #[test]
    fn uniform_logits_give_half() {
        assert_eq!(speaking_probability([0.0, 0.0]), 0.5);
        assert!((speaking_probability([3.0, 5.0]) - speaking_probability([1003.0, 1005.0])).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_mean() {
        assert!((ensemble(&[0.8, 0.6]) - 0.7).abs() < 1e-12);
        assert_eq!(ensemble(&[0.3, 0.3]), 0.3);
    }

    #[test]
    fn center_readout_for_nine_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, v) = (seq(Stream::Audio, 5, &mut rng), seq(Stream::Video, 5, &mut rng));
        let p = params(1);
        let l = blstm_forward(&a, &v, &p, Readout::Center).unwrap();
        assert_eq!(l.center_frame, 4);
        assert!(l.logits.iter().all(|x| x.is_finite()));
        let t = tc_forward(&a, &v, &p, Readout::Center).unwrap();
        assert_eq!(t.center_frame, 4);
        let e = predict_proba(BackendKind::Ensemble, &a, &v, &p, Readout::Center).unwrap();
        let mean = (l.speaking_probability() + t.speaking_probability()) / 2.0;
        assert!((e - mean).abs() < 1e-12);
        assert!(blstm_forward(&a, &v, &p, Readout::Mean).is_ok());
    }

    #[test]
    fn misaligned_streams_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, v) = (seq(Stream::Audio, 5, &mut rng), seq(Stream::Video, 4, &mut rng));
        let p = params(1);
        assert!(matches!(
            blstm_forward(&a, &v, &p, Readout::Center),
            Err(Error::Alignment { audio: 5, video: 4 })
        ));
        assert!(matches!(tc_forward(&a, &v, &p, Readout::Center), Err(Error::Alignment { .. })));
    }

    #[test]
    fn missing_member_params_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, v) = (seq(Stream::Audio, 3, &mut rng), seq(Stream::Video, 3, &mut rng));
        let only_lstm = params(2).with_prefix(lstm::PREFIX);
        assert!(matches!(
            predict_proba(BackendKind::Ensemble, &a, &v, &only_lstm, Readout::Center),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn logit_shift_invariance() {
        for (a, b) in [(0.3, -1.2), (5.0, 5.0), (-40.0, 2.0)] {
            let base = speaking_probability([a, b]);
            let shifted = speaking_probability([a + 17.5, b + 17.5]);
            assert!((base - shifted).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&base));
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// One LSTM step from zero state, written out directly.
    fn cell_from_zero(p: &ParamSet<f64>, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.w_ih")).unwrap();
        let b = p.get(&format!("{name}.bias")).unwrap().data();
        let (rows, din) = (w.shape()[0], w.shape()[1]);
        let h = rows / 4;
        let pre: Vec<f64> = (0..rows)
            .map(|r| b[r] + (0..din).map(|k| w.data()[r * din + k] * x[k]).sum::<f64>())
            .collect();
        (0..h)
            .map(|j| {
                let i = sigmoid(pre[j]);
                let g = pre[2 * h + j].tanh();
                let o = sigmoid(pre[3 * h + j]);
                o * (i * g).tanh()
            })
            .collect()
    }

    fn dense(p: &ParamSet<f64>, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.weight")).unwrap();
        let b = p.get(&format!("{name}.bias")).unwrap().data();
        let din = w.shape()[1];
        (0..w.shape()[0])
            .map(|r| b[r] + (0..din).map(|k| w.data()[r * din + k] * x[k]).sum::<f64>())
            .collect()
    }

    #[test]
    fn single_step_lstm_matches_direct_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, v) = (seq(Stream::Audio, 1, &mut rng), seq(Stream::Video, 1, &mut rng));
        let p = params(3);
        let got = blstm_forward(&a, &v, &p, Readout::Center).unwrap();
        assert_eq!(got.center_frame, 2);
        let mut joint = Vec::new();
        for (s, e) in [("audio", &a), ("video", &v)] {
            let x: Vec<f64> = e.column(0).iter().map(|&v| f64::from(v)).collect();
            let l0: Vec<f64> = [cell_from_zero(&p, &lstm::cell_name(s, 0, "fwd"), &x),
                cell_from_zero(&p, &lstm::cell_name(s, 0, "bwd"), &x)]
            .concat();
            joint.extend(cell_from_zero(&p, &lstm::cell_name(s, 1, "fwd"), &l0));
            joint.extend(cell_from_zero(&p, &lstm::cell_name(s, 1, "bwd"), &l0));
        }
        let want = dense(&p, "lstm_backend.classifier", &joint);
        for k in 0..2 {
            assert!((got.logits[k] - want[k]).abs() < 1e-10, "{:?} vs {want:?}", got.logits);
        }
    }

    #[test]
    fn single_column_tc_matches_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, v) = (seq(Stream::Audio, 1, &mut rng), seq(Stream::Video, 1, &mut rng));
        let p = params(4);
        let got = tc_forward(&a, &v, &p, Readout::Center).unwrap();
        let mut joint = Vec::new();
        for (s, e) in [("audio", &a), ("video", &v)] {
            let x: Vec<f64> = e.column(0).iter().map(|&v| f64::from(v)).collect();
            let x3 = [x.clone(), x.clone(), x].concat();
            let h: Vec<f64> = dense(&p, &format!("tc_backend.{s}.conv1"), &x3)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let h3 = [h.clone(), h.clone(), h].concat();
            joint.extend(dense(&p, &format!("tc_backend.{s}.conv2"), &h3));
        }
        let want = dense(&p, "tc_backend.classifier", &joint);
        for k in 0..2 {
            assert!((got.logits[k] - want[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn tc_constant_input_gives_constant_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let col: Vec<f32> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = col.iter().cycle().take(6 * D).map(|&v| f64::from(v)).collect();
        let p = params(5);
        let tape = Tape::inference();
        let x = tape.constant(&[1, 6, D], data).unwrap();
        let steps = tc::stream_outputs(&tape, &p, "audio", x).unwrap();
        let first = steps[0].value();
        for s in &steps[1..] {
            assert_eq!(*s.value(), *first);
        }
    }

    /// Swaps the two directions of every layer. Because each layer emits
    /// `[fwd, bwd]`, reversing time also swaps those halves, so the input
    /// columns of layer 2 and of the classifier are permuted to match.
    fn direction_swapped(p: &ParamSet<f64>) -> ParamSet<f64> {
        let mut out = p.clone();
        let h = lstm::HIDDEN;
        let swap_halves = |t: &crate::numcore::Tensor<f64>, block: usize| {
            let cols = t.shape()[1];
            let mut d = t.data().to_vec();
            for r in 0..t.shape()[0] {
                for start in (0..cols).step_by(2 * block) {
                    for k in 0..block {
                        d.swap(r * cols + start + k, r * cols + start + block + k);
                    }
                }
            }
            crate::numcore::Tensor::from_vec(t.shape(), d).unwrap()
        };
        for s in STREAMS {
            for layer in 0..lstm::LAYERS {
                for field in ["w_ih", "w_hh", "bias"] {
                    let f = format!("{}.{field}", lstm::cell_name(s, layer, "fwd"));
                    let b = format!("{}.{field}", lstm::cell_name(s, layer, "bwd"));
                    let (mut tf, mut tb) = (p.get(&b).unwrap().clone(), p.get(&f).unwrap().clone());
                    if layer > 0 && field == "w_ih" {
                        tf = swap_halves(&tf, h);
                        tb = swap_halves(&tb, h);
                    }
                    *out.get_mut(&f).unwrap() = tf;
                    *out.get_mut(&b).unwrap() = tb;
                }
            }
        }
        let cw = "lstm_backend.classifier.weight";
        *out.get_mut(cw).unwrap() = swap_halves(p.get(cw).unwrap(), h);
        out
    }

    #[test]
    fn time_reversal_with_direction_swap_is_invariant() {
        for (seed, len) in [(1u64, 1usize), (2, 3), (3, 5), (4, 7)] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (a, v) = (seq(Stream::Audio, len, &mut rng), seq(Stream::Video, len, &mut rng));
            let p = params(seed);
            let base = blstm_forward(&a, &v, &p, Readout::Center).unwrap();
            let flipped = blstm_forward(&a.reversed(), &v.reversed(), &direction_swapped(&p), Readout::Center).unwrap();
            for k in 0..2 {
                assert!(
                    (base.logits[k] - flipped.logits[k]).abs() < 1e-10,
                    "L={len}: {:?} vs {:?}",
                    base.logits,
                    flipped.logits
                );
            }
        }
    }
}
