//! Direct reimplementations of the two smoothers and a sweep comparing them
//! with the library on random tracks.

use asd_core::postprocess::{median_smooth, wiener_smooth, window_frames, ScoreTrack, DEFAULT_WINDOW_SECONDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn padded_window(x: &[f64], i: usize, w: usize) -> Vec<f64> {
    let half = w as i64 / 2;
    (i as i64 - half..=i as i64 + half)
        .map(|j| x[j.clamp(0, x.len() as i64 - 1) as usize])
        .collect()
}

pub fn median_by_sorting(x: &[f64], w: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut v = padded_window(x, i, w);
            v.sort_by(f64::total_cmp);
            v[w / 2]
        })
        .collect()
}

/// `mean + max(var − noise, 0) / max(var, noise) · (x − mean)` with the noise
/// power taken as the average local variance, clipped to [0, 1].
pub fn wiener_direct(x: &[f64], w: usize) -> Vec<f64> {
    let windows: Vec<Vec<f64>> = (0..x.len()).map(|i| padded_window(x, i, w)).collect();
    let means: Vec<f64> = windows.iter().map(|v| v.iter().sum::<f64>() / w as f64).collect();
    let vars: Vec<f64> = windows
        .iter()
        .zip(&means)
        .map(|(v, m)| v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / w as f64)
        .collect();
    let noise = vars.iter().sum::<f64>() / x.len() as f64;
    (0..x.len())
        .map(|i| {
            let denom = vars[i].max(noise);
            let gain = if denom > 0.0 { (vars[i] - noise).max(0.0) / denom } else { 0.0 };
            (means[i] + gain * (x[i] - means[i])).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Debug)]
pub struct FilterReport {
    pub tracks: usize,
    pub median_mismatches: usize,
    pub wiener_max_abs_error: f64,
    pub constants_fixed: bool,
}

/// Random tracks of length 1..=200 at the default window; every third track
/// is quantised to a few levels so that windows contain ties.
pub fn sweep(seed: u64, tracks: usize) -> FilterReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = window_frames(DEFAULT_WINDOW_SECONDS).unwrap();
    let mut report = FilterReport {
        tracks: 0,
        median_mismatches: 0,
        wiener_max_abs_error: 0.0,
        constants_fixed: true,
    };
    for k in 0..tracks {
        let n = rng.random_range(1..=200);
        let scores: Vec<f64> = if k % 3 == 0 {
            (0..n).map(|_| f64::from(rng.random_range(0..4u8)) / 3.0).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let track = ScoreTrack::from_scores("e", 0.0, scores.clone()).unwrap();
        let median = median_smooth(&track, DEFAULT_WINDOW_SECONDS).unwrap();
        if median.scores() != median_by_sorting(&scores, w).as_slice() {
            report.median_mismatches += 1;
        }
        let wiener = wiener_smooth(&track, DEFAULT_WINDOW_SECONDS).unwrap();
        for (a, b) in wiener.scores().iter().zip(wiener_direct(&scores, w)) {
            report.wiener_max_abs_error = report.wiener_max_abs_error.max((a - b).abs());
        }
        report.tracks += 1;
    }
    for c in [0.0, 0.13, 0.5, 0.77, 1.0] {
        for n in [1, 7, 60] {
            let track = ScoreTrack::from_scores("e", 0.0, vec![c; n]).unwrap();
            let fixed = |t: ScoreTrack| t.scores().iter().all(|&v| v == c);
            report.constants_fixed &= fixed(median_smooth(&track, DEFAULT_WINDOW_SECONDS).unwrap());
            report.constants_fixed &= fixed(wiener_smooth(&track, DEFAULT_WINDOW_SECONDS).unwrap());
        }
    }
    report
}
