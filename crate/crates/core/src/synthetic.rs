//! Random performances and prediction-like corruptions used to build
//! desk-scale training and test data.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{events_from_roll, PianoRoll, ProbRoll, DEFAULT_VELOCITY, KEY_BASE, KEY_TOP, NUM_KEYS};

/// Note and rest lengths, in frames, for [`random_performance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerformanceParams {
    pub min_note: usize,
    pub max_note: usize,
    pub min_rest: usize,
    pub max_rest: usize,
}

impl Default for PerformanceParams {
    fn default() -> Self {
        PerformanceParams {
            min_note: 3,
            max_note: 30,
            min_rest: 2,
            max_rest: 40,
        }
    }
}

/// `n` distinct pitches drawn uniformly from the keyboard, ascending.
pub fn pick_pitches(n: usize, seed: u64) -> Result<Vec<u8>> {
    let range = usize::from(KEY_TOP - KEY_BASE) + 1;
    if n > range {
        return Err(Error::domain(format!(
            "cannot pick {n} distinct pitches out of {range}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<u8> = sample(&mut rng, range, n)
        .into_iter()
        .map(|i| KEY_BASE + i as u8)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Independent alternating rest/press sequences on each of `pitches`.
pub fn random_performance(
    pitches: &[u8],
    num_frames: usize,
    params: &PerformanceParams,
    seed: u64,
) -> Result<PianoRoll> {
    if params.min_note == 0 || params.min_note > params.max_note || params.min_rest > params.max_rest {
        return Err(Error::domain(format!("invalid performance lengths {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roll = PianoRoll::zeros(NUM_KEYS, num_frames);
    for &p in pitches {
        if !(KEY_BASE..=KEY_TOP).contains(&p) {
            return Err(Error::domain(format!("pitch {p} outside {KEY_BASE}..={KEY_TOP}")));
        }
        let key = usize::from(p - KEY_BASE);
        let mut t = rng.random_range(0..=params.max_rest);
        while t < num_frames {
            let len = rng.random_range(params.min_note..=params.max_note);
            for f in t..(t + len).min(num_frames) {
                roll.set(key, f, true);
            }
            t += len + rng.random_range(params.min_rest.max(1)..=params.max_rest.max(1));
        }
    }
    Ok(roll)
}

/// How [`corrupt_roll`] degrades a clean roll into a noisy prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    /// Fraction of active cells switched off.
    pub dropout: f64,
    /// Notes at least this long lose their tail.
    pub truncate_min_len: usize,
    /// Share of a long note's frames removed from its end.
    pub truncate_fraction: f64,
    /// Probability range assigned to cells that stay active.
    pub on_range: (f32, f32),
    /// Probability range assigned to inactive cells.
    pub off_range: (f32, f32),
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption {
            dropout: 0.2,
            truncate_min_len: 8,
            truncate_fraction: 0.3,
            on_range: (0.6, 0.95),
            off_range: (0.0, 0.2),
        }
    }
}

impl Corruption {
    /// Keeps the active set intact; only the probability noise remains.
    pub fn clean() -> Self {
        Corruption {
            dropout: 0.0,
            truncate_fraction: 0.0,
            ..Corruption::default()
        }
    }
}

/// Prediction-like probability roll: sustained notes end early (as a decaying
/// key's sound outlasts what the video shows) and a fraction of active cells drop out.
pub fn corrupt_roll(gt: &PianoRoll, c: &Corruption, seed: u64) -> Result<ProbRoll> {
    if !(0.0..=1.0).contains(&c.dropout) || !(0.0..1.0).contains(&c.truncate_fraction) {
        return Err(Error::domain(format!("corruption rates out of range: {c:?}")));
    }
    let (on_lo, on_hi) = c.on_range;
    let (off_lo, off_hi) = c.off_range;
    if !(0.0 <= off_lo && off_lo <= off_hi && off_hi <= on_lo && on_lo <= on_hi && on_hi <= 1.0) {
        return Err(Error::domain(format!(
            "probability ranges must be ordered inside [0, 1]: {c:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = gt.clone();
    for ev in events_from_roll(gt, DEFAULT_VELOCITY) {
        let len = ev.duration_frames() as usize;
        if len >= c.truncate_min_len {
            let cut = (len as f64 * c.truncate_fraction).round() as usize;
            let key = usize::from(ev.pitch - gt.key_base());
            for f in (ev.offset_frame as usize - cut)..ev.offset_frame as usize {
                kept.set(key, f, false);
            }
        }
    }
    let data = ndarray::Array2::from_shape_fn((gt.num_keys(), gt.num_frames()), |(k, t)| {
        let on = kept.is_active(k, t) && !rng.random_bool(c.dropout);
        if on {
            rng.random_range(on_lo..=on_hi)
        } else {
            rng.random_range(off_lo..=off_hi)
        }
    });
    ProbRoll::from_array(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::frame_metrics;
    use crate::roll::binarize;

    #[test]
    fn pitches_distinct_and_in_range() {
        let p = pick_pitches(12, 4).unwrap();
        assert_eq!(p.len(), 12);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().all(|&x| (21..=108).contains(&x)));
        assert!(pick_pitches(89, 0).is_err());
    }

    #[test]
    fn performance_uses_only_given_pitches() {
        let roll = random_performance(&[40, 60], 500, &PerformanceParams::default(), 1).unwrap();
        for k in 0..NUM_KEYS {
            let active = (0..500).any(|t| roll.is_active(k, t));
            assert_eq!(active, k == 19 || k == 39);
        }
        assert_eq!(
            roll,
            random_performance(&[40, 60], 500, &PerformanceParams::default(), 1).unwrap()
        );
    }

    #[test]
    fn corruption_lowers_recall_not_precision() {
        let gt = random_performance(&[30, 50, 70], 400, &PerformanceParams::default(), 2).unwrap();
        let noisy = binarize(&corrupt_roll(&gt, &Corruption::default(), 3).unwrap(), 0.4).unwrap();
        let m = frame_metrics(&noisy, &gt).unwrap();
        assert_eq!(m.precision, 1.0);
        assert!(m.recall < 0.75 && m.recall > 0.4, "{}", m.recall);
        let clean = binarize(&corrupt_roll(&gt, &Corruption::clean(), 3).unwrap(), 0.4).unwrap();
        assert_eq!(clean, gt);
    }
}
