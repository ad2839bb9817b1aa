//! Synthetic top-view keyboard renderer.
//!
//! Produces 100x900 grayscale performances from a piano roll so the whole
//! pipeline can be exercised without real footage. Pressed keys darken while
//! active. An optional "hand" blob drifts along the keyboard and hides roughly
//! `occlusion` of the keys in each frame, covering the front part of the keys
//! (all of them at occlusion 1).

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frames::{FrameSource, GrayFrame, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};
use crate::roll::{PianoRoll, KEY_BASE, NUM_KEYS};

const WHITE: f32 = 0.92;
const WHITE_PRESSED: f32 = 0.62;
const BLACK: f32 = 0.28;
const BLACK_PRESSED: f32 = 0.06;
const GAP: f32 = 0.35;
const HAND: f32 = 0.5;
const WHITE_KEYS: usize = 52;

fn is_black(pitch: u8) -> bool {
    matches!(pitch % 12, 1 | 3 | 6 | 8 | 10)
}

/// Pixel geometry of the 88 keys at a given image size.
#[derive(Clone, Debug)]
pub struct KeyboardLayout {
    width: usize,
    height: usize,
    black_height: usize,
    /// Horizontal runs `(row_start, row_end, x0, x1)` owned by each key.
    regions: Vec<Vec<(usize, usize, usize, usize)>>,
    spans: Vec<(usize, usize)>,
    black: Vec<bool>,
}

impl KeyboardLayout {
    pub fn new(width: usize, height: usize) -> Self {
        let white_edge = |i: usize| ((i * width) as f64 / WHITE_KEYS as f64).round() as usize;
        let gap = (width / FRAME_WIDTH).max(1);
        let black_height = ((height as f64) * 0.62).round() as usize;
        let black_width = (((width as f64) / WHITE_KEYS as f64) * 0.58).round() as usize;

        let mut black = Vec::with_capacity(NUM_KEYS);
        let mut spans = Vec::with_capacity(NUM_KEYS);
        let mut white_idx = 0usize;
        for k in 0..NUM_KEYS {
            let b = is_black(KEY_BASE + k as u8);
            black.push(b);
            if b {
                // centred on the edge between the previous white key and the next
                let c = white_edge(white_idx);
                let x0 = c.saturating_sub(black_width / 2);
                spans.push((x0, (x0 + black_width).min(width)));
            } else {
                spans.push(((white_edge(white_idx) + gap).min(width), white_edge(white_idx + 1)));
                white_idx += 1;
            }
        }

        let mut regions = vec![Vec::new(); NUM_KEYS];
        for k in 0..NUM_KEYS {
            let (x0, x1) = spans[k];
            if black[k] {
                regions[k].push((0, black_height, x0, x1));
                continue;
            }
            regions[k].push((black_height, height, x0, x1));
            // upper part minus the neighbouring black keys
            let mut lo = x0;
            let mut hi = x1;
            if k > 0 && black[k - 1] {
                lo = lo.max(spans[k - 1].1);
            }
            if k + 1 < NUM_KEYS && black[k + 1] {
                hi = hi.min(spans[k + 1].0);
            }
            if lo < hi {
                regions[k].push((0, black_height, lo, hi));
            }
        }
        KeyboardLayout {
            width,
            height,
            black_height,
            regions,
            spans,
            black,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_black(&self, key: usize) -> bool {
        self.black[key]
    }

    /// Horizontal extent of a key's front (white) or full (black) body.
    pub fn key_span(&self, key: usize) -> (usize, usize) {
        self.spans[key]
    }

    /// A row that crosses the key's own pixels.
    pub fn probe_row(&self, key: usize) -> usize {
        if self.black[key] {
            self.black_height / 2
        } else {
            (self.black_height + self.height) / 2
        }
    }

    /// Pixels belonging to `key`, as `(row_start, row_end, x0, x1)` runs.
    pub fn key_regions(&self, key: usize) -> &[(usize, usize, usize, usize)] {
        &self.regions[key]
    }

    pub fn base_image(&self) -> Array2<f32> {
        let mut img = Array2::from_elem((self.height, self.width), GAP);
        for k in 0..NUM_KEYS {
            self.paint_key(&mut img, k, false);
        }
        img
    }

    pub fn paint_key(&self, img: &mut Array2<f32>, key: usize, pressed: bool) {
        let value = match (self.black[key], pressed) {
            (false, false) => WHITE,
            (false, true) => WHITE_PRESSED,
            (true, false) => BLACK,
            (true, true) => BLACK_PRESSED,
        };
        for &(r0, r1, x0, x1) in &self.regions[key] {
            for r in r0..r1 {
                img.row_mut(r).slice_mut(ndarray::s![x0..x1]).fill(value);
            }
        }
    }
}

/// Lazily rendered synthetic performance; frames are produced on demand.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    roll: PianoRoll,
    occlusion: f64,
    seed: u64,
    layout: KeyboardLayout,
    base: GrayFrame,
    motion: [f64; 4],
}

/// Renders `roll` as a synthetic keyboard video, deterministic per `seed`.
pub fn render_synthetic_performance(roll: &PianoRoll, occlusion: f64, seed: u64) -> Result<SyntheticVideo> {
    if !(0.0..=1.0).contains(&occlusion) {
        return Err(Error::domain(format!("occlusion level {occlusion} outside [0, 1]")));
    }
    if roll.num_keys() != NUM_KEYS {
        return Err(Error::domain(format!(
            "renderer draws {NUM_KEYS} keys, roll has {}",
            roll.num_keys()
        )));
    }
    let layout = KeyboardLayout::new(FRAME_WIDTH, FRAME_HEIGHT);
    let base = layout.base_image();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = [
        rng.random_range(60.0..140.0),
        rng.random_range(0.0..TAU),
        rng.random_range(15.0..35.0),
        rng.random_range(0.0..TAU),
    ];
    Ok(SyntheticVideo {
        roll: roll.clone(),
        occlusion,
        seed,
        layout,
        base,
        motion,
    })
}

impl SyntheticVideo {
    pub fn roll(&self) -> &PianoRoll {
        &self.roll
    }

    pub fn layout(&self) -> &KeyboardLayout {
        &self.layout
    }

    /// Columns `(x0, x1)` and first row covered by the hand at frame `t`.
    pub fn hand_region(&self, t: usize) -> Option<(usize, usize, usize)> {
        let w = (self.occlusion * FRAME_WIDTH as f64).round() as usize;
        if w == 0 {
            return None;
        }
        let coverage = 0.65 + 0.35 * self.occlusion;
        let top = ((FRAME_HEIGHT as f64) * (1.0 - coverage)).round() as usize;
        let [p1, f1, p2, f2] = self.motion;
        let tt = t as f64;
        let pos = (0.5 + 0.35 * (TAU * tt / p1 + f1).sin() + 0.15 * (TAU * tt / p2 + f2).sin()).clamp(0.0, 1.0);
        let x0 = (pos * (FRAME_WIDTH - w) as f64).round() as usize;
        Some((x0, x0 + w, top))
    }
}

fn hash_noise(seed: u64, t: usize, y: usize, x: usize) -> f32 {
    let mut z = seed
        ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (x as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

impl FrameSource for SyntheticVideo {
    fn len(&self) -> usize {
        self.roll.num_frames()
    }

    fn frame(&self, t: usize) -> GrayFrame {
        let mut img = self.base.clone();
        for k in 0..NUM_KEYS {
            if self.roll.is_active(k, t) {
                self.layout.paint_key(&mut img, k, true);
            }
        }
        if let Some((x0, x1, top)) = self.hand_region(t) {
            for y in top..FRAME_HEIGHT {
                for x in x0..x1 {
                    img[(y, x)] = HAND + 0.16 * (hash_noise(self.seed, t, y, x) - 0.5);
                }
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roll::{roll_from_events, NoteEvent};

    #[test]
    fn regions_tile_without_overlap() {
        let layout = KeyboardLayout::new(FRAME_WIDTH, FRAME_HEIGHT);
        let mut owner = Array2::<i32>::from_elem((FRAME_HEIGHT, FRAME_WIDTH), -1);
        for k in 0..NUM_KEYS {
            assert!(!layout.key_regions(k).is_empty());
            for &(r0, r1, x0, x1) in layout.key_regions(k) {
                for r in r0..r1 {
                    for x in x0..x1 {
                        assert_eq!(owner[(r, x)], -1, "pixel ({r},{x}) owned twice");
                        owner[(r, x)] = k as i32;
                    }
                }
            }
        }
        let spans: Vec<_> = (0..NUM_KEYS).map(|k| layout.key_span(k)).collect();
        assert!(spans.windows(2).all(|w| (w[0].0 + w[0].1) < (w[1].0 + w[1].1)));
        assert!(!layout.is_black(0));
        assert!(layout.is_black(1));
    }

    #[test]
    fn empty_roll_without_occlusion_is_constant() {
        let video = render_synthetic_performance(&PianoRoll::zeros(88, 6), 0.0, 3).unwrap();
        let first = video.frame(0);
        assert_eq!(first.dim(), (100, 900));
        assert!((1..6).all(|t| video.frame(t) == first));
        assert!(first.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_key_changes_only_its_region() {
        let roll = roll_from_events(&[NoteEvent::new(64, 2, 5, 100).unwrap()], 8).unwrap();
        let video = render_synthetic_performance(&roll, 0.0, 1).unwrap();
        let layout = video.layout().clone();
        let idle = video.frame(0);
        let mut expected = Array2::<bool>::from_elem(idle.dim(), false);
        for &(r0, r1, x0, x1) in layout.key_regions(64 - 21) {
            for r in r0..r1 {
                for x in x0..x1 {
                    expected[(r, x)] = true;
                }
            }
        }
        for t in 0..8 {
            let f = video.frame(t);
            let changed = f.iter().zip(idle.iter()).map(|(a, b)| a != b);
            for (c, &e) in changed.zip(expected.iter()) {
                assert_eq!(c, e && (2..5).contains(&t));
            }
        }
    }

    #[test]
    fn occlusion_fraction_and_determinism() {
        let roll = PianoRoll::zeros(88, 40);
        let a = render_synthetic_performance(&roll, 0.2, 9).unwrap();
        let b = render_synthetic_performance(&roll, 0.2, 9).unwrap();
        for t in [0, 17, 39] {
            assert_eq!(a.frame(t), b.frame(t));
            let (x0, x1, _) = a.hand_region(t).unwrap();
            assert!(((x1 - x0) as f64 / 900.0 - 0.2).abs() < 0.01);
        }
        let full = render_synthetic_performance(&roll, 1.0, 9).unwrap();
        assert_eq!(full.hand_region(5), Some((0, 900, 0)));
        assert!(render_synthetic_performance(&roll, 1.5, 0).is_err());
    }
}
