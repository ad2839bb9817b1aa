use super::frames::{FrameSource, FrameWindow};
use crate::error::{Error, Result};
use crate::midi::MidiDocument;
use crate::roll::{trim_leading_silence, PianoRoll, FPS};

/// Largest tolerated length difference between video and pseudo-ground-truth, in frames.
pub const MAX_DURATION_MISMATCH_FRAMES: usize = FPS as usize;

/// Video frames and labels covering exactly the same time span.
#[derive(Clone, Debug)]
pub struct AlignedPair<S> {
    pub frames: FrameWindow<S>,
    pub roll: PianoRoll,
    /// Leading frames dropped from both streams.
    pub offset: usize,
}

/// Trims the leading silence of the pseudo-ground-truth from both streams and
/// truncates them to a common length.
pub fn align_dataset<S: FrameSource>(frames: S, pseudo_gt: &MidiDocument) -> Result<AlignedPair<S>> {
    let roll = pseudo_gt.to_roll()?;
    let (n_video, n_roll) = (frames.len(), roll.num_frames());
    if n_video.abs_diff(n_roll) > MAX_DURATION_MISMATCH_FRAMES {
        return Err(Error::Alignment(format!(
            "video has {n_video} frames, midi spans {n_roll}; they differ by more than 1 s"
        )));
    }
    let trimmed = trim_leading_silence(&roll);
    if trimmed.all_silent {
        return Err(Error::Alignment("pseudo-ground-truth midi has no notes".into()));
    }
    let offset = trimmed.offset;
    if offset >= n_video {
        return Err(Error::Alignment(format!(
            "first note at frame {offset} lies past the last video frame {n_video}"
        )));
    }
    let len = (n_video - offset).min(trimmed.roll.num_frames());
    Ok(AlignedPair {
        frames: FrameWindow::new(frames, offset, len)?,
        roll: trimmed.roll.slice_frames(0, len),
        offset,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::ingest::frames::GrayFrame;
    use crate::roll::NoteEvent;

    fn frames(n: usize) -> Vec<GrayFrame> {
        (0..n).map(|i| Array2::from_elem((1, 1), i as f32 / 1000.0)).collect()
    }

    fn doc(events: Vec<NoteEvent>, len: u32) -> MidiDocument {
        let mut d = MidiDocument::new(events);
        d.length_frames = len;
        d
    }

    #[test]
    fn aligned_pair_unchanged() {
        let d = doc(vec![NoteEvent::new(60, 0, 30, 100).unwrap()], 40);
        let pair = align_dataset(frames(40), &d).unwrap();
        assert_eq!(pair.offset, 0);
        assert_eq!(pair.frames.len(), 40);
        assert_eq!(pair.roll, d.to_roll().unwrap());
    }

    #[test]
    fn leading_silence_shifts_both_streams() {
        let d = doc(vec![NoteEvent::new(60, 50, 80, 100).unwrap()], 100);
        let video = frames(100);
        let pair = align_dataset(&video, &d).unwrap();
        assert_eq!(pair.offset, 50);
        assert_eq!(pair.frames.len(), 50);
        assert_eq!(pair.roll.num_frames(), 50);
        assert_eq!(pair.frames.frame(0), video[50]);
        assert!(pair.roll.is_active(39, 0));
    }

    #[test]
    fn small_mismatch_truncates_large_fails() {
        let d = doc(vec![NoteEvent::new(60, 0, 10, 100).unwrap()], 60);
        let pair = align_dataset(frames(57), &d).unwrap();
        assert_eq!((pair.frames.len(), pair.roll.num_frames()), (57, 57));
        assert!(matches!(align_dataset(frames(30), &d), Err(Error::Alignment(_))));
        assert!(matches!(
            align_dataset(frames(10), &doc(vec![], 10)),
            Err(Error::Alignment(_))
        ));
    }
}
