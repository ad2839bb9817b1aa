use ndarray::{s, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub const FRAME_HEIGHT: usize = 100;
pub const FRAME_WIDTH: usize = 900;
/// Frames stacked around the center frame.
pub const STACK_DEPTH: usize = 5;

/// Preprocessed grayscale frame, `FRAME_HEIGHT x FRAME_WIDTH`, values in `[0, 1]`.
pub type GrayFrame = Array2<f32>;

/// Random access to a sequence of preprocessed frames at 25 fps.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn frame(&self, index: usize) -> GrayFrame;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for Vec<GrayFrame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> GrayFrame {
        self[index].clone()
    }
}

impl<S: FrameSource + ?Sized> FrameSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn frame(&self, index: usize) -> GrayFrame {
        (**self).frame(index)
    }
}

/// Compact 8-bit frame store; decoded videos live here.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl FrameSequence {
    pub fn new(height: usize, width: usize) -> Self {
        FrameSequence {
            height,
            width,
            pixels: Vec::new(),
        }
    }

    /// Appends a frame, quantizing `[0, 1]` to 8 bits.
    pub fn push(&mut self, frame: ArrayView2<'_, f32>) -> Result<()> {
        if frame.dim() != (self.height, self.width) {
            return Err(Error::domain(format!(
                "frame shape {:?} differs from sequence shape {:?}",
                frame.dim(),
                (self.height, self.width)
            )));
        }
        self.pixels
            .extend(frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        Ok(())
    }

    pub fn collect<S: FrameSource + ?Sized>(source: &S) -> Result<Self> {
        let mut seq = FrameSequence::new(FRAME_HEIGHT, FRAME_WIDTH);
        for t in 0..source.len() {
            seq.push(source.frame(t).view())?;
        }
        Ok(seq)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw_frame(&self, index: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[index * n..(index + 1) * n]
    }
}

impl FrameSource for FrameSequence {
    fn len(&self) -> usize {
        self.pixels.len().checked_div(self.height * self.width).unwrap_or(0)
    }

    fn frame(&self, index: usize) -> GrayFrame {
        Array2::from_shape_vec(
            (self.height, self.width),
            self.raw_frame(index).iter().map(|&p| f32::from(p) / 255.0).collect(),
        )
        .expect("frame buffer size")
    }
}

/// A contiguous sub-range of another source.
#[derive(Clone, Copy, Debug)]
pub struct FrameWindow<S> {
    inner: S,
    start: usize,
    len: usize,
}

impl<S: FrameSource> FrameWindow<S> {
    pub fn new(inner: S, start: usize, len: usize) -> Result<Self> {
        if start + len > inner.len() {
            return Err(Error::range(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                inner.len()
            )));
        }
        Ok(FrameWindow { inner, start, len })
    }

    pub fn start(&self) -> usize {
        self.start
    }
}

impl<S: FrameSource> FrameSource for FrameWindow<S> {
    fn len(&self) -> usize {
        self.len
    }

    fn frame(&self, index: usize) -> GrayFrame {
        assert!(index < self.len, "frame {index} outside window of {}", self.len);
        self.inner.frame(self.start + index)
    }
}

/// Five consecutive frames centred on `center_frame_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub data: Array3<f32>,
    pub center_frame_index: usize,
}

/// Frames `t-2..=t+2`, replicating the first/last frame past either end.
pub fn make_frame_stack<S: FrameSource + ?Sized>(frames: &S, t: usize) -> Result<FrameStack> {
    let n = frames.len();
    if t >= n {
        return Err(Error::range(format!("center frame {t} outside 0..{n}")));
    }
    let first = frames.frame(0);
    let (h, w) = first.dim();
    let mut data = Array3::zeros((STACK_DEPTH, h, w));
    let half = (STACK_DEPTH / 2) as isize;
    for (slot, delta) in (-half..=half).enumerate() {
        let idx = (t as isize + delta).clamp(0, n as isize - 1) as usize;
        let frame = if idx == 0 { first.clone() } else { frames.frame(idx) };
        data.slice_mut(s![slot, .., ..]).assign(&frame);
    }
    Ok(FrameStack {
        data,
        center_frame_index: t,
    })
}
