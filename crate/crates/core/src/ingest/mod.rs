//! Video decoding, frame stacking, label alignment, dataset indexing and the
//! synthetic keyboard renderer.

pub mod align;
pub mod dataset;
pub mod frames;
pub mod render;
pub mod video;

pub use align::{align_dataset, AlignedPair};
pub use dataset::{balanced_batches, BalancedBatches, ClassBucket, DatasetIndex, Sample};
pub use frames::{
    make_frame_stack, FrameSequence, FrameSource, FrameStack, FrameWindow, GrayFrame, FRAME_HEIGHT, FRAME_WIDTH,
    STACK_DEPTH,
};
pub use render::{render_synthetic_performance, KeyboardLayout, SyntheticVideo};
pub use video::{decode_video_frames, preprocess_frame, write_raw_video, CropRect};
