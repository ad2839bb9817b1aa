//! Video decoding and frame preprocessing.
//!
//! Three inputs are understood:
//! - the raw container written by [`write_raw_video`] (`.pvraw`),
//! - a directory of PNG frames, taken in file-name order at 25 fps,
//! - anything else, decoded through an `ffmpeg` subprocess as 25 fps RGB.
//!
//! Every frame is cropped to the keyboard rectangle, converted to grayscale,
//! resized to 100x900 and scaled to `[0, 1]`.
//!
//! Raw container layout (little endian): the 8-byte magic `PVRAWV01`, then
//! `u32` width, `u32` height, `u32` channels (1 = gray, 3 = RGB), `u32` frame
//! count, `f32` frames per second, followed by the frames as row-major
//! interleaved `u8` samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use image::{imageops, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::frames::{FrameSequence, FrameSource, GrayFrame, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};
use crate::roll::FPS;

pub const RAW_VIDEO_MAGIC: &[u8; 8] = b"PVRAWV01";
pub const RAW_VIDEO_EXTENSION: &str = "pvraw";

/// Keyboard region in source-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRect {
    fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("crop region is empty"));
        }
        if (self.x + self.width) as usize > width || (self.y + self.height) as usize > height {
            return Err(Error::domain(format!(
                "crop region {self:?} exceeds frame {width}x{height}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawVideoHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub frames: u32,
    pub fps: f32,
}

impl RawVideoHeader {
    fn frame_bytes(&self) -> usize {
        (self.width * self.height * self.channels) as usize
    }
}

/// Streams frames out of a raw container.
pub struct RawVideoReader<R> {
    reader: R,
    header: RawVideoHeader,
}

impl RawVideoReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> RawVideoReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut head = [0u8; 28];
        reader
            .read_exact(&mut head)
            .map_err(|_| Error::parse(0, "truncated raw video header"))?;
        if &head[..8] != RAW_VIDEO_MAGIC {
            return Err(Error::parse(0, "not a raw video container"));
        }
        let word = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let header = RawVideoHeader {
            width: word(0),
            height: word(1),
            channels: word(2),
            frames: word(3),
            fps: f32::from_le_bytes(head[24..28].try_into().unwrap()),
        };
        if !matches!(header.channels, 1 | 3) {
            return Err(Error::parse(
                16,
                format!("unsupported channel count {}", header.channels),
            ));
        }
        if !(header.fps.is_finite() && header.fps > 0.0) {
            return Err(Error::parse(24, format!("invalid frame rate {}", header.fps)));
        }
        Ok(RawVideoReader { reader, header })
    }

    pub fn header(&self) -> RawVideoHeader {
        self.header
    }

    pub fn next_frame(&mut self, buf: &mut Vec<u8>) -> Result<()> {
        buf.resize(self.header.frame_bytes(), 0);
        self.reader.read_exact(buf)?;
        Ok(())
    }
}

/// Writes `frames` as a single-channel raw container at 25 fps.
pub fn write_raw_video<S: FrameSource + ?Sized>(path: &Path, frames: &S) -> Result<()> {
    let (h, w) = if frames.is_empty() {
        (FRAME_HEIGHT, FRAME_WIDTH)
    } else {
        frames.frame(0).dim()
    };
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(RAW_VIDEO_MAGIC)?;
    for v in [w as u32, h as u32, 1, frames.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(FPS as f32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(h * w);
    for t in 0..frames.len() {
        buf.clear();
        buf.extend(
            frames
                .frame(t)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Crops, converts to gray, resizes to 100x900 and normalizes one interleaved `u8` frame.
pub fn preprocess_frame(
    pixels: &[u8],
    width: usize,
    height: usize,
    channels: usize,
    region: Option<CropRect>,
) -> Result<GrayFrame> {
    if pixels.len() != width * height * channels {
        return Err(Error::domain(format!(
            "frame buffer has {} bytes, expected {width}x{height}x{channels}",
            pixels.len()
        )));
    }
    let region = region.unwrap_or(CropRect {
        x: 0,
        y: 0,
        width: width as u32,
        height: height as u32,
    });
    region.check(width, height)?;
    let (cw, ch) = (region.width as usize, region.height as usize);
    let mut gray = Vec::with_capacity(cw * ch);
    for y in region.y as usize..region.y as usize + ch {
        for x in region.x as usize..region.x as usize + cw {
            let p = &pixels[(y * width + x) * channels..][..channels];
            let v = if channels == 3 {
                0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2])
            } else {
                f32::from(p[0])
            };
            gray.push(v / 255.0);
        }
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(cw as u32, ch as u32, gray).expect("crop buffer size");
    let resized = if (cw, ch) == (FRAME_WIDTH, FRAME_HEIGHT) {
        img
    } else {
        imageops::resize(
            &img,
            FRAME_WIDTH as u32,
            FRAME_HEIGHT as u32,
            imageops::FilterType::Triangle,
        )
    };
    let data = resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Array2::from_shape_vec((FRAME_HEIGHT, FRAME_WIDTH), data).expect("resized frame size"))
}

/// Source frame to use for output frame `i` when converting `src_fps` to 25 fps.
fn source_index(i: usize, src_fps: f64) -> usize {
    ((i as f64) * src_fps / FPS).round() as usize
}

fn output_frames(n_src: usize, src_fps: f64) -> usize {
    (0..).take_while(|&i| source_index(i, src_fps) < n_src).count()
}

/// Decodes a video into preprocessed 25 fps frames.
pub fn decode_video_frames(path: &Path, region: Option<CropRect>) -> Result<FrameSequence> {
    if path.is_dir() {
        return decode_png_dir(path, region);
    }
    if path.extension().and_then(|e| e.to_str()) == Some(RAW_VIDEO_EXTENSION) {
        return decode_raw(path, region);
    }
    decode_ffmpeg(path, region)
}

fn decode_raw(path: &Path, region: Option<CropRect>) -> Result<FrameSequence> {
    let mut reader = RawVideoReader::open(path)?;
    let h = reader.header();
    let wanted = output_frames(h.frames as usize, f64::from(h.fps));
    let mut seq = FrameSequence::new(FRAME_HEIGHT, FRAME_WIDTH);
    let mut buf = Vec::new();
    let mut src_pos = 0usize;
    let mut current: Option<GrayFrame> = None;
    for i in 0..wanted {
        let target = source_index(i, f64::from(h.fps));
        while src_pos <= target {
            reader.next_frame(&mut buf)?;
            src_pos += 1;
            current = None;
        }
        if current.is_none() {
            current = Some(preprocess_frame(
                &buf,
                h.width as usize,
                h.height as usize,
                h.channels as usize,
                region,
            )?);
        }
        seq.push(current.as_ref().unwrap().view())?;
    }
    Ok(seq)
}

fn decode_png_dir(dir: &Path, region: Option<CropRect>) -> Result<FrameSequence> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                == Some(true)
        })
        .collect();
    files.sort();
    let mut seq = FrameSequence::new(FRAME_HEIGHT, FRAME_WIDTH);
    for file in files {
        let img = image::open(&file)?.to_rgb8();
        let (w, h) = img.dimensions();
        let frame = preprocess_frame(img.as_raw(), w as usize, h as usize, 3, region)?;
        seq.push(frame.view())?;
    }
    Ok(seq)
}

fn decode_ffmpeg(path: &Path, region: Option<CropRect>) -> Result<FrameSequence> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let probe = Command::new("ffprobe")
        .args([
            "-v",
            "error",
            "-select_streams",
            "v:0",
            "-show_entries",
            "stream=width,height",
            "-of",
            "csv=p=0",
        ])
        .arg(path)
        .output()
        .map_err(|e| Error::External(format!("cannot run ffprobe: {e}")))?;
    if !probe.status.success() {
        return Err(Error::External(format!(
            "ffprobe could not read {}: {}",
            path.display(),
            String::from_utf8_lossy(&probe.stderr).trim()
        )));
    }
    let dims = String::from_utf8_lossy(&probe.stdout);
    let mut parts = dims.trim().split(',').map(|s| s.trim().parse::<usize>());
    let (width, height) = match (parts.next(), parts.next()) {
        (Some(Ok(w)), Some(Ok(h))) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::External(format!("unexpected ffprobe output {dims:?}"))),
    };
    let mut child = Command::new("ffmpeg")
        .args(["-v", "error", "-i"])
        .arg(path)
        .args(["-r", "25", "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| Error::External(format!("cannot run ffmpeg: {e}")))?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut seq = FrameSequence::new(FRAME_HEIGHT, FRAME_WIDTH);
    let mut buf = vec![0u8; width * height * 3];
    loop {
        match stdout.read_exact(&mut buf) {
            Ok(()) => seq.push(preprocess_frame(&buf, width, height, 3, region)?.view())?,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    let status = child.wait()?;
    if !status.success() {
        return Err(Error::External(format!("ffmpeg failed on {}", path.display())));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::render::KeyboardLayout;

    fn write_rgb_container(path: &Path, w: u32, h: u32, frames: &[Vec<u8>], fps: f32) {
        let mut out = File::create(path).unwrap();
        out.write_all(RAW_VIDEO_MAGIC).unwrap();
        for v in [w, h, 3, frames.len() as u32] {
            out.write_all(&v.to_le_bytes()).unwrap();
        }
        out.write_all(&fps.to_le_bytes()).unwrap();
        for f in frames {
            out.write_all(f).unwrap();
        }
    }

    #[test]
    fn ten_frame_video_has_contract_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pvraw");
        let frames: Vec<Vec<u8>> = (0..10).map(|i| vec![(i * 20) as u8; 320 * 60 * 3]).collect();
        write_rgb_container(&path, 320, 60, &frames, 25.0);
        let seq = decode_video_frames(&path, None).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.frame(3).dim(), (100, 900));
    }

    #[test]
    fn white_input_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pvraw");
        write_rgb_container(&path, 64, 48, &vec![vec![255; 64 * 48 * 3]; 3], 25.0);
        let seq = decode_video_frames(
            &path,
            Some(CropRect {
                x: 4,
                y: 4,
                width: 50,
                height: 20,
            }),
        )
        .unwrap();
        assert!(seq.frame(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frame_rate_is_converted_to_25() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pvraw");
        let frames: Vec<Vec<u8>> = (0..50).map(|i| vec![(i * 5) as u8; 16 * 8]).collect();
        let mut out = File::create(&path).unwrap();
        out.write_all(RAW_VIDEO_MAGIC).unwrap();
        for v in [16u32, 8, 1, 50] {
            out.write_all(&v.to_le_bytes()).unwrap();
        }
        out.write_all(&50f32.to_le_bytes()).unwrap();
        for f in &frames {
            out.write_all(f).unwrap();
        }
        drop(out);
        let seq = decode_video_frames(&path, None).unwrap();
        assert_eq!(seq.len(), 25);
        // output frame 3 is source frame 6
        assert!((seq.frame(3)[(0, 0)] - 30.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn bad_regions_and_files() {
        let px = vec![0u8; 10 * 10];
        assert!(matches!(
            preprocess_frame(
                &px,
                10,
                10,
                1,
                Some(CropRect {
                    x: 0,
                    y: 0,
                    width: 0,
                    height: 5
                })
            ),
            Err(Error::Domain(_))
        ));
        assert!(preprocess_frame(
            &px,
            10,
            10,
            1,
            Some(CropRect {
                x: 5,
                y: 0,
                width: 6,
                height: 5
            })
        )
        .is_err());
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.pvraw");
        std::fs::write(&junk, b"not a video").unwrap();
        assert!(decode_video_frames(&junk, None).is_err());
        assert!(decode_video_frames(&dir.path().join("missing.mp4"), None).is_err());
    }

    #[test]
    fn resize_preserves_key_order() {
        // Render a 2x-resolution keyboard with a few keys pressed, decode it, and
        // check the pressed-key landmarks keep their left-to-right order.
        let big = KeyboardLayout::new(1800, 200);
        let pressed = [3usize, 20, 39, 40, 61, 87];
        let mut img = big.base_image();
        for &k in &pressed {
            big.paint_key(&mut img, k, true);
        }
        let px: Vec<u8> = img.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let frame = preprocess_frame(&px, 1800, 200, 1, None).unwrap();
        let small = KeyboardLayout::new(900, 100);
        let base = small.base_image();
        let mut centers = Vec::new();
        for &k in &pressed {
            let (x0, x1) = small.key_span(k);
            let y = small.probe_row(k);
            let diff: f32 = (x0..x1).map(|x| base[(y, x)] - frame[(y, x)]).sum::<f32>() / (x1 - x0) as f32;
            assert!(diff > 0.1, "key {k} not darkened after resize ({diff})");
            centers.push((x0 + x1) / 2);
        }
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
    }
}
