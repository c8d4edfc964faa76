//! Frame sequences: loading numbered PNG frames, pixel access and the
//! sRGB to CIELAB conversion used by segmentation and appearance features.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default frame file pattern.
pub const FRAME_PATTERN: &str = "frame_%06d.png";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("no frames matching `{0}` found")]
    EmptySequence(String),
    #[error("frame {0} is missing from the sequence")]
    MissingFrame(usize),
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("bad frame pattern `{0}`: expected one `%d` or `%0Nd` placeholder")]
    BadPattern(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// One decoded RGB frame, interleaved 8-bit channels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(index: usize, width: u32, height: u32, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), (width * height * 3) as usize, "rgb buffer size");
        Frame {
            index,
            width,
            height,
            rgb,
        }
    }

    /// A frame filled with a single color.
    pub fn filled(index: usize, width: u32, height: u32, color: [u8; 3]) -> Self {
        let rgb = color
            .iter()
            .copied()
            .cycle()
            .take((width * height * 3) as usize)
            .collect();
        Frame::new(index, width, height, rgb)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn num_pixels(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Grayscale luminance (Rec. 601 weights) on a 0..255 scale.
    pub fn luma(&self) -> Vec<f32> {
        self.rgb
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FrameError> {
        image::save_buffer(
            path,
            &self.rgb,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| FrameError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path, index: usize) -> Result<Frame, FrameError> {
        let img = image::open(path).map_err(|source| FrameError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Frame::new(index, w, h, rgb.into_raw()))
    }
}

/// An immutable, validated sequence of equally sized frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSequence {
    pub source_id: String,
    pub width: u32,
    pub height: u32,
    frames: Vec<Frame>,
}

/// `sequence.json` written beside stage outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub width: u32,
    pub height: u32,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl FrameSequence {
    /// Builds a sequence from frames in order; frame indices are rewritten to
    /// be dense from 0.
    pub fn from_frames(source_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self, FrameError> {
        let source_id = source_id.into();
        let first = frames
            .first()
            .ok_or_else(|| FrameError::EmptySequence(source_id.clone()))?;
        let (width, height) = (first.width, first.height);
        let mut out = Vec::with_capacity(frames.len());
        for (i, mut f) in frames.into_iter().enumerate() {
            if f.width != width || f.height != height {
                return Err(FrameError::DimensionMismatch {
                    index: i,
                    want_w: width,
                    want_h: height,
                    got_w: f.width,
                    got_h: f.height,
                });
            }
            f.index = i;
            out.push(f);
        }
        Ok(FrameSequence {
            source_id,
            width,
            height,
            frames: out,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, j: usize) -> &Frame {
        &self.frames[j]
    }

    pub fn count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_area(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn manifest(&self) -> SequenceManifest {
        SequenceManifest {
            width: self.width,
            height: self.height,
            count: self.count(),
            fps: None,
        }
    }

    /// Writes `frame_%06d.png` files and `sequence.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), FrameError> {
        fs::create_dir_all(dir).map_err(|source| FrameError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for f in &self.frames {
            f.save_png(&dir.join(format!("frame_{:06}.png", f.index)))?;
        }
        write_manifest(dir, &self.manifest())
    }
}

pub fn write_manifest(dir: &Path, manifest: &SequenceManifest) -> Result<(), FrameError> {
    let path = dir.join("sequence.json");
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, body).map_err(|source| FrameError::Io { path, source })
}

struct FramePattern {
    prefix: String,
    suffix: String,
}

impl FramePattern {
    fn parse(pattern: &str) -> Result<Self, FrameError> {
        let bad = || FrameError::BadPattern(pattern.to_string());
        let start = pattern.find('%').ok_or_else(bad)?;
        let rest = &pattern[start + 1..];
        let d = rest.find('d').ok_or_else(bad)?;
        if !rest[..d].chars().all(|c| c.is_ascii_digit()) || rest[d + 1..].contains('%') {
            return Err(bad());
        }
        Ok(FramePattern {
            prefix: pattern[..start].to_string(),
            suffix: rest[d + 1..].to_string(),
        })
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        let digits = name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    }
}

/// Loads all frames in `dir` whose file names match `pattern` (printf style,
/// e.g. `frame_%06d.png`). Numbering must be consecutive; the first file found
/// becomes frame 0.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence, FrameError> {
    let pat = FramePattern::parse(pattern)?;
    let entries = fs::read_dir(dir).map_err(|source| FrameError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut numbered = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|source| FrameError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| pat.index_of(n)) {
            numbered.insert(idx, entry.path());
        }
    }
    let first = match numbered.keys().next() {
        Some(&k) => k,
        None => return Err(FrameError::EmptySequence(dir.join(pattern).display().to_string())),
    };
    let mut frames = Vec::with_capacity(numbered.len());
    for (pos, (&num, path)) in numbered.iter().enumerate() {
        if num != first + pos {
            return Err(FrameError::MissingFrame(first + pos));
        }
        frames.push(Frame::load_png(path, pos)?);
    }
    let source_id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("sequence")
        .to_string();
    FrameSequence::from_frames(source_id, frames)
}

/// Per-pixel CIELAB values (D65), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabFrame {
    pub width: u32,
    pub height: u32,
    pub lab: Vec<[f32; 3]>,
}

#[inline]
fn srgb_to_linear(c: f32) -> f32 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f32) -> f32 {
    const DELTA: f32 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one 8-bit sRGB triple to CIELAB under D65.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f32; 3] {
    let r = srgb_to_linear(rgb[0] as f32 / 255.0);
    let g = srgb_to_linear(rgb[1] as f32 / 255.0);
    let b = srgb_to_linear(rgb[2] as f32 / 255.0);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = 0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b;
    // D65 reference white
    let fx = lab_f(x / 0.950_47);
    let fy = lab_f(y);
    let fz = lab_f(z / 1.088_83);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn to_working_colorspace(frame: &Frame) -> LabFrame {
    // 8-bit input has only 256^3 values but frames are small; a per-frame
    // memo of repeated colors is enough.
    let mut cache: std::collections::HashMap<[u8; 3], [f32; 3]> = Default::default();
    let lab = frame
        .rgb
        .chunks_exact(3)
        .map(|c| {
            let key = [c[0], c[1], c[2]];
            *cache.entry(key).or_insert_with(|| srgb_to_lab(key))
        })
        .collect();
    LabFrame {
        width: frame.width,
        height: frame.height,
        lab,
    }
}
