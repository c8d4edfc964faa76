//! Procedural videos with known per-pixel geometric labels: a sky band on
//! top, textured ground at the bottom and a vertical band between them
//! holding smooth walls, static foliage-like texture and moving objects.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::GeoLabel;
use crate::frame_store::{Frame, FrameError, FrameSequence};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Flat colour with a faint gradient.
    Solid,
    /// High-frequency static texture.
    Porous,
}

/// Axis-aligned static block `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticBlock {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub kind: BlockKind,
    pub color: [u8; 3],
}

/// Rectangle of size `w x h` whose top-left corner is at
/// `(x + vx t, y + vy t)` in frame `t`, rounded to whole pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTrack {
    pub x: f64,
    pub y: f64,
    pub w: u32,
    pub h: u32,
    pub vx: f64,
    pub vy: f64,
    pub color: [u8; 3],
}

impl ObjectTrack {
    pub fn origin(&self, t: usize) -> (i64, i64) {
        (
            (self.x + self.vx * t as f64).round() as i64,
            (self.y + self.vy * t as f64).round() as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    /// Rows `[0, sky_rows)` are sky.
    pub sky_rows: u32,
    /// Rows `[height - ground_rows, height)` are ground.
    pub ground_rows: u32,
    pub sky_color: [u8; 3],
    pub ground_color: [u8; 3],
    /// Colour of the solid wall filling the rest of the vertical band.
    pub wall_color: [u8; 3],
    pub blocks: Vec<StaticBlock>,
    pub tracks: Vec<ObjectTrack>,
    /// Minimum sum of absolute RGB differences between an object and what
    /// lies behind it.
    pub contrast: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Per-pixel labels, one `width * height` plane per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGroundTruth {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Vec<GeoLabel>>,
}

impl PixelGroundTruth {
    /// All frames concatenated, in the layout of a supervoxel label volume.
    pub fn voxels(&self) -> Vec<GeoLabel> {
        self.frames.iter().flatten().copied().collect()
    }

    /// Writes `frame_%06d.png` greyscale label codes into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        for (j, f) in self.frames.iter().enumerate() {
            let codes: Vec<u8> = f.iter().map(|l| l.code()).collect();
            image::save_buffer(
                dir.join(format!("frame_{j:06}.png")),
                &codes,
                self.width,
                self.height,
                image::ColorType::L8,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, frames: usize) -> Result<Self, SynthError> {
        let mut out = Vec::with_capacity(frames);
        let (mut w, mut h) = (0, 0);
        for j in 0..frames {
            let img = image::open(dir.join(format!("frame_{j:06}.png")))?.to_luma8();
            (w, h) = img.dimensions();
            out.push(
                img.into_raw()
                    .into_iter()
                    .map(|c| {
                        GeoLabel::from_code(c)
                            .ok_or_else(|| SynthError::InvalidSpec(format!("label code {c} in frame {j}")))
                    })
                    .collect::<Result<_, _>>()?,
            );
        }
        Ok(PixelGroundTruth {
            width: w,
            height: h,
            frames: out,
        })
    }
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(b).map(|(&x, y)| x.abs_diff(y) as u32).sum()
}

/// Deterministic hash noise in `[0, 1)` for texture synthesis.
fn hash01(seed: u64, x: u32, y: u32) -> f64 {
    let mut h = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn shade(c: [u8; 3], delta: f64) -> [u8; 3] {
    c.map(|v| (v as f64 + delta).round().clamp(0.0, 255.0) as u8)
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width < 8 || self.height < 8 || self.frames == 0 {
            return bad("video must be at least 8x8 with one frame".into());
        }
        if self.sky_rows + self.ground_rows >= self.height {
            return bad("sky and ground leave no vertical band".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative".into());
        }
        let (top, bottom) = self.vertical_band();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > self.width || b.y0 < top || b.y1 > bottom {
                return bad(format!("block {i} is empty or outside the vertical band"));
            }
        }
        for (i, t) in self.tracks.iter().enumerate() {
            if t.w == 0 || t.h == 0 {
                return bad(format!("track {i} is empty"));
            }
            for f in 0..self.frames {
                let (x, y) = t.origin(f);
                if x < 0 || y < top as i64 || x + t.w as i64 > self.width as i64 || y + t.h as i64 > bottom as i64 {
                    return bad(format!("track {i} leaves the vertical band in frame {f}"));
                }
            }
            for c in self.tracks[..i].iter().map(|o| o.color) {
                if color_distance(c, t.color) < self.contrast {
                    return bad(format!("track {i} colour is too close to track colour {c:?}"));
                }
            }
            for f in 0..self.frames {
                let (ox, oy) = t.origin(f);
                for y in oy..oy + t.h as i64 {
                    for x in ox..ox + t.w as i64 {
                        let (bg, _) = self.background(x as u32, y as u32);
                        if color_distance(bg, t.color) < self.contrast {
                            return bad(format!("track {i} colour is too close to its background"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Rows `[top, bottom)` of the vertical band.
    pub fn vertical_band(&self) -> (u32, u32) {
        (self.sky_rows, self.height - self.ground_rows)
    }

    /// Background colour and label of a pixel without objects or noise.
    fn background(&self, x: u32, y: u32) -> ([u8; 3], GeoLabel) {
        let (top, bottom) = self.vertical_band();
        if y < top {
            // smooth vertical gradient
            let t = y as f64 / top.max(1) as f64;
            return (shade(self.sky_color, 25.0 * t - 10.0), GeoLabel::Sky);
        }
        if y >= bottom {
            // coarse 2x2 grain plus a gentle gradient
            let n = hash01(self.seed ^ 0x5eed, x / 2, y / 2);
            let t = (y - bottom) as f64 / (self.height - bottom).max(1) as f64;
            return (shade(self.ground_color, 24.0 * (n - 0.5) + 12.0 * t), GeoLabel::Ground);
        }
        for b in self.blocks.iter().rev() {
            if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                return match b.kind {
                    BlockKind::Solid => {
                        let t = (y - b.y0) as f64 / (b.y1 - b.y0) as f64;
                        (shade(b.color, 8.0 * t), GeoLabel::Solid)
                    }
                    BlockKind::Porous => {
                        let n = hash01(self.seed ^ 0xf01a, x, y);
                        (shade(b.color, 140.0 * (n - 0.5)), GeoLabel::Porous)
                    }
                };
            }
        }
        let t = (y - top) as f64 / (bottom - top) as f64;
        (shade(self.wall_color, 6.0 * t), GeoLabel::Solid)
    }

    /// Colour and label of a pixel in frame `t`, before noise.
    pub fn clean_pixel(&self, x: u32, y: u32, t: usize) -> ([u8; 3], GeoLabel) {
        for o in self.tracks.iter().rev() {
            let (ox, oy) = o.origin(t);
            let (xi, yi) = (x as i64, y as i64);
            if xi >= ox && xi < ox + o.w as i64 && yi >= oy && yi < oy + o.h as i64 {
                return (o.color, GeoLabel::Object);
            }
        }
        self.background(x, y)
    }

    /// Random scene of the given size; every call with the same arguments
    /// returns the same scene.
    pub fn random(seed: u64, width: u32, height: u32, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sky_rows = (height as f64 * rng.random_range(0.2..0.32)).round() as u32;
        let ground_rows = (height as f64 * rng.random_range(0.2..0.3)).round() as u32;
        let (top, bottom) = (sky_rows, height - ground_rows);
        let band = bottom - top;
        let sky_color = [
            rng.random_range(110..170),
            rng.random_range(170..210),
            rng.random_range(225..=255),
        ];
        let ground_color = [
            rng.random_range(110..150),
            rng.random_range(85..115),
            rng.random_range(55..80),
        ];
        let wall_color = {
            let g: u8 = rng.random_range(95..150);
            [g + rng.random_range(0..40), g, g.saturating_sub(rng.random_range(0..25))]
        };
        let mut blocks = Vec::new();
        // one or two porous patches and possibly one more solid block
        let n_porous = rng.random_range(1..=2);
        for k in 0..n_porous {
            let w = rng.random_range(width / 6..=width / 3);
            let x0 = if k == 0 {
                rng.random_range(0..width / 2 - w / 2)
            } else {
                rng.random_range(width / 2..width - w)
            };
            let h = rng.random_range(band / 2..=band);
            let y0 = bottom - h;
            blocks.push(StaticBlock {
                x0,
                y0,
                x1: x0 + w,
                y1: bottom,
                kind: BlockKind::Porous,
                color: [
                    rng.random_range(40..80),
                    rng.random_range(110..150),
                    rng.random_range(40..70),
                ],
            });
        }
        if rng.random_bool(0.5) {
            let w = rng.random_range(width / 8..=width / 5);
            let x0 = rng.random_range(0..width - w);
            let h = rng.random_range(band / 3..=band / 2);
            blocks.insert(
                0,
                StaticBlock {
                    x0,
                    y0: top,
                    x1: x0 + w,
                    y1: top + h,
                    kind: BlockKind::Solid,
                    color: shade(wall_color, rng.random_range(-40.0..-20.0)),
                },
            );
        }
        let palette: [[u8; 3]; 4] = [[225, 30, 30], [240, 200, 20], [30, 60, 230], [240, 240, 240]];
        let mut tracks = Vec::new();
        let n_tracks = rng.random_range(1..=2);
        for _ in 0..n_tracks {
            let w = rng.random_range(width / 7..=width / 5);
            let h = rng.random_range((band / 4).max(2)..=(band / 2).max(3)).min(band);
            let speed: f64 = rng.random_range(0.6..1.5);
            let span = (width - w) as f64;
            let max_speed = span / (frames.max(2) - 1) as f64;
            let speed: f64 = speed.min(max_speed);
            let travel = speed * (frames.max(1) - 1) as f64;
            let (x, vx) = if rng.random_bool(0.5) {
                (rng.random_range(0.0..=(span - travel).max(0.0)), speed)
            } else {
                (rng.random_range(travel.min(span)..=span), -speed)
            };
            let y = rng.random_range(top..=bottom - h) as f64;
            let color = palette[rng.random_range(0..palette.len())];
            tracks.push(ObjectTrack {
                x,
                y,
                w,
                h,
                vx,
                vy: 0.0,
                color,
            });
        }
        let mut spec = SyntheticSceneSpec {
            width,
            height,
            frames,
            sky_rows,
            ground_rows,
            sky_color,
            ground_color,
            wall_color,
            blocks,
            tracks,
            contrast: 120,
            noise_sigma: 3.0,
            seed,
        };
        // keep only objects that stand out from everything behind them
        let mut kept = Vec::new();
        for t in std::mem::take(&mut spec.tracks) {
            spec.tracks = kept.clone();
            spec.tracks.push(t);
            if spec.validate().is_ok() {
                kept.push(t);
            }
        }
        spec.tracks = kept;
        spec
    }
}

/// Renders `spec`. Identical specs give byte-identical frames.
pub fn generate_synthetic_video(spec: &SyntheticSceneSpec) -> Result<(FrameSequence, PixelGroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x006e_6f69_7365));
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let (w, h) = (spec.width, spec.height);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut rgb = Vec::with_capacity((w * h * 3) as usize);
        let mut labels = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let (c, l) = spec.clean_pixel(x, y, t);
                labels.push(l);
                for v in c {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    rgb.push((v as f64 + n).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        frames.push(Frame::new(t, w, h, rgb));
        gt.push(labels);
    }
    Ok((
        FrameSequence::from_frames(format!("synth_{}", spec.seed), frames)?,
        PixelGroundTruth {
            width: w,
            height: h,
            frames: gt,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let s = SyntheticSceneSpec::random(7, 48, 40, 6);
        let (a, ga) = generate_synthetic_video(&s).unwrap();
        let (b, gb) = generate_synthetic_video(&SyntheticSceneSpec::random(7, 48, 40, 6)).unwrap();
        assert_eq!(a.frames(), b.frames());
        assert_eq!(ga, gb);
        let (c, _) = generate_synthetic_video(&SyntheticSceneSpec::random(8, 48, 40, 6)).unwrap();
        assert_ne!(a.frames()[0].rgb, c.frames()[0].rgb);
    }

    #[test]
    fn no_tracks_no_objects() {
        let mut s = SyntheticSceneSpec::random(3, 40, 40, 4);
        s.tracks.clear();
        let (_, gt) = generate_synthetic_video(&s).unwrap();
        assert!(gt.voxels().iter().all(|&l| l != GeoLabel::Object));
    }

    #[test]
    fn object_mask_translates_with_velocity() {
        let mut s = SyntheticSceneSpec::random(5, 64, 64, 8);
        s.tracks = vec![ObjectTrack {
            x: 4.0,
            y: s.sky_rows as f64 + 2.0,
            w: 6,
            h: 5,
            vx: 2.0,
            vy: 0.0,
            color: [250, 10, 250],
        }];
        s.contrast = 0;
        let (_, gt) = generate_synthetic_video(&s).unwrap();
        let cols = |t: usize| -> Vec<u32> {
            (0..64u32)
                .filter(|&x| (0..64u32).any(|y| gt.frames[t][(y * 64 + x) as usize] == GeoLabel::Object))
                .collect()
        };
        for t in 0..8 {
            assert_eq!(cols(t), (4 + 2 * t as u32..10 + 2 * t as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bands_and_contrast() {
        for seed in 0..20 {
            let s = SyntheticSceneSpec::random(seed, 64, 64, 30);
            s.validate().unwrap();
            assert!(!s.tracks.is_empty(), "seed {seed}");
            let (top, bottom) = s.vertical_band();
            let (_, gt) = generate_synthetic_video(&s).unwrap();
            for (t, f) in gt.frames.iter().enumerate() {
                for y in 0..64u32 {
                    for x in 0..64u32 {
                        let l = f[(y * 64 + x) as usize];
                        match l {
                            GeoLabel::Sky => assert!(y < top),
                            GeoLabel::Ground => assert!(y >= bottom),
                            _ => assert!(y >= top && y < bottom),
                        }
                        if l == GeoLabel::Object {
                            // the object differs from what it hides by the contrast
                            let mut hidden = s.clone();
                            hidden.tracks.clear();
                            let (bg, _) = hidden.clean_pixel(x, y, t);
                            let (fg, _) = s.clean_pixel(x, y, t);
                            assert!(color_distance(bg, fg) >= s.contrast, "seed {seed}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSceneSpec::random(1, 32, 32, 5);
        s.sky_rows = 20;
        s.ground_rows = 12;
        assert!(matches!(generate_synthetic_video(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = SyntheticSceneSpec::random(1, 32, 32, 5);
        s.tracks = vec![ObjectTrack {
            x: 0.0,
            y: s.sky_rows as f64,
            w: 4,
            h: 2,
            vx: 10.0,
            vy: 0.0,
            color: [255, 0, 0],
        }];
        assert!(s.validate().is_err());
    }

    #[test]
    fn gt_png_round_trip() {
        let s = SyntheticSceneSpec::random(2, 24, 24, 3);
        let (_, gt) = generate_synthetic_video(&s).unwrap();
        let d = tempfile::tempdir().unwrap();
        gt.save(d.path()).unwrap();
        assert_eq!(PixelGroundTruth::load(d.path(), 3).unwrap(), gt);
    }
}
