use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geovid_core::dense_flow::FlowParams;
use geovid_core::features::{block, extract_level_features, VideoFeatureContext, OFFSETS};
use geovid_core::frame_store::{Frame, FrameSequence};
use geovid_core::segmentation::{Oversegmentation, SegmentationHierarchy};

const W: u32 = 96;
const SIDE: u32 = 40;
const FRAMES: usize = 12;

fn square_origin(j: usize, step: (i32, i32)) -> (i32, i32) {
    (12 + step.0 * j as i32, 14 + step.1 * j as i32)
}

fn in_square(x: u32, y: u32, j: usize, step: (i32, i32)) -> bool {
    let (sx, sy) = square_origin(j, step);
    let (x, y) = (x as i32, y as i32);
    x >= sx && x < sx + SIDE as i32 && y >= sy && y < sy + SIDE as i32
}

/// Bilinear upsampling of a coarse random grid with `cell`-pixel cells.
fn smooth_texture(rng: &mut ChaCha8Rng, w: u32, cell: u32, lo: f64, hi: f64) -> Vec<u8> {
    let g = (w / cell + 2) as usize;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(lo..hi)).collect();
    let mut out = Vec::with_capacity((w * w) as usize);
    for y in 0..w {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| grid[j * g + i];
            let v = (1.0 - ty) * ((1.0 - tx) * at(ix, iy) + tx * at(ix + 1, iy))
                + ty * ((1.0 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1));
            out.push(v.round() as u8);
        }
    }
    out
}

/// A red textured square translating by `step` per frame over a static
/// grey texture, with its ground-truth two-segment labelling.
fn translating_square(seed: u64, step: (i32, i32)) -> (FrameSequence, SegmentationHierarchy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = smooth_texture(&mut rng, W, 4, 60.0, 140.0);
    let fg = smooth_texture(&mut rng, SIDE, 3, 0.0, 90.0);
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for j in 0..FRAMES {
        let mut f = Frame::filled(j, W, W, [0, 0, 0]);
        let (sx, sy) = square_origin(j, step);
        for y in 0..W {
            for x in 0..W {
                let inside = in_square(x, y, j, step);
                let c = if inside {
                    let t = fg[((y as i32 - sy) as u32 * SIDE + (x as i32 - sx) as u32) as usize];
                    [255, t, t]
                } else {
                    let g = bg[(y * W + x) as usize];
                    [g, g, g]
                };
                f.set_pixel(x, y, c);
                labels.push(inside as u32);
            }
        }
        frames.push(f);
    }
    let seq = FrameSequence::from_frames("square", frames).unwrap();
    let base = Oversegmentation::from_labels(W, W, FRAMES, labels).unwrap();
    let h = SegmentationHierarchy::from_parts(base, vec![1.0], 1, vec![1], vec![vec![0, 1]]).unwrap();
    (seq, h)
}

/// Tracks the square by colour alone: mean, 10th and 90th percentile of the
/// coordinates of saturated red pixels.
fn track(seq: &FrameSequence, j: usize) -> [[f64; 2]; 3] {
    let f = &seq.frames()[j];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for y in 0..f.height {
        for x in 0..f.width {
            let [r, g, _] = f.pixel(x, y);
            if r == 255 && g < 100 {
                xs.push(x as f64);
                ys.push(y as f64);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rank = |v: &mut Vec<f64>, p: f64| {
        v.sort_by(f64::total_cmp);
        v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1]
    };
    let (mx, my) = (mean(&xs), mean(&ys));
    [[mx, my], [rank(&mut xs, 0.1), rank(&mut ys, 0.1)], [rank(&mut xs, 0.9), rank(&mut ys, 0.9)]]
}

#[test]
fn location_change_follows_the_tracked_square() {
    for (seed, step) in [(1, (1, 0)), (2, (1, 1)), (3, (-1, 1))] {
        let (seq, h) = translating_square(seed, step);
        let ctx = VideoFeatureContext::compute(&seq, &FlowParams::default()).unwrap();
        let feats = extract_level_features(&ctx, &h, 0).unwrap();
        let mean_b = block("mean_location_change").unwrap().start;
        let pct_b = block("location_change_percentiles").unwrap().start;
        let mag_b = block("location_change_magnitude").unwrap().start;
        for j in 5..FRAMES {
            let rec = feats[j].iter().find(|r| r.segment_id == 1).unwrap();
            let now = track(&seq, j);
            for (oi, &o) in OFFSETS.iter().enumerate() {
                let then = track(&seq, j - o);
                for c in 0..2 {
                    let want = now[0][c] - then[0][c];
                    assert_eq!(want, (o as i32 * [step.0, step.1][c]) as f64);
                    assert!((rec.values[mean_b + 2 * oi + c] as f64 - want).abs() < 1e-4, "frame {j} offset {o}");
                    let p10 = now[1][c] - then[1][c];
                    let p90 = now[2][c] - then[2][c];
                    assert!((rec.values[pct_b + 4 * oi + c] as f64 - p10).abs() < 1e-4);
                    assert!((rec.values[pct_b + 4 * oi + 2 + c] as f64 - p90).abs() < 1e-4);
                }
            }
            let far = 5.0 * ((step.0 * step.0 + step.1 * step.1) as f64).sqrt();
            assert!((rec.values[mag_b] as f64 - far).abs() < 1e-4);
        }
    }
}

// The flow estimator smooths across object boundaries, so the mean over
// the whole square falls short of the true shift; its interior does not.
#[test]
fn relative_flow_scales_with_the_offset() {
    let step = (1, 1);
    let (seq, h) = translating_square(4, step);
    let ctx = VideoFeatureContext::compute(&seq, &FlowParams::default()).unwrap();
    let feats = extract_level_features(&ctx, &h, 0).unwrap();
    let b = block("relative_mean_flow").unwrap().start;
    for j in 5..FRAMES {
        let (sx, sy) = square_origin(j, step);
        let mut prev = [0.0f64; 2];
        for (oi, om) in ctx.motion[j].iter().enumerate() {
            let o = om.offset as f64;
            let mean_over = |keep: &dyn Fn(i32, i32) -> bool| {
                let (mut s, mut n) = ([0.0f64; 2], 0.0);
                for y in 0..W as i32 {
                    for x in 0..W as i32 {
                        if keep(x, y) {
                            let i = (y as u32 * W + x as u32) as usize;
                            s[0] += om.motion.u[i] as f64;
                            s[1] += om.motion.v[i] as f64;
                            n += 1.0;
                        }
                    }
                }
                [s[0] / n, s[1] / n]
            };
            let inside = |x: i32, y: i32| in_square(x as u32, y as u32, j, step);
            let core = mean_over(&|x, y| x >= sx + 10 && x < sx + SIDE as i32 - 10 && y >= sy + 10 && y < sy + SIDE as i32 - 10);
            let sq = mean_over(&inside);
            let bg = mean_over(&|x, y| !inside(x, y));
            for c in 0..2 {
                let truth = o * [step.0, step.1][c] as f64;
                assert!((core[c] - truth).abs() < 0.6, "frame {j} offset {o}: interior {core:?}");
                let lo = sq[c].min(bg[c]);
                for rec in &feats[j] {
                    let want = if rec.segment_id == 1 { sq[c] } else { bg[c] } - lo;
                    let got = rec.values[b + 2 * oi + c] as f64;
                    assert!((got - want).abs() < 1e-4, "frame {j} offset {o}: {got} vs {want}");
                }
                let rel = sq[c] - lo;
                assert!(rel > prev[c] + 0.5 && rel <= truth + 0.1, "frame {j} offset {o}: {rel} after {}", prev[c]);
                prev[c] = rel;
            }
        }
    }
}

#[test]
fn early_frames_reuse_the_nearest_offset() {
    let (seq, h) = translating_square(5, (1, 0));
    let ctx = VideoFeatureContext::compute(&seq, &FlowParams::default()).unwrap();
    let feats = extract_level_features(&ctx, &h, 0).unwrap();
    let b = block("mean_location_change").unwrap().start;
    let sq = |j: usize| feats[j].iter().find(|r| r.segment_id == 1).unwrap();
    assert!(sq(0).values[b..b + 6].iter().all(|&x| x == 0.0));
    // frame 2 only reaches back one frame
    assert_eq!(&sq(2).values[b..b + 6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    // frame 4 reaches offsets 1 and 3
    assert_eq!(&sq(4).values[b..b + 6], &[1.0, 0.0, 3.0, 0.0, 3.0, 0.0]);
}
