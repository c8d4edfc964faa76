//! Dense optical flow by two-frame polynomial expansion (Farnebäck), plus the
//! Sobel differentials of a flow field.
//!
//! Each image is locally approximated by a quadratic polynomial
//! `f(p) ~ p'Ap + b'p + c` fitted under a Gaussian applicability. For a
//! displacement `d` between two frames the coefficients satisfy
//! `A d = -(b2 - b1) / 2`; the flow is the windowed least-squares solution of
//! that relation, refined coarse to fine over an image pyramid.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_store::Frame;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frames differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("kernel size {0} is not one of 3, 5, 7")]
    BadKernelSize(usize),
    #[error("corrupt flow file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Number of pyramid levels including the full-resolution one.
    pub pyramid_levels: usize,
    pub pyr_scale: f32,
    /// Side of the box window over which the displacement constraints are
    /// averaged.
    pub window: usize,
    pub iterations: usize,
    /// Half-width of the polynomial fitting neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyr_scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

/// Per-pixel displacement from frame `from_index` to frame `to_index`:
/// `to(x + u, y + v) ~ from(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub from_index: usize,
    pub to_index: usize,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32, from_index: usize, to_index: usize) -> Self {
        let n = (width * height) as usize;
        FlowField {
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            from_index,
            to_index,
        }
    }

    pub fn uniform(width: u32, height: u32, u: f32, v: f32) -> Self {
        let n = (width * height) as usize;
        FlowField {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
            from_index: 0,
            to_index: 1,
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> (f32, f32) {
        (self.u[i], self.v[i])
    }

    pub fn scaled(&self, s: f32) -> FlowField {
        FlowField {
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
            ..self.clone()
        }
    }

    /// Median of u and v over the pixels at least `margin` away from every
    /// border.
    pub fn interior_median(&self, margin: u32) -> (f32, f32) {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let i = (y * self.width + x) as usize;
                us.push(self.u[i]);
                vs.push(self.v[i]);
            }
        }
        (median(&mut us), median(&mut vs))
    }

    /// Cache layout: little-endian `u32` width, `u32` height, then the u plane
    /// and the v plane as `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        for plane in [&self.u, &self.v] {
            for x in plane.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, from_index: usize, to_index: usize) -> Result<Self, FlowError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let width = u32::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let height = u32::from_le_bytes(word);
        let n = width as usize * height as usize;
        if n == 0 || n > (1 << 28) {
            return Err(FlowError::Corrupt(format!("bad dimensions {width}x{height}")));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let floats: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (u, v) = floats.split_at(n);
        Ok(FlowField {
            width,
            height,
            u: u.to_vec(),
            v: v.to_vec(),
            from_index,
            to_index,
        })
    }

    /// Saves to `dir/<from>_<to>.bin`.
    pub fn save_cache(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}_{}.bin", self.from_index, self.to_index));
        let mut buf = Vec::with_capacity(8 + self.u.len() * 8);
        self.write_to(&mut buf)?;
        fs::write(path, buf)
    }

    pub fn load_cache(dir: &Path, from_index: usize, to_index: usize) -> Result<Self, FlowError> {
        let bytes = fs::read(dir.join(format!("{from_index}_{to_index}.bin")))?;
        Self::read_from(&bytes[..], from_index, to_index)
    }
}

fn median(xs: &mut [f32]) -> f32 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f32::total_cmp);
    xs[xs.len() / 2]
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (sigma * 3.0).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Separable correlation with border replication.
fn separable(p: &Plane, kx: &[f32], ky: &[f32]) -> Plane {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for (k, c) in kx.iter().enumerate() {
                acc += c * p.get_clamped(x as isize + k as isize - rx, y as isize);
            }
            tmp[y * p.w + x] = acc;
        }
    }
    let tmp = Plane {
        w: p.w,
        h: p.h,
        data: tmp,
    };
    let mut out = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for (k, c) in ky.iter().enumerate() {
                acc += c * tmp.get_clamped(x as isize, y as isize + k as isize - ry);
            }
            out[y * p.w + x] = acc;
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        data: out,
    }
}

fn box_blur(p: &Plane, size: usize) -> Plane {
    let k = vec![1.0 / size as f32; size];
    separable(p, &k, &k)
}

/// Bilinear resample to `w x h` (pixel centres aligned).
fn resize(p: &Plane, w: usize, h: usize) -> Plane {
    let sx = p.w as f32 / w as f32;
    let sy = p.h as f32 / h as f32;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (p.h - 1) as f32);
        for x in 0..w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (p.w - 1) as f32);
            data.push(bilinear(p, fx, fy));
        }
    }
    Plane { w, h, data }
}

#[inline]
fn bilinear(p: &Plane, fx: f32, fy: f32) -> f32 {
    let x0 = fx.floor() as isize;
    let y0 = fy.floor() as isize;
    let ax = fx - x0 as f32;
    let ay = fy - y0 as f32;
    let v00 = p.get_clamped(x0, y0);
    let v10 = p.get_clamped(x0 + 1, y0);
    let v01 = p.get_clamped(x0, y0 + 1);
    let v11 = p.get_clamped(x0 + 1, y0 + 1);
    (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11)
}

/// Quadratic expansion coefficients per pixel: `[b1, b2, a11, a22, a12]`
/// with `A = [[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone)]
struct Expansion {
    w: usize,
    h: usize,
    coef: Vec<[f32; 5]>,
}

fn poly_expand(img: &Plane, n: usize, sigma: f32) -> Expansion {
    let n = n as isize;
    let g: Vec<f64> = (-n..=n)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();

    // Gram matrix of the basis [1, x, y, x^2, y^2, xy] under the applicability.
    let mut gram = SMatrix::<f64, 6, 6>::zeros();
    for (jy, y) in (-n..=n).enumerate() {
        for (jx, x) in (-n..=n).enumerate() {
            let (xf, yf) = (x as f64, y as f64);
            let basis = [1.0, xf, yf, xf * xf, yf * yf, xf * yf];
            let wgt = g[jx] * g[jy];
            for a in 0..6 {
                for b in 0..6 {
                    gram[(a, b)] += wgt * basis[a] * basis[b];
                }
            }
        }
    }
    let ginv = gram.try_inverse().expect("applicability gram matrix is invertible");

    let g0: Vec<f32> = g.iter().map(|&v| v as f32).collect();
    let g1: Vec<f32> = (-n..=n).zip(&g).map(|(i, &v)| (i as f64 * v) as f32).collect();
    let g2: Vec<f32> = (-n..=n)
        .zip(&g)
        .map(|(i, &v)| ((i * i) as f64 * v) as f32)
        .collect();
    let (w, h) = (img.w, img.h);
    let r = n as usize;

    // Row pass: moments 0, 1, 2 along x.
    let mut rows = vec![[0.0f32; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut m = [0.0f32; 3];
            for k in 0..g0.len() {
                let v = img.get_clamped(x as isize + k as isize - r as isize, y as isize);
                m[0] += g0[k] * v;
                m[1] += g1[k] * v;
                m[2] += g2[k] * v;
            }
            rows[y * w + x] = m;
        }
    }
    let mut coef = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // r = [1, x, y, xx, yy, xy] correlations
            let mut rv = [0.0f64; 6];
            for k in 0..g0.len() {
                let yy = (y as isize + k as isize - r as isize).clamp(0, h as isize - 1) as usize;
                let m = rows[yy * w + x];
                rv[0] += (g0[k] * m[0]) as f64;
                rv[1] += (g0[k] * m[1]) as f64;
                rv[2] += (g1[k] * m[0]) as f64;
                rv[3] += (g0[k] * m[2]) as f64;
                rv[4] += (g2[k] * m[0]) as f64;
                rv[5] += (g1[k] * m[1]) as f64;
            }
            let mut c = [0.0f64; 6];
            for a in 0..6 {
                for b in 0..6 {
                    c[a] += ginv[(a, b)] * rv[b];
                }
            }
            coef.push([
                c[1] as f32,
                c[2] as f32,
                c[3] as f32,
                c[4] as f32,
                (c[5] * 0.5) as f32,
            ]);
        }
    }
    Expansion { w, h, coef }
}

/// Expansions of one frame at every pyramid level, reusable across all the
/// pairs the frame takes part in.
#[derive(Debug, Clone)]
pub struct FlowPyramid {
    width: u32,
    height: u32,
    index: usize,
    levels: Vec<Expansion>,
}

const MIN_LEVEL_SIDE: usize = 12;

impl FlowPyramid {
    pub fn new(frame: &Frame, params: &FlowParams) -> Self {
        Self::from_luma(&frame.luma(), frame.width, frame.height, frame.index, params)
    }

    pub fn from_luma(luma: &[f32], width: u32, height: u32, index: usize, params: &FlowParams) -> Self {
        let base = Plane {
            w: width as usize,
            h: height as usize,
            data: luma.to_vec(),
        };
        let mut levels = Vec::new();
        for k in 0..params.pyramid_levels.max(1) {
            let scale = params.pyr_scale.powi(k as i32);
            let w = (base.w as f32 * scale).round() as usize;
            let h = (base.h as f32 * scale).round() as usize;
            if k > 0 && w.min(h) < MIN_LEVEL_SIDE {
                break;
            }
            let level_img = if k == 0 {
                base.clone()
            } else {
                let sigma = (1.0 / scale - 1.0) * 0.5;
                let kern = gaussian_kernel(sigma);
                resize(&separable(&base, &kern, &kern), w, h)
            };
            levels.push(poly_expand(&level_img, params.poly_n, params.poly_sigma));
        }
        FlowPyramid {
            width,
            height,
            index,
            levels,
        }
    }
}

const BORDER_WEIGHTS: [f32; 5] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

#[inline]
fn border_weight(i: usize, n: usize) -> f32 {
    let mut s = 1.0;
    if i < BORDER_WEIGHTS.len() {
        s *= BORDER_WEIGHTS[i];
    }
    if n - 1 - i < BORDER_WEIGHTS.len() {
        s *= BORDER_WEIGHTS[n - 1 - i];
    }
    s
}

/// Per-pixel normal-equation terms `[g11, g12, g22, h1, h2]` for the current
/// displacement estimate.
fn update_matrices(e0: &Expansion, e1: &Expansion, u: &[f32], v: &[f32]) -> [Plane; 5] {
    let (w, h) = (e0.w, e0.h);
    let mut m: [Vec<f32>; 5] = std::array::from_fn(|_| vec![0.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (u[i], v[i]);
            let fx = x as f32 + dx;
            let fy = y as f32 + dy;
            if !(fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f32 && fy <= (h - 1) as f32) {
                continue;
            }
            // bilinear sample of the second expansion
            let x0 = (fx.floor() as usize).min(w - 1);
            let y0 = (fy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = fx - x0 as f32;
            let ay = fy - y0 as f32;
            let c00 = &e1.coef[y0 * w + x0];
            let c10 = &e1.coef[y0 * w + x1];
            let c01 = &e1.coef[y1 * w + x0];
            let c11 = &e1.coef[y1 * w + x1];
            let mut s = [0.0f32; 5];
            for k in 0..5 {
                s[k] = (1.0 - ay) * ((1.0 - ax) * c00[k] + ax * c10[k])
                    + ay * ((1.0 - ax) * c01[k] + ax * c11[k]);
            }
            let c0 = &e0.coef[i];
            let a11 = (c0[2] + s[2]) * 0.5;
            let a22 = (c0[3] + s[3]) * 0.5;
            let a12 = (c0[4] + s[4]) * 0.5;
            let mut b1 = (c0[0] - s[0]) * 0.5 + a11 * dx + a12 * dy;
            let mut b2 = (c0[1] - s[1]) * 0.5 + a12 * dx + a22 * dy;
            let scale = border_weight(x, w) * border_weight(y, h);
            let (a11, a22, a12) = (a11 * scale, a22 * scale, a12 * scale);
            b1 *= scale;
            b2 *= scale;
            m[0][i] = a11 * a11 + a12 * a12;
            m[1][i] = a12 * (a11 + a22);
            m[2][i] = a22 * a22 + a12 * a12;
            m[3][i] = a11 * b1 + a12 * b2;
            m[4][i] = a12 * b1 + a22 * b2;
        }
    }
    m.map(|data| Plane { w, h, data })
}

/// Flow between two precomputed pyramids.
pub fn estimate_flow_pyramids(
    a: &FlowPyramid,
    b: &FlowPyramid,
    params: &FlowParams,
) -> Result<FlowField, FlowError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(FlowError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let nlev = a.levels.len().min(b.levels.len());
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut cur = (0usize, 0usize);
    for lev in (0..nlev).rev() {
        let e0 = &a.levels[lev];
        let e1 = &b.levels[lev];
        if u.is_empty() {
            u = vec![0.0; e0.w * e0.h];
            v = vec![0.0; e0.w * e0.h];
        } else {
            let sx = e0.w as f32 / cur.0 as f32;
            let sy = e0.h as f32 / cur.1 as f32;
            let pu = Plane { w: cur.0, h: cur.1, data: u };
            let pv = Plane { w: cur.0, h: cur.1, data: v };
            u = resize(&pu, e0.w, e0.h).data.into_iter().map(|x| x * sx).collect();
            v = resize(&pv, e0.w, e0.h).data.into_iter().map(|x| x * sy).collect();
        }
        cur = (e0.w, e0.h);
        for _ in 0..params.iterations.max(1) {
            let m = update_matrices(e0, e1, &u, &v);
            let win = params.window.max(1);
            let m = m.map(|p| box_blur(&p, win));
            for i in 0..u.len() {
                let (g11, g12, g22, h1, h2) = (m[0].data[i], m[1].data[i], m[2].data[i], m[3].data[i], m[4].data[i]);
                let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
                u[i] = (g22 * h1 - g12 * h2) * idet;
                v[i] = (g11 * h2 - g12 * h1) * idet;
            }
        }
    }
    let mut flow = FlowField {
        width: a.width,
        height: a.height,
        u,
        v,
        from_index: a.index,
        to_index: b.index,
    };
    for x in flow.u.iter_mut().chain(flow.v.iter_mut()) {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
    Ok(flow)
}

/// Dense flow mapping frame `a` onto frame `b`, computed on luminance.
pub fn estimate_flow(a: &Frame, b: &Frame, params: &FlowParams) -> Result<FlowField, FlowError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(FlowError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let pa = FlowPyramid::new(a, params);
    let pb = FlowPyramid::new(b, params);
    estimate_flow_pyramids(&pa, &pb, params)
}

/// Sobel partial derivatives of both flow components.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDifferential {
    pub width: u32,
    pub height: u32,
    pub kernel_size: usize,
    pub dxu: Vec<f32>,
    pub dxv: Vec<f32>,
    pub dyu: Vec<f32>,
    pub dyv: Vec<f32>,
}

pub const SOBEL_SIZES: [usize; 3] = [3, 5, 7];

/// Smoothing and derivative taps of the Sobel operator of the given size,
/// scaled so that a unit ramp has derivative exactly 1.
pub fn sobel_kernels(kernel_size: usize) -> Result<(Vec<f32>, Vec<f32>), FlowError> {
    if !SOBEL_SIZES.contains(&kernel_size) {
        return Err(FlowError::BadKernelSize(kernel_size));
    }
    let binomial = |n: usize| -> Vec<f32> {
        let mut row = vec![1.0f32];
        for _ in 0..n {
            let mut next = vec![0.0; row.len() + 1];
            for (i, c) in row.iter().enumerate() {
                next[i] += c;
                next[i + 1] += c;
            }
            row = next;
        }
        row
    };
    let smooth = binomial(kernel_size - 1);
    let base = binomial(kernel_size - 3);
    let mut deriv = vec![0.0f32; kernel_size];
    for (i, c) in base.iter().enumerate() {
        deriv[i] -= c;
        deriv[i + 2] += c;
    }
    let ssum: f32 = smooth.iter().sum();
    let r = (kernel_size / 2) as isize;
    let dgain: f32 = deriv
        .iter()
        .enumerate()
        .map(|(i, c)| c * (i as isize - r) as f32)
        .sum();
    Ok((
        smooth.iter().map(|x| x / ssum).collect(),
        deriv.iter().map(|x| x / dgain).collect(),
    ))
}

pub fn flow_differentials(flow: &FlowField, kernel_size: usize) -> Result<FlowDifferential, FlowError> {
    let (smooth, deriv) = sobel_kernels(kernel_size)?;
    let (w, h) = (flow.width as usize, flow.height as usize);
    let pu = Plane { w, h, data: flow.u.clone() };
    let pv = Plane { w, h, data: flow.v.clone() };
    Ok(FlowDifferential {
        width: flow.width,
        height: flow.height,
        kernel_size,
        dxu: separable(&pu, &deriv, &smooth).data,
        dxv: separable(&pv, &deriv, &smooth).data,
        dyu: separable(&pu, &smooth, &deriv).data,
        dyv: separable(&pv, &smooth, &deriv).data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth random texture sampled at continuous coordinates so shifted
    /// copies are exact.
    pub(crate) fn texture(x: f32, y: f32) -> f32 {
        let mut v = 128.0;
        let waves = [
            (0.31, 0.17, 0.0, 30.0),
            (-0.13, 0.41, 1.0, 25.0),
            (0.53, -0.29, 2.0, 20.0),
            (0.07, 0.23, 0.5, 18.0),
            (0.71, 0.61, 1.7, 12.0),
        ];
        for (kx, ky, ph, amp) in waves {
            v += amp * (kx * x + ky * y + ph).sin();
        }
        v.clamp(0.0, 255.0)
    }

    fn textured_frame(index: usize, w: u32, h: u32, shift: (f32, f32)) -> Frame {
        let mut f = Frame::filled(index, w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let g = texture(x as f32 - shift.0, y as f32 - shift.1).round() as u8;
                f.set_pixel(x, y, [g, g, g]);
            }
        }
        f
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let a = textured_frame(0, 48, 40, (0.0, 0.0));
        let flow = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(flow.u.iter().chain(&flow.v).all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn constant_frames_have_zero_flow() {
        let a = Frame::filled(0, 32, 32, [90, 90, 90]);
        let b = Frame::filled(1, 32, 32, [90, 90, 90]);
        let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        assert!(flow.u.iter().chain(&flow.v).all(|&x| x == 0.0));
    }

    #[test]
    fn recovers_three_pixel_shift() {
        let a = textured_frame(0, 64, 64, (0.0, 0.0));
        let b = textured_frame(1, 64, 64, (3.0, 0.0));
        let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let (mu, mv) = flow.interior_median(8);
        assert!((2.5..=3.5).contains(&mu), "median u {mu}");
        assert!((-0.5..=0.5).contains(&mv), "median v {mv}");
    }

    #[test]
    fn reverse_flow_is_negated() {
        let a = textured_frame(0, 64, 64, (0.0, 0.0));
        let b = textured_frame(1, 64, 64, (2.0, 1.0));
        let p = FlowParams::default();
        let (fu, fv) = estimate_flow(&a, &b, &p).unwrap().interior_median(8);
        let (bu, bv) = estimate_flow(&b, &a, &p).unwrap().interior_median(8);
        assert!((fu + bu).abs() < 0.5 && (fv + bv).abs() < 0.5, "{fu},{fv} vs {bu},{bv}");
    }

    #[test]
    fn size_mismatch() {
        let a = Frame::filled(0, 8, 8, [0, 0, 0]);
        let b = Frame::filled(1, 9, 8, [0, 0, 0]);
        assert!(matches!(
            estimate_flow(&a, &b, &FlowParams::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn differential_of_constant_is_zero() {
        let f = FlowField::uniform(16, 12, 2.5, -1.0);
        for k in SOBEL_SIZES {
            let d = flow_differentials(&f, k).unwrap();
            for plane in [&d.dxu, &d.dxv, &d.dyu, &d.dyv] {
                assert!(plane.iter().all(|x| x.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn ramp_response_matches_hand_computation() {
        // u = x. Unscaled 3-tap Sobel in x: smoothing [1 2 1] (sum 4) times
        // derivative [-1 0 1] on a ramp (gain 2) gives 8; after the unit-ramp
        // scaling the interior response is exactly 1. dyu is 0.
        let (w, h) = (12u32, 10u32);
        let mut f = FlowField::zeros(w, h, 0, 1);
        for y in 0..h {
            for x in 0..w {
                f.u[(y * w + x) as usize] = x as f32;
            }
        }
        let d = flow_differentials(&f, 3).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = (y * w + x) as usize;
                assert!((d.dxu[i] - 1.0).abs() < 1e-6);
                assert!(d.dyu[i].abs() < 1e-6);
                assert!(d.dxv[i].abs() < 1e-6);
            }
        }
        // replicated border halves the central difference at the left edge
        assert!((d.dxu[(5 * w) as usize] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sobel_taps() {
        let (s, d) = sobel_kernels(5).unwrap();
        let raw_s = [1.0, 4.0, 6.0, 4.0, 1.0];
        let raw_d = [-1.0, -2.0, 0.0, 2.0, 1.0];
        for i in 0..5 {
            assert!((s[i] - raw_s[i] / 16.0).abs() < 1e-7);
            assert!((d[i] - raw_d[i] / 8.0).abs() < 1e-7);
        }
        let (_, d7) = sobel_kernels(7).unwrap();
        let raw7 = [-1.0, -4.0, -5.0, 0.0, 5.0, 4.0, 1.0];
        for i in 0..7 {
            assert!((d7[i] - raw7[i] / 32.0).abs() < 1e-7);
        }
    }

    #[test]
    fn bad_kernel_size() {
        let f = FlowField::zeros(4, 4, 0, 1);
        assert!(matches!(flow_differentials(&f, 4), Err(FlowError::BadKernelSize(4))));
    }

    #[test]
    fn differentials_are_linear() {
        let mut f = FlowField::zeros(10, 9, 0, 1);
        for i in 0..f.u.len() {
            f.u[i] = ((i * 37) % 11) as f32 * 0.25;
            f.v[i] = ((i * 17) % 7) as f32 * -0.5;
        }
        let alpha = 4.0; // power of two keeps the float products exact
        let d1 = flow_differentials(&f, 5).unwrap();
        let d2 = flow_differentials(&f.scaled(alpha), 5).unwrap();
        for (a, b) in d1.dxu.iter().zip(&d2.dxu).chain(d1.dyv.iter().zip(&d2.dyv)) {
            assert_eq!(a * alpha, *b);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::zeros(5, 3, 7, 6);
        f.u[2] = 1.5;
        f.v[14] = -2.25;
        f.save_cache(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("7_6.bin")).unwrap();
        assert_eq!(bytes.len(), 8 + 15 * 8);
        assert_eq!(&bytes[0..4], &5u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(FlowField::load_cache(dir.path(), 7, 6).unwrap(), f);
    }
}
