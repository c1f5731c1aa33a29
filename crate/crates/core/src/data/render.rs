use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Torso luminance below which an identity belongs to the black cohort.
pub const BLACK_LUMINANCE: f64 = 0.15;
/// Per-camera illumination scale, cameras numbered from 1.
pub const ILLUMINATION: [f64; 6] = [0.6, 0.7, 0.8, 0.9, 1.0, 1.1];
const TINT: [[f64; 3]; 6] = [
    [1.0, 0.97, 0.93],
    [0.95, 1.0, 1.04],
    [1.04, 1.0, 0.95],
    [0.97, 1.03, 0.98],
    [1.0, 1.0, 1.0],
    [0.96, 0.98, 1.05],
];
const NOISE_STD: f64 = 0.02;
const JITTER: f64 = 0.05;

pub fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub hair: [f64; 3],
    pub skin: [f64; 3],
    pub glasses: bool,
    /// Shoulder half-width as a fraction of half the image width.
    pub shoulder_ratio: f64,
    pub torso: [f64; 3],
    pub trousers: [f64; 3],
}

impl IdentitySpec {
    pub fn black(&self) -> bool {
        luminance(self.torso) < BLACK_LUMINANCE
    }

    /// Largest normalized difference over the head-shoulder attributes.
    pub fn head_shoulder_separation(&self, other: &Self) -> f64 {
        let linf = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let glasses = if self.glasses != other.glasses { 1.0 } else { 0.0 };
        let shoulder = (self.shoulder_ratio - other.shoulder_ratio).abs() / (SHOULDER_RANGE.1 - SHOULDER_RANGE.0);
        linf(self.hair, other.hair)
            .max(linf(self.skin, other.skin))
            .max(glasses)
            .max(shoulder)
    }

    pub fn validate(&self) -> Result<()> {
        let colors = [self.hair, self.skin, self.torso, self.trousers];
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("identity colors must lie in [0, 1]"));
        }
        if !(SHOULDER_RANGE.0..=SHOULDER_RANGE.1).contains(&self.shoulder_ratio) {
            return Err(Error::invalid(format!("shoulder ratio {} out of range", self.shoulder_ratio)));
        }
        Ok(())
    }
}

const SHOULDER_RANGE: (f64, f64) = (0.55, 0.9);
const SKIN_LIGHT: [f64; 3] = [0.96, 0.82, 0.72];
const SKIN_DARK: [f64; 3] = [0.36, 0.23, 0.16];

fn random_color(rng: &mut ChaCha8Rng, lum: (f64, f64)) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (lum.0..lum.1).contains(&luminance(c)) {
            return c;
        }
    }
}

fn random_identity(rng: &mut ChaCha8Rng, black: bool) -> IdentitySpec {
    let hair = random_color(rng, (0.08, 0.75));
    let t: f64 = rng.gen();
    let mut skin = [0.0; 3];
    for k in 0..3 {
        skin[k] = (SKIN_LIGHT[k] * (1.0 - t) + SKIN_DARK[k] * t + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    let glasses = rng.gen_bool(0.4);
    let shoulder_ratio = rng.gen_range(SHOULDER_RANGE.0..SHOULDER_RANGE.1);
    let (torso, trousers) = if black {
        let base = rng.gen_range(0.03..0.08);
        let torso = [0, 1, 2].map(|_| base + rng.gen_range(-0.01..0.01));
        let base = rng.gen_range(0.03..0.12);
        (torso, [0, 1, 2].map(|_| base + rng.gen_range(-0.015..0.015)))
    } else {
        (random_color(rng, (0.3, 0.95)), random_color(rng, (0.15, 0.9)))
    };
    IdentitySpec {
        hair,
        skin,
        glasses,
        shoulder_ratio,
        torso,
        trousers,
    }
}

/// Whether identity `i` of `n` is in the black cohort; spreads `n_black` evenly.
pub fn is_black_slot(i: usize, n: usize, n_black: usize) -> bool {
    (i + 1) * n_black / n > i * n_black / n
}

/// Draws `n` identities; black-cohort members are pairwise separated by at
/// least `min_separation` in some head-shoulder attribute.
pub fn sample_identities(seed: u64, n: usize, n_black: usize, min_separation: f64) -> Result<Vec<IdentitySpec>> {
    const MAX_TRIES: usize = 10_000;
    let mut rng = rng::stream(seed, rng::IDENTITIES, 0);
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(n);
    for i in 0..n {
        let black = is_black_slot(i, n, n_black);
        let spec = (0..MAX_TRIES)
            .map(|_| random_identity(&mut rng, black))
            .find(|s| {
                !black
                    || out
                        .iter()
                        .filter(|o| o.black())
                        .all(|o| o.head_shoulder_separation(s) >= min_separation)
            })
            .ok_or_else(|| {
                Error::invalid(format!(
                    "cannot place {n_black} black identities with head-shoulder separation {min_separation}"
                ))
            })?;
        out.push(spec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSample {
    pub image: Image,
    pub id: usize,
    /// Camera number, starting at 1.
    pub camera: u8,
    pub black: bool,
    /// Head-shoulder box as normalized `[left, top, right, bottom]`.
    pub bbox: [f64; 4],
    pub split: Split,
}

/// Body layout in normalized coordinates for one rendered sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub cx: f64,
    pub head_cy: f64,
    pub head_rx: f64,
    pub head_ry: f64,
    pub shoulder_y: f64,
    pub shoulder_hw: f64,
    pub hip_y: f64,
    pub feet_y: f64,
}

impl Layout {
    fn draw(spec: &IdentitySpec, rng: &mut ChaCha8Rng) -> Self {
        let mut j = |scale: f64| 1.0 + rng.gen_range(-JITTER..JITTER) * scale;
        let dx = j(1.0) - 1.0;
        let dy = j(1.0) - 1.0;
        let size = j(1.0);
        Layout {
            cx: 0.5 + dx,
            head_cy: 0.14 + dy * 0.5,
            head_rx: 0.17 * size,
            head_ry: 0.075 * size,
            shoulder_y: 0.27 + dy * 0.5,
            shoulder_hw: 0.5 * spec.shoulder_ratio * j(0.5),
            hip_y: 0.6 + dy * 0.5,
            feet_y: 0.95,
        }
    }

    pub fn head_shoulder_box(&self) -> [f64; 4] {
        const PAD: f64 = 0.02;
        const INSET: f64 = 0.005;
        [
            (self.cx - self.shoulder_hw - PAD).max(INSET),
            (self.head_cy - self.head_ry * 1.15 - PAD).max(INSET),
            (self.cx + self.shoulder_hw + PAD).min(1.0 - INSET),
            (self.shoulder_y + 0.12).min(1.0 - INSET),
        ]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Background,
    Hair,
    Face,
    Glasses,
    Torso,
    Trousers,
}

fn part_at(l: &Layout, spec: &IdentitySpec, u: f64, v: f64) -> Part {
    let hx = (u - l.cx) / l.head_rx;
    let hy = (v - l.head_cy) / l.head_ry;
    let head = hx * hx + hy * hy;
    // hair: a cap slightly larger than the head over its upper part
    if hy < -0.25 && hx * hx / 1.25 + hy * hy / 1.3 <= 1.0 {
        return Part::Hair;
    }
    if head <= 1.0 {
        let eye = (hy - 0.05).abs() < 0.16;
        if spec.glasses && eye {
            return Part::Glasses;
        }
        return Part::Face;
    }
    let neck_top = l.head_cy + l.head_ry * 0.8;
    if v >= neck_top && v < l.shoulder_y && (u - l.cx).abs() < 0.09 {
        return Part::Face;
    }
    if v >= l.shoulder_y && v < l.hip_y {
        // rounded shoulders over the first 0.05, then a taper to the hips
        let t = (v - l.shoulder_y) / (l.hip_y - l.shoulder_y);
        let mut hw = l.shoulder_hw + (0.24 - l.shoulder_hw) * t;
        let cap = (v - l.shoulder_y) / 0.05;
        if cap < 1.0 {
            hw *= (1.0 - (1.0 - cap) * (1.0 - cap)).sqrt().max(0.35);
        }
        if (u - l.cx).abs() <= hw {
            return Part::Torso;
        }
    }
    if v >= l.hip_y && v < l.feet_y {
        let d = (u - l.cx).abs();
        if (0.02..0.22).contains(&d) {
            return Part::Trousers;
        }
    }
    Part::Background
}

/// Renders one sample. Pure function of `(spec, camera, seed)`.
pub fn render_sample(spec: &IdentitySpec, camera: u8, seed: u64, height: usize, width: usize) -> Result<Image> {
    spec.validate()?;
    let (image, _) = render_with_layout(spec, camera, seed, height, width)?;
    Ok(image)
}

pub(crate) fn render_with_layout(
    spec: &IdentitySpec,
    camera: u8,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<(Image, Layout)> {
    let cam = camera as usize;
    if !(1..=ILLUMINATION.len()).contains(&cam) {
        return Err(Error::invalid(format!("camera {camera} outside 1..={}", ILLUMINATION.len())));
    }
    let mut rng = rng::stream(seed, rng::SAMPLES, 0);
    let layout = Layout::draw(spec, &mut rng);
    let light = ILLUMINATION[cam - 1];
    let tint = TINT[cam - 1];
    let bg_base = random_color(&mut rng, (0.25, 0.7));
    let bg_grad = rng.gen_range(-0.15..0.15);
    // a few background clutter rectangles
    let clutter: Vec<([f64; 4], [f64; 3])> = (0..rng.gen_range(1..4))
        .map(|_| {
            let u0 = rng.gen_range(0.0..0.8);
            let v0 = rng.gen_range(0.0..0.85);
            let r = [u0, v0, u0 + rng.gen_range(0.1..0.4), v0 + rng.gen_range(0.05..0.3)];
            (r, random_color(&mut rng, (0.1, 0.9)))
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = vec![0f32; 3 * height * width];
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let part = part_at(&layout, spec, u, v);
            let (base, texture) = match part {
                Part::Hair => (spec.hair, 0.03),
                Part::Face => (spec.skin, 0.01),
                Part::Glasses => ([0.05, 0.05, 0.07], 0.0),
                Part::Torso => (spec.torso, if spec.black() { 0.005 } else { 0.03 }),
                Part::Trousers => (spec.trousers, 0.02),
                Part::Background => {
                    let inside = clutter
                        .iter()
                        .rev()
                        .find(|(r, _)| u >= r[0] && u < r[2] && v >= r[1] && v < r[3]);
                    match inside {
                        Some((_, c)) => (*c, 0.02),
                        None => (bg_base.map(|c| c + bg_grad * (v - 0.5)), 0.02),
                    }
                }
            };
            let tex = texture * rng.gen_range(-1.0..1.0);
            for c in 0..3 {
                let val = (base[c] + tex) * light * tint[c] + noise.sample(&mut rng);
                data[(c * height + y) * width + x] = quantize(val);
            }
        }
    }
    Ok((Image::new(height, width, data)?, layout))
}

/// Clamps to [0, 1] and rounds to the nearest 8-bit level.
pub fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Mean luminance of the torso region of a rendered sample, after illumination.
#[cfg(test)]
pub(crate) fn torso_luminance(image: &Image, layout: &Layout) -> f64 {
    let (h, w) = (image.height, image.width);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        if v < layout.shoulder_y + 0.06 || v >= layout.hip_y - 0.02 {
            continue;
        }
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            if (u - layout.cx).abs() < 0.2 {
                let px = image.pixel(y, x);
                sum += luminance([px[0] as f64, px[1] as f64, px[2] as f64]);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}
