use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, PairedImage, MIN_RESOLUTION};
use crate::error::{Error, Result};

const NOISE_SIGMA: f64 = 0.02;

/// Shared geometry of one phantom, in unit image coordinates.
struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    ring_inner: f64,
    ring_width: f64,
    /// Angular gap in the ring as (center, half width), radians.
    ring_gap: Option<(f64, f64)>,
    heads: Option<(f64, f64)>,
    bladder: (f64, f64, f64, f64),
    fat_width: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Geometry {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(2.0..6.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.01..0.03),
                )
            })
            .collect();
        Self {
            cx: 0.5 + rng.random_range(-0.04..0.04),
            cy: 0.5 + rng.random_range(-0.04..0.04),
            a: rng.random_range(0.34..0.44),
            b: rng.random_range(0.28..0.40),
            angle: rng.random_range(-0.4..0.4),
            ring_inner: rng.random_range(0.52..0.66),
            ring_width: rng.random_range(0.12..0.18),
            ring_gap: rng
                .random_bool(0.5)
                .then(|| (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..0.8))),
            heads: rng
                .random_bool(0.6)
                .then(|| (rng.random_range(0.38..0.5), rng.random_range(0.09..0.14))),
            bladder: (
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.05..0.2),
                rng.random_range(0.14..0.28),
                rng.random_range(0.12..0.24),
            ),
            fat_width: rng.random_range(0.08..0.16),
            waves,
        }
    }
}

/// Logistic edge: 1 well inside (`d < 0`), 0 well outside, width `w`.
fn inside(d: f64, w: f64) -> f64 {
    1.0 / (1.0 + (d / w).exp())
}

fn render(g: &Geometry, id: String, res: usize, rng: &mut ChaCha8Rng) -> PairedImage {
    let n = res * res;
    let mut a_img = vec![0.0; n];
    let mut b_img = vec![0.0; n];
    let mut mask = vec![0.0; n];
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    // Edge softness in normalized body radius: about half a pixel.
    let edge = 0.5 / (res as f64 * g.b);
    let (sin, cos) = g.angle.sin_cos();
    for y in 0..res {
        for x in 0..res {
            let px = (x as f64 + 0.5) / res as f64 - g.cx;
            let py = (y as f64 + 0.5) / res as f64 - g.cy;
            let u = (cos * px + sin * py) / g.a;
            let v = (-sin * px + cos * py) / g.b;
            let rho = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let body = inside(rho - 1.0, edge);
            let fat = body * (1.0 - inside(rho - (1.0 - g.fat_width), edge));
            let mut ring = inside(rho - (g.ring_inner + g.ring_width), edge)
                * (1.0 - inside(rho - g.ring_inner, edge));
            if let Some((c, hw)) = g.ring_gap {
                let d = (theta - c + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                    - std::f64::consts::PI;
                ring *= 1.0 - inside(d.abs() - hw, 0.05);
            }
            let mut bone = ring;
            if let Some((off, r)) = g.heads {
                for side in [-1.0, 1.0] {
                    let d = ((u - side * off).powi(2) + v * v).sqrt();
                    bone = bone.max(inside(d - r, edge));
                }
            }
            let (bx, by, ba, bb) = g.bladder;
            let bd = (((u - bx) / ba).powi(2) + ((v - by) / bb).powi(2)).sqrt();
            let bladder = inside(bd - 1.0, edge / ba.min(bb)) * (1.0 - bone);
            let texture: f64 = g
                .waves
                .iter()
                .map(|&(f, ph1, ph2, amp)| {
                    amp * (std::f64::consts::TAU * f * (px * ph1.cos() + py * ph1.sin()) + ph2).sin()
                })
                .sum();
            let tissue = (0.55 + 4.0 * texture).clamp(0.0, 1.0);

            // CT analog: density-like. Fat slightly below tissue, fluid near water, bone bright.
            let soft_a = 0.38 + texture - 0.08 * fat;
            let val_a = body * (soft_a * (1.0 - bone) * (1.0 - bladder) + 0.40 * bladder + 0.95 * bone);
            // MRI analog: nonlinear remap of tissue, fat and fluid bright, cortical bone dark.
            let soft_b = 0.25 + 0.35 * tissue * tissue + 0.35 * fat;
            let val_b = body * (soft_b * (1.0 - bone) * (1.0 - bladder) + 0.88 * bladder + 0.08 * bone);

            let i = y * res + x;
            a_img[i] = val_a;
            b_img[i] = val_b;
            mask[i] = if rho < 1.0 { 1.0 } else { 0.0 };
        }
    }
    // Noise is drawn after geometry so the noise stream is independent of shape.
    for v in a_img.iter_mut().chain(b_img.iter_mut()) {
        *v = quantize((*v + noise.sample(rng)).clamp(0.0, 1.0));
    }
    PairedImage {
        sample_id: id,
        resolution: res,
        modality_a: a_img,
        modality_b: b_img,
        body_mask: Some(mask),
    }
}

/// Rounds to the nearest `f32` so that persistence round-trips exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates `n_samples` phantoms. Sample `i` depends only on `(seed, i, resolution)`.
pub fn make_dataset(n_samples: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let samples = (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let g = Geometry::sample(&mut rng);
            render(&g, format!("s{i:05}"), resolution, &mut rng)
        })
        .collect();
    Ok(Dataset {
        resolution,
        seed,
        samples,
    })
}
