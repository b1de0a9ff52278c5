use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::PairedImage;

/// Largest rotation, in degrees.
pub const MAX_ROTATE_DEG: f64 = 3.0;
/// Largest translation, as a fraction of the image side.
pub const MAX_FRAC: f64 = 0.05;
/// Largest elastic displacement, as a fraction of the image side.
pub const MAX_DEFORM: f64 = 0.1;
/// Smoothing of the elastic displacement field at 256 pixels; scaled
/// linearly with resolution.
const DEFORM_SIGMA_256: f64 = 32.0;
const DEFORM_RADIUS_256: f64 = 31.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformOp {
    Xflip,
    Rotate,
    Frac,
    Deform,
}

impl TransformOp {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "xflip" => Ok(Self::Xflip),
            "rotate" => Ok(Self::Rotate),
            "frac" => Ok(Self::Frac),
            "deform" => Ok(Self::Deform),
            other => Err(Error::invalid(format!(
                "unknown transform `{other}`, expected xflip, rotate, frac or deform"
            ))),
        }
    }

    fn max_magnitude(self) -> f64 {
        match self {
            Self::Xflip => 0.0,
            Self::Rotate => MAX_ROTATE_DEG,
            Self::Frac => MAX_FRAC,
            Self::Deform => MAX_DEFORM,
        }
    }
}

/// One operation with its magnitude: the rotation bound in degrees, the
/// translation bound or the peak elastic displacement as a fraction of the
/// side. `xflip` takes no magnitude and always flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformStep {
    pub op: TransformOp,
    #[serde(default)]
    pub magnitude: f64,
}

/// Operations applied in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformSpec(pub Vec<TransformStep>);

impl Default for TransformSpec {
    /// xflip, rotate ±3°, translate ±5%, elastic deformation up to 3%.
    fn default() -> Self {
        Self(vec![
            TransformStep { op: TransformOp::Xflip, magnitude: 0.0 },
            TransformStep { op: TransformOp::Rotate, magnitude: MAX_ROTATE_DEG },
            TransformStep { op: TransformOp::Frac, magnitude: MAX_FRAC },
            TransformStep { op: TransformOp::Deform, magnitude: 0.03 },
        ])
    }
}

impl TransformSpec {
    /// Parses `name[:magnitude],...`, e.g. `xflip,rotate:3,frac:0.05`; a
    /// missing magnitude means the largest allowed one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, mag) = match part.split_once(':') {
                Some((n, m)) => (
                    n,
                    Some(
                        m.parse::<f64>()
                            .map_err(|_| Error::invalid(format!("bad magnitude in transform `{part}`")))?,
                    ),
                ),
                None => (part, None),
            };
            let op = TransformOp::parse(name)?;
            let magnitude = mag.unwrap_or_else(|| op.max_magnitude());
            steps.push(TransformStep { op, magnitude });
        }
        let spec = Self(steps);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.0 {
            let max = s.op.max_magnitude();
            if !(0.0..=max).contains(&s.magnitude) {
                return Err(Error::invalid(format!(
                    "{:?} magnitude {} outside [0, {max}]",
                    s.op, s.magnitude
                )));
            }
        }
        Ok(())
    }
}

/// A single-channel raster warp: output pixel `(y, x)` samples the source at
/// `map(y, x)` bilinearly, zero outside.
fn warp(src: &[f64], res: usize, map: &dyn Fn(usize, usize) -> (f64, f64)) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= res as isize || x >= res as isize {
            0.0
        } else {
            src[y as usize * res + x as usize]
        }
    };
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let (sy, sx) = map(y, x);
            let (fy, fx) = (sy.floor(), sx.floor());
            let (ty, tx) = (sy - fy, sx - fx);
            let (iy, ix) = (fy as isize, fx as isize);
            out[y * res + x] = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let t = i as f64 - radius as f64;
            (-0.5 * t * t / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding.
fn blur(field: &[f64], res: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; res * res];
        for y in 0..res {
            for x in 0..res {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let off = k as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + off) } else { (y as isize + off, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < res && (xx as usize) < res {
                        acc += w * src[yy as usize * res + xx as usize];
                    }
                }
                out[y * res + x] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Smoothed random displacement field scaled so its largest component is
/// `peak` pixels.
fn displacement<R: Rng + ?Sized>(rng: &mut R, res: usize, peak: f64) -> (Vec<f64>, Vec<f64>) {
    let scale = res as f64 / 256.0;
    let sigma = (DEFORM_SIGMA_256 * scale).max(0.5);
    let radius = ((DEFORM_RADIUS_256 * scale).round() as usize).max(1);
    let kernel = gaussian_kernel(sigma, radius);
    let mut field = || {
        let raw: Vec<f64> = (0..res * res).map(|_| rng.random_range(-1.0..1.0)).collect();
        blur(&raw, res, &kernel)
    };
    let (mut dy, mut dx) = (field(), field());
    let max = dy.iter().chain(&dx).fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for v in dy.iter_mut().chain(dx.iter_mut()) {
            *v *= peak / max;
        }
    }
    (dy, dx)
}

/// Applies `spec` in order with parameters drawn from `rng`. Both
/// modalities and the mask receive the same geometric transform; the mask
/// is re-binarized at 0.5.
pub fn standard_da<R: Rng + ?Sized>(x: &PairedImage, spec: &TransformSpec, rng: &mut R) -> Result<PairedImage> {
    spec.validate()?;
    let res = x.resolution;
    let c = (res as f64 - 1.0) / 2.0;
    let mut out = x.clone();
    for step in &spec.0 {
        let apply = |img: &PairedImage, map: &dyn Fn(usize, usize) -> (f64, f64)| PairedImage {
            modality_a: warp(&img.modality_a, res, map),
            modality_b: warp(&img.modality_b, res, map),
            body_mask: img
                .body_mask
                .as_ref()
                .map(|m| warp(m, res, map).into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()),
            ..img.clone()
        };
        out = match step.op {
            TransformOp::Xflip => {
                let flip = |v: &[f64]| -> Vec<f64> { v.chunks(res).flat_map(|r| r.iter().rev().copied()).collect() };
                PairedImage {
                    modality_a: flip(&out.modality_a),
                    modality_b: flip(&out.modality_b),
                    body_mask: out.body_mask.as_deref().map(flip),
                    ..out.clone()
                }
            }
            TransformOp::Rotate => {
                let theta = rng.random_range(-step.magnitude..=step.magnitude).to_radians();
                let (s, co) = theta.sin_cos();
                apply(&out, &|y, x| {
                    let (py, px) = (y as f64 - c, x as f64 - c);
                    (co * py - s * px + c, s * py + co * px + c)
                })
            }
            TransformOp::Frac => {
                let max = step.magnitude * res as f64;
                let ty = rng.random_range(-max..=max);
                let tx = rng.random_range(-max..=max);
                apply(&out, &|y, x| (y as f64 - ty, x as f64 - tx))
            }
            TransformOp::Deform => {
                let (dy, dx) = displacement(rng, res, step.magnitude * res as f64);
                apply(&out, &|y, x| (y as f64 + dy[y * res + x], x as f64 + dx[y * res + x]))
            }
        };
    }
    Ok(out)
}

/// Integer translation through the same warp path (used by tests of mask
/// alignment).
#[cfg(test)]
pub(crate) fn translate_int(x: &PairedImage, dy: i32, dx: i32) -> PairedImage {
    let res = x.resolution;
    let map = |y: usize, xx: usize| (y as f64 - dy as f64, xx as f64 - dx as f64);
    PairedImage {
        modality_a: warp(&x.modality_a, res, &map),
        modality_b: warp(&x.modality_b, res, &map),
        body_mask: x.body_mask.as_ref().map(|m| warp(m, res, &map)),
        ..x.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> PairedImage {
        crate::synthdata::make_dataset(1, 16, 4).unwrap().samples.remove(0)
    }

    #[test]
    fn empty_spec_and_double_flip_are_identity() {
        let x = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(standard_da(&x, &TransformSpec(vec![]), &mut rng).unwrap(), x);
        let spec = TransformSpec::parse("xflip,xflip").unwrap();
        assert_eq!(standard_da(&x, &spec, &mut rng).unwrap(), x);
    }

    #[test]
    fn integer_translation_keeps_mask_aligned() {
        let x = sample();
        let moved = translate_int(&x, 2, -1);
        let mask = x.body_mask.clone().unwrap();
        let moved_mask = moved.body_mask.clone().unwrap();
        for y in 0..16 {
            for xx in 0..16 {
                let (sy, sx) = (y as i32 - 2, xx as i32 + 1);
                let want = if (0..16).contains(&sy) && (0..16).contains(&sx) {
                    mask[sy as usize * 16 + sx as usize]
                } else {
                    0.0
                };
                assert_eq!(moved_mask[y * 16 + xx], want);
            }
        }
    }

    #[test]
    fn parse_and_ranges() {
        let spec = TransformSpec::parse("rotate,frac:0.02").unwrap();
        assert_eq!(spec.0[0].magnitude, MAX_ROTATE_DEG);
        assert_eq!(spec.0[1].magnitude, 0.02);
        assert!(TransformSpec::parse("rotate:4").is_err());
        assert!(TransformSpec::parse("shear").is_err());
        assert!(TransformSpec::default().validate().is_ok());
    }

    #[test]
    fn transforms_stay_in_unit_range() {
        let x = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = standard_da(&x, &TransformSpec::default(), &mut rng).unwrap();
            assert!(y.modality_a.iter().chain(&y.modality_b).all(|v| (0.0..=1.0).contains(v)));
            assert!(y.body_mask.unwrap().iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }
}
