use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, LayerSpec, NodeId, ParamSet, Tensor};

const WIDTHS: [usize; 3] = [8, 16, 32];
const STRIDES: [usize; 3] = [1, 2, 2];
const SLOPE: f64 = 0.2;
/// Images per graph when embedding large sets.
const CHUNK: usize = 64;

/// Fixed, seeded random convolutional feature extractor shared by the
/// perceptual distance, precision/recall and Fréchet distance.
///
/// Stands in for the pretrained VGG/Inception networks, which are not
/// available here.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    in_channels: usize,
    seed: u64,
    layers: Vec<LayerSpec>,
    params: ParamSet,
}

impl FeatureExtractor {
    pub const DESCRIPTION: &'static str =
        "seeded random 3-layer conv extractor (stand-in for pretrained VGG/Inception; not LPIPS/FID)";

    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, (&w, &s)) in WIDTHS.iter().zip(&STRIDES).enumerate() {
            let spec = LayerSpec::conv(format!("phi{i}"), cin, w, 3, s)
                .with_bias(false)
                .with_gain(2f64.sqrt());
            spec.init(&mut params, &mut rng);
            layers.push(spec);
            cin = w;
        }
        Self {
            in_channels,
            seed,
            layers,
            params,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Adds the extractor weights to `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        Ok(BoundParams::bind(g, &self.params, false)?)
    }

    /// Per-layer activations of `x` (`[N, C, H, W]`).
    pub fn layer_outputs(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> Result<Vec<NodeId>> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::invalid(format!(
                "feature extractor expects [N, {}, H, W], got {s:?}",
                self.in_channels
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for spec in &self.layers {
            h = spec.forward(g, p, h)?;
            h = g.leaky_relu(h, SLOPE)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Activations of a batch of images as plain tensors.
    pub fn activations(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let x = g.constant(images.clone());
        let outs = self.layer_outputs(&mut g, &p, x)?;
        Ok(outs.into_iter().map(|id| g.value(id).clone()).collect())
    }

    /// Per-sample `Σ_l ‖φ_l(a) − φ_l(b)‖² / (r_l c_l h_l)` for equally shaped batches.
    pub fn perceptual_distances(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "perceptual distance needs equal shapes, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let fa = self.activations(a)?;
        let fb = self.activations(b)?;
        let n = a.shape()[0];
        let mut out = vec![0.0; n];
        for (la, lb) in fa.iter().zip(&fb) {
            let m = la.numel() / n;
            for (i, o) in out.iter_mut().enumerate() {
                let sa = &la.data()[i * m..][..m];
                let sb = &lb.data()[i * m..][..m];
                *o += sa.iter().zip(sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m as f64;
            }
        }
        Ok(out)
    }

    pub fn perceptual_distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let lift = |t: &Tensor| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        };
        let (a, b) = if a.ndim() == 3 { (lift(a)?, lift(b)?) } else { (a.clone(), b.clone()) };
        Ok(self.perceptual_distances(&a, &b)?.iter().sum())
    }

    /// Fixed-length embedding per image: each layer average-pooled to 2x2,
    /// concatenated.
    pub fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let acts = self.activations(&images.slice_leading(start, len)?)?;
            for i in 0..len {
                let mut v = Vec::with_capacity(self.embedding_dim());
                for t in &acts {
                    pool_2x2(t, i, &mut v);
                }
                out.push(v);
            }
            start += len;
        }
        Ok(out)
    }

    pub fn embedding_dim(&self) -> usize {
        WIDTHS.iter().sum::<usize>() * 4
    }
}

/// Adaptive average pooling of sample `i` of `[N, C, H, W]` to 2x2.
fn pool_2x2(t: &Tensor, i: usize, out: &mut Vec<f64>) {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let bounds = |len: usize, k: usize| (k * len / 2, ((k + 1) * len).div_ceil(2));
    for ch in 0..c {
        let plane = &t.data()[(i * c + ch) * h * w..][..h * w];
        for ky in 0..2 {
            let (y0, y1) = bounds(h, ky);
            for kx in 0..2 {
                let (x0, x1) = bounds(w, kx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
}
