use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{load_params, save_params, BoundParams, Graph, LayerSpec, NodeId, ParamSet, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
/// Image channels produced by the generator (modalities A and B).
pub const IMAGE_CHANNELS: usize = 2;

/// Network sizes. Feature widths shrink from `base_channels` at 8x8 and
/// below by half per doubling of resolution, never under `min_channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanArch {
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_depth: usize,
    pub base_channels: usize,
    pub min_channels: usize,
}

impl GanArch {
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            latent_dim: 64,
            mapping_depth: 2,
            base_channels: 32,
            min_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::invalid(format!("GAN resolution must be a power of two >= 8, got {r}")));
        }
        if self.latent_dim == 0 || self.mapping_depth == 0 || self.min_channels == 0 {
            return Err(Error::invalid("latent_dim, mapping_depth and min_channels must be positive"));
        }
        if self.min_channels > self.base_channels {
            return Err(Error::invalid("min_channels exceeds base_channels"));
        }
        Ok(())
    }

    fn width(&self, res: usize) -> usize {
        (self.base_channels * 8 / res.max(8)).clamp(self.min_channels, self.base_channels)
    }

    /// Resolutions of the generator stages after the 4x4 seed.
    fn stages(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = 8;
        while r <= self.resolution {
            out.push(r);
            r *= 2;
        }
        out
    }
}

/// Which parameters a graph should treat as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Discriminator,
    MappingAndGenerator,
}

/// Mapping network, generator and discriminator plus the empirical mean latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub arch: GanArch,
    params: ParamSet,
    w_mean: Tensor,
}

const MAP: &str = "map.";
const GEN: &str = "gen.";
const DISC: &str = "disc.";

impl GanModel {
    /// Fresh model with standard-normal weights (scaled at run time) and `w̄ = 0`.
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in mapping_layers(&arch)
            .into_iter()
            .chain(generator_layers(&arch).into_iter().map(|(l, _)| l))
            .chain(generator_layers(&arch).into_iter().flat_map(|(_, m)| m))
            .chain(discriminator_layers(&arch))
        {
            spec.init(&mut params, &mut rng);
        }
        let w_mean = Tensor::zeros(&[arch.latent_dim]);
        Ok(Self { arch, params, w_mean })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn w_mean(&self) -> &Tensor {
        &self.w_mean
    }

    pub fn set_w_mean(&mut self, w_mean: Tensor) -> Result<()> {
        if w_mean.shape() != [self.arch.latent_dim] {
            return Err(Error::invalid(format!("w_mean must have shape [{}]", self.arch.latent_dim)));
        }
        self.w_mean = w_mean;
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Result<BoundParams> {
        let train_prefixes: &[&str] = match trainable {
            Trainable::None => &[],
            Trainable::Discriminator => &[DISC],
            Trainable::MappingAndGenerator => &[MAP, GEN],
        };
        let mut bound = BoundParams::default();
        for prefix in [MAP, GEN, DISC] {
            let part = self.params.filter_prefix(prefix);
            bound.extend(g, &part, train_prefixes.contains(&prefix))?;
        }
        Ok(bound)
    }

    fn check_latent(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.arch.latent_dim {
            return Err(Error::invalid(format!(
                "{what} must have shape [N, {}], got {shape:?}",
                self.arch.latent_dim
            )));
        }
        Ok(())
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let r = self.arch.resolution;
        if shape.len() != 4 || shape[1..] != [IMAGE_CHANNELS, r, r] {
            return Err(Error::invalid(format!(
                "images must have shape [N, {IMAGE_CHANNELS}, {r}, {r}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// `F(z)` for `z` of shape `[N, d_w]`.
    pub fn mapping_graph(&self, g: &mut Graph, p: &BoundParams, z: NodeId) -> Result<NodeId> {
        self.check_latent(g.shape(z), "z")?;
        let mut h = z;
        for spec in mapping_layers(&self.arch) {
            h = spec.forward(g, p, h)?;
            h = g.leaky_relu(h, LRELU_SLOPE)?;
        }
        Ok(h)
    }

    /// `G(w)` for `w` of shape `[N, d_w]`; output `[N, 2, r, r]` in (0, 1).
    pub fn generator_graph(&self, g: &mut Graph, p: &BoundParams, w: NodeId) -> Result<NodeId> {
        self.check_latent(g.shape(w), "w")?;
        let n = g.shape(w)[0];
        let layers = generator_layers(&self.arch);
        let mut x = w;
        for (i, (spec, mods)) in layers.iter().enumerate() {
            if i == 0 {
                // Seed block: dense projection to a 4x4 feature map.
                let c = self.arch.width(4);
                x = spec.forward(g, p, w)?;
                x = g.reshape(x, &[n, c, 4, 4])?;
            } else if let LayerSpec::Conv { kernel: 3, .. } = spec {
                x = g.upsample2(x)?;
                x = spec.forward(g, p, x)?;
            } else {
                // 1x1 projection to image channels.
                x = spec.forward(g, p, x)?;
                return Ok(g.sigmoid(x)?);
            }
            if let [scale, shift] = mods.as_slice() {
                x = modulate(g, p, x, w, scale, shift)?;
            }
            x = g.leaky_relu(x, LRELU_SLOPE)?;
        }
        Err(Error::invalid("generator has no output layer"))
    }

    /// Realness logits `[N]` for images `[N, 2, r, r]`.
    pub fn discriminator_graph(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        self.check_image(g.shape(x))?;
        let n = g.shape(x)[0];
        let layers = discriminator_layers(&self.arch);
        let (head, convs) = layers.split_last().expect("discriminator has layers");
        let (hidden, convs) = convs.split_last().expect("discriminator has layers");
        let mut h = x;
        for (i, spec) in convs.iter().enumerate() {
            h = spec.forward(g, p, h)?;
            h = g.leaky_relu(h, LRELU_SLOPE)?;
            if i > 0 {
                h = g.avgpool2(h)?;
            }
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        h = g.reshape(h, &[n, flat])?;
        h = hidden.forward(g, p, h)?;
        h = g.leaky_relu(h, LRELU_SLOPE)?;
        h = head.forward(g, p, h)?;
        Ok(g.reshape(h, &[n])?)
    }

    /// `w = F(z)`.
    pub fn mapping(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z.shape(), "z")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, Trainable::None)?;
        let zi = g.constant(z.clone());
        let w = self.mapping_graph(&mut g, &p, zi)?;
        Ok(g.value(w).clone())
    }

    /// `G(w)`.
    pub fn generate(&self, w: &Tensor) -> Result<Tensor> {
        self.check_latent(w.shape(), "w")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, Trainable::None)?;
        let wi = g.constant(w.clone());
        let x = self.generator_graph(&mut g, &p, wi)?;
        Ok(g.value(x).clone())
    }

    /// `D(x)` per image.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_image(x.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, Trainable::None)?;
        let xi = g.constant(x.clone());
        let d = self.discriminator_graph(&mut g, &p, xi)?;
        Ok(g.value(d).data().to_vec())
    }

    /// Mean over the batch of `‖∇_x D(x)‖²`.
    pub fn r1_penalty(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, Trainable::None)?;
        let xi = g.input("x_real", x.clone())?;
        let r1 = r1_graph(self, &mut g, &p, xi)?;
        Ok(g.scalar(r1)?)
    }

    /// Mean of `F(z)` over `n` standard-normal draws, processed in chunks.
    pub fn estimate_w_mean(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("w̄ needs at least one sample"));
        }
        let d = self.arch.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; d];
        let mut done = 0;
        while done < n {
            let len = 500.min(n - done);
            let w = self.mapping(&Tensor::randn(&[len, d], &mut rng))?;
            for row in w.data().chunks(d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            done += len;
        }
        Ok(Tensor::new(vec![d], acc.into_iter().map(|a| a / n as f64).collect())?)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut all = self.params.clone();
        all.insert(W_MEAN, self.w_mean.clone());
        let meta = serde_json::json!({ "arch": self.arch, "info": meta });
        Ok(save_params(path, &all, meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ck = load_params(path)?;
        let arch: GanArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::format(path.display().to_string(), format!("bad architecture: {e}")))?;
        let reference = GanModel::new(arch.clone(), 0)?;
        let params = ck.params;
        let w_mean = params
            .get(W_MEAN)
            .cloned()
            .ok_or_else(|| Error::format(path.display().to_string(), "missing w_mean"))?;
        let mut model = Self {
            arch,
            params: ParamSet::new(),
            w_mean: Tensor::zeros(&[1]),
        };
        for (name, t) in reference.params.iter() {
            let loaded = params
                .get(name)
                .ok_or_else(|| Error::format(path.display().to_string(), format!("missing parameter `{name}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("parameter `{name}` has shape {:?}, expected {:?}", loaded.shape(), t.shape()),
                ));
            }
            model.params.insert(name.clone(), loaded.clone());
        }
        model.set_w_mean(w_mean)?;
        Ok(model)
    }
}

const W_MEAN: &str = "w_mean";

/// `mean_n ‖∇_{x_n} D(x)‖²` as a graph node; `x` must be a differentiable input.
pub(crate) fn r1_graph(model: &GanModel, g: &mut Graph, p: &BoundParams, x: NodeId) -> Result<NodeId> {
    let logits = model.discriminator_graph(g, p, x)?;
    r1_from_logits(g, x, logits)
}

/// `mean_n ‖∇_{x_n} logits_n‖²` for per-sample `logits` computed from `x`
/// (shape `[N, ...]`). Samples must not interact.
pub fn r1_from_logits(g: &mut Graph, x: NodeId, logits: NodeId) -> Result<NodeId> {
    let n = g.shape(x)[0] as f64;
    let total = g.sum(logits)?;
    let gx = g.grad(total, &[x])?[0];
    let sq = g.square(gx)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / n)?)
}

/// Channelwise `x * (1 + A_s(w)) + A_b(w)`.
fn modulate(
    g: &mut Graph,
    p: &BoundParams,
    x: NodeId,
    w: NodeId,
    scale: &LayerSpec,
    shift: &LayerSpec,
) -> Result<NodeId> {
    let spatial = g.shape(x)[2..].to_vec();
    let s = scale.forward(g, p, w)?;
    let s = g.add_scalar(s, 1.0)?;
    let s = g.expand_trailing(s, &spatial)?;
    let b = shift.forward(g, p, w)?;
    let b = g.expand_trailing(b, &spatial)?;
    let y = g.mul(x, s)?;
    Ok(g.add(y, b)?)
}

fn mapping_layers(arch: &GanArch) -> Vec<LayerSpec> {
    (0..arch.mapping_depth)
        .map(|i| {
            LayerSpec::dense(format!("{MAP}fc{i}"), arch.latent_dim, arch.latent_dim).with_gain(2f64.sqrt())
        })
        .collect()
}

/// Generator layers, each with its optional (scale, shift) style affines.
fn generator_layers(arch: &GanArch) -> Vec<(LayerSpec, Vec<LayerSpec>)> {
    let d = arch.latent_dim;
    let styles = |name: &str, c: usize| {
        vec![
            LayerSpec::dense(format!("{GEN}{name}.style_scale"), d, c),
            LayerSpec::dense(format!("{GEN}{name}.style_shift"), d, c),
        ]
    };
    let c4 = arch.width(4);
    let mut out = vec![(
        LayerSpec::dense(format!("{GEN}seed"), d, c4 * 16).with_gain(2f64.sqrt()),
        styles("seed", c4),
    )];
    let mut cin = c4;
    for r in arch.stages() {
        let c = arch.width(r);
        let name = format!("b{r}");
        out.push((
            LayerSpec::conv(format!("{GEN}{name}.conv"), cin, c, 3, 1).with_gain(2f64.sqrt()),
            styles(&name, c),
        ));
        cin = c;
    }
    out.push((LayerSpec::conv(format!("{GEN}to_img"), cin, IMAGE_CHANNELS, 1, 1), vec![]));
    out
}

/// from_img, one 3x3 conv per resolution down to 4x4 (pooling after each but
/// the first), then hidden dense and logit head.
fn discriminator_layers(arch: &GanArch) -> Vec<LayerSpec> {
    let r = arch.resolution;
    let mut out = vec![LayerSpec::conv(format!("{DISC}from_img"), IMAGE_CHANNELS, arch.width(r), 1, 1)
        .with_gain(2f64.sqrt())];
    let mut res = r;
    while res > 4 {
        let cin = arch.width(res);
        let cout = arch.width(res / 2);
        out.push(LayerSpec::conv(format!("{DISC}b{res}.conv"), cin, cout, 3, 1).with_gain(2f64.sqrt()));
        res /= 2;
    }
    let c4 = arch.width(4);
    out.push(LayerSpec::dense(format!("{DISC}fc"), c4 * 16, c4).with_gain(2f64.sqrt()));
    out.push(LayerSpec::dense(format!("{DISC}logit"), c4, 1));
    out
}
