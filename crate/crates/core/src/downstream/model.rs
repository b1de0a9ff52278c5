use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{load_params, save_params, BoundParams, Graph, LayerSpec, NodeId, ParamSet, Tensor};

const SLOPE: f64 = 0.2;
const GEN: &str = "tgen.";
const DISC: &str = "tdisc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorArch {
    pub resolution: usize,
    pub base_channels: usize,
}

impl TranslatorArch {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_multiple_of(4) || self.base_channels == 0 {
            return Err(Error::invalid(format!(
                "translator needs a resolution divisible by 4 (>= 8) and positive width, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) enum Part {
    None,
    Generator,
    Discriminator,
    All,
}

/// Encoder-decoder over three scales with skip connections, plus a
/// conditional patch discriminator over (B, A) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorModel {
    pub arch: TranslatorArch,
    params: ParamSet,
}

fn conv(name: &str, cin: usize, cout: usize, k: usize) -> LayerSpec {
    LayerSpec::conv(name, cin, cout, k, 1).with_gain(2f64.sqrt())
}

struct GenLayers {
    enc: [LayerSpec; 3],
    up: [LayerSpec; 2],
    merge: [LayerSpec; 2],
    out: LayerSpec,
}

fn generator_layers(c: usize) -> GenLayers {
    GenLayers {
        enc: [
            conv(&format!("{GEN}enc1"), 1, c, 3),
            conv(&format!("{GEN}enc2"), c, 2 * c, 3),
            conv(&format!("{GEN}enc3"), 2 * c, 4 * c, 3),
        ],
        up: [
            conv(&format!("{GEN}up2"), 4 * c, 2 * c, 3),
            conv(&format!("{GEN}up1"), 2 * c, c, 3),
        ],
        merge: [
            conv(&format!("{GEN}merge2"), 4 * c, 2 * c, 3),
            conv(&format!("{GEN}merge1"), 2 * c, c, 3),
        ],
        out: LayerSpec::conv(format!("{GEN}out"), c, 1, 1, 1),
    }
}

fn discriminator_layers(c: usize) -> [LayerSpec; 3] {
    [
        conv(&format!("{DISC}c1"), 2, c, 3),
        conv(&format!("{DISC}c2"), c, 2 * c, 3),
        LayerSpec::conv(format!("{DISC}logit"), 2 * c, 1, 1, 1),
    ]
}

impl TranslatorModel {
    pub fn new(arch: TranslatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gl = generator_layers(arch.base_channels);
        for spec in gl.enc.iter().chain(&gl.up).chain(&gl.merge).chain([&gl.out]) {
            spec.init(&mut params, &mut rng);
        }
        for spec in &discriminator_layers(arch.base_channels) {
            spec.init(&mut params, &mut rng);
        }
        Ok(Self { arch, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: Part) -> Result<BoundParams> {
        let mut bound = BoundParams::default();
        bound.extend(g, &self.params.filter_prefix(GEN), matches!(trainable, Part::Generator | Part::All))?;
        bound.extend(g, &self.params.filter_prefix(DISC), matches!(trainable, Part::Discriminator | Part::All))?;
        Ok(bound)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.arch.resolution;
        if shape.len() != 4 || shape[1..] != [1, r, r] {
            return Err(Error::invalid(format!("translator expects [N, 1, {r}, {r}], got {shape:?}")));
        }
        Ok(())
    }

    /// Predicted modality A in (0, 1), `[N, 1, r, r]`.
    pub(crate) fn generator_graph(&self, g: &mut Graph, p: &BoundParams, b: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(b))?;
        let gl = generator_layers(self.arch.base_channels);
        let act = |g: &mut Graph, spec: &LayerSpec, x: NodeId| -> Result<NodeId> {
            let y = spec.forward(g, p, x)?;
            Ok(g.leaky_relu(y, SLOPE)?)
        };
        let e1 = act(g, &gl.enc[0], b)?;
        let pooled = g.avgpool2(e1)?;
        let e2 = act(g, &gl.enc[1], pooled)?;
        let pooled = g.avgpool2(e2)?;
        let e3 = act(g, &gl.enc[2], pooled)?;
        let up = g.upsample2(e3)?;
        let d2 = act(g, &gl.up[0], up)?;
        let cat = g.concat(d2, e2)?;
        let d2 = act(g, &gl.merge[0], cat)?;
        let up = g.upsample2(d2)?;
        let d1 = act(g, &gl.up[1], up)?;
        let cat = g.concat(d1, e1)?;
        let d1 = act(g, &gl.merge[1], cat)?;
        let out = gl.out.forward(g, p, d1)?;
        Ok(g.sigmoid(out)?)
    }

    /// Patch logits `[N, (r/4)²]` for the pair (condition `b`, image `a`).
    pub(crate) fn discriminator_graph(&self, g: &mut Graph, p: &BoundParams, b: NodeId, a: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(a))?;
        let n = g.shape(a)[0];
        let [c1, c2, logit] = discriminator_layers(self.arch.base_channels);
        let x = g.concat(b, a)?;
        let h = c1.forward(g, p, x)?;
        let h = g.leaky_relu(h, SLOPE)?;
        let h = g.avgpool2(h)?;
        let h = c2.forward(g, p, h)?;
        let h = g.leaky_relu(h, SLOPE)?;
        let h = g.avgpool2(h)?;
        let h = logit.forward(g, p, h)?;
        let q = self.arch.resolution / 4;
        Ok(g.reshape(h, &[n, q * q])?)
    }

    /// Predicts modality A from modality B (`[N, 1, r, r]`).
    pub fn translate(&self, b: &Tensor) -> Result<Tensor> {
        self.check_input(b.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, Part::None)?;
        let bi = g.constant(b.clone());
        let out = self.generator_graph(&mut g, &p, bi)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path, info: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "arch": self.arch, "info": info });
        Ok(save_params(path, &self.params, meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ck = load_params(path)?;
        let arch: TranslatorArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::format(path.display().to_string(), format!("bad architecture: {e}")))?;
        let reference = Self::new(arch.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("parameter `{name}` missing or misshapen"),
                    ))
                }
            }
        }
        if ck.params.len() != reference.params.len() {
            return Err(Error::format(path.display().to_string(), "unexpected extra parameters"));
        }
        Ok(Self { arch, params: ck.params })
    }
}
