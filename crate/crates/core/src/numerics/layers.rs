use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, NodeId, NumericsError, Tensor};

/// Named parameter tensors of one or more networks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds or replaces every entry of `other`.
    pub fn merge(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

/// Graph handles for a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
    trainable: Vec<(String, NodeId)>,
}

impl BoundParams {
    /// Adds every parameter to `graph`, as a named differentiable input when
    /// `trainable`, otherwise as a constant.
    pub fn bind(graph: &mut Graph, params: &ParamSet, trainable: bool) -> Result<Self, NumericsError> {
        let mut out = Self::default();
        out.extend(graph, params, trainable)?;
        Ok(out)
    }

    pub fn extend(&mut self, graph: &mut Graph, params: &ParamSet, trainable: bool) -> Result<(), NumericsError> {
        for (name, value) in params.iter() {
            let id = if trainable {
                let id = graph.input(name, value.clone())?;
                self.trainable.push((name.clone(), id));
                id
            } else {
                graph.constant(value.clone())
            };
            self.ids.insert(name.clone(), id);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<NodeId, NumericsError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }

    /// Gradients of `loss` for every trainable parameter, keyed by name.
    pub fn gradients(&self, graph: &mut Graph, loss: NodeId) -> Result<Vec<(String, Tensor)>, NumericsError> {
        let ids: Vec<NodeId> = self.trainable.iter().map(|(_, id)| *id).collect();
        let grads = graph.backprop(loss, &ids)?;
        Ok(self.trainable.iter().map(|(n, _)| n.clone()).zip(grads).collect())
    }
}

/// A dense or convolutional layer with equalized learning rate: weights are
/// stored with unit variance and scaled by `gain / sqrt(fan_in)` at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
    },
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    },
}

impl LayerSpec {
    pub fn dense(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
            gain: 1.0,
        }
    }

    /// Convolution with "same" padding for odd kernels at stride 1.
    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            bias: true,
            gain: 1.0,
        }
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        match &mut self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Conv { bias, .. } => *bias = on,
        }
        self
    }

    pub fn with_gain(mut self, g: f64) -> Self {
        match &mut self {
            LayerSpec::Dense { gain, .. } | LayerSpec::Conv { gain, .. } => *gain = g,
        }
        self
    }

    pub fn with_pad(mut self, p: usize) -> Self {
        if let LayerSpec::Conv { pad, .. } = &mut self {
            *pad = p;
        }
        self
    }

    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Dense { name, .. } | LayerSpec::Conv { name, .. } => name,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name())
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name())
    }

    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => vec![in_dim, out_dim],
            LayerSpec::Conv {
                in_ch, out_ch, kernel, ..
            } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    fn out_features(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Conv { out_ch, .. } => out_ch,
        }
    }

    fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Conv { bias, .. } => bias,
        }
    }

    fn runtime_scale(&self) -> f64 {
        match *self {
            LayerSpec::Dense { in_dim, gain, .. } => gain / (in_dim as f64).sqrt(),
            LayerSpec::Conv {
                in_ch, kernel, gain, ..
            } => gain / ((in_ch * kernel * kernel) as f64).sqrt(),
        }
    }

    /// Adds standard-normal weights and zero biases to `params`.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        params.insert(self.weight_name(), Tensor::randn(&self.weight_shape(), rng));
        if self.has_bias() {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out_features()]));
        }
    }

    /// Applies the layer to `x` (`[N, in_dim]` or `[N, C, H, W]`).
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> Result<NodeId, NumericsError> {
        let w = p.get(&self.weight_name())?;
        let w = g.scale(w, self.runtime_scale())?;
        let y = match *self {
            LayerSpec::Dense { .. } => g.matmul(x, w)?,
            LayerSpec::Conv { stride, pad, .. } => g.conv2d(x, w, stride, pad)?,
        };
        if !self.has_bias() {
            return Ok(y);
        }
        let b = p.get(&self.bias_name())?;
        let shape = g.shape(y).to_vec();
        let b = g.broadcast_leading(b, shape[0])?;
        let b = if shape.len() > 2 { g.expand_trailing(b, &shape[2..])? } else { b };
        g.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(spec: &LayerSpec, params: &ParamSet, x: Tensor) -> Result<Tensor, NumericsError> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, params, false)?;
        let xi = g.constant(x);
        let y = spec.forward(&mut g, &p, xi)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn identity_kernel_returns_interior() {
        let spec = LayerSpec::conv("c", 1, 1, 3, 1).with_bias(false).with_pad(0);
        let mut params = ParamSet::new();
        let mut k = vec![0.0; 9];
        // The runtime scale is 1/3 for a 3x3 single-channel kernel.
        k[4] = 3.0;
        params.insert("c.w", Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let y = run(&spec, &params, Tensor::new(vec![1, 1, 5, 5], x.clone()).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for r in 0..3 {
            for c in 0..3 {
                assert!((y.data()[r * 3 + c] - x[(r + 1) * 5 + c + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_bias_free_is_zero_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            LayerSpec::dense("d", 6, 4).with_bias(false),
            LayerSpec::conv("c", 2, 3, 3, 2).with_bias(false),
        ] {
            let mut params = ParamSet::new();
            spec.init(&mut params, &mut rng);
            let shape: Vec<usize> = if matches!(spec, LayerSpec::Dense { .. }) {
                vec![2, 6]
            } else {
                vec![2, 2, 6, 6]
            };
            let zero = run(&spec, &params, Tensor::zeros(&shape)).unwrap();
            assert!(zero.data().iter().all(|&v| v == 0.0));
            let x = Tensor::randn(&shape, &mut rng);
            let y = run(&spec, &params, x.clone()).unwrap();
            let y2 = run(&spec, &params, x.map(|v| 2.5 * v)).unwrap();
            for (a, b) in y.data().iter().zip(y2.data()) {
                assert!((2.5 * a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let spec = LayerSpec::conv("c", 1, 1, 5, 1).with_pad(0);
        let mut params = ParamSet::new();
        spec.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let err = run(&spec, &params, Tensor::zeros(&[1, 1, 3, 3])).unwrap_err();
        assert!(matches!(err, NumericsError::KernelTooLarge { .. }), "{err}");
    }
}
