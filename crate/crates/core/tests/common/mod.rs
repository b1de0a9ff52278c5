#![allow(dead_code)]

use std::sync::OnceLock;

use ganaug::gan::{train_gan, GanArch, GanModel, GanTrainConfig};
use ganaug::numerics::{Graph, NodeId, Tensor};
use ganaug::synthdata::{make_dataset, split, Dataset, DatasetSplit};
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl FdReport {
    pub fn new() -> Self {
        Self {
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares reverse-mode gradients of `loss` against central differences for
/// up to `per_input` random coordinates of each named input. Coordinates whose
/// perturbation flips any leaky-ReLU sign are skipped: the loss is not
/// differentiable across the kink, so central differences are meaningless.
pub fn check_gradients<R: Rng>(
    g: &mut Graph,
    loss: NodeId,
    inputs: &[NodeId],
    per_input: usize,
    rng: &mut R,
) -> FdReport {
    let grads = g.backprop(loss, inputs).expect("backprop");
    let base_pattern = g.activation_pattern();
    let mut report = FdReport::new();
    for (k, &id) in inputs.iter().enumerate() {
        let name = g.input_name(id).expect("named input").to_string();
        let base = g.value(id).clone();
        let n = base.numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            sample(rng, n, per_input).into_vec()
        };
        for c in coords {
            let mut plus = base.clone();
            plus.data_mut()[c] += FD_STEP;
            let mut minus = base.clone();
            minus.data_mut()[c] -= FD_STEP;
            let fp = g.evaluate(loss, &[(name.as_str(), plus)]).expect("eval +");
            let pp = g.activation_pattern();
            let fm = g.evaluate(loss, &[(name.as_str(), minus)]).expect("eval -");
            let pm = g.activation_pattern();
            g.evaluate(loss, &[(name.as_str(), base.clone())]).expect("eval base");
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let an = grads[k].data()[c];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{c}]: analytic {an:e}, numeric {fd:e}");
            }
        }
    }
    report
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub const TOY_RES: usize = 16;

pub struct Toy {
    pub data: Dataset,
    pub split: DatasetSplit,
    pub model: GanModel,
}

/// A GAN trained briefly on 240 phantoms at 16x16, shared by the tests of
/// one binary.
pub fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let data = make_dataset(240, TOY_RES, 7).unwrap();
        let split = split(&data, 7).unwrap();
        let train = data.subset(&split.train).unwrap();
        let cfg = GanTrainConfig {
            iterations: 400,
            w_mean_samples: 2000,
            seed: 7,
            ..GanTrainConfig::default()
        };
        let model = train_gan(&train, GanArch::for_resolution(TOY_RES), &cfg, None).unwrap().model;
        Toy { data, split, model }
    })
}
