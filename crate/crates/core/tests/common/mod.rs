#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use excite_lens::model::{forward, ForwardTrace, LayerKind, LayerSpec, Model, ModelGraph, Preprocess, WeightStore};
use excite_lens::tensor::{Shape, Tensor};

pub const GUARD: f64 = 1e-12;

/// A small random network, an input for it, and the layer to attribute at.
pub struct ToyNet {
    pub model: Model,
    pub input: Tensor,
    pub target: String,
}

fn tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn graph(layers: Vec<LayerSpec>, classes: usize, target: &str, input_shape: [usize; 3]) -> ModelGraph {
    ModelGraph {
        layers,
        num_classes: classes,
        class_labels: (0..classes).map(|i| format!("c{i}")).collect(),
        target_layer_default: target.into(),
        preprocess: Preprocess {
            mean: vec![0.0; input_shape[0]],
            std: vec![1.0; input_shape[0]],
        },
        input_shape,
    }
}

/// Three dense layers, mixed-sign weights, at most 64 neurons in total.
pub fn random_dense_net(seed: u64) -> ToyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = rng.gen_range(2..=12);
    let n1 = rng.gen_range(2..=16);
    let n2 = rng.gen_range(2..=16);
    let n3 = rng.gen_range(2..=8);
    let mut w = WeightStore::new();
    for (name, o, i) in [("fc1", n1, n0), ("fc2", n2, n1), ("fc3", n3, n2)] {
        w.insert(format!("{name}.weight"), tensor(&mut rng, Shape::new(o, i, 1, 1), -1.0, 1.0));
        w.insert(format!("{name}.bias"), tensor(&mut rng, Shape::new(o, 1, 1, 1), -0.2, 0.4));
    }
    let dense = |o| LayerKind::Dense { out_features: o };
    let layers = vec![
        LayerSpec::new("input", LayerKind::Input, &[]),
        LayerSpec::new("fc1", dense(n1), &["input"]).with_weights("fc1"),
        LayerSpec::new("relu1", LayerKind::Relu, &["fc1"]),
        LayerSpec::new("fc2", dense(n2), &["relu1"]).with_weights("fc2"),
        LayerSpec::new("relu2", LayerKind::Relu, &["fc2"]),
        LayerSpec::new("fc3", dense(n3), &["relu2"]).with_weights("fc3"),
    ];
    let target = if rng.gen_bool(0.5) { "relu1" } else { "relu2" };
    let model = Model::new(graph(layers, n3, target, [n0, 1, 1]), w).unwrap();
    let input = tensor(&mut rng, Shape::new(1, n0, 1, 1), 0.0, 1.0);
    ToyNet {
        model,
        input,
        target: target.into(),
    }
}

/// conv → relu → conv → relu → flatten → dense on a tiny input.
pub fn random_conv_net(seed: u64) -> ToyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.gen_range(1..=2);
    let c1 = rng.gen_range(2..=3);
    let c2 = rng.gen_range(1..=2);
    let classes = rng.gen_range(2..=4);
    let side = 4;
    let mut w = WeightStore::new();
    w.insert("c1.weight".into(), tensor(&mut rng, Shape::new(c1, c0, 3, 3), -1.0, 1.0));
    w.insert("c1.bias".into(), tensor(&mut rng, Shape::new(c1, 1, 1, 1), -0.2, 0.4));
    w.insert("c2.weight".into(), tensor(&mut rng, Shape::new(c2, c1, 3, 3), -1.0, 1.0));
    w.insert("c2.bias".into(), tensor(&mut rng, Shape::new(c2, 1, 1, 1), -0.2, 0.4));
    let flat = c2 * 2 * 2;
    w.insert("fc.weight".into(), tensor(&mut rng, Shape::new(classes, flat, 1, 1), -1.0, 1.0));
    w.insert("fc.bias".into(), tensor(&mut rng, Shape::new(classes, 1, 1, 1), -0.2, 0.4));
    let conv = |out_channels, padding| LayerKind::Conv {
        out_channels,
        kernel: 3,
        stride: 1,
        padding,
        batch_norm: None,
    };
    let layers = vec![
        LayerSpec::new("input", LayerKind::Input, &[]),
        LayerSpec::new("c1", conv(c1, 1), &["input"]).with_weights("c1"),
        LayerSpec::new("r1", LayerKind::Relu, &["c1"]),
        LayerSpec::new("c2", conv(c2, 0), &["r1"]).with_weights("c2"),
        LayerSpec::new("r2", LayerKind::Relu, &["c2"]),
        LayerSpec::new("flat", LayerKind::Flatten, &["r2"]),
        LayerSpec::new("fc", LayerKind::Dense { out_features: classes }, &["flat"]).with_weights("fc"),
    ];
    let model = Model::new(graph(layers, classes, "r1", [c0, side, side]), w).unwrap();
    let input = tensor(&mut rng, Shape::new(1, c0, side, side), 0.0, 1.0);
    ToyNet {
        model,
        input,
        target: "r1".into(),
    }
}

/// One linear hop: `weights[out][in]` and the activations feeding it.
pub struct Hop {
    pub weights: Vec<Vec<f64>>,
    pub inputs: Vec<f64>,
}

fn dense_hop(model: &Model, trace: &ForwardTrace, layer: &str, input: &str) -> Hop {
    let i = model.layer_index(layer).unwrap();
    let (w, _) = model.params(i);
    let s = w.shape();
    let weights = (0..s.n())
        .map(|o| (0..s.c()).map(|k| w.data()[o * s.c() + k] as f64).collect())
        .collect();
    let inputs = trace.activation(model, input).unwrap().data().iter().map(|&v| v as f64).collect();
    Hop { weights, inputs }
}

/// Writes a convolution out as an explicit edge list, one output neuron at a time.
fn conv_hop(model: &Model, trace: &ForwardTrace, layer: &str, input: &str, padding: usize) -> Hop {
    let li = model.layer_index(layer).unwrap();
    let (w, _) = model.params(li);
    let x = trace.activation(model, input).unwrap();
    let (cin, h, wd) = (x.shape().c(), x.shape().h(), x.shape().w());
    let out = model.output_shape(li);
    let k = w.shape().h();
    let mut weights = Vec::new();
    for oc in 0..out.c() {
        for oy in 0..out.h() {
            for ox in 0..out.w() {
                let mut row = vec![0.0; cin * h * wd];
                for ic in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy + ky) as isize - padding as isize;
                            let ix = (ox + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let wv = w.data()[((oc * cin + ic) * k + ky) * k + kx] as f64;
                            row[(ic * h + iy as usize) * wd + ix as usize] += wv;
                        }
                    }
                }
                weights.push(row);
            }
        }
    }
    Hop {
        weights,
        inputs: x.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Linear hops from the target layer up to the output, bottom first.
pub fn hops(net: &ToyNet, trace: &ForwardTrace) -> Vec<Hop> {
    let m = &net.model;
    if m.layer_index("fc1").is_ok() {
        let mut v = vec![dense_hop(m, trace, "fc3", "relu2")];
        if net.target == "relu1" {
            v.insert(0, dense_hop(m, trace, "fc2", "relu1"));
        }
        v
    } else {
        vec![conv_hop(m, trace, "c2", "r1", 0), dense_hop(m, trace, "fc", "flat")]
    }
}

/// Marginal winning probability of each target neuron, summed over every
/// path from the class neuron, plus the mass lost on the way.
pub fn path_marginals(hops: &[Hop], class: usize) -> (Vec<f64>, f64) {
    fn walk(hops: &[Hop], level: usize, neuron: usize, p: f64, out: &mut [f64], lost: &mut f64) {
        let hop = &hops[level];
        let row = &hop.weights[neuron];
        let z: f64 = row
            .iter()
            .zip(&hop.inputs)
            .map(|(w, a)| a.max(0.0) * w.max(0.0))
            .sum();
        if z <= GUARD {
            *lost += p;
            return;
        }
        for (i, (w, a)) in row.iter().zip(&hop.inputs).enumerate() {
            let t = a.max(0.0) * w.max(0.0) / z;
            if t == 0.0 {
                continue;
            }
            if level == 0 {
                out[i] += p * t;
            } else {
                walk(hops, level - 1, i, p * t, out, lost);
            }
        }
    }
    let mut out = vec![0.0; hops[0].inputs.len()];
    let mut lost = 0.0;
    walk(hops, hops.len() - 1, class, 1.0, &mut out, &mut lost);
    (out, lost)
}

pub fn toy_net(seed: u64) -> ToyNet {
    if seed % 3 == 2 {
        random_conv_net(seed)
    } else {
        random_dense_net(seed)
    }
}

pub fn run(net: &ToyNet) -> ForwardTrace {
    forward(&net.model, &net.input).unwrap()
}

/// Random MiniRes-sized input in preprocessed units.
pub fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
    tensor(rng, Shape::new(1, 3, 64, 64), -2.0, 2.0)
}
