//! Layer graphs, weight storage, the forward pass and class prediction.

mod io;
mod minires;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ArgmaxIndices, Shape, Tensor};

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use minires::{build_minires, MINIRES_TARGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// Present only in files that still carry unfolded batch-norm tensors.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_norm: Option<BatchNorm>,
    },
    Relu,
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    Add,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Avgpool { .. } => "avgpool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_ref: Option<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight_ref: None,
        }
    }

    pub fn with_weights(mut self, weight_ref: impl Into<String>) -> Self {
        self.weight_ref = Some(weight_ref.into());
        self
    }
}

/// Per-channel standardization applied to `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub class_labels: Vec<String>,
    pub target_layer_default: String,
    pub preprocess: Preprocess,
    /// `(C, H, W)` of the network input.
    pub input_shape: [usize; 3],
}

/// Named tensors. Conv and dense layers read `<weight_ref>.weight` and
/// `<weight_ref>.bias`; unfolded batch norm adds `.bn_gamma`, `.bn_beta`,
/// `.bn_mean` and `.bn_var`.
pub type WeightStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BrandId {
    pub index: usize,
    pub label: String,
}

/// A validated graph with its weights and inferred per-layer shapes.
#[derive(Debug, Clone)]
pub struct Model {
    graph: ModelGraph,
    weights: WeightStore,
    inputs: Vec<Vec<usize>>,
    shapes: Vec<Shape>,
    by_name: HashMap<String, usize>,
}

fn weight_key(r: &str, suffix: &str) -> String {
    format!("{r}.{suffix}")
}

impl Model {
    /// Validates the graph, folds any batch norm into its conv, and infers shapes.
    pub fn new(mut graph: ModelGraph, mut weights: WeightStore) -> Result<Self> {
        let mut by_name = HashMap::new();
        let mut inputs = Vec::with_capacity(graph.layers.len());
        let all_names: HashSet<&str> = graph.layers.iter().map(|l| l.name.as_str()).collect();
        for (i, layer) in graph.layers.iter().enumerate() {
            if by_name.insert(layer.name.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate layer name `{}`", layer.name)));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::InvalidGraph(format!(
                    "{} layer `{}` needs {} input(s), has {}",
                    layer.kind.name(),
                    layer.name,
                    layer.kind.arity(),
                    layer.inputs.len()
                )));
            }
            let mut idx = Vec::with_capacity(layer.inputs.len());
            for input in &layer.inputs {
                match by_name.get(input) {
                    Some(&j) if j < i => idx.push(j),
                    _ if all_names.contains(input.as_str()) => {
                        return Err(Error::NotADag {
                            layer: layer.name.clone(),
                            input: input.clone(),
                        })
                    }
                    _ => {
                        return Err(Error::InvalidGraph(format!(
                            "layer `{}` reads from unknown layer `{input}`",
                            layer.name
                        )))
                    }
                }
            }
            inputs.push(idx);
        }
        match graph.layers.first() {
            Some(l) if l.kind == LayerKind::Input => {}
            _ => return Err(Error::InvalidGraph("first layer must be the input".into())),
        }
        if graph.layers.iter().skip(1).any(|l| l.kind == LayerKind::Input) {
            return Err(Error::InvalidGraph("only one input layer is supported".into()));
        }

        for layer in graph.layers.iter_mut() {
            fold_batch_norm(layer, &mut weights)?;
        }

        let shapes = infer_shapes(&graph, &inputs, &weights)?;

        let last = graph.layers.last().expect("non-empty");
        if !matches!(last.kind, LayerKind::Dense { .. }) {
            return Err(Error::InvalidGraph("the final layer must be dense".into()));
        }
        let width = shapes.last().expect("non-empty").item_len();
        if graph.num_classes == 0 || width != graph.num_classes {
            return Err(Error::InvalidGraph(format!(
                "num_classes is {} but the classifier emits {width}",
                graph.num_classes
            )));
        }
        if graph.class_labels.len() != graph.num_classes {
            return Err(Error::InvalidGraph(format!(
                "{} class labels for {} classes",
                graph.class_labels.len(),
                graph.num_classes
            )));
        }
        let unique: HashSet<&String> = graph.class_labels.iter().collect();
        if unique.len() != graph.class_labels.len() {
            return Err(Error::InvalidGraph("class labels must be unique".into()));
        }
        match by_name.get(&graph.target_layer_default) {
            Some(&i) if matches!(graph.layers[i].kind, LayerKind::Conv { .. } | LayerKind::Relu) => {}
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "default target `{}` must name a conv or relu layer",
                    graph.target_layer_default
                )))
            }
        }
        let c = graph.input_shape[0];
        let pre = &graph.preprocess;
        if pre.mean.len() != c || pre.std.len() != c || pre.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidGraph(
                "preprocess mean/std must have one positive entry per input channel".into(),
            ));
        }

        Ok(Model {
            graph,
            weights,
            inputs,
            shapes,
            by_name,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.graph.layers
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Indices of the layers feeding layer `i`.
    pub fn inputs_of(&self, i: usize) -> &[usize] {
        &self.inputs[i]
    }

    /// Output shape of layer `i` for a single image.
    pub fn output_shape(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn input_tensor_shape(&self) -> Shape {
        let [c, h, w] = self.graph.input_shape;
        Shape::new(1, c, h, w)
    }

    pub fn brand(&self, index: usize) -> Option<BrandId> {
        self.graph.class_labels.get(index).map(|label| BrandId {
            index,
            label: label.clone(),
        })
    }

    pub fn brand_by_label(&self, label: &str) -> Option<BrandId> {
        self.graph
            .class_labels
            .iter()
            .position(|l| l == label)
            .map(|index| BrandId {
                index,
                label: label.to_string(),
            })
    }

    /// `(weight, bias)` of a conv or dense layer.
    pub fn params(&self, i: usize) -> (&Tensor, &[f32]) {
        let r = self.graph.layers[i]
            .weight_ref
            .as_deref()
            .expect("validated: weighted layers carry a weight_ref");
        let w = &self.weights[&weight_key(r, "weight")];
        let b = &self.weights[&weight_key(r, "bias")];
        (w, b.data())
    }

    /// True when `ancestor` feeds `descendant` through some path (or they are equal).
    pub fn reaches(&self, ancestor: usize, descendant: usize) -> bool {
        if ancestor > descendant {
            return false;
        }
        let mut seen = vec![false; descendant + 1];
        let mut stack = vec![descendant];
        while let Some(i) = stack.pop() {
            if i == ancestor {
                return true;
            }
            for &j in &self.inputs[i] {
                if j >= ancestor && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        false
    }
}

fn fold_batch_norm(layer: &mut LayerSpec, weights: &mut WeightStore) -> Result<()> {
    let LayerKind::Conv { batch_norm, .. } = &mut layer.kind else {
        return Ok(());
    };
    let Some(bn) = batch_norm.take() else {
        return Ok(());
    };
    let r = layer
        .weight_ref
        .clone()
        .ok_or_else(|| Error::InvalidGraph(format!("conv `{}` has no weight_ref", layer.name)))?;
    let mut take = |suffix: &str| {
        let key = weight_key(&r, suffix);
        weights.remove(&key).ok_or_else(|| Error::DanglingWeightRef {
            layer: layer.name.clone(),
            key,
        })
    };
    let gamma = take("bn_gamma")?;
    let beta = take("bn_beta")?;
    let mean = take("bn_mean")?;
    let var = take("bn_var")?;
    let wkey = weight_key(&r, "weight");
    let bkey = weight_key(&r, "bias");
    let w = weights.get(&wkey).ok_or_else(|| Error::DanglingWeightRef {
        layer: layer.name.clone(),
        key: wkey.clone(),
    })?;
    let b = weights.get(&bkey).ok_or_else(|| Error::DanglingWeightRef {
        layer: layer.name.clone(),
        key: bkey.clone(),
    })?;
    let cout = w.shape().n();
    if [&gamma, &beta, &mean, &var, b].iter().any(|t| t.len() != cout) {
        return Err(Error::InvalidGraph(format!(
            "batch-norm tensors of `{}` must have {cout} entries",
            layer.name
        )));
    }
    let per_out = w.shape().item_len();
    let mut folded_w = w.clone();
    let mut folded_b = b.clone();
    for co in 0..cout {
        let scale = gamma.data()[co] as f64 / (var.data()[co] as f64 + bn.eps as f64).sqrt();
        for v in &mut folded_w.data_mut()[co * per_out..(co + 1) * per_out] {
            *v = (*v as f64 * scale) as f32;
        }
        let bias = (b.data()[co] as f64 - mean.data()[co] as f64) * scale + beta.data()[co] as f64;
        folded_b.data_mut()[co] = bias as f32;
    }
    weights.insert(wkey, folded_w);
    weights.insert(bkey, folded_b);
    Ok(())
}

fn infer_shapes(graph: &ModelGraph, inputs: &[Vec<usize>], weights: &WeightStore) -> Result<Vec<Shape>> {
    let [c, h, w] = graph.input_shape;
    let mut shapes: Vec<Shape> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let src = inputs[i].first().map(|&j| shapes[j]);
        let bad = |msg: String| Error::InvalidGraph(format!("layer `{}`: {msg}", layer.name));
        let lookup = |suffix: &str| -> Result<&Tensor> {
            let r = layer
                .weight_ref
                .as_deref()
                .ok_or_else(|| bad("missing weight_ref".into()))?;
            let key = weight_key(r, suffix);
            weights.get(&key).ok_or(Error::DanglingWeightRef {
                layer: layer.name.clone(),
                key,
            })
        };
        let shape = match &layer.kind {
            LayerKind::Input => Shape::new(1, c, h, w),
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let s = src.expect("arity checked");
                let wt = lookup("weight")?;
                let b = lookup("bias")?;
                if wt.shape() != Shape::new(*out_channels, s.c(), *kernel, *kernel) || b.len() != *out_channels {
                    return Err(bad(format!("weight shape {} does not fit input {s}", wt.shape())));
                }
                if *stride == 0 || s.h() + 2 * padding < *kernel || s.w() + 2 * padding < *kernel {
                    return Err(bad("kernel does not fit the input".into()));
                }
                Shape::new(
                    1,
                    *out_channels,
                    (s.h() + 2 * padding - kernel) / stride + 1,
                    (s.w() + 2 * padding - kernel) / stride + 1,
                )
            }
            LayerKind::Relu => src.expect("arity checked"),
            LayerKind::Maxpool { kernel, stride } | LayerKind::Avgpool { kernel, stride } => {
                let s = src.expect("arity checked");
                if *kernel == 0 || *stride == 0 || s.h() < *kernel || s.w() < *kernel {
                    return Err(bad("pooling window does not fit the input".into()));
                }
                Shape::new(1, s.c(), (s.h() - kernel) / stride + 1, (s.w() - kernel) / stride + 1)
            }
            LayerKind::Dense { out_features } => {
                let s = src.expect("arity checked");
                if s.h() != 1 || s.w() != 1 {
                    return Err(bad(format!("dense input {s} must be flat")));
                }
                let wt = lookup("weight")?;
                let b = lookup("bias")?;
                if wt.shape() != Shape::new(*out_features, s.c(), 1, 1) || b.len() != *out_features {
                    return Err(bad(format!("weight shape {} does not fit input {s}", wt.shape())));
                }
                Shape::new(1, *out_features, 1, 1)
            }
            LayerKind::Add => {
                let a = shapes[inputs[i][0]];
                let b = shapes[inputs[i][1]];
                if a != b {
                    return Err(Error::ShapeMismatch {
                        op: "add",
                        left: a,
                        right: b,
                    });
                }
                a
            }
            LayerKind::Flatten => {
                let s = src.expect("arity checked");
                Shape::new(1, s.item_len(), 1, 1)
            }
        };
        if layer.kind.has_weights() && layer.weight_ref.is_none() {
            return Err(bad("missing weight_ref".into()));
        }
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Output of every layer, indexed like the graph's layers.
    pub activations: Vec<Tensor>,
    /// Winner indices for maxpool layers; `None` elsewhere.
    pub argmax_indices: Vec<Option<ArgmaxIndices>>,
    pub logits: Vec<f32>,
    pub posterior: Vec<f32>,
}

impl ForwardTrace {
    pub fn activation<'a>(&'a self, model: &Model, name: &str) -> Result<&'a Tensor> {
        Ok(&self.activations[model.layer_index(name)?])
    }
}

/// Runs a preprocessed `(1, C, H, W)` image through the network.
pub fn forward(model: &Model, image: &Tensor) -> Result<ForwardTrace> {
    let expected = model.input_tensor_shape();
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: image.shape(),
            right: expected,
        });
    }
    let n = model.layers().len();
    let mut activations: Vec<Tensor> = Vec::with_capacity(n);
    let mut argmax_indices = vec![None; n];
    for (i, layer) in model.layers().iter().enumerate() {
        let src = |k: usize| &activations[model.inputs_of(i)[k]];
        let out = match &layer.kind {
            LayerKind::Input => image.clone(),
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let (w, b) = model.params(i);
                tensor::conv2d(src(0), w, b, *stride, *padding)?
            }
            LayerKind::Relu => tensor::relu(src(0)),
            LayerKind::Maxpool { kernel, stride } => {
                let (y, arg) = tensor::maxpool2d(src(0), *kernel, *stride)?;
                argmax_indices[i] = Some(arg);
                y
            }
            LayerKind::Avgpool { kernel, stride } => tensor::avgpool2d(src(0), *kernel, *stride)?,
            LayerKind::Dense { .. } => {
                let (w, b) = model.params(i);
                Tensor::vector(tensor::dense(src(0).data(), w, b)?)
            }
            LayerKind::Add => tensor::add(src(0), src(1))?,
            LayerKind::Flatten => src(0).flatten(),
        };
        activations.push(out);
    }
    let logits = activations.last().expect("non-empty graph").data().to_vec();
    let posterior = tensor::softmax(&logits);
    Ok(ForwardTrace {
        activations,
        argmax_indices,
        logits,
        posterior,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// The class with maximum posterior probability.
pub fn predict(model: &Model, trace: &ForwardTrace) -> Result<BrandId> {
    let index = argmax(&trace.posterior)
        .ok_or_else(|| Error::InvalidArgument("empty posterior".into()))?;
    model.brand(index).ok_or(Error::ClassOutOfRange {
        index,
        num_classes: model.num_classes(),
    })
}
