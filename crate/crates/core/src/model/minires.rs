use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, LayerSpec, Model, ModelGraph, Preprocess, WeightStore};
use crate::tensor::{Shape, Tensor};

/// Default attribution layer of the reference network.
pub const MINIRES_TARGET: &str = "blk2.relu2";

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel,
        stride,
        padding,
        batch_norm: None,
    }
}

/// He-uniform weights and small biases for a `(out, in, k, k)` kernel.
fn init(weights: &mut WeightStore, rng: &mut ChaCha8Rng, name: &str, shape: Shape) {
    let fan_in = shape.item_len() as f32;
    let bound = (6.0 / fan_in).sqrt();
    let w = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..shape.n()).map(|_| rng.gen_range(-0.05..0.05)).collect();
    weights.insert(format!("{name}.weight"), Tensor::from_vec(shape, w).expect("sized"));
    weights.insert(
        format!("{name}.bias"),
        Tensor::from_vec(Shape::new(shape.n(), 1, 1, 1), b).expect("sized"),
    );
}

/// The reference residual network for 3×64×64 inputs:
///
/// ```text
/// stem:  conv3x3/2 (16) - relu - maxpool2/2                    -> 16×16
/// blk1:  conv3x3 - relu - conv3x3 - relu, + identity           -> 16×16
/// blk2:  conv3x3/2 (32) - relu - conv3x3 - relu,
///        + conv1x1/2 projection - relu                         -> 8×8
/// head:  avgpool8 - flatten - dense
/// ```
///
/// Every residual add sees non-negative operands on both sides.
pub fn build_minires(num_classes: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = WeightStore::new();
    let specs: Vec<(LayerSpec, Option<Shape>)> = vec![
        (LayerSpec::new("input", LayerKind::Input, &[]), None),
        (
            LayerSpec::new("stem.conv", conv(16, 3, 2, 1), &["input"]),
            Some(Shape::new(16, 3, 3, 3)),
        ),
        (LayerSpec::new("stem.relu", LayerKind::Relu, &["stem.conv"]), None),
        (
            LayerSpec::new("stem.pool", LayerKind::Maxpool { kernel: 2, stride: 2 }, &["stem.relu"]),
            None,
        ),
        (
            LayerSpec::new("blk1.conv1", conv(16, 3, 1, 1), &["stem.pool"]),
            Some(Shape::new(16, 16, 3, 3)),
        ),
        (LayerSpec::new("blk1.relu1", LayerKind::Relu, &["blk1.conv1"]), None),
        (
            LayerSpec::new("blk1.conv2", conv(16, 3, 1, 1), &["blk1.relu1"]),
            Some(Shape::new(16, 16, 3, 3)),
        ),
        (LayerSpec::new("blk1.relu2", LayerKind::Relu, &["blk1.conv2"]), None),
        (
            LayerSpec::new("blk1.add", LayerKind::Add, &["stem.pool", "blk1.relu2"]),
            None,
        ),
        (
            LayerSpec::new("blk2.conv1", conv(32, 3, 2, 1), &["blk1.add"]),
            Some(Shape::new(32, 16, 3, 3)),
        ),
        (LayerSpec::new("blk2.relu1", LayerKind::Relu, &["blk2.conv1"]), None),
        (
            LayerSpec::new("blk2.conv2", conv(32, 3, 1, 1), &["blk2.relu1"]),
            Some(Shape::new(32, 32, 3, 3)),
        ),
        (LayerSpec::new("blk2.relu2", LayerKind::Relu, &["blk2.conv2"]), None),
        (
            LayerSpec::new("blk2.proj", conv(32, 1, 2, 0), &["blk1.add"]),
            Some(Shape::new(32, 16, 1, 1)),
        ),
        (LayerSpec::new("blk2.proj_relu", LayerKind::Relu, &["blk2.proj"]), None),
        (
            LayerSpec::new("blk2.add", LayerKind::Add, &["blk2.relu2", "blk2.proj_relu"]),
            None,
        ),
        (
            LayerSpec::new("head.pool", LayerKind::Avgpool { kernel: 8, stride: 8 }, &["blk2.add"]),
            None,
        ),
        (LayerSpec::new("head.flatten", LayerKind::Flatten, &["head.pool"]), None),
        (
            LayerSpec::new("head.fc", LayerKind::Dense { out_features: num_classes }, &["head.flatten"]),
            Some(Shape::new(num_classes, 32, 1, 1)),
        ),
    ];

    let mut layers = Vec::with_capacity(specs.len());
    for (mut spec, wshape) in specs {
        if let Some(shape) = wshape {
            init(&mut weights, &mut rng, &spec.name, shape);
            spec.weight_ref = Some(spec.name.clone());
        }
        layers.push(spec);
    }

    let graph = ModelGraph {
        layers,
        num_classes,
        class_labels: (0..num_classes).map(|i| format!("brand_{i}")).collect(),
        target_layer_default: MINIRES_TARGET.into(),
        preprocess: Preprocess {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        },
        input_shape: [3, 64, 64],
    };
    Model::new(graph, weights).expect("reference architecture is valid")
}
