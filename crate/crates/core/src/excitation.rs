//! Top-down excitation backprop.
//!
//! Starting from unit mass on one class output, probability mass is pushed
//! down the graph in reverse topological order until it reaches the target
//! layer. Linear layers (conv, dense, avgpool) hand mass from parent `j` to
//! child `i` in proportion to `a_i * max(w_ij, 0)`; relu and flatten pass it
//! through; maxpool routes it to the recorded winner; a residual add splits
//! it between its operands in proportion to their positive activations.
//!
//! Mass that cannot be routed (a parent whose denominator is at most
//! [`ZERO_GUARD`], or an add whose operands are both non-positive) is counted
//! in `discarded_mass`, as is mass that reaches a layer below the target
//! without passing through it (for example a residual shortcut around the
//! target). So at every step the pending mass plus the discarded mass is one.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, LayerKind, Model};

/// Denominators at or below this value are treated as zero.
pub const ZERO_GUARD: f64 = 1e-12;

/// Per-unit marginal winning probabilities at one layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationMaps {
    pub image_id: String,
    pub class_index: usize,
    pub target_layer: String,
    pub num_units: usize,
    pub height: usize,
    pub width: usize,
    /// `num_units * height * width` values, unit-major.
    pub data: Vec<f32>,
    pub discarded_mass: f64,
}

impl ExcitationMaps {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Map of unit `k`, row-major `height × width`.
    pub fn unit(&self, k: usize) -> &[f32] {
        let n = self.locations();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn units(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.locations().max(1))
    }

    /// Sum of all map values.
    pub fn total_mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }
}

/// Pending mass and discarded mass just before a layer was processed.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStep {
    pub layer: String,
    pub pending_mass: f64,
    pub discarded_mass: f64,
    pub min_value: f64,
}

pub fn excitation_backprop(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    target_layer: &str,
) -> Result<ExcitationMaps> {
    run(model, trace, class_index, target_layer, None)
}

/// Like [`excitation_backprop`], also returning the mass bookkeeping at each step.
pub fn excitation_backprop_traced(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    target_layer: &str,
) -> Result<(ExcitationMaps, Vec<BackwardStep>)> {
    let mut steps = Vec::new();
    let maps = run(model, trace, class_index, target_layer, Some(&mut steps))?;
    Ok((maps, steps))
}

struct Flow {
    target: usize,
    pending: Vec<Option<Vec<f64>>>,
    discarded: f64,
}

impl Flow {
    fn deposit(&mut self, layer: usize, mass: Vec<f64>) {
        if layer < self.target {
            self.discarded += mass.iter().sum::<f64>();
            return;
        }
        match &mut self.pending[layer] {
            Some(existing) => existing.iter_mut().zip(&mass).for_each(|(e, m)| *e += m),
            slot @ None => *slot = Some(mass),
        }
    }
}

fn run(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    target_layer: &str,
    mut steps: Option<&mut Vec<BackwardStep>>,
) -> Result<ExcitationMaps> {
    let layers = model.layers();
    let head = layers.len() - 1;
    if class_index >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            index: class_index,
            num_classes: model.num_classes(),
        });
    }
    let target = model.layer_index(target_layer)?;
    if target == head || !model.reaches(target, head) {
        return Err(Error::TargetNotUpstream(target_layer.to_string()));
    }
    if trace.activations.len() != layers.len()
        || trace
            .activations
            .iter()
            .enumerate()
            .any(|(i, a)| a.shape() != model.output_shape(i))
    {
        return Err(Error::InvalidArgument("trace does not belong to this model".into()));
    }

    let mut prior = vec![0.0; model.num_classes()];
    prior[class_index] = 1.0;
    let mut flow = Flow {
        target,
        pending: vec![None; layers.len()],
        discarded: 0.0,
    };
    flow.pending[head] = Some(prior);

    for li in (target + 1..=head).rev() {
        let Some(mass) = flow.pending[li].take() else {
            continue;
        };
        if let Some(steps) = steps.as_deref_mut() {
            let others = flow.pending.iter().flatten().flatten();
            let pending = mass.iter().chain(others.clone()).sum::<f64>();
            let min_value = mass.iter().chain(others).copied().fold(f64::INFINITY, f64::min);
            steps.push(BackwardStep {
                layer: layers[li].name.clone(),
                pending_mass: pending,
                discarded_mass: flow.discarded,
                min_value,
            });
        }
        let inputs = model.inputs_of(li);
        match &layers[li].kind {
            LayerKind::Relu | LayerKind::Flatten => flow.deposit(inputs[0], mass),
            LayerKind::Maxpool { .. } => {
                let winners = trace.argmax_indices[li]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("trace lacks maxpool indices".into()))?;
                let mut child = vec![0.0; trace.activations[inputs[0]].len()];
                for (&m, &w) in mass.iter().zip(winners) {
                    child[w] += m;
                }
                flow.deposit(inputs[0], child);
            }
            LayerKind::Dense { .. } => {
                let (w, _) = model.params(li);
                let child = &trace.activations[inputs[0]];
                let (out, lost) = dense_rule(&mass, child.data(), w.data());
                flow.discarded += lost;
                flow.deposit(inputs[0], out);
            }
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let (w, _) = model.params(li);
                let geom = Window {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let child = &trace.activations[inputs[0]];
                let s = child.shape();
                let o = model.output_shape(li);
                let (out, lost) = conv_rule(
                    &mass,
                    child.data(),
                    w.data(),
                    (s.c(), s.h(), s.w()),
                    (o.c(), o.h(), o.w()),
                    geom,
                );
                flow.discarded += lost;
                flow.deposit(inputs[0], out);
            }
            LayerKind::Avgpool { kernel, stride } => {
                let child = &trace.activations[inputs[0]];
                let s = child.shape();
                let o = model.output_shape(li);
                let (out, lost) = avgpool_rule(
                    &mass,
                    child.data(),
                    (s.c(), s.h(), s.w()),
                    (o.h(), o.w()),
                    *kernel,
                    *stride,
                );
                flow.discarded += lost;
                flow.deposit(inputs[0], out);
            }
            LayerKind::Add => {
                let a = trace.activations[inputs[0]].data();
                let b = trace.activations[inputs[1]].data();
                let mut left = vec![0.0; mass.len()];
                let mut right = vec![0.0; mass.len()];
                for p in 0..mass.len() {
                    if mass[p] == 0.0 {
                        continue;
                    }
                    let (x, y) = ((a[p] as f64).max(0.0), (b[p] as f64).max(0.0));
                    let s = x + y;
                    if s <= 0.0 {
                        flow.discarded += mass[p];
                    } else {
                        left[p] = mass[p] * x / s;
                        right[p] = mass[p] * y / s;
                    }
                }
                flow.deposit(inputs[0], left);
                flow.deposit(inputs[1], right);
            }
            LayerKind::Input => unreachable!("the input layer precedes every target"),
        }
    }

    let shape = model.output_shape(target);
    let data = match flow.pending[target].take() {
        Some(m) => m.into_iter().map(|v| v as f32).collect(),
        None => vec![0.0; shape.numel()],
    };
    Ok(ExcitationMaps {
        image_id: String::new(),
        class_index,
        target_layer: target_layer.to_string(),
        num_units: shape.c(),
        height: shape.h(),
        width: shape.w(),
        data,
        discarded_mass: flow.discarded,
    })
}

#[inline]
fn pos(v: f32) -> f64 {
    (v as f64).max(0.0)
}

/// Returns (child mass, discarded mass). `weights` is row-major `(out, in)`.
fn dense_rule(mass: &[f64], act: &[f32], weights: &[f32]) -> (Vec<f64>, f64) {
    let n_in = act.len();
    let mut child = vec![0.0; n_in];
    let mut lost = 0.0;
    for (j, &m) in mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let row = &weights[j * n_in..(j + 1) * n_in];
        let z: f64 = row.iter().zip(act).map(|(&w, &a)| pos(a) * pos(w)).sum();
        if z <= ZERO_GUARD {
            lost += m;
            continue;
        }
        let r = m / z;
        for ((c, &w), &a) in child.iter_mut().zip(row).zip(act) {
            *c += pos(a) * pos(w) * r;
        }
    }
    (child, lost)
}

#[derive(Clone, Copy)]
struct Window {
    kernel: usize,
    stride: usize,
    padding: usize,
}

fn conv_rule(
    mass: &[f64],
    act: &[f32],
    weights: &[f32],
    (cin, h, w): (usize, usize, usize),
    (cout, oh, ow): (usize, usize, usize),
    win: Window,
) -> (Vec<f64>, f64) {
    let k = win.kernel;
    let wpos: Vec<f64> = weights.iter().map(|&v| pos(v)).collect();
    let apos: Vec<f64> = act.iter().map(|&v| pos(v)).collect();
    let mut child = vec![0.0; act.len()];
    let mut lost = 0.0;
    let pad = win.padding as isize;
    for co in 0..cout {
        let kco = &wpos[co * cin * k * k..(co + 1) * cin * k * k];
        for oy in 0..oh {
            let y0 = (oy * win.stride) as isize - pad;
            let ky_lo = (-y0).max(0) as usize;
            let ky_hi = ((h as isize - y0).min(k as isize)).max(0) as usize;
            for ox in 0..ow {
                let m = mass[(co * oh + oy) * ow + ox];
                if m == 0.0 {
                    continue;
                }
                let x0 = (ox * win.stride) as isize - pad;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = ((w as isize - x0).min(k as isize)).max(0) as usize;
                let mut z = 0.0;
                for ci in 0..cin {
                    for ky in ky_lo..ky_hi {
                        let row = ci * h * w + (y0 + ky as isize) as usize * w;
                        let krow = ci * k * k + ky * k;
                        for kx in kx_lo..kx_hi {
                            z += apos[row + (x0 + kx as isize) as usize] * kco[krow + kx];
                        }
                    }
                }
                if z <= ZERO_GUARD {
                    lost += m;
                    continue;
                }
                let r = m / z;
                for ci in 0..cin {
                    for ky in ky_lo..ky_hi {
                        let row = ci * h * w + (y0 + ky as isize) as usize * w;
                        let krow = ci * k * k + ky * k;
                        for kx in kx_lo..kx_hi {
                            let idx = row + (x0 + kx as isize) as usize;
                            child[idx] += apos[idx] * kco[krow + kx] * r;
                        }
                    }
                }
            }
        }
    }
    (child, lost)
}

fn avgpool_rule(
    mass: &[f64],
    act: &[f32],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
    k: usize,
    s: usize,
) -> (Vec<f64>, f64) {
    let mut child = vec![0.0; act.len()];
    let mut lost = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let m = mass[(ch * oh + oy) * ow + ox];
                if m == 0.0 {
                    continue;
                }
                let rows = (0..k).map(|ky| base + (oy * s + ky) * w + ox * s);
                let z: f64 = rows.clone().flat_map(|r| r..r + k).map(|i| pos(act[i])).sum();
                if z <= ZERO_GUARD {
                    lost += m;
                    continue;
                }
                let r = m / z;
                for i in rows.flat_map(|r| r..r + k) {
                    child[i] += pos(act[i]) * r;
                }
            }
        }
    }
    (child, lost)
}

/// Appends one map-dump record: image id (u32 length + UTF-8), class index,
/// K, h, w (all u32), then `K·h·w` f32 values; everything little-endian.
pub fn write_map_record<W: Write>(out: &mut W, maps: &ExcitationMaps) -> std::io::Result<()> {
    let id = maps.image_id.as_bytes();
    out.write_all(&(id.len() as u32).to_le_bytes())?;
    out.write_all(id)?;
    for v in [maps.class_index, maps.num_units, maps.height, maps.width] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(maps.data.len() * 4);
    for v in &maps.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads every record of a map dump. The dump does not carry the target
/// layer or discarded mass; the latter is reconstructed as `1 − Σ maps`.
pub fn read_map_dump<R: Read>(mut input: R) -> Result<Vec<ExcitationMaps>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::CorruptDump(e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let image_id = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::CorruptDump("image id is not UTF-8".into()))?;
        let class_index = cur.u32()? as usize;
        let num_units = cur.u32()? as usize;
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let count = num_units
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptDump("record dimensions overflow".into()))?;
        let data: Vec<f32> = cur
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let total: f64 = data.iter().map(|&v| v as f64).sum();
        records.push(ExcitationMaps {
            image_id,
            class_index,
            target_layer: String::new(),
            num_units,
            height,
            width,
            data,
            discarded_mass: (1.0 - total).max(0.0),
        });
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptDump(format!("record truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_minires, forward, LayerSpec, ModelGraph, Preprocess, WeightStore};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// input(2) → relu → flatten → dense(1), for the hand-evaluated examples.
    fn single_dense(weights: [f32; 2]) -> Model {
        let layers = vec![
            LayerSpec::new("input", LayerKind::Input, &[]),
            LayerSpec::new("relu", LayerKind::Relu, &["input"]),
            LayerSpec::new("flat", LayerKind::Flatten, &["relu"]),
            LayerSpec::new("fc", LayerKind::Dense { out_features: 1 }, &["flat"]).with_weights("fc"),
        ];
        let mut store = WeightStore::new();
        store.insert(
            "fc.weight".into(),
            Tensor::from_vec(Shape::new(1, 2, 1, 1), weights.to_vec()).unwrap(),
        );
        store.insert("fc.bias".into(), Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let graph = ModelGraph {
            layers,
            num_classes: 1,
            class_labels: vec!["only".into()],
            target_layer_default: "relu".into(),
            preprocess: Preprocess {
                mean: vec![0.0; 2],
                std: vec![1.0; 2],
            },
            input_shape: [2, 1, 1],
        };
        Model::new(graph, store).unwrap()
    }

    fn run_single(weights: [f32; 2], act: [f32; 2]) -> ExcitationMaps {
        let model = single_dense(weights);
        let img = Tensor::from_vec(Shape::new(1, 2, 1, 1), act.to_vec()).unwrap();
        let trace = forward(&model, &img).unwrap();
        excitation_backprop(&model, &trace, 0, "relu").unwrap()
    }

    #[test]
    fn dense_rule_hand_examples() {
        let m = run_single([3.0, 1.0], [2.0, 1.0]);
        assert!((m.data[0] as f64 - 6.0 / 7.0).abs() < 1e-7);
        assert!((m.data[1] as f64 - 1.0 / 7.0).abs() < 1e-7);
        assert_eq!(m.discarded_mass, 0.0);

        let m = run_single([3.0, -1.0], [2.0, 1.0]);
        assert_eq!(m.data, vec![1.0, 0.0]);

        let m = run_single([3.0, 1.0], [0.0, 0.0]);
        assert_eq!(m.data, vec![0.0, 0.0]);
        assert_eq!(m.discarded_mass, 1.0);
    }

    #[test]
    fn rejects_bad_targets_and_classes() {
        let model = build_minires(3, 1);
        let img = Tensor::zeros(model.input_tensor_shape());
        let trace = forward(&model, &img).unwrap();
        assert!(matches!(
            excitation_backprop(&model, &trace, 3, "blk2.relu2"),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(matches!(
            excitation_backprop(&model, &trace, 0, "nope"),
            Err(Error::UnknownLayer(_))
        ));
        assert!(matches!(
            excitation_backprop(&model, &trace, 0, "head.fc"),
            Err(Error::TargetNotUpstream(_))
        ));
    }

    fn random_trace(model: &Model, seed: u64) -> ForwardTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = model.input_tensor_shape();
        let img = Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        forward(model, &img).unwrap()
    }

    #[test]
    fn mass_is_conserved_at_every_step() {
        let model = build_minires(4, 9);
        for seed in 0..5 {
            let trace = random_trace(&model, seed);
            for target in ["blk2.relu2", "blk1.relu1", "stem.conv", "blk2.add"] {
                let (maps, steps) = excitation_backprop_traced(&model, &trace, seed as usize % 4, target).unwrap();
                for s in &steps {
                    assert!((s.pending_mass + s.discarded_mass - 1.0).abs() < 1e-9, "{s:?}");
                    assert!(s.min_value >= 0.0);
                }
                assert!(maps.data.iter().all(|&v| v >= 0.0));
                assert!((maps.total_mass() + maps.discarded_mass - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn routing_ignores_layer_scale() {
        let model = build_minires(3, 4);
        let trace = random_trace(&model, 2);
        let base = excitation_backprop(&model, &trace, 1, "blk2.relu1").unwrap();
        for layer in ["blk2.relu1", "head.flatten"] {
            let i = model.layer_index(layer).unwrap();
            let mut scaled = trace.clone();
            scaled.activations[i] = scaled.activations[i].map(|v| v * 3.5);
            let other = excitation_backprop(&model, &scaled, 1, "blk2.relu1").unwrap();
            let diff = base
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff <= 1e-6, "{layer}: {diff}");
        }
    }

    #[test]
    fn identical_traces_give_identical_maps() {
        let model = build_minires(3, 4);
        let trace = random_trace(&model, 5);
        let a = excitation_backprop(&model, &trace, 2, "blk2.relu2").unwrap();
        let b = excitation_backprop(&model, &trace, 2, "blk2.relu2").unwrap();
        let bits = |m: &ExcitationMaps| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.discarded_mass.to_bits(), b.discarded_mass.to_bits());
    }

    #[test]
    fn map_dump_round_trip() {
        let model = build_minires(3, 4);
        let mut buf = Vec::new();
        let mut originals = Vec::new();
        for seed in 0..3 {
            let trace = random_trace(&model, seed);
            let maps = excitation_backprop(&model, &trace, 0, "blk2.relu2")
                .unwrap()
                .with_image_id(format!("img-{seed}"));
            write_map_record(&mut buf, &maps).unwrap();
            originals.push(maps);
        }
        let back = read_map_dump(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in originals.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!((a.class_index, a.num_units, a.height, a.width), (b.class_index, b.num_units, b.height, b.width));
            assert_eq!(a.data, b.data);
        }
        assert!(matches!(read_map_dump(&buf[..buf.len() - 3]), Err(Error::CorruptDump(_))));
    }
}
