//! Deterministic models and datasets for tests, demos and the acceptance
//! suite.
//!
//! The desk-scale model classifies 3x8x8 images of stripe patterns into four
//! orientations. Its first conv holds hand-written gradient filters; the
//! final fc layer is a nearest-centroid classifier fitted on a separate
//! training draw through the reference pipeline. Everything is derived from
//! fixed SplitMix64 seeds, so the generated files are reproducible bit for
//! bit.

use crate::model::Dataset;
use crate::model::{InputSpec, LayerOp, ModelBuilder, ModelGraph};
use crate::qtensor::{reference_forward, Kernel, QTensor, Shape};
use crate::rng::{self, range_i64, Rng};

fn rand_i8(r: &mut Rng, lo: i64, hi: i64) -> i8 {
    range_i64(r, lo, hi) as i8
}

fn random_kernel(r: &mut Rng, cout: usize, cin: usize, k: usize, scale: f64) -> Kernel {
    let data = (0..cout * cin * k * k).map(|_| rand_i8(r, -128, 127)).collect();
    Kernel::new(cout, cin, k, data, scale).unwrap()
}

/// Uniform random int8 tensor matching `spec`.
pub fn random_input(spec: &InputSpec, seed: u64) -> QTensor {
    let mut r = rng::seeded(rng::derive_seed(seed, &[0x1A9]));
    let shape = spec.shape();
    QTensor::new(shape, (0..shape.len()).map(|_| rand_i8(&mut r, -128, 127)).collect(), spec.scale).unwrap()
}

/// conv(8->16, 3x3) -> relu -> fc(16->4) on a 8x3x3 input.
pub fn conv_relu_fc() -> ModelGraph {
    let mut r = rng::seeded(0xC0FFEE);
    let input = InputSpec { c: 8, h: 3, w: 3, scale: 1.0 / 32.0 };
    let conv = random_kernel(&mut r, 16, 8, 3, 1.0 / 64.0);
    let bias1 = (0..16).map(|_| range_i64(&mut r, -3000, 3000) as i32).collect();
    let fc = random_kernel(&mut r, 4, 16, 1, 1.0 / 64.0);
    let bias2 = (0..4).map(|_| range_i64(&mut r, -2000, 2000) as i32).collect();
    let mut b = ModelBuilder::new(input, 4);
    b.conv("conv1", "input", 1, 0, conv, bias1, 1.0 / 2048.0).relu("relu1", "conv1").fc("fc1", "relu1", fc, bias2, 1.0 / 256.0);
    b.build("fc1").unwrap()
}

/// a -> {b, c} -> d (add), all 1x1 convs on a 4x1x1 input.
pub fn diamond_add() -> ModelGraph {
    let mut r = rng::seeded(0xD1A);
    let input = InputSpec { c: 4, h: 1, w: 1, scale: 1.0 / 16.0 };
    let mut b = ModelBuilder::new(input, 4);
    b.conv("a", "input", 1, 0, random_kernel(&mut r, 8, 4, 1, 1.0 / 64.0), vec![10; 8], 1.0 / 256.0)
        .conv("b", "a", 1, 0, random_kernel(&mut r, 4, 8, 1, 1.0 / 64.0), vec![-5; 4], 1.0 / 512.0)
        .conv("c", "a", 1, 0, random_kernel(&mut r, 4, 8, 1, 1.0 / 64.0), vec![7; 4], 1.0 / 512.0)
        .add("d", "b", "c");
    b.build("d").unwrap()
}

/// conv(4->4, 3x3, pad 1) -> relu -> gavgpool -> fc(4->4) on a 4x6x6 input.
/// Every MAC layer has Cin = 4, so lanes 4..7 never carry operands.
pub fn half_width_model() -> ModelGraph {
    let mut r = rng::seeded(0x4A1F);
    let input = InputSpec { c: 4, h: 6, w: 6, scale: 1.0 / 32.0 };
    let mut b = ModelBuilder::new(input, 4);
    b.conv("conv1", "input", 1, 1, random_kernel(&mut r, 4, 4, 3, 1.0 / 64.0), vec![100, -100, 50, 0], 1.0 / 1024.0)
        .relu("relu1", "conv1")
        .gavgpool("gap", "relu1")
        .fc("fc", "gap", random_kernel(&mut r, 4, 4, 1, 1.0 / 64.0), vec![0, 40, -40, 20], 1.0 / 64.0);
    b.build("fc").unwrap()
}

/// Dataset whose labels are the reference prediction of `g` on uniform
/// random inputs, so the fault-free accuracy is exactly 1.
pub fn self_labelled_dataset(g: &ModelGraph, n: usize, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(n * g.input.shape().len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let x = random_input(&g.input, rng::derive_seed(seed, &[i as u64]));
        let (_, logits) = reference_forward(g, &x).unwrap();
        labels.push(crate::macarray::classify_argmax(&logits).unwrap() as u16);
        samples.extend_from_slice(x.data());
    }
    Dataset::new(g.input.shape(), g.input.scale, samples, labels).unwrap()
}

// ---------------------------------------------------------------------------
// Desk-scale stripe classifier

pub const DESK_CLASSES: usize = 4;
pub const DESK_INPUT: InputSpec = InputSpec { c: 3, h: 8, w: 8, scale: 1.0 / 32.0 };
const DESK_AMPLITUDE: i64 = 40;
const DESK_NOISE: i64 = 28;
const DESK_TRAIN_SEED: u64 = 0x7EA1_0001;
pub const DESK_EVAL_SEED: u64 = 0x7EA1_0002;

/// Square wave of period 4 (two high, two low).
fn stripe(t: i64, phase: i64) -> i64 {
    if (t + phase).rem_euclid(4) < 2 {
        1
    } else {
        -1
    }
}

/// One sample of class `label`: 0 horizontal, 1 vertical, 2 and 3 the two
/// diagonals.
fn stripe_sample(r: &mut Rng, label: usize) -> Vec<i8> {
    let phase = range_i64(r, 0, 3);
    let mut out = Vec::with_capacity(DESK_INPUT.shape().len());
    for _c in 0..DESK_INPUT.c {
        let gain = range_i64(r, 6, 10);
        for y in 0..DESK_INPUT.h as i64 {
            for x in 0..DESK_INPUT.w as i64 {
                let s = match label {
                    0 => stripe(y, phase),
                    1 => stripe(x, phase),
                    2 => stripe(x + y, phase),
                    _ => stripe(x - y, phase),
                };
                let v = s * DESK_AMPLITUDE * gain / 10 + range_i64(r, -DESK_NOISE, DESK_NOISE);
                out.push(v.clamp(-128, 127) as i8);
            }
        }
    }
    out
}

/// `n` stripe images with balanced labels `i % 4`.
pub fn desk_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng::seeded(seed);
    let mut samples = Vec::with_capacity(n * DESK_INPUT.shape().len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % DESK_CLASSES;
        samples.extend(stripe_sample(&mut r, label));
        labels.push(label as u16);
    }
    Dataset::new(DESK_INPUT.shape(), DESK_INPUT.scale, samples, labels).unwrap()
}

/// Gradient filters along y, x, x+y and x-y.
const GRADIENTS: [[[i8; 3]; 3]; 4] = [
    [[-1, -1, -1], [0, 0, 0], [1, 1, 1]],
    [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]],
    [[-1, -1, 0], [-1, 0, 1], [0, 1, 1]],
    [[0, 1, 1], [-1, 0, 1], [-1, -1, 0]],
];

/// Layers up to the pooled 8-feature vector; the fc head is appended by
/// [`desk_model`].
fn desk_backbone() -> ModelBuilder {
    let mut r = rng::seeded(0x00BA_CB0E);
    // conv1: channel 2k is +gradient k, channel 2k+1 is -gradient k
    let mut w1 = Vec::with_capacity(8 * 3 * 9);
    for o in 0..8 {
        let sign = if o % 2 == 0 { 16 } else { -16 };
        for _c in 0..3 {
            for row in GRADIENTS[o / 2] {
                w1.extend(row.iter().map(|&v| v * sign));
            }
        }
    }
    let conv1 = Kernel::new(8, 3, 3, w1, 1.0 / 16.0).unwrap();
    // conv2: centre-tap identity at half gain plus small cross-channel noise;
    // weight scale equals m so the branch keeps relu1's scale for the add.
    let mut w2 = Vec::with_capacity(8 * 8 * 9);
    for o in 0..8 {
        for c in 0..8 {
            for t in 0..9 {
                w2.push(if o == c && t == 4 { 64 } else { rand_i8(&mut r, -3, 3) });
            }
        }
    }
    let conv2 = Kernel::new(8, 8, 3, w2, 1.0 / 128.0).unwrap();
    let mut b = ModelBuilder::new(DESK_INPUT, DESK_CLASSES);
    b.conv("conv1", "input", 1, 1, conv1, vec![0; 8], 1.0 / 128.0)
        .relu("relu1", "conv1")
        .conv("conv2", "relu1", 1, 1, conv2, vec![0; 8], 1.0 / 128.0)
        .add("add1", "relu1", "conv2")
        .relu("relu2", "add1")
        .maxpool("pool1", "relu2", 2, 2)
        .gavgpool("gap", "pool1");
    b
}

/// The desk-scale stripe classifier (eight layers, three on the MAC array).
pub fn desk_model() -> ModelGraph {
    let backbone = desk_backbone();
    // Stand-in fc so the backbone can run through the reference pipeline.
    let mut probe = backbone.clone();
    probe.fc("fc", "gap", Kernel::new(4, 8, 1, vec![0; 32], 1.0).unwrap(), vec![0; 4], 1.0);
    let probe = probe.build("fc").unwrap();

    let train = desk_dataset(256, DESK_TRAIN_SEED);
    let mut sums = [[0f64; 8]; DESK_CLASSES];
    let mut counts = [0usize; DESK_CLASSES];
    for i in 0..train.len() {
        let (outs, _) = reference_forward(&probe, &train.sample(i)).unwrap();
        let feat = outs.get("gap").unwrap();
        let label = train.labels[i] as usize;
        counts[label] += 1;
        for (s, &q) in sums[label].iter_mut().zip(feat.data()) {
            *s += q as f64;
        }
    }
    let centroids: Vec<Vec<f64>> = sums.iter().zip(counts).map(|(s, n)| s.iter().map(|v| v / n as f64).collect()).collect();

    // Nearest centroid as a linear layer: score_c = w_c . f - |w_c|^2 / (2 alpha)
    // with w_c = alpha * mu_c, shifted by a common offset so winning scores
    // sit near zero before requantization.
    let peak = centroids.iter().flatten().fold(0f64, |m, v| m.max(v.abs()));
    let alpha = 100.0 / peak;
    let weights: Vec<i8> = centroids.iter().flat_map(|mu| mu.iter().map(|v| (v * alpha).round() as i8)).collect();
    let raw_bias: Vec<i64> =
        weights.chunks(8).map(|w| -(w.iter().map(|&x| (x as i64).pow(2)).sum::<i64>() as f64 / (2.0 * alpha)).round() as i64).collect();
    let mut best_scores = vec![];
    let mut spread = 0f64;
    for i in 0..train.len() {
        let (outs, _) = reference_forward(&probe, &train.sample(i)).unwrap();
        let f = outs.get("gap").unwrap().data();
        let scores: Vec<i64> =
            weights.chunks(8).zip(&raw_bias).map(|(w, b)| b + w.iter().zip(f).map(|(&a, &x)| a as i64 * x as i64).sum::<i64>()).collect();
        best_scores.push(*scores.iter().max().unwrap());
        spread = spread.max((scores.iter().max().unwrap() - scores.iter().min().unwrap()) as f64);
    }
    best_scores.sort();
    let offset = -best_scores[best_scores.len() / 2];
    let bias: Vec<i32> = raw_bias.iter().map(|b| (b + offset) as i32).collect();
    let m = 100.0 / spread;

    let mut b = backbone;
    b.fc("fc", "gap", Kernel::new(4, 8, 1, weights, 1.0 / 64.0).unwrap(), bias, m);
    b.build("fc").unwrap()
}

// ---------------------------------------------------------------------------
// Oracles

/// Copy of `g` with every conv/fc kernel zeroed, leaving only the biases.
/// Running it through the reference pipeline is the independent oracle for
/// an all-lanes stuck-at-zero emulation.
pub fn bias_only_graph(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    for layer in &mut out.layers {
        if let LayerOp::Conv(c) | LayerOp::Fc(c) = &mut layer.op {
            c.weights.data.iter_mut().for_each(|w| *w = 0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Random graphs

/// A random valid graph mixing conv, fc, relu, maxpool, gavgpool and residual
/// add, with every dimension and channel count at most 16.
pub fn random_model(seed: u64) -> ModelGraph {
    let mut r = rng::seeded(rng::derive_seed(seed, &[0x5EED]));
    let c0 = range_i64(&mut r, 1, 16) as usize;
    let h0 = range_i64(&mut r, 1, 16) as usize;
    let w0 = range_i64(&mut r, 1, 16) as usize;
    let input = InputSpec { c: c0, h: h0, w: w0, scale: 1.0 / 32.0 };
    let classes = range_i64(&mut r, 2, 10) as usize;
    let mut b = ModelBuilder::new(input, classes);
    let mut cur = "input".to_string();
    let mut shape = Shape::new(c0, h0, w0);
    let mut n = 0;
    let mut next_id = |prefix: &str| {
        n += 1;
        format!("{prefix}{n}")
    };
    // m that keeps typical accumulators inside int8 after requantization
    let m_for = |cin: usize, k: usize| 1.0 / (64.0 * ((cin * k * k) as f64).sqrt() * 8.0);

    let blocks = range_i64(&mut r, 1, 4);
    for _ in 0..blocks {
        match range_i64(&mut r, 0, 3) {
            0 | 1 => {
                let cout = range_i64(&mut r, 1, 16) as usize;
                let pad = range_i64(&mut r, 0, 1) as usize;
                let max_k = (shape.h + 2 * pad).min(shape.w + 2 * pad).min(3);
                let k = range_i64(&mut r, 1, max_k as i64) as usize;
                let stride = range_i64(&mut r, 1, 2) as usize;
                let kern = random_kernel(&mut r, cout, shape.c, k, 1.0 / 64.0);
                let bias = (0..cout).map(|_| range_i64(&mut r, -2000, 2000) as i32).collect();
                let id = next_id("conv");
                b.conv(&id, &cur, stride, pad, kern, bias, m_for(shape.c, k));
                shape = Shape::new(cout, (shape.h + 2 * pad - k) / stride + 1, (shape.w + 2 * pad - k) / stride + 1);
                cur = id;
                if range_i64(&mut r, 0, 1) == 1 {
                    let id = next_id("relu");
                    b.relu(&id, &cur);
                    cur = id;
                }
            }
            2 if shape.h >= 2 && shape.w >= 2 => {
                let id = next_id("pool");
                b.maxpool(&id, &cur, 2, 2);
                shape = Shape::new(shape.c, shape.h / 2, shape.w / 2);
                cur = id;
            }
            _ => {
                // residual: same-shape conv whose weight scale equals m
                let k = if shape.h >= 1 && range_i64(&mut r, 0, 1) == 1 { 3 } else { 1 };
                let pad = k / 2;
                let m = m_for(shape.c, k);
                let kern = {
                    let mut kk = random_kernel(&mut r, shape.c, shape.c, k, 1.0);
                    kk.scale = m;
                    kk
                };
                let bias = (0..shape.c).map(|_| range_i64(&mut r, -500, 500) as i32).collect();
                let conv_id = next_id("res_conv");
                b.conv(&conv_id, &cur, 1, pad, kern, bias, m);
                let add_id = next_id("add");
                b.add(&add_id, &cur, &conv_id);
                cur = add_id;
            }
        }
    }
    if range_i64(&mut r, 0, 1) == 1 {
        let id = next_id("relu");
        b.relu(&id, &cur);
        cur = id;
    }
    if shape.h != 1 || shape.w != 1 {
        let id = next_id("gap");
        b.gavgpool(&id, &cur);
        cur = id;
    }
    let fc = random_kernel(&mut r, classes, shape.c, 1, 1.0 / 64.0);
    let bias = (0..classes).map(|_| range_i64(&mut r, -1000, 1000) as i32).collect();
    b.fc("fc", &cur, fc, bias, m_for(shape.c, 1));
    b.build("fc").unwrap_or_else(|e| panic!("random model {seed} invalid: {e:?}"))
}
