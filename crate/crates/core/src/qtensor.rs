//! Quantized int8 tensors and the golden software reference for every layer
//! kind.
//!
//! Quantization is symmetric per-tensor with a zero-point of 0, so a stored
//! value `q` represents `scale * q`. All rounding is half-to-even and all
//! accumulation is saturating signed 32-bit. The MAC-array emulator is checked
//! bit-for-bit against the functions in this module.

use std::fmt;

use num_traits::Float;

use crate::model::{ConvLayer, LayerOp, ModelGraph};
use crate::num::round_clamp;
use crate::Scale;

/// Tensor dimensions in (channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    InvalidScale(f64),
    Shape(String),
    UnsupportedLayer(String),
    ScaleMismatch { left: Scale, right: Scale },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidScale(s) => write!(f, "invalid scale {s}: must be positive and finite"),
            TensorError::Shape(msg) => write!(f, "shape error: {msg}"),
            TensorError::UnsupportedLayer(kind) => write!(f, "unsupported layer kind `{kind}`"),
            TensorError::ScaleMismatch { left, right } => {
                write!(f, "scale mismatch on add: {left} vs {right}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidScale(s))
    }
}

/// Relative tolerance when comparing two tensor scales for equality.
///
/// Scales are derived as `s_in * (s_w / m)` and two independently derived
/// branches can land one ulp apart.
pub const SCALE_REL_TOL: f64 = 1e-9;

pub fn scales_match(a: Scale, b: Scale) -> bool {
    (a - b).abs() <= SCALE_REL_TOL * a.abs().max(b.abs())
}

/// Quantized int8 activation or weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<i8>,
    scale: Scale,
}

impl QTensor {
    pub fn new(shape: Shape, data: Vec<i8>, scale: Scale) -> Result<Self> {
        check_scale(scale)?;
        if shape.is_empty() {
            return Err(TensorError::Shape(format!("empty tensor shape {shape}")));
        }
        if data.len() != shape.len() {
            return Err(TensorError::Shape(format!("data length {} does not match shape {shape}", data.len())));
        }
        Ok(QTensor { shape, data, scale })
    }

    pub fn zeros(shape: Shape, scale: Scale) -> Result<Self> {
        QTensor::new(shape, vec![0; shape.len()], scale)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| q as f64 * self.scale).collect()
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }
}

/// Signed 32-bit accumulator tensor produced by conv/fc layers before
/// requantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}

impl AccTensor {
    pub fn at(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn requantize(&self, m: Scale, out_scale: Scale) -> Result<QTensor> {
        check_scale(m)?;
        let data = self.data.iter().map(|&a| requantize_unchecked(a, m)).collect();
        QTensor::new(self.shape, data, out_scale)
    }
}

/// Convolution weights in (Cout, Cin, K, K) order with a per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub data: Vec<i8>,
    pub scale: Scale,
}

impl Kernel {
    pub fn new(cout: usize, cin: usize, k: usize, data: Vec<i8>, scale: Scale) -> Result<Self> {
        check_scale(scale)?;
        if cout == 0 || cin == 0 || k == 0 {
            return Err(TensorError::Shape(format!("degenerate kernel {cout}x{cin}x{k}x{k}")));
        }
        if data.len() != cout * cin * k * k {
            return Err(TensorError::Shape(format!("kernel data length {} does not match {cout}x{cin}x{k}x{k}", data.len())));
        }
        Ok(Kernel { cout, cin, k, data, scale })
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        ((o * self.cin + c) * self.k + i) * self.k + j
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, i: usize, j: usize) -> i8 {
        self.data[self.index(o, c, i, j)]
    }
}

/// Quantize real values: `clamp(round_half_even(x / scale), -128, 127)`.
pub fn quantize<T: Float>(x: &[T], shape: Shape, scale: T) -> Result<QTensor> {
    let s = scale.to_f64().unwrap_or(f64::NAN);
    check_scale(s)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Shape("non-finite input value".into()));
    }
    let data = x.iter().map(|&v| round_clamp(v / scale, -128, 127) as i8).collect();
    QTensor::new(shape, data, s)
}

/// Rescale an accumulator to int8: `clamp(round_half_even(acc * m), -128, 127)`.
pub fn requantize<T: Float>(acc: i32, m: T) -> Result<i8> {
    check_scale(m.to_f64().unwrap_or(f64::NAN))?;
    let prod = T::from(acc).unwrap() * m;
    Ok(round_clamp(prod, -128, 127) as i8)
}

#[inline]
pub(crate) fn requantize_unchecked(acc: i32, m: Scale) -> i8 {
    round_clamp(acc as f64 * m, -128, 127) as i8
}

/// Output extent of a sliding window along one axis.
pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Direct convolution in exact integer arithmetic with zero padding.
pub fn ref_conv2d(input: &QTensor, kernel: &Kernel, bias: &[i32], stride: usize, pad: usize) -> Result<AccTensor> {
    let s = input.shape();
    if kernel.cin != s.c {
        return Err(TensorError::Shape(format!("kernel expects {} input channels, input has {}", kernel.cin, s.c)));
    }
    if bias.len() != kernel.cout {
        return Err(TensorError::Shape(format!("bias length {} does not match {} output channels", bias.len(), kernel.cout)));
    }
    let (ho, wo) = match (out_extent(s.h, kernel.k, stride, pad), out_extent(s.w, kernel.k, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(TensorError::Shape(format!("kernel {k}x{k} stride {stride} pad {pad} does not fit input {s}", k = kernel.k))),
    };
    let out_shape = Shape::new(kernel.cout, ho, wo);
    let mut data = Vec::with_capacity(out_shape.len());
    for (o, &b) in bias.iter().enumerate() {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = b;
                for c in 0..s.c {
                    for i in 0..kernel.k {
                        let iy = (y * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..kernel.k {
                            let ix = (x * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let a = input.at(c, iy as usize, ix as usize) as i32;
                            let w = kernel.at(o, c, i, j) as i32;
                            acc = acc.saturating_add(a * w);
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    Ok(AccTensor { shape: out_shape, data })
}

/// Scale of a conv/fc output given its input scale: `s_in * (s_w / m)`.
pub fn conv_output_scale(input_scale: Scale, layer: &ConvLayer) -> Scale {
    input_scale * (layer.weights.scale / layer.m)
}

fn single_input<'a>(kind: &str, inputs: &[&'a QTensor]) -> Result<&'a QTensor> {
    match inputs {
        [t] => Ok(t),
        _ => Err(TensorError::Shape(format!("{kind} expects 1 input, got {}", inputs.len()))),
    }
}

pub fn ref_relu(t: &QTensor) -> QTensor {
    QTensor { shape: t.shape, data: t.data.iter().map(|&q| q.max(0)).collect(), scale: t.scale }
}

pub fn ref_maxpool(t: &QTensor, k: usize, stride: usize, pad: usize) -> Result<QTensor> {
    let s = t.shape();
    if pad >= k {
        return Err(TensorError::Shape(format!("maxpool pad {pad} must be smaller than window {k}")));
    }
    let (ho, wo) = match (out_extent(s.h, k, stride, pad), out_extent(s.w, k, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(TensorError::Shape(format!("maxpool {k}/{stride} does not fit input {s}"))),
    };
    let mut data = Vec::with_capacity(s.c * ho * wo);
    for c in 0..s.c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = i8::MIN;
                for i in 0..k {
                    let iy = (y * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ix = (x * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        best = best.max(t.at(c, iy as usize, ix as usize));
                    }
                }
                data.push(best);
            }
        }
    }
    QTensor::new(Shape::new(s.c, ho, wo), data, t.scale)
}

/// Per-channel mean over the spatial plane, rounded half-to-even in exact
/// integer arithmetic.
pub fn ref_global_avgpool(t: &QTensor) -> QTensor {
    let s = t.shape();
    let n = (s.h * s.w) as i64;
    let data = (0..s.c)
        .map(|c| {
            let start = s.index(c, 0, 0);
            let sum: i64 = t.data[start..start + s.h * s.w].iter().map(|&q| q as i64).sum();
            div_round_half_even(sum, n) as i8
        })
        .collect();
    QTensor { shape: Shape::new(s.c, 1, 1), data, scale: t.scale }
}

/// `round_half_even(num / den)` for `den > 0`, without floating point.
pub fn div_round_half_even(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    }
}

pub fn ref_add(a: &QTensor, b: &QTensor) -> Result<QTensor> {
    if a.shape != b.shape {
        return Err(TensorError::Shape(format!("add operands {} and {} differ", a.shape, b.shape)));
    }
    if !scales_match(a.scale, b.scale) {
        return Err(TensorError::ScaleMismatch { left: a.scale, right: b.scale });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as i16 + y as i16).clamp(-128, 127) as i8).collect();
    Ok(QTensor { shape: a.shape, data, scale: a.scale })
}

/// Apply one layer on the reference path.
pub fn ref_execute_layer(op: &LayerOp, inputs: &[&QTensor]) -> Result<QTensor> {
    match op {
        LayerOp::Conv(conv) | LayerOp::Fc(conv) => {
            let input = single_input(op.kind().as_str(), inputs)?;
            if matches!(op, LayerOp::Fc(_)) && (input.shape().h != 1 || input.shape().w != 1) {
                return Err(TensorError::Shape(format!("fc expects a Cx1x1 input, got {}", input.shape())));
            }
            let acc = ref_conv2d(input, &conv.weights, &conv.bias, conv.stride, conv.pad)?;
            acc.requantize(conv.m, conv_output_scale(input.scale(), conv))
        }
        LayerOp::Relu => Ok(ref_relu(single_input("relu", inputs)?)),
        LayerOp::MaxPool { k, stride, pad } => ref_maxpool(single_input("maxpool", inputs)?, *k, *stride, *pad),
        LayerOp::GlobalAvgPool => Ok(ref_global_avgpool(single_input("gavgpool", inputs)?)),
        LayerOp::Add => match inputs {
            [a, b] => ref_add(a, b),
            _ => Err(TensorError::Shape(format!("add expects 2 inputs, got {}", inputs.len()))),
        },
    }
}

/// Per-layer outputs of one forward pass, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub layers: Vec<(String, QTensor)>,
}

impl LayerOutputs {
    pub fn get(&self, id: &str) -> Option<&QTensor> {
        self.layers.iter().find(|(l, _)| l == id).map(|(_, t)| t)
    }
}

/// Run a whole graph on the reference path, layer by layer in topological
/// order. The returned logits are the output layer's int8 values.
pub fn reference_forward(graph: &ModelGraph, input: &QTensor) -> std::result::Result<(LayerOutputs, Vec<i8>), crate::model::ModelError> {
    use crate::model::{ModelError, INPUT_ID};
    if input.shape() != graph.input.shape() || !scales_match(input.scale(), graph.input.scale) {
        return Err(ModelError::Shape {
            layer: INPUT_ID.into(),
            msg: format!(
                "input tensor {} @ {} does not match model input {} @ {}",
                input.shape(),
                input.scale(),
                graph.input.shape(),
                graph.input.scale
            ),
        });
    }
    let order = graph.topo_order()?;
    let mut outputs: Vec<(String, QTensor)> = Vec::with_capacity(order.len());
    for layer in order {
        let ins = layer
            .inputs
            .iter()
            .map(|id| {
                if id == INPUT_ID {
                    Ok(input)
                } else {
                    outputs
                        .iter()
                        .find(|(l, _)| l == id)
                        .map(|(_, t)| t)
                        .ok_or_else(|| ModelError::Schema { layer: layer.id.clone(), msg: format!("unresolved input `{id}`") })
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = ref_execute_layer(&layer.op, &ins).map_err(|e| ModelError::from_tensor(&layer.id, e))?;
        outputs.push((layer.id.clone(), out));
    }
    let logits = outputs.iter().find(|(l, _)| *l == graph.output).map(|(_, t)| t.data().to_vec()).unwrap_or_default();
    Ok((LayerOutputs { layers: outputs }, logits))
}
