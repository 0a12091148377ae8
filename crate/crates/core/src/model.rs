//! CNN graph representation plus the on-disk model and dataset formats.
//!
//! A model is a UTF-8 JSON manifest describing the layers and a little-endian
//! binary blob holding int8 kernels in (Cout, Cin, K, K) order and int32
//! biases. Manifest offsets are byte offsets into the blob; `weights.len` is a
//! byte count (one byte per int8 weight) and `bias.len` is the number of
//! int32 entries.
//!
//! The reserved id `input` names the graph input in a layer's `inputs` list.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::qtensor::{out_extent, scales_match, Kernel, QTensor, Shape, TensorError};
use crate::Scale;

pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Io { path: String, msg: String },
    Schema { layer: String, msg: String },
    UnsupportedLayer { layer: String, kind: String },
    MissingBlob(String),
    Shape { layer: String, msg: String },
    Cycle(String),
    ScaleMismatch(String),
    Dataset(String),
}

impl ModelError {
    pub(crate) fn from_tensor(layer: &str, e: TensorError) -> Self {
        match e {
            TensorError::ScaleMismatch { .. } => ModelError::ScaleMismatch(layer.into()),
            TensorError::UnsupportedLayer(kind) => ModelError::UnsupportedLayer { layer: layer.into(), kind },
            other => ModelError::Shape { layer: layer.into(), msg: other.to_string() },
        }
    }

    /// Layer id (or file path for I/O failures) the error refers to.
    pub fn subject(&self) -> &str {
        match self {
            ModelError::Io { path, .. } => path,
            ModelError::Schema { layer, .. } | ModelError::UnsupportedLayer { layer, .. } | ModelError::Shape { layer, .. } => layer,
            ModelError::MissingBlob(l) | ModelError::Cycle(l) | ModelError::ScaleMismatch(l) => l,
            ModelError::Dataset(_) => "dataset",
        }
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Io { path, msg } => write!(f, "{path}: {msg}"),
            ModelError::Schema { layer, msg } => write!(f, "schema error in `{layer}`: {msg}"),
            ModelError::UnsupportedLayer { layer, kind } => {
                write!(f, "layer `{layer}`: unsupported layer kind `{kind}`")
            }
            ModelError::MissingBlob(layer) => write!(f, "layer `{layer}`: weights blob range is missing"),
            ModelError::Shape { layer, msg } => write!(f, "shape error in `{layer}`: {msg}"),
            ModelError::Cycle(layer) => write!(f, "layer `{layer}` is part of a cycle"),
            ModelError::ScaleMismatch(layer) => write!(f, "layer `{layer}`: add inputs have different scales"),
            ModelError::Dataset(msg) => write!(f, "dataset: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv,
    Fc,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Add,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "gavgpool",
            LayerKind::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "fc" => LayerKind::Fc,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "gavgpool" => LayerKind::GlobalAvgPool,
            "add" => LayerKind::Add,
            _ => return None,
        })
    }

    pub fn uses_mac_array(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }

    fn arity(&self) -> usize {
        if *self == LayerKind::Add {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Byte range inside the weights blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobRef {
    pub offset: u64,
    pub len: u64,
}

/// Parameters and resolved weights of a conv or fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Requantization multiplier `s_in * s_w / s_out`.
    pub m: Scale,
    pub weights: Kernel,
    pub bias: Vec<i32>,
    pub weight_ref: BlobRef,
    /// `offset` in bytes, `len` in int32 entries.
    pub bias_ref: BlobRef,
}

impl ConvLayer {
    pub fn cout(&self) -> usize {
        self.weights.cout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv(ConvLayer),
    /// Fully connected over a Cx1x1 input; same semantics as a 1x1 conv.
    Fc(ConvLayer),
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Add,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv(_) => LayerKind::Conv,
            LayerOp::Fc(_) => LayerKind::Fc,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool { .. } => LayerKind::MaxPool,
            LayerOp::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerOp::Add => LayerKind::Add,
        }
    }

    pub fn conv(&self) -> Option<&ConvLayer> {
        match self {
            LayerOp::Conv(c) | LayerOp::Fc(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub inputs: Vec<String>,
    pub op: LayerOp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSpec {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub scale: Scale,
}

impl InputSpec {
    pub fn shape(&self) -> Shape {
        Shape::new(self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: InputSpec,
    pub classes: usize,
    pub output: String,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Layers ordered so that each follows all of its inputs. Among layers
    /// that are ready at the same time the lexicographically smallest id goes
    /// first.
    pub fn topo_order(&self) -> Result<Vec<&LayerSpec>> {
        let index: HashMap<&str, usize> = self.layers.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
        let mut pending = vec![0usize; self.layers.len()];
        let mut consumers: Vec<Vec<usize>> = vec![vec![]; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for src in &l.inputs {
                if let Some(&j) = index.get(src.as_str()) {
                    pending[i] += 1;
                    consumers[j].push(i);
                }
            }
        }
        let mut ready: BTreeSet<(&str, usize)> =
            pending.iter().enumerate().filter(|(_, &p)| p == 0).map(|(i, _)| (self.layers[i].id.as_str(), i)).collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(next) = ready.pop_first() {
            let i = next.1;
            order.push(&self.layers[i]);
            for &c in &consumers[i] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.insert((self.layers[c].id.as_str(), c));
                }
            }
        }
        if order.len() != self.layers.len() {
            let stuck =
                pending.iter().enumerate().filter(|(_, &p)| p > 0).map(|(i, _)| self.layers[i].id.as_str()).min().unwrap_or_default();
            return Err(ModelError::Cycle(stuck.to_string()));
        }
        Ok(order)
    }

    /// Output shape and scale of every layer, keyed by id. Fails on the first
    /// inconsistency; use [`validate_graph`] to collect all of them.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, (Shape, Scale)>> {
        let mut errors = vec![];
        let shapes = propagate_shapes(self, &mut errors)?;
        match errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(shapes),
        }
    }
}

/// Shape/scale propagation in topological order. Per-layer problems are
/// pushed to `errors`; layers downstream of a failure are skipped. Only a
/// cycle aborts.
fn propagate_shapes(g: &ModelGraph, errors: &mut Vec<ModelError>) -> Result<BTreeMap<String, (Shape, Scale)>> {
    let order = g.topo_order()?;
    let mut known: BTreeMap<String, (Shape, Scale)> = BTreeMap::new();
    let input = (g.input.shape(), g.input.scale);
    for layer in order {
        let ins: Option<Vec<(Shape, Scale)>> =
            layer.inputs.iter().map(|src| if src == INPUT_ID { Some(input) } else { known.get(src).copied() }).collect();
        let Some(ins) = ins else { continue };
        let kind = layer.op.kind();
        if ins.len() != kind.arity() {
            errors.push(ModelError::Schema {
                layer: layer.id.clone(),
                msg: format!("{kind} expects {} input(s), got {}", kind.arity(), ins.len()),
            });
            continue;
        }
        let shape_err = |msg: String| ModelError::Shape { layer: layer.id.clone(), msg };
        let (s, scale) = ins[0];
        let out = match &layer.op {
            LayerOp::Conv(conv) | LayerOp::Fc(conv) => {
                let w = &conv.weights;
                if kind == LayerKind::Fc && (s.h != 1 || s.w != 1 || conv.k != 1 || conv.stride != 1 || conv.pad != 0) {
                    errors.push(shape_err(format!("fc needs a Cx1x1 input and k=1, stride=1, pad=0; input is {s}")));
                    continue;
                }
                if conv.k == 0 || conv.stride == 0 {
                    errors.push(ModelError::Schema { layer: layer.id.clone(), msg: "k and stride must be positive".into() });
                    continue;
                }
                if w.cin != s.c {
                    errors.push(shape_err(format!("declared Cin={} but input has C={}", w.cin, s.c)));
                    continue;
                }
                if w.k != conv.k {
                    errors.push(shape_err(format!("kernel is {}x{}, layer declares k={}", w.k, w.k, conv.k)));
                    continue;
                }
                if conv.bias.len() != w.cout {
                    errors.push(shape_err(format!("bias has {} entries for Cout={}", conv.bias.len(), w.cout)));
                    continue;
                }
                if !(conv.m > 0.0 && conv.m.is_finite()) {
                    errors.push(ModelError::Schema { layer: layer.id.clone(), msg: format!("invalid requant scale m={}", conv.m) });
                    continue;
                }
                match (out_extent(s.h, conv.k, conv.stride, conv.pad), out_extent(s.w, conv.k, conv.stride, conv.pad)) {
                    (Some(ho), Some(wo)) => (Shape::new(w.cout, ho, wo), scale * (w.scale / conv.m)),
                    _ => {
                        errors.push(shape_err(format!("kernel {} with pad {} does not fit input {s}", conv.k, conv.pad)));
                        continue;
                    }
                }
            }
            LayerOp::Relu => (s, scale),
            LayerOp::MaxPool { k, stride, pad } => {
                if *k == 0 || *stride == 0 || *pad >= *k {
                    errors.push(ModelError::Schema {
                        layer: layer.id.clone(),
                        msg: format!("maxpool needs k>0, stride>0, pad<k (k={k}, stride={stride}, pad={pad})"),
                    });
                    continue;
                }
                match (out_extent(s.h, *k, *stride, *pad), out_extent(s.w, *k, *stride, *pad)) {
                    (Some(ho), Some(wo)) => (Shape::new(s.c, ho, wo), scale),
                    _ => {
                        errors.push(shape_err(format!("pool window {k} does not fit input {s}")));
                        continue;
                    }
                }
            }
            LayerOp::GlobalAvgPool => (Shape::new(s.c, 1, 1), scale),
            LayerOp::Add => {
                let (s2, scale2) = ins[1];
                if s != s2 {
                    errors.push(shape_err(format!("add operands {s} and {s2} differ")));
                    continue;
                }
                if !scales_match(scale, scale2) {
                    errors.push(ModelError::ScaleMismatch(layer.id.clone()));
                    continue;
                }
                (s, scale)
            }
        };
        known.insert(layer.id.clone(), out);
    }
    Ok(known)
}

/// Check every graph invariant and return all violations.
pub fn validate_graph(g: &ModelGraph) -> std::result::Result<(), Vec<ModelError>> {
    let mut errors = vec![];
    let graph_err = |msg: &str| ModelError::Schema { layer: "<graph>".into(), msg: msg.into() };
    if g.layers.is_empty() {
        errors.push(graph_err("model has no layers"));
    }
    if g.input.c == 0 || g.input.h == 0 || g.input.w == 0 {
        errors.push(ModelError::Shape { layer: INPUT_ID.into(), msg: "input dimensions must be positive".into() });
    }
    if !(g.input.scale > 0.0 && g.input.scale.is_finite()) {
        errors.push(ModelError::Schema { layer: INPUT_ID.into(), msg: format!("invalid input scale {}", g.input.scale) });
    }
    if g.classes == 0 {
        errors.push(graph_err("class count must be positive"));
    }
    let mut seen = BTreeSet::new();
    for l in &g.layers {
        if l.id == INPUT_ID || l.id.is_empty() {
            errors.push(ModelError::Schema { layer: l.id.clone(), msg: "reserved or empty layer id".into() });
        }
        if !seen.insert(l.id.as_str()) {
            errors.push(ModelError::Schema { layer: l.id.clone(), msg: "duplicate layer id".into() });
        }
    }
    for l in &g.layers {
        for src in &l.inputs {
            if src != INPUT_ID && !seen.contains(src.as_str()) {
                errors.push(ModelError::Schema { layer: l.id.clone(), msg: format!("unresolved input `{src}`") });
            }
        }
    }
    if !g.layers.is_empty() && g.layer(&g.output).is_none() {
        errors.push(graph_err(&format!("output layer `{}` does not exist", g.output)));
    }
    if errors.is_empty() {
        match propagate_shapes(g, &mut errors) {
            Ok(shapes) => {
                if let Some((s, _)) = shapes.get(&g.output) {
                    if *s != Shape::new(g.classes, 1, 1) {
                        errors.push(ModelError::Shape {
                            layer: g.output.clone(),
                            msg: format!("output is {s}, expected {}x1x1 logits", g.classes),
                        });
                    }
                }
            }
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

// ---------------------------------------------------------------------------
// Manifest format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    input: InputDoc,
    classes: usize,
    output: String,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputDoc {
    c: usize,
    h: usize,
    w: usize,
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    id: String,
    kind: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cout: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<WeightsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<BiasDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    offset: u64,
    len: u64,
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasDoc {
    offset: u64,
    len: u64,
}

fn blob_slice<'a>(blob: &'a [u8], layer: &str, offset: u64, len: u64) -> Result<&'a [u8]> {
    let end = offset.checked_add(len).ok_or_else(|| ModelError::MissingBlob(layer.into()))?;
    if end > blob.len() as u64 {
        return Err(ModelError::MissingBlob(layer.into()));
    }
    Ok(&blob[offset as usize..end as usize])
}

/// Parse a manifest and resolve its weights from `blob`, then validate.
pub fn parse_model(manifest: &str, blob: &[u8]) -> Result<ModelGraph> {
    let doc: ManifestDoc =
        serde_json::from_str(manifest).map_err(|e| ModelError::Schema { layer: "<manifest>".into(), msg: e.to_string() })?;
    let input = InputSpec { c: doc.input.c, h: doc.input.h, w: doc.input.w, scale: doc.input.scale };

    // First pass: kinds, params, and topology with placeholder kernels so
    // Cin can be inferred from the producing layer.
    struct Pending {
        id: String,
        inputs: Vec<String>,
        kind: LayerKind,
        doc: LayerDoc,
    }
    let mut pending = Vec::with_capacity(doc.layers.len());
    for l in doc.layers {
        let kind = LayerKind::parse(&l.kind).ok_or_else(|| ModelError::UnsupportedLayer { layer: l.id.clone(), kind: l.kind.clone() })?;
        pending.push(Pending { id: l.id.clone(), inputs: l.inputs.clone(), kind, doc: l });
    }
    let skeleton = ModelGraph {
        input,
        classes: doc.classes,
        output: doc.output.clone(),
        layers: pending.iter().map(|p| LayerSpec { id: p.id.clone(), inputs: p.inputs.clone(), op: LayerOp::Relu }).collect(),
    };
    let order: Vec<String> = skeleton.topo_order()?.into_iter().map(|l| l.id.clone()).collect();

    let mut channels: HashMap<String, usize> = HashMap::new();
    channels.insert(INPUT_ID.into(), input.c);
    let mut built: HashMap<String, LayerSpec> = HashMap::new();
    for id in &order {
        let p = pending.iter().find(|p| &p.id == id).unwrap();
        let schema = |msg: &str| ModelError::Schema { layer: p.id.clone(), msg: msg.into() };
        let cin = match p.inputs.first() {
            Some(src) => *channels.get(src).ok_or_else(|| schema(&format!("unresolved input `{src}`")))?,
            None => return Err(schema("layer has no inputs")),
        };
        let op = match p.kind {
            LayerKind::Conv | LayerKind::Fc => {
                let d = &p.doc;
                let k = d.k.unwrap_or(1);
                let stride = d.stride.unwrap_or(1);
                let pad = d.pad.unwrap_or(0);
                let cout = d.cout.ok_or_else(|| schema("missing `cout`"))?;
                let m = d.m.ok_or_else(|| schema("missing `m`"))?;
                if p.kind == LayerKind::Conv && d.k.is_none() {
                    return Err(schema("missing `k`"));
                }
                if cout == 0 || k == 0 || stride == 0 {
                    return Err(schema("`cout`, `k` and `stride` must be positive"));
                }
                let wd = d.weights.as_ref().ok_or_else(|| schema("missing `weights`"))?;
                let bd = d.bias.as_ref().ok_or_else(|| schema("missing `bias`"))?;
                let expect = (cout * cin * k * k) as u64;
                if wd.len != expect {
                    return Err(ModelError::Shape {
                        layer: p.id.clone(),
                        msg: format!("weights.len={} but Cout*Cin*K*K = {cout}*{cin}*{k}*{k} = {expect}", wd.len),
                    });
                }
                if bd.len != cout as u64 {
                    return Err(ModelError::Shape { layer: p.id.clone(), msg: format!("bias.len={} but Cout={cout}", bd.len) });
                }
                let wbytes = blob_slice(blob, &p.id, wd.offset, wd.len)?;
                let bbytes = blob_slice(blob, &p.id, bd.offset, bd.len * 4)?;
                let weights = Kernel::new(cout, cin, k, wbytes.iter().map(|&b| b as i8).collect(), wd.scale)
                    .map_err(|e| ModelError::from_tensor(&p.id, e))?;
                let bias = bbytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                let conv = ConvLayer {
                    k,
                    stride,
                    pad,
                    m,
                    weights,
                    bias,
                    weight_ref: BlobRef { offset: wd.offset, len: wd.len },
                    bias_ref: BlobRef { offset: bd.offset, len: bd.len },
                };
                channels.insert(p.id.clone(), cout);
                if p.kind == LayerKind::Conv {
                    LayerOp::Conv(conv)
                } else {
                    LayerOp::Fc(conv)
                }
            }
            LayerKind::MaxPool => {
                let k = p.doc.k.ok_or_else(|| schema("missing `k`"))?;
                channels.insert(p.id.clone(), cin);
                LayerOp::MaxPool { k, stride: p.doc.stride.unwrap_or(k), pad: p.doc.pad.unwrap_or(0) }
            }
            LayerKind::Relu => {
                channels.insert(p.id.clone(), cin);
                LayerOp::Relu
            }
            LayerKind::GlobalAvgPool => {
                channels.insert(p.id.clone(), cin);
                LayerOp::GlobalAvgPool
            }
            LayerKind::Add => {
                channels.insert(p.id.clone(), cin);
                LayerOp::Add
            }
        };
        built.insert(p.id.clone(), LayerSpec { id: p.id.clone(), inputs: p.inputs.clone(), op });
    }
    // Keep manifest order in memory so a save/load round trip is stable.
    let layers = pending.iter().map(|p| built.remove(&p.id).unwrap()).collect();
    let graph = ModelGraph { input, classes: doc.classes, output: doc.output, layers };
    validate_graph(&graph).map_err(|mut errs| errs.swap_remove(0))?;
    Ok(graph)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ModelError::Io { path: path.display().to_string(), msg: e.to_string() })
}

/// Load and validate a model from a manifest and its weights blob.
pub fn load_model(manifest: &Path, weights: &Path) -> Result<ModelGraph> {
    let text = read_file(manifest)?;
    let text = String::from_utf8(text)
        .map_err(|e| ModelError::Io { path: manifest.display().to_string(), msg: format!("manifest is not UTF-8: {e}") })?;
    let blob = read_file(weights)?;
    parse_model(&text, &blob)
}

/// Serialize a graph to `(manifest, blob)`. Each kernel and bias is written at
/// the byte range recorded in its blob reference.
pub fn encode_model(g: &ModelGraph) -> (String, Vec<u8>) {
    let mut blob = vec![];
    let mut put = |offset: u64, bytes: &[u8]| {
        let end = offset as usize + bytes.len();
        if blob.len() < end {
            blob.resize(end, 0);
        }
        blob[offset as usize..end].copy_from_slice(bytes);
    };
    let mut layers = vec![];
    for l in &g.layers {
        let mut doc = LayerDoc {
            id: l.id.clone(),
            kind: l.op.kind().as_str().into(),
            inputs: l.inputs.clone(),
            k: None,
            stride: None,
            pad: None,
            cout: None,
            m: None,
            weights: None,
            bias: None,
        };
        match &l.op {
            LayerOp::Conv(c) | LayerOp::Fc(c) => {
                let wbytes: Vec<u8> = c.weights.data.iter().map(|&b| b as u8).collect();
                put(c.weight_ref.offset, &wbytes);
                let bbytes: Vec<u8> = c.bias.iter().flat_map(|b| b.to_le_bytes()).collect();
                put(c.bias_ref.offset, &bbytes);
                doc.k = Some(c.k);
                doc.stride = Some(c.stride);
                doc.pad = Some(c.pad);
                doc.cout = Some(c.cout());
                doc.m = Some(c.m);
                doc.weights = Some(WeightsDoc { offset: c.weight_ref.offset, len: c.weight_ref.len, scale: c.weights.scale });
                doc.bias = Some(BiasDoc { offset: c.bias_ref.offset, len: c.bias_ref.len });
            }
            LayerOp::MaxPool { k, stride, pad } => {
                doc.k = Some(*k);
                doc.stride = Some(*stride);
                doc.pad = Some(*pad);
            }
            LayerOp::Relu | LayerOp::GlobalAvgPool | LayerOp::Add => {}
        }
        layers.push(doc);
    }
    let doc = ManifestDoc {
        input: InputDoc { c: g.input.c, h: g.input.h, w: g.input.w, scale: g.input.scale },
        classes: g.classes,
        output: g.output.clone(),
        layers,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    (text, blob)
}

pub fn save_model(g: &ModelGraph, manifest: &Path, weights: &Path) -> Result<()> {
    let (text, blob) = encode_model(g);
    let io = |p: &Path, e: std::io::Error| ModelError::Io { path: p.display().to_string(), msg: e.to_string() };
    std::fs::write(manifest, text).map_err(|e| io(manifest, e))?;
    std::fs::write(weights, blob).map_err(|e| io(weights, e))
}

/// Incremental graph construction with automatic blob placement.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input: InputSpec,
    classes: usize,
    layers: Vec<LayerSpec>,
    cursor: u64,
}

impl ModelBuilder {
    pub fn new(input: InputSpec, classes: usize) -> Self {
        ModelBuilder { input, classes, layers: vec![], cursor: 0 }
    }

    fn place(&mut self, bytes: u64) -> u64 {
        let at = self.cursor;
        self.cursor = (at + bytes).next_multiple_of(4);
        at
    }

    fn conv_layer(&mut self, k: usize, stride: usize, pad: usize, weights: Kernel, bias: Vec<i32>, m: Scale) -> ConvLayer {
        let wlen = weights.data.len() as u64;
        let woff = self.place(wlen);
        let blen = bias.len() as u64;
        let boff = self.place(blen * 4);
        ConvLayer {
            k,
            stride,
            pad,
            m,
            weights,
            bias,
            weight_ref: BlobRef { offset: woff, len: wlen },
            bias_ref: BlobRef { offset: boff, len: blen },
        }
    }

    fn push(&mut self, id: &str, inputs: &[&str], op: LayerOp) -> &mut Self {
        self.layers.push(LayerSpec { id: id.into(), inputs: inputs.iter().map(|s| s.to_string()).collect(), op });
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, id: &str, input: &str, stride: usize, pad: usize, weights: Kernel, bias: Vec<i32>, m: Scale) -> &mut Self {
        let conv = self.conv_layer(weights.k, stride, pad, weights, bias, m);
        self.push(id, &[input], LayerOp::Conv(conv))
    }

    pub fn fc(&mut self, id: &str, input: &str, weights: Kernel, bias: Vec<i32>, m: Scale) -> &mut Self {
        let conv = self.conv_layer(1, 1, 0, weights, bias, m);
        self.push(id, &[input], LayerOp::Fc(conv))
    }

    pub fn relu(&mut self, id: &str, input: &str) -> &mut Self {
        self.push(id, &[input], LayerOp::Relu)
    }

    pub fn maxpool(&mut self, id: &str, input: &str, k: usize, stride: usize) -> &mut Self {
        self.push(id, &[input], LayerOp::MaxPool { k, stride, pad: 0 })
    }

    pub fn gavgpool(&mut self, id: &str, input: &str) -> &mut Self {
        self.push(id, &[input], LayerOp::GlobalAvgPool)
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> &mut Self {
        self.push(id, &[a, b], LayerOp::Add)
    }

    /// Validated graph with `output` as the logits layer.
    pub fn build(&self, output: &str) -> std::result::Result<ModelGraph, Vec<ModelError>> {
        let g = ModelGraph { input: self.input, classes: self.classes, output: output.into(), layers: self.layers.clone() };
        validate_graph(&g)?;
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Dataset container

pub const DATASET_MAGIC: &[u8; 4] = b"QDS1";

/// Labelled int8 samples sharing one shape and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub scale: Scale,
    samples: Vec<i8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(shape: Shape, scale: Scale, samples: Vec<i8>, labels: Vec<u16>) -> Result<Self> {
        if shape.c == 0
            || shape.c > u8::MAX as usize
            || shape.h == 0
            || shape.h > u16::MAX as usize
            || shape.w == 0
            || shape.w > u16::MAX as usize
        {
            return Err(ModelError::Dataset(format!("shape {shape} not representable")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::Dataset(format!("invalid scale {scale}")));
        }
        if samples.len() != labels.len() * shape.len() {
            return Err(ModelError::Dataset(format!("{} sample bytes for {} labels of shape {shape}", samples.len(), labels.len())));
        }
        Ok(Dataset { shape, scale, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> QTensor {
        let n = self.shape.len();
        QTensor::new(self.shape, self.samples[i * n..(i + 1) * n].to_vec(), self.scale).expect("dataset invariants hold")
    }

    /// Confirm the dataset matches a model's input and label space.
    pub fn check_against(&self, g: &ModelGraph) -> Result<()> {
        if self.shape != g.input.shape() || !scales_match(self.scale, g.input.scale) {
            return Err(ModelError::Dataset(format!(
                "samples are {} @ {}, model expects {} @ {}",
                self.shape,
                self.scale,
                g.input.shape(),
                g.input.scale
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= g.classes) {
            return Err(ModelError::Dataset(format!("label {l} of sample {i} outside 0..{}", g.classes)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.samples.len() + 2 * self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.push(self.shape.c as u8);
        out.extend_from_slice(&(self.shape.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.shape.w as u16).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend(self.samples.iter().map(|&b| b as u8));
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 1 + 2 + 2 + 8;
        let bad = |msg: &str| ModelError::Dataset(msg.into());
        if bytes.len() < HEADER {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(bad("bad magic, expected QDS1"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let c = bytes[8] as usize;
        let h = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
        let w = u16::from_le_bytes(bytes[11..13].try_into().unwrap()) as usize;
        let scale = f64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let sample_bytes = n * c * h * w;
        let expect = HEADER + sample_bytes + 2 * n;
        if bytes.len() != expect {
            return Err(ModelError::Dataset(format!("file is {} bytes, header implies {expect}", bytes.len())));
        }
        let samples = bytes[HEADER..HEADER + sample_bytes].iter().map(|&b| b as i8).collect();
        let labels = bytes[HEADER + sample_bytes..].chunks_exact(2).map(|p| u16::from_le_bytes([p[0], p[1]])).collect();
        Dataset::new(Shape::new(c, h, w), scale, samples, labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::decode(&read_file(path)?).map_err(|e| match e {
            ModelError::Dataset(msg) => ModelError::Dataset(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| ModelError::Io { path: path.display().to_string(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn relu_chain(ids: &[(&str, &[&str])]) -> ModelGraph {
        ModelGraph {
            input: InputSpec { c: 1, h: 1, w: 1, scale: 1.0 },
            classes: 1,
            output: ids.last().unwrap().0.into(),
            layers: ids
                .iter()
                .map(|(id, ins)| LayerSpec { id: id.to_string(), inputs: ins.iter().map(|s| s.to_string()).collect(), op: LayerOp::Relu })
                .collect(),
        }
    }

    fn ids(order: Vec<&LayerSpec>) -> Vec<&str> {
        order.into_iter().map(|l| l.id.as_str()).collect()
    }

    #[test]
    fn topo_order_examples() {
        let chain = relu_chain(&[("c", &["b"]), ("a", &["input"]), ("b", &["a"])]);
        assert_eq!(ids(chain.topo_order().unwrap()), ["a", "b", "c"]);

        let mut diamond = relu_chain(&[("d", &["c", "b"]), ("c", &["a"]), ("b", &["a"]), ("a", &["input"])]);
        diamond.layers[0].op = LayerOp::Add;
        assert_eq!(ids(diamond.topo_order().unwrap()), ["a", "b", "c", "d"]);

        let single = relu_chain(&[("only", &["input"])]);
        assert_eq!(ids(single.topo_order().unwrap()), ["only"]);
    }

    #[test]
    fn topo_order_detects_cycles() {
        let g = relu_chain(&[("a", &["b"]), ("b", &["a"])]);
        assert_eq!(g.topo_order().unwrap_err(), ModelError::Cycle("a".into()));
    }

    #[test]
    fn fixture_round_trips_through_manifest() {
        let g = fixtures::conv_relu_fc();
        let (text, blob) = encode_model(&g);
        let back = parse_model(&text, &blob).unwrap();
        assert_eq!(back, g);
        assert_eq!(ids(back.topo_order().unwrap()), ["conv1", "relu1", "fc1"]);
        let (text2, blob2) = encode_model(&back);
        assert_eq!((text, blob), (text2, blob2));
    }

    #[test]
    fn desk_model_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = fixtures::desk_model();
        let (m, w) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&g, &m, &w).unwrap();
        assert_eq!(load_model(&m, &w).unwrap(), g);
    }

    #[test]
    fn missing_blob_is_reported_with_layer_id() {
        let g = fixtures::conv_relu_fc();
        let (text, blob) = encode_model(&g);
        let truncated = &blob[..2];
        assert_eq!(parse_model(&text, truncated).unwrap_err(), ModelError::MissingBlob("conv1".into()));
    }

    #[test]
    fn cyclic_manifest_is_rejected() {
        let text = r#"{"input":{"c":1,"h":1,"w":1,"scale":1.0},"classes":1,"output":"a",
            "layers":[{"id":"a","kind":"relu","inputs":["b"]},{"id":"b","kind":"relu","inputs":["a"]}]}"#;
        assert!(matches!(parse_model(text, &[]), Err(ModelError::Cycle(_))));
    }

    #[test]
    fn unknown_kind_is_unsupported() {
        let text = r#"{"input":{"c":1,"h":1,"w":1,"scale":1.0},"classes":1,"output":"a",
            "layers":[{"id":"a","kind":"softmax","inputs":["input"]}]}"#;
        assert_eq!(parse_model(text, &[]).unwrap_err(), ModelError::UnsupportedLayer { layer: "a".into(), kind: "softmax".into() });
    }

    #[test]
    fn malformed_json_is_schema_error() {
        assert!(matches!(parse_model("{", &[]), Err(ModelError::Schema { .. })));
        let missing_m = r#"{"input":{"c":1,"h":1,"w":1,"scale":1.0},"classes":1,"output":"a",
            "layers":[{"id":"a","kind":"fc","inputs":["input"],"cout":1,
            "weights":{"offset":0,"len":1,"scale":1.0},"bias":{"offset":4,"len":1}}]}"#;
        assert_eq!(parse_model(missing_m, &[0; 8]).unwrap_err().subject(), "a");
    }

    #[test]
    fn validate_examples() {
        assert_eq!(validate_graph(&fixtures::conv_relu_fc()), Ok(()));
        assert_eq!(validate_graph(&fixtures::desk_model()), Ok(()));

        // add with mismatched scales
        let input = InputSpec { c: 2, h: 2, w: 2, scale: 0.5 };
        let mut b = ModelBuilder::new(input, 2);
        b.conv("conv_a", "input", 1, 0, Kernel::new(2, 2, 1, vec![1; 4], 0.5).unwrap(), vec![0; 2], 0.25)
            .add("res1", "input", "conv_a")
            .gavgpool("gap", "res1");
        assert_eq!(b.build("gap").unwrap_err(), vec![ModelError::ScaleMismatch("res1".into())]);

        // conv declared Cin=3 fed by an 8-channel tensor
        let input = InputSpec { c: 8, h: 1, w: 1, scale: 1.0 };
        let mut b = ModelBuilder::new(input, 2);
        b.conv("conv1", "input", 1, 0, Kernel::new(8, 8, 1, vec![1; 64], 1.0).unwrap(), vec![0; 8], 1.0).conv(
            "conv2",
            "conv1",
            1,
            0,
            Kernel::new(2, 3, 1, vec![1; 6], 1.0).unwrap(),
            vec![0; 2],
            1.0,
        );
        let errs = b.build("conv2").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(matches!(&errs[0], ModelError::Shape { layer, .. } if layer == "conv2"));
    }

    #[test]
    fn validate_collects_every_violation() {
        let mut g = relu_chain(&[("a", &["input"]), ("a", &["ghost"])]);
        g.output = "nope".into();
        let errs = validate_graph(&g).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
        let empty = ModelGraph { layers: vec![], ..relu_chain(&[("a", &["input"])]) };
        assert!(validate_graph(&empty).is_err());
    }

    #[test]
    fn dataset_layout_is_bit_exact() {
        let ds = Dataset::new(Shape::new(1, 1, 2), 0.5, vec![-1, 2], vec![3]).unwrap();
        let bytes = ds.encode();
        let mut want = b"QDS1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(1);
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(&0.5f64.to_le_bytes());
        want.extend_from_slice(&[0xFF, 0x02, 0x03, 0x00]);
        assert_eq!(bytes, want);
        assert_eq!(Dataset::decode(&bytes).unwrap(), ds);
        assert!(Dataset::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Dataset::decode(b"QDS2").is_err());
    }

    #[test]
    fn dataset_labels_checked_against_classes() {
        let g = fixtures::conv_relu_fc();
        let shape = g.input.shape();
        let ds = Dataset::new(shape, g.input.scale, vec![0; shape.len()], vec![g.classes as u16]).unwrap();
        assert!(matches!(ds.check_against(&g), Err(ModelError::Dataset(_))));
    }

    proptest! {
        #[test]
        fn topo_order_respects_random_dag_edges(n in 1usize..12, edges in proptest::collection::vec((0usize..12, 0usize..12), 0..30), seed in any::<u64>()) {
            // Edges go from lower to higher index under a shuffled naming so
            // the graph is acyclic but ids are not in topological order.
            let name = |i: usize| format!("l{:02}", (i as u64 ^ seed) % 97 * 100 + i as u64);
            let mut layers: Vec<LayerSpec> = (0..n)
                .map(|i| LayerSpec { id: name(i), inputs: vec![INPUT_ID.into()], op: LayerOp::Relu })
                .collect();
            for (a, b) in edges {
                let (a, b) = (a % n, b % n);
                if a < b && !layers[b].inputs.contains(&name(a)) {
                    layers[b].inputs.push(name(a));
                }
            }
            let g = ModelGraph { input: InputSpec { c: 1, h: 1, w: 1, scale: 1.0 }, classes: 1, output: name(0), layers };
            let order = ids(g.topo_order().unwrap());
            let mut sorted = order.clone();
            sorted.sort();
            let mut all: Vec<String> = (0..n).map(name).collect();
            all.sort();
            prop_assert_eq!(sorted, all.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (*s, i)).collect();
            for l in &g.layers {
                for src in l.inputs.iter().filter(|s| *s != INPUT_ID) {
                    prop_assert!(pos[src.as_str()] < pos[l.id.as_str()]);
                }
            }
        }
    }
}
