//! Feed-forward classifier stack partitioned at a split layer, with one or
//! more output heads. The client owns layers up to the split index, the
//! server owns the rest plus the heads; composing the two halves is
//! bit-identical to running the unsplit stack.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng, Tape, Var};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NPKM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Marker for the image-to-vector boundary; identity on the flat carrier.
    Flatten { dim: usize },
    Dense { input: usize, output: usize },
    Relu { dim: usize },
    /// Locally connected layer: fixed patch extraction followed by a
    /// block-masked dense map, one weight block per patch position. No
    /// weight sharing across positions.
    PatchDense {
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        filters: usize,
        /// Channel-planar pixel layout (otherwise interleaved).
        planar: bool,
    },
}

impl LayerKind {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerKind::Flatten { dim } | LayerKind::Relu { dim } => *dim,
            LayerKind::Dense { input, .. } => *input,
            LayerKind::PatchDense { height, width, channels, .. } => height * width * channels,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerKind::Flatten { dim } | LayerKind::Relu { dim } => *dim,
            LayerKind::Dense { output, .. } => *output,
            LayerKind::PatchDense { .. } => {
                let (p, _, f) = self.patch_geometry();
                p * f
            }
        }
    }

    /// (positions, patch size, filters) for PatchDense; zeros otherwise.
    pub fn patch_geometry(&self) -> (usize, usize, usize) {
        match self {
            LayerKind::PatchDense { height, width, channels, kernel, stride, filters, .. } => {
                let oh = (height - kernel) / stride + 1;
                let ow = (width - kernel) / stride + 1;
                (oh * ow, kernel * kernel * channels, *filters)
            }
            _ => (0, 0, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub seed: u64,
    /// Trainable matrices: Dense and PatchDense carry [weight, bias].
    pub params: Vec<Matrix>,
    /// Fixed matrices: PatchDense carries [extraction, block mask].
    consts: Vec<Matrix>,
}

impl Layer {
    pub fn new(kind: LayerKind, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let (params, consts) = match &kind {
            LayerKind::Flatten { .. } | LayerKind::Relu { .. } => (vec![], vec![]),
            LayerKind::Dense { input, output } => {
                let std = (2.0 / *input as f64).sqrt();
                let w = rng.normal_matrix(*input, *output, 0.0, std);
                let b = Matrix::zeros(1, *output);
                (vec![w, b], vec![])
            }
            LayerKind::PatchDense { height, width, channels, kernel, stride, planar, .. } => {
                if *kernel > *height || *kernel > *width || *stride == 0 {
                    return Err(Error::Config(format!(
                        "patch geometry {}x{} kernel {} stride {} is inconsistent",
                        height, width, kernel, stride
                    )));
                }
                if (*height - *kernel) % *stride != 0 || (*width - *kernel) % *stride != 0 {
                    return Err(Error::Config(
                        "patch kernel/stride must tile the image exactly".into(),
                    ));
                }
                let (positions, patch, filters) = kind.patch_geometry();
                let in_dim = height * width * channels;
                let oh = (height - kernel) / stride + 1;
                let ow = (width - kernel) / stride + 1;
                let mut extraction = Matrix::zeros(in_dim, positions * patch);
                for py in 0..oh {
                    for px in 0..ow {
                        let p = py * ow + px;
                        let mut t = 0;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                for ch in 0..*channels {
                                    let y = py * stride + ky;
                                    let x = px * stride + kx;
                                    let pixel = if *planar {
                                        ch * height * width + y * width + x
                                    } else {
                                        (y * width + x) * channels + ch
                                    };
                                    extraction.set(pixel, p * patch + t, 1.0);
                                    t += 1;
                                }
                            }
                        }
                    }
                }
                let mut mask = Matrix::zeros(positions * patch, positions * filters);
                for p in 0..positions {
                    for t in 0..patch {
                        for f in 0..filters {
                            mask.set(p * patch + t, p * filters + f, 1.0);
                        }
                    }
                }
                let std = (2.0 / patch as f64).sqrt();
                let w = rng.normal_matrix(positions * patch, positions * filters, 0.0, std);
                let b = Matrix::zeros(1, positions * filters);
                (vec![w.hadamard(&mask), b], vec![extraction, mask])
            }
        };
        Ok(Layer { kind, seed, params, consts })
    }

    /// Record this layer on the tape; returns (output, trainable vars).
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        if tape.value(x).cols() != self.kind.input_dim() {
            return Err(Error::Dim(format!(
                "layer expects {} input columns, got {}",
                self.kind.input_dim(),
                tape.value(x).cols()
            )));
        }
        match &self.kind {
            LayerKind::Flatten { .. } => Ok((x, vec![])),
            LayerKind::Relu { .. } => Ok((tape.relu(x), vec![])),
            LayerKind::Dense { .. } => {
                let w = tape.leaf(self.params[0].clone());
                let b = tape.leaf(self.params[1].clone());
                let h = tape.matmul(x, w)?;
                let out = tape.broadcast_add_row(h, b)?;
                Ok((out, vec![w, b]))
            }
            LayerKind::PatchDense { .. } => {
                let e = tape.leaf(self.consts[0].clone());
                let mask = tape.leaf(self.consts[1].clone());
                let w = tape.leaf(self.params[0].clone());
                let b = tape.leaf(self.params[1].clone());
                let patches = tape.matmul(x, e)?;
                let wm = tape.hadamard(w, mask)?;
                let h = tape.matmul(patches, wm)?;
                let out = tape.broadcast_add_row(h, b)?;
                Ok((out, vec![w, b]))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub name: String,
    pub classes: usize,
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Head {
    fn new(name: &str, shared_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let std = (2.0 / shared_dim as f64).sqrt();
        Head {
            name: name.to_string(),
            classes,
            weight: rng.normal_matrix(shared_dim, classes, 0.0, std),
            bias: Matrix::zeros(1, classes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitModel {
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub heads: Vec<Head>,
}

impl SplitModel {
    /// Build from layer kinds and head specs; per-layer seeds derive from
    /// `init_seed` in order, so identical inputs give identical parameters.
    pub fn build(
        kinds: Vec<LayerKind>,
        split_index: usize,
        heads: &[(String, usize)],
        init_seed: u64,
    ) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if split_index < 1 || split_index >= kinds.len() {
            return Err(Error::Config(format!(
                "split_index {} must satisfy 1 <= split < {}",
                split_index,
                kinds.len()
            )));
        }
        if heads.is_empty() {
            return Err(Error::Config("model needs at least one head".into()));
        }
        for pair in kinds.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        let mut seed_state = init_seed;
        let mut next_seed = || {
            seed_state = seed_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            seed_state
        };
        let layers = kinds
            .into_iter()
            .map(|k| Layer::new(k, next_seed()))
            .collect::<Result<Vec<_>>>()?;
        let shared = layers.last().unwrap().kind.output_dim();
        let heads = heads
            .iter()
            .map(|(name, classes)| Head::new(name, shared, *classes, next_seed()))
            .collect();
        Ok(SplitModel { layers, split_index, heads })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].kind.input_dim()
    }

    pub fn split_dim(&self) -> usize {
        self.layers[self.split_index - 1].kind.output_dim()
    }

    pub fn shared_dim(&self) -> usize {
        self.layers.last().unwrap().kind.output_dim()
    }

    /// Client half: layers up to the split index. Returns the protected
    /// activations and the client's trainable vars.
    pub fn forward_client(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut params = Vec::new();
        for layer in &self.layers[..self.split_index] {
            let (out, vars) = layer.forward(tape, h)?;
            h = out;
            params.extend(vars);
        }
        Ok((h, params))
    }

    /// Server half: remaining layers plus every head. Returns per-head
    /// logits and the server's trainable vars.
    pub fn forward_server(&self, tape: &mut Tape, z: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut h = z;
        let mut params = Vec::new();
        for layer in &self.layers[self.split_index..] {
            let (out, vars) = layer.forward(tape, h)?;
            h = out;
            params.extend(vars);
        }
        let mut logits = Vec::new();
        for head in &self.heads {
            let w = tape.leaf(head.weight.clone());
            let b = tape.leaf(head.bias.clone());
            let hw = tape.matmul(h, w)?;
            logits.push(tape.broadcast_add_row(hw, b)?);
            params.push(w);
            params.push(b);
        }
        Ok((logits, params))
    }

    /// Unsplit forward: exactly the client half composed with the server half.
    pub fn forward_full(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>, Vec<Var>, Vec<Var>)> {
        let (z, client_params) = self.forward_client(tape, x)?;
        let (logits, server_params) = self.forward_server(tape, z)?;
        Ok((z, logits, client_params, server_params))
    }

    pub fn forward_client_plain(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, _) = self.forward_client(&mut tape, xl)?;
        Ok(tape.value(z).clone())
    }

    /// Forward through the first `count` layers only.
    pub fn forward_layers_plain(&self, x: &Matrix, count: usize) -> Result<Matrix> {
        if count > self.layers.len() {
            return Err(Error::Config(format!(
                "layer index {} exceeds stack depth {}",
                count,
                self.layers.len()
            )));
        }
        let mut tape = Tape::new();
        let mut h = tape.leaf(x.clone());
        for layer in &self.layers[..count] {
            let (out, _) = layer.forward(&mut tape, h)?;
            h = out;
        }
        Ok(tape.value(h).clone())
    }

    pub fn forward_full_plain(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (_, logits, _, _) = self.forward_full(&mut tape, xl)?;
        Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Mutable references to the client half's parameters, layer order.
    pub fn client_params_mut(&mut self) -> Vec<&mut Matrix> {
        let split = self.split_index;
        self.layers[..split]
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    /// Mutable references to the server half's parameters plus heads.
    pub fn server_params_mut(&mut self) -> Vec<&mut Matrix> {
        let split = self.split_index;
        let mut out: Vec<&mut Matrix> = self.layers[split..]
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect();
        for head in &mut self.heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect();
        for head in &mut self.heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    /// Split the stack into (client model, server model). The client model
    /// keeps no heads; the server model keeps no client layers.
    pub fn split_halves(&self) -> (SplitModel, SplitModel) {
        let client = SplitModel {
            layers: self.layers[..self.split_index].to_vec(),
            split_index: self.split_index,
            heads: Vec::new(),
        };
        let server = SplitModel {
            layers: self.layers[self.split_index..].to_vec(),
            split_index: 0,
            heads: self.heads.clone(),
        };
        (client, server)
    }

    /// Reassemble a full model from trained halves.
    pub fn reassemble(client: &SplitModel, server: &SplitModel) -> SplitModel {
        let mut layers = client.layers.clone();
        layers.extend(server.layers.iter().cloned());
        SplitModel {
            layers,
            split_index: client.split_index,
            heads: server.heads.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.split_index as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            write_layer(&mut buf, layer);
        }
        buf.extend_from_slice(&(self.heads.len() as u32).to_le_bytes());
        for head in &self.heads {
            let name = head.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(head.classes as u32).to_le_bytes());
            write_matrix(&mut buf, &head.weight);
            write_matrix(&mut buf, &head.bias);
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let split_index = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(read_layer(&mut r)?);
        }
        let n_heads = r.u32()? as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("head name is not utf-8".into()))?;
            let classes = r.u32()? as usize;
            let weight = read_matrix(&mut r)?;
            let bias = read_matrix(&mut r)?;
            heads.push(Head { name, classes, weight, bias });
        }
        Ok(SplitModel { layers, split_index, heads })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(r: &mut Cursor) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_layer(buf: &mut Vec<u8>, layer: &Layer) {
    match &layer.kind {
        LayerKind::Flatten { dim } => {
            buf.push(0);
            buf.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        LayerKind::Dense { input, output } => {
            buf.push(1);
            buf.extend_from_slice(&(*input as u32).to_le_bytes());
            buf.extend_from_slice(&(*output as u32).to_le_bytes());
        }
        LayerKind::Relu { dim } => {
            buf.push(2);
            buf.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        LayerKind::PatchDense { height, width, channels, kernel, stride, filters, planar } => {
            buf.push(3);
            for v in [height, width, channels, kernel, stride, filters] {
                buf.extend_from_slice(&(*v as u32).to_le_bytes());
            }
            buf.push(*planar as u8);
        }
    }
    buf.extend_from_slice(&layer.seed.to_le_bytes());
    buf.push(layer.params.len() as u8);
    for p in &layer.params {
        write_matrix(buf, p);
    }
}

fn read_layer(r: &mut Cursor) -> Result<Layer> {
    let kind = match r.take(1)?[0] {
        0 => LayerKind::Flatten { dim: r.u32()? as usize },
        1 => LayerKind::Dense { input: r.u32()? as usize, output: r.u32()? as usize },
        2 => LayerKind::Relu { dim: r.u32()? as usize },
        3 => {
            let height = r.u32()? as usize;
            let width = r.u32()? as usize;
            let channels = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            let stride = r.u32()? as usize;
            let filters = r.u32()? as usize;
            let planar = r.take(1)?[0] != 0;
            LayerKind::PatchDense { height, width, channels, kernel, stride, filters, planar }
        }
        k => return Err(Error::Format(format!("unknown layer kind {}", k))),
    };
    let seed = r.u64()?;
    let n_params = r.take(1)?[0] as usize;
    // Rebuild consts from the kind, then overwrite params with stored values.
    let mut layer = Layer::new(kind, seed)?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_matrix(r)?);
    }
    if params.len() != layer.params.len() {
        return Err(Error::Format("layer parameter count mismatch".into()));
    }
    layer.params = params;
    Ok(layer)
}

/// Mean softmax cross-entropy; rows of `y_true` must be one-hot.
pub fn cce(tape: &mut Tape, logits: Var, y_true: &Matrix) -> Result<Var> {
    validate_one_hot(y_true)?;
    tape.softmax_cce(logits, y_true)
}

pub fn validate_one_hot(y: &Matrix) -> Result<()> {
    for i in 0..y.rows() {
        let mut ones = 0;
        for &v in y.row(i) {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::Label(format!("row {} has entry {} outside {{0,1}}", i, v)));
            }
        }
        if ones != 1 {
            return Err(Error::Label(format!("row {} has {} ones, expected exactly 1", i, ones)));
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax matches the one-hot target.
pub fn accuracy(logits: &Matrix, y_true: &Matrix) -> f64 {
    let n = logits.rows();
    let mut correct = 0;
    for i in 0..n {
        let pred = argmax(logits.row(i));
        let truth = argmax(y_true.row(i));
        if pred == truth {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Adam with bias correction; the learning rate is multiplied by `decay`
/// at each epoch boundary.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64, decay: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(lr: f64, decay: f64, params: &[&mut Matrix]) -> Self {
        let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, decay, &shapes)
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if grads[i].shape() != params[i].shape() {
                return Err(Error::Dim(format!(
                    "gradient {:?} does not match parameter {:?}",
                    grads[i].shape(),
                    params[i].shape()
                )));
            }
            let g = &grads[i];
            self.m[i] = self.m[i].scale(self.beta1).add(&g.scale(1.0 - self.beta1));
            self.v[i] = self.v[i]
                .scale(self.beta2)
                .add(&g.hadamard(g).scale(1.0 - self.beta2));
            let p = &mut *params[i];
            for k in 0..p.len() {
                let mhat = self.m[i].data()[k] / bc1;
                let vhat = self.v[i].data()[k] / bc2;
                p.data_mut()[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }
}

/// Default desk-scale stack: flatten, dense(256), relu, dense(64),
/// relu (split here), dense(32), relu. For image inputs the first dense
/// map is a locally connected patch layer of the same width.
pub fn default_layer_kinds(input_dim: usize, image: Option<(usize, usize, usize, bool)>) -> Vec<LayerKind> {
    let mut kinds = vec![LayerKind::Flatten { dim: input_dim }];
    let wide = match image {
        Some((h, w, c, planar)) if h >= 8 && w >= 8 && (h * w * c) == input_dim => {
            let kernel = 4;
            let stride = 4;
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let filters = (256 / (oh * ow)).max(1);
            kinds.push(LayerKind::PatchDense {
                height: h,
                width: w,
                channels: c,
                kernel,
                stride,
                filters,
                planar,
            });
            oh * ow * filters
        }
        _ => {
            kinds.push(LayerKind::Dense { input: input_dim, output: 256 });
            256
        }
    };
    kinds.push(LayerKind::Relu { dim: wide });
    kinds.push(LayerKind::Dense { input: wide, output: 64 });
    kinds.push(LayerKind::Relu { dim: 64 });
    kinds.push(LayerKind::Dense { input: 64, output: 32 });
    kinds.push(LayerKind::Relu { dim: 32 });
    kinds
}

/// Split index of the default stack: right after the relu that follows
/// dense(64), so the protected activations are 64 wide.
pub const DEFAULT_SPLIT_INDEX: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> SplitModel {
        SplitModel::build(
            vec![
                LayerKind::Dense { input: 4, output: 6 },
                LayerKind::Relu { dim: 6 },
                LayerKind::Dense { input: 6, output: 5 },
                LayerKind::Relu { dim: 5 },
            ],
            2,
            &[("label".to_string(), 3)],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_layer_is_identity() {
        let mut model = SplitModel::build(
            vec![LayerKind::Dense { input: 3, output: 3 }, LayerKind::Relu { dim: 3 }],
            1,
            &[("y".to_string(), 2)],
            7,
        )
        .unwrap();
        model.layers[0].params[0] = Matrix::identity(3);
        model.layers[0].params[1] = Matrix::zeros(1, 3);
        let mut rng = Rng::new(3);
        let x = rng.uniform_matrix(4, 3, 0.0, 1.0);
        let z = model.forward_client_plain(&x).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn zero_weights_relu_gives_zero() {
        let mut model = SplitModel::build(
            vec![
                LayerKind::Dense { input: 3, output: 4 },
                LayerKind::Relu { dim: 4 },
                LayerKind::Dense { input: 4, output: 2 },
            ],
            2,
            &[("y".to_string(), 2)],
            7,
        )
        .unwrap();
        model.layers[0].params[0] = Matrix::zeros(3, 4);
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(5, 3, 0.0, 1.0);
        let z = model.forward_client_plain(&x).unwrap();
        assert!(z.max_abs() == 0.0);
    }

    #[test]
    fn two_layer_forward_matches_matrix_arithmetic() {
        let model = SplitModel::build(
            vec![
                LayerKind::Dense { input: 8, output: 5 },
                LayerKind::Relu { dim: 5 },
                LayerKind::Dense { input: 5, output: 3 },
            ],
            2,
            &[("y".to_string(), 2)],
            42,
        )
        .unwrap();
        let mut rng = Rng::new(9);
        let x = rng.normal_matrix(4, 8, 0.0, 1.0);
        let z = model.forward_client_plain(&x).unwrap();

        let w = &model.layers[0].params[0];
        let b = &model.layers[0].params[1];
        let h = x.matmul(w);
        let h = Matrix::from_fn(4, 5, |i, j| (h.at(i, j) + b.at(0, j)).max(0.0));
        assert!(z.sub(&h).max_abs() < 1e-12);
    }

    #[test]
    fn client_then_server_equals_full_stack() {
        let model = tiny_model(11);
        let mut rng = Rng::new(12);
        let x = rng.normal_matrix(6, 4, 0.0, 1.0);

        let z = model.forward_client_plain(&x).unwrap();
        let mut tape = Tape::new();
        let zl = tape.leaf(z);
        let (logits_split, _) = model.forward_server(&mut tape, zl).unwrap();
        let split_out = tape.value(logits_split[0]).clone();

        let full_out = model.forward_full_plain(&x).unwrap().remove(0);
        assert_eq!(split_out, full_out);
    }

    #[test]
    fn cce_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(6, 4));
        let mut y = Matrix::zeros(6, 4);
        for i in 0..6 {
            y.set(i, i % 4, 1.0);
        }
        let c = cce(&mut tape, logits, &y).unwrap();
        assert!((tape.value(c).scalar_value() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let mut l = Matrix::zeros(3, 3);
        for i in 0..3 {
            l.set(i, i, 50.0);
        }
        let logits = tape.leaf(l);
        let y = Matrix::identity(3);
        let c = cce(&mut tape, logits, &y).unwrap();
        assert!(tape.value(c).scalar_value() < 1e-12);
    }

    #[test]
    fn cce_matches_scalar_loop() {
        let mut rng = Rng::new(13);
        let l = rng.normal_matrix(4, 3, 0.0, 2.0);
        let mut y = Matrix::zeros(4, 3);
        for i in 0..4 {
            y.set(i, (i * 2) % 3, 1.0);
        }
        let mut tape = Tape::new();
        let logits = tape.leaf(l.clone());
        let c = cce(&mut tape, logits, &y).unwrap();

        let mut want = 0.0;
        for i in 0..4 {
            let row = l.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..3 {
                if y.at(i, j) == 1.0 {
                    want -= ((row[j] - m).exp() / denom).ln();
                }
            }
        }
        want /= 4.0;
        assert!((tape.value(c).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_non_one_hot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(2, 2));
        let y = Matrix::from_vec(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert!(matches!(cce(&mut tape, logits, &y), Err(Error::Label(_))));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(0.1, 1.0, &[(2, 2)]);
        state.step(&mut [&mut p], &[Matrix::zeros(2, 2)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let mut p = Matrix::scalar(1.0);
        let g = Matrix::scalar(0.5);
        let mut state = AdamState::new(1e-3, 1.0, &[(1, 1)]);
        state.step(&mut [&mut p], &[g]).unwrap();
        // t=1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.scalar_value() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut rng = Rng::new(14);
        let mut p = rng.normal_matrix(3, 1, 0.0, 1.0);
        // per-step decay keeps the late steps from oscillating at the floor
        let mut state = AdamState::new(0.05, 0.99, &[(3, 1)]);
        let mut losses = Vec::new();
        for _ in 0..300 {
            let loss: f64 = p.data().iter().map(|v| v * v).sum();
            losses.push(loss);
            let g = p.scale(2.0);
            state.step(&mut [&mut p], &[g]).unwrap();
            state.end_epoch();
        }
        // monotone after warmup, down to the convergence floor
        for w in losses[30..].windows(2) {
            if w[0] < 1e-3 {
                break;
            }
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {:?}", w);
        }
        assert!(losses.last().unwrap() < &1e-3, "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let model = tiny_model(15);
        let mut rng = Rng::new(16);
        let x = rng.uniform_matrix(5, 4, -1.0, 1.0);
        let mut y = Matrix::zeros(5, 3);
        for i in 0..5 {
            y.set(i, i % 3, 1.0);
        }

        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (_, logits, client_vars, _) = model.forward_full(&mut tape, xl).unwrap();
        let loss = cce(&mut tape, logits[0], &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.wrt(client_vars[0], model.layers[0].params[0].shape());

        let step = 1e-6;
        let w0 = model.layers[0].params[0].clone();
        let mut fd = Matrix::zeros(w0.rows(), w0.cols());
        for i in 0..w0.rows() {
            for j in 0..w0.cols() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.layers[0].params[0].set(i, j, w0.at(i, j) + delta);
                    let logits = m.forward_full_plain(&x).unwrap().remove(0);
                    crate::numcore::kernels::softmax_cce(&logits, &y).0
                };
                fd.set(i, j, (eval(step) - eval(-step)) / (2.0 * step));
            }
        }
        let rel = got.sub(&fd).frob_norm() / fd.frob_norm().max(1e-12);
        assert!(rel < 1e-4, "rel err {}", rel);
    }

    #[test]
    fn multi_head_loss_is_sum_and_heads_are_separable() {
        let model = SplitModel::build(
            vec![
                LayerKind::Dense { input: 4, output: 6 },
                LayerKind::Relu { dim: 6 },
            ],
            1,
            &[("a".to_string(), 2), ("b".to_string(), 3)],
            21,
        )
        .unwrap();
        let mut rng = Rng::new(22);
        let x = rng.normal_matrix(5, 4, 0.0, 1.0);
        let mut ya = Matrix::zeros(5, 2);
        let mut yb = Matrix::zeros(5, 3);
        for i in 0..5 {
            ya.set(i, i % 2, 1.0);
            yb.set(i, i % 3, 1.0);
        }
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (_, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let ca = cce(&mut tape, logits[0], &ya).unwrap();
        let cb = cce(&mut tape, logits[1], &yb).unwrap();
        let total = tape.add(ca, cb).unwrap();
        let t = tape.value(total).scalar_value();
        let va = tape.value(ca).scalar_value();
        let vb = tape.value(cb).scalar_value();
        assert!((t - (va + vb)).abs() < 1e-15);
        // dropping head b removes exactly its contribution
        assert!((t - vb - va).abs() < 1e-15);
    }

    #[test]
    fn patch_dense_keeps_block_structure_under_training() {
        let kind = LayerKind::PatchDense {
            height: 8,
            width: 8,
            channels: 1,
            kernel: 4,
            stride: 4,
            filters: 2,
            planar: false,
        };
        let layer = Layer::new(kind.clone(), 33).unwrap();
        let mask = layer.consts[1].clone();
        // gradient through the layer stays inside the mask
        let mut tape = Tape::new();
        let mut rng = Rng::new(34);
        let x = tape.leaf(rng.normal_matrix(3, 64, 0.0, 1.0));
        let (out, vars) = layer.forward(&mut tape, x).unwrap();
        let loss = tape.l2_sq(out);
        let g = tape.backward(loss).unwrap().wrt(vars[0], layer.params[0].shape());
        for i in 0..mask.rows() {
            for j in 0..mask.cols() {
                if mask.at(i, j) == 0.0 {
                    assert_eq!(g.at(i, j), 0.0);
                }
            }
        }
        let (p, k, f) = kind.patch_geometry();
        assert_eq!((p, k, f), (4, 16, 2));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let model = tiny_model(55);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.npkm");
        model.save(&path).unwrap();
        let loaded = SplitModel::load(&path).unwrap();
        assert_eq!(model.split_index, loaded.split_index);
        assert_eq!(model.layers.len(), loaded.layers.len());
        for (a, b) in model.layers.iter().zip(loaded.layers.iter()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.params, b.params);
        }
        assert_eq!(model.heads[0].weight, loaded.heads[0].weight);
        assert_eq!(model.heads[0].name, loaded.heads[0].name);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npkm");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(SplitModel::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn build_rejects_bad_split_index() {
        let kinds = vec![
            LayerKind::Dense { input: 4, output: 4 },
            LayerKind::Relu { dim: 4 },
        ];
        assert!(SplitModel::build(kinds.clone(), 0, &[("y".into(), 2)], 1).is_err());
        assert!(SplitModel::build(kinds, 2, &[("y".into(), 2)], 1).is_err());
    }
}
