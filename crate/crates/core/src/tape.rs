//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every tracked operation in execution order. Calling
//! [`Tape::backward`] on a scalar loss replays the record in reverse,
//! accumulating gradients exactly once per tensor use. Values flow through
//! per-call buffers, so repeated backward calls without zeroing add their
//! full contribution each time.
//!
//! Tensors are never mutated by forward ops; outputs are fresh tensors.

use std::cell::RefCell;
use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

enum Step {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    Reshape { x: Tensor, out: Tensor },
    Concat { a: Tensor, b: Tensor, axis: usize, out: Tensor },
    StackRows { rows: Vec<Tensor>, out: Tensor },
    Row { x: Tensor, index: usize, out: Tensor },
    EmbeddingLookup { table: Tensor, ids: Vec<usize>, out: Tensor },
    AvgPool { x: Tensor, out: Tensor },
    Softmax { x: Tensor, axis: usize, out: Tensor },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, out: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    Scale { x: Tensor, factor: f64, out: Tensor },
    Tanh { x: Tensor, out: Tensor },
    Sigmoid { x: Tensor, out: Tensor },
    Ln { x: Tensor, out: Tensor },
    Sum { x: Tensor, out: Tensor },
    Dropout { x: Tensor, mask: Vec<f64>, out: Tensor },
    CrossEntropy { p: Tensor, class: usize, out: Tensor },
}

/// Ordered record of tracked operations for one forward pass.
pub struct Tape {
    steps: RefCell<Vec<Step>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape for training / gradient computation.
    pub fn new() -> Tape {
        Tape { steps: RefCell::new(Vec::new()), recording: true }
    }

    /// Non-recording tape: ops compute values only. Used at evaluation time.
    pub fn inference() -> Tape {
        Tape { steps: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, requires_grad: bool, step: impl FnOnce() -> Step) {
        if self.recording && requires_grad {
            self.steps.borrow_mut().push(step());
        }
    }

    /// Standard matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ash, bsh),
            ));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let av = a.storage.borrow();
        let bv = b.storage.borrow();
        let out_values = matmul_raw(&av.values, &bv.values, m, k, n);
        drop(av);
        drop(bv);
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(vec![m, n], out_values, rg);
        self.push(rg, || Step::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// 2D transpose.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", sh)));
        }
        let (m, n) = (sh[0], sh[1]);
        let xv = x.values();
        let mut out_values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out_values[j * m + i] = xv[i * n + j];
            }
        }
        let rg = x.requires_grad();
        let out = Tensor::from_op(vec![n, m], out_values, rg);
        self.push(rg, || Step::Transpose { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", x.shape(), shape),
            ));
        }
        let rg = x.requires_grad();
        let out = Tensor::from_op(shape.to_vec(), x.values(), rg);
        self.push(rg, || Step::Reshape { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Juxtaposition along `axis`. Vectors concat along axis 0; matrices
    /// along axis 0 (rows) or 1 (columns).
    pub fn concat(&self, a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        let (shape, values) = match (ash.len(), bsh.len(), axis) {
            (1, 1, 0) => {
                let mut v = a.values();
                v.extend(b.values());
                (vec![ash[0] + bsh[0]], v)
            }
            (2, 2, 0) if ash[1] == bsh[1] => {
                let mut v = a.values();
                v.extend(b.values());
                (vec![ash[0] + bsh[0], ash[1]], v)
            }
            (2, 2, 1) if ash[0] == bsh[0] => {
                let (av, bv) = (a.values(), b.values());
                let (n, ca, cb) = (ash[0], ash[1], bsh[1]);
                let mut v = Vec::with_capacity(n * (ca + cb));
                for i in 0..n {
                    v.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                    v.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
                }
                (vec![n, ca + cb], v)
            }
            _ => {
                return Err(Error::shape(
                    "concat",
                    format!("cannot concat {:?} and {:?} along axis {}", ash, bsh, axis),
                ))
            }
        };
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(shape, values, rg);
        self.push(rg, || Step::Concat { a: a.clone(), b: b.clone(), axis, out: out.clone() });
        Ok(out)
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::EmptySequence("stack_rows"));
        }
        let d = rows[0].numel();
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.rank() != 1 || r.numel() != d {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected vectors of length {}, got {:?}", d, r.shape()),
                ));
            }
            values.extend(r.values());
        }
        let rg = rows.iter().any(|r| r.requires_grad());
        let out = Tensor::from_op(vec![rows.len(), d], values, rg);
        self.push(rg, || Step::StackRows { rows: rows.to_vec(), out: out.clone() });
        Ok(out)
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::shape("row", format!("expected a matrix, got {:?}", sh)));
        }
        if index >= sh[0] {
            return Err(Error::index("row", format!("row {} out of range for {} rows", index, sh[0])));
        }
        let d = sh[1];
        let values = x.storage.borrow().values[index * d..(index + 1) * d].to_vec();
        let rg = x.requires_grad();
        let out = Tensor::from_op(vec![d], values, rg);
        self.push(rg, || Step::Row { x: x.clone(), index, out: out.clone() });
        Ok(out)
    }

    /// Gather rows of an embedding table; backward scatter-adds into the
    /// table gradient when the table is trainable.
    pub fn embedding_lookup(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let sh = table.shape();
        if sh.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("expected a matrix, got {:?}", sh)));
        }
        let (v, e) = (sh[0], sh[1]);
        let tv = table.storage.borrow();
        let mut values = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::index(
                    "embedding_lookup",
                    format!("id {} out of range for table of {} rows", id, v),
                ));
            }
            values.extend_from_slice(&tv.values[id * e..(id + 1) * e]);
        }
        drop(tv);
        let rg = table.requires_grad();
        let out = Tensor::from_op(vec![ids.len(), e], values, rg);
        self.push(rg, || Step::EmbeddingLookup { table: table.clone(), ids: ids.to_vec(), out: out.clone() });
        Ok(out)
    }

    /// Column-wise mean of a matrix: n×d → d.
    pub fn average_pool(&self, x: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::shape("average_pool", format!("expected a matrix, got {:?}", sh)));
        }
        let (n, d) = (sh[0], sh[1]);
        if n == 0 {
            return Err(Error::EmptySequence("average_pool"));
        }
        let xv = x.storage.borrow();
        let mut values = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                values[j] += xv.values[i * d + j];
            }
        }
        for vj in values.iter_mut() {
            *vj /= n as f64;
        }
        drop(xv);
        let rg = x.requires_grad();
        let out = Tensor::from_op(vec![d], values, rg);
        self.push(rg, || Step::AvgPool { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let sh = x.shape();
        let lanes = lane_indices(&sh, axis)
            .ok_or_else(|| Error::shape("softmax", format!("axis {} invalid for {:?}", axis, sh)))?;
        let xv = x.values();
        let mut values = vec![0.0; xv.len()];
        for lane in &lanes {
            let max = lane.iter().map(|&i| xv[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in lane {
                let e = (xv[i] - max).exp();
                values[i] = e;
                total += e;
            }
            for &i in lane {
                values[i] /= total;
            }
        }
        let rg = x.requires_grad();
        let out = Tensor::from_op(sh, values, rg);
        self.push(rg, || Step::Softmax { x: x.clone(), axis, out: out.clone() });
        Ok(out)
    }

    /// Row-wise normalization to zero mean and unit population variance,
    /// then elementwise gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::shape("layer_norm", format!("expected a matrix, got {:?}", sh)));
        }
        let (n, d) = (sh[0], sh[1]);
        if gain.shape() != vec![d] || bias.shape() != vec![d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} do not match row width {}", gain.shape(), bias.shape(), d),
            ));
        }
        let xv = x.values();
        let gv = gain.values();
        let bv = bias.values();
        let mut values = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let rowslice = &xv[i * d..(i + 1) * d];
            let mean = rowslice.iter().sum::<f64>() / d as f64;
            let var = rowslice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (rowslice[j] - mean) * inv;
                xhat[i * d + j] = h;
                values[i * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let out = Tensor::from_op(sh, values, rg);
        self.push(rg, || Step::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            out: out.clone(),
            xhat,
            inv_std,
        });
        Ok(out)
    }

    /// Elementwise sum; shapes must agree exactly.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.same_shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(a.shape(), values, rg);
        self.push(rg, || Step::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise product; shapes must agree exactly.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.same_shape(b) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(a.shape(), values, rg);
        self.push(rg, || Step::Mul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let values = x.values().iter().map(|v| v * factor).collect();
        let rg = x.requires_grad();
        let out = Tensor::from_op(x.shape(), values, rg);
        self.push(rg, || Step::Scale { x: x.clone(), factor, out: out.clone() });
        Ok(out)
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().iter().map(|v| v.tanh()).collect();
        let rg = x.requires_grad();
        let out = Tensor::from_op(x.shape(), values, rg);
        self.push(rg, || Step::Tanh { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let rg = x.requires_grad();
        let out = Tensor::from_op(x.shape(), values, rg);
        self.push(rg, || Step::Sigmoid { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Natural log; defined for positive inputs.
    pub fn ln(&self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().iter().map(|v| v.ln()).collect();
        let rg = x.requires_grad();
        let out = Tensor::from_op(x.shape(), values, rg);
        self.push(rg, || Step::Ln { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total = x.values().iter().sum();
        let rg = x.requires_grad();
        let out = Tensor::from_op(Vec::new(), vec![total], rg);
        self.push(rg, || Step::Sum { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Inverted dropout: in training mode zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); in eval mode the identity.
    pub fn dropout(&self, x: &Tensor, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if !training || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let values = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = x.requires_grad();
        let out = Tensor::from_op(x.shape(), values, rg);
        self.push(rg, || Step::Dropout { x: x.clone(), mask, out: out.clone() });
        Ok(out)
    }

    /// Negative log likelihood of `class` under the probability vector `p`.
    pub fn cross_entropy(&self, p: &Tensor, class: usize) -> Result<Tensor> {
        if p.rank() != 1 {
            return Err(Error::shape("cross_entropy", format!("expected a vector, got {:?}", p.shape())));
        }
        if class >= p.numel() {
            return Err(Error::index(
                "cross_entropy",
                format!("class {} out of range for {} classes", class, p.numel()),
            ));
        }
        let loss = -p.value_at(class).ln();
        let rg = p.requires_grad();
        let out = Tensor::from_op(Vec::new(), vec![loss], rg);
        self.push(rg, || Step::CrossEntropy { p: p.clone(), class, out: out.clone() });
        Ok(out)
    }

    /// Propagate gradients from a scalar loss back to every tracked tensor.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.shape()),
            ));
        }
        let steps = self.steps.borrow();
        let mut flow: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut handles: HashMap<usize, Tensor> = HashMap::new();
        flow.insert(loss.id(), vec![1.0]);
        handles.insert(loss.id(), loss.clone());
        for step in steps.iter().rev() {
            step.propagate(&mut flow, &mut handles);
        }
        for (id, delta) in flow {
            if let Some(t) = handles.get(&id) {
                if t.requires_grad() {
                    t.accumulate_grad(&delta);
                }
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Flat index groups over which a softmax normalizes.
fn lane_indices(shape: &[usize], axis: usize) -> Option<Vec<Vec<usize>>> {
    match (shape.len(), axis) {
        (1, 0) => Some(vec![(0..shape[0]).collect()]),
        (2, 1) => {
            let (n, d) = (shape[0], shape[1]);
            Some((0..n).map(|i| (i * d..(i + 1) * d).collect()).collect())
        }
        (2, 0) => {
            let (n, d) = (shape[0], shape[1]);
            Some((0..d).map(|j| (0..n).map(|i| i * d + j).collect()).collect())
        }
        _ => None,
    }
}

fn add_flow(flow: &mut HashMap<usize, Vec<f64>>, handles: &mut HashMap<usize, Tensor>, t: &Tensor, delta: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    handles.entry(t.id()).or_insert_with(|| t.clone());
    match flow.entry(t.id()) {
        Entry::Occupied(mut e) => {
            for (acc, d) in e.get_mut().iter_mut().zip(&delta) {
                *acc += d;
            }
        }
        Entry::Vacant(e) => {
            e.insert(delta);
        }
    }
}

impl Step {
    fn propagate(&self, flow: &mut HashMap<usize, Vec<f64>>, handles: &mut HashMap<usize, Tensor>) {
        let out = self.output();
        let g = match flow.get(&out.id()) {
            Some(g) => g.clone(),
            None => return,
        };
        handles.entry(out.id()).or_insert_with(|| out.clone());
        match self {
            Step::Matmul { a, b, .. } => {
                let ash = a.shape();
                let bsh = b.shape();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let av = a.values();
                let bv = b.values();
                if a.requires_grad() {
                    // dA = g · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    add_flow(flow, handles, a, da);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    add_flow(flow, handles, b, db);
                }
            }
            Step::Transpose { x, out } => {
                let osh = out.shape();
                let (n, m) = (osh[0], osh[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                add_flow(flow, handles, x, dx);
            }
            Step::Reshape { x, .. } => {
                add_flow(flow, handles, x, g);
            }
            Step::Concat { a, b, axis, .. } => {
                let ash = a.shape();
                let bsh = b.shape();
                match (ash.len(), *axis) {
                    (1, 0) | (2, 0) => {
                        let split = a.numel();
                        if a.requires_grad() {
                            add_flow(flow, handles, a, g[..split].to_vec());
                        }
                        if b.requires_grad() {
                            add_flow(flow, handles, b, g[split..].to_vec());
                        }
                    }
                    (2, 1) => {
                        let (n, ca, cb) = (ash[0], ash[1], bsh[1]);
                        let mut da = vec![0.0; n * ca];
                        let mut db = vec![0.0; n * cb];
                        for i in 0..n {
                            let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                            da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                            db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                        }
                        if a.requires_grad() {
                            add_flow(flow, handles, a, da);
                        }
                        if b.requires_grad() {
                            add_flow(flow, handles, b, db);
                        }
                    }
                    _ => unreachable!("recorded concat has a validated axis"),
                }
            }
            Step::StackRows { rows, .. } => {
                let d = rows[0].numel();
                for (i, r) in rows.iter().enumerate() {
                    if r.requires_grad() {
                        add_flow(flow, handles, r, g[i * d..(i + 1) * d].to_vec());
                    }
                }
            }
            Step::Row { x, index, .. } => {
                let d = x.dim(1);
                let mut dx = vec![0.0; x.numel()];
                dx[index * d..(index + 1) * d].copy_from_slice(&g);
                add_flow(flow, handles, x, dx);
            }
            Step::EmbeddingLookup { table, ids, .. } => {
                let e = table.dim(1);
                let mut dt = vec![0.0; table.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] += g[t * e + j];
                    }
                }
                add_flow(flow, handles, table, dt);
            }
            Step::AvgPool { x, .. } => {
                let (n, d) = (x.dim(0), x.dim(1));
                let scale = 1.0 / n as f64;
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = g[j] * scale;
                    }
                }
                add_flow(flow, handles, x, dx);
            }
            Step::Softmax { x, axis, out } => {
                let sh = out.shape();
                let p = out.values();
                let lanes = lane_indices(&sh, *axis).expect("recorded softmax has a valid axis");
                let mut dx = vec![0.0; p.len()];
                for lane in &lanes {
                    let dot: f64 = lane.iter().map(|&i| g[i] * p[i]).sum();
                    for &i in lane {
                        dx[i] = p[i] * (g[i] - dot);
                    }
                }
                add_flow(flow, handles, x, dx);
            }
            Step::LayerNorm { x, gain, bias, xhat, inv_std, .. } => {
                let (n, d) = (x.dim(0), x.dim(1));
                let gv = gain.values();
                if x.requires_grad() {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = g[i * d + j] * gv[j];
                            m1 += gy;
                            m2 += gy * xhat[i * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = g[i * d + j] * gv[j];
                            dx[i * d + j] = inv_std[i] * (gy - m1 - xhat[i * d + j] * m2);
                        }
                    }
                    add_flow(flow, handles, x, dx);
                }
                if gain.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    add_flow(flow, handles, gain, dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    add_flow(flow, handles, bias, db);
                }
            }
            Step::Add { a, b, .. } => {
                if a.requires_grad() {
                    add_flow(flow, handles, a, g.clone());
                }
                if b.requires_grad() {
                    add_flow(flow, handles, b, g);
                }
            }
            Step::Mul { a, b, .. } => {
                if a.requires_grad() {
                    let da = g.iter().zip(b.values()).map(|(gi, bi)| gi * bi).collect();
                    add_flow(flow, handles, a, da);
                }
                if b.requires_grad() {
                    let db = g.iter().zip(a.values()).map(|(gi, ai)| gi * ai).collect();
                    add_flow(flow, handles, b, db);
                }
            }
            Step::Scale { x, factor, .. } => {
                add_flow(flow, handles, x, g.iter().map(|gi| gi * factor).collect());
            }
            Step::Tanh { x, out } => {
                let dx = g.iter().zip(out.values()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                add_flow(flow, handles, x, dx);
            }
            Step::Sigmoid { x, out } => {
                let dx = g.iter().zip(out.values()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                add_flow(flow, handles, x, dx);
            }
            Step::Ln { x, .. } => {
                let dx = g.iter().zip(x.values()).map(|(gi, xi)| gi / xi).collect();
                add_flow(flow, handles, x, dx);
            }
            Step::Sum { x, .. } => {
                add_flow(flow, handles, x, vec![g[0]; x.numel()]);
            }
            Step::Dropout { x, mask, .. } => {
                let dx = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                add_flow(flow, handles, x, dx);
            }
            Step::CrossEntropy { p, class, .. } => {
                let mut dp = vec![0.0; p.numel()];
                dp[*class] = -g[0] / p.value_at(*class);
                add_flow(flow, handles, p, dp);
            }
        }
    }

    fn output(&self) -> &Tensor {
        match self {
            Step::Matmul { out, .. }
            | Step::Transpose { out, .. }
            | Step::Reshape { out, .. }
            | Step::Concat { out, .. }
            | Step::StackRows { out, .. }
            | Step::Row { out, .. }
            | Step::EmbeddingLookup { out, .. }
            | Step::AvgPool { out, .. }
            | Step::Softmax { out, .. }
            | Step::LayerNorm { out, .. }
            | Step::Add { out, .. }
            | Step::Mul { out, .. }
            | Step::Scale { out, .. }
            | Step::Tanh { out, .. }
            | Step::Sigmoid { out, .. }
            | Step::Ln { out, .. }
            | Step::Sum { out, .. }
            | Step::Dropout { out, .. }
            | Step::CrossEntropy { out, .. } => out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::from_values(shape, values.to_vec()).unwrap()
    }

    fn p(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::param(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(&i2, &m).unwrap();
        assert_eq!(c.values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let b = t(&[2, 1], &[5.0, 7.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.values(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn softmax_uniform_and_known_values() {
        let tape = Tape::new();
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let s = tape.softmax(&x, 0).unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t(&[2], &[0.0, 2.0f64.ln()]);
        let s = tape.softmax(&x, 0).unwrap();
        assert!((s.value_at(0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.value_at(1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::new();
        let x = t(&[4], &[0.3, -1.2, 2.0, 0.0]);
        let shifted = t(&[4], &[0.3 + 17.5, -1.2 + 17.5, 2.0 + 17.5, 17.5]);
        let a = tape.softmax(&x, 0).unwrap();
        let b = tape.softmax(&shifted, 0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_and_columns_sum_to_one() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[0.5, -0.2, 1.0, 3.0, 0.0, -1.0]);
        let rows = tape.softmax(&x, 1).unwrap();
        let v = rows.values();
        for i in 0..2 {
            let s: f64 = v[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let cols = tape.softmax(&x, 0).unwrap();
        let v = cols.values();
        for j in 0..3 {
            let s: f64 = (0..2).map(|i| v[i * 3 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let tape = Tape::new();
        let x = t(&[1, 2], &[1.0, 3.0]);
        let gain = t(&[2], &[1.0, 1.0]);
        let bias = t(&[2], &[0.0, 0.0]);
        let y = tape.layer_norm(&x, &gain, &bias, 0.0).unwrap();
        assert!((y.value_at(0) + 1.0).abs() < 1e-12);
        assert!((y.value_at(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let tape = Tape::new();
        let x = t(&[1, 3], &[5.0, 5.0, 5.0]);
        let gain = t(&[3], &[1.0, 1.0, 1.0]);
        let bias = t(&[3], &[0.0, 0.0, 0.0]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in y.values() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_random_rows_standardized() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (4, 8);
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let x = t(&[n, d], &values);
        let gain = t(&[d], &vec![1.0; d]);
        let bias = t(&[d], &vec![0.0; d]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-9).unwrap();
        let yv = y.values();
        for i in 0..n {
            let row = &yv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "row mean {}", mean);
            assert!((var - 1.0).abs() < 1e-6, "row variance {}", var);
        }
    }

    #[test]
    fn average_pool_examples() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.average_pool(&x).unwrap().values(), vec![2.0, 3.0]);
        let single = t(&[1, 2], &[7.0, 8.0]);
        assert_eq!(tape.average_pool(&single).unwrap().values(), vec![7.0, 8.0]);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(tape.average_pool(&empty), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn average_pool_permutation_invariant() {
        let tape = Tape::new();
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let shuffled = t(&[3, 2], &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            tape.average_pool(&x).unwrap().values(),
            tape.average_pool(&shuffled).unwrap().values()
        );
    }

    #[test]
    fn concat_examples_and_roundtrip() {
        let tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[1], &[3.0]);
        let c = tape.concat(&a, &b, 0).unwrap();
        assert_eq!(c.values(), vec![1.0, 2.0, 3.0]);

        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 5]);
        assert_eq!(tape.concat(&a, &b, 1).unwrap().shape(), vec![2, 8]);

        // concat then slice recovers the originals
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = tape.concat(&a, &b, 1).unwrap();
        let cv = c.values();
        assert_eq!(&cv[0..2], &[1.0, 2.0]);
        assert_eq!(cv[2], 9.0);
        assert_eq!(&cv[3..5], &[3.0, 4.0]);
        assert_eq!(cv[5], 8.0);

        let mismatched = Tensor::zeros(&[3, 3]);
        assert!(tape.concat(&a, &mismatched, 1).is_err());
    }

    #[test]
    fn elementwise_known_values() {
        let tape = Tape::new();
        let zero = t(&[1], &[0.0]);
        assert_eq!(tape.sigmoid(&zero).unwrap().values(), vec![0.5]);
        assert_eq!(tape.tanh(&zero).unwrap().values(), vec![0.0]);
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let z = t(&[3], &[0.0, 0.0, 0.0]);
        assert_eq!(tape.add(&x, &z).unwrap().values(), x.values());
        assert!(tape.add(&x, &zero).is_err());
    }

    #[test]
    fn dropout_zero_rate_and_eval_are_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
        let y = tape.dropout(&x, 0.7, false, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
        assert!(tape.dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_drop_fraction_concentrates() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let x = t(&[n], &vec![1.0; n]);
        let y = tape.dropout(&x, 0.5, true, &mut rng).unwrap();
        let dropped = y.values().iter().filter(|v| **v == 0.0).count();
        let fraction = dropped as f64 / n as f64;
        assert!((fraction - 0.5).abs() < 0.01, "observed drop fraction {}", fraction);
        // survivors are scaled by 1/(1-rate)
        assert!(y.values().iter().all(|v| *v == 0.0 || (*v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn embedding_lookup_examples() {
        let tape = Tape::new();
        let table = t(&[3, 2], &[0.1, 0.2, 1.0, 2.0, 10.0, 20.0]);
        let out = tape.embedding_lookup(&table, &[0, 0]).unwrap();
        assert_eq!(out.values(), vec![0.1, 0.2, 0.1, 0.2]);
        let empty = tape.embedding_lookup(&table, &[]).unwrap();
        assert_eq!(empty.shape(), vec![0, 2]);
        let err = tape.embedding_lookup(&table, &[5]).unwrap_err();
        assert!(err.to_string().contains("id 5"), "{}", err);
    }

    #[test]
    fn cross_entropy_known_values() {
        let tape = Tape::new();
        let uniform = t(&[5], &[0.2; 5]);
        for class in 0..5 {
            let loss = tape.cross_entropy(&uniform, class).unwrap();
            assert!((loss.item() - 5.0f64.ln()).abs() < 1e-12);
        }
        let onehot = t(&[3], &[0.0, 1.0, 0.0]);
        assert_eq!(tape.cross_entropy(&onehot, 1).unwrap().item(), 0.0);
        assert!(tape.cross_entropy(&onehot, 9).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_at_three() {
        let tape = Tape::new();
        let x = p(&[], &[3.0]);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = p(&[2], &[1.0, 2.0]);
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let tape = Tape::new();
        let x = p(&[], &[3.0]);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let tape = Tape::new();
        let logits = p(&[5], &[0.5, -1.0, 2.0, 0.0, 1.0]);
        let probs = tape.softmax(&logits, 0).unwrap();
        let loss = tape.cross_entropy(&probs, 2).unwrap();
        tape.backward(&loss).unwrap();
        let grad = logits.grad().unwrap();
        let pv = probs.values();
        for i in 0..5 {
            let expected = pv[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expected).abs() < 1e-12, "component {}", i);
        }
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = p(&[2], &[1.0, 2.0]);
        let _ = tape.scale(&x, 3.0).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let tape = Tape::new();
        let x = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let before = x.values();
        let _ = tape.matmul(&x, &x).unwrap();
        let _ = tape.softmax(&x, 1).unwrap();
        let _ = tape.tanh(&x).unwrap();
        let _ = tape.scale(&x, -7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = tape.dropout(&x, 0.5, true, &mut rng).unwrap();
        assert_eq!(x.values(), before);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let values: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let a = p(&[3, 4], &values);
            let b = p(&[4, 3], &values);
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.softmax(&c, 1).unwrap();
            let loss = tape.sum(&tape.tanh(&s).unwrap()).unwrap();
            tape.backward(&loss).unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        let (g1a, g1b) = run();
        let (g2a, g2b) = run();
        assert_eq!(g1a, g2a);
        assert_eq!(g1b, g2b);
    }
}
