//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] borrowed by the tape, so recording a pass never
//! copies weights. [`Tape::backward`] walks the tape in reverse and returns
//! gradients for every parameter that was touched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Mat, gemm};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Add another set of gradients in place.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(Mat::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GroupConv {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
        kernel: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        diff: Mat,
        frames: Vec<bool>,
        denom: f64,
    },
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast a `[1 × n]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Add a non-differentiable matrix.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let out = self.value(a).zip_map(c, |x, y| x + y);
        self.push(out, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Multiply by a `[1 × 1]` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(a).scale(k);
        self.push(out, Op::MulScalar(a, s))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with affine `[1 × n]` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Mat::hstack(&mats).expect("concat_cols row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Mat::vstack(&mats).expect("concat_rows column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start))
    }

    /// Grouped 1-D convolution along rows (time) with "same" zero padding.
    ///
    /// `x` is `[T × C]`, `w` is `[C × (C/groups · kernel)]` with the tap
    /// index fastest, `b` is `[1 × C]`; `kernel` must be odd.
    pub fn group_conv(&mut self, x: Var, w: Var, b: Var, groups: usize, kernel: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t_len, c) = xv.shape();
        let cpg = c / groups;
        let half = kernel / 2;
        let mut out = Mat::zeros(t_len, c);
        for o in 0..c {
            let g = o / cpg;
            let wrow = wv.row(o);
            for t in 0..t_len {
                let mut acc = bv.get(0, o);
                for k in 0..kernel {
                    let src = t as isize + k as isize - half as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xrow = xv.row(src as usize);
                    for ci in 0..cpg {
                        acc += wrow[ci * kernel + k] * xrow[g * cpg + ci];
                    }
                }
                out.set(t, o, acc);
            }
        }
        self.push(
            out,
            Op::GroupConv {
                x,
                w,
                b,
                groups,
                kernel,
            },
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Scalar mean squared error over the selected frames (rows).
    pub fn masked_mse(&mut self, pred: Var, target: &Mat, frames: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        pv.same_shape(target)?;
        if frames.len() != pv.rows() {
            return Err(Error::shape(pv.rows(), frames.len()));
        }
        let count = frames.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("loss region selects no frames"));
        }
        let denom = (count * pv.cols()) as f64;
        let diff = pv.zip_map(target, |a, b| a - b);
        let mut sum = 0.0;
        for (r, _) in frames.iter().enumerate().filter(|(_, m)| **m) {
            sum += diff.row(r).iter().map(|d| d * d).sum::<f64>();
        }
        Ok(self.push(
            Mat::scalar(sum / denom),
            Op::MaskedMse {
                pred,
                diff,
                frames: frames.to_vec(),
                denom,
            },
        ))
    }

    /// Back-propagate `weight · d(output)` and collect parameter gradients.
    pub fn backward(&self, output: Var, weight: f64) -> Grads {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let out_shape = self.value(output).shape();
        grads[output.0] = Some(Mat::filled(out_shape.0, out_shape.1, weight));
        let mut result = Grads::zeros_like(self.params);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => result.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::MatMulNT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv);
                    let gb = g.matmul_tn(av);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(*row, gr, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::AddConst(a) => send(*a, g, &mut grads),
                Op::Scale(a, s) => send(*a, g.scale(*s), &mut grads),
                Op::MulScalar(a, s) => {
                    let av = self.value(*a);
                    let k = self.value(*s).item();
                    let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    send(*s, Mat::scalar(gs), &mut grads);
                    send(*a, g.scale(k), &mut grads);
                }
                Op::Gelu(a) => {
                    let ga = self.value(*a).zip_map(&g, |x, gy| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let th = inner.tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * d
                    });
                    send(*a, ga, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (gy, xh) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            gg.row_mut(0)[c] += gy[c] * xh[c];
                            gb.row_mut(0)[c] += gy[c];
                            let d = gy[c] * gv.get(0, c);
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let is = inv_std[r];
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gy[c] * gv.get(0, c);
                            out[c] = is / n * (n * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                    send(*gamma, gg, &mut grads);
                    send(*beta, gb, &mut grads);
                    send(*x, gx, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        send(p, g.slice_cols(start, w), &mut grads);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        send(p, g.slice_rows(start, h), &mut grads);
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*a, ga, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(*a, ga, &mut grads);
                }
                Op::GroupConv {
                    x,
                    w,
                    b,
                    groups,
                    kernel,
                } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t_len, c) = xv.shape();
                    let cpg = c / groups;
                    let half = kernel / 2;
                    let mut gx = Mat::zeros(t_len, c);
                    let mut gw = Mat::zeros(wv.rows(), wv.cols());
                    let mut gb = Mat::zeros(1, c);
                    for o in 0..c {
                        let grp = o / cpg;
                        for t in 0..t_len {
                            let go = g.get(t, o);
                            if go == 0.0 {
                                continue;
                            }
                            gb.row_mut(0)[o] += go;
                            for k in 0..*kernel {
                                let src = t as isize + k as isize - half as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for ci in 0..cpg {
                                    let col = grp * cpg + ci;
                                    let widx = ci * kernel + k;
                                    gw.row_mut(o)[widx] += go * xv.get(src, col);
                                    gx.row_mut(src)[col] += go * wv.get(o, widx);
                                }
                            }
                        }
                    }
                    send(*w, gw, &mut grads);
                    send(*b, gb, &mut grads);
                    send(*x, gx, &mut grads);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Mat::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(*table, gt, &mut grads);
                }
                Op::MaskedMse {
                    pred,
                    diff,
                    frames,
                    denom,
                } => {
                    let k = g.item() * 2.0 / denom;
                    let mut gp = Mat::zeros(diff.rows(), diff.cols());
                    for (r, _) in frames.iter().enumerate().filter(|(_, m)| **m) {
                        for (o, d) in gp.row_mut(r).iter_mut().zip(diff.row(r)) {
                            *o = k * d;
                        }
                    }
                    send(*pred, gp, &mut grads);
                }
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Compare analytic and central-difference gradients of `f` for every
    /// entry of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let out = f(&mut tape);
            tape.backward(out, 1.0)
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).len();
            for j in 0..n {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let up = {
                    let mut t = Tape::new(store);
                    let o = f(&mut t);
                    t.value(o).item()
                };
                store.get_mut(id).data_mut()[j] = orig - h;
                let down = {
                    let mut t = Tape::new(store);
                    let o = f(&mut t);
                    t.value(o).item()
                };
                store.get_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.get(id).map_or(0.0, |g| g.data()[j]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{j}]: fd {fd} vs analytic {an}", store.entry(id).name);
            }
        }
    }

    #[test]
    fn primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.insert("a", rand_mat(4, 6, &mut rng), true).unwrap();
        let w = store.insert("w", rand_mat(6, 6, &mut rng), true).unwrap();
        let b = store.insert("b", rand_mat(1, 6, &mut rng), true).unwrap();
        let g = store.insert("g", rand_mat(1, 6, &mut rng), true).unwrap();
        let s = store.insert("s", Mat::scalar(0.7), true).unwrap();
        let cw = store.insert("cw", rand_mat(6, 3 * 3, &mut rng), true).unwrap();
        let cb = store.insert("cb", rand_mat(1, 6, &mut rng), true).unwrap();
        let emb = store.insert("emb", rand_mat(5, 6, &mut rng), true).unwrap();
        let target = rand_mat(5, 6, &mut rng);
        let bias = rand_mat(5, 5, &mut rng);
        check(&mut store, |t| {
            let (a, w, b, g, s) = (t.param(a), t.param(w), t.param(b), t.param(g), t.param(s));
            let (cw, cb, emb) = (t.param(cw), t.param(cb), t.param(emb));
            let x = t.matmul(a, w);
            let x = t.add_row(x, b);
            let x = t.layer_norm(x, g, b);
            let x = t.gelu(x);
            let e = t.gather(emb, &[1, 3, 3, 0]);
            let e = t.mul_scalar(e, s);
            let x = t.add(x, e);
            let c = t.group_conv(x, cw, cb, 2, 3);
            let x = t.add(x, c);
            let extra = t.slice_rows(x, 3, 1);
            let x = t.concat_rows(&[x, extra]);
            let sc = t.matmul_nt(x, x);
            let sc = t.scale(sc, 0.3);
            let sc = t.add_const(sc, &bias);
            let p = t.softmax_rows(sc);
            let y = t.matmul(p, x);
            let left = t.slice_cols(y, 0, 2);
            let right = t.slice_cols(y, 2, 4);
            let y = t.concat_cols(&[right, left]);
            t.masked_mse(y, &target, &[true, false, true, true, true]).unwrap()
        });
    }

    #[test]
    fn backward_weight_scales_gradients() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Mat::filled(2, 2, 0.5), true).unwrap();
        let mut t = Tape::new(&store);
        let v = t.param(a);
        let loss = t.masked_mse(v, &Mat::zeros(2, 2), &[true, true]).unwrap();
        let g1 = t.backward(loss, 1.0);
        let g3 = t.backward(loss, 3.0);
        assert_eq!(g1.get(a).unwrap().scale(3.0), *g3.get(a).unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::zeros(1, 1), true).unwrap();
        assert!(store.insert("x", Mat::zeros(1, 1), true).is_err());
    }
}
