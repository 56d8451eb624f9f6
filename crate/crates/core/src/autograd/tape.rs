use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};

/// Parent gradients produced by an op's backward closure. Entries for parents
/// that do not require a gradient may be `None`.
pub type ParentGrads = Vec<Option<Tensor>>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> ParentGrads>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Reverse-mode recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to leaf variables.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.leaves.remove(&var.id)
    }
}

/// Row-sparse linear map: `out[r] = Σ w · in[i]` over the entries of row `r`.
///
/// Bilinear sampling, resizing, im2col and row selection are all instances.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    in_rows: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseRows {
    pub fn new(in_rows: usize) -> Self {
        SparseRows {
            in_rows,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// Appends one output row built from `(input row, weight)` entries.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in entries {
            assert!(i < self.in_rows, "row index {i} >= {}", self.in_rows);
            self.index.push(i);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .copied()
            .zip(self.weight[span].iter().copied())
    }

    pub fn apply(&self, input: &[f64], cols: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_rows * cols);
        let mut out = vec![0.0; self.out_rows() * cols];
        for r in 0..self.out_rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let src = &input[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.in_rows * cols];
        for r in 0..self.out_rows() {
            let src = &grad[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let dst = &mut out[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), true, None)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false, None)
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op with a hand-written backward rule.
    ///
    /// `backward(grad_out, needs)` returns one entry per parent; `needs[i]`
    /// tells whether parent `i` wants a gradient.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> ParentGrads + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires = ids.iter().any(|&id| self.requires_grad(id));
        if requires {
            self.push(value, ids, true, Some(Box::new(backward)))
        } else {
            self.push(value, ids, false, None)
        }
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(backward) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = backward(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                        if !need {
                            continue;
                        }
                        let Some(pg) = pg else { continue };
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = K * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let mut out = (*a).clone();
        out.add_assign(&b);
        self.tape.custom(&[self, other], out, |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.tape
            .custom(&[self, other], Tensor::new(a.shape(), data), |g, _| {
                vec![Some(g.clone()), Some(g.map(|v| -v))]
            })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.tape.custom(
            &[self, other],
            Tensor::new(a.shape(), data),
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let d = g.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                    Tensor::new(g.shape(), d)
                });
                let gb = needs[1].then(|| {
                    let d = g.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                    Tensor::new(g.shape(), d)
                });
                vec![ga, gb]
            },
        )
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.tape
            .custom(&[self], out, move |g, _| vec![Some(g.map(|v| v * s))])
    }

    /// `x [r,c] + bias [c]` broadcast over rows.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let c = x.cols();
        assert_eq!(b.len(), c, "add_row: bias length");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let bias_shape = b.shape().to_vec();
        self.tape.custom(&[self, bias], out, move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(&bias_shape, acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(
            b.rows(),
            k,
            "matmul: inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = Tensor::new(&[m, n], matmul(a.data(), b.data(), m, k, n));
        self.tape.custom(&[self, other], out, move |g, needs| {
            let ga =
                needs[0].then(|| Tensor::new(&[m, k], matmul_a_bt(g.data(), b.data(), m, n, k)));
            let gb =
                needs[1].then(|| Tensor::new(&[k, n], matmul_at_b(a.data(), g.data(), m, k, n)));
            vec![ga, gb]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape
            .custom(&[self], out, |g, _| vec![Some(g.transpose())])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.tape.custom(&[self], out, move |g, _| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    /// Applies a row-sparse linear map to a 2-D input.
    pub fn gather(self, map: &Rc<SparseRows>) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(x.rows(), map.in_rows(), "gather: input rows");
        let out = Tensor::new(&[map.out_rows(), c], map.apply(x.data(), c));
        let map = Rc::clone(map);
        self.tape.custom(&[self], out, move |g, _| {
            vec![Some(Tensor::new(
                &[map.in_rows(), c],
                map.apply_transpose(g.data(), c),
            ))]
        })
    }

    /// Concatenates 2-D inputs along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                out.extend_from_slice(v.row(r));
            }
        }
        parts[0]
            .tape
            .custom(parts, Tensor::new(&[rows, total], out), move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let s = start;
                        start += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + s..r * total + s + w]);
                            }
                            Tensor::new(&[rows, w], d)
                        })
                    })
                    .collect()
            })
    }

    /// Concatenates 2-D inputs along rows.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let heights: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let mut out = Vec::new();
        for v in &values {
            assert_eq!(v.cols(), cols, "concat_rows: column mismatch");
            out.extend_from_slice(v.data());
        }
        let total = heights.iter().sum::<usize>();
        parts[0]
            .tape
            .custom(parts, Tensor::new(&[total, cols], out), move |g, needs| {
                let mut start = 0;
                heights
                    .iter()
                    .zip(needs)
                    .map(|(&h, &need)| {
                        let s = start;
                        start += h;
                        need.then(|| {
                            Tensor::new(&[h, cols], g.data()[s * cols..(s + h) * cols].to_vec())
                        })
                    })
                    .collect()
            })
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let gv = gain.value();
        let bv = bias.value();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let gain_shape = gv.shape().to_vec();
        self.tape.custom(
            &[self, gain, bias],
            Tensor::new(&[r, c], out),
            move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gd[i * c + j] * gv.data()[j];
                            mean_d += d;
                            mean_dh += d * xhat[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gd[i * c + j] * gv.data()[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dh);
                        }
                    }
                    Tensor::new(&[r, c], dx)
                });
                let gg = needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                    Tensor::new(&gain_shape, acc)
                });
                let gb = needs[2].then(|| {
                    let mut acc = vec![0.0; c];
                    for row in gd.chunks_exact(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&gain_shape, acc)
                });
                vec![gx, gg, gb]
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| gelu_parts(v).0);
        self.tape.custom(&[self], out, move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| g * gelu_parts(v).1)
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = Rc::new(self.value().map(sigmoid));
        let y = Rc::clone(&out);
        self.tape.custom(&[self], (*out).clone(), move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .custom(&[self], Tensor::scalar(x.sum()), move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [tq,c]`, `k [tk,c]`, `v [tk,c]`; heads split the channel axis into
    /// contiguous groups of `c / heads`.
    pub fn attention(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Var<'t> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (tq, c) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        assert_eq!(kv.cols(), c, "attention: key width");
        assert_eq!(vv.rows(), tk, "attention: value rows");
        assert_eq!(vv.cols(), c, "attention: value width");
        assert!(
            heads > 0 && c % heads == 0,
            "attention: {c} channels / {heads} heads"
        );
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();

        // Head-major copies `[heads][rows][d]` keep the inner loops contiguous.
        let split = move |t: &Tensor, rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * c];
            for r in 0..rows {
                for h in 0..heads {
                    out[(h * rows + r) * d..(h * rows + r + 1) * d]
                        .copy_from_slice(&t.data()[r * c + h * d..r * c + (h + 1) * d]);
                }
            }
            out
        };
        let merge_into = move |dst: &mut [f64], src: &[f64], rows: usize| {
            for r in 0..rows {
                for h in 0..heads {
                    dst[r * c + h * d..r * c + (h + 1) * d]
                        .copy_from_slice(&src[(h * rows + r) * d..(h * rows + r + 1) * d]);
                }
            }
        };
        let (qs, ks, vs) = (split(&qv, tq), split(&kv, tk), split(&vv, tk));

        let mut probs = vec![0.0; heads * tq * tk];
        let mut out_s = vec![0.0; tq * c];
        for h in 0..heads {
            let hq = h * tq * d..(h + 1) * tq * d;
            let hk = h * tk * d..(h + 1) * tk * d;
            let args = HeadForward {
                q: &qs[hq.clone()],
                k: &ks[hk.clone()],
                v: &vs[hk],
                probs: &mut probs[h * tq * tk..(h + 1) * tq * tk],
                out: &mut out_s[hq],
                scale,
            };
            match d {
                4 => head_forward::<4>(args, d),
                8 => head_forward::<8>(args, d),
                16 => head_forward::<16>(args, d),
                32 => head_forward::<32>(args, d),
                _ => head_forward::<0>(args, d),
            }
        }
        let mut out = vec![0.0; tq * c];
        merge_into(&mut out, &out_s, tq);

        q.tape
            .custom(&[q, k, v], Tensor::new(&[tq, c], out), move |g, needs| {
                let gs = split(g, tq);
                let mut gq = vec![0.0; tq * c];
                let mut gk = vec![0.0; tk * c];
                let mut gv = vec![0.0; tk * c];
                for h in 0..heads {
                    let hq = h * tq * d..(h + 1) * tq * d;
                    let hk = h * tk * d..(h + 1) * tk * d;
                    let args = HeadBackward {
                        q: &qs[hq.clone()],
                        k: &ks[hk.clone()],
                        v: &vs[hk.clone()],
                        probs: &probs[h * tq * tk..(h + 1) * tq * tk],
                        g: &gs[hq.clone()],
                        gq: &mut gq[hq],
                        gk: &mut gk[hk.clone()],
                        gv: &mut gv[hk],
                        needs: [needs[0], needs[1], needs[2]],
                        scale,
                    };
                    match d {
                        4 => head_backward::<4>(args, d),
                        8 => head_backward::<8>(args, d),
                        16 => head_backward::<16>(args, d),
                        32 => head_backward::<32>(args, d),
                        _ => head_backward::<0>(args, d),
                    }
                }
                let finish = |src: Vec<f64>, rows: usize, need: bool| {
                    need.then(|| {
                        let mut dst = vec![0.0; rows * c];
                        merge_into(&mut dst, &src, rows);
                        Tensor::new(&[rows, c], dst)
                    })
                };
                vec![
                    finish(gq, tq, needs[0]),
                    finish(gk, tk, needs[1]),
                    finish(gv, tk, needs[2]),
                ]
            })
    }
}

struct HeadForward<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    probs: &'a mut [f64],
    out: &'a mut [f64],
    scale: f64,
}

struct HeadBackward<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    probs: &'a [f64],
    g: &'a [f64],
    gq: &'a mut [f64],
    gk: &'a mut [f64],
    gv: &'a mut [f64],
    needs: [bool; 3],
    scale: f64,
}

/// One attention head; `D > 0` fixes the head width at compile time.
fn head_forward<const D: usize>(a: HeadForward<'_>, d: usize) {
    let d = if D > 0 { D } else { d };
    let tk = a.k.len() / d;
    for ((qr, row), o) in
        a.q.chunks_exact(d)
            .zip(a.probs.chunks_exact_mut(tk))
            .zip(a.out.chunks_exact_mut(d))
    {
        let mut max = f64::NEG_INFINITY;
        for (s, kj) in row.iter_mut().zip(a.k.chunks_exact(d)) {
            *s = a.scale * dot(qr, kj);
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let inv = 1.0 / z;
        for (s, vj) in row.iter_mut().zip(a.v.chunks_exact(d)) {
            *s *= inv;
            axpy(*s, vj, o);
        }
    }
}

fn head_backward<const D: usize>(a: HeadBackward<'_>, d: usize) {
    let d = if D > 0 { D } else { d };
    let tk = a.k.len() / d;
    let mut ds = vec![0.0; tk];
    for (r, (gr, p)) in
        a.g.chunks_exact(d)
            .zip(a.probs.chunks_exact(tk))
            .enumerate()
    {
        if a.needs[2] {
            for (&pj, gvj) in p.iter().zip(a.gv.chunks_exact_mut(d)) {
                axpy(pj, gr, gvj);
            }
        }
        if !a.needs[0] && !a.needs[1] {
            continue;
        }
        let mut total = 0.0;
        for ((dsj, &pj), vj) in ds.iter_mut().zip(p).zip(a.v.chunks_exact(d)) {
            let dp = dot(gr, vj);
            *dsj = dp;
            total += pj * dp;
        }
        for (dsj, &pj) in ds.iter_mut().zip(p) {
            *dsj = pj * (*dsj - total) * a.scale;
        }
        if a.needs[0] {
            let gqr = &mut a.gq[r * d..(r + 1) * d];
            for (&dsj, kj) in ds.iter().zip(a.k.chunks_exact(d)) {
                axpy(dsj, kj, gqr);
            }
        }
        if a.needs[1] {
            let qr = &a.q[r * d..(r + 1) * d];
            for (&dsj, gkj) in ds.iter().zip(a.gk.chunks_exact_mut(d)) {
                axpy(dsj, qr, gkj);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fourth-order central finite-difference gradient of `f` at `x`:
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        probe.data_mut()[i] = orig;
        *g = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Largest relative error `|a-b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect(),
        )
    }

    /// Checks d(sum(w ⊙ op(inputs)))/d(input_k) for every input against finite
    /// differences; `w` breaks the symmetry a plain sum would have.
    fn check(inputs: &[Tensor], op: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let run = |vals: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
            let out = op(&tape, &vars);
            let w = seq(out.value().shape(), 0.731);
            out.value()
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = op(&tape, &vars);
        let w = tape.constant(seq(out.value().shape(), 0.731));
        let loss = out.mul(w).sum();
        let grads = tape.backward(loss);
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let numeric = finite_difference(&inputs[k], 1e-6, |probe| {
                let mut vals = inputs.to_vec();
                vals[k] = probe.clone();
                run(&vals)
            });
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(
                err < 1e-6,
                "input {k}: rel err {err}\n{analytic:?}\n{numeric:?}"
            );
        }
    }

    #[test]
    fn elementwise_ops() {
        let a = seq(&[3, 4], 0.3);
        let b = seq(&[3, 4], 0.7);
        check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1]));
        check(&[a.clone(), b.clone()], |_, v| v[0].sub(v[1]));
        check(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
        check(&[a.clone()], |_, v| v[0].scale(-2.5));
        check(&[a.clone()], |_, v| v[0].gelu());
        check(&[a.clone()], |_, v| v[0].sigmoid());
        check(&[a], |_, v| v[0].mean());
    }

    #[test]
    fn linear_algebra_ops() {
        let a = seq(&[3, 4], 0.3);
        let b = seq(&[4, 2], 0.9);
        let bias = seq(&[4], 1.3);
        check(&[a.clone(), b], |_, v| v[0].matmul(v[1]));
        check(&[a.clone(), bias], |_, v| v[0].add_row(v[1]));
        check(&[a.clone()], |_, v| v[0].transpose());
        check(&[a.clone()], |_, v| v[0].reshape(&[2, 6]));
        check(&[a.clone(), seq(&[3, 2], 0.2)], |_, v| {
            Var::concat_cols(&[v[0], v[1]])
        });
        check(&[a, seq(&[2, 4], 0.2)], |_, v| {
            Var::concat_rows(&[v[0], v[1]])
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let x = seq(&[3, 5], 0.41);
        let g = seq(&[5], 1.7).map(|v| 1.0 + 0.3 * v);
        let b = seq(&[5], 2.1);
        check(&[x, g, b], |_, v| v[0].layer_norm(v[1], v[2], 1e-5));
    }

    #[test]
    fn attention_gradient() {
        let q = seq(&[3, 4], 0.37);
        let k = seq(&[5, 4], 0.53);
        let v = seq(&[5, 4], 0.71);
        check(&[q, k, v], |_, x| Var::attention(x[0], x[1], x[2], 2));
    }

    #[test]
    fn gather_gradient() {
        let mut map = SparseRows::new(4);
        map.push_row([(0, 0.25), (3, 0.75)]);
        map.push_row([]);
        map.push_row([(1, 1.0), (1, 0.5), (2, -1.0)]);
        let map = Rc::new(map);
        check(&[seq(&[4, 3], 0.29)], move |_, v| v[0].gather(&map));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let tape = Tape::new();
        let q = tape.constant(seq(&[2, 4], 0.3));
        let k = tape.constant(seq(&[3, 4], 0.5));
        let v = tape.constant(Tensor::full(&[3, 4], 2.0));
        let out = Var::attention(q, k, v, 2).value();
        for x in out.data() {
            assert!((x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.param(seq(&[2, 2], 0.3));
        let c = tape.constant(seq(&[2, 2], 0.5));
        let loss = a.mul(c).sum();
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(c).is_none());
    }
}
