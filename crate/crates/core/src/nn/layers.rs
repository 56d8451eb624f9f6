//! Building blocks shared by the model modules. Every `init_*` registers the
//! parameters that the matching forward helper reads under the same prefix.

use std::rc::Rc;

use super::params::{Bound, Initializer, ParamStore};
use crate::autograd::{SparseRows, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear(
    store: &mut ParamStore,
    init: &Initializer,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let name = format!("{prefix}.w");
    let w = init.normal(&name, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
    store.insert(name, w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn linear<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(b.get(&format!("{prefix}.w")))
        .add_row(b.get(&format!("{prefix}.b")))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn layer_norm<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.layer_norm(
        b.get(&format!("{prefix}.gain")),
        b.get(&format!("{prefix}.bias")),
        LN_EPS,
    )
}

pub fn init_mlp(
    store: &mut ParamStore,
    init: &Initializer,
    prefix: &str,
    dim: usize,
    hidden: usize,
    out: usize,
) {
    init_linear(store, init, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(store, init, &format!("{prefix}.fc2"), hidden, out);
}

pub fn mlp<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let h = linear(b, &format!("{prefix}.fc1"), x).gelu();
    linear(b, &format!("{prefix}.fc2"), h)
}

pub fn init_attention(store: &mut ParamStore, init: &Initializer, prefix: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, init, &format!("{prefix}.{part}"), dim, dim);
    }
}

/// Multi-head attention with input projections for queries, keys, values and
/// an output projection.
pub fn attention<'t>(
    b: &Bound<'t>,
    prefix: &str,
    query: Var<'t>,
    key: Var<'t>,
    value: Var<'t>,
    heads: usize,
) -> Var<'t> {
    let q = linear(b, &format!("{prefix}.q"), query);
    let k = linear(b, &format!("{prefix}.k"), key);
    let v = linear(b, &format!("{prefix}.v"), value);
    linear(b, &format!("{prefix}.o"), Var::attention(q, k, v, heads))
}

/// Zeroes the output projections of an attention block and an MLP so the
/// surrounding residual branch becomes the identity.
pub fn zero_residual_outputs(store: &mut ParamStore, prefixes: &[String]) {
    for p in prefixes {
        for suffix in ["w", "b"] {
            if let Some(t) = store.get_mut(&format!("{p}.{suffix}")) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Nine shift maps over a row-major `h × w` grid, zero padded, in
/// `(dr, dc)` row-major order from `(-1, -1)` to `(1, 1)`.
pub fn conv_shifts(h: usize, w: usize) -> Vec<Rc<SparseRows>> {
    let mut maps = Vec::with_capacity(9);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let mut m = SparseRows::new(h * w);
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                        m.push_row([((rr * w as i64 + cc) as usize, 1.0)]);
                    } else {
                        m.push_row([]);
                    }
                }
            }
            maps.push(Rc::new(m));
        }
    }
    maps
}

pub fn init_conv3x3(
    store: &mut ParamStore,
    init: &Initializer,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) {
    init_linear(store, init, prefix, 9 * c_in, c_out);
}

/// 3×3 same-padding convolution of a channel-last `[h·w, c_in]` map.
pub fn conv3x3<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>, shifts: &[Rc<SparseRows>]) -> Var<'t> {
    let cols: Vec<Var<'t>> = shifts.iter().map(|m| x.gather(m)).collect();
    linear(b, prefix, Var::concat_cols(&cols))
}

/// Bilinear resize between row-major grids (half-pixel centers, edge clamp).
pub fn bilinear_resize(src: (usize, usize), dst: (usize, usize)) -> SparseRows {
    let (sh, sw) = src;
    let (dh, dw) = dst;
    let axis = |d: usize, s_len: usize, d_len: usize| -> [(usize, f64); 2] {
        let pos =
            ((d as f64 + 0.5) * s_len as f64 / d_len as f64 - 0.5).clamp(0.0, (s_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s_len - 1);
        let t = pos - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut m = SparseRows::new(sh * sw);
    for r in 0..dh {
        let ry = axis(r, sh, dh);
        for c in 0..dw {
            let cx = axis(c, sw, dw);
            let mut entries = Vec::with_capacity(4);
            for (sr, wr) in ry {
                for (sc, wc) in cx {
                    let w = wr * wc;
                    if w != 0.0 {
                        entries.push((sr * sw + sc, w));
                    }
                }
            }
            m.push_row(entries);
        }
    }
    m
}

/// Fixed 2-D sinusoidal embedding `[rows·cols, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "sinusoidal_2d needs dim divisible by 4");
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(rows * cols * dim);
    let freq = |k: usize| 1.0 / 10_000f64.powf(k as f64 / quarter as f64);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                for k in 0..quarter {
                    data.push((pos * freq(k)).sin());
                }
                for k in 0..quarter {
                    data.push((pos * freq(k)).cos());
                }
            }
        }
    }
    Tensor::new(&[rows * cols, dim], data)
}

/// Row map averaging consecutive groups of `group` rows.
pub fn group_mean(groups: usize, group: usize) -> SparseRows {
    let mut m = SparseRows::new(groups * group);
    let w = 1.0 / group as f64;
    for g in 0..groups {
        m.push_row((0..group).map(|j| (g * group + j, w)));
    }
    m
}
