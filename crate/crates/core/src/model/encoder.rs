//! Post-layer-norm transformer encoder: forward pass with cached activations
//! and a hand-derived backward pass.

use ndarray::{
    s, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Ix1, Ix2,
};

use super::ops::{
    dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    masked_softmax_row, LayerNormCache,
};
use super::params::{Gradients, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::Result;

/// Parameter tensors widened to f64, indexed like the source [`ParamSet`].
pub(crate) struct Weights {
    pub t: Vec<ArrayD<f64>>,
}

impl Weights {
    pub fn from_params(params: &ParamSet) -> Self {
        let t = params
            .tensors()
            .iter()
            .map(|t| {
                ArrayD::from_shape_vec(t.shape.clone(), t.data.iter().map(|&x| x as f64).collect())
                    .expect("tensor data matches shape")
            })
            .collect();
        Self { t }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            t: self.t.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn m(&self, i: usize) -> ArrayView2<'_, f64> {
        self.t[i]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor")
    }

    pub fn v(&self, i: usize) -> ArrayView1<'_, f64> {
        self.t[i]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor")
    }

    pub fn m_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        self.t[i]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor")
    }

    pub fn v_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        self.t[i]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor")
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.t.iter_mut().zip(&other.t) {
            *a += b;
        }
    }

    pub fn into_gradients(self, params: &ParamSet) -> Gradients {
        Gradients {
            names: params.tensors().iter().map(|t| t.name.clone()).collect(),
            data: self
                .t
                .into_iter()
                .map(|a| a.into_iter().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIndex {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    f1_w: usize,
    f1_b: usize,
    f2_w: usize,
    f2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIndex {
    pub word: usize,
    pos: usize,
    typ: usize,
    ln_g: usize,
    ln_b: usize,
    layers: Vec<LayerIndex>,
}

impl EncoderIndex {
    pub fn resolve(params: &ParamSet, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let f = |s: &str| params.index_of(&format!("encoder.{i}.{s}"));
                Ok(LayerIndex {
                    q_w: f("attention.query.weight")?,
                    q_b: f("attention.query.bias")?,
                    k_w: f("attention.key.weight")?,
                    k_b: f("attention.key.bias")?,
                    v_w: f("attention.value.weight")?,
                    v_b: f("attention.value.bias")?,
                    o_w: f("attention.output.weight")?,
                    o_b: f("attention.output.bias")?,
                    ln1_g: f("attention.norm.gamma")?,
                    ln1_b: f("attention.norm.beta")?,
                    f1_w: f("ffn.intermediate.weight")?,
                    f1_b: f("ffn.intermediate.bias")?,
                    f2_w: f("ffn.output.weight")?,
                    f2_b: f("ffn.output.bias")?,
                    ln2_g: f("ffn.norm.gamma")?,
                    ln2_b: f("ffn.norm.beta")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            word: params.index_of("embeddings.word")?,
            pos: params.index_of("embeddings.position")?,
            typ: params.index_of("embeddings.token_type")?,
            ln_g: params.index_of("embeddings.norm.gamma")?,
            ln_b: params.index_of("embeddings.norm.beta")?,
            layers,
        })
    }
}

/// Dropout source for one sequence; `None` disables dropout.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        (self.p > 0.0).then(|| dropout_mask(rows, cols, self.p, self.rng))
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

pub(crate) struct EncoderCache {
    ids: Vec<u32>,
    types: Vec<u8>,
    emb_ln: LayerNormCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    /// Attention probabilities, `[layer][head]` of shape `(n, n)`.
    pub fn attention_probs(&self) -> Vec<Vec<Array2<f64>>> {
        self.layers.iter().map(|l| l.probs.clone()).collect()
    }
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Run the encoder on one sequence. `valid[j]` marks keys that may be attended.
pub(crate) fn encoder_forward(
    w: &Weights,
    idx: &EncoderIndex,
    cfg: &ModelConfig,
    ids: &[u32],
    types: &[u8],
    valid: &[bool],
    mut dropout: Option<Dropout<'_>>,
) -> (Array2<f64>, EncoderCache) {
    let n = ids.len();
    let d = cfg.hidden_dim;
    let word = w.m(idx.word);
    let pos = w.m(idx.pos);
    let typ = w.m(idx.typ);
    let mut x = Array2::zeros((n, d));
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &word.row(ids[t] as usize);
        row += &pos.row(t);
        row += &typ.row(types[t] as usize);
    }
    let (mut h, emb_ln) = layer_norm(&x, w.v(idx.ln_g), w.v(idx.ln_b), cfg.layer_norm_eps);
    let emb_drop = dropout.as_mut().and_then(|dr| dr.mask(n, d));
    apply_mask(&mut h, &emb_drop);

    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(idx.layers.len());
    for li in &idx.layers {
        let input = h;
        let q = linear(&input, w.m(li.q_w), w.v(li.q_b));
        let k = linear(&input, w.m(li.k_w), w.v(li.k_b));
        let v = linear(&input, w.m(li.v_w), w.v(li.v_b));
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let mut p = Array2::zeros((n, n));
            for (r, mut prow) in p.rows_mut().into_iter().enumerate() {
                prow.assign(&masked_softmax_row(scores.row(r), valid));
            }
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mut a = linear(&ctx, w.m(li.o_w), w.v(li.o_b));
        let attn_drop = dropout.as_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut a, &attn_drop);
        let x1 = &input + &a;
        let (h1, ln1) = layer_norm(&x1, w.v(li.ln1_g), w.v(li.ln1_b), cfg.layer_norm_eps);

        let pre_act = linear(&h1, w.m(li.f1_w), w.v(li.f1_b));
        let act = pre_act.mapv(gelu);
        let mut f = linear(&act, w.m(li.f2_w), w.v(li.f2_b));
        let ffn_drop = dropout.as_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut f, &ffn_drop);
        let x2 = &h1 + &f;
        let (h2, ln2) = layer_norm(&x2, w.v(li.ln2_g), w.v(li.ln2_b), cfg.layer_norm_eps);
        layers.push(LayerCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln1,
            h1,
            pre_act,
            act,
            ffn_drop,
            ln2,
        });
        h = h2;
    }
    (
        h,
        EncoderCache {
            ids: ids.to_vec(),
            types: types.to_vec(),
            emb_ln,
            emb_drop,
            layers,
        },
    )
}

/// Backpropagate `dh` (gradient w.r.t. the final hidden states) into `g`.
pub(crate) fn encoder_backward(
    w: &Weights,
    idx: &EncoderIndex,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    mut dh: Array2<f64>,
    g: &mut Weights,
) {
    let dh_dim = cfg.head_dim();
    let scale = 1.0 / (dh_dim as f64).sqrt();
    for (li, lc) in idx.layers.iter().zip(&cache.layers).rev() {
        let (dg, db) = two_mut(g, li.ln2_g, li.ln2_b);
        let dx2 = layer_norm_backward(&dh, w.v(li.ln2_g), &lc.ln2, dg, db);
        let mut df = dx2.clone();
        apply_mask(&mut df, &lc.ffn_drop);
        let (dw, db) = mat_vec_mut(g, li.f2_w, li.f2_b);
        let dact = linear_backward(&lc.act, w.m(li.f2_w), &df, dw, db);
        let dpre = &dact * &lc.pre_act.mapv(gelu_grad);
        let (dw, db) = mat_vec_mut(g, li.f1_w, li.f1_b);
        let dh1 = dx2 + linear_backward(&lc.h1, w.m(li.f1_w), &dpre, dw, db);

        let (dg, db) = two_mut(g, li.ln1_g, li.ln1_b);
        let dx1 = layer_norm_backward(&dh1, w.v(li.ln1_g), &lc.ln1, dg, db);
        let mut da = dx1.clone();
        apply_mask(&mut da, &lc.attn_drop);
        let (dw, db) = mat_vec_mut(g, li.o_w, li.o_b);
        let dctx = linear_backward(&lc.ctx, w.m(li.o_w), &da, dw, db);

        let n = dctx.nrows();
        let d = dctx.ncols();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for (hh, p) in lc.probs.iter().enumerate() {
            let cols = s![.., hh * dh_dim..(hh + 1) * dh_dim];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (&dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        let mut dinput = dx1;
        let (dw, db) = mat_vec_mut(g, li.q_w, li.q_b);
        dinput += &linear_backward(&lc.input, w.m(li.q_w), &dq, dw, db);
        let (dw, db) = mat_vec_mut(g, li.k_w, li.k_b);
        dinput += &linear_backward(&lc.input, w.m(li.k_w), &dk, dw, db);
        let (dw, db) = mat_vec_mut(g, li.v_w, li.v_b);
        dinput += &linear_backward(&lc.input, w.m(li.v_w), &dv, dw, db);
        dh = dinput;
    }

    apply_mask(&mut dh, &cache.emb_drop);
    let (dg, db) = two_mut(g, idx.ln_g, idx.ln_b);
    let dx = layer_norm_backward(&dh, w.v(idx.ln_g), &cache.emb_ln, dg, db);
    for (t, row) in dx.rows().into_iter().enumerate() {
        let mut wr = g.m_mut(idx.word);
        let mut r = wr.row_mut(cache.ids[t] as usize);
        r += &row;
        let mut pr = g.m_mut(idx.pos);
        let mut r = pr.row_mut(t);
        r += &row;
        let mut tr = g.m_mut(idx.typ);
        let mut r = tr.row_mut(cache.types[t] as usize);
        r += &row;
    }
}

/// Disjoint mutable views of a weight matrix and its bias.
pub(crate) fn mat_vec_mut(
    g: &mut Weights,
    wi: usize,
    bi: usize,
) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (a, b) = pair_mut(&mut g.t, wi, bi);
    (
        a.view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor"),
        b.view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor"),
    )
}

pub(crate) fn two_mut(
    g: &mut Weights,
    ai: usize,
    bi: usize,
) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (a, b) = pair_mut(&mut g.t, ai, bi);
    (
        a.view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor"),
        b.view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor"),
    )
}

fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Number of leading positions to run: the attended prefix when the mask is
/// a prefix of ones (padded keys never influence attended outputs), else all.
pub(crate) fn effective_len(mask: &[u8]) -> usize {
    let attended = mask.iter().take_while(|&&m| m == 1).count();
    if mask[attended..].iter().all(|&m| m == 0) {
        attended
    } else {
        mask.len()
    }
}

pub(crate) fn rows(h: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    h.select(Axis(0), positions)
}

pub(crate) fn zeros_hidden(n: usize, d: usize) -> Array2<f64> {
    Array2::zeros((n, d))
}
