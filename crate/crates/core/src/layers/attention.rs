//! Linear projections, softmax and the Transformer encoder stack.

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

use super::norm::LayerNorm;

impl<T: Element> Tape<T> {
    /// `x[*, in] @ w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::dim(format!(
                "linear: input {xs:?} does not match weight {ws:?}"
            )));
        }
        let y = if xs.len() == 1 {
            let x2 = self.reshape(x, &[1, xs[0]])?;
            let y2 = self.matmul(x2, w)?;
            self.reshape(y2, &[ws[1]])?
        } else {
            self.matmul(x, w)?
        };
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("softmax on a scalar"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.record_fn("softmax", &[x], out, move |_, y, g, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// `Softmax(Q K^T / sqrt(d_k)) V` over `[*, n, d_k]` operands.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.attention_with_weights(q, k, v)?.0)
    }

    /// Like [`Tape::scaled_dot_attention`] but also returns the attention
    /// weight matrix `[*, n, n]`.
    pub fn attention_with_weights(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let qs = self.shape(q).to_vec();
        if qs.len() < 2 {
            return Err(Error::dim(format!(
                "attention operands need rank >= 2, got {qs:?}"
            )));
        }
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::dim(format!(
                "attention operands differ: {qs:?}, {:?}, {:?}",
                self.shape(k),
                self.shape(v)
            )));
        }
        let dk = qs[qs.len() - 1];
        if dk == 0 {
            return Err(Error::arg("attention with d_k = 0"));
        }
        let kt = self.transpose_last(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
        let weights = self.softmax(scaled)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Dense projection `[in] -> [out]`, weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            init.xavier_uniform(&[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Multi-head self-attention with biased q/k/v/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: embed dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim, true)
    }

    /// `[N, n, d] -> [N, n, d]`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let [batch, n, d] = shape[..] else {
            return Err(Error::dim(format!(
                "attention expects [N, n, d], got {shape:?}"
            )));
        };
        if d != self.dim {
            return Err(Error::dim(format!(
                "attention built for dim {}, got input {shape:?}",
                self.dim
            )));
        }
        let h = self.heads;
        let dk = d / h;
        let split = |ctx: &mut Ctx<'_, T>, lin: &Linear| -> Result<Var> {
            let p = lin.forward(ctx, x)?;
            let p = ctx.tape.reshape(p, &[batch, n, h, dk])?;
            let p = ctx.tape.permute_axes(p, &[0, 2, 1, 3])?;
            ctx.tape.reshape(p, &[batch * h, n, dk])
        };
        let q = split(ctx, &self.q)?;
        let k = split(ctx, &self.k)?;
        let v = split(ctx, &self.v)?;
        let a = ctx.tape.scaled_dot_attention(q, k, v)?;
        let a = ctx.tape.reshape(a, &[batch, h, n, dk])?;
        let a = ctx.tape.permute_axes(a, &[0, 2, 1, 3])?;
        let a = ctx.tape.reshape(a, &[batch, n, d])?;
        self.out.forward(ctx, a)
    }
}

/// Pre-norm encoder layer: `x + MSA(LN(x))`, then `x + FFN(LN(x))` with
/// `FFN = Linear(d, r*d) -> GELU -> Linear(r*d, d)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(
                store,
                init,
                &format!("{name}.ff1"),
                dim,
                ffn_ratio * dim,
                true,
            ),
            ff2: Linear::new(
                store,
                init,
                &format!("{name}.ff2"),
                ffn_ratio * dim,
                dim,
                true,
            ),
        })
    }

    pub fn num_params(dim: usize, ffn_ratio: usize) -> usize {
        2 * LayerNorm::num_params(dim)
            + MultiHeadAttention::num_params(dim)
            + Linear::num_params(dim, ffn_ratio * dim, true)
            + Linear::num_params(ffn_ratio * dim, dim, true)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h)?;
        let x = ctx.tape.add(x, h)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.ff1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let h = self.ff2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}
