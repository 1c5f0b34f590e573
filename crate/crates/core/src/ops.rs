//! Differentiable primitives recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{check_permutation, gemm, inverse_permutation, numel, Element, Mat, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

/// Backward rule backed by a closure.
pub(crate) struct FnRule<F> {
    name: &'static str,
    f: F,
}

impl<T, F> Backward<T> for FnRule<F>
where
    T: Element,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Grads<T> + Send + Sync,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Grads<T> {
        (self.f)(inputs, output, grad, needs)
    }
}

impl<T: Element> Tape<T> {
    pub(crate) fn record_fn<F>(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        f: F,
    ) -> Result<Var>
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Grads<T> + Send + Sync + 'static,
    {
        self.record(op, inputs, output, Box::new(FnRule { name: op, f }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record_fn("add", &[a, b], out, |_, _, g, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record_fn("sub", &[a, b], out, |_, _, g, _| {
            Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record_fn("mul", &[a, b], out, |ins, _, g, needs| {
            let ga = needs[0]
                .then(|| g.zip_map(ins[1], |g, y| g * y))
                .transpose()?;
            let gb = needs[1]
                .then(|| g.zip_map(ins[0], |g, x| g * x))
                .transpose()?;
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record_fn("scale", &[a], out, move |_, _, g, _| {
            Ok(vec![Some(g.map(|v| v * s))])
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.record_fn("add_scalar", &[a], out, |_, _, g, _| {
            Ok(vec![Some(g.clone())])
        })
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s, broadcasting over
    /// the leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = last_extent_match(self.value(x), self.value(b), "add_bias")?;
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.record_fn("add_bias", &[x, b], out, move |ins, _, g, needs| {
            let gb = needs[1].then(|| {
                reduce_rows(g, n)
                    .reshape(ins[1].shape())
                    .expect("bias shape")
            });
            Ok(vec![Some(g.clone()), gb])
        })
    }

    /// `x * w` with the same suffix broadcasting as [`Tape::add_bias`].
    pub fn mul_bias(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = last_extent_match(self.value(x), self.value(w), "mul_bias")?;
        let wv = self.value(w).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &s) in row.iter_mut().zip(wv) {
                *o *= s;
            }
        }
        self.record_fn("mul_bias", &[x, w], out, move |ins, _, g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(n) {
                    for (o, &s) in row.iter_mut().zip(ins[1].data()) {
                        *o *= s;
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for (gr, xr) in g.data().chunks(n).zip(ins[0].data().chunks(n)) {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(gr).zip(xr) {
                        *a += gv * xv;
                    }
                }
                Tensor::new(ins[1].shape(), acc).expect("length n")
            });
            Ok(vec![gx, gw])
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record_fn("sum", &[a], out, |ins, _, g, _| {
            Ok(vec![Some(Tensor::full(ins[0].shape(), g.data()[0]))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record_fn("reshape", &[a], out, |ins, _, g, _| {
            Ok(vec![Some(g.reshape(ins[0].shape())?)])
        })
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute_axes(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        check_permutation(perm, self.value(a).rank())?;
        let out = self.value(a).permute(perm)?;
        let inv = inverse_permutation(perm);
        self.record_fn("permute_axes", &[a], out, move |_, _, g, _| {
            Ok(vec![Some(g.permute(&inv)?)])
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::arg("transpose_last needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute_axes(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        self.record_fn("concat", parts, out, move |_, _, g, needs| {
            let pieces = g.split(axis, &sizes)?;
            Ok(pieces
                .into_iter()
                .zip(needs)
                .map(|(p, &n)| n.then_some(p))
                .collect())
        })
    }

    /// Sub-range along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        self.record_fn("narrow", &[a], out, move |ins, _, g, _| {
            let shape = ins[0].shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut full = Tensor::zeros(shape);
            let ext = shape[axis];
            let gd = g.data();
            let fd = full.data_mut();
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let src = o * len * inner;
                fd[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            Ok(vec![Some(full)])
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.record_fn("relu", &[a], out, |ins, _, g, _| {
            Ok(vec![Some(g.zip_map(ins[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_value);
        self.record_fn("gelu", &[a], out, |ins, _, g, _| {
            Ok(vec![Some(g.zip_map(ins[0], |g, x| g * gelu_slope(x))?)])
        })
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.record_fn("abs", &[a], out, |ins, _, g, _| {
            Ok(vec![Some(g.zip_map(ins[0], |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    /// Batched matrix product `[*, m, k] x [*, k, n] -> [*, m, n]` with
    /// broadcasting over the batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let out = plan.forward(self.value(a), self.value(b));
        self.record_fn("matmul", &[a, b], out, move |ins, _, g, needs| {
            Ok(plan.backward(ins[0], ins[1], g, needs))
        })
    }
}

/// Number of elements of `b` when its shape is a suffix of `x`'s.
fn last_extent_match<T: Element>(x: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<usize> {
    let (xs, bs) = (x.shape(), b.shape());
    if bs.is_empty() || bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
        return Err(Error::dim(format!(
            "{op}: {bs:?} is not a trailing sub-shape of {xs:?}"
        )));
    }
    Ok(b.len())
}

/// Column sums of a `[rows, n]` view.
fn reduce_rows<T: Element>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(&[n], acc).expect("length n")
}

const GELU_C: f64 = 0.044_715;

fn gelu_value<T: Element>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_slope<T: Element>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Precomputed offsets for a broadcast batched matmul.
#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a offset, b offset) in matrices for every output batch index.
    pairs: Vec<(usize, usize)>,
    a_batch: usize,
    b_batch: usize,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {a:?} x {b:?}"
            )));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim(format!(
                    "matmul batch extents not broadcastable: {a:?} x {b:?}"
                )));
            }
            batch.push(x.max(y));
        }
        let sa = crate::tensor::strides(&pa);
        let sb = crate::tensor::strides(&pb);
        let total = numel(&batch);
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut oa = 0;
            let mut ob = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    oa += idx[d] * sa[d];
                }
                if pb[d] != 1 {
                    ob += idx[d] * sb[d];
                }
            }
            pairs.push((oa, ob));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            pairs,
            a_batch: numel(&pa),
            b_batch: numel(&pb),
        })
    }

    /// True when `b` is a single shared matrix and `a` is not broadcast, so
    /// the whole product folds into one GEMM.
    fn folds(&self) -> bool {
        self.b_batch == 1 && self.a_batch == self.pairs.len()
    }

    fn forward<T: Element>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![T::zero(); numel(&self.out_shape)];
        if self.folds() {
            let rows = self.pairs.len() * m;
            gemm(
                Mat::new(a.data(), rows, k),
                Mat::new(b.data(), k, n),
                T::zero(),
                &mut out,
            );
        } else {
            for (c, &(oa, ob)) in out.chunks_mut(m * n).zip(&self.pairs) {
                gemm(
                    Mat::new(&a.data()[oa * m * k..(oa + 1) * m * k], m, k),
                    Mat::new(&b.data()[ob * k * n..(ob + 1) * k * n], k, n),
                    T::zero(),
                    c,
                );
            }
        }
        Tensor::new(&self.out_shape, out).expect("matmul shape")
    }

    fn backward<T: Element>(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = needs[0].then(|| vec![T::zero(); a.len()]);
        let mut gb = needs[1].then(|| vec![T::zero(); b.len()]);
        if self.folds() {
            let rows = self.pairs.len() * m;
            if let Some(ga) = ga.as_mut() {
                gemm(
                    Mat::new(g.data(), rows, n),
                    Mat::new(b.data(), k, n).t(),
                    T::zero(),
                    ga,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm(
                    Mat::new(a.data(), rows, k).t(),
                    Mat::new(g.data(), rows, n),
                    T::zero(),
                    gb,
                );
            }
        } else {
            for (gc, &(oa, ob)) in g.data().chunks(m * n).zip(&self.pairs) {
                let am = &a.data()[oa * m * k..(oa + 1) * m * k];
                let bm = &b.data()[ob * k * n..(ob + 1) * k * n];
                if let Some(ga) = ga.as_mut() {
                    gemm(
                        Mat::new(gc, m, n),
                        Mat::new(bm, k, n).t(),
                        T::one(),
                        &mut ga[oa * m * k..(oa + 1) * m * k],
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(
                        Mat::new(am, m, k).t(),
                        Mat::new(gc, m, n),
                        T::one(),
                        &mut gb[ob * k * n..(ob + 1) * k * n],
                    );
                }
            }
        }
        vec![
            ga.map(|d| Tensor::new(a.shape(), d).expect("shape of a")),
            gb.map(|d| Tensor::new(b.shape(), d).expect("shape of b")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let x = tape.constant(t(&[1, 2], &[1., 2.]));
        let y = tape.constant(t(&[2, 1], &[3., 4.]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        match tape.matmul(a, b) {
            Err(Error::Dimension(msg)) => {
                assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}")
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[3, 3, 2], |i| (i % 5) as f64));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 2]);
        // Spot check against a direct loop.
        let (av, bv, cv) = (tape.value(a), tape.value(b), tape.value(c));
        for p in 0..2 {
            for q in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let expect: f64 = (0..3)
                            .map(|kk| av.data()[p * 6 + i * 3 + kk] * bv.data()[q * 6 + kk * 2 + j])
                            .sum();
                        assert_eq!(cv.data()[((p * 3 + q) * 2 + i) * 2 + j], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_identity_single_part() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = tape.concat(&[x], 1).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn channel_concat_shape() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[32, 24, 28, 24]));
        let b = tape.constant(Tensor::zeros(&[8, 24, 28, 24]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[40, 24, 28, 24]);
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let yy = tape.relu(y).unwrap();
        assert_eq!(tape.value(yy), tape.value(y));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite {
                op: "scale",
                index: 0
            })
        ));
    }
}
