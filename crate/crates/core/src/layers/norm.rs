//! Batch normalization over `[B, C, ...]` and layer normalization over the
//! last axis.

use crate::error::{Error, Result};
use crate::params::{BufferId, Ctx, Mode, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Per-channel batch statistics from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (used for the running estimate).
    pub var: Vec<T>,
}

fn channel_layout(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "{op} expects [B, C, ...], got {shape:?}"
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

impl<T: Element> Tape<T> {
    /// Training-mode batch norm: normalizes each channel with the batch mean
    /// and biased variance, then applies `gamma * x_hat + beta`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, s) = channel_layout(self.shape(x), "batchnorm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batchnorm affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let n = b * s;
        if n < 2 {
            return Err(Error::arg(format!(
                "batchnorm in train mode needs at least 2 values per channel, input {:?} has {n}",
                self.shape(x)
            )));
        }
        let xv = self.value(x).data();
        let nf = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let plane = &xv[(bi * c + ch) * s..][..s];
                mean[ch] += plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for bi in 0..b {
            for ch in 0..c {
                let plane = &xv[(bi * c + ch) * s..][..s];
                let m = mean[ch];
                var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut x_hat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|&v| v * nf / T::of((n - 1) as f64))
            .collect();
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let out = Tensor::new(self.shape(x), out)?;
        let v = self.record_fn(
            "batchnorm_train",
            &[x, gamma, beta],
            out,
            move |ins, _, g, needs| {
                let gv = g.data();
                let gamma = ins[1].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * s;
                        for i in off..off + s {
                            sum_g[ch] += gv[i];
                            sum_gh[ch] += gv[i] * x_hat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); gv.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * s;
                            let k = gamma[ch] * inv_std[ch] / nf;
                            for i in off..off + s {
                                gx[i] = k * (nf * gv[i] - sum_g[ch] - x_hat[i] * sum_gh[ch]);
                            }
                        }
                    }
                    Tensor::new(ins[0].shape(), gx).expect("input shape")
                });
                Ok(vec![
                    gx,
                    needs[1].then(|| Tensor::new(&[c], sum_gh).expect("[c]")),
                    needs[2].then(|| Tensor::new(&[c], sum_g).expect("[c]")),
                ])
            },
        )?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, s) = channel_layout(self.shape(x), "batchnorm")?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::dim(
                "batchnorm running statistics do not match channels",
            ));
        }
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let mean = running_mean.data().to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    out[i] = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.record_fn(
            "batchnorm_eval",
            &[x, gamma, beta],
            out,
            move |ins, _, g, needs| {
                let gv = g.data();
                let xv = ins[0].data();
                let gamma = ins[1].data();
                let mut gx = needs[0].then(|| vec![T::zero(); gv.len()]);
                let mut g_gamma = vec![T::zero(); c];
                let mut g_beta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * s;
                        for i in off..off + s {
                            let h = (xv[i] - mean[ch]) * inv_std[ch];
                            g_gamma[ch] += gv[i] * h;
                            g_beta[ch] += gv[i];
                            if let Some(gx) = gx.as_mut() {
                                gx[i] = gv[i] * gamma[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                Ok(vec![
                    gx.map(|d| Tensor::new(ins[0].shape(), d).expect("input shape")),
                    needs[1].then(|| Tensor::new(&[c], g_gamma).expect("[c]")),
                    needs[2].then(|| Tensor::new(&[c], g_beta).expect("[c]")),
                ])
            },
        )
    }

    /// Normalizes over the last axis, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm params must be [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let df = T::of(d as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut x_hat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                x_hat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.record_fn(
            "layer_norm",
            &[x, gamma, beta],
            out,
            move |ins, _, g, needs| {
                let gv = g.data();
                let gamma = ins[1].data();
                let mut gx = needs[0].then(|| vec![T::zero(); gv.len()]);
                let mut g_gamma = vec![T::zero(); d];
                let mut g_beta = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &gv[r * d..(r + 1) * d];
                    let hrow = &x_hat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        g_gamma[j] += grow[j] * hrow[j];
                        g_beta[j] += grow[j];
                        let dh = grow[j] * gamma[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let k = inv_std[r] / df;
                        for j in 0..d {
                            let dh = grow[j] * gamma[j];
                            gx[r * d + j] = k * (df * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
                Ok(vec![
                    gx.map(|v| Tensor::new(ins[0].shape(), v).expect("input shape")),
                    needs[1].then(|| Tensor::new(&[d], g_gamma).expect("[d]")),
                    needs[2].then(|| Tensor::new(&[d], g_beta).expect("[d]")),
                ])
            },
        )
    }
}

/// Batch norm affine parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm3d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm3d {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    /// Train mode queues updated running statistics on `ctx.updates`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batchnorm_train(x, g, b, self.eps)?;
                let m = T::of(ctx.bn_momentum.unwrap_or(self.momentum));
                let blend = |old: &Tensor<T>, new: &[T]| {
                    Tensor::from_fn(old.shape(), |i| (T::one() - m) * old.data()[i] + m * new[i])
                };
                let rm = blend(ctx.store.buffer(self.running_mean), &stats.mean);
                let rv = blend(ctx.store.buffer(self.running_var), &stats.var);
                ctx.updates.push((self.running_mean, rm));
                ctx.updates.push((self.running_var, rv));
                Ok(y)
            }
            Mode::Eval => ctx.tape.batchnorm_eval(
                x,
                g,
                b,
                ctx.store.buffer(self.running_mean),
                ctx.store.buffer(self.running_var),
                self.eps,
            ),
        }
    }
}

/// Layer norm affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(t: &Tensor<f64>, c: usize) -> Vec<(f64, f64)> {
        let s: usize = t.shape()[2..].iter().product();
        let b = t.shape()[0];
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..b)
                    .flat_map(|bi| t.data()[(bi * c + ch) * s..][..s].to_vec())
                    .collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2, 2], |i| {
            ((i * 37) % 11) as f64 * 0.7 + 3.0
        }));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, _) = tape.batchnorm_train(x, g, b, BN_EPS).unwrap();
        for (m, v) in channel_moments(tape.value(y), 3) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn affine_applied_last() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 1, 2, 2, 2], |i| ((i * 13) % 7) as f64));
        let g1 = tape.constant(Tensor::ones(&[1]));
        let b0 = tape.constant(Tensor::zeros(&[1]));
        let (xn, _) = tape.batchnorm_train(x, g1, b0, BN_EPS).unwrap();
        let g = tape.constant(Tensor::full(&[1], 2.0));
        let b = tape.constant(Tensor::full(&[1], 3.0));
        let (y, _) = tape.batchnorm_train(xn, g, b, BN_EPS).unwrap();
        let (m, v) = channel_moments(tape.value(y), 1)[0];
        assert!((m - 3.0).abs() < 1e-6);
        assert!((v.sqrt() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn eval_mode_identity_stats() {
        let mut tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| i as f64 - 4.0);
        let x = tape.constant(xt.clone());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .batchnorm_eval(x, g, b, &Tensor::zeros(&[2]), &Tensor::ones(&[2]), 0.0)
            .unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn single_value_per_channel_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 1]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batchnorm_train(x, g, b, BN_EPS),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1., 3., 5., 5.]).unwrap());
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        let yv = tape.value(y).data();
        // Row [1, 3]: mean 2, var 1 -> [-1, 1] / sqrt(1 + eps).
        let expect = 1.0 / (1.0f64 + LN_EPS).sqrt();
        assert!((yv[0] + expect).abs() < 1e-12 && (yv[1] - expect).abs() < 1e-12);
        assert_eq!(&yv[2..], &[0.0, 0.0]);

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(Tensor::from_f64(&[2], &[0.25, -4.0]).unwrap());
        let y0 = tape.layer_norm(x, g0, beta, LN_EPS).unwrap();
        assert_eq!(tape.value(y0).data(), &[0.25, -4.0, 0.25, -4.0]);
    }
}
