//! 3D convolution (3x3x3, padding 1, stride 1), 2x max pooling and global
//! average pooling over `[B, C, D, H, W]` volumes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Element, Mat, Tensor};

const K: usize = 3;
const K3: usize = K * K * K;

fn volume_dims(shape: &[usize], op: &str) -> Result<[usize; 5]> {
    match *shape {
        [b, c, d, h, w] => Ok([b, c, d, h, w]),
        _ => Err(Error::dim(format!(
            "{op} expects [B, C, D, H, W], got {shape:?}"
        ))),
    }
}

/// Unfolds one `[C, D, H, W]` volume into `[C * 27, D * H * W]` columns.
fn im2col<T: Element>(x: &[T], c: usize, dims: [usize; 3], cols: &mut [T]) {
    let [dd, hh, ww] = dims;
    let s = dd * hh * ww;
    for ci in 0..c {
        let xc = &x[ci * s..(ci + 1) * s];
        for kd in 0..K {
            for kh in 0..K {
                for kw in 0..K {
                    let row = ((ci * K + kd) * K + kh) * K + kw;
                    let dst = &mut cols[row * s..(row + 1) * s];
                    for d in 0..dd {
                        let sd = d + kd;
                        for h in 0..hh {
                            let sh = h + kh;
                            let o = (d * hh + h) * ww;
                            let out = &mut dst[o..o + ww];
                            if sd == 0 || sd > dd || sh == 0 || sh > hh {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &xc[((sd - 1) * hh + (sh - 1)) * ww..][..ww];
                            match kw {
                                0 => {
                                    out[0] = T::zero();
                                    out[1..].copy_from_slice(&src[..ww - 1]);
                                }
                                1 => out.copy_from_slice(src),
                                _ => {
                                    out[..ww - 1].copy_from_slice(&src[1..]);
                                    out[ww - 1] = T::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the volume.
fn col2im<T: Element>(cols: &[T], c: usize, dims: [usize; 3], dx: &mut [T]) {
    let [dd, hh, ww] = dims;
    let s = dd * hh * ww;
    for ci in 0..c {
        let xc = &mut dx[ci * s..(ci + 1) * s];
        for kd in 0..K {
            for kh in 0..K {
                for kw in 0..K {
                    let row = ((ci * K + kd) * K + kh) * K + kw;
                    let src_row = &cols[row * s..(row + 1) * s];
                    for d in 0..dd {
                        let sd = d + kd;
                        if sd == 0 || sd > dd {
                            continue;
                        }
                        for h in 0..hh {
                            let sh = h + kh;
                            if sh == 0 || sh > hh {
                                continue;
                            }
                            let o = (d * hh + h) * ww;
                            let g = &src_row[o..o + ww];
                            let dst = &mut xc[((sd - 1) * hh + (sh - 1)) * ww..][..ww];
                            match kw {
                                0 => {
                                    for (a, &b) in dst[..ww - 1].iter_mut().zip(&g[1..]) {
                                        *a += b;
                                    }
                                }
                                1 => {
                                    for (a, &b) in dst.iter_mut().zip(g) {
                                        *a += b;
                                    }
                                }
                                _ => {
                                    for (a, &b) in dst[1..].iter_mut().zip(&g[..ww - 1]) {
                                        *a += b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation with a `[C_out, C_in, 3, 3, 3]` kernel, zero
    /// padding 1 and stride 1; spatial extents are preserved.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, ci, dd, hh, ww] = volume_dims(self.shape(x), "conv3d")?;
        let wshape = self.shape(weight).to_vec();
        let co = match wshape[..] {
            [co, wc, 3, 3, 3] if wc == ci => co,
            _ => {
                return Err(Error::dim(format!(
                    "conv3d weight {wshape:?} does not match input {:?}",
                    self.shape(x)
                )))
            }
        };
        if self.shape(bias) != [co] {
            return Err(Error::dim(format!(
                "conv3d bias {:?} does not match {co} output channels",
                self.shape(bias)
            )));
        }
        let s = dd * hh * ww;
        let dims = [dd, hh, ww];
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); b * co * s];
        out.par_chunks_mut(co * s)
            .zip(xv.par_chunks(ci * s))
            .for_each(|(ob, xb)| {
                let mut cols = vec![T::zero(); ci * K3 * s];
                im2col(xb, ci, dims, &mut cols);
                gemm(
                    Mat::new(wv, co, ci * K3),
                    Mat::new(&cols, ci * K3, s),
                    T::zero(),
                    ob,
                );
                for (row, &bias) in ob.chunks_mut(s).zip(bv) {
                    for v in row {
                        *v += bias;
                    }
                }
            });
        let out = Tensor::new(&[b, co, dd, hh, ww], out)?;
        self.record_fn(
            "conv3d",
            &[x, weight, bias],
            out,
            move |ins, _, g, needs| {
                let xv = ins[0].data();
                let wv = ins[1].data();
                let gv = g.data();
                let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..b)
                    .into_par_iter()
                    .map(|bi| {
                        let xb = &xv[bi * ci * s..(bi + 1) * ci * s];
                        let gb = &gv[bi * co * s..(bi + 1) * co * s];
                        let gw = needs[1].then(|| {
                            let mut cols = vec![T::zero(); ci * K3 * s];
                            im2col(xb, ci, dims, &mut cols);
                            let mut gw = vec![T::zero(); co * ci * K3];
                            gemm(
                                Mat::new(gb, co, s),
                                Mat::new(&cols, ci * K3, s).t(),
                                T::zero(),
                                &mut gw,
                            );
                            gw
                        });
                        let gx = needs[0].then(|| {
                            let mut dcols = vec![T::zero(); ci * K3 * s];
                            gemm(
                                Mat::new(wv, co, ci * K3).t(),
                                Mat::new(gb, co, s),
                                T::zero(),
                                &mut dcols,
                            );
                            let mut gx = vec![T::zero(); ci * s];
                            col2im(&dcols, ci, dims, &mut gx);
                            gx
                        });
                        (gw, gx)
                    })
                    .collect();
                let mut gw_total = needs[1].then(|| vec![T::zero(); co * ci * K3]);
                let mut gx_total = needs[0].then(|| Vec::with_capacity(b * ci * s));
                for (gw, gx) in per_item {
                    if let (Some(acc), Some(gw)) = (gw_total.as_mut(), gw) {
                        for (a, v) in acc.iter_mut().zip(gw) {
                            *a += v;
                        }
                    }
                    if let (Some(acc), Some(gx)) = (gx_total.as_mut(), gx) {
                        acc.extend(gx);
                    }
                }
                let gbias = needs[2].then(|| {
                    let mut acc = vec![T::zero(); co];
                    for item in gv.chunks(co * s) {
                        for (a, row) in acc.iter_mut().zip(item.chunks(s)) {
                            *a += row.iter().copied().sum();
                        }
                    }
                    Tensor::new(&[co], acc).expect("bias length")
                });
                Ok(vec![
                    gx_total.map(|d| Tensor::new(ins[0].shape(), d).expect("input shape")),
                    gw_total.map(|d| Tensor::new(ins[1].shape(), d).expect("weight shape")),
                    gbias,
                ])
            },
        )
    }

    /// 2x2x2 max pooling with stride 2. Gradient flows only to each window's
    /// first maximal element.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let [b, c, dd, hh, ww] = volume_dims(self.shape(x), "maxpool3d")?;
        if dd % 2 != 0 || hh % 2 != 0 || ww % 2 != 0 {
            return Err(Error::dim(format!(
                "maxpool3d needs even spatial extents, got {:?}",
                self.shape(x)
            )));
        }
        let (od, oh, ow) = (dd / 2, hh / 2, ww / 2);
        let xv = self.value(x).data();
        let planes = b * c;
        let in_plane = dd * hh * ww;
        let out_plane = od * oh * ow;
        let mut out = vec![T::zero(); planes * out_plane];
        let mut arg = vec![0u32; planes * out_plane];
        out.par_chunks_mut(out_plane)
            .zip(arg.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(p, (o, a))| {
                let src = &xv[p * in_plane..(p + 1) * in_plane];
                for d in 0..od {
                    for h in 0..oh {
                        for w in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_i = 0usize;
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        let i = ((2 * d + kd) * hh + 2 * h + kh) * ww + 2 * w + kw;
                                        if src[i] > best {
                                            best = src[i];
                                            best_i = i;
                                        }
                                    }
                                }
                            }
                            let oi = (d * oh + h) * ow + w;
                            o[oi] = best;
                            a[oi] = best_i as u32;
                        }
                    }
                }
            });
        let out = Tensor::new(&[b, c, od, oh, ow], out)?;
        self.record_fn("maxpool3d", &[x], out, move |ins, _, g, _| {
            let mut gx = vec![T::zero(); ins[0].len()];
            for (p, (gp, ap)) in g
                .data()
                .chunks(out_plane)
                .zip(arg.chunks(out_plane))
                .enumerate()
            {
                let dst = &mut gx[p * in_plane..(p + 1) * in_plane];
                for (&gv, &ai) in gp.iter().zip(ap) {
                    dst[ai as usize] += gv;
                }
            }
            Ok(vec![Some(Tensor::new(ins[0].shape(), gx)?)])
        })
    }

    /// Mean over all spatial positions: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim(format!(
                "global_avg_pool expects [B, C, spatial...], got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let inv = T::one() / T::of(s as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[b, c], out)?;
        self.record_fn("global_avg_pool", &[x], out, move |ins, _, g, _| {
            let mut gx = Vec::with_capacity(ins[0].len());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv * inv, s));
            }
            Ok(vec![Some(Tensor::new(ins[0].shape(), gx)?)])
        })
    }
}

/// Convolution weights and bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let shape = [out_channels, in_channels, K, K, K];
        let weight = store.add_param(
            format!("{name}.weight"),
            init.he_normal(&shape, in_channels * K3),
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv3d {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn num_params(in_channels: usize, out_channels: usize) -> usize {
        out_channels * in_channels * K3 + out_channels
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.conv3d(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 3, 3, 3], |i| i as f64));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv3d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[1, 4, 3, 3, 3]));
    }

    #[test]
    fn ones_kernel_counts_in_bounds_neighbours() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, b).unwrap();
        // Every voxel of a 2x2x2 cube sees all 8 voxels within its 3x3x3 window.
        assert_eq!(tape.value(y).data(), &[8.0; 8]);
    }

    #[test]
    fn conv_preserves_spatial_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 16, 8, 12, 8]));
        let w = tape.constant(Tensor::zeros(&[32, 16, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[32]));
        let y = tape.conv3d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 32, 8, 12, 8]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.conv3d(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| (i + 1) as f64));
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0]);

        let c = tape.constant(Tensor::full(&[1, 1, 4, 4, 4], 2.5));
        let yc = tape.maxpool3d(c).unwrap();
        assert_eq!(tape.value(yc), &Tensor::full(&[1, 1, 2, 2, 2], 2.5));

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
        assert!(matches!(tape.maxpool3d(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_gradient_goes_to_first_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .param(Tensor::from_f64(&[1, 1, 2, 2, 2], &[1., 5., 5., 0., 0., 0., 0., 0.]).unwrap());
        let y = tape.maxpool3d(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0., 1., 0., 0., 0., 0., 0., 0.]
        );
    }

    #[test]
    fn global_avg_pool_shape_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 40, 6, 7, 6], 1.75));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 40]);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 1.75).abs() < 1e-12));
    }
}
