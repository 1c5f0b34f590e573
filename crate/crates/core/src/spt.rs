//! Successive Permuted Transformer.
//!
//! An SPT block runs three parts in sequence. Each part slices the volume
//! along one view axis, treats every slice as an independent batch item,
//! tokenizes it into non-overlapping `p x p` patches, runs a Transformer
//! encoder over the patch tokens, merges 2x2 token neighbourhoods and maps
//! each merged token back onto a `p x p` block of a half-resolution slice.
//! A part therefore halves the two in-slice axes and keeps the sliced axis,
//! so the three parts together shrink every spatial axis by 4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{EncoderLayer, LayerNorm, Linear};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{inverse_permutation, Element};

/// Axis a part slices along, in `[D, H, W]` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewAxis {
    Sagittal = 0,
    Axial = 1,
    Coronal = 2,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Sagittal, ViewAxis::Axial, ViewAxis::Coronal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ViewAxis::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::arg(format!("view axis {i} is not one of 0, 1, 2")))
    }

    /// The two spatial axes that lie inside a slice, in increasing order.
    pub fn in_slice_axes(self) -> [usize; 2] {
        match self {
            ViewAxis::Sagittal => [1, 2],
            ViewAxis::Axial => [0, 2],
            ViewAxis::Coronal => [0, 1],
        }
    }

    /// Permutation of `[B, C, D, H, W]` bringing the sliced axis next to the
    /// batch axis: `[B, S, C, h, w]`.
    fn slice_perm(self) -> [usize; 5] {
        match self {
            ViewAxis::Sagittal => [0, 2, 1, 3, 4],
            ViewAxis::Axial => [0, 3, 1, 2, 4],
            ViewAxis::Coronal => [0, 4, 1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SptPartConfig {
    pub axis: ViewAxis,
    /// Square patch edge in voxels.
    pub patch: usize,
    pub embed_dim: usize,
    /// Encoder layers before merging.
    pub depth: usize,
    pub heads: usize,
    pub out_channels: usize,
    pub ffn_ratio: usize,
    /// Learned absolute positional table, shared across the part's slices.
    pub pos_embed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SptConfig {
    pub parts: [SptPartConfig; 3],
    pub input_channels: usize,
}

impl SptConfig {
    /// Three parts in axis order 0, 1, 2 sharing the same hyperparameters
    /// except the per-part patch edge.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        input_channels: usize,
        patches: [usize; 3],
        embed_dim: usize,
        depth: usize,
        heads: usize,
        out_channels: usize,
        ffn_ratio: usize,
    ) -> Self {
        let part = |i: usize| SptPartConfig {
            axis: ViewAxis::ALL[i],
            patch: patches[i],
            embed_dim,
            depth,
            heads,
            out_channels,
            ffn_ratio,
            pos_embed: true,
        };
        SptConfig {
            parts: [part(0), part(1), part(2)],
            input_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.parts[2].out_channels
    }

    /// Output extents for `[C, D, H, W]` input, validating every part.
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut dims = dims;
        for (i, part) in self.parts.iter().enumerate() {
            dims = part_output_dims(part, dims)
                .map_err(|e| Error::Config(format!("SPT part {i} ({:?}): {e}", part.axis)))?;
        }
        Ok(dims)
    }
}

/// In-slice grid of a part on `dims`, checking that patches tile the slice
/// and that the token grid can be merged 2x2.
pub fn part_grid(part: &SptPartConfig, dims: [usize; 3]) -> Result<(usize, usize)> {
    let p = part.patch;
    if p == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let [a, b] = part.axis.in_slice_axes();
    let names = ["D", "H", "W"];
    let mut grid = [0; 2];
    for (slot, &ax) in [a, b].iter().enumerate() {
        let ext = dims[ax];
        if ext % p != 0 {
            return Err(Error::Config(format!(
                "in-slice axis {} = {ext} is not divisible by patch {p}",
                names[ax]
            )));
        }
        if (ext / p) % 2 != 0 {
            return Err(Error::Config(format!(
                "in-slice axis {} = {ext} gives {} patches of {p}, which cannot be merged 2x2",
                names[ax],
                ext / p
            )));
        }
        grid[slot] = ext / p;
    }
    Ok((grid[0], grid[1]))
}

fn part_output_dims(part: &SptPartConfig, dims: [usize; 3]) -> Result<[usize; 3]> {
    part_grid(part, dims)?;
    if part.heads == 0 || part.embed_dim % part.heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {} is not divisible by {} heads",
            part.embed_dim, part.heads
        )));
    }
    let mut out = dims;
    for ax in part.axis.in_slice_axes() {
        out[ax] /= 2;
    }
    Ok(out)
}

/// `[B, C, D, H, W] -> [B * S, C, h, w]`, one batch item per slice.
pub fn slice_view<T: Element>(tape: &mut Tape<T>, x: Var, axis: ViewAxis) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(Error::dim(format!(
            "slice_view expects [B, C, D, H, W], got {shape:?}"
        )));
    }
    let perm = axis.slice_perm();
    let p = tape.permute_axes(x, &perm)?;
    let s: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
    tape.reshape(p, &[s[0] * s[1], s[2], s[3], s[4]])
}

/// Inverse of [`slice_view`] for a batch of `batch` volumes.
pub fn unslice_view<T: Element>(
    tape: &mut Tape<T>,
    slices: Var,
    axis: ViewAxis,
    batch: usize,
) -> Result<Var> {
    let shape = tape.shape(slices).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::dim(format!(
            "unslice_view expects [N, C, h, w], got {shape:?}"
        )));
    };
    if batch == 0 || n % batch != 0 {
        return Err(Error::dim(format!(
            "{n} slices do not split into {batch} volumes"
        )));
    }
    let r = tape.reshape(slices, &[batch, n / batch, c, h, w])?;
    tape.permute_axes(r, &inverse_permutation(&axis.slice_perm()))
}

/// `[N, C, H, W] -> [N, (H/p)(W/p), p*p*C]`, patches in row-major order and
/// each token laid out as `(row, col, channel)`.
pub fn patch_split<T: Element>(
    tape: &mut Tape<T>,
    slices: Var,
    p: usize,
) -> Result<(Var, (usize, usize))> {
    let shape = tape.shape(slices).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::dim(format!(
            "patch_split expects [N, C, H, W], got {shape:?}"
        )));
    };
    if p == 0 || h % p != 0 {
        return Err(Error::dim(format!(
            "patch_split: axis H = {h} is not divisible by p = {p}"
        )));
    }
    if w % p != 0 {
        return Err(Error::dim(format!(
            "patch_split: axis W = {w} is not divisible by p = {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let r = tape.reshape(slices, &[n, c, gh, p, gw, p])?;
    let t = tape.permute_axes(r, &[0, 2, 4, 3, 5, 1])?;
    Ok((tape.reshape(t, &[n, gh * gw, p * p * c])?, (gh, gw)))
}

/// Inverse of [`patch_split`].
pub fn patch_unsplit<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    grid: (usize, usize),
    p: usize,
    channels: usize,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (gh, gw) = grid;
    if shape.len() != 3 || shape[1] != gh * gw || shape[2] != p * p * channels {
        return Err(Error::dim(format!(
            "patch_unsplit: tokens {shape:?} do not match grid {gh}x{gw}, p = {p}, C = {channels}"
        )));
    }
    let n = shape[0];
    let r = tape.reshape(tokens, &[n, gh, gw, p, p, channels])?;
    let t = tape.permute_axes(r, &[0, 5, 1, 3, 2, 4])?;
    tape.reshape(t, &[n, channels, gh * p, gw * p])
}

/// Linear token projection plus an optional learned positional table.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub proj: Linear,
    pub pos: Option<ParamId>,
}

impl TokenEmbedding {
    /// `[N, n, p*p*C] -> [N, n, d]`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Var> {
        let x = self.proj.forward(ctx, tokens)?;
        match self.pos {
            Some(pos) => {
                let pos = ctx.p(pos);
                ctx.tape.add_bias(x, pos)
            }
            None => Ok(x),
        }
    }
}

/// 2x2 neighbour concatenation, layer norm and a bias-free `4d -> 2d`
/// reduction.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
    ) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(
                store,
                init,
                &format!("{name}.reduction"),
                4 * dim,
                2 * dim,
                false,
            ),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        LayerNorm::num_params(4 * dim) + Linear::num_params(4 * dim, 2 * dim, false)
    }

    /// `[N, gh*gw, d] -> [N, (gh/2)(gw/2), 2d]`.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let merged = merge_neighbours(ctx.tape, tokens, grid)?;
        let h = self.norm.forward(ctx, merged)?;
        self.reduction.forward(ctx, h)
    }
}

/// The parameter-free part of patch merging: `[N, gh*gw, d] ->
/// [N, (gh/2)(gw/2), 4d]`, concatenating each 2x2 group as
/// (top-left, top-right, bottom-left, bottom-right).
pub fn merge_neighbours<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (gh, gw) = grid;
    if shape.len() != 3 || shape[1] != gh * gw {
        return Err(Error::dim(format!(
            "patch_merge: tokens {shape:?} do not match grid {gh}x{gw}"
        )));
    }
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::dim(format!(
            "patch_merge needs an even token grid, got {gh}x{gw}"
        )));
    }
    let (n, d) = (shape[0], shape[2]);
    let r = tape.reshape(tokens, &[n, gh / 2, 2, gw / 2, 2, d])?;
    let t = tape.permute_axes(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[n, (gh / 2) * (gw / 2), 4 * d])
}

/// Projects each merged token onto a `p x p x C_out` block of the
/// half-resolution slice.
#[derive(Clone, Debug)]
pub struct DePatchify {
    pub proj: Linear,
    pub patch: usize,
    pub out_channels: usize,
}

impl DePatchify {
    pub fn num_params(in_dim: usize, patch: usize, out_channels: usize) -> usize {
        Linear::num_params(in_dim, patch * patch * out_channels, true)
    }

    /// `[N, mh*mw, 2d] -> [N, C_out, mh*p, mw*p]`.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        merged: Var,
        merged_grid: (usize, usize),
    ) -> Result<Var> {
        let shape = ctx.tape.shape(merged).to_vec();
        if shape.len() != 3
            || shape[2] != self.proj.in_dim
            || shape[1] != merged_grid.0 * merged_grid.1
        {
            return Err(Error::dim(format!(
                "de_patchify: merged tokens {shape:?} inconsistent with grid {merged_grid:?} and projection {}",
                self.proj.in_dim
            )));
        }
        let blocks = self.proj.forward(ctx, merged)?;
        patch_unsplit(ctx.tape, blocks, merged_grid, self.patch, self.out_channels)
    }
}

/// One view of an SPT block.
#[derive(Clone, Debug)]
pub struct SptPart {
    pub config: SptPartConfig,
    pub in_channels: usize,
    pub in_dims: [usize; 3],
    pub grid: (usize, usize),
    pub embed: TokenEmbedding,
    pub layers: Vec<EncoderLayer>,
    pub merge: PatchMerge,
    pub depatch: DePatchify,
}

impl SptPart {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        config: &SptPartConfig,
        in_channels: usize,
        in_dims: [usize; 3],
    ) -> Result<Self> {
        part_output_dims(config, in_dims)
            .map_err(|e| Error::Config(format!("{name} ({:?}): {e}", config.axis)))?;
        let grid = part_grid(config, in_dims)?;
        let p = config.patch;
        let d = config.embed_dim;
        let token_dim = p * p * in_channels;
        let proj = Linear::new(store, init, &format!("{name}.embed"), token_dim, d, true);
        let pos = config.pos_embed.then(|| {
            store.add_param(
                format!("{name}.pos"),
                init.normal(&[grid.0 * grid.1, d], 0.02),
            )
        });
        let layers = (0..config.depth)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    init,
                    &format!("{name}.layer{i}"),
                    d,
                    config.heads,
                    config.ffn_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let merge = PatchMerge::new(store, init, &format!("{name}.merge"), d);
        let depatch = DePatchify {
            proj: Linear::new(
                store,
                init,
                &format!("{name}.depatch"),
                2 * d,
                p * p * config.out_channels,
                true,
            ),
            patch: p,
            out_channels: config.out_channels,
        };
        Ok(SptPart {
            config: config.clone(),
            in_channels,
            in_dims,
            grid,
            embed: TokenEmbedding { proj, pos },
            layers,
            merge,
            depatch,
        })
    }

    /// Closed-form parameter count of a part.
    pub fn num_params(config: &SptPartConfig, in_channels: usize, grid: (usize, usize)) -> usize {
        let (p, d) = (config.patch, config.embed_dim);
        let pos = if config.pos_embed {
            grid.0 * grid.1 * d
        } else {
            0
        };
        Linear::num_params(p * p * in_channels, d, true)
            + pos
            + config.depth * EncoderLayer::num_params(d, config.ffn_ratio)
            + PatchMerge::num_params(d)
            + DePatchify::num_params(2 * d, p, config.out_channels)
    }

    pub fn out_dims(&self) -> [usize; 3] {
        let mut out = self.in_dims;
        for ax in self.config.axis.in_slice_axes() {
            out[ax] /= 2;
        }
        out
    }

    /// `[B, C, D, H, W] -> [B, C_out, ...]` with the two in-slice axes halved.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.in_channels || shape[2..] != self.in_dims {
            return Err(Error::dim(format!(
                "SPT part {:?} built for [B, {}, {:?}], got {shape:?}",
                self.config.axis, self.in_channels, self.in_dims
            )));
        }
        let batch = shape[0];
        let slices = slice_view(ctx.tape, x, self.config.axis)?;
        let (tokens, grid) = patch_split(ctx.tape, slices, self.config.patch)?;
        debug_assert_eq!(grid, self.grid);
        let mut h = self.embed.forward(ctx, tokens)?;
        for layer in &self.layers {
            h = layer.forward(ctx, h)?;
        }
        let merged = self.merge.forward(ctx, h, grid)?;
        let half = self
            .depatch
            .forward(ctx, merged, (grid.0 / 2, grid.1 / 2))?;
        unslice_view(ctx.tape, half, self.config.axis, batch)
    }
}

/// Three successive parts.
#[derive(Clone, Debug)]
pub struct Spt {
    pub parts: Vec<SptPart>,
}

impl Spt {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        config: &SptConfig,
        in_dims: [usize; 3],
    ) -> Result<Self> {
        config.output_dims(in_dims)?;
        let mut dims = in_dims;
        let mut channels = config.input_channels;
        let mut parts = Vec::with_capacity(3);
        for (i, pc) in config.parts.iter().enumerate() {
            let part = SptPart::new(store, init, &format!("{name}.part{i}"), pc, channels, dims)?;
            dims = part.out_dims();
            channels = pc.out_channels;
            parts.push(part);
        }
        Ok(Spt { parts })
    }

    pub fn num_params(config: &SptConfig, in_dims: [usize; 3]) -> Result<usize> {
        let mut dims = in_dims;
        let mut channels = config.input_channels;
        let mut total = 0;
        for pc in &config.parts {
            let grid = part_grid(pc, dims)?;
            total += SptPart::num_params(pc, channels, grid);
            dims = part_output_dims(pc, dims)?;
            channels = pc.out_channels;
        }
        Ok(total)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for part in &self.parts {
            h = part.forward(ctx, h)?;
        }
        Ok(h)
    }
}
