//! Finite-difference checks over every differentiable op and layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agedist::{target_batch, NUM_BINS};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::layers::{BatchNorm3d, Conv3d, EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
use crate::model::{CnnBlock, Gldn, ModelConfig};
use crate::params::{Bound, Ctx, Init, Mode, ParamStore};
use crate::spt::{self, PatchMerge, Spt, SptConfig, SptPart, ViewAxis};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    pub seed: u64,
    /// Coordinates sampled per input tensor.
    pub max_coords: usize,
    /// Adds an op with a deliberately wrong backward rule.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tol: 1e-4,
            seed: 0,
            max_coords: 24,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `sum(out * W)` for a fixed pseudo-random `W`, giving every output
/// element a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = tape.constant(uniform(&mut rng, &shape, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

struct WrongSquare;

impl Backward<f64> for WrongSquare {
    fn name(&self) -> &'static str {
        "faulty_square"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _: &Tensor<f64>,
        grad: &Tensor<f64>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<f64>>>> {
        // d(x^2)/dx is 2x; this returns x.
        Ok(vec![Some(inputs[0].zip_map(grad, |x, g| x * g)?)])
    }
}

struct Runner {
    rng: ChaCha8Rng,
    opts: GradCheckOptions,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn op(
        &mut self,
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let report = grad_check(
            |tape, v| {
                let out = f(tape, v)?;
                project(tape, out)
            },
            &inputs,
            &self.opts,
        )?;
        self.entries.push(SuiteEntry { name, report });
        Ok(())
    }

    /// Checks a parameterized layer with respect to its inputs and every
    /// parameter in `store`.
    fn layer(
        &mut self,
        name: &'static str,
        store: &ParamStore<f64>,
        mode: Mode,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let n = inputs.len();
        let mut all = inputs;
        all.extend(store.params().iter().map(|e| e.value.clone()));
        let report = grad_check(
            |tape, v| {
                let bound = Bound::from_vars(v[n..].to_vec());
                let out = {
                    let mut ctx = Ctx::new(tape, &bound, store, mode);
                    f(&mut ctx, &v[..n])?
                };
                project(tape, out)
            },
            &all,
            &self.opts,
        )?;
        self.entries.push(SuiteEntry { name, report });
        Ok(())
    }

    fn rand(&mut self, shape: &[usize]) -> Tensor<f64> {
        uniform(&mut self.rng, shape, 1.0)
    }
}

fn store_and_init(seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

/// Perturbs default-initialized parameters (zero biases, unit gains) so
/// that every path carries gradient.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.params_mut() {
        for v in e.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Runs every check; entries appear once per op in a fixed order.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts: GradCheckOptions {
            seed: opts.seed,
            ..GradCheckOptions::with_tol(opts.tol).max_coords(opts.max_coords)
        },
        entries: Vec::new(),
    };

    let (a, b) = (r.rand(&[2, 3]), r.rand(&[2, 3]));
    r.op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    r.op("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    r.op("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1]))?;
    r.op("scale", vec![a.clone()], |t, v| t.scale(v[0], 1.7))?;
    r.op("add_scalar", vec![a.clone()], |t, v| {
        t.add_scalar(v[0], -0.4)
    })?;
    let (x, bias, table) = (r.rand(&[2, 3, 4]), r.rand(&[4]), r.rand(&[3, 4]));
    r.op(
        "add_bias",
        vec![x.clone(), bias.clone(), table.clone()],
        |t, v| {
            let h = t.add_bias(v[0], v[1])?;
            t.add_bias(h, v[2])
        },
    )?;
    r.op("mul_bias", vec![x.clone(), bias, table], |t, v| {
        let h = t.mul_bias(v[0], v[1])?;
        t.mul_bias(h, v[2])
    })?;
    r.op("sum", vec![x.clone()], |t, v| t.sum(v[0]))?;
    r.op("mean", vec![x.clone()], |t, v| t.mean(v[0]))?;
    r.op("reshape", vec![x.clone()], |t, v| t.reshape(v[0], &[6, 4]))?;
    r.op("permute_axes", vec![x.clone()], |t, v| {
        t.permute_axes(v[0], &[2, 0, 1])
    })?;
    r.op("transpose_last", vec![x.clone()], |t, v| {
        t.transpose_last(v[0])
    })?;
    let y = r.rand(&[2, 2, 4]);
    r.op("concat", vec![x.clone(), y], |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })?;
    r.op("narrow", vec![x.clone()], |t, v| t.narrow(v[0], 2, 1, 2))?;
    r.op("relu", vec![x.clone()], |t, v| t.relu(v[0]))?;
    r.op("gelu", vec![x.clone()], |t, v| t.gelu(v[0]))?;
    r.op("abs", vec![x.clone()], |t, v| t.abs(v[0]))?;
    let (m1, m2, m3) = (r.rand(&[2, 3, 4]), r.rand(&[2, 4, 5]), r.rand(&[4, 2]));
    r.op("matmul", vec![m1, m2, m3], |t, v| {
        let batched = t.matmul(v[0], v[1])?;
        let shared = t.matmul(v[0], v[2])?;
        let b = t.reshape(batched, &[30])?;
        let s = t.reshape(shared, &[12])?;
        t.concat(&[b, s], 0)
    })?;
    r.op("softmax", vec![x.clone()], |t, v| t.softmax(v[0]))?;
    let (w, lb) = (r.rand(&[4, 5]), r.rand(&[5]));
    r.op("linear", vec![x.clone(), w, lb], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?;
    let (g, be) = (r.rand(&[4]), r.rand(&[4]));
    r.op("layer_norm", vec![x.clone(), g, be], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;

    let vol = r.rand(&[2, 3, 2, 4, 2]);
    let (g, be) = (r.rand(&[3]), r.rand(&[3]));
    r.op(
        "batchnorm_train",
        vec![vol.clone(), g.clone(), be.clone()],
        |t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0),
    )?;
    let rm = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3])?;
    let rv = Tensor::from_f64(&[3], &[0.5, 1.5, 2.0])?;
    r.op("batchnorm_eval", vec![vol.clone(), g, be], move |t, v| {
        t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)
    })?;
    let (cw, cb) = (r.rand(&[2, 3, 3, 3, 3]), r.rand(&[2]));
    r.op("conv3d", vec![vol.clone(), cw, cb], |t, v| {
        t.conv3d(v[0], v[1], v[2])
    })?;
    r.op("maxpool3d", vec![vol.clone()], |t, v| t.maxpool3d(v[0]))?;
    r.op("global_avg_pool", vec![vol], |t, v| t.global_avg_pool(v[0]))?;
    let (q, k, vv) = (r.rand(&[2, 3, 4]), r.rand(&[2, 3, 4]), r.rand(&[2, 3, 4]));
    r.op("scaled_dot_attention", vec![q, k, vv], |t, v| {
        t.scaled_dot_attention(v[0], v[1], v[2])
    })?;

    let logits = r.rand(&[2, NUM_BINS]);
    let target = target_batch::<f64>(&[31.0, 66.5], 2.0)?;
    let tk = target.clone();
    r.op("kl_loss", vec![logits.clone()], move |t, v| {
        let p = t.softmax(v[0])?;
        t.kl_loss(p, &tk)
    })?;
    r.op("combined_loss", vec![logits], move |t, v| {
        let p = t.softmax(v[0])?;
        t.combined_loss(p, &target, &[31.0, 66.5], 1.0)
    })?;

    // Parameterized layers.
    let (mut store, mut rng) = store_and_init(opts.seed);
    let lin = Linear::new(&mut store, &mut Init { rng: &mut rng }, "lin", 4, 3, true);
    jitter(&mut store, 1);
    let input = r.rand(&[2, 4]);
    r.layer("Linear", &store, Mode::Train, vec![input], |c, v| {
        lin.forward(c, v[0])
    })?;

    let (mut store, _) = store_and_init(opts.seed);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    jitter(&mut store, 2);
    let input = r.rand(&[3, 4]);
    r.layer("LayerNorm", &store, Mode::Train, vec![input], |c, v| {
        ln.forward(c, v[0])
    })?;

    let (mut store, mut rng) = store_and_init(opts.seed);
    let conv = Conv3d::new(&mut store, &mut Init { rng: &mut rng }, "conv", 2, 2);
    let bn = BatchNorm3d::new(&mut store, "bn", 2);
    jitter(&mut store, 3);
    let input = r.rand(&[2, 2, 2, 2, 3]);
    r.layer(
        "Conv3d+BatchNorm3d",
        &store,
        Mode::Train,
        vec![input],
        |c, v| {
            let h = conv.forward(c, v[0])?;
            bn.forward(c, h)
        },
    )?;

    let (mut store, mut rng) = store_and_init(opts.seed);
    let mha = MultiHeadAttention::new(&mut store, &mut Init { rng: &mut rng }, "mha", 4, 2)?;
    jitter(&mut store, 4);
    let input = r.rand(&[2, 3, 4]);
    r.layer(
        "MultiHeadAttention",
        &store,
        Mode::Train,
        vec![input],
        |c, v| mha.forward(c, v[0]),
    )?;

    let (mut store, mut rng) = store_and_init(opts.seed);
    let enc = EncoderLayer::new(&mut store, &mut Init { rng: &mut rng }, "enc", 4, 2, 4)?;
    jitter(&mut store, 5);
    let input = r.rand(&[1, 3, 4]);
    r.layer("EncoderLayer", &store, Mode::Train, vec![input], |c, v| {
        enc.forward(c, v[0])
    })?;

    // SPT pieces.
    let slices = r.rand(&[2, 2, 4, 4]);
    let volume = r.rand(&[1, 2, 2, 4, 4]);
    r.op("slice_view+patch_split", vec![volume], |t, v| {
        let s = spt::slice_view(t, v[0], ViewAxis::Axial)?;
        Ok(spt::patch_split(t, s, 2)?.0)
    })?;
    r.op("patch_unsplit", vec![slices], |t, v| {
        let (tok, grid) = spt::patch_split(t, v[0], 2)?;
        let h = t.mul(tok, tok)?;
        spt::patch_unsplit(t, h, grid, 2, 2)
    })?;
    let (mut store, mut rng) = store_and_init(opts.seed);
    let merge = PatchMerge::new(&mut store, &mut Init { rng: &mut rng }, "merge", 3);
    jitter(&mut store, 6);
    let tokens = r.rand(&[2, 8, 3]);
    r.layer("PatchMerge", &store, Mode::Train, vec![tokens], |c, v| {
        merge.forward(c, v[0], (2, 4))
    })?;

    let tiny_spt = SptConfig::uniform(1, [2, 2, 2], 8, 1, 2, 2, 2);
    let (mut store, mut rng) = store_and_init(opts.seed);
    let part = SptPart::new(
        &mut store,
        &mut Init { rng: &mut rng },
        "part",
        &tiny_spt.parts[0],
        1,
        [4, 4, 4],
    )?;
    let input = r.rand(&[1, 1, 4, 4, 4]);
    r.layer("SptPart", &store, Mode::Train, vec![input], |c, v| {
        part.forward(c, v[0])
    })?;

    let (mut store, mut rng) = store_and_init(opts.seed);
    let full = Spt::new(
        &mut store,
        &mut Init { rng: &mut rng },
        "spt",
        &tiny_spt,
        [8, 8, 8],
    )?;
    let input = r.rand(&[1, 1, 8, 8, 8]);
    r.layer("Spt", &store, Mode::Train, vec![input], |c, v| {
        full.forward(c, v[0])
    })?;

    let (mut store, mut rng) = store_and_init(opts.seed);
    let cnn = CnnBlock::new(&mut store, &mut Init { rng: &mut rng }, "cnn", 1, 2, true);
    jitter(&mut store, 7);
    let input = r.rand(&[1, 1, 4, 4, 4]);
    r.layer("CnnBlock", &store, Mode::Train, vec![input], |c, v| {
        cnn.forward(c, v[0])
    })?;

    // End to end on the tiny configuration, through the combined loss.
    let tiny = ModelConfig::tiny();
    let (net, mut store) = Gldn::build::<f64>(&tiny, opts.seed)?;
    jitter(&mut store, 8);
    let input = r.rand(&[2, 1, 8, 8, 8]);
    let ages = [27.0, 80.0];
    let target = target_batch::<f64>(&ages, 2.0)?;
    let n = 1;
    let mut all = vec![input];
    all.extend(store.params().iter().map(|e| e.value.clone()));
    let report = grad_check(
        |tape, v| {
            let bound = Bound::from_vars(v[n..].to_vec());
            let q = {
                let mut ctx = Ctx::new(tape, &bound, &store, Mode::Train);
                net.forward(&mut ctx, v[0])?
            };
            tape.combined_loss(q, &target, &ages, 1.0)
        },
        &all,
        &r.opts,
    )?;
    r.entries.push(SuiteEntry {
        name: "Gldn(tiny)+combined_loss",
        report,
    });

    if opts.inject_fault {
        let input = r.rand(&[5]);
        r.op("faulty_square", vec![input], |t, v| {
            let out = t.value(v[0]).map(|x| x * x);
            t.record("faulty_square", &[v[0]], out, Box::new(WrongSquare))
        })?;
    }
    Ok(r.entries)
}
