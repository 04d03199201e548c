//! Gradient-check suites over the engine's ops, the network blocks and a
//! reduced end-to-end network.
//!
//! Every check evaluates a scalar `Σ w ⊙ f(inputs)` with a fixed random
//! weighting `w`, so all output elements contribute with distinct weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ReduceOp, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::model::{ModelConfig, Network};
use crate::nn::{
    self, BConvLstm, ConvBn, ConvKind, ConvLstmCell, ConvLstmState, EncoderBlock, SwinPair,
    TransposedConv,
};
use crate::params::{Bound, ForwardCtx, ParamDef, ParamStore};
use crate::tensor::Tensor;

/// Which suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "blocks" => Ok(Self::Blocks),
            "model" => Ok(Self::Model),
            _ => Err(crate::Error::invalid(format!(
                "unknown scope `{s}` (ops, blocks, model)"
            ))),
        }
    }
}

/// Threshold every check must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE && self.report.checked > 0
    }
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Ops => ops(seed),
        Scope::Blocks => blocks(seed),
        Scope::Model => model(seed),
    }
}

fn weighted_sum(tape: &Tape, y: &Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    y.mul(&tape.constant(w))?.sum_all()
}

struct Suite {
    seed: u64,
    rng: ChaCha8Rng,
    settings: GradCheck,
    out: Vec<CheckResult>,
}

impl Suite {
    fn new(seed: u64, max_per_param: Option<usize>) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            settings: GradCheck {
                eps: 1e-5,
                max_per_param,
            },
            out: Vec::new(),
        }
    }

    fn input(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -2.0, 2.0, &mut self.rng)
    }

    /// Random values in ±`amp` for every trainable tensor of `defs`;
    /// running statistics get plausible positive variances.
    fn store(&mut self, defs: &[ParamDef], amp: f64) -> Result<ParamStore> {
        let mut s = ParamStore::initialize(defs, self.seed)?;
        for d in defs {
            let t = if d.key.ends_with("running_var") {
                Tensor::uniform(&d.shape, 0.5, 1.5, &mut self.rng)
            } else if d.trainable {
                Tensor::uniform(&d.shape, -amp, amp, &mut self.rng)
            } else {
                Tensor::uniform(&d.shape, -0.5, 0.5, &mut self.rng)
            };
            s.set(&d.key, t)?;
        }
        Ok(s)
    }

    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&[Var]) -> Result<Var>,
    {
        let ws = self.seed ^ self.out.len() as u64;
        let report = self
            .settings
            .run(|t, v| weighted_sum(t, &f(v)?, ws), &inputs)?;
        self.out.push(CheckResult {
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    fn block<F>(&mut self, name: &str, store: &ParamStore, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&Bound, &[Var]) -> Result<Var>,
    {
        let ws = self.seed ^ self.out.len() as u64;
        let report = self
            .settings
            .run_with_params(store, &inputs, |t, p, v| weighted_sum(t, &f(p, v)?, ws))?;
        self.out.push(CheckResult {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

/// Every differentiable engine op on random inputs in [-2, 2].
pub fn ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite::new(seed, None);
    let a = s.input(&[3, 4]);
    let b = s.input(&[3, 4]);
    let row = s.input(&[4]);
    s.op("add (broadcast)", vec![a.clone(), row.clone()], |v| {
        v[0].add(&v[1])
    })?;
    s.op("sub", vec![a.clone(), b.clone()], |v| v[0].sub(&v[1]))?;
    s.op("mul (broadcast)", vec![a.clone(), row.clone()], |v| {
        v[0].mul(&v[1])
    })?;
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut s.rng);
    s.op("div", vec![a.clone(), pos], |v| v[0].div(&v[1]))?;
    s.op("relu", vec![a.clone()], |v| v[0].relu())?;
    s.op("sigmoid", vec![a.clone()], |v| v[0].sigmoid())?;
    s.op("tanh", vec![a.clone()], |v| v[0].tanh())?;
    s.op("exp", vec![a.clone()], |v| v[0].exp())?;
    s.op("gelu", vec![a.clone()], |v| v[0].gelu())?;
    s.op("square", vec![a.clone()], |v| v[0].square())?;
    s.op("scale/add_scalar", vec![a.clone()], |v| {
        v[0].scale(-1.5)?.add_scalar(0.3)
    })?;

    let m = s.input(&[4, 5]);
    s.op("matmul", vec![a.clone(), m], |v| v[0].matmul(&v[1]))?;
    s.op("matmul_t", vec![a.clone(), b.clone()], |v| {
        v[0].matmul_t(&v[1])
    })?;
    let (ba, bb) = (s.input(&[2, 3, 4]), s.input(&[2, 4, 3]));
    s.op("batched matmul", vec![ba, bb], |v| v[0].matmul(&v[1]))?;

    let x = s.input(&[2, 3, 6, 6]);
    let k3 = s.input(&[4, 3, 3, 3]);
    s.op("conv2d 3x3", vec![x.clone(), k3], |v| v[0].conv2d(&v[1]))?;
    let k1 = s.input(&[2, 3, 1, 1]);
    s.op("conv2d 1x1", vec![x.clone(), k1], |v| v[0].conv2d(&v[1]))?;
    let kd = s.input(&[3, 1, 3, 3]);
    s.op("depthwise conv2d", vec![x.clone(), kd], |v| {
        v[0].depthwise_conv2d(&v[1])
    })?;
    let kt = s.input(&[3, 2, 2, 2]);
    s.op("transposed conv 2x2", vec![x.clone(), kt], |v| {
        v[0].conv_transpose2x2(&v[1])
    })?;
    s.op("max pool 2x2", vec![x.clone()], |v| v[0].max_pool2x2())?;

    let (g, be) = (s.input(&[3]), s.input(&[3]));
    s.op(
        "batch norm (batch stats)",
        vec![x.clone(), g.clone(), be.clone()],
        |v| Ok(v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0),
    )?;
    let rm = Tensor::uniform(&[3], -0.5, 0.5, &mut s.rng);
    let rv = Tensor::uniform(&[3], 0.5, 1.5, &mut s.rng);
    s.op(
        "batch norm (running stats)",
        vec![x.clone(), g, be],
        move |v| v[0].batch_norm_eval(&v[1], &v[2], &rm, &rv, 1e-5),
    )?;
    let (lg, lb) = (s.input(&[4]), s.input(&[4]));
    s.op("layer norm", vec![a.clone(), lg, lb], |v| {
        v[0].layer_norm(&v[1], &v[2], 1e-5)
    })?;

    let t3 = s.input(&[2, 3, 4]);
    s.op("sum over axes", vec![t3.clone()], |v| {
        v[0].reduce(ReduceOp::Sum, &[0, 2], true)
    })?;
    s.op("mean over axis", vec![t3.clone()], |v| {
        v[0].reduce(ReduceOp::Mean, &[1], false)
    })?;
    s.op("max over axis", vec![t3.clone()], |v| {
        v[0].reduce(ReduceOp::Max, &[2], false)
    })?;
    s.op("softmax", vec![t3.clone()], |v| v[0].softmax(1))?;
    s.op("concat", vec![a.clone(), b], |v| {
        Var::concat(&[&v[0], &v[1]], 1)
    })?;
    s.op("narrow", vec![t3.clone()], |v| v[0].narrow(2, 1, 2))?;
    s.op("permute", vec![t3.clone()], |v| v[0].permute(&[2, 0, 1]))?;
    s.op("reshape", vec![t3], |v| v[0].reshape(&[6, 4]))?;
    s.op("zero padding", vec![x], |v| nn::pad_to_multiple(&v[0], 4))?;
    Ok(s.out)
}

/// The network blocks with random parameters.
pub fn blocks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite::new(seed, None);
    let x = s.input(&[2, 3, 4, 4]);

    for (name, kind) in [
        ("separable conv + BN", ConvKind::Separable),
        ("standard conv + BN", ConvKind::Standard),
    ] {
        let blk = ConvBn::new("b", kind, 3, 4, 3)?;
        let st = s.store(&blk.defs(), 0.8)?;
        s.block(&format!("{name} (train)"), &st, vec![x.clone()], |p, v| {
            blk.forward(p, &v[0], &mut ForwardCtx::training(0.1))
        })?;
        s.block(
            &format!("{name} (inference)"),
            &st,
            vec![x.clone()],
            |p, v| blk.forward(p, &v[0], &mut ForwardCtx::inference()),
        )?;
    }

    let enc = EncoderBlock::new("enc", ConvKind::Separable, 3, 4, 3)?;
    let st = s.store(&enc.defs(), 0.8)?;
    s.block("encoder block", &st, vec![x.clone()], |p, v| {
        let (skip, pooled) = enc.forward(p, &v[0], &mut ForwardCtx::training(0.1))?;
        Var::concat(
            &[
                &skip.reshape(&[skip.value().len()])?,
                &pooled.reshape(&[pooled.value().len()])?,
            ],
            0,
        )
    })?;

    // The output-gate peephole gradient is quadratic in the cell value, so a
    // cell near zero leaves it below finite-difference resolution. A positive
    // cell-gate bias and prior cell state keep the test point well
    // conditioned; small weights keep the gates out of saturation.
    let unit = |s: &mut Suite, shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, &mut s.rng);
    let cell = ConvLstmCell::new("cell", 2, 3, 3, 4, 4)?;
    let mut st = s.store(&cell.defs(), 0.3)?;
    st.set("cell.c.bias", Tensor::full(&[3], 1.5))?;
    let xi = unit(&mut s, &[1, 2, 4, 4]);
    let h0 = unit(&mut s, &[1, 3, 4, 4]);
    let c0 = Tensor::uniform(&[1, 3, 4, 4], 0.5, 1.5, &mut s.rng);
    s.block("ConvLSTM step", &st, vec![xi.clone(), h0, c0], |p, v| {
        let state = ConvLstmState {
            hidden: v[1].clone(),
            cell: v[2].clone(),
        };
        let out = cell.step(p, &v[0], Some(&state))?;
        Var::concat(&[&out.hidden, &out.cell], 1)
    })?;

    let bl = BConvLstm::new("bl", 2, 3, 2, 3, 4, 4)?;
    let mut st = s.store(&bl.defs(), 0.3)?;
    st.set("bl.fwd.c.bias", Tensor::full(&[3], 1.5))?;
    st.set("bl.bwd.c.bias", Tensor::full(&[3], 1.5))?;
    let x2 = unit(&mut s, &[1, 2, 4, 4]);
    s.block("BConvLSTM (length 1)", &st, vec![xi.clone()], |p, v| {
        bl.forward(p, &[&v[0]])
    })?;
    s.block("BConvLSTM (length 2)", &st, vec![xi, x2], |p, v| {
        bl.forward(p, &[&v[0], &v[1]])
    })?;

    let pair = SwinPair::new("sw", 4, 2, 2, 2)?;
    let st = s.store(&pair.defs(), 0.8)?;
    let xs = s.input(&[1, 4, 4, 4]);
    s.block("W-MSA", &st, vec![xs.clone()], |p, v| {
        pair.window_attention(p, 1, &v[0], false)
    })?;
    s.block("SW-MSA", &st, vec![xs.clone()], |p, v| {
        pair.window_attention(p, 2, &v[0], true)
    })?;
    s.block("swin pair", &st, vec![xs], |p, v| pair.forward(p, &v[0]))?;

    let tc = TransposedConv::new("up", 3, 2);
    let st = s.store(&tc.defs(), 0.8)?;
    s.block("transposed conv", &st, vec![x], |p, v| tc.forward(p, &v[0]))?;
    Ok(s.out)
}

/// Configuration of the end-to-end check: 32×32 input, C = 2.
pub fn model_config() -> ModelConfig {
    ModelConfig {
        input_height: 32,
        input_width: 32,
        base_channels: 2,
        ..ModelConfig::default()
    }
}

/// Where the end-to-end check evaluates the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestPoint {
    /// The seeded initialization as is.
    Init,
    /// The seeded initialization with every zero-initialized tensor
    /// drawn from ±0.1 and ConvLSTM cell-gate biases at 1.5.
    Conditioned,
}

/// Parameters of `net` at `point`.
pub fn test_store(net: &Network, seed: u64, point: TestPoint) -> Result<ParamStore> {
    let mut store = net.build(seed)?;
    if point == TestPoint::Init {
        return Ok(store);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for key in store.trainable_keys().map(String::from).collect::<Vec<_>>() {
        let t = store.get(&key)?;
        let replaced = if key.contains(".lstm.") && key.ends_with(".c.bias") {
            Tensor::full(t.shape(), 1.5)
        } else if t.data().iter().all(|&v| v == 0.0) {
            Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng)
        } else {
            continue;
        };
        store.set(&key, replaced)?;
    }
    Ok(store)
}

/// End-to-end check of a network in training mode (batch statistics) or
/// inference mode on a batch of two, `per_param` elements per tensor.
pub fn network_check(
    cfg: &ModelConfig,
    seed: u64,
    per_param: usize,
    point: TestPoint,
    training: bool,
) -> Result<GradCheckReport> {
    network_check_eps(cfg, seed, per_param, point, training, 1e-5)
}

pub fn network_check_eps(
    cfg: &ModelConfig,
    seed: u64,
    per_param: usize,
    point: TestPoint,
    training: bool,
    eps: f64,
) -> Result<GradCheckReport> {
    let net = Network::new(cfg)?;
    let store = test_store(&net, seed, point)?;
    let mut s = Suite::new(seed, Some(per_param));
    s.settings.eps = eps;
    let x = Tensor::uniform(
        &[2, cfg.input_channels, cfg.input_height, cfg.input_width],
        0.0,
        1.0,
        &mut s.rng,
    );
    s.block("model", &store, vec![x], |p, v| {
        let mut ctx = if training {
            ForwardCtx::training(0.1)
        } else {
            ForwardCtx::inference()
        };
        net.forward(p, &v[0], &mut ctx)
    })?;
    Ok(s.out.remove(0).report)
}

pub fn model(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![CheckResult {
        name: "network 32x32, C=2".into(),
        report: network_check(&model_config(), seed, 3, TestPoint::Conditioned, true)?,
    }])
}
