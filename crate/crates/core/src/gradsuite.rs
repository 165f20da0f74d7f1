//! Finite-difference checks of every differentiable building block, in
//! double precision. Shared by the command line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_at, generate_phantom, stream_rng, PhantomSpec};
use crate::error::Result;
use crate::fusion::{attention, Fusion, FusionConfig};
use crate::llstm::{transfer, Llstm, LlstmConfig, StateVars};
use crate::model::{ModelConfig, UpAttLlstm};
use crate::nn::{Binding, Conv, Norm, ParamStore};
use crate::tensor::{grad_check, GradCheckReport, Graph, Padding, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(x * r)` for a fixed random `r`, so every output element matters.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(random(g.shape(x), &mut rng));
    let p = g.mul(x, r)?;
    g.sum(p)
}

/// Offsets every parameter so zero-initialised biases do not sit exactly
/// on an activation kink when the input is constant.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

/// Inputs = parameters of `store` followed by `extra`.
fn with_params(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = store.tensors().to_vec();
    v.extend(extra);
    v
}

fn split(vars: &[Var], n_params: usize) -> (Binding, &[Var]) {
    (Binding::from_vars(vars[..n_params].to_vec()), &vars[n_params..])
}

pub fn check_conv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let same = Conv::new(&mut store, "a", 2, 3, 3, 1, Padding::Same, true, &mut rng)?;
    let strided = Conv::new(&mut store, "b", 3, 2, 3, 2, Padding::Valid, false, &mut rng)?;
    let n = store.len();
    let inputs = with_params(&store, vec![random(&[2, 7, 7], &mut rng)]);
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, x) = split(v, n);
        let y = same.forward(g, &b, x[0])?;
        let y = strided.forward(g, &b, y)?;
        project(g, y, seed)
    })
}

pub fn check_attention(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&[5, 4], &mut rng), random(&[6, 4], &mut rng), random(&[6, 3], &mut rng)];
    grad_check(&inputs, STEP, None, |g, v| {
        let y = attention(g, v[0], v[1], v[2], 0.5)?;
        project(g, y, seed)
    })
}

pub fn check_layer_norm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let norm = Norm::new(&mut store, "n", 5)?;
    for t in store.tensors_mut() {
        *t = random(t.shape(), &mut rng);
    }
    let n = store.len();
    let inputs = with_params(&store, vec![random(&[4, 5], &mut rng), random(&[5, 3, 2], &mut rng)]);
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, x) = split(v, n);
        let rows = norm.forward(g, &b, x[0])?;
        let chans = norm.forward_channels(g, &b, x[1])?;
        let a = project(g, rows, seed)?;
        let c = project(g, chans, seed + 1)?;
        g.add(a, c)
    })
}

pub fn check_transfer(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // distinct values keep every window's maximum unique
    let mut vals: Vec<f64> = (0..4 * 6 * 6).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let inputs = vec![Tensor::new([4, 6, 6], vals)?];
    grad_check(&inputs, STEP, None, |g, v| {
        let y = transfer(g, v[0], 2, &[6, 3])?;
        project(g, y, seed)
    })
}

fn desk_cell(rng: &mut ChaCha8Rng) -> Result<(ParamStore<f64>, Llstm)> {
    let cfg = LlstmConfig { n_c: 2, n_l: 2, m: 1, w: 3, n1: 4, d_k: 3, forget_bias: 1.0 };
    let mut store = ParamStore::new();
    let cell = Llstm::new(&mut store, &cfg, rng)?;
    Ok((store, cell))
}

pub fn check_logic(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, cell) = desk_cell(&mut rng)?;
    let n = store.len();
    let inputs = with_params(&store, vec![random(&[7, 4, 4], &mut rng), random(&[4, 4, 4], &mut rng)]);
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, x) = split(v, n);
        let y = cell.logic(g, &b, x[0], x[1])?;
        project(g, y, seed)
    })
}

pub fn check_cell(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, cell) = desk_cell(&mut rng)?;
    let n = store.len();
    let extra = vec![random(&[4, 4, 4], &mut rng), random(&[4, 4, 4], &mut rng), random(&[3, 4, 4], &mut rng)];
    let inputs = with_params(&store, extra);
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, x) = split(v, n);
        let s = cell.cell_step(g, &b, StateVars { h: x[0], c: x[1] }, x[2])?;
        let h = project(g, s.h, seed)?;
        let c = project(g, s.c, seed + 1)?;
        g.add(h, c)
    })
}

pub fn check_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FusionConfig { n1: 16, p1: 8, p2: 2, d_k: 4, mlp_hidden: 4 };
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, &cfg, &mut rng)?;
    jitter(&mut store, &mut rng);
    let n = store.len();
    let inputs = with_params(&store, vec![random(&[1, 16, 16], &mut rng), random(&[2, 16, 16], &mut rng)]);
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, x) = split(v, n);
        let y = fusion.forward(g, &b, x[0], x[1])?;
        project(g, y, seed)
    })
}

/// Desk configuration of the whole network.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        fusion: FusionConfig { n1: 16, p1: 8, p2: 2, d_k: 4, mlp_hidden: 4 },
        n_c: 2,
        n_l: 2,
        m: 1,
        w: 3,
        forget_bias: 1.0,
        s: 2,
    }
}

pub fn check_model_loss(seed: u64) -> Result<GradCheckReport> {
    let cfg = desk_model_config();
    let mut model = UpAttLlstm::<f64>::new(&cfg, seed)?;
    jitter(&mut model.params, &mut ChaCha8Rng::seed_from_u64(seed));
    let spec = PhantomSpec {
        brain_radii: [7.0, 7.0, 3.5],
        lesion_radius: (2.0, 3.0),
        thrombus_radius: (1.0, 1.5),
        max_distance: 2.0,
        ..PhantomSpec::for_dims([16, 16, 8], 0)
    };
    let vol = generate_phantom(&spec, &mut stream_rng(seed, 0))?;
    let z = vol.thrombus().and_then(|m| m.center_of_mass([1.0; 3])).map_or(3, |c| c[2] as usize);
    let crop = crop_at(&vol, [0, 0, z.min(6)], 16, 2)?;
    let n = model.params.len();
    let inputs = model.params.tensors().to_vec();
    grad_check(&inputs, STEP, None, |g, v| {
        let (b, _) = split(v, n);
        let logits = model.forward_logits(g, &b, &crop)?;
        model.loss(g, &logits, &crop.gt, Default::default())
    })
}

type Check = fn(u64) -> Result<GradCheckReport>;

pub const CHECKS: &[(&str, Check)] = &[
    ("conv", check_conv),
    ("softmax-attention", check_attention),
    ("layer norm", check_layer_norm),
    ("transfer pooling", check_transfer),
    ("logic operator", check_logic),
    ("llstm cell", check_cell),
    ("fusion block", check_fusion),
    ("model loss", check_model_loss),
];

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    CHECKS
        .iter()
        .map(|&(name, f)| Ok(CheckResult { name, report: f(seed)? }))
        .collect()
}
