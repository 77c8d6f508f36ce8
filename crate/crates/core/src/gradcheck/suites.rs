//! Module-tagged gradient suites: fixed test points for every differentiable
//! operation, checked with [`grad_check`](super::grad_check).
//!
//! Each point is chosen so true gradients sit well above central-difference
//! rounding noise in 64-bit arithmetic. The same points run at 32 bits with
//! a coarser step; those results are informational only.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport};
use crate::attention::{mmca, AttentionRoles, MmcaConfig, MmcaWeights};
use crate::autograd::{Tape, Unary, Var};
use crate::blocks::{mm_ssg_stack, tv_ssm, MmSsbWeights, MmSsgConfig};
use crate::error::{Error, Result};
use crate::losses::{charbonnier_loss, CharbonnierConfig, DetectionTargets, DetectorConfig, SurrogateDetector};
use crate::params::{Bound, Builder, ParamStore};
use crate::ssm::{selective_scan_1d, SsmParams};
use crate::tensor::{Precision, Real, Tensor};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SuiteModule {
    Substrate,
    Ssm,
    Attention,
    Blocks,
    Losses,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 5] = [
        SuiteModule::Substrate,
        SuiteModule::Ssm,
        SuiteModule::Attention,
        SuiteModule::Blocks,
        SuiteModule::Losses,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SuiteModule::Substrate => "substrate",
            SuiteModule::Ssm => "ssm",
            SuiteModule::Attention => "attention",
            SuiteModule::Blocks => "blocks",
            SuiteModule::Losses => "losses",
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteModule::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                let tags: Vec<_> = SuiteModule::ALL.iter().map(|m| m.tag()).collect();
                Error::Config(format!("unknown module {s:?}; expected one of {}", tags.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: SuiteModule,
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed(GRAD_TOLERANCE)
    }
}

/// Central-difference step for a precision: 32-bit rounding needs a much
/// coarser probe to resolve anything.
fn step<T: Real>(h64: f64) -> f64 {
    match T::PRECISION {
        Precision::F64 => h64,
        Precision::F32 => 1e-2,
    }
}

fn random<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(lo..hi)))
}

fn seeded<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    random(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contracts an output with fixed random weights into a scalar.
fn project<T: Real>(tape: &Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(seeded(&tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Suite<T: Real> {
    module: SuiteModule,
    results: Vec<CaseResult>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Suite<T> {
    fn new(module: SuiteModule) -> Self {
        Suite {
            module,
            results: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn case<F>(&mut self, name: &str, inputs: &[Tensor<T>], h64: f64, f: F) -> Result<()>
    where
        F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, inputs, step::<T>(h64))?;
        self.results.push(CaseResult {
            module: self.module,
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

fn substrate<T: Real>() -> Result<Vec<CaseResult>> {
    let mut s = Suite::<T>::new(SuiteModule::Substrate);
    let m = seeded::<T>(&[3, 4], 40);
    let m2 = seeded::<T>(&[3, 4], 41);
    let pos = m.map(|v| v.abs() + T::lit(0.5));
    let h = 1e-5;
    s.case("add", &[m.clone(), m2.clone()], h, |t, v| project(t, t.add(v[0], v[1])?, 1))?;
    s.case("sub", &[m.clone(), m2.clone()], h, |t, v| project(t, t.sub(v[0], v[1])?, 1))?;
    s.case("mul", &[m.clone(), m2.clone()], h, |t, v| project(t, t.mul(v[0], v[1])?, 1))?;
    s.case("scale", std::slice::from_ref(&m), h, |t, v| project(t, t.scale(v[0], T::lit(-1.7)), 2))?;
    s.case("add_scalar", std::slice::from_ref(&m), h, |t, v| project(t, t.add_scalar(v[0], T::lit(0.3)), 2))?;
    for (name, f) in [
        ("neg", Unary::Neg),
        ("exp", Unary::Exp),
        ("square", Unary::Square),
        ("sigmoid", Unary::Sigmoid),
        ("silu", Unary::Silu),
        ("softplus", Unary::Softplus),
        ("tanh", Unary::Tanh),
    ] {
        s.case(name, std::slice::from_ref(&m), h, |t, v| project(t, t.unary(v[0], f), 3))?;
    }
    for (name, f) in [("log", Unary::Log), ("sqrt", Unary::Sqrt), ("recip", Unary::Recip)] {
        s.case(name, std::slice::from_ref(&pos), h, |t, v| project(t, t.unary(v[0], f), 3))?;
    }
    let wide = m.map(|x| x * T::lit(1.7));
    s.case("smooth_l1", &[wide], h, |t, v| project(t, t.smooth_l1(v[0], T::one()), 4))?;
    s.case("clamp_min", std::slice::from_ref(&m), h, |t, v| project(t, t.clamp_min(v[0], T::lit(-0.95)), 4))?;
    s.case("sum", std::slice::from_ref(&m), h, |t, v| project(t, t.sum(v[0]), 4))?;
    s.case("mean", std::slice::from_ref(&m), h, |t, v| Ok(t.mean(v[0])))?;
    s.case("sum_axis", std::slice::from_ref(&m), h, |t, v| project(t, t.sum_axis(v[0], 1)?, 5))?;
    s.case("mean_axis", std::slice::from_ref(&m), h, |t, v| project(t, t.mean_axis(v[0], 0)?, 5))?;
    s.case("reshape", std::slice::from_ref(&m), h, |t, v| project(t, t.reshape(v[0], vec![2, 6])?, 6))?;
    s.case("transpose", std::slice::from_ref(&m), h, |t, v| project(t, t.transpose(v[0])?, 6))?;
    s.case("matmul", &[m.clone(), seeded(&[4, 5], 42)], h, |t, v| {
        project(t, t.matmul(v[0], v[1])?, 7)
    })?;
    s.case("softmax", std::slice::from_ref(&m), h, |t, v| project(t, t.softmax(v[0])?, 8))?;
    s.case("log_softmax", std::slice::from_ref(&m), h, |t, v| project(t, t.log_softmax(v[0])?, 8))?;
    s.case("slice", std::slice::from_ref(&m), h, |t, v| project(t, t.slice(v[0], 1, 1, 2)?, 9))?;
    s.case("concat", &[m.clone(), seeded(&[3, 2], 43)], h, |t, v| {
        project(t, t.concat(&[v[0], v[1]], 1)?, 9)
    })?;
    let rows: Arc<[usize]> = vec![2, 0, 0, 1].into();
    s.case("gather_rows", std::slice::from_ref(&m), h, |t, v| project(t, t.gather_rows(v[0], rows.clone())?, 10))?;
    let flat: Arc<[usize]> = vec![11, 3, 3, 0].into();
    s.case("gather", std::slice::from_ref(&m), h, |t, v| project(t, t.gather(v[0], flat.clone())?, 10))?;
    s.case("embedding", std::slice::from_ref(&m), h, |t, v| project(t, t.embedding(v[0], &[2, 0, 2])?, 11))?;
    s.case("broadcast_rows", &[seeded(&[4], 44)], h, |t, v| {
        project(t, t.broadcast_rows(v[0], vec![2, 3, 4])?, 11)
    })?;
    s.case("add_channel", &[m.clone(), seeded(&[4], 45)], h, |t, v| {
        project(t, t.add_channel(v[0], v[1])?, 12)
    })?;
    s.case("mul_channel", &[m.clone(), seeded(&[4], 45)], h, |t, v| {
        project(t, t.mul_channel(v[0], v[1])?, 12)
    })?;
    s.case("mul_leading", &[seeded(&[2, 3, 4], 46), seeded(&[2, 3], 47)], h, |t, v| {
        project(t, t.mul_leading(v[0], v[1])?, 12)
    })?;
    s.case(
        "linear",
        &[seeded(&[2, 3, 4], 48), seeded(&[4, 5], 49), seeded(&[5], 50)],
        h,
        |t, v| project(t, t.linear(v[0], v[1], Some(v[2]))?, 13),
    )?;
    s.case(
        "layer_norm",
        &[seeded(&[3, 6], 51), seeded(&[6], 52), seeded(&[6], 53)],
        h,
        |t, v| project(t, t.layer_norm(v[0], v[1], v[2], T::lit(1e-5))?, 14),
    )?;
    s.case(
        "conv2d",
        &[seeded(&[5, 4, 2], 54), seeded(&[3, 3, 2, 2], 55), seeded(&[2], 56)],
        h,
        |t, v| project(t, t.conv2d(v[0], v[1], v[2], 2, 1)?, 15),
    )?;
    s.case(
        "depthwise_conv2d",
        &[seeded(&[4, 5, 3], 57), seeded(&[3, 3, 3], 58), seeded(&[3], 59)],
        h,
        |t, v| project(t, t.depthwise_conv2d(v[0], v[1], v[2], 1)?, 16),
    )?;
    Ok(s.results)
}

/// Scan weights with every tensor randomized, step sizes near softplus(0).
fn scan_params<T: Real>(channels: usize, state: usize, seed: u64) -> (ParamStore<T>, SsmParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::init(&mut Builder::new(&mut store, &mut rng), channels, state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let a_log = random::<T>(&[channels, state], -1.5, 1.5, &mut rng);
    store.set(params.a_log, a_log).expect("a_log shape");
    store.set(params.d, random(&[channels], -1.0, 1.0, &mut rng)).expect("d shape");
    let bias = params.dt_up.bias.expect("dt bias");
    store.set(bias, random(&[channels], -1.0, 1.0, &mut rng)).expect("bias shape");
    (store, params)
}

fn ssm<T: Real>() -> Result<Vec<CaseResult>> {
    let mut s = Suite::<T>::new(SuiteModule::Ssm);
    let (store, p) = scan_params::<T>(3, 2, 13);
    let mut inputs = vec![seeded::<T>(&[5, 3], 14)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    s.case("selective_scan_1d", &inputs, 1e-5, |tape, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let y = selective_scan_1d(tape, &bound, v[0], &p)?;
        project(tape, y, 15)
    })?;
    Ok(s.results)
}

fn attention<T: Real>() -> Result<Vec<CaseResult>> {
    let mut s = Suite::<T>::new(SuiteModule::Attention);
    for (name, roles) in [
        ("mmca_text_query", AttentionRoles::TextQuery),
        ("mmca_fusion_query", AttentionRoles::FusionQuery),
    ] {
        let mut store = ParamStore::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = MmcaWeights::init(&mut Builder::new(&mut store, &mut rng), MmcaConfig::new(4, 2, roles)?);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut inputs = vec![
            random::<T>(&[3, 3, 4], -1.0, 1.0, &mut rng),
            random(&[3, 3, 4], -1.0, 1.0, &mut rng),
            random(&[3, 4], -1.0, 1.0, &mut rng),
            random(&[3, 3], 0.0, 1.0, &mut rng),
        ];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        s.case(name, &inputs, 1e-5, |tape, v| {
            let p = Bound::from_vars(v[4..].to_vec());
            let o = mmca(tape, &p, &w, v[2], v[0], v[1], v[2], v[3])?;
            project(tape, o.out, 17)
        })?;
    }
    Ok(s.results)
}

/// Block weights with randomized step-size biases, so scan decay gradients
/// rise above finite-difference noise.
fn block_store<T: Real>(c: usize, depth: usize, seed: u64) -> Result<(ParamStore<T>, Vec<MmSsbWeights>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let cfg = MmcaConfig::new(c, 2, AttentionRoles::TextQuery)?;
    let blocks = (0..depth)
        .map(|i| MmSsbWeights::init(&mut b.scope(&format!("block{i}")), cfg, 4, false))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 10);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("dt_up.bias") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, -1.0, 1.0, &mut rng))?;
        }
    }
    Ok((store, blocks))
}

/// Image, mask and text features plus a target mask in `[0, 1]`.
fn block_inputs<T: Real>(h: usize, w: usize, c: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        random(&[h, w, c], -1.0, 1.0, &mut rng),
        random(&[h, w, c], -1.0, 1.0, &mut rng),
        random(&[5, c], -1.0, 1.0, &mut rng),
        random(&[h, w], 0.0, 1.0, &mut rng),
    ]
}

/// Readout weights scaled down so loss-level rounding stays far below the
/// relative-error floor on analytically zero coordinates.
fn small_readout<T: Real>(tape: &Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(seeded::<T>(&tape.shape(y), seed).map(|v| v * T::lit(0.02)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn blocks<T: Real>() -> Result<Vec<CaseResult>> {
    let mut s = Suite::<T>::new(SuiteModule::Blocks);
    let (store, weights) = block_store::<T>(4, 1, 7)?;
    let w = weights[0].tv_ssm;
    let mut inputs = block_inputs::<T>(3, 2, 4, 8);
    inputs.truncate(3);
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    s.case("tv_ssm", &inputs, 1e-4, |tape, v| {
        let p = Bound::from_vars(v[3..].to_vec());
        let y = tv_ssm(tape, &p, &w, v[0], v[1], v[2])?;
        small_readout(tape, y, 9)
    })?;

    let (store, weights) = block_store::<T>(8, 2, 24)?;
    let cfg = MmSsgConfig {
        blocks_per_group: 1,
        num_groups: 2,
    };
    let mut inputs = block_inputs::<T>(6, 6, 8, 25);
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    s.case("mm_ssb_depth_2", &inputs, 1e-4, |tape, v| {
        let p = Bound::from_vars(v[4..].to_vec());
        let y = mm_ssg_stack(tape, &p, cfg, &weights, v[0], v[1], v[2], v[3])?;
        small_readout(tape, y, 26)
    })?;
    Ok(s.results)
}

fn losses<T: Real>() -> Result<Vec<CaseResult>> {
    let mut s = Suite::<T>::new(SuiteModule::Losses);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random::<T>(&[3, 3, 3], 0.0, 1.0, &mut rng);
    let v = random::<T>(&[3, 3, 3], 0.0, 1.0, &mut rng);
    let i = random::<T>(&[3, 3, 3], 0.0, 1.0, &mut rng);
    // unequal weights: with α = β the two terms cancel wherever Î lies
    // between f and v
    let cfg = CharbonnierConfig {
        alpha: 0.3,
        beta: 0.7,
        ..CharbonnierConfig::default()
    };
    s.case("charbonnier_loss", &[i], 1e-6, |tape, x| {
        let (f, v) = (tape.constant(f.clone()), tape.constant(v.clone()));
        charbonnier_loss(tape, x[0], f, v, &cfg)
    })?;

    // a narrow detector on a 2×2 anchor grid, box away from the IoU thresholds
    let det_cfg = DetectorConfig {
        width: 8,
        ..DetectorConfig::default()
    };
    let det = SurrogateDetector::<T>::new(det_cfg, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets = DetectionTargets {
        boxes: vec![[2.0, 3.0, 13.0, 12.0]],
        labels: vec![1],
        width: 16,
        height: 16,
    };
    let mut inputs = vec![random::<T>(&[16, 16, 3], 0.0, 1.0, &mut rng)];
    inputs.extend(det.store.iter().map(|(_, t)| t.clone()));
    s.case("detection_loss", &inputs, 1e-4, |tape, x| {
        let p = Bound::from_vars(x[1..].to_vec());
        Ok(det.loss(tape, &p, x[0], &targets)?.total)
    })?;
    Ok(s.results)
}

/// Runs the suite of one module at precision `T`.
pub fn run_suite<T: Real>(module: SuiteModule) -> Result<Vec<CaseResult>> {
    match module {
        SuiteModule::Substrate => substrate::<T>(),
        SuiteModule::Ssm => ssm::<T>(),
        SuiteModule::Attention => attention::<T>(),
        SuiteModule::Blocks => blocks::<T>(),
        SuiteModule::Losses => losses::<T>(),
    }
}
