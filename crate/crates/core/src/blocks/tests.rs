use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::AttentionRoles;
use crate::gradcheck::grad_check;
use crate::params::ParamStore;
use crate::ssm::{SsmParams, DELTA_FLOOR};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn block_store(c: usize, heads: usize, depth: usize, seed: u64, tied: bool) -> (ParamStore<f64>, Vec<MmSsbWeights>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let cfg = MmcaConfig::new(c, heads, AttentionRoles::TextQuery).unwrap();
    let blocks = (0..depth)
        .map(|i| MmSsbWeights::init(&mut b.scope(&format!("block{i}")), cfg, 4, tied))
        .collect();
    (store, blocks)
}

/// Step sizes around softplus(0) so scan decay gradients sit well above
/// finite-difference noise.
fn widen_steps(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("dt_up.bias") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, &mut rng)).unwrap();
        }
    }
}

struct Features {
    image: Tensor<f64>,
    mask: Tensor<f64>,
    text: Tensor<f64>,
    target: Tensor<f64>,
}

fn features(h: usize, w: usize, c: usize, lt: usize, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Features {
        image: random(&[h, w, c], &mut rng),
        mask: random(&[h, w, c], &mut rng),
        text: random(&[lt, c], &mut rng),
        target: Tensor::from_fn(vec![h, w], |_| rng.gen_range(0.0..1.0)),
    }
}

struct Placed {
    tape: Tape<f64>,
    p: Bound,
    vars: [Var; 4],
}

fn place(store: &ParamStore<f64>, f: &Features) -> Placed {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let vars = [
        tape.constant(f.image.clone()),
        tape.constant(f.mask.clone()),
        tape.constant(f.text.clone()),
        tape.constant(f.target.clone()),
    ];
    Placed { tape, p, vars }
}

fn zero(store: &mut ParamStore<f64>, id: ParamId) {
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::zeros(shape)).unwrap();
}

fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    (0..cout)
        .map(|j| {
            let acc: f64 = (0..cin).map(|i| x[i] * w.data()[i * cout + j]).sum();
            acc + b.map_or(0.0, |b| b.data()[j])
        })
        .collect()
}

fn linear(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    affine(x, store.get(l.weight), l.bias.map(|b| store.get(b)))
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn layer_norm(store: &ParamStore<f64>, n: &Norm, x: &[f64]) -> Vec<f64> {
    let len = x.len() as f64;
    let mean = x.iter().sum::<f64>() / len;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    let (g, b) = (store.get(n.gamma).data(), store.get(n.beta).data());
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + crate::params::LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

/// One token through a scan from a zero state: `y = Δ·x·⟨B, C⟩ + D·x`.
fn single_token_scan(store: &ParamStore<f64>, p: &SsmParams, x: &[f64]) -> Vec<f64> {
    let low = linear(store, &p.dt_down, x);
    let raw = linear(store, &p.dt_up, &low);
    let b = linear(store, &p.b_proj, x);
    let c = linear(store, &p.c_proj, x);
    let bc: f64 = b.iter().zip(&c).map(|(u, v)| u * v).sum();
    let d = store.get(p.d).data();
    (0..x.len())
        .map(|k| {
            let delta = (1.0 + raw[k].exp()).ln().max(DELTA_FLOOR);
            delta * x[k] * bc + d[k] * x[k]
        })
        .collect()
}

#[test]
fn tv_ssm_zero_mask_branch_leaves_only_the_norm_bias() {
    let (mut store, blocks) = block_store(4, 2, 1, 1, false);
    let w = blocks[0].tv_ssm;
    zero(&mut store, w.mask_in_proj.weight);
    zero(&mut store, w.mask_in_proj.bias.unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    store.set(w.out_norm.beta, random(&[w.latent], &mut rng)).unwrap();
    let f = features(3, 3, 4, 2, 3);
    let pl = place(&store, &f);
    let out = tv_ssm(&pl.tape, &pl.p, &w, pl.vars[0], pl.vars[1], pl.vars[2]).unwrap();
    let out = pl.tape.value(out);
    let expect = linear(&store, &w.out_proj, store.get(w.out_norm.beta).data());
    for px in out.data().chunks(4) {
        for (a, b) in px.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tv_ssm_single_cell_matches_hand_composition() {
    let c = 3;
    let (store, blocks) = block_store(c, 1, 1, 4, true);
    let w = blocks[0].tv_ssm;
    let f = features(1, 1, c, 1, 5);
    let pl = place(&store, &f);
    let out = tv_ssm(&pl.tape, &pl.p, &w, pl.vars[0], pl.vars[1], pl.vars[2]).unwrap();
    let out = pl.tape.value(out);

    let x = linear(&store, &w.image_in_proj, f.image.data());
    // A 3×3 depthwise kernel on a 1×1 map only ever touches its centre tap.
    let (k, bias) = (store.get(w.pre_scan_conv.kernel).data(), store.get(w.pre_scan_conv.bias).data());
    let x: Vec<f64> = (0..w.latent).map(|i| silu(k[4 * w.latent + i] * x[i] + bias[i])).collect();
    let text = linear(&store, &w.text_in_proj, f.text.data());
    let spatial = single_token_scan(&store, &w.scan.spatial[0], &x);
    let textual = single_token_scan(&store, &w.scan.text, &text);
    let mask: Vec<f64> = linear(&store, &w.mask_in_proj, f.mask.data()).into_iter().map(silu).collect();
    let gated: Vec<f64> = (0..w.latent).map(|i| (4.0 * spatial[i] + textual[i]) * mask[i]).collect();
    let expect = linear(&store, &w.out_proj, &layer_norm(&store, &w.out_norm, &gated));
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn tv_ssm_rejects_mismatched_inputs() {
    let (store, blocks) = block_store(4, 2, 1, 6, false);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let a = tape.constant(Tensor::zeros(vec![2, 2, 4]));
    let b = tape.constant(Tensor::zeros(vec![2, 3, 4]));
    let t = tape.constant(Tensor::zeros(vec![1, 4]));
    assert!(matches!(tv_ssm(&tape, &p, &blocks[0].tv_ssm, a, b, t), Err(Error::Dimension { .. })));
    let t5 = tape.constant(Tensor::zeros(vec![1, 5]));
    assert!(matches!(tv_ssm(&tape, &p, &blocks[0].tv_ssm, a, a, t5), Err(Error::Dimension { .. })));
}

#[test]
fn tv_ssm_gradients_match_finite_differences() {
    let (mut store, blocks) = block_store(4, 2, 1, 7, false);
    widen_steps(&mut store, 70);
    let w = blocks[0].tv_ssm;
    let f = features(3, 2, 4, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let proj = random(&[3, 2, 4], &mut rng).map(|v| 0.02 * v);
    let mut inputs = vec![f.image.clone(), f.mask.clone(), f.text.clone()];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = grad_check(
        |tape: &Tape<f64>, v| {
            let p = Bound::from_vars(v[3..].to_vec());
            let y = tv_ssm(tape, &p, &w, v[0], v[1], v[2])?;
            let pw = tape.constant(proj.clone());
            let m = tape.mul(y, pw)?;
            Ok(tape.sum(m))
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

fn ln1_of(store: &ParamStore<f64>, w: &MmSsbWeights, f: &Features) -> Tensor<f64> {
    let pl = place(store, f);
    pl.tape.value(w.ln1.forward(&pl.tape, &pl.p, pl.vars[0]).unwrap())
}

#[test]
fn zero_state_space_branch_leaves_scaled_residual() {
    let (mut store, blocks) = block_store(4, 2, 1, 10, false);
    let w = blocks[0];
    zero(&mut store, w.tv_ssm.out_proj.weight);
    zero(&mut store, w.tv_ssm.out_proj.bias.unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    store.set(w.s, random(&[4], &mut rng)).unwrap();
    let f = features(3, 3, 4, 2, 12);
    let pl = place(&store, &f);
    let z = pl.tape.value(mm_ssb(&pl.tape, &pl.p, &w, pl.vars[0], pl.vars[1], pl.vars[2], pl.vars[3]).unwrap().z);
    let normed = ln1_of(&store, &w, &f);
    let s = store.get(w.s).data();
    for i in 0..z.numel() {
        assert_eq!(z.data()[i], normed.data()[i] * s[i % 4]);
    }
}

#[test]
fn zero_target_mask_returns_z() {
    let (store, blocks) = block_store(4, 2, 1, 13, false);
    let mut f = features(3, 3, 4, 2, 14);
    f.target = Tensor::zeros(vec![3, 3]);
    let pl = place(&store, &f);
    let o = mm_ssb(&pl.tape, &pl.p, &blocks[0], pl.vars[0], pl.vars[1], pl.vars[2], pl.vars[3]).unwrap();
    assert_eq!(pl.tape.value(o.out).data(), pl.tape.value(o.z).data());
}

#[test]
fn doubling_s_adds_one_residual_term() {
    let (mut store, blocks) = block_store(4, 2, 1, 15, false);
    let w = blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = random(&[4], &mut rng);
    let f = features(3, 3, 4, 2, 17);
    let z_for = |store: &ParamStore<f64>| {
        let pl = place(store, &f);
        pl.tape.value(mm_ssb(&pl.tape, &pl.p, &w, pl.vars[0], pl.vars[1], pl.vars[2], pl.vars[3]).unwrap().z)
    };
    store.set(w.s, s.clone()).unwrap();
    let z1 = z_for(&store);
    store.set(w.s, s.map(|v| 2.0 * v)).unwrap();
    let z2 = z_for(&store);
    let normed = ln1_of(&store, &w, &f);
    for i in 0..z1.numel() {
        let diff = z2.data()[i] - z1.data()[i];
        assert!((diff - s.data()[i % 4] * normed.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn single_block_stack_equals_single_block() {
    let (store, blocks) = block_store(4, 2, 1, 18, false);
    let f = features(3, 3, 4, 2, 19);
    let pl = place(&store, &f);
    let [i, m, t, g] = pl.vars;
    let cfg = MmSsgConfig {
        blocks_per_group: 1,
        num_groups: 1,
    };
    let stacked = mm_ssg_stack(&pl.tape, &pl.p, cfg, &blocks, i, m, t, g).unwrap();
    let single = mm_ssb(&pl.tape, &pl.p, &blocks[0], i, m, t, g).unwrap().out;
    assert_eq!(pl.tape.value(stacked).data(), pl.tape.value(single).data());
}

#[test]
fn branch_free_second_block_reduces_to_layer_norm() {
    // With both branches silenced a block is `s ⊙ ln1(x)`, so the closest
    // thing to an identity block is a plain layer norm of its input.
    let (mut store, blocks) = block_store(4, 2, 2, 20, false);
    let second = blocks[1];
    zero(&mut store, second.tv_ssm.out_proj.weight);
    zero(&mut store, second.tv_ssm.out_proj.bias.unwrap());
    zero(&mut store, second.mmca.out_proj.weight);
    zero(&mut store, second.mmca.out_proj.bias.unwrap());
    let f = features(3, 3, 4, 2, 21);
    let pl = place(&store, &f);
    let [i, m, t, g] = pl.vars;
    let cfg = MmSsgConfig {
        blocks_per_group: 2,
        num_groups: 1,
    };
    let stacked = pl.tape.value(mm_ssg_stack(&pl.tape, &pl.p, cfg, &blocks, i, m, t, g).unwrap());
    let first = mm_ssb(&pl.tape, &pl.p, &blocks[0], i, m, t, g).unwrap().out;
    let expect = pl.tape.value(second.ln1.forward(&pl.tape, &pl.p, first).unwrap());
    assert!(stacked.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn stack_checks_weight_count_and_preserves_shape() {
    let (store, blocks) = block_store(4, 2, 4, 22, true);
    let f = features(5, 3, 4, 3, 23);
    let pl = place(&store, &f);
    let [i, m, t, g] = pl.vars;
    let bad = MmSsgConfig {
        blocks_per_group: 3,
        num_groups: 1,
    };
    assert!(matches!(mm_ssg_stack(&pl.tape, &pl.p, bad, &blocks, i, m, t, g), Err(Error::Config(_))));
    let empty = MmSsgConfig {
        blocks_per_group: 0,
        num_groups: 2,
    };
    assert!(matches!(mm_ssg_stack(&pl.tape, &pl.p, empty, &[], i, m, t, g), Err(Error::Config(_))));
    for (groups, per) in [(1, 1), (2, 1), (2, 2)] {
        let cfg = MmSsgConfig {
            blocks_per_group: per,
            num_groups: groups,
        };
        let y = mm_ssg_stack(&pl.tape, &pl.p, cfg, &blocks[..groups * per], i, m, t, g).unwrap();
        assert_eq!(pl.tape.shape(y), [5, 3, 4]);
    }
}

#[test]
fn depth_two_stack_gradients_match_finite_differences() {
    let (mut store, blocks) = block_store(8, 2, 2, 24, false);
    widen_steps(&mut store, 240);
    let f = features(6, 6, 8, 5, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let proj = random(&[6, 6, 8], &mut rng).map(|v| 0.02 * v);
    let cfg = MmSsgConfig {
        blocks_per_group: 1,
        num_groups: 2,
    };
    let mut inputs = vec![f.image.clone(), f.mask.clone(), f.text.clone(), f.target.clone()];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = grad_check(
        |tape: &Tape<f64>, v| {
            let p = Bound::from_vars(v[4..].to_vec());
            let y = mm_ssg_stack(tape, &p, cfg, &blocks, v[0], v[1], v[2], v[3])?;
            let pw = tape.constant(proj.clone());
            let m = tape.mul(y, pw)?;
            Ok(tape.sum(m))
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

