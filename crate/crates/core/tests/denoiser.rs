mod common;

use common::{
    gate_closure_trial, gradient_check, random_inputs, set_by_suffix, tiny_config, uniform,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relumix_autograd::{Graph, Tensor};
use relumix_core::denoiser::{
    gated_cross_attention, AttnProj, Denoiser, ForwardOptions, GateState, ParamBuilder, Params,
};

struct GateFixture {
    proj: AttnProj,
    gate: GateState,
    params: Params<f64>,
}

fn gate_fixture(dim: usize, ctx_dim: usize, seed: u64) -> GateFixture {
    let mut pb = ParamBuilder::new();
    let proj = AttnProj::new(&mut pb, dim, ctx_dim, 2);
    let gate = GateState::new(&mut pb, dim);
    let params = Params::init(&pb.finish(), seed, seed + 1);
    GateFixture { proj, gate, params }
}

/// Runs gated and ungated cross-attention on `[frames, nq, dim]` queries.
fn run_gate(
    f: &GateFixture,
    frames: usize,
    nq: usize,
    nk: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let dim = f.params.get(f.gate.weight).shape()[0];
    let ctx_dim = f.params.entries()[1].tensor.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::inference();
    let bound = f.params.bind(&mut g);
    let q = g.constant(Tensor::from_vec(
        &[frames, nq, dim],
        uniform(frames * nq * dim, &mut rng),
    ));
    let c = g.constant(Tensor::from_vec(
        &[frames, nk, ctx_dim],
        uniform(frames * nk * ctx_dim, &mut rng),
    ));
    let gated = gated_cross_attention(&mut g, &bound, &f.proj, &f.gate, q, c, frames);
    let plain = f.proj.forward(&mut g, &bound, q, c);
    (
        g.value(gated).data().to_vec(),
        g.value(plain).data().to_vec(),
    )
}

#[test]
fn gate_closed_matches_network_without_cross_attention() {
    for seed in 0..10 {
        assert!(gate_closure_trial(seed), "seed {seed}");
    }
}

#[test]
fn zero_alpha_zeroes_the_sublayer() {
    let f = gate_fixture(8, 6, 3);
    let (gated, plain) = run_gate(&f, 2, 5, 4, 9);
    assert!(gated.iter().all(|&v| v == 0.0));
    assert!(plain.iter().any(|&v| v != 0.0));
}

#[test]
fn neutral_gate_halves_attention() {
    let mut f = gate_fixture(8, 6, 4);
    f.params
        .get_mut(f.gate.weight)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    f.params.get_mut(f.gate.bias).data_mut()[0] = 0.0;
    f.params.get_mut(f.gate.alpha).data_mut()[0] = 1.0;
    let (gated, plain) = run_gate(&f, 3, 4, 2, 10);
    for (a, b) in gated.iter().zip(&plain) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn single_context_token_gives_identical_rows() {
    let mut f = gate_fixture(8, 6, 5);
    f.params.get_mut(f.gate.alpha).data_mut()[0] = 1.0;
    let (gated, _) = run_gate(&f, 1, 6, 1, 11);
    let first = &gated[..8];
    for row in gated.chunks(8) {
        for (a, b) in row.iter().zip(first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (seed, frames, temporal) in [
        (1, 2, true),
        (2, 2, false),
        (3, 3, true),
        (4, 1, true),
        (5, 3, false),
    ] {
        let err = gradient_check(seed, frames, temporal);
        assert!(err <= 1e-4, "config {seed}: relative error {err:e}");
    }
}

#[test]
fn frame_permutation_equivariance_without_temporal_attention() {
    let frames = 3;
    let model = Denoiser::new(tiny_config(frames, false)).unwrap();
    let mut params = model.init_params::<f64>(21);
    set_by_suffix(&mut params, ".gate.alpha", 0.8);
    let (x, ctx, c) = random_inputs(&model, 8, 8, 22);
    let perm = [2usize, 0, 1];
    let permute = |t: &Tensor<f64>| {
        let per = t.len() / frames;
        let data: Vec<f64> = perm
            .iter()
            .flat_map(|&p| t.data()[p * per..(p + 1) * per].to_vec())
            .collect();
        Tensor::from_vec(t.shape(), data)
    };
    let opts = ForwardOptions::default();
    let out = model
        .predict(&params, x.clone(), &[c], Some(ctx.clone()), &opts)
        .unwrap();
    let out_p = model
        .predict(&params, permute(&x), &[c], Some(permute(&ctx)), &opts)
        .unwrap();
    for (a, b) in permute(&out).data().iter().zip(out_p.data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn gates_exist_only_with_gating() {
    let full = Denoiser::new(tiny_config(2, true)).unwrap();
    assert_eq!(full.gates().len(), 5);
    let fr = Denoiser::new(tiny_config(2, true).with_variant(relumix_core::Variant::Fr)).unwrap();
    assert!(fr.gates().is_empty());
    assert_eq!(fr.config().in_channels, 6);
}

#[test]
fn forward_rejects_bad_shapes() {
    let model = Denoiser::new(tiny_config(2, true)).unwrap();
    let params = model.init_params::<f64>(1);
    let x = Tensor::<f64>::zeros(&[2, 8, 8, 6]);
    assert!(model
        .predict(&params, x, &[0.0], None, &ForwardOptions::default())
        .is_err());
    let x = Tensor::<f64>::zeros(&[3, 8, 8, 9]);
    assert!(model
        .predict(&params, x, &[0.0], None, &ForwardOptions::default())
        .is_err());
    let x = Tensor::<f64>::full(&[2, 8, 8, 9], f64::NAN);
    assert!(model
        .predict(&params, x, &[0.0], None, &ForwardOptions::default())
        .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gate_value_lies_between_zero_and_alpha(alpha in -3.0f64..3.0, seed in 0u64..1000) {
        let mut f = gate_fixture(8, 6, seed);
        f.params.get_mut(f.gate.alpha).data_mut()[0] = alpha;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::inference();
        let bound = f.params.bind(&mut g);
        let q = g.constant(Tensor::from_vec(&[4, 3, 8], uniform(96, &mut rng).iter().map(|v| v * 10.0).collect()));
        let gv = f.gate.gate(&mut g, &bound, q, 2);
        for &v in g.value(gv).data() {
            prop_assert!(v >= alpha.min(0.0) && v <= alpha.max(0.0));
        }
    }
}
