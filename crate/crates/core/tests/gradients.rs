use clasp::gradcheck::{check_gradients, GradCheck};
use clasp::model::{forward, HyperParams, MilPool, ModelInput, ModelParameters, ParamVars};
use clasp::train::{compute_loss, LossWeights};
use clasp::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.05..0.95)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// entry contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> clasp::tensor::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn assert_checked(name: &str, results: &[GradCheck]) {
    for (i, r) in results.iter().enumerate() {
        match r {
            GradCheck::Checked { max_rel_error } => {
                assert!(*max_rel_error < TOL, "{name} input {i}: relative error {max_rel_error:e}")
            }
            GradCheck::Skipped { kink_distance } => panic!("{name}: input too close to a kink ({kink_distance:e})"),
        }
    }
}

macro_rules! unary {
    ($name:ident, $x:expr, |$tape:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let mut rng = ChaCha8Rng::seed_from_u64(line!() as u64);
            let x: Tensor = $x(&mut rng);
            let r = check_gradients(&[x], H, |$tape, vars| {
                let $v = vars[0];
                let out = $body?;
                weighted_sum($tape, out, 99)
            })
            .unwrap();
            assert_checked(stringify!($name), &r);
        }
    };
}

unary!(sigmoid, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.sigmoid(x));
unary!(relu, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.relu(x));
unary!(leaky_relu, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.leaky_relu(x, 0.01));
unary!(scale, |r: &mut ChaCha8Rng| random(r, 2, 5), |t, x| t.scale(x, -2.5));
unary!(softmax, |r: &mut ChaCha8Rng| random(r, 3, 4), |t, x| t.softmax_rows(x, None));
unary!(softmax_masked, |r: &mut ChaCha8Rng| random(r, 3, 4), |t, x| t
    .softmax_rows(x, Some(&[true, false, true, true])));
unary!(transpose, |r: &mut ChaCha8Rng| random(r, 3, 4), |t, x| t.transpose(x));
unary!(gather_with_repeats, |r: &mut ChaCha8Rng| random(r, 5, 3), |t, x| t.gather_rows(x, &[4, 0, 4, 2]));
unary!(slice_cols, |r: &mut ChaCha8Rng| random(r, 3, 6), |t, x| t.slice_cols(x, 2, 3));
unary!(mask_rows, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.mask_rows(x, &[true, false, true, false]));
unary!(mean_rows, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.mean_rows(x, &[true, true, false, true]));
unary!(max_rows, |r: &mut ChaCha8Rng| random(r, 5, 3), |t, x| t.max_rows(x, &[true, true, true, false, true]));
unary!(mean, |r: &mut ChaCha8Rng| random(r, 4, 3), |t, x| t.mean(x));
unary!(bce, |r: &mut ChaCha8Rng| probs(r, 1, 4), |t, x| t.bce(x, &[1.0, 0.0, 0.0, 1.0], 1e-7));

#[test]
fn binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let c = random(&mut rng, 3, 4);
    let row = random(&mut rng, 1, 4);
    let col = random(&mut rng, 3, 1);

    let r = check_gradients(&[a.clone(), b], H, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 1)
    })
    .unwrap();
    assert_checked("matmul", &r);

    for (name, op) in [("add", 0), ("mul", 1)] {
        let r = check_gradients(&[a.clone(), c.clone()], H, |t, v| {
            let y = if op == 0 { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
            weighted_sum(t, y, 2)
        })
        .unwrap();
        assert_checked(name, &r);
    }

    let r = check_gradients(&[a.clone(), row], H, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y, 3)
    })
    .unwrap();
    assert_checked("add_row", &r);

    let r = check_gradients(&[a.clone(), col], H, |t, v| {
        let y = t.mul_col(v[0], v[1])?;
        weighted_sum(t, y, 4)
    })
    .unwrap();
    assert_checked("mul_col", &r);

    let r = check_gradients(&[a, c], H, |t, v| {
        let y = t.concat_cols(&[v[1], v[0], v[1]])?;
        weighted_sum(t, y, 5)
    })
    .unwrap();
    assert_checked("concat_cols", &r);
}

#[test]
fn conv1d_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, 6, 3);
    let w = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let b = random(&mut rng, 1, 2);
    let r = check_gradients(&[x.clone(), w, b], H, |t, v| {
        let y = t.conv1d(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, 6)
    })
    .unwrap();
    assert_checked("conv1d", &r);

    let g = random(&mut rng, 1, 3);
    let beta = random(&mut rng, 1, 3);
    let r = check_gradients(&[x, g, beta], H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert_checked("layer_norm", &r);
}

fn toy_hp(pool: MilPool) -> HyperParams {
    HyperParams {
        max_len: 8,
        audio_dim: 3,
        visual_dim: 5,
        dim: 4,
        num_classes: 3,
        global_anchors: 2,
        local_anchors: 1,
        windows: 2,
        heads: 2,
        mil_pool: pool,
        ..HyperParams::default()
    }
}

fn toy_input(rng: &mut ChaCha8Rng, hp: &HyperParams, valid_len: usize) -> ModelInput {
    let mut audio = random(rng, hp.max_len, hp.audio_dim);
    let mut visual = random(rng, hp.max_len, hp.visual_dim);
    for t in valid_len..hp.max_len {
        audio.data_mut()[t * hp.audio_dim..(t + 1) * hp.audio_dim].fill(0.0);
        visual.data_mut()[t * hp.visual_dim..(t + 1) * hp.visual_dim].fill(0.0);
    }
    ModelInput {
        audio,
        visual,
        valid: (0..hp.max_len).map(|t| t < valid_len).collect(),
    }
}

/// Checks every model parameter on the small toy. Draws parameter seeds
/// until the point is away from activation kinks.
fn full_model_check(hp: &HyperParams, valid_len: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = toy_input(&mut rng, hp, valid_len);
    let label = [true, false, true];
    for seed in 0..20 {
        let params = ModelParameters::init(hp, seed);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let results = check_gradients(&tensors, H, |tape, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()).collect());
            let out = forward(tape, &pv, hp, &input)?;
            compute_loss(tape, &out.vars, &label, &LossWeights::default())
        })
        .unwrap();
        if matches!(results[0], GradCheck::Skipped { .. }) {
            continue;
        }
        for (name, r) in names.iter().zip(&results) {
            let err = r.max_rel_error().unwrap();
            assert!(err < TOL, "{name}: relative error {err:e}");
        }
        return;
    }
    panic!("no kink-free parameter draw found");
}

#[test]
fn full_model_mean_pool() {
    full_model_check(&toy_hp(MilPool::Mean), 8);
}

#[test]
fn full_model_max_pool_with_padding() {
    full_model_check(&toy_hp(MilPool::Max), 7);
}

#[test]
fn full_model_ablations() {
    let mut hp = toy_hp(MilPool::Mean);
    hp.ablation.local_anchors = false;
    full_model_check(&hp, 8);
    let mut hp = toy_hp(MilPool::Mean);
    hp.ablation.global_anchors = false;
    full_model_check(&hp, 8);
    let mut hp = toy_hp(MilPool::Mean);
    hp.ablation.anchor_bypass = true;
    full_model_check(&hp, 8);
}
