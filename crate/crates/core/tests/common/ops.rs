//! Finite-difference harness for single autograd ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscaf_core::autograd::{
    grad_check, mha, BnMode, GradCheckOptions, GradCheckReport, MhaWeights, ParamStore, Tape, Tensor, TensorError, Var,
};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed random projection so that every output element influences the loss.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.leaf(random(&mut rng, &shape), false);
    let n: usize = shape.iter().product();
    let flat_y = tape.reshape(y, &[1, n])?;
    let flat_r = tape.reshape(r, &[n, 1])?;
    let s = tape.matmul(flat_y, flat_r)?;
    tape.reshape(s, &[1])
}

/// Checks every input coordinate of `f` applied to random inputs of `shapes`.
pub fn op_grad_check<F>(shapes: &[&[usize]], seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(&format!("in{i}"), random(&mut rng, s)))
        .collect();
    grad_check(
        &mut store,
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
            let y = f(tape, &vars, &mut r)?;
            project(tape, y, seed)
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
}

pub type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var, TensorError>>;

/// One op under test: input shapes and the expression applied to them.
pub struct OpCase {
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

impl OpCase {
    pub fn shapes(&self) -> Vec<&[usize]> {
        self.shapes.iter().map(Vec::as_slice).collect()
    }
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var, TensorError> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn mha_case(name: &'static str, q: &[usize], kv: &[usize], heads: usize) -> OpCase {
    case(name, &[q, kv, &[8, 8], &[8, 8], &[8, 8], &[8, 8]], move |t, v, _| {
        let w = MhaWeights {
            w_q: v[2],
            w_k: v[3],
            w_v: v[4],
            w_o: v[5],
        };
        Ok(mha(t, v[0], v[1], v[1], &w, heads)?.output)
    })
}

/// Every differentiable op of the tape on small random inputs.
pub fn op_catalogue() -> Vec<OpCase> {
    let mean = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
    let var = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
    let mut ops = vec![
        case("add_scale", &[&[3, 4], &[3, 4]], |t, v, _| {
            let s = t.add(v[0], v[1])?;
            t.scale(s, -1.7)
        }),
        case("matmul", &[&[3, 5], &[5, 2]], |t, v, _| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v, _| {
            t.batch_matmul(v[0], v[1], false)
        }),
        case("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |t, v, _| {
            t.batch_matmul(v[0], v[1], true)
        }),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v, _| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case("conv2d", &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], |t, v, _| {
            t.conv2d(v[0], v[1], Some(v[2]))
        }),
        case("conv2d_1wide", &[&[2, 1, 6, 1], &[2, 1, 3, 3]], |t, v, _| {
            t.conv2d(v[0], v[1], None)
        }),
        case("bn_train", &[&[3, 2, 4, 3], &[2], &[2]], |t, v, _| {
            Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)
        }),
        case("bn_infer", &[&[3, 2, 4, 3], &[2], &[2]], move |t, v, _| {
            Ok(
                t.batch_norm(v[0], v[1], v[2], BnMode::Infer { mean: &mean, var: &var })?
                    .0,
            )
        }),
        case("layer_norm", &[&[2, 3, 6], &[6], &[6]], |t, v, _| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        case("avg_pool2d", &[&[2, 3, 6, 4]], |t, v, _| t.avg_pool2d(v[0], 2, 2)),
        case("avg_pool_time", &[&[2, 3, 6, 4]], |t, v, _| t.avg_pool2d(v[0], 2, 1)),
        // inputs drawn from (-1, 1) stay away from the kink at the checked step
        case("relu", &[&[4, 5]], |t, v, _| t.relu(v[0])),
        case("sigmoid", &[&[4, 5]], |t, v, _| t.sigmoid(v[0])),
        case("concat", &[&[2, 3, 4], &[2, 1, 4], &[2, 2, 4]], |t, v, _| {
            t.concat(v, 1)
        }),
        case("permute", &[&[2, 3, 4]], |t, v, _| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[4, 6])
        }),
        case("bce", &[&[3, 4]], |t, v, rng| {
            let p = t.sigmoid(v[0])?;
            let y = Tensor::new(&[3, 4], (0..12).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect())?;
            t.bce_loss(p, &y)
        }),
        case("mse", &[&[5]], |t, v, rng| {
            let y = Tensor::new(&[5], (0..5).map(|_| rng.gen_range(1.0..10.0)).collect())?;
            t.mse_loss(v[0], &y)
        }),
        case("joint", &[&[3, 4], &[3]], |t, v, rng| {
            let p = t.sigmoid(v[0])?;
            let y = Tensor::new(&[3, 4], (0..12).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect())?;
            let b = t.bce_loss(p, &y)?;
            let m = t.mse_loss(v[1], &Tensor::new(&[3], vec![0.5, -0.5, 0.0])?)?;
            t.joint_loss(b, m, 0.7, 1.3)
        }),
        // T = 3, d_model = 8, h = 2 as in the operation's reference check
        mha_case("mha", &[3, 8], &[3, 8], 2),
        mha_case("mha_batched", &[2, 3, 8], &[2, 4, 8], 4),
    ];
    for axis in 0..3 {
        ops.push(case("mean_axis", &[&[2, 3, 4]], move |t, v, _| t.mean_axis(v[0], axis)));
        ops.push(case("softmax", &[&[2, 3, 4]], move |t, v, _| t.softmax(v[0], axis)));
    }
    ops
}
