//! Central-difference gradient checks for every differentiable op and for
//! the composed geometry/loss pipelines, across multiple seeds.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempose_core::diffgeom;
use tempose_core::geom::{CameraIntrinsics, Quaternion};
use tempose_core::loss;
use tempose_core::tensor::{Tape, Tensor};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 5;

/// Deterministic weights that turn any output into a scalar with non-trivial
/// dependence on every element.
fn reduce(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.len())
        .map(|i| 0.3 + 0.1 * ((i * 7 + 3) % 11) as f64)
        .collect();
    t.mul(&Tensor::constant(t.shape(), w).unwrap())
        .unwrap()
        .sum()
        .unwrap()
}

/// Check analytic against central-difference gradients for a scalar-valued
/// function of several leaf tensors.
fn check(
    shapes: &[&[usize]],
    ranges: &[(f64, f64)],
    f: &dyn Fn(&[Tensor]) -> Tensor,
    label: &str,
) {
    assert_eq!(shapes.len(), ranges.len());
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 17);
        let data: Vec<Vec<f64>> = shapes
            .iter()
            .zip(ranges)
            .map(|(s, &(lo, hi))| {
                let n: usize = s.iter().product();
                (0..n).map(|_| rng.gen_range(lo..hi)).collect()
            })
            .collect();

        let eval = |k: usize, i: usize, delta: f64| -> f64 {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = data
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    let mut d = d.clone();
                    if j == k {
                        d[i] += delta;
                    }
                    tape.leaf(shapes[j], d).unwrap()
                })
                .collect();
            f(&leaves).to_scalar().unwrap()
        };

        let tape = Tape::new();
        let leaves: Vec<Tensor> = data
            .iter()
            .enumerate()
            .map(|(j, d)| tape.leaf(shapes[j], d.clone()).unwrap())
            .collect();
        let grads = f(&leaves).backward().unwrap();
        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(leaf).unwrap();
            for i in 0..data[k].len() {
                let numeric = (eval(k, i, H) - eval(k, i, -H)) / (2.0 * H);
                let a = analytic.data()[i];
                let tol = REL_TOL * a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() <= tol,
                    "{label} seed {seed} input {k} elem {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn elementwise_binary_ops_with_broadcast() {
    let full: &[usize] = &[2, 3, 4];
    let suffix: &[usize] = &[3, 4];
    let scalar: &[usize] = &[1];
    let r = (-1.5, 1.5);
    for (name, op) in [
        ("add", (|a: &Tensor, b: &Tensor| a.add(b).unwrap()) as fn(&Tensor, &Tensor) -> Tensor),
        ("sub", |a, b| a.sub(b).unwrap()),
        ("mul", |a, b| a.mul(b).unwrap()),
    ] {
        check(&[full, full], &[r, r], &|x| reduce(&op(&x[0], &x[1])), name);
        check(
            &[full, suffix],
            &[r, r],
            &|x| reduce(&op(&x[0], &x[1])),
            &format!("{name} broadcast"),
        );
        check(
            &[full, scalar],
            &[r, r],
            &|x| reduce(&op(&x[0], &x[1])),
            &format!("{name} scalar broadcast"),
        );
    }
}

#[test]
fn elementwise_unary_ops() {
    let s: &[usize] = &[3, 4];
    check(&[s], &[(-2.0, 2.0)], &|x| reduce(&x[0].neg().unwrap()), "neg");
    check(&[s], &[(-2.0, 2.0)], &|x| reduce(&x[0].scale(1.7).unwrap()), "scale");
    check(
        &[s],
        &[(-2.0, 2.0)],
        &|x| reduce(&x[0].add_scalar(0.4).unwrap()),
        "add_scalar",
    );
    check(&[s], &[(0.2, 2.0)], &|x| reduce(&x[0].abs().unwrap()), "abs pos");
    check(&[s], &[(-2.0, -0.2)], &|x| reduce(&x[0].abs().unwrap()), "abs neg");
    check(&[s], &[(0.2, 2.0)], &|x| reduce(&x[0].sqrt().unwrap()), "sqrt");
    check(&[s], &[(-1.0, 1.0)], &|x| reduce(&x[0].exp().unwrap()), "exp");
    check(&[s], &[(0.2, 2.0)], &|x| reduce(&x[0].powf(1.7).unwrap()), "powf");
    check(&[s], &[(0.2, 2.0)], &|x| reduce(&x[0].powf(-1.0).unwrap()), "powf inv");
    check(&[s], &[(-2.0, 2.0)], &|x| reduce(&x[0].gelu().unwrap()), "gelu");
}

#[test]
fn reductions() {
    let s: &[usize] = &[2, 5];
    check(&[s], &[(-2.0, 2.0)], &|x| x[0].sum().unwrap(), "sum");
    check(&[s], &[(-2.0, 2.0)], &|x| x[0].mean().unwrap(), "mean");
}

#[test]
fn shape_ops() {
    let s: &[usize] = &[2, 3, 4];
    let r = (-1.5, 1.5);
    check(
        &[s],
        &[r],
        &|x| reduce(&x[0].reshape(&[4, 6]).unwrap()),
        "reshape",
    );
    check(
        &[s],
        &[r],
        &|x| reduce(&x[0].transpose(0, 2).unwrap()),
        "transpose 0-2",
    );
    check(
        &[s],
        &[r],
        &|x| reduce(&x[0].transpose(1, 2).unwrap()),
        "transpose 1-2",
    );
    check(
        &[&[2, 3], &[2, 3]],
        &[r, r],
        &|x| reduce(&Tensor::concat(&[&x[0], &x[1]], 0).unwrap()),
        "concat axis 0",
    );
    check(
        &[&[2, 3], &[2, 2]],
        &[r, r],
        &|x| reduce(&Tensor::concat(&[&x[0], &x[1]], 1).unwrap()),
        "concat axis 1",
    );
    check(
        &[s],
        &[r],
        &|x| reduce(&x[0].slice(1, 1, 2).unwrap()),
        "slice",
    );
    check(
        &[&[4, 3]],
        &[r],
        &|x| reduce(&x[0].select_rows(&[0, 2, 2, 3, 1]).unwrap()),
        "select_rows with repeats",
    );
}

#[test]
fn matmul_2d_and_batched() {
    let r = (-1.0, 1.0);
    check(
        &[&[3, 4], &[4, 2]],
        &[r, r],
        &|x| reduce(&x[0].matmul(&x[1]).unwrap()),
        "matmul 2d",
    );
    check(
        &[&[2, 3, 4], &[2, 4, 5]],
        &[r, r],
        &|x| reduce(&x[0].matmul(&x[1]).unwrap()),
        "matmul batched",
    );
}

#[test]
fn softmax_mask_and_layer_norm() {
    let r = (-2.0, 2.0);
    check(
        &[&[2, 5]],
        &[r],
        &|x| reduce(&x[0].softmax_last().unwrap()),
        "softmax",
    );
    // causal mask over a 4x4 score matrix
    let mut mask = vec![false; 16];
    for i in 0..4 {
        for j in (i + 1)..4 {
            mask[i * 4 + j] = true;
        }
    }
    check(
        &[&[4, 4]],
        &[r],
        &|x| {
            reduce(
                &x[0]
                    .masked_fill(&mask, &[4, 4])
                    .unwrap()
                    .softmax_last()
                    .unwrap(),
            )
        },
        "masked softmax",
    );
    check(
        &[&[3, 6], &[6], &[6]],
        &[r, (0.5, 1.5), (-0.5, 0.5)],
        &|x| reduce(&x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap()),
        "layer_norm",
    );
}

#[test]
fn differentiable_geometry() {
    check(
        &[&[3]],
        &[(-0.5, 0.5)],
        &|x| reduce(&diffgeom::complete_quaternion(&x[0]).unwrap()),
        "complete_quaternion",
    );
    check(
        &[&[4]],
        &[(0.3, 1.0)],
        &|x| reduce(&diffgeom::quat_to_rotmat(&x[0]).unwrap()),
        "quat_to_rotmat",
    );
    let points = [[0.1, 0.0, -0.05], [-0.04, 0.08, 0.02], [0.0, -0.1, 0.06]];
    check(
        &[&[4], &[3]],
        &[(0.3, 1.0), (-0.5, 0.5)],
        &|x| reduce(&diffgeom::transform_points(&x[0], &x[1], &points).unwrap()),
        "transform_points",
    );
    let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
    check(
        &[&[2], &[1]],
        &[(-5.0, 5.0), (-0.5, 0.5)],
        &|x| {
            let tz = x[1].exp().unwrap();
            reduce(&diffgeom::recover_translation(&[300.0, 250.0], &x[0], &tz, &k).unwrap())
        },
        "recover_translation",
    );
}

#[test]
fn loss_terms() {
    let points = [
        [0.05, 0.0, 0.0],
        [0.0, 0.05, 0.0],
        [0.0, 0.0, 0.05],
        [-0.03, 0.02, -0.04],
    ];
    let q_gt = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.7);
    let qg = Tensor::constant(&[4], vec![q_gt.w, q_gt.x, q_gt.y, q_gt.z]).unwrap();
    let tg = Tensor::constant(&[3], vec![0.05, -0.1, 1.2]).unwrap();
    check(
        &[&[4], &[3]],
        &[(0.3, 1.0), (-0.3, 0.3)],
        &|x| {
            let t_est = x[1].add_scalar(1.0).unwrap(); // keep depth positive
            loss::pose_loss(&x[0], &t_est, &qg, &tg, &points).unwrap()
        },
        "pose_loss",
    );
    check(
        &[&[4]],
        &[(0.3, 1.0)],
        &|x| loss::reg_loss(&x[0]).unwrap(),
        "reg_loss",
    );
    check(
        &[&[4]],
        &[(0.3, 1.0)],
        &|x| loss::inner_prod_loss(&x[0], &qg).unwrap(),
        "inner_prod_loss",
    );
    check(
        &[&[3, 2, 4], &[3, 2, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        &|x| loss::future_loss(&x[0], &x[1]).unwrap().1,
        "future_loss",
    );
}
