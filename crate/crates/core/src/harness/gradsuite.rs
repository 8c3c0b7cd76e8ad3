//! Finite-difference checks of every differentiable building block of the
//! model, each over many randomly sized cases.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::fusion::{attention_pair, ccc_loss, disentangled_fuse, FusionVars};
use crate::rng::{Rng, SeedStream};
use crate::tensor::gradcheck::{check, CheckReport, DEFAULT_STEP};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const DEFAULT_CASES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 8] = [
    "conv1d",
    "maxpool1d",
    "matmul",
    "softmax",
    "lstm",
    "attention_pair",
    "disentangled_fuse",
    "ccc_loss",
];

struct Case {
    inputs: Vec<Tensor>,
    differentiate: Vec<bool>,
}

impl Case {
    fn all(inputs: Vec<Tensor>) -> Self {
        let differentiate = vec![true; inputs.len()];
        Self { inputs, differentiate }
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Distinct values at least 0.05 apart, so no window max sits on a kink.
fn separated(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| 0.1 * r as f64 + rng.random_range(-0.025..0.025))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn conv_same<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].conv1d(v[1], 1, Padding::Same)
}

fn conv_valid_s1<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].conv1d(v[1], 1, Padding::Valid)
}

fn conv_valid_s2<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].conv1d(v[1], 2, Padding::Valid)
}

fn conv_valid_s3<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].conv1d(v[1], 3, Padding::Valid)
}

fn pool_2_2<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].maxpool1d(2, 2)
}

fn pool_3_1<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].maxpool1d(3, 1)
}

fn pool_3_2<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].maxpool1d(3, 2)
}

fn matmul<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].matmul(v[1])
}

fn softmax<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].softmax()
}

fn lstm<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].lstm(v[1], v[2], v[3])
}

fn attention<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    attention_pair(v[0], v[1], v[2], v[3])
}

fn fuse<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    let p = FusionVars {
        w_s: v[2],
        b_s: v[3],
        w_p: v[4],
        b_p: v[5],
        w_a: v[6],
        b_a: v[7],
        w_v: v[8],
        b_v: v[9],
        w_l: v[10],
        b_l: v[11],
        queries: [v[12], v[13], v[14], v[15], v[16], v[17]],
    };
    disentangled_fuse(v[0], v[1], &p)
}

fn ccc<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    ccc_loss(v[0], &v[1].value())
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn draw(op: &str, index: usize, rng: &mut Rng) -> Result<(OpFn, Case)> {
    Ok(match op {
        "conv1d" => {
            let (c_in, c_out, k) = (
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=5),
            );
            let len = k + rng.random_range(0..12);
            let f: OpFn = match index % 4 {
                0 => conv_same,
                1 => conv_valid_s1,
                2 => conv_valid_s2,
                _ => conv_valid_s3,
            };
            (
                f,
                Case::all(vec![randn(&[c_in, len], rng), randn(&[c_out, c_in, k], rng)]),
            )
        }
        "maxpool1d" => {
            let (f, k): (OpFn, usize) = match index % 3 {
                0 => (pool_2_2, 2),
                1 => (pool_3_1, 3),
                _ => (pool_3_2, 3),
            };
            let shape = [rng.random_range(1..=3), k + rng.random_range(0..10)];
            (f, Case::all(vec![separated(&shape, rng)]))
        }
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(1..=6),
                rng.random_range(1..=6),
                rng.random_range(1..=6),
            );
            (matmul, Case::all(vec![randn(&[m, k], rng), randn(&[k, n], rng)]))
        }
        "softmax" => {
            let shape = if index.is_multiple_of(2) {
                vec![rng.random_range(2..=8)]
            } else {
                vec![rng.random_range(1..=4), rng.random_range(2..=6)]
            };
            (softmax, Case::all(vec![randn(&shape, rng)]))
        }
        "lstm" => {
            let (t, d, h) = (
                rng.random_range(1..=5),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let inputs = vec![
                randn(&[t, d], rng),
                Tensor::randn(&[d, 4 * h], 0.5, rng),
                Tensor::randn(&[h, 4 * h], 0.5, rng),
                Tensor::randn(&[4 * h], 0.5, rng),
            ];
            (lstm, Case::all(inputs))
        }
        "attention_pair" => {
            let d = rng.random_range(1..=5);
            let rows = if index.is_multiple_of(2) {
                vec![d]
            } else {
                vec![rng.random_range(1..=5), d]
            };
            let inputs = vec![randn(&rows, rng), randn(&rows, rng), randn(&[d], rng), randn(&[d], rng)];
            (attention, Case::all(inputs))
        }
        "disentangled_fuse" => {
            let (t, ds, dp, du) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let mut inputs = vec![
                randn(&[t, ds], rng),
                randn(&[t, dp], rng),
                Tensor::randn(&[ds, du], 0.5, rng),
                Tensor::randn(&[du], 0.5, rng),
                Tensor::randn(&[dp, du], 0.5, rng),
                Tensor::randn(&[du], 0.5, rng),
            ];
            for _ in 0..3 {
                inputs.push(Tensor::randn(&[du, du], 0.5, rng));
                inputs.push(Tensor::randn(&[du], 0.5, rng));
            }
            for _ in 0..6 {
                inputs.push(randn(&[du], rng));
            }
            (fuse, Case::all(inputs))
        }
        "ccc_loss" => {
            let n = rng.random_range(3..=12);
            let pred = randn(&[n, 3], rng);
            let gold = Tensor::uniform(&[n, 3], 1.0, rng);
            (
                ccc,
                Case {
                    inputs: vec![pred, gold],
                    differentiate: vec![true, false],
                },
            )
        }
        other => return Err(Error::Argument(format!("no gradient check for {other:?}"))),
    })
}

/// `cases` random instances of one op; the report holds the worst error.
pub fn check_op(op: &str, cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = SeedStream::new(seed).fork(op);
    let mut worst: f64 = 0.0;
    for index in 0..cases {
        let (f, case) = draw(op, index, &mut rng)?;
        let err = check(f, &case.inputs, &case.differentiate, DEFAULT_STEP, &mut rng)?;
        worst = worst.max(err);
    }
    Ok(CheckReport {
        name: op.to_string(),
        cases,
        max_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    OPS.iter().map(|op| check_op(op, cases, seed)).collect()
}
