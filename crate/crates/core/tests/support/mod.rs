//! Oracles shared by the integration tests.

#![allow(dead_code)]

pub mod gradcases;

use metaprune::stream_rng;
use metaprune::tensorcore::{Real, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub rel_errors: Vec<f64>,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst() < FD_TOLERANCE
    }
}

fn rel_l2(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of the scalar built by `loss` with respect to
/// every element of `inputs` (or `coords[i]` of input `i` when given).
/// Each input is recorded as a trainable leaf, in order.
pub fn grad_check<F>(inputs: &[Tensor], coords: Option<&[Vec<usize>]>, loss: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let l = loss(&mut tape, &vars);
        tape.value(l).item() as f64
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let l = loss(&mut tape, &vars);
    tape.backward(l).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut rel_errors = Vec::new();
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for i in 0..inputs.len() {
        let all: Vec<usize> = (0..inputs[i].numel()).collect();
        let idx = coords.map_or(&all, |c| &c[i]);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in idx {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP as Real;
            let plus = eval(&values);
            values[i].data_mut()[j] = orig - FD_STEP as Real;
            let minus = eval(&values);
            values[i].data_mut()[j] = orig;
            n.push((plus - minus) / (2.0 * FD_STEP));
            a.push(analytic[i][j]);
        }
        checked += idx.len();
        rel_errors.push(rel_l2(&a, &n));
    }
    GradCheck { rel_errors, checked }
}

/// Tensor of standard-normal-ish values (sum of uniforms) kept at least
/// `margin` away from zero, so ReLU kinks stay out of the difference stencil.
pub fn random_tensor<R: Rng>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.9;
            let v = if v.abs() < margin { margin.copysign(v) } else { v };
            v as Real
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A small template exercising every layer kind, a residual join and a
/// dense head, cheap enough to difference over every generator parameter.
pub const TINY_TEMPLATE: &str = r#"{
  "name": "tiny",
  "input_shape": [2, 6, 6],
  "slots": [{"name": "a"}, {"name": "b"}],
  "layers": [
    {"name": "c0", "kind": "standard-conv", "kernel": [3, 3], "stride": 1, "input": "input", "spatial_out": [6, 6], "base_width": 4, "slot": "a"},
    {"name": "c1", "kind": "pointwise-conv", "kernel": [1, 1], "stride": 1, "input": "c0", "spatial_out": [6, 6], "base_width": 4, "slot": "a", "residual": "c0"},
    {"name": "dw", "kind": "depthwise-conv", "kernel": [3, 3], "stride": 2, "input": "c1", "spatial_out": [3, 3], "base_width": 4},
    {"name": "pw", "kind": "pointwise-conv", "kernel": [1, 1], "stride": 1, "input": "dw", "spatial_out": [3, 3], "base_width": 5, "slot": "b"},
    {"name": "fc", "kind": "dense", "kernel": [1, 1], "stride": 1, "input": "pw", "spatial_out": [1, 1], "base_width": 3}
  ],
  "shortcut_groups": [["c0", "c1"]]
}"#;

/// Seeds every gradient case is checked with.
pub const GRAD_SEEDS: u64 = 10;

/// Worst relative error of `case` over [`GRAD_SEEDS`] seeds, with the seed
/// it occurred at.
pub fn run_grad_case(case: &gradcases::Case) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for seed in 0..GRAD_SEEDS {
        let r = (case.1)(&mut stream_rng(seed, 7));
        assert!(r.checked > 0, "{}: nothing checked", case.0);
        if r.worst() >= worst.0 {
            worst = (r.worst(), seed);
        }
    }
    worst
}
