//! Finite-difference cases: every differentiable tape operation and the
//! generator-to-loss path.

use metaprune::arch::{ArchTemplate, SlotRange};
use metaprune::hypernet::HyperNet;
use metaprune::model::{self, NormPlan};
use metaprune::tensorcore::{NormMode, NormStats, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, random_tensor, GradCheck, TINY_TEMPLATE};

pub type Case = (&'static str, fn(&mut ChaCha8Rng) -> GradCheck);

pub const CASES: &[Case] = &[
    ("dense", dense),
    ("pooled dense without bias", pooled_dense),
    ("conv2d 3x3 stride 1", |r| conv(r, 1, (1, 1), 3)),
    ("conv2d 3x3 stride 2", |r| conv(r, 2, (1, 1), 3)),
    ("conv2d 1x1", |r| conv(r, 1, (0, 0), 1)),
    ("conv2d 2x2 stride 2 unpadded", |r| conv(r, 2, (0, 0), 2)),
    ("depthwise stride 1", |r| depthwise(r, 1, (1, 1))),
    ("depthwise stride 2", |r| depthwise(r, 2, (1, 1))),
    ("depthwise stride 2 unpadded", |r| depthwise(r, 2, (0, 0))),
    ("channel norm, batch statistics", norm_batch),
    ("channel norm, fixed statistics", norm_fixed),
    ("relu", relu),
    ("add, add_scalar", add),
    ("global average pool", gap),
    ("softmax cross-entropy", cross_entropy),
    ("crop", crop),
    ("hypernet -> crop -> forward -> loss", hypernet_path),
];

fn probe(tape: &mut Tape, y: Var, coeffs: &Tensor) -> Var {
    tape.dot(y, coeffs).unwrap()
}

fn dense(rng: &mut ChaCha8Rng) -> GradCheck {
    let (x, w, b) = (random_tensor(&[3, 5], 0.0, rng), random_tensor(&[4, 5], 0.0, rng), random_tensor(&[4], 0.0, rng));
    let c = random_tensor(&[3, 4], 0.0, rng);
    grad_check(&[x, w, b], None, |t, v| {
        let y = t.dense(v[0], v[1], Some(v[2])).unwrap();
        probe(t, y, &c)
    })
}

fn pooled_dense(rng: &mut ChaCha8Rng) -> GradCheck {
    let (x, w) = (random_tensor(&[2, 3, 2, 2], 0.0, rng), random_tensor(&[2, 3], 0.0, rng));
    let c = random_tensor(&[2, 2], 0.0, rng);
    grad_check(&[x, w], None, |t, v| {
        let p = t.global_avg_pool(v[0]).unwrap();
        let y = t.dense(p, v[1], None).unwrap();
        probe(t, y, &c)
    })
}

fn conv(rng: &mut ChaCha8Rng, stride: usize, pad: (usize, usize), k: usize) -> GradCheck {
    let x = random_tensor(&[2, 3, 5, 5], 0.0, rng);
    let w = random_tensor(&[4, 3, k, k], 0.0, rng);
    let out = (5 + pad.0 + pad.1 - k) / stride + 1;
    let c = random_tensor(&[2, 4, out, out], 0.0, rng);
    grad_check(&[x, w], None, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
        probe(t, y, &c)
    })
}

fn depthwise(rng: &mut ChaCha8Rng, stride: usize, pad: (usize, usize)) -> GradCheck {
    let x = random_tensor(&[2, 3, 5, 5], 0.0, rng);
    let w = random_tensor(&[3, 1, 3, 3], 0.0, rng);
    let out = (5 + pad.0 + pad.1 - 3) / stride + 1;
    let c = random_tensor(&[2, 3, out, out], 0.0, rng);
    grad_check(&[x, w], None, |t, v| {
        let y = t.depthwise_conv2d(v[0], v[1], stride, pad).unwrap();
        probe(t, y, &c)
    })
}

fn norm_batch(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[3, 2, 2, 2], 0.0, rng);
    let (g, b) = (random_tensor(&[2], 0.0, rng), random_tensor(&[2], 0.0, rng));
    let c = random_tensor(&[3, 2, 2, 2], 0.0, rng);
    grad_check(&[x, g, b], None, |t, v| {
        let y = t.channel_norm(v[0], v[1], v[2], NormMode::Batch).unwrap();
        probe(t, y, &c)
    })
}

fn norm_fixed(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[2, 3, 2, 2], 0.0, rng);
    let (g, b) = (random_tensor(&[3], 0.0, rng), random_tensor(&[3], 0.0, rng));
    let stats = NormStats { mean: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), var: (0..3).map(|_| rng.gen_range(0.1..2.0)).collect() };
    let c = random_tensor(&[2, 3, 2, 2], 0.0, rng);
    grad_check(&[x, g, b], None, |t, v| {
        let y = t.channel_norm(v[0], v[1], v[2], NormMode::Fixed(&stats)).unwrap();
        probe(t, y, &c)
    })
}

fn relu(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[4, 6], 1e-2, rng);
    let c = random_tensor(&[4, 6], 0.0, rng);
    grad_check(&[x], None, |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, &c)
    })
}

fn add(rng: &mut ChaCha8Rng) -> GradCheck {
    let (a, b) = (random_tensor(&[2, 3, 2, 2], 0.0, rng), random_tensor(&[2, 3, 2, 2], 0.0, rng));
    let c = random_tensor(&[2, 3, 2, 2], 0.0, rng);
    grad_check(&[a, b], None, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let y = t.add_scalar(s, 0.7);
        probe(t, y, &c)
    })
}

fn gap(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[2, 3, 3, 2], 0.0, rng);
    let c = random_tensor(&[2, 3], 0.0, rng);
    grad_check(&[x], None, |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        probe(t, y, &c)
    })
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[5, 4], 0.0, rng);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    grad_check(&[x], None, |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
}

fn crop(rng: &mut ChaCha8Rng) -> GradCheck {
    let x = random_tensor(&[1, 40], 0.0, rng);
    let c = random_tensor(&[2, 3, 2], 0.0, rng);
    let c2 = random_tensor(&[3], 0.0, rng);
    grad_check(&[x], None, |t, v| {
        let a = t.crop(v[0], 2, &[3, 4, 2], &[2, 3, 2]).unwrap();
        let b = t.crop(v[0], 30, &[5], &[3]).unwrap();
        let pa = probe(t, a, &c);
        let pb = probe(t, b, &c2);
        t.add(pa, pb).unwrap()
    })
}

/// Cross-entropy of a generated subnetwork on a small batch, differentiated
/// with respect to every generator parameter.
fn hypernet_path(rng: &mut ChaCha8Rng) -> GradCheck {
    let template = ArchTemplate::from_json(TINY_TEMPLATE).unwrap();
    let net = HyperNet::new(&template, rng);
    let nev = template.random_nev(rng, SlotRange::full());
    let images = random_tensor(&[3, 2, 6, 6], 0.0, rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
    let values: Vec<Tensor> = net.params().ids().map(|id| net.params().value(id).clone()).collect();
    grad_check(&values, None, |t, vars| {
        let sliced = net.generate(t, vars, &nev).unwrap();
        let x = t.constant(images.clone());
        let out = model::forward(t, &template, &sliced.layers, x, NormPlan::Batch).unwrap();
        t.softmax_cross_entropy(out.logits, &labels).unwrap()
    })
}
