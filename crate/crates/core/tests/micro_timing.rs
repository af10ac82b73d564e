//! Distinguish gemm cost from graph overhead (run with --ignored).

use dacal_core::autodiff::{grad, log_softmax, Var};
use dacal_core::models::{mtn_forward, Mtn, MtnConfig, SegNet, SegNetConfig};
use ndarray::{ArrayD, IxDyn};
use std::time::Instant;

fn arr(shape: &[usize], seed: f64) -> ArrayD<f64> {
    let mut k = seed;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        k = (k * 1.13 + 0.7).sin();
        k
    })
}

#[test]
#[ignore]
fn micro() {
    let x = arr(&[4, 32, 64, 64], 0.3);
    let xv = Var::constant(x.clone());

    let t = Instant::now();
    for _ in 0..20 {
        let _ = xv.im2col(3, 1);
    }
    println!("im2col [4,32,64,64]: {:.1} ms", t.elapsed().as_secs_f64() / 20.0 * 1e3);

    let cols = xv.im2col(3, 1);
    let w = Var::constant(arr(&[32, 288], 0.5));
    let t = Instant::now();
    for _ in 0..20 {
        let _ = cols.matmul_nt(&w);
    }
    println!("gemm 16384x288x32: {:.1} ms", t.elapsed().as_secs_f64() / 20.0 * 1e3);

    let t = Instant::now();
    for _ in 0..20 {
        let _ = xv.mul(&xv);
    }
    println!("mul same-shape: {:.2} ms", t.elapsed().as_secs_f64() / 20.0 * 1e3);

    let t = Instant::now();
    for _ in 0..20 {
        let _ = log_softmax(&xv, 1);
    }
    println!("log_softmax C=32: {:.2} ms", t.elapsed().as_secs_f64() / 20.0 * 1e3);

    // full MTN forward fwd-only
    let mtn = Mtn::new(MtnConfig::default(), 1);
    let imgs = arr(&[4, 3, 64, 64], 0.1);
    let logits = arr(&[4, 4, 64, 64], 0.2);
    let t = Instant::now();
    for _ in 0..10 {
        let _ = mtn_forward(&mtn.vars(false), &Var::constant(imgs.clone()), &Var::constant(logits.clone()), None);
    }
    println!("mtn_forward (const): {:.1} ms", t.elapsed().as_secs_f64() / 10.0 * 1e3);

    // MTN forward with grads + backward
    let t = Instant::now();
    for _ in 0..10 {
        let vars = mtn.vars(true);
        let temp = mtn_forward(&vars, &Var::constant(imgs.clone()), &Var::constant(logits.clone()), None);
        let loss = temp.mean_all();
        let leaves: Vec<&Var> = vec![&vars.out.weight, &vars.blocks[0].conv.weight, &vars.blocks[1].conv.weight];
        let _ = grad(&loss, &leaves);
    }
    println!("mtn grad loop: {:.1} ms", t.elapsed().as_secs_f64() / 10.0 * 1e3);

    // student full fwd+bwd
    let net = SegNet::new(SegNetConfig::default(), 2);
    let t = Instant::now();
    for _ in 0..10 {
        let vars = net.vars(true);
        let out = vars.forward(&Var::constant(imgs.clone()), None);
        let loss = log_softmax(&out, 1).mean_all();
        let leaves: Vec<&Var> = vec![&vars.blocks[0].conv.weight, &vars.head.weight];
        let _ = grad(&loss, &leaves);
    }
    println!("segnet fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() / 10.0 * 1e3);
}
