//! Finite-difference checks of the jets and the reverse-mode tape.

use curedesign_core::nn::{Activation, JetLayout, Mlp, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

fn random_mlp(rng: &mut ChaCha8Rng, input: usize) -> Mlp {
    let depth = rng.gen_range(1..=3);
    let mut sizes = vec![input];
    for _ in 0..depth {
        sizes.push(rng.gen_range(3..=8));
    }
    sizes.push(1);
    let mut m = Mlp::init(&sizes, Activation::Tanh, rng.gen()).unwrap();
    for l in &mut m.layers {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    m
}

/// loss = mean(v²) + mean(v·∂τv) + mean((∂zz v)²) over a batch of points,
/// evaluated through the tape.
fn jet_loss(mlp: &Mlp, coords: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let (input, layout) = JetLayout::seed(coords, 2, &[0, 1], Some(2));
    let mut tape = Tape::new();
    let net = tape.bind(mlp);
    let x = tape.leaf(input);
    let out = tape.mlp(&net, x, &layout);
    let n = layout.points;
    let v = tape.channel(out, 0, n);
    let vt = tape.channel(out, 1, n);
    let vzz = tape.channel(out, 3, n);
    let a = tape.mean_square(v);
    let prod = tape.mul(v, vt);
    let b = tape.mean(prod);
    let c = tape.mean_square(vzz);
    let ab = tape.add(a, b);
    let loss = tape.add(ab, c);
    let g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), net.grads(&tape, &g))
}

fn jet_loss_value(mlp: &Mlp, coords: &[f64]) -> f64 {
    let n = coords.len() / 2;
    let mut total = (0.0, 0.0, 0.0);
    for p in 0..n {
        let d = mlp
            .forward_with_coord_derivs(&coords[2 * p..2 * p + 2], &[0, 1], Some(1))
            .unwrap();
        let v = d.value[0];
        total.0 += v * v;
        total.1 += v * d.firsts[0][0];
        total.2 += d.second.unwrap()[0].powi(2);
    }
    (total.0 + total.1 + total.2) / n as f64
}

#[test]
fn coordinate_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mlp = random_mlp(&mut rng, 2);
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let d = mlp.forward_with_coord_derivs(&x, &[0, 1], Some(1)).unwrap();
        assert_eq!(d.value, mlp.forward(&x).unwrap(), "value channel must be bit-identical");
        let h = 1e-4;
        let f = |dx: f64, dz: f64| mlp.forward(&[x[0] + dx, x[1] + dz]).unwrap()[0];
        let ft = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
        let fz = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
        let fzz = (f(0.0, h) - 2.0 * f(0.0, 0.0) + f(0.0, -h)) / (h * h);
        assert!(close(d.firsts[0][0], ft, 1e-5, 1e-9), "{} vs {ft}", d.firsts[0][0]);
        assert!(close(d.firsts[1][0], fz, 1e-5, 1e-9), "{} vs {fz}", d.firsts[1][0]);
        let s = d.second.unwrap()[0];
        assert!(close(s, fzz, 1e-5, 1e-6), "{s} vs {fzz}");
    }
}

#[test]
fn batched_jet_values_match_plain_forward_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mlp = random_mlp(&mut rng, 2);
    let coords: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (input, layout) = JetLayout::seed(&coords, 2, &[0, 1], Some(2));
    let jet = mlp.forward_jet(&input, &layout).unwrap();
    let plain = mlp.forward_batch(&Tensor::new(7, 2, coords.clone())).unwrap();
    assert_eq!(&jet.data[..7], &plain.data[..]);
}

#[test]
fn parameter_gradients_through_second_derivatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let mlp = random_mlp(&mut rng, 2);
        let coords: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (loss, grads) = jet_loss(&mlp, &coords);
        assert!(close(loss, jet_loss_value(&mlp, &coords), 1e-12, 1e-14));
        for _ in 0..20 {
            let buf = rng.gen_range(0..grads.len());
            let idx = rng.gen_range(0..grads[buf].len());
            let h = 1e-6;
            let mut plus = mlp.clone();
            plus.params_mut()[buf][idx] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[buf][idx] -= h;
            let fd = (jet_loss_value(&plus, &coords) - jet_loss_value(&minus, &coords)) / (2.0 * h);
            let g = grads[buf][idx];
            assert!(close(g, fd, 1e-3, 1e-7), "buffer {buf} index {idx}: {g} vs {fd}");
        }
    }
}

#[test]
fn plain_batch_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let mlp = random_mlp(&mut rng, 3);
        let xs: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |m: &Mlp| {
            let y = m.forward_batch(&Tensor::new(5, 3, xs.clone())).unwrap();
            y.data.iter().map(|v| v * v).sum::<f64>() / 5.0
        };
        let mut tape = Tape::new();
        let net = tape.bind(&mlp);
        let x = tape.leaf(Tensor::new(5, 3, xs.clone()));
        let y = tape.mlp(&net, x, &JetLayout::plain(5));
        let loss = tape.mean_square(y);
        let g = tape.backward(loss).unwrap();
        let grads = net.grads(&tape, &g);
        for _ in 0..20 {
            let buf = rng.gen_range(0..grads.len());
            let idx = rng.gen_range(0..grads[buf].len());
            let h = 1e-6;
            let mut plus = mlp.clone();
            plus.params_mut()[buf][idx] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[buf][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(close(grads[buf][idx], fd, 1e-4, 1e-9));
        }
    }
}

#[test]
fn gather_mul_and_input_gradients() {
    // decoder(branch(u)[idx] ⊙ trunk(y)) with gradients for the design table
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let branch = Mlp::init(&[3, 5, 4], Activation::Tanh, 1).unwrap();
    let trunk = Mlp::init(&[2, 5, 4], Activation::Tanh, 2).unwrap();
    let decoder = Mlp::init(&[4, 5, 1], Activation::Tanh, 3).unwrap();
    let designs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coords: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let index: std::rc::Rc<[usize]> = vec![0, 1, 1, 0].into();

    let eval = |designs: &[f64]| {
        let mut tape = Tape::new();
        let (b, t, d) = (tape.bind(&branch), tape.bind(&trunk), tape.bind(&decoder));
        let u = tape.leaf(Tensor::new(2, 3, designs.to_vec()));
        let bu = tape.mlp(&b, u, &JetLayout::plain(2));
        let (input, layout) = JetLayout::seed(&coords, 2, &[0, 1], Some(2));
        let y = tape.leaf(input);
        let ty = tape.mlp(&t, y, &layout);
        let merged = tape.gather_mul(bu, ty, index.clone());
        let out = tape.mlp(&d, merged, &layout);
        let zz = tape.channel(out, 3, 4);
        let v = tape.channel(out, 0, 4);
        let a = tape.mean_square(zz);
        let b2 = tape.mean(v);
        let loss = tape.add(a, b2);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), g.of(&tape, u))
    };
    let (_, gu) = eval(&designs);
    for i in 0..designs.len() {
        let h = 1e-6;
        let mut p = designs.clone();
        p[i] += h;
        let mut m = designs.clone();
        m[i] -= h;
        let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
        assert!(close(gu[i], fd, 1e-4, 1e-9), "design input {i}: {} vs {fd}", gu[i]);
    }
}
