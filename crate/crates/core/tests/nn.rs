use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use sensorsched::nn::{Adam, Mlp};
use sensorsched::seeds::SimRng;

fn random_input(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

/// `Σ d ∘ net(x)` evaluated with plain loops.
fn weighted_output(net: &Mlp, x: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let out = net.predict_batch(x).unwrap();
    out.component_mul(d).sum()
}

#[test]
fn gradients_match_central_differences() {
    let shapes: [&[usize]; 10] = [
        &[3, 4, 2],
        &[5, 8, 6, 3],
        &[1, 1, 1],
        &[2, 16, 1],
        &[25, 128, 64, 21],
        &[4, 3, 3, 3, 2],
        &[6, 10, 4],
        &[25, 128, 64, 1],
        &[7, 2, 9],
        &[3, 12, 12, 5],
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (seed, sizes) in shapes.iter().enumerate() {
        let mut rng = SimRng::seed_from_u64(100 + seed as u64);
        let mut net = Mlp::new(sizes, &mut rng).unwrap();
        let x = random_input(3, sizes[0], &mut rng);
        let d = random_input(3, *sizes.last().unwrap(), &mut rng);
        let (_, mut tape) = net.forward_batch(&x).unwrap();
        let analytic = net.backward(&mut tape, &d).unwrap().flat();
        let base = net.params_flat();
        for (i, &g) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            net.set_params_flat(&p).unwrap();
            let up = weighted_output(&net, &x, &d);
            p[i] = base[i] - h;
            net.set_params_flat(&p).unwrap();
            let down = weighted_output(&net, &x, &d);
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        net.set_params_flat(&base).unwrap();
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst:e}");
}

#[test]
fn forward_matches_explicit_expression() {
    let mut rng = SimRng::seed_from_u64(5);
    let net = Mlp::new(&[6, 9, 7, 4], &mut rng).unwrap();
    let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut h = x.clone();
    for l in 0..net.n_layers() {
        let w = net.weight(l);
        let b = net.bias(l);
        let mut next = vec![0.0; w.ncols()];
        for j in 0..w.ncols() {
            let mut z = b[j];
            for i in 0..w.nrows() {
                z += h[i] * w[(i, j)];
            }
            next[j] = if l + 1 < net.n_layers() { z.tanh() } else { z };
        }
        h = next;
    }
    let out = net.forward(&x).unwrap();
    for (a, b) in out.iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = SimRng::seed_from_u64(6);
    let net = Mlp::new(&[25, 128, 64, 21], &mut rng).unwrap();
    let x = random_input(16, 25, &mut rng);
    let a = net.predict_batch(&x).unwrap();
    let b = net.clone().predict_batch(&x).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    let again = Mlp::new(&[25, 128, 64, 21], &mut SimRng::seed_from_u64(6)).unwrap();
    assert_eq!(again, net);
}

#[test]
fn adam_descends_a_convex_quadratic() {
    // Least squares on a linear model is convex in the parameters.
    let mut rng = SimRng::seed_from_u64(7);
    let mut net = Mlp::zeros(&[3, 1]).unwrap();
    let x = random_input(32, 3, &mut rng);
    let truth = [1.5, -2.0, 0.5];
    let y = DMatrix::from_fn(32, 1, |i, _| (0..3).map(|j| x[(i, j)] * truth[j]).sum::<f64>() + 0.3);
    let mut opt = Adam::new(&net);
    let mut losses = Vec::new();
    for _ in 0..100 {
        let (out, mut tape) = net.forward_batch(&x).unwrap();
        let err = &out - &y;
        losses.push(err.norm_squared() / 32.0);
        let grads = net.backward(&mut tape, &(err * (2.0 / 32.0))).unwrap();
        opt.step(&mut net, &grads, 0.01);
    }
    assert!(losses[99] < 0.5 * losses[0]);
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "loss rose from {} to {}", w[0], w[1]);
    }
}
