use codedlf::autodiff::{Graph, LayerSpec, ParamGroup, ToyNet};
use codedlf::coding::{encode, random_mask, MaskSeed};
use codedlf::losses;
use codedlf::rng;
use codedlf::Tensor5;

const DIMS: [usize; 5] = [2, 2, 3, 3, 2];
const DELTA: f64 = 0.5;

fn coded_input(seed: u64) -> Tensor5 {
    let mut r = rng::stream(seed, 1);
    let lf = Tensor5::from_fn(DIMS, |_| rng::unit(&mut r) as f32);
    encode(&lf, &random_mask(DIMS[2], DIMS[3], DIMS[4], MaskSeed(seed)).unwrap()).unwrap()
}

fn targets(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, 2);
    let cv = (0..DIMS[2] * DIMS[3] * DIMS[4]).map(|_| rng::unit(&mut r)).collect();
    let d = (0..DIMS[2] * DIMS[3]).map(|_| 2.0 * rng::unit(&mut r) - 1.0).collect();
    (cv, d)
}

/// Huber on both heads, summed, in a fresh graph. Returns the loss and the
/// analytic parameter gradient.
fn loss_and_grad(net: &ToyNet, batch: &[Tensor5], cv_t: &[f64], d_t: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let vars = net.build_batch(&mut g, batch).unwrap();
    let n = batch.len();
    let cv_y = g.constant(cv_t.repeat(n), n).unwrap();
    let d_y = g.constant(d_t.repeat(n), n).unwrap();
    let a = g.huber(vars.cv, cv_y, DELTA).unwrap();
    let b = g.huber(vars.disp, d_y, DELTA).unwrap();
    let total = g.add(a, b).unwrap();
    g.zero_grad();
    g.backward(total).unwrap();
    (g.value(total)[0], net.gradient(&g, &vars))
}

#[test]
fn parameter_gradients_match_central_differences() {
    let net = ToyNet::init(LayerSpec::new(DIMS, 6, 5), 11).unwrap();
    let batch = [coded_input(1), coded_input(2)];
    let (cv_t, d_t) = targets(3);
    let (_, g) = loss_and_grad(&net, &batch, &cv_t, &d_t);

    let h = 1e-3f32;
    let mut r = rng::stream(99, 0);
    for group in [ParamGroup::Shared, ParamGroup::Cv, ParamGroup::Disp] {
        let flat: Vec<usize> = net.group_ranges(group).into_iter().flatten().collect();
        let (mut num, mut den) = (0.0, 0.0);
        let mut checked = 0;
        while checked < 10 {
            let k = flat[rng::index_below(&mut r, flat.len())];
            let (pi, off) = locate(&net, k);
            let x = net.params()[pi].data[off];
            let eval = |v: f32| {
                let mut p = net.clone();
                p.params_mut()[pi].data[off] = v;
                loss_and_grad(&p, &batch, &cv_t, &d_t).0
            };
            let (hi, lo, f0) = (x + h, x - h, eval(x));
            let fwd = (eval(hi) - f0) / (hi as f64 - x as f64);
            let bwd = (f0 - eval(lo)) / (x as f64 - lo as f64);
            // A ReLU or Huber kink inside [x − h, x + h] makes the one-sided
            // slopes disagree; the derivative is undefined there.
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-8) {
                continue;
            }
            let fd = (eval(hi) - eval(lo)) / (hi as f64 - lo as f64);
            num += (fd - g[k]).powi(2);
            den += fd * fd;
            checked += 1;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-3, "{group:?}: relative gradient error {rel}");
    }
}

fn locate(net: &ToyNet, k: usize) -> (usize, usize) {
    let (i, (start, _)) = net.offsets().into_iter().enumerate().find(|&(_, (s, l))| k >= s && k < s + l).unwrap();
    (i, k - start)
}

#[test]
fn head_gradients_are_confined_to_their_groups() {
    let net = ToyNet::init(LayerSpec::new(DIMS, 6, 5), 4).unwrap();
    let mut g = Graph::new();
    let vars = net.build(&mut g, &coded_input(5)).unwrap();
    let y = g.constant(vec![0.3; DIMS[2] * DIMS[3]], 1).unwrap();
    let loss = g.huber(vars.disp, y, DELTA).unwrap();
    g.backward(loss).unwrap();
    let grad = net.gradient(&g, &vars);
    for r in net.group_ranges(ParamGroup::Cv) {
        assert!(grad[r].iter().all(|&x| x == 0.0));
    }
    assert!(net.group_ranges(ParamGroup::Disp).into_iter().flatten().any(|k| grad[k] != 0.0));
}

#[test]
fn graph_huber_agrees_with_direct_huber() {
    let mut r = rng::stream(7, 0);
    let p: Vec<f32> = (0..50).map(|_| (3.0 * rng::normal(&mut r)) as f32).collect();
    let y: Vec<f32> = (0..50).map(|_| rng::normal(&mut r) as f32).collect();
    for delta in [0.1, 1.0, 10.0] {
        let direct = losses::huber(&p, &y, delta).unwrap();
        let mut g = Graph::new();
        let pv = g.leaf_f32(&p);
        let yv = g.leaf_f32(&y);
        let l = g.huber(pv, yv, delta).unwrap();
        g.backward(l).unwrap();
        assert!((g.value(l)[0] - direct.value).abs() < 1e-12 * direct.value.max(1.0));
        for (a, b) in g.grad(pv).iter().zip(&direct.grad) {
            assert!((a - *b as f64).abs() < 1e-6, "delta {delta}: {a} vs {b}");
        }
    }
}

#[test]
fn batched_forward_matches_single_forward() {
    let net = ToyNet::init(LayerSpec::new(DIMS, 6, 5), 8).unwrap();
    let batch: Vec<Tensor5> = (0..4).map(coded_input).collect();
    let many = net.forward_batch(&batch).unwrap();
    for (x, (cv, d)) in batch.iter().zip(&many) {
        let (cv1, d1) = net.forward(x).unwrap();
        assert_eq!(cv1.data(), cv.data());
        assert_eq!(d1.data(), d.data());
    }
}
