use codedlf::losses::{self, Image};
use codedlf::multitask::gradsim_weights;
use proptest::prelude::*;

/// Direct SSIM: every window position of every channel, statistics from
/// explicitly collected window samples.
fn ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize, c: usize, win: usize) -> f64 {
    let (wh, ww) = (win.min(h), win.min(w));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for ch in 0..c {
        for s0 in 0..=h - wh {
            for t0 in 0..=w - ww {
                let mut xa = Vec::new();
                let mut xb = Vec::new();
                for s in s0..s0 + wh {
                    for t in t0..t0 + ww {
                        xa.push(a[(s * w + t) * c + ch] as f64);
                        xb.push(b[(s * w + t) * c + ch] as f64);
                    }
                }
                let n = xa.len() as f64;
                let ma = xa.iter().sum::<f64>() / n;
                let mb = xb.iter().sum::<f64>() / n;
                let va = xa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
                let vb = xb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
                let cov = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
                vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn image_pair(h: usize, w: usize, c: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    let n = h * w * c;
    (prop::collection::vec(0.0f32..1.0, n), prop::collection::vec(0.0f32..1.0, n))
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut r = codedlf::rng::stream(5, 0);
    for (h, w, c) in [(9, 11, 2), (7, 7, 1), (4, 10, 3)] {
        let a: Vec<f32> = (0..h * w * c).map(|_| codedlf::rng::unit(&mut r) as f32).collect();
        let b: Vec<f32> = a.iter().map(|x| (x + 0.2 * codedlf::rng::normal(&mut r) as f32).clamp(0.0, 1.0)).collect();
        let got = losses::ssim(Image::new(h, w, c, &a).unwrap(), Image::new(h, w, c, &b).unwrap(), 7, 0.01, 0.03).unwrap();
        let want = ssim_oracle(&a, &b, h, w, c, 7);
        assert!((got - want).abs() < 1e-12, "{h}x{w}x{c}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_ramp_against_black() {
    // Zero image: μ_b = σ_b = 0, so each window scores
    // C1·C2 / ((μ_a² + C1)(σ_a² + C2)).
    let (h, w) = (8, 8);
    let ramp: Vec<f32> = (0..h * w).map(|p| (p % w) as f32 / (w - 1) as f32).collect();
    let zero = vec![0.0f32; h * w];
    let got = losses::ssim(Image::new(h, w, 1, &ramp).unwrap(), Image::new(h, w, 1, &zero).unwrap(), 7, 0.01, 0.03).unwrap();
    assert!((got - ssim_oracle(&ramp, &zero, h, w, 1, 7)).abs() < 1e-12);
    assert!(got > 0.0 && got < 1e-2, "ssim {got}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative((p, y) in image_pair(4, 5, 3)) {
        let (pi, yi) = (Image::new(4, 5, 3, &p).unwrap(), Image::new(4, 5, 3, &y).unwrap());
        prop_assert!(losses::huber(&p, &y, 1.0).unwrap().value >= 0.0);
        prop_assert!(losses::ssim_loss(pi, yi).unwrap().value >= -1e-12);
        prop_assert!(losses::spectral_cos_loss(pi, yi).unwrap().value >= -1e-12);
        prop_assert!(losses::sid(pi, yi).unwrap() >= -1e-12);
        prop_assert!(losses::spectral_angle(pi, yi).unwrap() >= 0.0);
        let (pd, yd) = (Image::new(4, 5, 1, &p[..20]).unwrap(), Image::new(4, 5, 1, &y[..20]).unwrap());
        prop_assert!(losses::tv_smoothness(pd, yd).unwrap().value >= 0.0);
        prop_assert!(losses::normal_similarity(pd, yd).unwrap().value >= -1e-12);
    }

    #[test]
    fn losses_vanish_on_identical_inputs((p, _) in image_pair(4, 5, 3)) {
        let pi = Image::new(4, 5, 3, &p).unwrap();
        prop_assert_eq!(losses::huber(&p, &p, 1.0).unwrap().value, 0.0);
        prop_assert!(losses::ssim_loss(pi, pi).unwrap().value.abs() < 1e-12);
        prop_assert!(losses::spectral_cos_loss(pi, pi).unwrap().value.abs() < 1e-9);
        prop_assert!(losses::sid(pi, pi).unwrap().abs() < 1e-12);
    }

    #[test]
    fn spectral_angle_ignores_per_pixel_scale((p, y) in image_pair(3, 3, 4), k in 0.1f32..10.0) {
        let scaled: Vec<f32> = p.iter().map(|x| x * k).collect();
        let a = losses::spectral_angle(Image::new(3, 3, 4, &p).unwrap(), Image::new(3, 3, 4, &y).unwrap()).unwrap();
        let b = losses::spectral_angle(Image::new(3, 3, 4, &scaled).unwrap(), Image::new(3, 3, 4, &y).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
    }

    #[test]
    fn gradsim_weights_lie_in_unit_interval(
        g in prop::collection::vec(-5.0f64..5.0, 6),
        aux in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..4),
    ) {
        let refs: Vec<&[f64]> = aux.iter().map(|a| a.as_slice()).collect();
        for w in gradsim_weights(&g, &refs).unwrap() {
            prop_assert!((0.0..=1.0).contains(&w), "weight {}", w);
        }
    }
}
