use codedlf::calib::{self, DarkMode, DarkModel, ExposureSeries, FitOptions, SaturationMask};
use codedlf::{rng, Tensor5};
use proptest::prelude::*;

const TIMES: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.6];

fn bayer(ni: usize, nj: usize) -> Vec<u8> {
    (0..ni * nj).map(|p| ((p / nj) % 2 + (p % nj) % 2) as u8).collect()
}

fn series(seed: u64, scale: f64) -> ExposureSeries {
    let (ni, nj, nk) = (6, 6, 2);
    let mut r = rng::stream(seed, 0);
    let v: Vec<f64> = (0..ni * nj).map(|_| 0.5 + rng::unit(&mut r)).collect();
    let resp: Vec<[f64; 3]> = (0..nk).map(|_| std::array::from_fn(|_| 0.1 + rng::unit(&mut r))).collect();
    let b = bayer(ni, nj);
    let means = Tensor5::from_fn([1, TIMES.len(), ni, nj, nk], |[_, l, i, j, k]| {
        let p = i * nj + j;
        (scale * v[p] * resp[k][b[p] as usize] * TIMES[l] * 0.5) as f32
    });
    ExposureSeries::new(means, TIMES.to_vec(), b).unwrap()
}

fn fit(s: &ExposureSeries) -> calib::CalibResult {
    calib::fit_vignetting_responsivity(s, &DarkModel::zero(), &SaturationMask::none(s.shape()), &FitOptions::default()).unwrap()
}

#[test]
fn per_pixel_dark_fit_tolerates_small_noise() {
    let (ni, nj) = (4, 5);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng::stream(seed, 1);
        let offset: Vec<f64> = (0..ni * nj).map(|_| 0.05 * rng::unit(&mut r)).collect();
        let current: Vec<f64> = (0..ni * nj).map(|_| 0.01 * rng::unit(&mut r)).collect();
        let dark = Tensor5::from_fn([1, TIMES.len(), ni, nj, 1], |[_, l, i, j, _]| {
            let p = i * nj + j;
            (offset[p] + current[p] * TIMES[l] + 1e-4 * rng::normal(&mut r)) as f32
        });
        let m = calib::fit_dark(&dark, &TIMES, DarkMode::PerPixel).unwrap();
        for p in 0..ni * nj {
            // Offsets near zero may be clamped; compare the clamped truth.
            worst = worst.max((m.offset[p] - offset[p].max(0.0)).abs()).max((m.current[p] - current[p]).abs());
        }
    }
    assert!(worst < 1e-3, "worst dark parameter error {worst}");
}

#[test]
fn vignetting_has_unit_mean_per_bayer_type() {
    let s = series(3, 1.0);
    let res = fit(&s);
    for n in 0..3u8 {
        let vs: Vec<f64> = res.v.iter().zip(&s.bayer).filter(|(_, &b)| b == n).map(|(v, _)| *v).collect();
        let mean = vs.iter().sum::<f64>() / vs.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9, "type {n}: mean {mean}");
    }
}

#[test]
fn objective_history_never_increases() {
    let res = fit(&series(4, 1.0));
    assert!(res.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-18));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn signal_scale_moves_into_responsivity(seed in 0u64..1000, k in 0.2f64..1.8) {
        let a = fit(&series(seed, 1.0));
        let b = fit(&series(seed, k));
        for (x, y) in a.v.iter().zip(&b.v) {
            prop_assert!((x - y).abs() < 1e-5 * x.abs().max(1.0), "v {} vs {}", x, y);
        }
        for (ra, rb) in a.r.iter().zip(&b.r) {
            for n in 0..3 {
                prop_assert!((rb[n] - k * ra[n]).abs() < 1e-5 * rb[n].abs().max(1e-3));
            }
        }
    }
}
