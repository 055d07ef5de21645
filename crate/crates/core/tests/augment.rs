mod common;

use common::{direct_convolution, rng};
use flexinet_core::augment::{
    adir, apply_dir, bin_stats, clip_energy, convolve_truncated, freq_mask, freq_mixstyle, freq_mixstyle_with,
    mask_band, roll, roll_time, sample_rng, time_roll, time_roll_waveform, AdirConfig, DirBank, FmsConfig,
};
use flexinet_core::dsp::{Waveform, SAMPLE_RATE};
use flexinet_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn features(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut g = rng(seed);
    Tensor::from_fn(shape, |_| g.gen_range(-8.0f32..2.0))
}

fn loud_clip(seed: u64, len: usize) -> Waveform {
    let mut g = rng(seed);
    Waveform::new((0..len).map(|_| g.gen_range(-0.5f32..0.5)).collect(), SAMPLE_RATE).unwrap()
}

#[test]
fn mixstyle_identity_weight() {
    let x = features(1, &[4, 2, 16, 12]);
    let y = freq_mixstyle_with(&x, &[1.0; 4], &[3, 2, 1, 0]).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn mixstyle_matches_loop_oracle() {
    let (n, c, f, t) = (3, 2, 5, 7);
    let x = features(2, &[n, c, f, t]);
    let gamma = [0.2, 0.7, 0.5];
    let partner = [1, 2, 0];
    let y = freq_mixstyle_with(&x, &gamma, &partner).unwrap();
    let at = |b: usize, ch: usize, fi: usize, ti: usize| x.data()[((b * c + ch) * f + fi) * t + ti] as f64;
    let stats = |b: usize, fi: usize| {
        let vals: Vec<f64> = (0..c).flat_map(|ch| (0..t).map(move |ti| (ch, ti))).map(|(ch, ti)| at(b, ch, fi, ti)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, (v + 1e-6).sqrt())
    };
    for b in 0..n {
        for fi in 0..f {
            let (m, s) = stats(b, fi);
            let (pm, ps) = stats(partner[b], fi);
            let g = gamma[b];
            for ch in 0..c {
                for ti in 0..t {
                    let expect = (at(b, ch, fi, ti) - m) / s * (g * s + (1.0 - g) * ps) + g * m + (1.0 - g) * pm;
                    let got = y.data()[((b * c + ch) * f + fi) * t + ti] as f64;
                    assert!((got - expect).abs() < 1e-4, "{got} vs {expect}");
                }
            }
        }
    }
}

#[test]
fn mixstyle_rejects_bad_arguments() {
    let x = features(3, &[2, 1, 4, 4]);
    assert!(freq_mixstyle_with(&x, &[0.5], &[1, 0]).is_err());
    assert!(freq_mixstyle_with(&x, &[0.5, 0.5], &[1, 2]).is_err());
    let bad = FmsConfig { p: 1.5, ..FmsConfig::default() };
    assert!(freq_mixstyle(&x, &bad, &mut rng(0)).is_err());
    let bad = FmsConfig { alpha: 0.0, ..FmsConfig::default() };
    assert!(freq_mixstyle(&x, &bad, &mut rng(0)).is_err());
}

#[test]
fn mixstyle_single_sample_batch_passes_through() {
    let x = features(4, &[1, 1, 8, 8]);
    let cfg = FmsConfig { p: 1.0, ..FmsConfig::default() };
    assert_eq!(freq_mixstyle(&x, &cfg, &mut rng(0)).unwrap(), x);
}

#[test]
fn mixstyle_always_on_changes_batch_and_keeps_shape() {
    let x = features(5, &[6, 1, 16, 10]);
    let cfg = FmsConfig { p: 1.0, ..FmsConfig::default() };
    let y = freq_mixstyle(&x, &cfg, &mut rng(9)).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.all_finite());
    assert_ne!(y, x);
    assert_eq!(y, freq_mixstyle(&x, &cfg, &mut rng(9)).unwrap());
    let (m, s) = bin_stats(&x).unwrap();
    assert_eq!((m.len(), s.len()), (6 * 16, 6 * 16));
}

#[test]
fn energy_examples() {
    assert_eq!(clip_energy(&[0.0; 100]), 0.0);
    assert_eq!(clip_energy(&[1.0; 4]), 4.0);
    assert_eq!(clip_energy(&[0.5, -0.5]), 0.5);
}

#[test]
fn impulse_reproduces_response() {
    let h: Vec<f32> = vec![0.5, -0.25, 0.125, 0.9, -0.1];
    let mut x = vec![0.0f32; 32];
    x[0] = 1.0;
    let y = convolve_truncated(&x, &h);
    assert_eq!(y.len(), 32);
    for (i, v) in y.iter().enumerate() {
        let e = h.get(i).copied().unwrap_or(0.0);
        assert!((v - e).abs() < 1e-6);
    }
    // Peak normalization: output is h scaled to the input peak.
    let w = Waveform::new(x.iter().map(|v| v * 0.8).collect(), SAMPLE_RATE).unwrap();
    let out = apply_dir(&w, &h);
    for (i, v) in out.samples.iter().enumerate() {
        let e = h.get(i).copied().unwrap_or(0.0) * 0.8 / 0.9;
        assert!((v - e).abs() < 1e-6);
    }
}

#[test]
fn truncated_convolution_matches_direct_sum() {
    let mut g = rng(6);
    for (n, m) in [(50, 7), (300, 120), (64, 200)] {
        let x: Vec<f32> = (0..n).map(|_| g.gen_range(-1.0f32..1.0)).collect();
        let h: Vec<f32> = (0..m).map(|_| g.gen_range(-1.0f32..1.0)).collect();
        let y = convolve_truncated(&x, &h);
        let oracle = direct_convolution(&x, &h);
        assert_eq!(y.len(), n);
        for (a, b) in y.iter().zip(&oracle[..n]) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn adir_gate_and_bank() {
    let bank = DirBank::synthetic(1);
    assert!(!bank.is_empty());
    assert!(bank.irs.iter().all(|h| h.iter().all(|v| v.is_finite())));
    assert_eq!(bank, DirBank::synthetic(1));

    let cfg = AdirConfig { p: 1.0, ..AdirConfig::default() };
    let silent = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
    assert_eq!(adir(&silent, &cfg, &bank, &mut rng(0)).unwrap(), silent);

    let loud = loud_clip(7, 32_000);
    assert!(clip_energy(&loud.samples) > cfg.energy_threshold);
    let out = adir(&loud, &cfg, &bank, &mut rng(0)).unwrap();
    assert_eq!(out.len(), loud.len());
    assert_ne!(out, loud);
    assert!((out.peak() - loud.peak()).abs() <= 1e-6 * loud.peak());

    let off = AdirConfig { enabled: false, p: 1.0, ..AdirConfig::default() };
    assert_eq!(adir(&loud, &off, &bank, &mut rng(0)).unwrap(), loud);
    let never = AdirConfig { p: 0.0, ..AdirConfig::default() };
    assert_eq!(adir(&loud, &never, &bank, &mut rng(0)).unwrap(), loud);

    let empty = DirBank { irs: Vec::new(), sample_rate: SAMPLE_RATE };
    assert!(adir(&loud, &cfg, &empty, &mut rng(0)).is_err());
    let bad = AdirConfig { p: -0.1, ..AdirConfig::default() };
    assert!(adir(&loud, &bad, &bank, &mut rng(0)).is_err());
}

#[test]
fn bank_loads_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(DirBank::load_dir(dir.path(), SAMPLE_RATE).is_err());
    let h = Waveform::new(vec![1.0, 0.5, 0.25, 0.0], 16_000).unwrap();
    flexinet_core::dsp::wav::write_wav(&dir.path().join("a.wav"), &h).unwrap();
    let bank = DirBank::load_dir(dir.path(), SAMPLE_RATE).unwrap();
    assert_eq!(bank.len(), 1);
    assert_eq!(bank.irs[0].len(), 8);
}

#[test]
fn roll_examples() {
    let x: Vec<i32> = (0..6).collect();
    assert_eq!(roll(&x, 0), x);
    assert_eq!(roll(&x, 6), x);
    assert_eq!(roll(&x, -12), x);
    assert_eq!(roll(&x, 2), vec![4, 5, 0, 1, 2, 3]);
    assert_eq!(roll(&x, -1), vec![1, 2, 3, 4, 5, 0]);

    let fm = features(8, &[2, 1, 3, 5]);
    assert_eq!(roll_time(&fm, 0).unwrap(), fm);
    assert_eq!(roll_time(&fm, 5).unwrap(), fm);
    let r = roll_time(&fm, 1).unwrap();
    for row in 0..6 {
        assert_eq!(r.data()[row * 5], fm.data()[row * 5 + 4]);
    }

    assert!(time_roll(&fm, 5, &mut rng(0)).is_err());
    let w = loud_clip(9, 100);
    assert!(time_roll_waveform(&w, 100, &mut rng(0)).is_err());
    assert_eq!(time_roll_waveform(&w, 0, &mut rng(0)).unwrap(), w);
}

#[test]
fn mask_examples() {
    let x = features(10, &[2, 1, 8, 6]);
    assert_eq!(mask_band(&x, 3, 0).unwrap(), x);
    assert!(mask_band(&x, 5, 4).is_err());
    assert!(freq_mask(&x, 9, &mut rng(0)).is_err());

    let all = mask_band(&x, 0, 8).unwrap();
    for (b, item) in all.data().chunks(48).enumerate() {
        let m = (x.data()[b * 48..][..48].iter().map(|&v| v as f64).sum::<f64>() / 48.0) as f32;
        assert!(item.iter().all(|&v| v == m));
    }

    let part = mask_band(&x, 2, 3).unwrap();
    for b in 0..2 {
        let m = (x.data()[b * 48..][..48].iter().map(|&v| v as f64).sum::<f64>() / 48.0) as f32;
        for f in 0..8 {
            let row = &part.data()[b * 48 + f * 6..][..6];
            let orig = &x.data()[b * 48 + f * 6..][..6];
            if (2..5).contains(&f) {
                assert!(row.iter().all(|&v| v == m));
            } else {
                assert!(row.iter().zip(orig).all(|(a, o)| a.to_bits() == o.to_bits()));
            }
        }
    }
    assert_eq!(freq_mask(&x, 0, &mut rng(1)).unwrap(), x);
}

#[test]
fn per_sample_generators_are_independent_of_order() {
    let a: Vec<u64> = (0..5).map(|i| sample_rng(42, i).gen()).collect();
    let b: Vec<u64> = (0..5).rev().map(|i| sample_rng(42, i).gen()).collect();
    let b: Vec<u64> = b.into_iter().rev().collect();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roll_preserves_multiset(v in prop::collection::vec(-100i32..100, 1..40), shift in -100isize..100) {
        let r = roll(&v, shift);
        let mut a = v.clone();
        let mut b = r.clone();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert_eq!(roll(&r, -shift), v);
    }

    #[test]
    fn adir_never_touches_quiet_clips(seed in any::<u64>(), scale in 0.0f32..0.1, p in 0.0f64..=1.0) {
        let bank = DirBank::synthetic(2);
        let mut g = rng(seed);
        // Energy at most 32000 * 0.1^2 = 320, under the threshold.
        let w = Waveform::new((0..32_000).map(|_| g.gen_range(-scale..=scale)).collect(), SAMPLE_RATE).unwrap();
        let cfg = AdirConfig { p, ..AdirConfig::default() };
        let out = adir(&w, &cfg, &bank, &mut g).unwrap();
        prop_assert!(out.samples.iter().zip(&w.samples).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mixstyle_zero_weight_takes_partner_stats(seed in any::<u64>()) {
        let x = features(seed, &[3, 2, 6, 9]);
        let partner = [2, 0, 1];
        let y = freq_mixstyle_with(&x, &[0.0; 3], &partner).unwrap();
        let (xm, xs) = bin_stats(&x).unwrap();
        let (ym, ys) = bin_stats(&y).unwrap();
        for b in 0..3 {
            for f in 0..6 {
                prop_assert!((ym[b * 6 + f] - xm[partner[b] * 6 + f]).abs() <= 1e-4);
                prop_assert!((ys[b * 6 + f] - xs[partner[b] * 6 + f]).abs() <= 1e-4);
            }
        }
    }
}
