mod common;

use std::f64::consts::PI;

use common::rng;
use flexinet_core::dsp::wav::{read_wav, write_wav, write_wav_i16};
use flexinet_core::dsp::{log_mel, stft, FeatureExtractor, MelConfig, MelFilterbank, Waveform, SAMPLE_RATE};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_cfg() -> MelConfig {
    MelConfig {
        sample_rate: 8000,
        n_mels: 20,
        n_fft: 256,
        hop: 64,
        fmax: 4000.0,
        clip_samples: 1024,
        frames: 16,
        ..MelConfig::default()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Per-frame naive DFT with centered reflection padding; returns
/// `[bin][frame]` as (re, im).
fn naive_stft(x: &[f32], n_fft: usize, hop: usize) -> Vec<Vec<(f64, f64)>> {
    let win = hann(n_fft);
    let frames = x.len() / hop + 1;
    let len = x.len() as isize;
    let at = |i: isize| -> f64 {
        let mut j = i;
        while j < 0 || j >= len {
            if j < 0 {
                j = -j;
            }
            if j >= len {
                j = 2 * (len - 1) - j;
            }
        }
        x[j as usize] as f64
    };
    let mut out = vec![vec![(0.0, 0.0); frames]; n_fft / 2 + 1];
    for f in 0..frames {
        let start = (f * hop) as isize - (n_fft / 2) as isize;
        let seg: Vec<f64> = (0..n_fft).map(|i| at(start + i as isize) * win[i]).collect();
        for (k, row) in out.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, s) in seg.iter().enumerate() {
                let ph = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                re += s * ph.cos();
                im += s * ph.sin();
            }
            row[f] = (re, im);
        }
    }
    out
}

#[test]
fn canonical_framing() {
    let cfg = MelConfig::default();
    assert_eq!(cfg.centered_frames(32_000), 65);
    let w = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
    let spec = stft(&w, &cfg).unwrap();
    assert_eq!((spec.bins, spec.frames), (1025, 65));
    assert!(spec.power().iter().all(|&p| p == 0.0));

    let feats = log_mel(&w, &cfg).unwrap();
    assert_eq!(feats.shape(), &[1, 1, 256, 64]);
    let floor = 1e-5f32.ln();
    assert!(feats.data().iter().all(|&v| v == floor));
}

#[test]
fn empty_input_and_bad_configs_fail() {
    let cfg = MelConfig::default();
    let empty = Waveform::new(Vec::new(), SAMPLE_RATE).unwrap();
    assert!(stft(&empty, &cfg).is_err());
    assert!(log_mel(&empty, &cfg).is_err());
    assert!(Waveform::new(vec![0.0], 0).is_err());

    for bad in [
        MelConfig { fmin: 9000.0, fmax: 8000.0, ..MelConfig::default() },
        MelConfig { fmax: 20_000.0, ..MelConfig::default() },
        MelConfig { fmin: -1.0, ..MelConfig::default() },
    ] {
        assert!(MelFilterbank::new(&bad).is_err());
    }
}

#[test]
fn stft_matches_naive_dft() {
    let cfg = small_cfg();
    let mut g = rng(31);
    let x: Vec<f32> = (0..1024).map(|_| g.gen_range(-1.0f32..1.0)).collect();
    let spec = FeatureExtractor::new(&cfg).unwrap().stft(&x).unwrap();
    let oracle = naive_stft(&x, cfg.n_fft, cfg.hop);
    assert_eq!(spec.frames, oracle[0].len());
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (k, row) in oracle.iter().enumerate() {
        for (f, &(re, im)) in row.iter().enumerate() {
            let c = spec.at(k, f);
            diff += (c.re as f64 - re).powi(2) + (c.im as f64 - im).powi(2);
            norm += re * re + im * im;
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(rel <= 1e-4, "relative Frobenius error {rel}");
}

#[test]
fn bin_centre_cosine_concentrates_energy() {
    for cfg in [small_cfg(), MelConfig::default()] {
        let n = cfg.clip_samples;
        for k in [3usize, 17, 100] {
            if k >= cfg.n_bins() - 1 {
                continue;
            }
            let f0 = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let x: Vec<f32> = (0..n)
                .map(|i| (2.0 * PI * f0 * i as f64 / cfg.sample_rate as f64).cos() as f32)
                .collect();
            let spec = FeatureExtractor::new(&cfg).unwrap().stft(&x).unwrap();
            let p = spec.power();
            // Interior frame, away from the reflected edges.
            let f = spec.frames / 2;
            let total: f64 = (0..spec.bins).map(|b| p[b * spec.frames + f] as f64).sum();
            let at_k = p[k * spec.frames + f] as f64;
            // A Hann window spreads a bin-centre tone over bins k-1..k+1 in
            // the ratio 1/4 : 1 : 1/4 of amplitude, so the centre bin alone
            // holds 2/3 of the power. The main lobe holds all of it.
            let lobe: f64 = (k - 1..=k + 1).map(|b| p[b * spec.frames + f] as f64).sum();
            assert!(lobe / total >= 0.95, "bin {k}: lobe share {}", lobe / total);
            assert!((at_k / total - 2.0 / 3.0).abs() < 1e-3, "bin {k}: centre share {}", at_k / total);
            let argmax = (0..spec.bins)
                .max_by(|&a, &b| p[a * spec.frames + f].total_cmp(&p[b * spec.frames + f]))
                .unwrap();
            assert_eq!(argmax, k);
        }
    }
}

#[test]
fn filterbank_shape_and_rows() {
    let cfg = MelConfig::default();
    let fb = MelFilterbank::new(&cfg).unwrap();
    assert_eq!((fb.n_mels, fb.n_bins), (256, 1025));
    assert_eq!(fb.weights().len(), 256 * 1025);
    let mut last_peak = None;
    for m in 0..fb.n_mels {
        let row = fb.row(m);
        assert!(row.iter().all(|&w| w >= 0.0));
        assert!(row.iter().sum::<f32>() > 0.0, "row {m} is empty");
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        if let Some(prev) = last_peak {
            assert!(peak >= prev, "row {m} peak {peak} before {prev}");
        }
        last_peak = Some(peak);
        // Triangular: non-decreasing up to the peak, non-increasing after.
        let nz: Vec<usize> = (0..row.len()).filter(|&b| row[b] > 0.0).collect();
        for w in nz.windows(2) {
            assert_eq!(w[1], w[0] + 1, "row {m} support has a gap");
        }
        for b in nz[0]..peak {
            assert!(row[b] <= row[b + 1]);
        }
        for b in peak..*nz.last().unwrap() {
            assert!(row[b] >= row[b + 1]);
        }
    }
    let centers = fb.centers_hz();
    assert!(centers.windows(2).all(|c| c[0] < c[1]));
    let flat = vec![1.0f32; fb.n_bins];
    assert!(fb.apply(&flat).iter().all(|&v| v > 0.0));
}

#[test]
fn white_noise_matches_flat_spectrum() {
    let cfg = MelConfig::default();
    let fx = FeatureExtractor::new(&cfg).unwrap();
    let fb = fx.filterbank();
    let mut g = rng(32);
    let sigma = 0.1f64;
    let x: Vec<f32> = (0..cfg.clip_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            (sigma * z) as f32
        })
        .collect();
    let feats = fx.log_mel(&Waveform::new(x, cfg.sample_rate).unwrap()).unwrap();

    // Expected power per bin of windowed white noise is sigma^2 * sum(w^2),
    // so each mel band expects that times its row sum.
    let w2: f64 = hann(cfg.n_fft).iter().map(|v| v * v).sum();
    let per_bin = sigma * sigma * w2;
    let expected: Vec<f64> = (0..cfg.n_mels)
        .map(|m| fb.row(m).iter().map(|&v| v as f64).sum::<f64>() * per_bin)
        .collect();
    let expected_total: f64 = expected.iter().sum();
    let frames = cfg.frames;
    let mel = |m: usize, f: usize| (feats.data()[m * frames + f] as f64).exp() - 1e-5;
    for f in 1..frames - 1 {
        let total: f64 = (0..cfg.n_mels).map(|m| mel(m, f)).sum();
        let db = 10.0 * (total / expected_total).log10();
        assert!(db.abs() <= 3.0, "frame {f}: {db:.2} dB");
    }
    for (m, &e) in expected.iter().enumerate() {
        let avg = (1..frames - 1).map(|f| mel(m, f)).sum::<f64>() / (frames - 2) as f64;
        let db = 10.0 * (avg / e).log10();
        assert!(db.abs() <= 3.0, "band {m}: {db:.2} dB");
    }
}

#[test]
fn amplitude_scaling_shifts_by_log_gain() {
    let cfg = MelConfig::default();
    let fx = FeatureExtractor::new(&cfg).unwrap();
    let mut g = rng(33);
    let x: Vec<f32> = (0..cfg.clip_samples).map(|_| g.gen_range(-0.5f32..0.5)).collect();
    let base = fx.log_mel(&Waveform::new(x.clone(), cfg.sample_rate).unwrap()).unwrap();
    for a in [2.0f32, 10.0] {
        let scaled: Vec<f32> = x.iter().map(|v| v * a).collect();
        let out = fx.log_mel(&Waveform::new(scaled, cfg.sample_rate).unwrap()).unwrap();
        let shift = (a * a).ln();
        let mut checked = 0;
        for (o, b) in out.data().iter().zip(base.data()) {
            // Only where mel power dominates the floor by a wide margin.
            if *b > 1e-5f32.ln() + 10.0 {
                assert!(((o - b) - shift).abs() <= 1e-3, "a={a}: {} vs {shift}", o - b);
                checked += 1;
            }
        }
        assert!(checked > 256 * 60);
    }
}

#[test]
fn wrong_length_and_rate_are_adapted() {
    let cfg = MelConfig::default();
    let mut g = rng(34);
    let short: Vec<f32> = (0..20_000).map(|_| g.gen_range(-0.5f32..0.5)).collect();
    let out = log_mel(&Waveform::new(short.clone(), SAMPLE_RATE).unwrap(), &cfg).unwrap();
    assert_eq!(out.shape(), &[1, 1, 256, 64]);
    assert!(out.all_finite());
    let mut padded = short;
    padded.resize(32_000, 0.0);
    let expect = log_mel(&Waveform::new(padded, SAMPLE_RATE).unwrap(), &cfg).unwrap();
    assert_eq!(out, expect);

    let long: Vec<f32> = (0..50_000).map(|_| g.gen_range(-0.5f32..0.5)).collect();
    let out = log_mel(&Waveform::new(long, SAMPLE_RATE).unwrap(), &cfg).unwrap();
    assert_eq!(out.shape(), &[1, 1, 256, 64]);

    let other_rate: Vec<f32> = (0..16_000).map(|_| g.gen_range(-0.5f32..0.5)).collect();
    let out = log_mel(&Waveform::new(other_rate, 16_000).unwrap(), &cfg).unwrap();
    assert_eq!(out.shape(), &[1, 1, 256, 64]);
    assert!(out.all_finite());
}

#[test]
fn features_are_deterministic() {
    let cfg = MelConfig::default();
    let mut g = rng(35);
    let x: Vec<f32> = (0..32_000).map(|_| g.gen_range(-1.0f32..1.0)).collect();
    let w = Waveform::new(x, SAMPLE_RATE).unwrap();
    let a = log_mel(&w, &cfg).unwrap();
    let b = FeatureExtractor::new(&cfg).unwrap().log_mel(&w).unwrap();
    assert_eq!(a.shape(), b.shape());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn wav_round_trips_and_downmix() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = rng(36);
    let x: Vec<f32> = (0..4000).map(|_| g.gen_range(-0.9f32..0.9)).collect();
    let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();

    let p = dir.path().join("f.wav");
    write_wav(&p, &w).unwrap();
    assert_eq!(read_wav(&p).unwrap(), w);

    let p = dir.path().join("i.wav");
    write_wav_i16(&p, &w).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.sample_rate, SAMPLE_RATE);
    // Written at 32767 per unit and read at 1/32768: within two steps.
    assert!(back.samples.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 2.0 / 32_768.0));

    let p = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut wr = hound::WavWriter::create(&p, spec).unwrap();
    for i in 0..100 {
        wr.write_sample(i as f32 / 100.0).unwrap();
        wr.write_sample(-0.5f32).unwrap();
    }
    wr.finalize().unwrap();
    let st = read_wav(&p).unwrap();
    assert_eq!((st.len(), st.sample_rate), (100, 16_000));
    for (i, s) in st.samples.iter().enumerate() {
        assert!((s - (i as f32 / 100.0 - 0.5) / 2.0).abs() < 1e-7);
    }

    let p = dir.path().join("junk.wav");
    std::fs::write(&p, b"not a wav file").unwrap();
    assert!(read_wav(&p).is_err());
}
