mod common;

use std::path::Path;

use common::{nearest_centroid, rng};
use flexinet_core::augment::clip_energy;
use flexinet_core::dataset::{
    energy_histogram, evaluate, parse_tau_metadata, ClipRecord, Device, Split, SyntheticSpec, SCENES,
};
use flexinet_core::dsp::wav::read_wav;
use flexinet_core::train::Corpus;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn tiny() -> SyntheticSpec {
    SyntheticSpec {
        train_per_cell: 1,
        test_per_cell: 1,
        unused_per_cell: 1,
        seed: 5,
    }
}

/// Log power of the whole clip in 48 logarithmically spaced bands, with the
/// mean level removed so clip gain does not matter.
fn band_features(x: &[f32]) -> Vec<f64> {
    let n = x.len().next_power_of_two();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm_sqr()).collect();
    let bands = 48;
    let (lo, hi) = ((20.0f64).ln(), (16_000.0f64).ln());
    let hz = 32_000.0 / n as f64;
    let logs: Vec<f64> = (0..bands)
        .map(|b| {
            let f0 = (lo + (hi - lo) * b as f64 / bands as f64).exp();
            let f1 = (lo + (hi - lo) * (b + 1) as f64 / bands as f64).exp();
            let (k0, k1) = ((f0 / hz) as usize, ((f1 / hz) as usize).max((f0 / hz) as usize + 1));
            (power[k0..k1.min(power.len())].iter().sum::<f64>() + 1e-9).ln()
        })
        .collect();
    let level = logs.iter().sum::<f64>() / bands as f64;
    logs.iter().map(|v| v - level).collect()
}

#[test]
fn corpus_is_seed_deterministic_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = tiny().write(a.path()).unwrap();
    let rb = tiny().write(b.path()).unwrap();
    assert_eq!(ra.len(), rb.len());
    assert_eq!(std::fs::read(a.path().join("meta.csv")).unwrap(), std::fs::read(b.path().join("meta.csv")).unwrap());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.clip_id, y.clip_id);
        assert_eq!(std::fs::read(x.path.as_ref().unwrap()).unwrap(), std::fs::read(y.path.as_ref().unwrap()).unwrap());
    }
    let other = SyntheticSpec { seed: 6, ..tiny() };
    assert_ne!(other.render(&ra[0]).samples, tiny().render(&ra[0]).samples);

    // The written metadata parses back to the same records.
    let back = Corpus::from_metadata(&a.path().join("meta.csv")).unwrap();
    assert_eq!(back.records.len(), ra.len());
    for (x, y) in back.records.iter().zip(&ra) {
        assert_eq!((&x.clip_id, x.scene, x.device, x.split), (&y.clip_id, y.scene, y.device, y.split));
    }
    let w = read_wav(ra[0].path.as_ref().unwrap()).unwrap();
    assert_eq!((w.len(), w.sample_rate), (32_000, 32_000));
}

#[test]
fn split_layout_respects_device_rules() {
    let spec = SyntheticSpec { train_per_cell: 2, test_per_cell: 3, unused_per_cell: 1, seed: 1 };
    let recs = spec.records();
    let count = |s: Split| recs.iter().filter(|r| r.split == s).count();
    assert_eq!(count(Split::Train), 2 * 10 * 6);
    assert_eq!(count(Split::Unused), 10 * 6);
    assert_eq!(count(Split::Test), 3 * 10 * 9);
    assert!(recs.iter().filter(|r| r.split != Split::Test).all(|r| !r.device.is_unseen()));
    for d in Device::ALL {
        assert!(recs.iter().any(|r| r.split == Split::Test && r.device == d));
    }
    let mut ids: Vec<&str> = recs.iter().map(|r| r.clip_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), recs.len());

    let empty = SyntheticSpec { train_per_cell: 0, test_per_cell: 0, unused_per_cell: 0, seed: 1 };
    assert!(empty.records().is_empty());
    assert!(empty.generate().is_empty());

    assert!(ClipRecord::new("x".into(), 0, Device::S5, "c".into(), Split::Train).is_err());
    assert!(ClipRecord::new("x".into(), 10, Device::A, "c".into(), Split::Test).is_err());
}

#[test]
fn scenes_are_separable_on_the_reference_device() {
    let spec = SyntheticSpec::default();
    let feats = |split: Split| -> Vec<(Vec<f64>, usize)> {
        spec.records()
            .into_iter()
            .filter(|r| r.device == Device::A && r.split == split)
            .map(|r| (band_features(&spec.render(&r).samples), r.scene))
            .collect()
    };
    let train = feats(Split::Train);
    let test = feats(Split::Test);
    assert_eq!(test.len(), 60);
    let acc = nearest_centroid(&train, &test, SCENES.len());
    assert!(acc >= 0.90, "nearest-centroid accuracy {acc}");
}

fn test_records(per_cell: usize) -> Vec<ClipRecord> {
    let mut v = Vec::new();
    for d in Device::ALL {
        for s in 0..10 {
            for i in 0..per_cell {
                v.push(ClipRecord::new(format!("{d}-{s}-{i}"), s, d, "c".into(), Split::Test).unwrap());
            }
        }
    }
    v
}

#[test]
fn perfect_and_random_predictions() {
    let recs = test_records(2);
    let perfect: Vec<usize> = recs.iter().map(|r| r.scene).collect();
    let rep = evaluate(&perfect, &recs).unwrap();
    assert_eq!(rep.macro_acc, 1.0);
    assert_eq!(rep.micro_acc, 1.0);
    assert!(rep.per_device.values().all(|v| *v == Some(1.0)));
    assert!(rep.per_scene.values().all(|v| *v == Some(1.0)));
    for (i, row) in rep.confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert_eq!(c, if i == j { 18 } else { 0 });
        }
    }

    let recs = test_records(120);
    let mut g = rng(51);
    let random: Vec<usize> = recs.iter().map(|_| g.gen_range(0..10)).collect();
    let rep = evaluate(&random, &recs).unwrap();
    assert_eq!(rep.clips, 10_800);
    for (d, acc) in &rep.per_device {
        let acc = acc.unwrap();
        assert!((acc - 0.10).abs() <= 0.03, "{d}: {acc}");
    }
    for (s, acc) in &rep.per_scene {
        let acc = acc.unwrap();
        assert!((acc - 0.10).abs() <= 0.03, "{s}: {acc}");
    }
    for (i, row) in rep.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), recs.iter().filter(|r| r.scene == i).count());
    }
    let per_device_mean = rep.per_device.values().map(|v| v.unwrap()).sum::<f64>() / 9.0;
    assert!((rep.macro_acc - per_device_mean).abs() < 1e-12);
    let unseen = [Device::S4, Device::S5, Device::S6].iter().map(|&d| rep.device(d).unwrap()).sum::<f64>() / 3.0;
    assert!((rep.unseen_acc.unwrap() - unseen).abs() < 1e-12);
}

#[test]
fn evaluation_errors_and_layout() {
    assert!(evaluate(&[], &[]).is_err());
    let recs = test_records(1);
    assert!(evaluate(&[0; 3], &recs).is_err());
    let mut preds = vec![0; recs.len()];
    preds[0] = 10;
    assert!(evaluate(&preds, &recs).is_err());

    let preds: Vec<usize> = recs.iter().map(|r| r.scene).collect();
    let text = evaluate(&preds, &recs).unwrap().to_text();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["A", "B", "C", "S1", "S2", "S3", "S4", "S5", "S6", "ACC"]);

    // Devices missing from the records show up as empty columns and do
    // not enter the average.
    let only_a: Vec<ClipRecord> = recs.iter().filter(|r| r.device == Device::A).cloned().collect();
    let preds: Vec<usize> = only_a.iter().map(|r| (r.scene + usize::from(r.scene < 5)) % 10).collect();
    let rep = evaluate(&preds, &only_a).unwrap();
    assert_eq!(rep.device(Device::B), None);
    assert!((rep.macro_acc - 0.5).abs() < 1e-12);
    assert_eq!(rep.unseen_acc, None);
}

#[test]
fn energy_histogram_examples() {
    let h = energy_histogram(&[0.0; 5], 10).unwrap();
    assert_eq!(h.counts, vec![5]);
    assert_eq!((h.mean, h.min, h.max), (0.0, 0.0, 0.0));
    let h = energy_histogram(&[1.0, 3.0], 4).unwrap();
    assert_eq!(h.mean, 2.0);
    assert_eq!(h.counts.iter().sum::<usize>(), 2);
    assert_eq!(h.edges.len(), 5);
    assert!(energy_histogram(&[], 4).is_err());

    let corpus = Corpus::synthetic(&tiny());
    let energies: Vec<f64> = corpus.waves.iter().map(|w| clip_energy(&w.samples)).collect();
    let h = energy_histogram(&energies, 20).unwrap();
    let direct = energies.iter().sum::<f64>() / energies.len() as f64;
    assert!((h.mean - direct).abs() <= 1e-9 * direct);
    assert!(h.mean > 0.0);
    assert!(h.to_text().starts_with("mean energy"));
}

#[test]
fn metadata_parsing() {
    let base = Path::new("/data");
    let text = "filename\tscene_label\tidentifier\tsource_label\n\
                audio/airport-lisbon-1000-40000-a.wav\tairport\tlisbon-1000\ta\n\
                audio/tram-vienna-285-8639-s5.wav\ttram\tvienna-285\ts5\n";
    let recs = parse_tau_metadata(text, "meta.csv", base, Split::Test).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].clip_id, "airport-lisbon-1000-40000-a");
    assert_eq!((recs[0].scene, recs[0].device, recs[0].city.as_str()), (0, Device::A, "lisbon"));
    assert_eq!(recs[1].device, Device::S5);
    assert_eq!(recs[1].path.as_deref(), Some(Path::new("/data/audio/tram-vienna-285-8639-s5.wav")));

    assert!(parse_tau_metadata("", "m", base, Split::Train).unwrap().is_empty());
    assert!(parse_tau_metadata("filename,scene_label,source_label\n", "m", base, Split::Train).unwrap().is_empty());

    let bad_device = "filename,scene_label,source_label\nx.wav,bus,z9\n";
    let err = parse_tau_metadata(bad_device, "m", base, Split::Test).unwrap_err().to_string();
    assert!(err.contains("z9") && err.contains('2'), "{err}");
    let bad_scene = "filename,scene_label,source_label\nx.wav,beach,a\n";
    assert!(parse_tau_metadata(bad_scene, "m", base, Split::Test).is_err());
    let missing_col = "filename,scene_label\nx.wav,bus\n";
    assert!(parse_tau_metadata(missing_col, "m", base, Split::Test).is_err());
    let unseen_train = "filename,scene_label,source_label\nx.wav,bus,s4\n";
    assert!(parse_tau_metadata(unseen_train, "m", base, Split::Train).is_err());
    let ragged = "filename,scene_label,source_label\nx.wav,bus\n";
    assert!(parse_tau_metadata(ragged, "m", base, Split::Test).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn evaluation_is_order_invariant(seed in any::<u64>()) {
        let recs = test_records(2);
        let mut g = rng(seed);
        let preds: Vec<usize> = recs.iter().map(|r| if g.gen_bool(0.6) { r.scene } else { g.gen_range(0..10) }).collect();
        let base = evaluate(&preds, &recs).unwrap();
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.shuffle(&mut g);
        let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let r2: Vec<ClipRecord> = order.iter().map(|&i| recs[i].clone()).collect();
        prop_assert_eq!(evaluate(&p2, &r2).unwrap(), base);
    }
}
