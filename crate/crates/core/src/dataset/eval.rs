//! Per-device accuracy reports and clip-energy statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ClipRecord, Device, SCENES};
use crate::error::{Error, Result};

/// Accuracy broken down the way the device-generalization tables are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    /// Accuracy per device column `A .. S6`; absent devices are `None`.
    pub per_device: BTreeMap<String, Option<f64>>,
    pub per_scene: BTreeMap<String, Option<f64>>,
    /// Unweighted mean over the device columns that have clips.
    pub macro_acc: f64,
    /// Mean over S4-S6, when present.
    pub unseen_acc: Option<f64>,
    /// Clip-weighted accuracy.
    pub micro_acc: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(hit: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Scores `predictions[i]` against `records[i]`.
pub fn evaluate(predictions: &[usize], records: &[ClipRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Input("cannot evaluate an empty record set".into()));
    }
    if predictions.len() != records.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let k = SCENES.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut dev = [(0usize, 0usize); 9];
    let mut scene = vec![(0usize, 0usize); k];
    for (&p, r) in predictions.iter().zip(records) {
        if p >= k {
            return Err(Error::Input(format!("prediction {p} out of range")));
        }
        confusion[r.scene][p] += 1;
        let hit = usize::from(p == r.scene);
        dev[r.device.index()].0 += hit;
        dev[r.device.index()].1 += 1;
        scene[r.scene].0 += hit;
        scene[r.scene].1 += 1;
    }
    let per_device: BTreeMap<String, Option<f64>> = Device::ALL
        .iter()
        .map(|d| (d.as_str().to_string(), ratio(dev[d.index()].0, dev[d.index()].1)))
        .collect();
    let present: Vec<f64> = Device::ALL
        .iter()
        .filter_map(|d| ratio(dev[d.index()].0, dev[d.index()].1))
        .collect();
    let unseen: Vec<f64> = Device::ALL
        .iter()
        .filter(|d| d.is_unseen())
        .filter_map(|d| ratio(dev[d.index()].0, dev[d.index()].1))
        .collect();
    let hits: usize = dev.iter().map(|d| d.0).sum();
    Ok(EvalReport {
        clips: records.len(),
        per_device,
        per_scene: SCENES
            .iter()
            .zip(&scene)
            .map(|(s, &(h, n))| (s.to_string(), ratio(h, n)))
            .collect(),
        macro_acc: present.iter().sum::<f64>() / present.len() as f64,
        unseen_acc: (!unseen.is_empty()).then(|| unseen.iter().sum::<f64>() / unseen.len() as f64),
        micro_acc: hits as f64 / records.len() as f64,
        confusion,
    })
}

impl EvalReport {
    /// Accuracy of one device column.
    pub fn device(&self, d: Device) -> Option<f64> {
        self.per_device.get(d.as_str()).copied().flatten()
    }

    /// Plain-text table: device columns `A .. S6` and `ACC` in percent,
    /// then per-scene accuracy and the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cell = |v: Option<f64>| v.map_or("   -  ".to_string(), |a| format!("{:6.2}", 100.0 * a));
        for d in Device::ALL {
            let _ = write!(s, "{:>7}", d.as_str());
        }
        let _ = writeln!(s, "{:>7}", "ACC");
        for d in Device::ALL {
            let _ = write!(s, " {}", cell(self.device(d)));
        }
        let _ = writeln!(s, " {}", cell(Some(self.macro_acc)));
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<18} {:>6}", "scene", "acc");
        for (name, acc) in SCENES.iter().map(|n| (n, self.per_scene[*n])) {
            let _ = writeln!(s, "{name:<18} {}", cell(acc));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion (rows: true, columns: predicted)");
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:<18}", SCENES[i]);
            for v in row {
                let _ = write!(s, "{v:>5}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Equal-width histogram of clip energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn energy_histogram(energies: &[f64], bins: usize) -> Result<EnergyHistogram> {
    if energies.is_empty() {
        return Err(Error::Input("no clip energies to histogram".into()));
    }
    let bins = bins.max(1);
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Ok(EnergyHistogram {
            edges: vec![min, max],
            counts: vec![energies.len()],
            mean,
            min,
            max,
        });
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0; bins];
    for &e in energies {
        let b = (((e - min) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(EnergyHistogram {
        edges: (0..=bins).map(|i| min + width * i as f64).collect(),
        counts,
        mean,
        min,
        max,
    })
}

impl EnergyHistogram {
    pub fn to_text(&self) -> String {
        let peak = self.counts.iter().copied().max().unwrap_or(1).max(1);
        let mut s = format!(
            "mean energy {:.3} (min {:.3}, max {:.3})\n",
            self.mean, self.min, self.max
        );
        for (i, &c) in self.counts.iter().enumerate() {
            let bar = "#".repeat((40 * c).div_ceil(peak));
            let _ = writeln!(s, "{:>12.3} .. {:<12.3} {c:>7} {bar}", self.edges[i], self.edges[i + 1]);
        }
        s
    }
}
