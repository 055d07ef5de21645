//! Clip records, device and split bookkeeping, the TAU-style metadata
//! reader, the synthetic multi-device corpus, evaluation reports and energy
//! statistics.

mod eval;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{energy_histogram, evaluate, EnergyHistogram, EvalReport};
pub use synth::{device_profile, scene_profile, DeviceProfile, SceneProfile, SynthClip, SyntheticSpec};

pub const SCENES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

/// Training and test record counts of the full TAU22 development set.
pub const TAU_TRAIN_CLIPS: usize = 139_620;
pub const TAU_TEST_CLIPS: usize = 29_680;

pub fn scene_index(name: &str) -> Option<usize> {
    SCENES.iter().position(|s| *s == name)
}

/// Recording device: three real (A, B, C) and six simulated (S1-S6).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Device {
    A,
    B,
    C,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl Device {
    pub const ALL: [Device; 9] = [
        Device::A,
        Device::B,
        Device::C,
        Device::S1,
        Device::S2,
        Device::S3,
        Device::S4,
        Device::S5,
        Device::S6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["A", "B", "C", "S1", "S2", "S3", "S4", "S5", "S6"][self.index()]
    }

    /// Devices absent from the training split.
    pub fn is_unseen(self) -> bool {
        matches!(self, Device::S4 | Device::S5 | Device::S6)
    }

    pub fn seen() -> impl Iterator<Item = Device> {
        Self::ALL.into_iter().filter(|d| !d.is_unseen())
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Device::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Input(format!("unknown device '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Held out from student training; used to fit teacher fusion.
    Unused,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unused => "unused",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "evaluate" => Ok(Split::Test),
            "unused" => Ok(Split::Unused),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

/// One labelled clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Audio file, when the clip lives on disk.
    pub path: Option<PathBuf>,
    pub scene: usize,
    pub device: Device,
    pub city: String,
    pub split: Split,
}

impl ClipRecord {
    pub fn new(clip_id: String, scene: usize, device: Device, city: String, split: Split) -> Result<Self> {
        if scene >= SCENES.len() {
            return Err(Error::Input(format!("scene index {scene} out of range")));
        }
        if device.is_unseen() && split == Split::Train {
            return Err(Error::Input(format!(
                "clip '{clip_id}': device {device} may not appear in the training split"
            )));
        }
        Ok(Self {
            clip_id,
            path: None,
            scene,
            device,
            city,
            split,
        })
    }
}

/// Panics unless every record may enter a training batch. Called where
/// batches are assembled, not only at load time.
pub fn assert_trainable(records: &[&ClipRecord]) {
    for r in records {
        assert!(
            !r.device.is_unseen() && r.split == Split::Train,
            "clip '{}' (device {}, split {}) reached a training batch",
            r.clip_id,
            r.device,
            r.split.as_str()
        );
    }
}

/// Reads a TAU-layout metadata file.
///
/// The first line names the columns; tab or comma separators are detected
/// from it. Required columns are `filename`, `scene_label` and
/// `source_label`; `identifier` supplies the city (otherwise the second
/// dash-separated token of the file name) and an optional `split` column
/// overrides `default_split`. Audio paths resolve relative to the file's
/// directory.
pub fn load_tau_metadata(meta_csv: &Path, default_split: Split) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(meta_csv)?;
    let origin = meta_csv.display().to_string();
    let base = meta_csv.parent().unwrap_or(Path::new("."));
    let records = parse_tau_metadata(&text, &origin, base, default_split)?;
    report_split_counts(&records);
    Ok(records)
}

pub fn parse_tau_metadata(text: &str, origin: &str, base: &Path, default_split: Split) -> Result<Vec<ClipRecord>> {
    let Some(header) = text.lines().next().filter(|l| !l.trim().is_empty()) else {
        warn!("{origin}: metadata file is empty");
        return Ok(Vec::new());
    };
    let delim = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| perr(1, format!("missing column '{name}'")));
    let (fcol, scol, dcol) = (need("filename")?, need("scene_label")?, need("source_label")?);
    let icol = col("identifier");
    let splitcol = col("split");

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let filename = field(fcol);
        if filename.is_empty() {
            return Err(perr(line, "empty filename".into()));
        }
        let scene_name = field(scol);
        let scene = scene_index(scene_name).ok_or_else(|| perr(line, format!("unknown scene '{scene_name}'")))?;
        let dev_token = field(dcol);
        let device: Device = dev_token
            .parse()
            .map_err(|_| perr(line, format!("unknown device '{dev_token}'")))?;
        let stem = Path::new(filename)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(filename)
            .to_string();
        let city = match icol.map(field) {
            Some(id) if !id.is_empty() => id.split('-').next().unwrap_or(id).to_string(),
            _ => stem.split('-').nth(1).unwrap_or("unknown").to_string(),
        };
        let split = match splitcol.map(field) {
            Some(s) if !s.is_empty() => s.parse().map_err(|e: Error| perr(line, e.to_string()))?,
            _ => default_split,
        };
        let mut rec =
            ClipRecord::new(stem, scene, device, city, split).map_err(|e| perr(line, e.to_string()))?;
        rec.path = Some(base.join(filename));
        out.push(rec);
    }
    if out.is_empty() {
        warn!("{origin}: metadata lists no clips");
    }
    Ok(out)
}

/// Logs split sizes and, for a corpus the size of TAU22, checks them
/// against the published counts.
pub fn report_split_counts(records: &[ClipRecord]) {
    let train = records.iter().filter(|r| r.split == Split::Train).count();
    let test = records.iter().filter(|r| r.split == Split::Test).count();
    let unused = records.len() - train - test;
    info!("metadata: {train} train, {test} test, {unused} unused clips");
    if train >= TAU_TRAIN_CLIPS / 2 && train != TAU_TRAIN_CLIPS {
        warn!("expected {TAU_TRAIN_CLIPS} training clips for the full corpus, found {train}");
    }
    if test >= TAU_TEST_CLIPS / 2 && test != TAU_TEST_CLIPS {
        warn!("expected {TAU_TEST_CLIPS} test clips for the full corpus, found {test}");
    }
}
