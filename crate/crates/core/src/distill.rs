//! Teacher-logit ingestion, weighted fusion with per-class bias, and the
//! combined hard-label / distillation loss.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::tensor::{Real, Tape, Tensor, Var};

const TEXT_MAGIC: &str = "# flexinet-teacher-logits v1";

/// Raw logits of `K` teachers for every clip, stored teacher-major
/// (`K x classes` per clip).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherLogits {
    pub teachers: Vec<String>,
    pub classes: Vec<String>,
    pub clips: BTreeMap<String, Vec<f32>>,
}

impl TeacherLogits {
    pub fn k(&self) -> usize {
        self.teachers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, clip: &str) -> Option<&[f32]> {
        self.clips.get(clip).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Input("teacher logits declare no teachers".into()));
        }
        let width = self.k() * self.num_classes();
        for (id, row) in &self.clips {
            if row.len() != width {
                return Err(Error::Input(format!(
                    "clip '{id}' has {} logits, expected {} teachers x {} classes",
                    row.len(),
                    self.k(),
                    self.num_classes()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("clip '{id}' has non-finite logits")));
            }
        }
        Ok(())
    }

    /// Errors naming the first clip of `ids` without logits.
    pub fn require(&self, ids: &[&str]) -> Result<()> {
        match ids.iter().find(|id| !self.clips.contains_key(**id)) {
            Some(id) => Err(Error::Input(format!("no teacher logits for clip '{id}'"))),
            None => Ok(()),
        }
    }

    /// Parses the line format: a magic line, `# teachers:` and `# classes:`
    /// headers, then one `clip_id v1 ... v(K*C)` record per line.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut teachers = None;
        let mut classes = None;
        let mut clips = BTreeMap::new();
        let mut saw_magic = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if line == TEXT_MAGIC {
                    saw_magic = true;
                } else if let Some(v) = rest.strip_prefix("teachers:") {
                    teachers = Some(v.split_whitespace().map(String::from).collect::<Vec<_>>());
                } else if let Some(v) = rest.strip_prefix("classes:") {
                    classes = Some(v.split_whitespace().map(String::from).collect::<Vec<_>>());
                }
                continue;
            }
            if !saw_magic {
                return Err(perr(line_no, format!("missing '{TEXT_MAGIC}' header")));
            }
            let (Some(t), Some(c)) = (&teachers, &classes) else {
                return Err(perr(line_no, "record before '# teachers:' and '# classes:' headers".into()));
            };
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap().to_string();
            let vals = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|_| perr(line_no, format!("'{f}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != t.len() * c.len() {
                return Err(perr(
                    line_no,
                    format!(
                        "clip '{id}' has {} values, expected {} teachers x {} classes",
                        vals.len(),
                        t.len(),
                        c.len()
                    ),
                ));
            }
            if clips.insert(id.clone(), vals).is_some() {
                return Err(perr(line_no, format!("duplicate clip '{id}'")));
            }
        }
        if !saw_magic {
            return Err(perr(1, format!("missing '{TEXT_MAGIC}' header")));
        }
        let out = Self {
            teachers: teachers.ok_or_else(|| perr(1, "missing '# teachers:' header".into()))?,
            classes: classes.ok_or_else(|| perr(1, "missing '# classes:' header".into()))?,
            clips,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{TEXT_MAGIC}\n# teachers: {}\n# classes: {}\n",
            self.teachers.join(" "),
            self.classes.join(" ")
        );
        for (id, row) in &self.clips {
            s.push_str(id);
            for v in row {
                s.push(' ');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    /// Reads either format; JSON is recognized by a leading `{`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let out: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            out.validate()?;
            Ok(out)
        } else {
            Self::parse_text(&text, &path.display().to_string())
        }
    }

    /// Writes JSON when the extension is `.json`, the line format otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self)?
        } else {
            self.to_text()
        };
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Fusion weights `alpha` (one per teacher) and per-class biases `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FusionParams {
    /// `alpha = 1/K`, `beta = 0`: the plain teacher average.
    pub fn uniform(k: usize, classes: usize) -> Self {
        Self {
            alpha: vec![1.0 / k as f64; k],
            beta: vec![0.0; classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.beta.is_empty() {
            return Err(Error::Input("fusion parameters are empty".into()));
        }
        if self.alpha.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::Input("fusion parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `h[i] = sum_k alpha[k] * logits[k][i] + beta[i]` for one clip's
/// teacher-major `K x C` logits.
pub fn fuse(logits: &[f32], params: &FusionParams) -> Result<Vec<f64>> {
    let k = params.alpha.len();
    let c = params.beta.len();
    if logits.len() != k * c {
        return Err(Error::Input(format!(
            "fusion expects {k} teachers x {c} classes = {} logits, got {}",
            k * c,
            logits.len()
        )));
    }
    // Uniform weights divide the sum instead of scaling each term, so the
    // result is the correctly rounded teacher mean.
    let mean_weights = params.alpha.iter().all(|&a| a == 1.0 / k as f64);
    Ok((0..c)
        .map(|i| {
            let h = if mean_weights {
                (0..k).map(|t| logits[t * c + i] as f64).sum::<f64>() / k as f64
            } else {
                let mut h = 0.0;
                for (t, &a) in params.alpha.iter().enumerate() {
                    h += a * logits[t * c + i] as f64;
                }
                h
            };
            h + params.beta[i]
        })
        .collect())
}

fn log_softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = h.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    h.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy of `softmax(fuse(.))` against hard labels.
pub fn fusion_ce(logits: &[&[f32]], labels: &[usize], params: &FusionParams) -> Result<f64> {
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        total -= log_softmax(&fuse(l, params)?)[y];
    }
    Ok(total / logits.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Also fit the per-class biases.
    pub fit_beta: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            tolerance: 1e-9,
            fit_beta: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionFit {
    pub params: FusionParams,
    /// Cross-entropy of the fitted fusion on the fitting data.
    pub ce: f64,
    /// Cross-entropy of the uniform average on the same data.
    pub uniform_ce: f64,
    pub iterations: usize,
}

fn ce_and_grad(logits: &[&[f32]], labels: &[usize], p: &FusionParams) -> (f64, Vec<f64>, Vec<f64>) {
    let k = p.alpha.len();
    let c = p.beta.len();
    let n = logits.len() as f64;
    let mut ce = 0.0;
    let mut ga = vec![0.0; k];
    let mut gb = vec![0.0; c];
    for (l, &y) in logits.iter().zip(labels) {
        let ls = log_softmax(&fuse(l, p).expect("validated shapes"));
        ce -= ls[y];
        for i in 0..c {
            let d = ls[i].exp() - if i == y { 1.0 } else { 0.0 };
            gb[i] += d / n;
            for (t, g) in ga.iter_mut().enumerate() {
                *g += d * l[t * c + i] as f64 / n;
            }
        }
    }
    (ce / n, ga, gb)
}

/// Fits fusion parameters by full-batch gradient descent with backtracking
/// line search, starting from the uniform average. Each accepted step
/// lowers the cross-entropy, so the result is never worse than uniform.
pub fn fit_fusion(logits: &[&[f32]], labels: &[usize], k: usize, opts: &FitOptions) -> Result<FusionFit> {
    let c = NUM_CLASSES;
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Input(format!(
            "fusion fitting needs matching logits and labels, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|l| l.len() != k * c) {
        return Err(Error::Input(format!(
            "fusion fitting expects {k} teachers x {c} classes, got a row of {}",
            bad.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {y} out of range")));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Input(format!(
            "all fitting labels are class {}; fusion fitting needs at least two classes",
            labels[0]
        )));
    }
    let mut p = FusionParams::uniform(k, c);
    let (uniform_ce, mut ga, mut gb) = ce_and_grad(logits, labels, &p);
    let mut ce = uniform_ce;
    let mut step = 1.0;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        if !opts.fit_beta {
            gb.iter_mut().for_each(|g| *g = 0.0);
        }
        let gnorm2: f64 = ga.iter().chain(&gb).map(|g| g * g).sum();
        if gnorm2.sqrt() < opts.tolerance {
            break;
        }
        let mut accepted = false;
        while step > 1e-12 {
            let cand = FusionParams {
                alpha: p.alpha.iter().zip(&ga).map(|(a, g)| a - step * g).collect(),
                beta: p.beta.iter().zip(&gb).map(|(b, g)| b - step * g).collect(),
            };
            let (cce, cga, cgb) = ce_and_grad(logits, labels, &cand);
            if cce.is_finite() && cce <= ce - 0.25 * step * gnorm2 {
                p = cand;
                ce = cce;
                ga = cga;
                gb = cgb;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(FusionFit {
        params: p,
        ce,
        uniform_ce,
        iterations,
    })
}

/// Hard-label / distillation weighting and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// Weight of the hard-label term.
    pub lambda: f64,
    pub temperature: f64,
    /// Linear schedule `(start, end)` for `lambda` over training.
    pub schedule: Option<(f64, f64)>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 2.0,
            schedule: None,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("kd lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("kd temperature must be positive"));
        }
        if let Some((a, b)) = self.schedule {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                return Err(Error::config("kd schedule endpoints must be in [0, 1]"));
            }
        }
        Ok(())
    }

    /// `lambda` at training progress `t` in `[0, 1]`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        match self.schedule {
            Some((a, b)) => a + (b - a) * t.clamp(0.0, 1.0),
            None => self.lambda,
        }
    }
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct KdLoss {
    pub total: Var,
    pub label: Var,
    /// `T^2`-scaled distillation term.
    pub kd: Var,
}

/// One-hot `N x C` targets.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

/// `softmax(teacher / T)` row-wise, computed as the student side is.
pub fn soft_targets<T: Real>(teacher: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let k = *teacher.shape().last().ok_or_else(|| Error::shape("empty teacher logits"))?;
    let inv = T::one() / temperature;
    let mut t = teacher.map(|v| v * inv);
    for row in t.data_mut().chunks_mut(k) {
        crate::tensor::softmax_rows(row);
    }
    Ok(t)
}

/// `lambda * CE(student, labels) + (1 - lambda) * T^2 * CE(softmax(student/T),
/// softmax(teacher/T))`, each cross-entropy averaged over the batch.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    student: Var,
    labels: &[usize],
    teacher: &Tensor<T>,
    lambda: T,
    temperature: T,
) -> Result<KdLoss> {
    let shape = tape.value(student).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || teacher.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "kd loss: student {shape:?}, teacher {:?}, {} labels",
            teacher.shape(),
            labels.len()
        )));
    }
    let hard = one_hot::<T>(labels, shape[1])?;
    let label = tape.softmax_cross_entropy(student, &hard)?;
    let q = soft_targets(teacher, temperature)?;
    let scaled = tape.scale(student, T::one() / temperature);
    let ce = tape.softmax_cross_entropy(scaled, &q)?;
    let kd = tape.scale(ce, temperature * temperature);
    let a = tape.scale(label, lambda);
    let b = tape.scale(kd, T::one() - lambda);
    let total = tape.add(a, b)?;
    Ok(KdLoss { total, label, kd })
}

/// Controls of one synthetic teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTeacher {
    pub name: String,
    /// Logit margin of the believed class.
    pub margin: f32,
    /// Probability the teacher believes a random wrong class.
    pub flip_prob: f64,
    /// Standard deviation of Gaussian noise on every logit.
    pub noise_std: f32,
    /// Constant per-class offsets.
    pub class_bias: Vec<f32>,
}

impl SyntheticTeacher {
    /// Logits for one clip, deterministic in `(seed, clip_id)`.
    pub fn logits(&self, seed: u64, clip_id: &str, label: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(clip_id) ^ fnv1a(&self.name).rotate_left(17));
        let believed = if rng.gen::<f64>() < self.flip_prob {
            let off = rng.gen_range(1..NUM_CLASSES);
            (label + off) % NUM_CLASSES
        } else {
            label
        };
        let noise = Normal::new(0.0f32, self.noise_std.max(0.0)).expect("finite std");
        (0..NUM_CLASSES)
            .map(|i| {
                let base = if i == believed { self.margin } else { 0.0 };
                base + self.class_bias.get(i).copied().unwrap_or(0.0) + noise.sample(&mut rng)
            })
            .collect()
    }
}

/// A three-member ensemble of unequal quality: one reliable teacher, one
/// noisy teacher and one with strong per-class bias.
pub fn default_teacher_ensemble() -> Vec<SyntheticTeacher> {
    vec![
        SyntheticTeacher {
            name: "reliable".into(),
            margin: 4.0,
            flip_prob: 0.08,
            noise_std: 0.7,
            class_bias: vec![0.0; NUM_CLASSES],
        },
        SyntheticTeacher {
            name: "noisy".into(),
            margin: 2.5,
            flip_prob: 0.45,
            noise_std: 1.8,
            class_bias: vec![0.0; NUM_CLASSES],
        },
        SyntheticTeacher {
            name: "biased".into(),
            margin: 3.0,
            flip_prob: 0.2,
            noise_std: 1.0,
            class_bias: (0..NUM_CLASSES).map(|i| if i < 3 { 2.5 } else { -0.5 }).collect(),
        },
    ]
}

/// Generates a logits table for `(clip_id, label)` pairs.
pub fn synthetic_logits(
    teachers: &[SyntheticTeacher],
    clips: &[(String, usize)],
    class_names: &[String],
    seed: u64,
) -> TeacherLogits {
    let clips = clips
        .iter()
        .map(|(id, y)| {
            let row = teachers.iter().flat_map(|t| t.logits(seed, id, *y)).collect();
            (id.clone(), row)
        })
        .collect();
    TeacherLogits {
        teachers: teachers.iter().map(|t| t.name.clone()).collect(),
        classes: class_names.to_vec(),
        clips,
    }
}

/// How per-clip teacher targets are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Fitted `alpha` / `beta` from a fusion parameter file.
    Fitted,
    /// Plain average of the teachers.
    Uniform,
    /// No distillation.
    None,
}

/// `N x C` fused teacher logits for the given clips.
pub fn fused_batch(logits: &TeacherLogits, ids: &[&str], params: &FusionParams) -> Result<Tensor<f32>> {
    if params.alpha.len() != logits.k() {
        return Err(Error::config(format!(
            "fusion parameters have {} teacher weights but the logits file has {} teachers",
            params.alpha.len(),
            logits.k()
        )));
    }
    let c = logits.num_classes();
    let mut data = Vec::with_capacity(ids.len() * c);
    for id in ids {
        let row = logits
            .get(id)
            .ok_or_else(|| Error::Input(format!("no teacher logits for clip '{id}'")))?;
        data.extend(fuse(row, params)?.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![ids.len(), c], data)
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Warns when teachers disagree with the labels on most clips, which
/// usually means a class-order mismatch.
pub fn check_teacher_agreement(logits: &TeacherLogits, ids: &[&str], labels: &[usize]) {
    let params = FusionParams::uniform(logits.k(), logits.num_classes());
    let mut hits = 0usize;
    for (id, &y) in ids.iter().zip(labels) {
        if let Some(row) = logits.get(id) {
            if let Ok(h) = fuse(row, &params) {
                let arg = h
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                hits += usize::from(arg == y);
            }
        }
    }
    if !ids.is_empty() && (hits as f64) < 0.2 * ids.len() as f64 {
        warn!(
            "averaged teachers agree with only {hits}/{} labels; check the class order",
            ids.len()
        );
    }
}
