//! Recordings, windowing, time-interval slices, electrode adjacency,
//! ten-fold subject splits and the synthetic dataset generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use depnet_engine::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Control,
    Depressed,
}

impl Label {
    /// Class index: control 0, depressed 1 (the positive class).
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Depressed => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 { Label::Depressed } else { Label::Control }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Control => "control",
            Label::Depressed => "depressed",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Label::Control),
            "depressed" => Ok(Label::Depressed),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Recording {
    pub subject_id: String,
    pub label: Label,
    pub sample_rate_hz: f64,
    /// `[V, N]`
    pub samples: Tensor<f32>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[1]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    /// Kept as a string so an unknown label yields a data error naming the subject.
    pub label: String,
    pub file: String,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_name: String,
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    pub subjects: Vec<SubjectEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.n_channels == 0 || !(m.sample_rate_hz > 0.0) {
        return Err(Error::Data(format!(
            "{}: n_channels and sample_rate_hz must be positive",
            path.display()
        )));
    }
    Ok(m)
}

/// Loads every recording a manifest references. Data file paths are
/// resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Recording>> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let v = manifest.n_channels;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Data(format!("duplicate subject id {:?}", s.id)));
        }
        let label: Label = s
            .label
            .parse()
            .map_err(|_| Error::Data(format!("subject {}: unknown label {:?}", s.id, s.label)))?;
        let file = base.join(&s.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let expected = v * s.n_samples * 4;
        if s.n_samples == 0 || bytes.len() != expected {
            return Err(Error::Data(format!(
                "subject {}: {} holds {} bytes, manifest implies {} ({} channels x {} samples)",
                s.id,
                file.display(),
                bytes.len(),
                expected,
                v,
                s.n_samples
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "subject {}: non-finite sample at channel {}, index {}",
                s.id,
                i / s.n_samples,
                i % s.n_samples
            )));
        }
        out.push(Recording {
            subject_id: s.id.clone(),
            label,
            sample_rate_hz: manifest.sample_rate_hz,
            samples: Tensor::new([v, s.n_samples], data)?,
        });
    }
    Ok(out)
}

/// Cuts a recording into `t` contiguous windows of `floor(N / t)` samples,
/// discarding the tail. Returns `[T, V, len]`.
pub fn window_subject(rec: &Recording, t: usize) -> Result<Tensor<f32>> {
    let (v, n) = (rec.channels(), rec.n_samples());
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 windows, got {t}")));
    }
    if t > n {
        return Err(Error::Data(format!(
            "subject {}: {n} samples cannot form {t} windows",
            rec.subject_id
        )));
    }
    let len = n / t;
    let src = rec.samples.data();
    let mut out = Vec::with_capacity(t * v * len);
    for w in 0..t {
        for c in 0..v {
            let start = c * n + w * len;
            out.extend_from_slice(&src[start..start + len]);
        }
    }
    Ok(Tensor::new([t, v, len], out)?)
}

#[derive(Clone, Debug)]
pub struct WindowedSample {
    /// `[T, V, len]`
    pub windows: Tensor<f32>,
    /// `[T-1, V, 2ts]`
    pub intervals: Tensor<f32>,
    /// `[V, ts]`
    pub first_start: Tensor<f32>,
    /// `[V, ts]`
    pub last_end: Tensor<f32>,
}

impl WindowedSample {
    pub fn from_recording(rec: &Recording, t: usize, ts: usize) -> Result<Self> {
        let windows = window_subject(rec, t)?;
        let (intervals, first_start, last_end) = extract_intervals(&windows, ts)?;
        Ok(Self { windows, intervals, first_start, last_end })
    }

    pub fn n_windows(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[2]
    }
}

/// Interval `t` joins the last `ts` samples of window `t` to the first `ts`
/// of window `t + 1`.
pub fn extract_intervals(
    windows: &Tensor<f32>,
    ts: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let &[t, v, len] = windows.shape() else {
        return Err(Error::Invariant(format!("windows must be [T, V, len], got {:?}", windows.shape())));
    };
    if ts == 0 || 2 * ts > len {
        return Err(Error::Config(format!("slice length ts={ts} needs 1 <= 2*ts <= len={len}")));
    }
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 windows, got {t}")));
    }
    let d = windows.data();
    let row = |w: usize, c: usize| &d[(w * v + c) * len..(w * v + c + 1) * len];
    let mut intervals = Vec::with_capacity((t - 1) * v * 2 * ts);
    for w in 0..t - 1 {
        for c in 0..v {
            intervals.extend_from_slice(&row(w, c)[len - ts..]);
            intervals.extend_from_slice(&row(w + 1, c)[..ts]);
        }
    }
    let mut first = Vec::with_capacity(v * ts);
    let mut last = Vec::with_capacity(v * ts);
    for c in 0..v {
        first.extend_from_slice(&row(0, c)[..ts]);
        last.extend_from_slice(&row(t - 1, c)[len - ts..]);
    }
    Ok((
        Tensor::new([t - 1, v, 2 * ts], intervals)?,
        Tensor::new([v, ts], first)?,
        Tensor::new([v, ts], last)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub groups: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    /// `(train, test)` subject ids for fold `k`.
    pub fn fold(&self, k: usize) -> (Vec<String>, Vec<String>) {
        let test = self.groups[k].clone();
        let train = self
            .groups
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, g)| g.iter().cloned())
            .collect();
        (train, test)
    }
}

pub const N_FOLDS: usize = 10;

/// Seeded partition into ten groups whose sizes differ by at most one.
pub fn tenfold_split(subject_ids: &[String], seed: u64) -> Result<FoldPlan> {
    let n = subject_ids.len();
    if n < N_FOLDS {
        return Err(Error::Data(format!("ten-fold split needs >= 10 subjects, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = subject_ids.to_vec();
    ids.shuffle(&mut rng);
    let (base, extra) = (n / N_FOLDS, n % N_FOLDS);
    let mut groups = Vec::with_capacity(N_FOLDS);
    let mut it = ids.into_iter();
    for g in 0..N_FOLDS {
        let size = base + usize::from(g < extra);
        groups.push(it.by_ref().take(size).collect::<Vec<_>>());
    }
    groups.shuffle(&mut rng);
    Ok(FoldPlan { groups, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Electrode {
    pub name: String,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout {
    pub electrodes: Vec<Electrode>,
}

impl ElectrodeLayout {
    pub fn new(electrodes: Vec<Electrode>) -> Result<Self> {
        let mut names = std::collections::HashSet::new();
        for e in &electrodes {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Data(format!("duplicate electrode name {:?}", e.name)));
            }
            if e.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("electrode {:?} has a non-finite position", e.name)));
            }
        }
        if electrodes.is_empty() {
            return Err(Error::Data("empty electrode layout".into()));
        }
        Ok(Self { electrodes })
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    /// Reads a `name,x,y,z` CSV with a header row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let expected = ["name", "x", "y", "z"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::Data(format!("{}: header must be name,x,y,z", path.display())));
        }
        let mut electrodes = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let coord = |k: usize| -> Result<f64> {
                rec[k].trim().parse().map_err(|_| {
                    Error::Data(format!("{}: row {}: bad coordinate {:?}", path.display(), i + 2, &rec[k]))
                })
            };
            electrodes.push(Electrode {
                name: rec[0].trim().to_string(),
                position: [coord(1)?, coord(2)?, coord(3)?],
            });
        }
        Self::new(electrodes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = String::from("name,x,y,z\n");
        for e in &self.electrodes {
            let [x, y, z] = e.position;
            w.push_str(&format!("{},{x},{y},{z}\n", e.name));
        }
        write_atomic(path, w.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdjacencyRule {
    /// Connect electrodes at Euclidean distance `<= τ`.
    Threshold(f64),
    /// Connect each electrode to its `k` nearest, then symmetrize.
    KNearest(usize),
    FromFile(PathBuf),
}

/// Binary, symmetric, zero-diagonal `[V, V]` adjacency.
pub fn build_distance_adjacency(layout: &ElectrodeLayout, rule: &AdjacencyRule) -> Result<Tensor<f64>> {
    let v = layout.len();
    let dist = |i: usize, j: usize| {
        let (a, b) = (layout.electrodes[i].position, layout.electrodes[j].position);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    match rule {
        AdjacencyRule::Threshold(tau) => {
            if !(*tau > 0.0) {
                return Err(Error::Config(format!("threshold must be positive, got {tau}")));
            }
            Ok(Tensor::from_fn([v, v], |k| {
                let (i, j) = (k / v, k % v);
                if i != j && dist(i, j) <= *tau { 1.0 } else { 0.0 }
            }))
        }
        AdjacencyRule::KNearest(k) => {
            if *k == 0 || *k >= v {
                return Err(Error::Config(format!("k-nearest needs 1 <= k < V={v}, got {k}")));
            }
            let mut a = Tensor::zeros([v, v]);
            for i in 0..v {
                let mut others: Vec<usize> = (0..v).filter(|&j| j != i).collect();
                others.sort_by(|&p, &q| dist(i, p).total_cmp(&dist(i, q)).then(p.cmp(&q)));
                for &j in &others[..*k] {
                    a.set(&[i, j], 1.0);
                    a.set(&[j, i], 1.0);
                }
            }
            Ok(a)
        }
        AdjacencyRule::FromFile(path) => {
            let a = read_adjacency_csv(path)?;
            if a.shape()[0] != v {
                return Err(Error::Data(format!(
                    "{}: adjacency is {}x{} but the layout has {v} electrodes",
                    path.display(),
                    a.shape()[0],
                    a.shape()[0]
                )));
            }
            Ok(a)
        }
    }
}

/// Checks the binary / symmetric / zero-diagonal contract.
pub fn validate_adjacency(a: &Tensor<f64>) -> Result<()> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Data(format!("adjacency must be square, got {s:?}")));
    }
    let v = s[0];
    for i in 0..v {
        for j in 0..v {
            let x = a.at(&[i, j]);
            if x != 0.0 && x != 1.0 {
                return Err(Error::Data(format!("adjacency[{i}][{j}] = {x} is not binary")));
            }
            if x != a.at(&[j, i]) {
                return Err(Error::Data(format!("adjacency is asymmetric at ({i}, {j})")));
            }
        }
        if a.at(&[i, i]) != 0.0 {
            return Err(Error::Data(format!("adjacency diagonal entry {i} is nonzero")));
        }
    }
    Ok(())
}

pub fn read_adjacency_csv(path: &Path) -> Result<Tensor<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Data(format!("{}: non-numeric entry {f:?}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let v = rows.len();
    if v == 0 || rows.iter().any(|r| r.len() != v) {
        return Err(Error::Data(format!("{}: adjacency must be a square V x V matrix", path.display())));
    }
    let a = Tensor::new([v, v], rows.concat())?;
    validate_adjacency(&a).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(a)
}

pub fn write_adjacency_csv(path: &Path, a: &Tensor<f64>) -> Result<()> {
    let v = a.shape()[0];
    let mut out = String::new();
    for i in 0..v {
        let row: Vec<String> = (0..v).map(|j| format!("{}", a.at(&[i, j]))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Extra alpha-band amplitude of depressed subjects, in units of the
    /// white-noise standard deviation (which is 1).
    pub class_separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn n_samples(&self) -> usize {
        (self.sample_rate_hz * self.duration_s).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 || self.channels == 0 || self.n_samples() == 0 {
            return Err(Error::Config("synthetic spec needs >= 2 subjects, >= 1 channel and samples".into()));
        }
        if !(self.sample_rate_hz > 0.0) || !(self.class_separation >= 0.0) {
            return Err(Error::Config(
                "sample_rate_hz must be positive and class_separation nonnegative".into(),
            ));
        }
        Ok(())
    }
}

const NOISE_STD: f64 = 1.0;
/// (low Hz, high Hz, base amplitude); alpha is the class-dependent band.
const BANDS: [(f64, f64, f64); 3] = [(4.0, 8.0, 0.8), (8.0, 12.0, 1.0), (13.0, 30.0, 0.5)];
const ALPHA: usize = 1;
const TONES_PER_BAND: usize = 3;

/// Balanced two-class recordings: per channel a sum of band-limited tones
/// (theta, alpha, beta) plus unit white noise. Depressed subjects carry
/// `1 + class_separation` times the alpha amplitude.
pub fn synth_recordings(spec: &SynthSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let n = spec.n_samples();
    let v = spec.channels;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let width = spec.n_subjects.to_string().len().max(2);
    (0..spec.n_subjects)
        .map(|s| {
            let label = if s % 2 == 0 { Label::Control } else { Label::Depressed };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[s as u64]));
            let mut data = Vec::with_capacity(v * n);
            for _ in 0..v {
                let gain = rng.random_range(0.8..1.2);
                let mut tones = Vec::new();
                for (b, &(lo, hi, amp)) in BANDS.iter().enumerate() {
                    let boost = if b == ALPHA && label == Label::Depressed { 1.0 + spec.class_separation } else { 1.0 };
                    for _ in 0..TONES_PER_BAND {
                        let f = rng.random_range(lo..hi);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        let a = gain * amp * boost / (TONES_PER_BAND as f64).sqrt();
                        tones.push((f, phase, a));
                    }
                }
                for i in 0..n {
                    let t = i as f64 / spec.sample_rate_hz;
                    let mut x = noise.sample(&mut rng);
                    for &(f, phase, a) in &tones {
                        x += a * (std::f64::consts::TAU * f * t + phase).sin();
                    }
                    data.push(x as f32);
                }
            }
            Ok(Recording {
                subject_id: format!("sub{s:0width$}"),
                label,
                sample_rate_hz: spec.sample_rate_hz,
                samples: Tensor::new([v, n], data)?,
            })
        })
        .collect()
}

/// Points spread over the unit sphere (Fibonacci lattice).
pub fn synth_layout(channels: usize) -> ElectrodeLayout {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let electrodes = (0..channels)
        .map(|i| {
            let y = if channels == 1 { 0.0 } else { 1.0 - 2.0 * i as f64 / (channels - 1) as f64 };
            let r = (1.0 - y * y).max(0.0).sqrt();
            let th = golden * i as f64;
            Electrode { name: format!("E{}", i + 1), position: [r * th.cos(), y, r * th.sin()] }
        })
        .collect();
    ElectrodeLayout { electrodes }
}

/// Paths of a written synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub layout: PathBuf,
    pub adjacency: PathBuf,
}

/// Writes `manifest.json`, one binary file per subject, `layout.csv` and
/// `adjacency.csv` (3-nearest-neighbour graph) into `dir`.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<SynthOutput> {
    let recs = synth_recordings(spec)?;
    let data_dir = dir.join("subjects");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut subjects = Vec::with_capacity(recs.len());
    for r in &recs {
        let file = format!("subjects/{}.f32", r.subject_id);
        let bytes: Vec<u8> = r.samples.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        write_atomic(&dir.join(&file), &bytes)?;
        subjects.push(SubjectEntry {
            id: r.subject_id.clone(),
            label: r.label.as_str().to_string(),
            file,
            n_samples: r.n_samples(),
        });
    }
    let manifest = Manifest {
        dataset_name: format!("synthetic-sep{}-seed{}", spec.class_separation, spec.seed),
        sample_rate_hz: spec.sample_rate_hz,
        n_channels: spec.channels,
        subjects,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &json)?;

    let layout = synth_layout(spec.channels);
    let layout_path = dir.join("layout.csv");
    layout.write_csv(&layout_path)?;
    let adjacency = if spec.channels > 1 {
        build_distance_adjacency(&layout, &AdjacencyRule::KNearest(3.min(spec.channels - 1)))?
    } else {
        Tensor::zeros([1, 1])
    };
    let adjacency_path = dir.join("adjacency.csv");
    write_adjacency_csv(&adjacency_path, &adjacency)?;
    Ok(SynthOutput { manifest: manifest_path, layout: layout_path, adjacency: adjacency_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: usize, n: usize) -> Recording {
        Recording {
            subject_id: "s".into(),
            label: Label::Control,
            sample_rate_hz: 1.0,
            samples: Tensor::from_fn([v, n], |i| i as f32),
        }
    }

    #[test]
    fn window_lengths() {
        assert_eq!(window_subject(&rec(1, 250_000), 20).unwrap().shape(), &[20, 1, 12500]);
        assert_eq!(window_subject(&rec(1, 75_000), 20).unwrap().shape(), &[20, 1, 3750]);
        let w = window_subject(&rec(1, 10), 3).unwrap();
        assert_eq!(w.shape(), &[3, 1, 3]);
        assert_eq!(w.data(), &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        assert!(window_subject(&rec(1, 4), 5).is_err());
        assert!(window_subject(&rec(1, 4), 1).is_err());
    }

    #[test]
    fn interval_example() {
        // a..h = 0..7
        let r = rec(1, 8);
        let w = window_subject(&r, 2).unwrap();
        let (iv, first, last) = extract_intervals(&w, 1).unwrap();
        assert_eq!(iv.shape(), &[1, 1, 2]);
        assert_eq!(iv.data(), &[3.0, 4.0]);
        assert_eq!(first.data(), &[0.0]);
        assert_eq!(last.data(), &[7.0]);
        assert!(extract_intervals(&w, 3).is_err());
    }

    #[test]
    fn twenty_windows_give_nineteen_intervals() {
        let s = WindowedSample::from_recording(&rec(2, 20 * 300), 20, 125).unwrap();
        assert_eq!(s.intervals.shape(), &[19, 2, 250]);
    }

    #[test]
    fn split_sizes() {
        for (n, sixes) in [(52, 2), (53, 3), (50, 0)] {
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let plan = tenfold_split(&ids, 7).unwrap();
            let sizes: Vec<usize> = plan.groups.iter().map(Vec::len).collect();
            assert_eq!(sizes.iter().filter(|&&s| s == 6).count(), sixes);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().all(|&s| s == 5 || s == 6));
        }
        assert!(tenfold_split(&["a".into()], 0).is_err());
    }

    #[test]
    fn adjacency_rules() {
        let line = ElectrodeLayout::new(
            (0..3)
                .map(|i| Electrode { name: format!("e{i}"), position: [i as f64, 0.0, 0.0] })
                .collect(),
        )
        .unwrap();
        let a = build_distance_adjacency(&line, &AdjacencyRule::KNearest(1)).unwrap();
        assert_eq!(a.data(), &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);

        let poles = ElectrodeLayout::new(vec![
            Electrode { name: "n".into(), position: [0.0, 0.0, 1.0] },
            Electrode { name: "s".into(), position: [0.0, 0.0, -1.0] },
        ])
        .unwrap();
        let a = build_distance_adjacency(&poles, &AdjacencyRule::Threshold(1.5)).unwrap();
        assert!(a.data().iter().all(|&x| x == 0.0));
        assert!(build_distance_adjacency(&poles, &AdjacencyRule::KNearest(2)).is_err());
    }

    #[test]
    fn labels_parse() {
        assert_eq!("depressed".parse::<Label>().unwrap(), Label::Depressed);
        assert!("unknown".parse::<Label>().is_err());
        assert_eq!(Label::from_index(Label::Depressed.index()), Label::Depressed);
    }
}
