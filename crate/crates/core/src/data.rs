//! ECG records, preprocessing, splits and a synthetic three-class corpus.
//!
//! On disk a record is a leads-major little-endian `f32` binary plus a JSON
//! sidecar `{record_id, fs, leads, samples, label}`. A manifest is a CSV
//! `path,label,split` whose paths point at sidecars, relative to the
//! manifest's directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_FS: f64 = 250.0;
pub const MODEL_LEN: usize = 2500;
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    /// `[leads×samples]`.
    pub signal: Tensor<f32>,
    pub fs: f64,
    pub label: Option<usize>,
    pub record_id: String,
}

impl SignalRecord {
    pub fn new(signal: Tensor<f32>, fs: f64, label: Option<usize>, record_id: impl Into<String>) -> Result<Self> {
        if signal.ndim() != 2 {
            return Err(Error::shape("record", format!("expected [leads×samples], got {:?}", signal.shape())));
        }
        if !(fs > 0.0) {
            return Err(Error::Config(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(SignalRecord {
            signal,
            fs,
            label,
            record_id: record_id.into(),
        })
    }

    pub fn leads(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }

    fn map_leads(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<SignalRecord> {
        let n = self.samples();
        let mut out = Vec::new();
        for lead in self.signal.data().chunks(n) {
            let x: Vec<f64> = lead.iter().map(|&v| v as f64).collect();
            out.extend(f(&x).into_iter().map(|v| v as f32));
        }
        let samples = out.len() / self.leads();
        Ok(SignalRecord {
            signal: Tensor::from_vec(&[self.leads(), samples], out)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub record_id: String,
    pub fs: f64,
    pub leads: usize,
    pub samples: usize,
    pub label: Option<usize>,
}

/// Writes `<id>.bin` and `<id>.json` into `dir`; returns the sidecar path.
pub fn write_record(dir: &Path, rec: &SignalRecord) -> Result<PathBuf> {
    let bin = dir.join(format!("{}.bin", rec.record_id));
    let json = dir.join(format!("{}.json", rec.record_id));
    let mut bytes = Vec::with_capacity(rec.signal.numel() * 4);
    for v in rec.signal.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let side = Sidecar {
        record_id: rec.record_id.clone(),
        fs: rec.fs,
        leads: rec.leads(),
        samples: rec.samples(),
        label: rec.label,
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Json { path: json.clone(), source: e })?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

/// Reads a record from its sidecar; the binary sits beside it as `<id>.bin`.
pub fn read_record(sidecar: &Path) -> Result<SignalRecord> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: sidecar.to_path_buf(),
        source: e,
    })?;
    let bin = sidecar.with_file_name(format!("{}.bin", side.record_id));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != side.leads * side.samples * 4 {
        return Err(Error::Config(format!(
            "{}: {} bytes, sidecar promises {} leads × {} samples",
            bin.display(),
            bytes.len(),
            side.leads,
            side.samples
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    SignalRecord::new(Tensor::from_vec(&[side.leads, side.samples], data)?, side.fs, side.label, side.record_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    /// Directory that relative row paths resolve against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

/// One second-order section, `b0 b1 b2 / 1 a1 a2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Quality factors of the two sections of a fourth-order Butterworth filter.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_7];

impl Biquad {
    fn from_raw(b: [f64; 3], a: [f64; 3]) -> Self {
        Biquad {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    pub fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_raw(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::from_raw(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II state for a constant unit input.
    fn steady_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * y;
        [self.b[1] - self.a[0] * y + z2, z2]
    }
}

/// Fourth-order Butterworth band-pass as four biquads (two high-pass, two low-pass).
pub fn butter_bandpass(lo: f64, hi: f64, fs: f64) -> Vec<Biquad> {
    let mut sos: Vec<_> = BUTTER4_Q.iter().map(|&q| Biquad::highpass(lo, fs, q)).collect();
    sos.extend(BUTTER4_Q.iter().map(|&q| Biquad::lowpass(hi, fs, q)));
    sos
}

fn sos_filter(sos: &[Biquad], x: &mut [f64]) {
    let mut level = x.first().copied().unwrap_or(0.0);
    for s in sos {
        let zi = s.steady_state();
        let (mut z1, mut z2) = (zi[0] * level, zi[1] * level);
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[0] * y + z2;
            z2 = s.b[2] * xin - s.a[1] * y;
            *v = y;
        }
        level *= s.dc_gain();
    }
}

/// Zero-phase forward-backward filtering with odd-symmetric edge extension.
pub fn filtfilt(sos: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    sos_filter(sos, &mut ext);
    ext.reverse();
    sos_filter(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase fourth-order Butterworth band-pass per lead.
pub fn bandpass(rec: &SignalRecord, lo: f64, hi: f64) -> Result<SignalRecord> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::Config(format!("band edges must satisfy 0 < lo < hi, got {lo}..{hi}")));
    }
    if rec.fs <= 2.0 * hi {
        return Err(Error::Config(format!(
            "sampling rate {} Hz is too low for a {hi} Hz upper band edge",
            rec.fs
        )));
    }
    let sos = butter_bandpass(lo, hi, rec.fs);
    let padlen = (rec.fs / lo).round() as usize;
    rec.map_leads(|x| filtfilt(&sos, x, padlen))
}

/// Per-lead z-score; a lead with std below the floor becomes all zeros.
pub fn normalize(rec: &SignalRecord) -> Result<SignalRecord> {
    rec.map_leads(|x| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < NORM_FLOOR {
            vec![0.0; x.len()]
        } else {
            x.iter().map(|v| (v - mean) / std).collect()
        }
    })
}

/// Keeps every second sample; an odd trailing sample is dropped.
pub fn resample_half(rec: &SignalRecord) -> Result<SignalRecord> {
    if rec.samples() % 2 == 1 {
        log::warn!("record {}: odd length {}, dropping the last sample", rec.record_id, rec.samples());
    }
    let half = rec.samples() / 2;
    if half == 0 {
        return Err(Error::Config(format!("record {} is too short to decimate", rec.record_id)));
    }
    let out = rec.map_leads(|x| x.iter().step_by(2).take(half).copied().collect())?;
    Ok(SignalRecord { fs: rec.fs / 2.0, ..out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record: SignalRecord,
    pub primary: bool,
}

/// Right zero-pads short records; cuts long ones into non-overlapping
/// windows and discards a short remainder. The first window is primary.
pub fn fix_length(rec: &SignalRecord, target: usize) -> Result<Vec<Segment>> {
    let n = rec.samples();
    let leads = rec.leads();
    let window = |start: usize, idx: usize| -> Result<SignalRecord> {
        let mut out = vec![0.0f32; leads * target];
        for (l, lead) in rec.signal.data().chunks(n).enumerate() {
            let end = (start + target).min(n);
            out[l * target..l * target + end - start].copy_from_slice(&lead[start..end]);
        }
        let id = if idx == 0 {
            rec.record_id.clone()
        } else {
            format!("{}_w{idx}", rec.record_id)
        };
        Ok(SignalRecord {
            signal: Tensor::from_vec(&[leads, target], out)?,
            record_id: id,
            ..rec.clone()
        })
    };
    if n <= target {
        return Ok(vec![Segment {
            record: window(0, 0)?,
            primary: true,
        }]);
    }
    (0..n / target)
        .map(|i| {
            Ok(Segment {
                record: window(i * target, i)?,
                primary: i == 0,
            })
        })
        .collect()
}

/// Full preprocessing to model input: band-pass, z-score, halve the rate
/// while it is at least twice [`MODEL_FS`], then fix the length.
pub fn preprocess(rec: &SignalRecord, target_len: usize) -> Result<Vec<Segment>> {
    let mut r = normalize(&bandpass(rec, 0.5, 40.0)?)?;
    while r.fs >= 2.0 * MODEL_FS - 1e-9 {
        r = resample_half(&r)?;
    }
    fix_length(&r, target_len)
}

/// Model input for one record: the primary segment's signal.
pub fn load_model_input(sidecar: &Path, target_len: usize) -> Result<(Tensor<f32>, Option<usize>)> {
    let rec = read_record(sidecar)?;
    let seg = preprocess(&rec, target_len)?
        .into_iter()
        .find(|s| s.primary)
        .expect("fix_length always yields a primary window");
    Ok((seg.record.signal, rec.label))
}

pub const SYNTH_FS: f64 = 500.0;
pub const SYNTH_SECONDS: f64 = 10.0;
pub const SYNTH_LEADS: usize = 12;
pub const SYNTH_NOISE_STD: f64 = 0.05;
pub const SYNTH_CLASSES: [&str; 3] = ["regular_60bpm", "regular_150bpm", "irregular_60bpm"];

/// Per-lead gain pattern; each record multiplies it by a factor in [0.8, 1.2].
const LEAD_GAIN: [f64; SYNTH_LEADS] = [0.8, 1.0, 0.4, -0.9, 0.3, 0.7, -0.5, 0.6, 1.1, 1.2, 1.0, 0.8];

/// `(offset from R in seconds, amplitude, width)` of the P, Q, R, S and T waves.
fn pqrst(rr: f64) -> [(f64, f64, f64); 5] {
    let qt = 0.3 * rr.sqrt();
    [
        (-0.16, 0.12, 0.022),
        (-0.03, -0.12, 0.009),
        (0.0, 1.0, 0.011),
        (0.03, -0.25, 0.010),
        (qt, 0.3, 0.045),
    ]
}

/// Beat (R-peak) times of one synthetic record of `class`.
pub fn synth_beats(class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (rr, jitter) = match class {
        0 => (1.0, 0.0),
        1 => (0.4, 0.0),
        _ => (1.0, 0.4),
    };
    let mut t = rng.random_range(0.0..rr);
    let mut beats = Vec::new();
    while t < SYNTH_SECONDS {
        beats.push(t);
        let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        t += rr * (1.0 + j);
    }
    beats
}

pub fn synth_record(class: usize, index: usize, rng: &mut impl Rng) -> SignalRecord {
    let beats = synth_beats(class, rng);
    let n = (SYNTH_FS * SYNTH_SECONDS) as usize;
    let mut base = vec![0.0f64; n];
    for (b, &tb) in beats.iter().enumerate() {
        let rr = beats.get(b + 1).map_or(if class == 1 { 0.4 } else { 1.0 }, |&nx| nx - tb);
        for (off, amp, width) in pqrst(rr) {
            let centre = tb + off;
            let lo = (((centre - 4.0 * width) * SYNTH_FS).floor().max(0.0)) as usize;
            let hi = (((centre + 4.0 * width) * SYNTH_FS).ceil().max(0.0) as usize).min(n);
            for (i, v) in base.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = i as f64 / SYNTH_FS - centre;
                *v += amp * (-0.5 * (dt / width).powi(2)).exp();
            }
        }
    }
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).expect("positive std");
    let mut data = Vec::with_capacity(SYNTH_LEADS * n);
    for &g in &LEAD_GAIN {
        let gain = g * rng.random_range(0.8..1.2);
        data.extend(base.iter().map(|&v| (gain * v + noise.sample(rng)) as f32));
    }
    SignalRecord {
        signal: Tensor::from_vec(&[SYNTH_LEADS, n], data).expect("consistent synthetic shape"),
        fs: SYNTH_FS,
        label: Some(class),
        record_id: format!("synth_c{class}_{index:05}"),
    }
}

/// `n_per_class` records of each synthetic class, interleaved by class.
pub fn synth_corpus(n_per_class: usize, seed: u64) -> Vec<SignalRecord> {
    synth_stream(n_per_class, seed).collect()
}

/// [`synth_corpus`] generated lazily, one record at a time.
pub fn synth_stream(n_per_class: usize, seed: u64) -> impl Iterator<Item = SignalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = SYNTH_CLASSES.len();
    (0..n_per_class * k).map(move |j| synth_record(j % k, j / k, &mut rng))
}

/// Seeded record-level train/test partitions, one per repeat.
pub fn split(n: usize, train_frac: f64, seed: u64, repeats: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let n_train = (train_frac * n as f64).round() as usize;
    Ok((0..repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let test = idx.split_off(n_train);
            (idx, test)
        })
        .collect())
}

/// Stratified subsample: `max(1, round(fraction·n_c))` items of each class present.
pub fn label_subsample(indices: &[usize], labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let n_classes = indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5ab5);
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let keep = ((fraction * members.len() as f64).round() as usize).max(1);
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}
