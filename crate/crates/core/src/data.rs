//! Radar frame sequences: synthetic generation, preprocessing (crop +
//! train-max normalization), rain-fraction filtering, sliding-window
//! assembly, and the "RSEQ v1" archive container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_exact_at, Shape, Tensor};

/// Minutes between consecutive precipitation frames.
pub const PRECIP_INTERVAL_MIN: u32 = 5;
/// Minutes between consecutive cloud-cover frames.
pub const CLOUD_INTERVAL_MIN: u32 = 15;

/// An ordered sequence of single-channel maps at a fixed time interval.
/// Timestamps are strictly increasing multiples of the interval; windows
/// never cross a missing-timestamp gap.
pub struct FrameSequence<T> {
    frames: Vec<Tensor<T>>,
    timestamps: Vec<u32>,
    interval_min: u32,
    h: usize,
    w: usize,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, timestamps: Vec<u32>, interval_min: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::data("frame sequence must not be empty"));
        }
        if frames.len() != timestamps.len() {
            return Err(Error::data(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if interval_min == 0 {
            return Err(Error::config("frame interval must be positive"));
        }
        let s0 = frames[0].shape();
        if s0.n != 1 || s0.c != 1 {
            return Err(Error::dim(format!(
                "frames must be (1, 1, h, w) maps, got {s0}"
            )));
        }
        for f in &frames[1..] {
            if f.shape() != s0 {
                return Err(Error::dim(format!(
                    "all frames must share (h, w); found {} and {}",
                    s0,
                    f.shape()
                )));
            }
        }
        for (a, b) in timestamps.iter().zip(timestamps.iter().skip(1)) {
            if b <= a {
                return Err(Error::data(format!(
                    "timestamps must be strictly increasing, got {a} then {b}"
                )));
            }
            if (b - a) % interval_min != 0 {
                return Err(Error::data(format!(
                    "timestamp step {} is not a multiple of the interval {interval_min}",
                    b - a
                )));
            }
        }
        Ok(FrameSequence {
            h: s0.h,
            w: s0.w,
            frames,
            timestamps,
            interval_min,
        })
    }

    /// A gap-free sequence stamped 0, interval, 2*interval, ...
    pub fn contiguous(frames: Vec<Tensor<T>>, interval_min: u32) -> Result<Self> {
        let stamps = (0..frames.len() as u32).map(|i| i * interval_min).collect();
        Self::new(frames, stamps, interval_min)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &Tensor<T> {
        &self.frames[i]
    }

    pub fn timestamps(&self) -> &[u32] {
        &self.timestamps
    }

    pub fn interval_min(&self) -> u32 {
        self.interval_min
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Largest value over all frames.
    pub fn max_value(&self) -> T {
        let mut hi = T::neg_infinity();
        for f in &self.frames {
            let (_, m) = f.min_max();
            if m > hi {
                hi = m;
            }
        }
        hi
    }

    /// Chronological split by the given fractions (train, val, remainder
    /// test). Timestamps are preserved.
    pub fn split(&self, train_frac: f64, val_frac: f64) -> Result<(Self, Self, Self)>
    where
        T: Clone,
    {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0
        {
            return Err(Error::config(format!(
                "split fractions ({train_frac}, {val_frac}) must be non-negative and sum to <= 1"
            )));
        }
        let n = self.len();
        let a = (n as f64 * train_frac).floor() as usize;
        let b = a + (n as f64 * val_frac).floor() as usize;
        let piece = |lo: usize, hi: usize| -> Result<FrameSequence<T>> {
            if lo >= hi {
                return Err(Error::data(format!(
                    "split produced an empty piece [{lo}, {hi})"
                )));
            }
            FrameSequence::new(
                self.frames[lo..hi].to_vec(),
                self.timestamps[lo..hi].to_vec(),
                self.interval_min,
            )
        };
        Ok((piece(0, a)?, piece(a, b)?, piece(b, n)?))
    }
}

// ---------------------------------------------------------------------------
// Synthetic precipitation: advected anisotropic Gaussian blobs
// ---------------------------------------------------------------------------

/// Knobs of the synthetic precipitation generator.
#[derive(Clone, Debug)]
pub struct SynthParams {
    pub n_blobs: usize,
    /// Peak intensity cap; values are clipped to [0, max_intensity].
    pub max_intensity: f64,
    /// Blob standard deviations are drawn from this range (pixels).
    pub sigma_range: (f64, f64),
    /// Base advection speed range (pixels per frame).
    pub speed_range: (f64, f64),
    /// Per-frame exponential intensity growth/decay bound.
    pub growth: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_blobs: 4,
            max_intensity: 1.0,
            sigma_range: (3.0, 7.0),
            speed_range: (0.3, 0.8),
            growth: 0.004,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
    speed: f64,
    heading: f64,
    turn_rate: f64,
    sigma_u: f64,
    sigma_v: f64,
    orient: f64,
    amp: f64,
    growth: f64,
}

/// Sums of anisotropic Gaussian blobs advected by smoothly rotating
/// per-blob velocities on a torus; deterministic per seed.
pub fn synth_generate<T: Scalar>(
    n_frames: usize,
    h: usize,
    w: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<FrameSequence<T>> {
    if h < 32 || w < 32 {
        return Err(Error::config(format!(
            "synthetic frames must be at least 32x32, got {h}x{w}"
        )));
    }
    if n_frames == 0 {
        return Err(Error::config("need at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<Blob> = (0..params.n_blobs)
        .map(|_| {
            let (s_lo, s_hi) = params.sigma_range;
            let (v_lo, v_hi) = params.speed_range;
            Blob {
                y: rng.random::<f64>() * h as f64,
                x: rng.random::<f64>() * w as f64,
                speed: v_lo + (v_hi - v_lo) * rng.random::<f64>(),
                heading: rng.random::<f64>() * std::f64::consts::TAU,
                turn_rate: (rng.random::<f64>() - 0.5) * 0.02,
                sigma_u: s_lo + (s_hi - s_lo) * rng.random::<f64>(),
                sigma_v: s_lo + (s_hi - s_lo) * rng.random::<f64>(),
                orient: rng.random::<f64>() * std::f64::consts::TAU,
                amp: 0.4 + 0.6 * rng.random::<f64>(),
                growth: (rng.random::<f64>() * 2.0 - 1.0) * params.growth,
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(n_frames);
    let mut field = vec![0.0f64; h * w];
    for t in 0..n_frames {
        field.fill(0.0);
        for b in &blobs {
            let amp = (b.amp * (b.growth * t as f64).exp()).min(params.max_intensity);
            render_blob_torus(&mut field, h, w, b, amp);
        }
        let data: Vec<T> = field
            .iter()
            .map(|&v| T::from_f64_lossy(v.clamp(0.0, params.max_intensity)))
            .collect();
        frames.push(Tensor::from_vec(Shape::new(1, 1, h, w)?, data)?);
        for b in &mut blobs {
            b.heading += b.turn_rate;
            b.y = (b.y + b.speed * b.heading.sin()).rem_euclid(h as f64);
            b.x = (b.x + b.speed * b.heading.cos()).rem_euclid(w as f64);
        }
    }
    FrameSequence::contiguous(frames, PRECIP_INTERVAL_MIN)
}

/// Adds one blob to the field, including wrap-around ghost copies so the
/// torus advection has no seams.
fn render_blob_torus(field: &mut [f64], h: usize, w: usize, b: &Blob, amp: f64) {
    if amp <= 0.0 {
        return;
    }
    let (sin_o, cos_o) = b.orient.sin_cos();
    let reach = 4.0 * b.sigma_u.max(b.sigma_v);
    for dy in [-(h as f64), 0.0, h as f64] {
        for dx in [-(w as f64), 0.0, w as f64] {
            let cy = b.y + dy;
            let cx = b.x + dx;
            let y_lo = ((cy - reach).floor().max(0.0)) as usize;
            let y_hi = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
            let x_lo = ((cx - reach).floor().max(0.0)) as usize;
            let x_hi = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;
            if cy + reach < 0.0 || cy - reach > h as f64 || cx + reach < 0.0 || cx - reach > w as f64
            {
                continue;
            }
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let ry = y as f64 - cy;
                    let rx = x as f64 - cx;
                    let u = cos_o * rx + sin_o * ry;
                    let v = -sin_o * rx + cos_o * ry;
                    let q = (u / b.sigma_u).powi(2) + (v / b.sigma_v).powi(2);
                    if q < 32.0 {
                        field[y * w + x] += amp * (-0.5 * q).exp();
                    }
                }
            }
        }
    }
}

/// Binary cloud masks: thresholded sums of drifting sinusoids; values are
/// exactly 0 or 1.
pub fn synth_cloud<T: Scalar>(
    n_frames: usize,
    h: usize,
    w: usize,
    seed: u64,
    threshold: f64,
) -> Result<FrameSequence<T>> {
    if h < 32 || w < 32 {
        return Err(Error::config(format!(
            "synthetic frames must be at least 32x32, got {h}x{w}"
        )));
    }
    if n_frames == 0 {
        return Err(Error::config("need at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_waves = 6;
    let waves: Vec<(f64, f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let fy = (1.0 + (3.0 * rng.random::<f64>()).floor()) / h as f64;
            let fx = (1.0 + (3.0 * rng.random::<f64>()).floor()) / w as f64;
            let amp = 0.5 + 0.5 * rng.random::<f64>();
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let drift = (rng.random::<f64>() - 0.5) * 0.6;
            (fy, fx, amp, phase, drift)
        })
        .collect();
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(fy, fx, amp, phase, drift) in &waves {
                    v += amp
                        * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64)
                            + phase
                            + drift * t as f64)
                            .cos();
                }
                data.push(if v > threshold { T::one() } else { T::zero() });
            }
        }
        frames.push(Tensor::from_vec(Shape::new(1, 1, h, w)?, data)?);
    }
    FrameSequence::contiguous(frames, CLOUD_INTERVAL_MIN)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Center-crops every frame to a `side` x `side` square.
pub fn center_crop<T: Scalar>(seq: &FrameSequence<T>, side: usize) -> Result<FrameSequence<T>> {
    let (h, w) = seq.dims();
    if side > h || side > w {
        return Err(Error::dim(format!(
            "crop side {side} larger than frame ({h}, {w})"
        )));
    }
    let oy = (h - side) / 2;
    let ox = (w - side) / 2;
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let mut out = Tensor::zeros(Shape::new(1, 1, side, side)?);
            for y in 0..side {
                for x in 0..side {
                    *out.at_mut(0, 0, y, x) = f.at(0, 0, oy + y, ox + x);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, seq.timestamps.clone(), seq.interval_min)
}

/// Center crop (when `crop` is given) then division by the training-set
/// maximum. When `train_max` is absent it is computed over this sequence.
/// Returns the normalization constant for later denormalization.
pub fn preprocess<T: Scalar>(
    seq: &FrameSequence<T>,
    crop: Option<usize>,
    train_max: Option<f64>,
) -> Result<(FrameSequence<T>, f64)> {
    let cropped;
    let seq = if let Some(side) = crop {
        cropped = center_crop(seq, side)?;
        &cropped
    } else {
        seq
    };
    let constant = match train_max {
        Some(v) => v,
        None => seq.max_value().to_f64_lossy(),
    };
    if !(constant > 0.0) {
        return Err(Error::data(format!(
            "normalization constant must be positive, got {constant} (all-dry training set?)"
        )));
    }
    let k = T::from_f64_lossy(1.0 / constant);
    let frames = seq.frames.iter().map(|f| f.scale(k)).collect();
    Ok((
        FrameSequence::new(frames, seq.timestamps.clone(), seq.interval_min)?,
        constant,
    ))
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// Input length and target offsets (in frames after the last input frame)
/// of one forecasting configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub n_in: usize,
    pub offsets: Vec<usize>,
}

impl WindowSpec {
    /// Precipitation configurations: 12 inputs; 1 output 30 minutes ahead,
    /// or 6/12 outputs at 5-minute steps.
    pub fn precip(n_out: usize) -> Result<Self> {
        let offsets = match n_out {
            1 => vec![6],
            6 => (1..=6).collect(),
            12 => (1..=12).collect(),
            other => {
                return Err(Error::config(format!(
                    "precipitation output count must be 1, 6 or 12, got {other}"
                )))
            }
        };
        Ok(WindowSpec { n_in: 12, offsets })
    }

    /// Cloud-cover configuration: 4 inputs, 6 outputs at 15-minute steps.
    pub fn cloud() -> Self {
        WindowSpec {
            n_in: 4,
            offsets: (1..=6).collect(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len()
    }

    pub fn max_offset(&self) -> usize {
        *self.offsets.iter().max().expect("non-empty offsets")
    }
}

/// One training/evaluation instance: inputs stacked along channels,
/// targets likewise, plus the horizon bookkeeping.
#[derive(Clone)]
pub struct SampleWindow<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    /// Frame offsets of each target after the last input frame.
    pub offsets: Vec<usize>,
    pub interval_min: u32,
}

impl<T: Scalar> SampleWindow<T> {
    /// Lead time in minutes of target index `t`.
    pub fn horizon_min(&self, t: usize) -> u32 {
        self.offsets[t] as u32 * self.interval_min
    }
}

/// Sliding windows at the given stride. Channels are ordered oldest to
/// newest; windows that would span a timestamp gap are skipped. A sequence
/// shorter than one window yields an empty list.
pub fn make_windows<T: Scalar>(
    seq: &FrameSequence<T>,
    spec: &WindowSpec,
    stride: usize,
) -> Result<Vec<SampleWindow<T>>> {
    if stride == 0 {
        return Err(Error::config("window stride must be >= 1"));
    }
    let span = spec.n_in + spec.max_offset();
    let mut out = Vec::new();
    if seq.len() < span {
        return Ok(out);
    }
    let (h, w) = seq.dims();
    let mut start = 0;
    while start + span <= seq.len() {
        let contiguous = (start..start + span - 1).all(|i| {
            seq.timestamps[i + 1] - seq.timestamps[i] == seq.interval_min
        });
        if contiguous {
            let mut inputs = Tensor::zeros(Shape::new(1, spec.n_in, h, w)?);
            for (c, i) in (start..start + spec.n_in).enumerate() {
                inputs
                    .plane_mut(0, c)
                    .copy_from_slice(seq.frames[i].plane(0, 0));
            }
            let last_in = start + spec.n_in - 1;
            let mut targets = Tensor::zeros(Shape::new(1, spec.n_out(), h, w)?);
            for (c, &off) in spec.offsets.iter().enumerate() {
                targets
                    .plane_mut(0, c)
                    .copy_from_slice(seq.frames[last_in + off].plane(0, 0));
            }
            out.push(SampleWindow {
                inputs,
                targets,
                offsets: spec.offsets.clone(),
                interval_min: seq.interval_min,
            });
        }
        start += stride;
    }
    Ok(out)
}

/// Which target frames the rain-fraction filter must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterScope {
    AllFrames,
    AnyFrame,
}

/// Keeps windows whose target frames have at least `theta` fraction of
/// pixels strictly above `rain_cutoff` (inclusive threshold).
pub fn filter_windows<T: Scalar>(
    windows: Vec<SampleWindow<T>>,
    theta: f64,
    rain_cutoff: f64,
    scope: FilterScope,
) -> Vec<SampleWindow<T>> {
    if theta <= 0.0 {
        return windows;
    }
    let cutoff = T::from_f64_lossy(rain_cutoff);
    windows
        .into_iter()
        .filter(|wdw| {
            let s = wdw.targets.shape();
            let total = (s.h * s.w) as f64;
            let mut frames_ok = (0..s.c).map(|c| {
                let rainy = wdw
                    .targets
                    .plane(0, c)
                    .iter()
                    .filter(|&&v| v > cutoff)
                    .count();
                rainy as f64 / total >= theta
            });
            match scope {
                FilterScope::AllFrames => frames_ok.all(|ok| ok),
                FilterScope::AnyFrame => frames_ok.any(|ok| ok),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// RSEQ v1 archive: magic "RSEQ", u32 frame count, u32 interval minutes,
// u32 h, u32 w, then contiguous RTEN frames.
// ---------------------------------------------------------------------------

const RSEQ_MAGIC: &[u8; 4] = b"RSEQ";

pub fn save_archive<T: Scalar>(seq: &FrameSequence<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(RSEQ_MAGIC)?;
    out.write_all(&(seq.len() as u32).to_le_bytes())?;
    out.write_all(&seq.interval_min.to_le_bytes())?;
    out.write_all(&(seq.h as u32).to_le_bytes())?;
    out.write_all(&(seq.w as u32).to_le_bytes())?;
    for f in &seq.frames {
        f.write_rten(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_archive<T: Scalar>(path: &Path) -> Result<FrameSequence<T>> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let mut header = [0u8; 20];
    read_exact_at(&mut input, &mut header, 0)?;
    if &header[0..4] != RSEQ_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad RSEQ magic {:?}", &header[0..4]),
        });
    }
    let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let interval = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    if count == 0 {
        return Err(Error::data("archive declares zero frames"));
    }
    let mut frames = Vec::with_capacity(count);
    let mut offset = 20u64;
    for _ in 0..count {
        let f: Tensor<T> = Tensor::read_rten(&mut input, offset)?;
        let s = f.shape();
        if s.n != 1 || s.c != 1 || s.h != h || s.w != w {
            return Err(Error::data(format!(
                "archive frame shape {s} disagrees with manifest ({h}, {w})"
            )));
        }
        offset += f.rten_len();
        frames.push(f);
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(Error::data(format!(
            "archive has trailing bytes after the {count} declared frames"
        )));
    }
    FrameSequence::contiguous(frames, interval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blobs_give_all_zero_frames() {
        let params = SynthParams {
            n_blobs: 0,
            ..Default::default()
        };
        let seq = synth_generate::<f64>(5, 32, 32, 1, &params).unwrap();
        for i in 0..5 {
            assert!(seq.frame(i).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn static_blob_means_persistence_is_exact() {
        let params = SynthParams {
            n_blobs: 1,
            speed_range: (0.0, 0.0),
            growth: 0.0,
            ..Default::default()
        };
        let seq = synth_generate::<f64>(4, 32, 32, 2, &params).unwrap();
        for i in 1..4 {
            assert_eq!(seq.frame(i), seq.frame(0));
        }
    }

    #[test]
    fn fixed_seed_regenerates_bit_identically() {
        let params = SynthParams::default();
        let a = synth_generate::<f32>(6, 32, 48, 42, &params).unwrap();
        let b = synth_generate::<f32>(6, 32, 48, 42, &params).unwrap();
        for i in 0..6 {
            assert_eq!(a.frame(i), b.frame(i));
        }
    }

    #[test]
    fn small_frames_rejected() {
        let params = SynthParams::default();
        assert!(synth_generate::<f32>(2, 16, 64, 0, &params).is_err());
    }

    #[test]
    fn cloud_is_binary_and_seed_deterministic() {
        let a = synth_cloud::<f32>(3, 32, 32, 9, 0.0).unwrap();
        let b = synth_cloud::<f32>(3, 32, 32, 9, 0.0).unwrap();
        for i in 0..3 {
            assert!(a.frame(i).data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(a.frame(i), b.frame(i));
        }
        let ones = synth_cloud::<f32>(2, 32, 32, 9, -1e9).unwrap();
        assert!(ones.frame(0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn center_crop_coordinates_match_direct_indexing() {
        // 421 -> 288 offsets (66, 66)
        let h = 421;
        let data: Vec<f64> = (0..h * h).map(|i| i as f64).collect();
        let frame = Tensor::from_vec(Shape::new(1, 1, h, h).unwrap(), data).unwrap();
        let seq = FrameSequence::contiguous(vec![frame], 5).unwrap();
        let cropped = center_crop(&seq, 288).unwrap();
        let f = cropped.frame(0);
        assert_eq!(f.at(0, 0, 0, 0), (66 * h + 66) as f64);
        assert_eq!(f.at(0, 0, 287, 287), ((66 + 287) * h + 66 + 287) as f64);
    }

    #[test]
    fn constant_frames_normalize_to_one() {
        let frames = vec![Tensor::<f64>::full(Shape::new(1, 1, 32, 32).unwrap(), 7.5); 3];
        let seq = FrameSequence::contiguous(frames, 5).unwrap();
        let (normed, k) = preprocess(&seq, None, None).unwrap();
        assert_eq!(k, 7.5);
        assert!(normed.frame(0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_dry_training_set_cannot_normalize() {
        let frames = vec![Tensor::<f64>::zeros(Shape::new(1, 1, 32, 32).unwrap()); 2];
        let seq = FrameSequence::contiguous(frames, 5).unwrap();
        assert!(preprocess(&seq, None, None).is_err());
    }

    #[test]
    fn normalize_then_denormalize_is_identity() {
        let params = SynthParams::default();
        let seq = synth_generate::<f64>(4, 32, 32, 3, &params).unwrap();
        let (normed, k) = preprocess(&seq, None, None).unwrap();
        for i in 0..4 {
            let back = normed.frame(i).scale(k);
            assert!(back.max_abs_diff(seq.frame(i)).unwrap() < 1e-12);
        }
    }

    fn indexed_sequence(n: usize) -> FrameSequence<f64> {
        let frames = (0..n)
            .map(|i| Tensor::full(Shape::new(1, 1, 4, 4).unwrap(), i as f64))
            .collect();
        FrameSequence::contiguous(frames, 5).unwrap()
    }

    #[test]
    fn window_counts_match_formula() {
        let spec = WindowSpec::precip(12).unwrap();
        assert_eq!(make_windows(&indexed_sequence(24), &spec, 1).unwrap().len(), 1);
        let spec6 = WindowSpec::precip(6).unwrap();
        // 30 - 12 - 6 + 1 = 13
        assert_eq!(make_windows(&indexed_sequence(30), &spec6, 1).unwrap().len(), 13);
        // too short -> empty, not an error
        assert!(make_windows(&indexed_sequence(10), &spec6, 1).unwrap().is_empty());
    }

    #[test]
    fn single_output_targets_the_plus_30_min_frame() {
        let spec = WindowSpec::precip(1).unwrap();
        let windows = make_windows(&indexed_sequence(18), &spec, 1).unwrap();
        assert_eq!(windows.len(), 1);
        // inputs are frames 0..11, target is frame 11 + 6 = 17
        assert_eq!(windows[0].targets.plane(0, 0)[0], 17.0);
        assert_eq!(windows[0].horizon_min(0), 30);
        assert_eq!(windows[0].inputs.plane(0, 0)[0], 0.0);
        assert_eq!(windows[0].inputs.plane(0, 11)[0], 11.0);
    }

    #[test]
    fn windows_do_not_cross_timestamp_gaps() {
        // frames 0..10 contiguous, then a gap, then 12..20
        let mut frames = Vec::new();
        let mut stamps = Vec::new();
        for i in 0..20u32 {
            if i == 10 || i == 11 {
                continue;
            }
            frames.push(Tensor::<f64>::full(Shape::new(1, 1, 4, 4).unwrap(), i as f64));
            stamps.push(i * 5);
        }
        let seq = FrameSequence::new(frames, stamps, 5).unwrap();
        let spec = WindowSpec {
            n_in: 4,
            offsets: vec![1, 2],
        };
        let windows = make_windows(&seq, &spec, 1).unwrap();
        // runs of length 10 and 8 -> (10 - 6 + 1) + (8 - 6 + 1) windows
        assert_eq!(windows.len(), 5 + 3);
        for wdw in &windows {
            let first = wdw.inputs.plane(0, 0)[0];
            let last_target = wdw.targets.plane(0, 1)[0];
            assert_eq!(last_target - first, 5.0);
        }
    }

    #[test]
    fn filter_keeps_exact_boundary_and_drops_dry() {
        let spec = WindowSpec {
            n_in: 1,
            offsets: vec![1],
        };
        // frame values: half the pixels 1.0, half 0.0 => exactly 50% rainy
        let mut half = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4).unwrap());
        for k in 0..8 {
            half.data_mut()[k] = 1.0;
        }
        let seq = FrameSequence::contiguous(vec![half.clone(), half.clone()], 5).unwrap();
        let windows = make_windows(&seq, &spec, 1).unwrap();
        let kept = filter_windows(windows, 0.5, 0.0, FilterScope::AllFrames);
        assert_eq!(kept.len(), 1, ">= is inclusive");

        let dry = FrameSequence::contiguous(
            vec![
                Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4).unwrap()),
                Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4).unwrap()),
            ],
            5,
        )
        .unwrap();
        let dry_windows = make_windows(&dry, &spec, 1).unwrap();
        assert!(filter_windows(dry_windows.clone(), 0.2, 0.0, FilterScope::AllFrames).is_empty());
        // theta = 0 is the identity filter
        assert_eq!(
            filter_windows(dry_windows, 0.0, 0.0, FilterScope::AllFrames).len(),
            1
        );
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rseq");
        let params = SynthParams::default();
        let seq = synth_generate::<f32>(5, 32, 40, 11, &params).unwrap();
        save_archive(&seq, &path).unwrap();
        let back: FrameSequence<f32> = load_archive(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.interval_min(), PRECIP_INTERVAL_MIN);
        for i in 0..5 {
            assert_eq!(back.frame(i), seq.frame(i));
        }
    }

    #[test]
    fn truncated_archive_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rseq");
        let params = SynthParams::default();
        let seq = synth_generate::<f32>(3, 32, 32, 1, &params).unwrap();
        save_archive(&seq, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_archive::<f32>(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            Err(other) => panic!("expected parse error, got {other}"),
            Ok(_) => panic!("truncated archive must not load"),
        }
    }

    #[test]
    fn frame_count_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rseq");
        let params = SynthParams::default();
        let seq = synth_generate::<f32>(3, 32, 32, 1, &params).unwrap();
        save_archive(&seq, &path).unwrap();
        // lie about the count: 2 declared, 3 stored
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_archive::<f32>(&path) {
            Err(err) => assert!(err.to_string().contains("trailing bytes"), "{err}"),
            Ok(_) => panic!("count mismatch must not load"),
        }
    }

    #[test]
    fn chronological_split_preserves_order_and_length() {
        let seq = indexed_sequence(20);
        let (train, val, test) = seq.split(0.7, 0.15).unwrap();
        assert_eq!(train.len(), 14);
        assert_eq!(val.len(), 3);
        assert_eq!(test.len(), 3);
        assert_eq!(train.frame(0).plane(0, 0)[0], 0.0);
        assert_eq!(val.frame(0).plane(0, 0)[0], 14.0);
        assert_eq!(test.frame(2).plane(0, 0)[0], 19.0);
    }
}
