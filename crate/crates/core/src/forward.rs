//! Physics forward model: applied force -> magnet displacement -> dipole
//! flux at the Hall element -> quantized noisy counts.
//!
//! The magnet under each bump is treated as a point dipole resting one air
//! gap above the sensor die, pressed toward it by normal force and sheared
//! sideways by tangential force through a diagonal linear compliance. All
//! positions are in the taxel's local frame: +z is the outward surface
//! normal, so the magnet rests at (0, 0, air_gap) and pressing (fz > 0)
//! moves it down toward the sensor at the origin.

use crate::acquisition::{RawTaxelSample, ReferenceSample};
use crate::geometry::{BumpGeometry, TaxelLayout};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Dipole field prefactor u0/4pi for moments in mA*mm^2, distances in mm,
/// fields in uT. Exactly 1e-7 T*m/A rescaled: (1e-9 A*m^2)/(1e-9 m^3) * 1e-7 T
/// = 0.1 uT. This is the single unit-conversion constant in the model.
pub const DIPOLE_FIELD_UT: f64 = 0.1;

/// Smallest sensor-to-magnet distance the dipole model accepts, and the
/// residual gap the deflection clamp preserves.
pub const MIN_GAP_MM: f64 = 0.05;

/// Default sampling rate of the synchronized pipeline.
pub const DEFAULT_RATE_HZ: f64 = 100.0;

/// Largest normal force the default configuration is validated for.
pub const MAX_NORMAL_FORCE_N: f64 = 6.0;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("dipole singularity: |rel_pos| = {r_mm} mm is below {MIN_GAP_MM} mm")]
    Singularity { r_mm: f64 },
    #[error("unknown taxel id {0}")]
    UnknownTaxel(u8),
}

/// Diagonal linear elasticity of one bump, in mm of magnet travel per newton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    #[serde(rename = "kx_mm_per_N")]
    pub kx_mm_per_n: f64,
    #[serde(rename = "ky_mm_per_N")]
    pub ky_mm_per_n: f64,
    #[serde(rename = "kz_mm_per_N")]
    pub kz_mm_per_n: f64,
}

impl Default for Compliance {
    fn default() -> Self {
        Self {
            kx_mm_per_n: 0.15,
            ky_mm_per_n: 0.15,
            kz_mm_per_n: 0.12,
        }
    }
}

/// Point-dipole description of the bump magnet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnetSpec {
    #[serde(rename = "moment_mA_mm2")]
    pub moment_ma_mm2: f64,
    /// Unit vector in the taxel frame; (0, 0, -1) points the north pole at
    /// the sensor below.
    pub orientation: [f64; 3],
}

impl Default for MagnetSpec {
    fn default() -> Self {
        Self {
            moment_ma_mm2: 72_000.0,
            orientation: [0.0, 0.0, -1.0],
        }
    }
}

impl MagnetSpec {
    pub fn moment_vector(&self) -> Vector3<f64> {
        Vector3::from(self.orientation) * self.moment_ma_mm2
    }
}

/// Digitization model of one Hall channel triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HallSpec {
    #[serde(rename = "sensitivity_uT_per_count")]
    pub sensitivity_ut_per_count: f64,
    pub noise_sigma_counts: f64,
    pub adc_bits: u8,
    pub offset_counts: [i32; 3],
}

impl Default for HallSpec {
    fn default() -> Self {
        Self {
            sensitivity_ut_per_count: 4.0,
            // Default noise keeps per-sample SNR moderate: the default
            // magnet spans roughly +-1200 counts per newton of shear.
            noise_sigma_counts: 25.0,
            adc_bits: 16,
            offset_counts: [0, 0, 0],
        }
    }
}

impl HallSpec {
    /// Symmetric ADC clip level: +-(2^(bits-1) - 1).
    pub fn saturation_bound(&self) -> i32 {
        (1i32 << (self.adc_bits - 1)) - 1
    }
}

/// Interpolation rule between profile segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Force jumps to the segment target at the segment start.
    Hold,
    /// Force ramps linearly from the previous target to the segment target.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    #[serde(rename = "target_force_N")]
    pub target_force_n: [f64; 3],
}

/// A piecewise force schedule. Segment boundaries are rounded to integer
/// microseconds so sampled boundary instants reproduce the configured
/// targets exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceProfile {
    pub interpolation: Interpolation,
    pub segments: Vec<Segment>,
}

impl ForceProfile {
    pub fn validate(&self) -> Result<(), ForwardError> {
        if self.segments.is_empty() {
            return Err(ForwardError::InvalidProfile("profile has no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
                return Err(ForwardError::InvalidProfile(format!(
                    "segment {i}: duration {} must be positive",
                    s.duration_s
                )));
            }
            if s.target_force_n.iter().any(|f| !f.is_finite()) {
                return Err(ForwardError::InvalidProfile(format!(
                    "segment {i}: non-finite force target"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForwardError> {
        let text = fs::read_to_string(path)?;
        let profile: ForceProfile = serde_json::from_str(&text).map_err(|e| ForwardError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        profile.validate()?;
        Ok(profile)
    }

    /// Total schedule length in integer microseconds.
    pub fn total_duration_us(&self) -> u64 {
        self.segments.iter().map(|s| duration_us(s.duration_s)).sum()
    }

    /// Force at `t_us`. Within a segment, `Hold` returns the segment target
    /// and `Ramp` interpolates from the previous target (initially zero) to
    /// the segment target. Past the end, the last target holds.
    pub fn force_at(&self, t_us: u64) -> [f64; 3] {
        let mut start = 0u64;
        let mut prev = [0.0f64; 3];
        for s in &self.segments {
            let dur = duration_us(s.duration_s);
            if t_us < start + dur {
                return match self.interpolation {
                    Interpolation::Hold => s.target_force_n,
                    Interpolation::Ramp => {
                        let frac = (t_us - start) as f64 / dur as f64;
                        let mut f = [0.0f64; 3];
                        for a in 0..3 {
                            f[a] = prev[a] + (s.target_force_n[a] - prev[a]) * frac;
                        }
                        f
                    }
                };
            }
            start += dur;
            prev = s.target_force_n;
        }
        prev
    }

    /// Oscillatory training schedule: normal-force cycles at three
    /// amplitudes interleaved with -x, +x, -y, +y shear cycles over a
    /// constant 1.5 N normal preload. 60 s total, shear within +-2 N.
    pub fn training_preset() -> Self {
        fn cycle(segments: &mut Vec<Segment>, hi: [f64; 3], lo: [f64; 3], n: usize) {
            for _ in 0..n {
                segments.push(Segment { duration_s: 1.0, target_force_n: hi });
                segments.push(Segment { duration_s: 1.0, target_force_n: lo });
            }
        }
        let mut segments = Vec::new();
        cycle(&mut segments, [0.0, 0.0, 3.0], [0.0, 0.0, 0.0], 6);
        segments.push(Segment { duration_s: 1.0, target_force_n: [0.0, 0.0, 1.5] });
        for shear in [
            [-2.0, 0.0, 1.5],
            [2.0, 0.0, 1.5],
            [0.0, -2.0, 1.5],
            [0.0, 2.0, 1.5],
        ] {
            cycle(&mut segments, shear, [0.0, 0.0, 1.5], 3);
        }
        segments.push(Segment { duration_s: 1.0, target_force_n: [0.0, 0.0, 0.0] });
        cycle(&mut segments, [0.0, 0.0, 2.0], [0.0, 0.0, 0.0], 5);
        cycle(&mut segments, [0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 5);
        segments.push(Segment { duration_s: 2.0, target_force_n: [0.0, 0.0, 0.0] });
        Self {
            interpolation: Interpolation::Ramp,
            segments,
        }
    }

    /// Held-plateau test schedule: three normal plateaus and four shear
    /// plateaus of 5 s each, reached by 0.5 s ramps. 40 s total, shear
    /// within +-2 N.
    pub fn test_preset() -> Self {
        let mut segments = Vec::new();
        for target in [
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 2.0],
            [0.0, 0.0, 2.8],
            [1.5, 0.0, 1.5],
            [-1.5, 0.0, 1.5],
            [0.0, 1.2, 1.5],
            [0.0, -1.2, 1.5],
        ] {
            segments.push(Segment { duration_s: 0.5, target_force_n: target });
            segments.push(Segment { duration_s: 5.0, target_force_n: target });
        }
        segments.push(Segment { duration_s: 0.5, target_force_n: [0.0, 0.0, 0.0] });
        segments.push(Segment { duration_s: 1.0, target_force_n: [0.0, 0.0, 0.0] });
        Self {
            interpolation: Interpolation::Ramp,
            segments,
        }
    }

    /// Looks up a named preset ("training" or "test").
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "training" => Some(Self::training_preset()),
            "test" => Some(Self::test_preset()),
            _ => None,
        }
    }
}

fn duration_us(duration_s: f64) -> u64 {
    (duration_s * 1e6).round() as u64
}

/// Everything the forward model needs; serializable as a single JSON file
/// with `compliance`, `magnet`, `hall`, and `geometry` sections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ForwardConfig {
    pub compliance: Compliance,
    pub magnet: MagnetSpec,
    pub hall: HallSpec,
    pub geometry: BumpGeometry,
}

impl ForwardConfig {
    pub fn load(path: &Path) -> Result<Self, ForwardError> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ForwardConfig = serde_json::from_str(&text).map_err(|e| ForwardError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.normalize_and_validate()?;
        Ok(cfg)
    }

    /// Checks all configuration invariants; the magnet orientation is
    /// renormalized when within 1e-6 of unit length, rejected otherwise.
    pub fn normalize_and_validate(&mut self) -> Result<(), ForwardError> {
        // NaN fails `is_finite`, so non-numbers cannot sneak past any bound.
        fn positive(name: &str, v: f64) -> Result<(), ForwardError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ForwardError::InvalidConfig(format!(
                    "{name} must be strictly positive, got {v}"
                )))
            }
        }
        let c = &self.compliance;
        positive("kx_mm_per_N", c.kx_mm_per_n)?;
        positive("ky_mm_per_N", c.ky_mm_per_n)?;
        positive("kz_mm_per_N", c.kz_mm_per_n)?;
        let g = &self.geometry;
        positive("air_gap_mm", g.air_gap_mm)?;
        positive("bump_diameter_mm", g.bump_diameter_mm)?;
        if !(g.skin_thickness_mm.is_finite() && g.skin_thickness_mm >= 0.0) {
            return Err(ForwardError::InvalidConfig(format!(
                "skin_thickness_mm must be >= 0, got {}",
                g.skin_thickness_mm
            )));
        }
        if g.skin_thickness_mm >= g.bump_diameter_mm {
            return Err(ForwardError::InvalidConfig(
                "skin thickness must be below the bump diameter".into(),
            ));
        }
        if c.kz_mm_per_n * MAX_NORMAL_FORCE_N >= g.air_gap_mm {
            return Err(ForwardError::InvalidConfig(format!(
                "kz * {MAX_NORMAL_FORCE_N} N = {} mm exceeds the {} mm air gap",
                c.kz_mm_per_n * MAX_NORMAL_FORCE_N,
                g.air_gap_mm
            )));
        }
        positive("moment_mA_mm2", self.magnet.moment_ma_mm2)?;
        let orientation = Vector3::from(self.magnet.orientation);
        let len = orientation.norm();
        if (len - 1.0).abs() > 1e-6 {
            return Err(ForwardError::InvalidConfig(format!(
                "magnet orientation is not unit length (|o| = {len})"
            )));
        }
        self.magnet.orientation = (orientation / len).into();
        let h = &self.hall;
        positive("sensitivity_uT_per_count", h.sensitivity_ut_per_count)?;
        if !(h.noise_sigma_counts >= 0.0 && h.noise_sigma_counts.is_finite()) {
            return Err(ForwardError::InvalidConfig("noise sigma must be finite and >= 0".into()));
        }
        if !(2..=16).contains(&h.adc_bits) {
            return Err(ForwardError::InvalidConfig(format!(
                "adc_bits {} outside supported range 2..=16",
                h.adc_bits
            )));
        }
        Ok(())
    }
}

/// Magnet displacement produced by `deflect`, with the clamp indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deflection {
    pub displacement_mm: Vector3<f64>,
    /// True when the normal travel was clamped to keep the residual gap at
    /// [`MIN_GAP_MM`].
    pub clamped: bool,
}

/// Linear magnet displacement under force: d = (kx*fx, ky*fy, -kz*fz).
/// Pressing (fz > 0) moves the magnet toward the sensor; the displacement is
/// clamped so the remaining gap never drops below [`MIN_GAP_MM`].
pub fn deflect(c: &Compliance, force_n: Vector3<f64>, g: &BumpGeometry) -> Deflection {
    let mut d = Vector3::new(
        c.kx_mm_per_n * force_n.x,
        c.ky_mm_per_n * force_n.y,
        -c.kz_mm_per_n * force_n.z,
    );
    let floor = MIN_GAP_MM - g.air_gap_mm;
    let clamped = d.z < floor;
    if clamped {
        d.z = floor;
    }
    Deflection {
        displacement_mm: d,
        clamped,
    }
}

/// Flux density in uT at the origin produced by a point dipole at
/// `rel_pos_mm` (vector from sensor to magnet center):
/// B = (u0/4pi) * (3 (m.r^) r^ - m) / |r|^3.
pub fn dipole_field(m: &MagnetSpec, rel_pos_mm: Vector3<f64>) -> Result<Vector3<f64>, ForwardError> {
    let r = rel_pos_mm.norm();
    if r < MIN_GAP_MM {
        return Err(ForwardError::Singularity { r_mm: r });
    }
    let rhat = rel_pos_mm / r;
    let moment = m.moment_vector();
    Ok(DIPOLE_FIELD_UT * (rhat * (3.0 * moment.dot(&rhat)) - moment) / (r * r * r))
}

/// Digitizes a field vector: counts = clamp(round(B/sensitivity + offset +
/// gaussian noise), +-saturation). Deterministic for a given seed; with
/// noise_sigma = 0 no random draws happen at all.
pub fn raw_counts(h: &HallSpec, b_ut: Vector3<f64>, rng_seed: u64) -> [i16; 3] {
    let sat = h.saturation_bound() as f64;
    let mut noise = [0.0f64; 3];
    if h.noise_sigma_counts > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for n in &mut noise {
            let z: f64 = StandardNormal.sample(&mut rng);
            *n = z * h.noise_sigma_counts;
        }
    }
    let mut counts = [0i16; 3];
    for a in 0..3 {
        let ideal = b_ut[a] / h.sensitivity_ut_per_count + h.offset_counts[a] as f64 + noise[a];
        counts[a] = ideal.round().clamp(-sat, sat) as i16;
    }
    counts
}

/// One pass through the full chain for a single instant: deflect the magnet,
/// evaluate the dipole field at the sensor, digitize. Returns the raw sample
/// and the exact force as the paired reference ground truth.
pub fn simulate_sample(
    cfg: &ForwardConfig,
    layout: &TaxelLayout,
    taxel_id: u8,
    force_n: Vector3<f64>,
    t_us: u64,
    rng_seed: u64,
) -> Result<(RawTaxelSample, ReferenceSample), ForwardError> {
    if layout.taxel(taxel_id).is_none() {
        return Err(ForwardError::UnknownTaxel(taxel_id));
    }
    let defl = deflect(&cfg.compliance, force_n, &cfg.geometry);
    let rel = Vector3::new(
        defl.displacement_mm.x,
        defl.displacement_mm.y,
        cfg.geometry.air_gap_mm + defl.displacement_mm.z,
    );
    let b = dipole_field(&cfg.magnet, rel)?;
    let counts = raw_counts(&cfg.hall, b, rng_seed);
    Ok((
        RawTaxelSample {
            t_us,
            taxel_id,
            counts,
            clamp_flag: defl.clamped,
        },
        ReferenceSample {
            t_us,
            force_n: force_n.into(),
        },
    ))
}

/// Samples a force profile at `rate_hz`, running the forward chain on every
/// tick. Per-sample noise seeds are split from `seed` so the log is a pure
/// function of (config, profile, seed).
pub fn generate_dataset(
    cfg: &ForwardConfig,
    layout: &TaxelLayout,
    taxel_id: u8,
    profile: &ForceProfile,
    rate_hz: f64,
    seed: u64,
) -> Result<Vec<(RawTaxelSample, ReferenceSample)>, ForwardError> {
    profile.validate()?;
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(ForwardError::InvalidProfile(format!(
            "sample rate {rate_hz} must be positive"
        )));
    }
    let total_us = profile.total_duration_us();
    let n = (total_us as f64 * rate_hz / 1e6).round() as u64;
    let mut out = Vec::with_capacity(n as usize);
    for k in 0..n {
        let t_us = (k as f64 * 1e6 / rate_hz).round() as u64;
        let f = Vector3::from(profile.force_at(t_us));
        out.push(simulate_sample(cfg, layout, taxel_id, f, t_us, split_seed(seed, k))?);
    }
    Ok(out)
}

/// Derives the k-th per-sample seed from the run seed (splitmix64 step).
fn split_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add((k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
