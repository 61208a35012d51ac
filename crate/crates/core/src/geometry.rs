//! Fingertip shell geometry: taxel poses, local frames, and layout files.
//!
//! The shell frame is centered on the fingertip body: x along the long axis
//! (length), y along the width, z along the height. All coordinates are in
//! millimeters. The bundled default layout places 12 taxels on the palmar
//! arc and 4 on each lateral face; it is synthetic and can be replaced with
//! a measured layout file at runtime.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Number of taxels in a complete layout.
pub const TAXEL_COUNT: usize = 20;

/// Normals within this distance of unit length are renormalized on load;
/// anything further off is rejected.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

const DEFAULT_LAYOUT_JSON: &str = include_str!("../assets/default_layout.json");

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("layout parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layout validation: {0}")]
    Validation(String),
    #[error("unknown taxel id {0}")]
    UnknownTaxel(u8),
}

/// Outer dimensions of the fingertip body, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingertipShell {
    pub length_mm: f64,
    pub width_mm: f64,
    pub height_mm: f64,
}

impl Default for FingertipShell {
    fn default() -> Self {
        Self {
            length_mm: 39.0,
            width_mm: 27.0,
            height_mm: 26.0,
        }
    }
}

/// Bump structure above one Hall element, in mm: a hard frustum carrying
/// the magnet, separated from the sensor die by an air gap and covered by
/// soft skin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpGeometry {
    pub air_gap_mm: f64,
    pub bump_diameter_mm: f64,
    pub skin_thickness_mm: f64,
}

impl Default for BumpGeometry {
    fn default() -> Self {
        Self {
            air_gap_mm: 1.2,
            bump_diameter_mm: 3.1,
            skin_thickness_mm: 0.3,
        }
    }
}

/// Face of the shell a taxel sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Palmar,
    LateralLeft,
    LateralRight,
    Tip,
}

/// One taxel: position on the shell surface and outward surface normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxelPose {
    pub id: u8,
    pub position_mm: [f64; 3],
    pub normal: [f64; 3],
    pub region: Region,
}

impl TaxelPose {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position_mm)
    }

    pub fn unit_normal(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }
}

/// Full sensor layout: shell dimensions plus the 20 taxel poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxelLayout {
    pub shell: FingertipShell,
    pub taxels: Vec<TaxelPose>,
}

impl TaxelLayout {
    /// Parses and validates a layout from JSON text. Normals within
    /// [`NORMAL_TOLERANCE`] of unit length are renormalized.
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let mut layout: TaxelLayout =
            serde_json::from_str(text).map_err(|e| GeometryError::Parse {
                line: e.line(),
                msg: e.to_string(),
            })?;
        layout.normalize_and_validate()?;
        Ok(layout)
    }

    /// The synthetic layout shipped with the crate: 12 palmar taxels in a
    /// 4 x 3 arc plus 4 taxels per lateral face.
    pub fn bundled_default() -> Self {
        Self::from_json(DEFAULT_LAYOUT_JSON).expect("bundled layout is valid")
    }

    pub fn taxel(&self, id: u8) -> Option<&TaxelPose> {
        self.taxels.iter().find(|t| t.id == id)
    }

    fn normalize_and_validate(&mut self) -> Result<(), GeometryError> {
        for t in &mut self.taxels {
            let n = Vector3::from(t.normal);
            let len = n.norm();
            if (len - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(GeometryError::Validation(format!(
                    "taxel {}: normal is not unit length (|n| = {len})",
                    t.id
                )));
            }
            t.normal = (n / len).into();
        }
        self.validate()
    }

    /// Checks every layout invariant; `from_json` and `load_layout` only
    /// return layouts for which this passes.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let s = &self.shell;
        if !(s.length_mm > 0.0 && s.width_mm > 0.0 && s.height_mm > 0.0) {
            return Err(GeometryError::Validation(
                "shell dimensions must be strictly positive".into(),
            ));
        }
        if self.taxels.len() != TAXEL_COUNT {
            return Err(GeometryError::Validation(format!(
                "expected {TAXEL_COUNT} taxels, found {}",
                self.taxels.len()
            )));
        }
        let mut seen = [false; TAXEL_COUNT];
        for t in &self.taxels {
            let id = t.id as usize;
            if id >= TAXEL_COUNT {
                return Err(GeometryError::Validation(format!(
                    "taxel id {} out of range 0..{TAXEL_COUNT}",
                    t.id
                )));
            }
            if seen[id] {
                return Err(GeometryError::Validation(format!(
                    "duplicate taxel id {}",
                    t.id
                )));
            }
            seen[id] = true;
            let nlen = t.unit_normal().norm();
            if (nlen - 1.0).abs() > 1e-9 {
                return Err(GeometryError::Validation(format!(
                    "taxel {}: normal is not unit length (|n| = {nlen})",
                    t.id
                )));
            }
            let p = t.position_mm;
            let half = [s.length_mm / 2.0, s.width_mm / 2.0, s.height_mm / 2.0];
            for axis in 0..3 {
                if !p[axis].is_finite() || p[axis].abs() > half[axis] {
                    return Err(GeometryError::Validation(format!(
                        "taxel {}: position {:?} outside shell bounding box",
                        t.id, p
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for TaxelLayout {
    fn default() -> Self {
        Self::bundled_default()
    }
}

/// Reads and validates a layout file (UTF-8 JSON, see `TaxelLayout`).
pub fn load_layout(path: &Path) -> Result<TaxelLayout, GeometryError> {
    let text = fs::read_to_string(path)?;
    TaxelLayout::from_json(&text)
}

/// Pose of a taxel's local frame expressed in shell coordinates.
///
/// The rotation columns are the local x/y/z axes: +z is the outward normal,
/// x is the shell long axis projected onto the taxel's tangent plane (the
/// width axis when the normal is parallel to the long axis), and y completes
/// a right-handed frame. Invert the returned isometry to map shell
/// coordinates into the taxel frame.
pub fn taxel_frame(layout: &TaxelLayout, id: u8) -> Result<Isometry3<f64>, GeometryError> {
    let taxel = layout.taxel(id).ok_or(GeometryError::UnknownTaxel(id))?;
    let z = taxel.unit_normal();
    let mut x = project_tangent(Vector3::x(), &z);
    if x.norm() < 1e-9 {
        x = project_tangent(Vector3::y(), &z);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Ok(Isometry3::from_parts(
        Translation3::from(taxel.position()),
        UnitQuaternion::from_rotation_matrix(&rot),
    ))
}

fn project_tangent(v: Vector3<f64>, normal: &Vector3<f64>) -> Vector3<f64> {
    v - normal * v.dot(normal)
}

/// Id of the taxel closest to `point_mm`; ties go to the lowest id.
pub fn nearest_taxel(layout: &TaxelLayout, point_mm: Vector3<f64>) -> u8 {
    let mut best: Option<(f64, u8)> = None;
    for t in &layout.taxels {
        let d2 = (t.position() - point_mm).norm_squared();
        let better = match best {
            None => true,
            Some((bd, bid)) => d2 < bd || (d2 == bd && t.id < bid),
        };
        if better {
            best = Some((d2, t.id));
        }
    }
    best.expect("layout has at least one taxel").1
}
