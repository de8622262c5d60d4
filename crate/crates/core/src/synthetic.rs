//! Synthetic dynamic volumes with exactly known intermediate frames, plus
//! the cross-slice misalignment used to corrupt stage-2 inputs.
//!
//! Samples lie in `[-1, 1]`: a pattern with intensity `g in [0, 1]` is
//! stored as `2g - 1`. Motion runs linearly over the sequence, so between
//! consecutive frames a translating blob moves by `amplitude / (frames - 1)`.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::volume::{Volume3, Volume4D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PatternKind {
    #[default]
    TranslatingBlob,
    RotatingBar,
    DeformingEllipse,
}

/// Integer in-plane shift applied to every odd z-slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Misalignment {
    pub dy: i32,
    pub dx: i32,
}

impl Misalignment {
    pub fn is_zero(&self) -> bool {
        self.dy == 0 && self.dx == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub kind: PatternKind,
    pub cases: usize,
    pub frames: usize,
    /// `(Z, Y, X)`.
    pub dims: [usize; 3],
    /// Blob: total displacement in voxels. Bar: total rotation in radians.
    /// Ellipse: relative change of the semi-axes.
    pub amplitude: f64,
    pub misalignment: Misalignment,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: PatternKind::TranslatingBlob,
            cases: 4,
            frames: 12,
            dims: [4, 16, 16],
            amplitude: 4.0,
            misalignment: Misalignment { dy: 1, dx: 1 },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::range("frames", self.frames, ">= 3"));
        }
        if self.cases == 0 {
            return Err(Error::range("cases", 0, ">= 1"));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("synthetic dims {:?} must be positive", self.dims)));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::range("amplitude", self.amplitude, "finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub name: alloc::string::String,
    pub volume: Volume4D,
}

/// Per-case random shape parameters.
struct Shape {
    center: [f64; 3],
    width: [f64; 3],
    heading: f64,
}

fn draw_shape<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Shape {
    let [nz, ny, nx] = spec.dims.map(|d| d as f64);
    let jitter = |rng: &mut R, n: f64| (n - 1.0) / 2.0 + (rng.random::<f64>() - 0.5) * 0.1 * n;
    Shape {
        center: [jitter(rng, nz), jitter(rng, ny), jitter(rng, nx)],
        width: [
            (0.25 + 0.1 * rng.random::<f64>()) * nz.max(2.0),
            (0.12 + 0.04 * rng.random::<f64>()) * ny,
            (0.12 + 0.04 * rng.random::<f64>()) * nx,
        ],
        heading: rng.random::<f64>() * 2.0 * PI,
    }
}

fn render(spec: &SyntheticSpec, s: &Shape, t: usize) -> Vec<f32> {
    let [nz, ny, nx] = spec.dims;
    let phase = t as f64 / (spec.frames - 1) as f64;
    let mut out = Vec::with_capacity(nz * ny * nx);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dz = (z as f64 - s.center[0]) / s.width[0];
                let (yy, xx) = (y as f64 - s.center[1], x as f64 - s.center[2]);
                let g = match spec.kind {
                    PatternKind::TranslatingBlob => {
                        // path centered on the shape center
                        let shift = spec.amplitude * (phase - 0.5);
                        let dy = (yy - shift * s.heading.sin()) / s.width[1];
                        let dx = (xx - shift * s.heading.cos()) / s.width[2];
                        (-0.5 * (dz * dz + dy * dy + dx * dx)).exp()
                    }
                    PatternKind::RotatingBar => {
                        let th = s.heading + spec.amplitude * phase;
                        let along = xx * th.cos() + yy * th.sin();
                        let across = -xx * th.sin() + yy * th.cos();
                        let (a, b) = (along / (2.5 * s.width[2]), across / (0.5 * s.width[1]));
                        (-0.5 * (dz * dz + a * a + b * b)).exp()
                    }
                    PatternKind::DeformingEllipse => {
                        let k = 1.0 + spec.amplitude * (2.0 * PI * phase).sin() * 0.5;
                        let dy = yy / (1.5 * s.width[1] * k);
                        let dx = xx / (1.5 * s.width[2] / k.max(0.1));
                        let r = (dz * dz + dy * dy + dx * dx).sqrt();
                        // soft-edged solid ellipsoid
                        1.0 / (1.0 + ((r - 1.0) * 6.0).exp())
                    }
                };
                out.push((2.0 * g - 1.0) as f32);
            }
        }
    }
    out
}

/// Generates `spec.cases` clean normalized sequences.
pub fn make_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<SyntheticCase>> {
    spec.validate()?;
    let [nz, ny, nx] = spec.dims;
    (0..spec.cases)
        .map(|c| {
            let shape = draw_shape(spec, rng);
            let mut data = Vec::with_capacity(spec.frames * nz * ny * nx);
            for t in 0..spec.frames {
                data.extend(render(spec, &shape, t));
            }
            let mut volume = Volume4D::new([spec.frames, nz, ny, nx], data)?;
            volume.normalized = true;
            volume.intensity_range = Some([-1.0, 1.0]);
            volume.spacing = Some([1.0, 1.0, 1.0]);
            Ok(SyntheticCase {
                name: format!("case{c:03}"),
                volume,
            })
        })
        .collect()
}

/// Shifts every odd z-slice by `(dy, dx)` voxels with edge clamping. A zero
/// offset returns the input unchanged.
pub fn inject_misalignment(v: &Volume3, m: Misalignment) -> Volume3 {
    if m.is_zero() {
        return v.clone();
    }
    let [nz, ny, nx] = v.dims;
    let mut out = v.clone();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    for z in (1..nz).step_by(2) {
        let base = z * ny * nx;
        for y in 0..ny {
            let sy = clamp(y as i64 - m.dy as i64, ny);
            for x in 0..nx {
                let sx = clamp(x as i64 - m.dx as i64, nx);
                out.data[base + y * nx + x] = v.data[base + sy * nx + sx];
            }
        }
    }
    out
}

/// Intensity-weighted centroid `(z, y, x)` of a frame, using `(v + 1) / 2`
/// as the weight.
pub fn centroid(v: &Volume3) -> [f64; 3] {
    let [_, ny, nx] = v.dims;
    let mut acc = [0.0; 3];
    let mut mass = 0.0;
    for (i, &s) in v.data.iter().enumerate() {
        let w = (s as f64 + 1.0) * 0.5;
        let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
        acc[0] += w * z as f64;
        acc[1] += w * y as f64;
        acc[2] += w * x as f64;
        mass += w;
    }
    acc.map(|a| a / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use alloc::vec;

    #[test]
    fn zero_amplitude_is_static() {
        for kind in [PatternKind::TranslatingBlob, PatternKind::RotatingBar, PatternKind::DeformingEllipse] {
            let spec = SyntheticSpec {
                kind,
                amplitude: 0.0,
                cases: 1,
                ..SyntheticSpec::default()
            };
            let c = &make_synthetic(&spec, &mut stream_rng(3, 0)).unwrap()[0];
            let f0 = c.volume.frame(0);
            for t in 1..12 {
                assert_eq!(c.volume.frame(t), f0);
            }
        }
    }

    #[test]
    fn misalignment_touches_only_odd_slices() {
        let v = Volume3::new([3, 2, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        assert_eq!(inject_misalignment(&v, Misalignment::default()), v);
        let w = inject_misalignment(&v, Misalignment { dy: 0, dx: 1 });
        assert_eq!(w.slice(0), v.slice(0));
        assert_eq!(w.slice(2), v.slice(2));
        assert_eq!(w.slice(1).data, vec![6.0, 6.0, 7.0, 9.0, 9.0, 10.0]);
    }

    #[test]
    fn too_few_frames() {
        let spec = SyntheticSpec {
            frames: 2,
            ..SyntheticSpec::default()
        };
        assert!(make_synthetic(&spec, &mut stream_rng(0, 0)).is_err());
    }
}
