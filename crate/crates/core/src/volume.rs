//! Volumetric sequences and the geometric transforms between them.
//!
//! A [`Volume4D`] stores samples indexed `(t, z, y, x)` in row-major order.
//! Stage one works on [`Slice2Dt`] sequences (one `z`, all `t`); stage two on
//! [`Volume3`] grids (one `t`, all `z`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::{Error, Result};

/// A single 2D image, row-major `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Frame::new", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// A 3D grid, row-major `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape("Volume3::new", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, z: usize) -> Frame {
        let plane = self.dims[1] * self.dims[2];
        Frame {
            height: self.dims[1],
            width: self.dims[2],
            data: self.data[z * plane..(z + 1) * plane].to_vec(),
        }
    }
}

/// Time-indexed 3D voxel grids with geometry metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    /// Samples indexed `(t, z, y, x)`.
    pub data: Vec<f32>,
    /// `(frames, Z, Y, X)`.
    pub shape: [usize; 4],
    /// Physical step along `(z, y, x)`.
    pub spacing: Option<[f64; 3]>,
    /// `(lo, hi)` of the raw samples before normalization.
    pub intensity_range: Option<[f32; 2]>,
    pub normalized: bool,
}

impl Volume4D {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let v = Self {
            data,
            shape,
            spacing: None,
            intensity_range: None,
            normalized: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape,
            spacing: None,
            intensity_range: None,
            normalized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Config(format!("volume shape {:?} has a zero extent", self.shape)));
        }
        let n = self.shape.iter().product::<usize>();
        if self.data.len() != n {
            return Err(Error::shape("Volume4D", n, self.data.len()));
        }
        if let Some(s) = self.spacing {
            if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("spacing {s:?} must be strictly positive")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn index(&self, t: usize, z: usize, y: usize, x: usize) -> usize {
        ((t * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn frame(&self, t: usize) -> Volume3 {
        let n = self.frame_len();
        Volume3 {
            dims: self.spatial_dims(),
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    /// Stacks equally shaped 3D frames along `t`.
    pub fn from_frames(frames: &[Volume3]) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("from_frames"))?;
        let mut data = Vec::with_capacity(first.len() * frames.len());
        for f in frames {
            if f.dims != first.dims {
                return Err(Error::shape("Volume4D::from_frames", first.dims, f.dims));
            }
            data.extend_from_slice(&f.data);
        }
        let [z, y, x] = first.dims;
        Volume4D::new([frames.len(), z, y, x], data)
    }

    /// Same geometry metadata, new samples and shape.
    fn with_data(&self, shape: [usize; 4], data: Vec<f32>) -> Self {
        Self {
            data,
            shape,
            spacing: self.spacing,
            intensity_range: self.intensity_range,
            normalized: self.normalized,
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Maps samples min-max onto `[-1, 1]` and records the original range.
///
/// A volume that is already normalized is returned unchanged.
pub fn normalize_volume(v: &Volume4D) -> Result<Volume4D> {
    v.validate()?;
    if v.normalized {
        return Ok(v.clone());
    }
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("volume contains non-finite samples".into()));
    }
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "constant volume (min = max = {lo}) cannot be normalized"
        )));
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| ((2.0 * (x as f64 - lo64) / span - 1.0).clamp(-1.0, 1.0)) as f32)
        .collect();
    let mut out = v.with_data(v.shape, data);
    out.intensity_range = Some([lo, hi]);
    out.normalized = true;
    Ok(out)
}

/// Inverse of [`normalize_volume`] using the recorded intensity range.
/// Volumes that are not normalized are returned unchanged.
pub fn denormalize_volume(v: &Volume4D) -> Volume4D {
    match (v.normalized, v.intensity_range) {
        (true, Some([lo, hi])) => {
            let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
            let data = v
                .data
                .iter()
                .map(|&y| ((y as f64 + 1.0) * 0.5 * span + lo64) as f32)
                .collect();
            let mut out = v.with_data(v.shape, data);
            out.normalized = false;
            out
        }
        _ => v.clone(),
    }
}

/// One `z` position tracked across all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2Dt {
    /// Samples indexed `(t, y, x)`.
    pub data: Vec<f32>,
    pub z_index: usize,
    pub parent_shape: [usize; 4],
}

impl Slice2Dt {
    pub fn frames(&self) -> usize {
        self.parent_shape[0]
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.parent_shape[2], self.parent_shape[3])
    }

    pub fn frame(&self, t: usize) -> Frame {
        let (h, w) = self.frame_size();
        Frame {
            height: h,
            width: w,
            data: self.data[t * h * w..(t + 1) * h * w].to_vec(),
        }
    }
}

pub fn slice_to_2dt(v: &Volume4D, z: usize) -> Result<Slice2Dt> {
    let [frames, depth, h, w] = v.shape;
    if z >= depth {
        return Err(Error::range("z", z, format!("0..{depth}")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(frames * plane);
    for t in 0..frames {
        let start = v.index(t, z, 0, 0);
        data.extend_from_slice(&v.data[start..start + plane]);
    }
    Ok(Slice2Dt {
        data,
        z_index: z,
        parent_shape: v.shape,
    })
}

/// Stacks per-`z` frames (ordered by `z`) into a `(z, y, x)` volume.
pub fn reassemble_3d(frames: &[Frame]) -> Result<Volume3> {
    let first = frames.first().ok_or(Error::Empty("reassemble_3d"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if (f.height, f.width) != (h, w) || f.data.len() != h * w {
            return Err(Error::shape("reassemble_3d", (h, w), (f.height, f.width)));
        }
        data.extend_from_slice(&f.data);
    }
    Ok(Volume3 {
        dims: [frames.len(), h, w],
        data,
    })
}

/// Rebuilds a 4D volume from a full set of 2Dt slices (any order).
pub fn assemble_slices(slices: &[Slice2Dt]) -> Result<Volume4D> {
    let first = slices.first().ok_or(Error::Empty("assemble_slices"))?;
    let shape = first.parent_shape;
    let frames_len = shape[0];
    let (h, w) = (shape[2], shape[3]);
    if slices.len() != shape[1] {
        return Err(Error::shape("assemble_slices (slice count)", shape[1], slices.len()));
    }
    let mut ordered: Vec<Option<&Slice2Dt>> = vec![None; shape[1]];
    for s in slices {
        if s.parent_shape != shape || s.data.len() != frames_len * h * w {
            return Err(Error::shape("assemble_slices", shape, s.parent_shape));
        }
        if s.z_index >= shape[1] || ordered[s.z_index].is_some() {
            return Err(Error::range("z_index", s.z_index, "a permutation of 0..Z"));
        }
        ordered[s.z_index] = Some(s);
    }
    let mut frames = Vec::with_capacity(frames_len);
    for t in 0..frames_len {
        let per_z: Vec<Frame> = ordered.iter().map(|s| s.unwrap().frame(t)).collect();
        frames.push(reassemble_3d(&per_z)?);
    }
    Volume4D::from_frames(&frames)
}

/// Zero-pads along `z` to `target_z`, centering the original slices at offset
/// `floor((target_z - Z) / 2)`.
pub fn pad_z(v: &Volume4D, target_z: usize) -> Result<Volume4D> {
    let [frames, depth, h, w] = v.shape;
    if target_z < depth {
        return Err(Error::range("target_z", target_z, format!(">= {depth}")));
    }
    let offset = (target_z - depth) / 2;
    let plane = h * w;
    let mut data = vec![0.0f32; frames * target_z * plane];
    for t in 0..frames {
        let src = v.index(t, 0, 0, 0);
        let dst = (t * target_z + offset) * plane;
        data[dst..dst + depth * plane].copy_from_slice(&v.data[src..src + depth * plane]);
    }
    Ok(v.with_data([frames, target_z, h, w], data))
}

/// Source coordinate of output index `i` under the align-corners convention.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out > 1 {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    } else {
        (n_in - 1) as f64 * 0.5
    }
}

/// Interpolation taps `(i0, i1, frac)` along one axis.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let c = source_coord(i, n_in, n_out);
            let i0 = (c.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = c - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Trilinear resampling of every frame to `new_shape = (Z', Y', X')`.
pub fn resample_trilinear(v: &Volume4D, new_shape: [usize; 3]) -> Result<Volume4D> {
    if new_shape.contains(&0) {
        return Err(Error::range("resample target", format!("{new_shape:?}"), "positive dims"));
    }
    let [frames, dz, dy, dx] = v.shape;
    let [nz, ny, nx] = new_shape;
    let (tz, ty, tx) = (axis_taps(dz, nz), axis_taps(dy, ny), axis_taps(dx, nx));
    let mut data = Vec::with_capacity(frames * nz * ny * nx);
    for t in 0..frames {
        let s = |z: usize, y: usize, x: usize| v.data[v.index(t, z, y, x)] as f64;
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let c00 = lerp(s(z0, y0, x0), s(z0, y0, x1), fx);
                    let c01 = lerp(s(z0, y1, x0), s(z0, y1, x1), fx);
                    let c10 = lerp(s(z1, y0, x0), s(z1, y0, x1), fx);
                    let c11 = lerp(s(z1, y1, x0), s(z1, y1, x1), fx);
                    let c0 = lerp(c00, c01, fy);
                    let c1 = lerp(c10, c11, fy);
                    data.push(lerp(c0, c1, fz) as f32);
                }
            }
        }
    }
    let mut out = v.with_data([frames, nz, ny, nx], data);
    out.spacing = v.spacing.map(|sp| {
        let ratio = |n_in: usize, n_out: usize| {
            if n_in > 1 && n_out > 1 {
                (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                n_in as f64 / n_out as f64
            }
        };
        [sp[0] * ratio(dz, nz), sp[1] * ratio(dy, ny), sp[2] * ratio(dx, nx)]
    });
    Ok(out)
}
