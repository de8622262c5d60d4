//! 8-bit grayscale preview grids as binary PGM (`P5`).

use std::path::Path;

use tssc_core::volume::Volume4D;

use crate::error::Result;
use crate::io::write_file;

pub const PREVIEW_FRAMES: usize = 6;

/// Up to six frame indices spread evenly over `0..frames`, first and last
/// included.
pub fn preview_frames(frames: usize) -> Vec<usize> {
    if frames <= PREVIEW_FRAMES {
        return (0..frames).collect();
    }
    let k = PREVIEW_FRAMES - 1;
    (0..PREVIEW_FRAMES)
        .map(|i| (i * (frames - 1) + k / 2) / k)
        .collect()
}

/// The middle z-slice of the chosen frames, side by side in one row.
/// Normalized volumes map `[-1, 1]` to `[0, 255]`; others use their own
/// min and max.
pub fn render_pgm(v: &Volume4D) -> Vec<u8> {
    let [_, nz, h, w] = v.shape;
    let z = nz / 2;
    let (lo, hi) = if v.normalized { (-1.0, 1.0) } else { v.min_max() };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let ts = preview_frames(v.frames());
    let width = w * ts.len();
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for y in 0..h {
        for &t in &ts {
            let row = &v.data[v.index(t, z, y, 0)..][..w];
            out.extend(row.iter().map(|&s| ((s - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

pub fn write_preview(v: &Volume4D, path: &Path) -> Result<()> {
    write_file(path, &render_pgm(v))
}
