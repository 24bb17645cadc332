//! Small array helpers shared across the codec: padding, cropping,
//! channel concatenation and selection.

use crate::error::{Error, Result};
use ndarray::{concatenate, Array3, Axis};

/// Reflect-pad `x` on the bottom/right so both spatial dims become multiples
/// of `multiple`. Mirror indices exclude the edge sample, so the pad amount
/// must be smaller than the image; callers guarantee H, W >= multiple.
pub fn reflect_pad_to_multiple(x: &Array3<f32>, multiple: usize) -> Result<Array3<f32>> {
    let (h, w, c) = x.dim();
    let nh = h.div_ceil(multiple) * multiple;
    let nw = w.div_ceil(multiple) * multiple;
    if nh == h && nw == w {
        return Ok(x.clone());
    }
    if nh - h >= h || nw - w >= w {
        return Err(Error::domain(format!(
            "image {h}x{w} too small to pad to a multiple of {multiple}"
        )));
    }
    let mut out = Array3::zeros((nh, nw, c));
    for i in 0..nh {
        let si = if i < h { i } else { 2 * h - 2 - i };
        for j in 0..nw {
            let sj = if j < w { j } else { 2 * w - 2 - j };
            for k in 0..c {
                out[(i, j, k)] = x[(si, sj, k)];
            }
        }
    }
    Ok(out)
}

/// Crop the top-left `h x w` window.
pub fn crop(x: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    x.slice(ndarray::s![..h, ..w, ..]).to_owned()
}

/// Concatenate two maps along the channel axis.
pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Result<Array3<f32>> {
    if a.dim().0 != b.dim().0 || a.dim().1 != b.dim().1 {
        return Err(Error::config(format!(
            "channel concat needs matching spatial dims, got {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let joined = concatenate(Axis(2), &[a.view(), b.view()])
        .map_err(|e| Error::internal(format!("concat failed: {e}")))?;
    Ok(joined.as_standard_layout().into_owned())
}

/// Split a map into the first `c` channels and the rest.
pub fn split_channels(x: &Array3<f32>, c: usize) -> (Array3<f32>, Array3<f32>) {
    let first = x.slice(ndarray::s![.., .., ..c]).to_owned();
    let rest = x.slice(ndarray::s![.., .., c..]).to_owned();
    (first, rest)
}

/// Gather the listed channels into a new map.
pub fn select_channels(x: &Array3<f32>, indices: &[usize]) -> Result<Array3<f32>> {
    let (h, w, c) = x.dim();
    for &i in indices {
        if i >= c {
            return Err(Error::config(format!(
                "channel index {i} out of range for {c} channels"
            )));
        }
    }
    let mut out = Array3::zeros((h, w, indices.len()));
    for (oi, &si) in indices.iter().enumerate() {
        out.slice_mut(ndarray::s![.., .., oi])
            .assign(&x.slice(ndarray::s![.., .., si]));
    }
    Ok(out)
}

/// Scatter-add gradients of selected channels back to the source layout.
pub fn scatter_channels_add(gx: &mut Array3<f32>, gsel: &Array3<f32>, indices: &[usize]) {
    for (oi, &si) in indices.iter().enumerate() {
        let mut dst = gx.slice_mut(ndarray::s![.., .., si]);
        dst += &gsel.slice(ndarray::s![.., .., oi]);
    }
}

/// True when every entry is finite.
pub fn all_finite(x: &Array3<f32>) -> bool {
    x.iter().all(|v| v.is_finite())
}
