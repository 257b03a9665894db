//! Resampling of `h x w x d` feature grids.
//!
//! Upsampling is bilinear with the half-pixel (align-corners = false)
//! convention; downsampling is area averaging over the adaptive-pooling
//! windows `[floor(i*in/out), ceil((i+1)*in/out))`. Equal sizes copy.

use super::FeatureMap;

pub fn interpolate(map: &FeatureMap, target_h: usize, target_w: usize) -> FeatureMap {
    assert!(target_h > 0 && target_w > 0, "interpolate to an empty grid");
    if map.height == target_h && map.width == target_w {
        return map.clone();
    }
    let rows = resample_axis(map.height, target_h);
    let cols = resample_axis(map.width, target_w);
    let d = map.dim;
    let mut out = FeatureMap::zeros(target_h, target_w, d);
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, rx) in cols.iter().enumerate() {
            let dst = out.cell_mut(oy, ox);
            for &(iy, wy) in ry {
                for &(ix, wx) in rx {
                    let w = wy * wx;
                    for (o, v) in dst.iter_mut().zip(map.cell(iy, ix)) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    out
}

/// Per output index, the contributing input indices and weights.
fn resample_axis(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    if output >= input {
        let scale = input as f64 / output as f64;
        (0..output)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let t = src - i0 as f64;
                if i0 == i1 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect()
    } else {
        (0..output)
            .map(|i| {
                let start = i * input / output;
                let end = ((i + 1) * input).div_ceil(output);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|j| (j, w)).collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, vals: &[f64]) -> FeatureMap {
        FeatureMap::new(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn single_value_extends() {
        let up = interpolate(&grid(1, 1, &[2.5]), 2, 2);
        assert_eq!(up.data, vec![2.5; 4]);
    }

    #[test]
    fn constant_map_stays_constant() {
        let m = grid(3, 3, &[0.7; 9]);
        for s in [1, 2, 4, 5, 13] {
            let r = interpolate(&m, s, s);
            assert!(r.data.iter().all(|v| (v - 0.7).abs() < 1e-15), "size {s}");
        }
    }

    #[test]
    fn area_down_is_cell_mean() {
        let r = interpolate(&grid(2, 2, &[1.0, 1.0, 3.0, 3.0]), 1, 1);
        assert_eq!(r.data, vec![2.0]);
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        // 1-D [0, 1] upsampled to 4: sources at -0.25 (clamped), 0.25, 0.75, 1.25.
        let r = interpolate(&grid(1, 2, &[0.0, 1.0]), 1, 4);
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn identity_when_sizes_match() {
        let m = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(interpolate(&m, 2, 2), m);
    }
}
