//! Connected components and Euclidean distance transform on binary masks.

use crate::grid::BinaryMask;

/// Labels 4-connected foreground components. Returns per-pixel labels (0 = background,
/// components numbered from 1 in row-major discovery order) and the size of each component.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = mask.shape();
    let data = mask.data();
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if data[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// The largest 4-connected component; ties go to the component discovered first.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
    else {
        return BinaryMask::empty(mask.height(), mask.width());
    };
    let target = best as u32 + 1;
    BinaryMask::new(
        mask.height(),
        mask.width(),
        labels.iter().map(|&l| (l == target) as u8).collect(),
    )
    .expect("labels share the mask shape")
}

/// Squared Euclidean distance from each foreground pixel to the nearest background pixel,
/// treating everything outside the image as background. Background pixels get 0.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    // Pad by one pixel of background on each side so the border acts as background.
    let (ph, pw) = (h + 2, w + 2);
    let inf = 1e20;
    let mut grid = vec![inf; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let inside = y >= 1 && y <= h && x >= 1 && x <= w && mask.get(y - 1, x - 1);
            if !inside {
                grid[y * pw + x] = 0.0;
            }
        }
    }
    let mut column = vec![0.0; ph.max(pw)];
    let mut out = vec![0.0; ph.max(pw)];
    for x in 0..pw {
        for y in 0..ph {
            column[y] = grid[y * pw + x];
        }
        edt_1d(&column[..ph], &mut out[..ph]);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        let row = &mut grid[y * pw..(y + 1) * pw];
        column[..pw].copy_from_slice(row);
        edt_1d(&column[..pw], &mut out[..pw]);
        row.copy_from_slice(&out[..pw]);
    }
    let mut result = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            result[y * w + x] = grid[(y + 1) * pw + x + 1];
        }
    }
    result
}

/// Felzenszwalb-Huttenlocher lower envelope of parabolas.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let parabola_meet = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
        };
        let mut s = parabola_meet(v[k]);
        // z[0] is -inf, so this never underflows.
        while s <= z[k] {
            k -= 1;
            s = parabola_meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}
