//! Brute-force reference implementations shared by several test targets.
#![allow(dead_code)]

use clotseg::postprocess::Connectivity;
use clotseg::{Mask, ProbMap};
use rand::Rng;

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut impl Rng) -> Mask {
    Mask::from_fn(dims, |_, _, _| rng.random_bool(density))
}

fn touching(a: [usize; 3], b: [usize; 3], conn: Connectivity) -> bool {
    let d: Vec<usize> = (0..3).map(|k| a[k].abs_diff(b[k])).collect();
    if d.iter().any(|&v| v > 1) || d.iter().all(|&v| v == 0) {
        return false;
    }
    match conn {
        Connectivity::Six => d.iter().sum::<usize>() == 1,
        Connectivity::TwentySix => true,
    }
}

/// Flat indices of the 3x3x3 block around `c` that touch it under `conn`.
fn around(mask: &Mask, c: [usize; 3], conn: Connectivity) -> Vec<usize> {
    let d = mask.dims();
    let range = |k: usize| c[k].saturating_sub(1)..=(c[k] + 1).min(d[k] - 1);
    let mut out = Vec::new();
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                if touching(c, [x, y, z], conn) {
                    out.push(mask.index(x, y, z));
                }
            }
        }
    }
    out
}

/// Depth-first flood fill. Labels start at 1 in order of first voxel in
/// scan order.
pub fn flood_labels(mask: &Mask, conn: Connectivity) -> Vec<u32> {
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i]).collect();
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for &start in &fg {
        if labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut frontier = vec![start];
        while let Some(i) = frontier.pop() {
            for j in around(mask, mask.coords(i), conn) {
                if mask.data()[j] && labels[j] == 0 {
                    labels[j] = next;
                    frontier.push(j);
                }
            }
        }
    }
    labels
}

/// Sweep the whole grid repeatedly, switching on any voxel above `t` that
/// touches the current mask, until a sweep changes nothing.
pub fn sweep_growth(prob: &ProbMap, mask: &Mask, t: f64, conn: Connectivity) -> Mask {
    let mut out = mask.clone();
    loop {
        let mut changed = false;
        for i in 0..out.len() {
            if out.data()[i] || f64::from(prob.data()[i]) <= t {
                continue;
            }
            if around(&out, out.coords(i), conn).into_iter().any(|j| out.data()[j]) {
                out.data_mut()[i] = true;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Voxel lists per flood-fill component.
pub fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let labels = flood_labels(mask, Connectivity::TwentySix);
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut out = vec![Vec::new(); n];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            out[l as usize - 1].push(i);
        }
    }
    out
}

/// `(count, mean size)` of components of `of` sharing no voxel with any
/// component of `against`, compared pair by pair.
pub fn unmatched_pairwise(of: &Mask, against: &Mask) -> (f64, f64) {
    let other = components(against);
    let sizes: Vec<usize> = components(of)
        .into_iter()
        .filter(|c| !other.iter().any(|o| c.iter().any(|v| o.contains(v))))
        .map(|c| c.len())
        .collect();
    let n = sizes.len();
    let mean = if n == 0 { 0.0 } else { sizes.iter().sum::<usize>() as f64 / n as f64 };
    (n as f64, mean)
}

/// Sliding max over each `h x w` plane of `[c, h, w]` data, window
/// `[i - (w-1)/2, i + w/2]` clipped to the plane.
pub fn sliding_max(x: &[f64], c: usize, h: usize, w: usize, windows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let win = windows[ch];
        let (lo, hi) = ((win - 1) / 2, win / 2);
        for r in 0..h {
            for col in 0..w {
                let mut m = f64::NEG_INFINITY;
                for rr in r.saturating_sub(lo)..=(r + hi).min(h - 1) {
                    for cc in col.saturating_sub(lo)..=(col + hi).min(w - 1) {
                        m = m.max(x[(ch * h + rr) * w + cc]);
                    }
                }
                out[(ch * h + r) * w + col] = m;
            }
        }
    }
    out
}
