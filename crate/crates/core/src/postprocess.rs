//! Component-level clean-up of a thresholded prediction: drop small
//! objects, keep objects close to the lesion, keep the biggest, then grow
//! the survivors into neighbouring voxels above a lower threshold.

use std::collections::VecDeque;

use log::warn;

use crate::error::{Error, Result};
use crate::grid::{Mask, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "6" => Some(Connectivity::Six),
            "26" => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn as_number(self) -> usize {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

fn neighbour(dims: [usize; 3], c: [usize; 3], o: [isize; 3]) -> Option<usize> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + o[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        n[a] = v as usize;
    }
    Some((n[0] * dims[1] + n[1]) * dims[2] + n[2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Label, starting at 1 in order of first voxel in a row-major scan.
    pub id: u32,
    pub count: usize,
    /// Mean voxel coordinate.
    pub center: [f64; 3],
    /// Flat indices in scan order.
    pub voxels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    pub dims: [usize; 3],
    /// 0 for background, otherwise the component id.
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn to_mask(&self) -> Mask {
        let mut m = Mask::filled(self.dims, false);
        for c in &self.components {
            for &i in &c.voxels {
                m.data_mut()[i] = true;
            }
        }
        m
    }

    fn retain(&self, keep: impl Fn(&Component) -> bool) -> ComponentSet {
        let mut labels = self.labels.clone();
        let mut components = Vec::new();
        for c in &self.components {
            if keep(c) {
                components.push(c.clone());
            } else {
                c.voxels.iter().for_each(|&i| labels[i] = 0);
            }
        }
        ComponentSet {
            dims: self.dims,
            labels,
            components,
        }
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Two-pass union-find labelling.
pub fn connected_components(mask: &Mask, conn: Connectivity) -> ComponentSet {
    let dims = mask.dims();
    let n = mask.len();
    let fg = mask.data();
    // neighbours that precede a voxel in scan order
    let back: Vec<[isize; 3]> = conn
        .offsets()
        .into_iter()
        .filter(|o| (o[0], o[1], o[2]) < (0, 0, 0))
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if !fg[i] {
            continue;
        }
        let c = mask.coords(i);
        for &o in &back {
            if let Some(j) = neighbour(dims, c, o) {
                if fg[j] {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut root_label = vec![0u32; n];
    let mut components: Vec<Component> = Vec::new();
    let mut sums: Vec<[f64; 3]> = Vec::new();
    for i in 0..n {
        if !fg[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] == 0 {
            components.push(Component {
                id: components.len() as u32 + 1,
                count: 0,
                center: [0.0; 3],
                voxels: Vec::new(),
            });
            sums.push([0.0; 3]);
            root_label[r] = components.len() as u32;
        }
        let l = root_label[r];
        labels[i] = l;
        let comp = &mut components[l as usize - 1];
        comp.count += 1;
        comp.voxels.push(i);
        let c = mask.coords(i);
        for a in 0..3 {
            sums[l as usize - 1][a] += c[a] as f64;
        }
    }
    for (comp, s) in components.iter_mut().zip(&sums) {
        comp.center = s.map(|v| v / comp.count as f64);
    }
    ComponentSet {
        dims,
        labels,
        components,
    }
}

/// Drop components with fewer than `n_pixels` voxels.
pub fn filter_small(cs: &ComponentSet, n_pixels: usize) -> ComponentSet {
    cs.retain(|c| c.count >= n_pixels)
}

/// Keep components with at least `alpha` times the largest voxel count.
pub fn keep_biggest(cs: &ComponentSet, alpha: f64) -> Result<ComponentSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    let max = cs.components.iter().map(|c| c.count).max().unwrap_or(0);
    let bar = alpha * max as f64;
    Ok(cs.retain(|c| c.count as f64 >= bar))
}

/// Keep components whose distance to the lesion centre is within `n_dist`
/// of the closest one. Coordinates are scaled by `spacing`.
pub fn lesion_distance_filter(cs: &ComponentSet, lesion: &Mask, n_dist: f64, spacing: [f64; 3]) -> Result<ComponentSet> {
    if lesion.dims() != cs.dims {
        return Err(Error::shape("lesion_distance_filter", &lesion.dims(), &cs.dims));
    }
    let Some(l) = lesion.center_of_mass(spacing) else {
        warn!("empty lesion mask, distance filter skipped");
        return Ok(cs.clone());
    };
    let d = |c: &Component| -> f64 {
        (0..3).map(|a| (c.center[a] * spacing[a] - l[a]).powi(2)).sum::<f64>().sqrt()
    };
    let min = cs.components.iter().map(d).fold(f64::INFINITY, f64::min);
    Ok(cs.retain(|c| (d(c) - min).abs() < n_dist))
}

/// Grow `mask` into neighbouring voxels with probability above `t`, until
/// nothing changes.
pub fn threshold_growth(prob: &ProbMap, mask: &Mask, t: f64, conn: Connectivity) -> Result<Mask> {
    prob.same_dims(mask)?;
    let dims = mask.dims();
    let offsets = conn.offsets();
    let mut out = mask.clone();
    let mut queue: VecDeque<usize> = (0..mask.len()).filter(|&i| mask.data()[i]).collect();
    while let Some(i) = queue.pop_front() {
        let c = mask.coords(i);
        for &o in &offsets {
            if let Some(j) = neighbour(dims, c, o) {
                if !out.data()[j] && f64::from(prob.data()[j]) > t {
                    out.data_mut()[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostConfig {
    /// Minimum component size.
    pub n_pixels: usize,
    /// Lesion-distance tolerance in spacing units.
    pub n_dist: f64,
    /// Growth threshold.
    pub threshold: f64,
    pub alpha_big: f64,
    /// Threshold that produces the initial binary prediction.
    pub seed_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            n_pixels: 20,
            n_dist: 20.0,
            threshold: 0.3,
            alpha_big: 1.0,
            seed_threshold: 0.5,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_dist >= 0.0) {
            return Err(Error::Config("post.n_dist must be >= 0".into()));
        }
        for (k, v) in [("post.threshold", self.threshold), ("post.seed_threshold", self.seed_threshold)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k}={v} must lie in [0, 1)")));
            }
        }
        if !(self.alpha_big > 0.0 && self.alpha_big <= 1.0) {
            return Err(Error::Config(format!("post.alpha_big={} must lie in (0, 1]", self.alpha_big)));
        }
        Ok(())
    }
}

/// Binarize at the seed threshold, then filter_small, lesion distance,
/// keep_biggest and threshold growth.
pub fn pipeline(prob: &ProbMap, lesion: Option<&Mask>, cfg: &PostConfig, spacing: [f64; 3]) -> Result<Mask> {
    cfg.validate()?;
    let raw = prob.threshold(cfg.seed_threshold as f32);
    let cs = connected_components(&raw, cfg.connectivity);
    let cs = filter_small(&cs, cfg.n_pixels);
    let cs = match lesion {
        Some(l) => lesion_distance_filter(&cs, l, cfg.n_dist, spacing)?,
        None => cs,
    };
    let cs = keep_biggest(&cs, cfg.alpha_big)?;
    threshold_growth(prob, &cs.to_mask(), cfg.threshold, cfg.connectivity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let mut m = Mask::filled([3, 3, 3], false);
        m.set(0, 0, 0, true);
        m.set(1, 1, 1, true);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).components.len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).components.len(), 2);
        assert!(connected_components(&Mask::filled([2, 2, 2], false), Connectivity::TwentySix)
            .components
            .is_empty());
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }
}
