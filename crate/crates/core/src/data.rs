//! Multimodal volumes, synthetic phantoms, intensity standardization, crop
//! sampling, augmentation and the MVOL file format.

use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Mask};
use crate::moddrop::Multimodal;
use crate::tensor::io::Reader;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Dwi,
    Swan,
    Phase,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Dwi, Modality::Swan, Modality::Phase];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Dwi => "DWI",
            Modality::Swan => "SWAN",
            Modality::Phase => "PHASE",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s.trim()))
    }
}

pub const THROMBUS: &str = "thrombus";
pub const LESION: &str = "lesion";

/// RNG for worker `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named intensity channels and binary masks sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub names: Vec<String>,
    pub channels: Vec<Grid3<f32>>,
    pub present: Vec<bool>,
    pub spacing: [f32; 3],
    pub masks: Vec<(String, Mask)>,
}

impl Volume {
    pub fn dims(&self) -> [usize; 3] {
        self.channels
            .first()
            .map(Grid3::dims)
            .or_else(|| self.masks.first().map(|(_, m)| m.dims()))
            .unwrap_or([0, 0, 0])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.names.len() != self.channels.len() || self.present.len() != self.channels.len() {
            return Err(Error::invalid("volume channel metadata out of sync"));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.dims() != d {
                return Err(Error::shape("volume channel", &d, &c.dims()));
            }
            if !self.present[i] && c.data().iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!("absent channel {} is not zero", self.names[i])));
            }
        }
        for (_, m) in &self.masks {
            if m.dims() != d {
                return Err(Error::shape("volume mask", &d, &m.dims()));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Option<&Grid3<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.channels[i])
    }

    pub fn mask(&self, name: &str) -> Option<&Mask> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn thrombus(&self) -> Option<&Mask> {
        self.mask(THROMBUS)
    }

    pub fn lesion(&self) -> Option<&Mask> {
        self.mask(LESION)
    }

    /// Voxels where any channel is nonzero.
    pub fn foreground(&self) -> Mask {
        let d = self.dims();
        let mut m = Mask::filled(d, false);
        for c in &self.channels {
            for (o, &v) in m.data_mut().iter_mut().zip(c.data()) {
                *o |= v != 0.0;
            }
        }
        m
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        self.spacing.map(f64::from)
    }

    /// Three-modality volume in the model's channel order.
    pub fn multimodal(channels: [Grid3<f32>; 3], spacing: [f32; 3], masks: Vec<(String, Mask)>) -> Self {
        Volume {
            names: Modality::ALL.iter().map(|m| m.name().to_string()).collect(),
            channels: channels.into(),
            present: vec![true; 3],
            spacing,
            masks,
        }
    }

    /// Single-channel volume, used for probability maps.
    pub fn single(name: &str, data: Grid3<f32>) -> Self {
        Volume {
            names: vec![name.to_string()],
            channels: vec![data],
            present: vec![true],
            spacing: [1.0; 3],
            masks: Vec::new(),
        }
    }

    /// Mask-only volume, used for predictions.
    pub fn mask_only(name: &str, mask: Mask) -> Self {
        Volume {
            names: Vec::new(),
            channels: Vec::new(),
            present: Vec::new(),
            spacing: [1.0; 3],
            masks: vec![(name.to_string(), mask)],
        }
    }
}

impl Multimodal for Volume {
    fn modality_count(&self) -> usize {
        self.channels.len()
    }

    fn modality_mut(&mut self, j: usize) -> &mut [f32] {
        self.channels[j].data_mut()
    }

    fn set_present(&mut self, j: usize, present: bool) {
        self.present[j] = present;
    }
}

/// `n1 x n1 x s` training window.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub channels: Vec<Grid3<f32>>,
    pub gt: Mask,
    pub contains_target: bool,
    pub origin: [usize; 3],
}

impl Crop {
    pub fn dims(&self) -> [usize; 3] {
        self.gt.dims()
    }
}

impl Multimodal for Crop {
    fn modality_count(&self) -> usize {
        self.channels.len()
    }

    fn modality_mut(&mut self, j: usize) -> &mut [f32] {
        self.channels[j].data_mut()
    }
}

/// Parameters of a synthetic brain with one lesion and one nearby thrombus.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Brain ellipsoid semi-axes in voxels.
    pub brain_radii: [f64; 3],
    pub lesion_radius: (f64, f64),
    pub thrombus_radius: (f64, f64),
    /// Largest allowed gap between thrombus center and lesion surface.
    pub max_distance: f64,
    pub noise_sigma: f64,
    pub base_intensity: [f64; 3],
    pub lesion_offset: [f64; 3],
    pub thrombus_offset: [f64; 3],
    /// Thrombus-free slices required on at least one side along z.
    pub clear_slices: usize,
    pub spacing: [f32; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            brain_radii: [28.0, 28.0, 14.0],
            lesion_radius: (4.0, 7.0),
            thrombus_radius: (1.8, 2.6),
            max_distance: 6.0,
            noise_sigma: 0.05,
            base_intensity: [1.0, 1.0, 1.0],
            lesion_offset: [1.0, 0.0, 0.0],
            thrombus_offset: [0.0, -0.6, 1.0],
            clear_slices: 12,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl PhantomSpec {
    /// Same layout scaled to a new grid; radii follow the in-plane size.
    pub fn for_dims(dims: [usize; 3], clear_slices: usize) -> Self {
        PhantomSpec {
            dims,
            brain_radii: [
                dims[0] as f64 * 0.44,
                dims[1] as f64 * 0.44,
                dims[2] as f64 * 0.46,
            ],
            clear_slices,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("phantom dims must be positive"));
        }
        let (tl, th) = self.thrombus_radius;
        let (ll, lh) = self.lesion_radius;
        if !(0.0 < tl && tl <= th && 0.0 < ll && ll <= lh) {
            return Err(Error::invalid("phantom radius ranges must be positive and ordered"));
        }
        if th >= ll {
            return Err(Error::invalid("thrombus radius must be smaller than lesion radius"));
        }
        if !(self.max_distance >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("phantom distance bound and noise must be >= 0"));
        }
        Ok(())
    }
}

fn inside_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

const MAX_TRIES: usize = 1000;

/// Ground-truth geometry drawn for a phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomLayout {
    pub lesion_center: [f64; 3],
    pub lesion_radius: f64,
    pub thrombus_center: [f64; 3],
    pub thrombus_radius: f64,
}

pub fn generate_phantom(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Volume> {
    generate_phantom_with_layout(spec, rng).map(|(v, _)| v)
}

pub fn generate_phantom_with_layout(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<(Volume, PhantomLayout)> {
    spec.validate()?;
    let d = spec.dims;
    let center = [0, 1, 2].map(|a| (d[a] as f64 - 1.0) / 2.0);
    let brain = Mask::from_fn(d, |x, y, z| {
        inside_ellipsoid([x as f64, y as f64, z as f64], center, spec.brain_radii)
    });

    let layout = place_blobs(spec, &brain, center, rng)?;
    let lesion = Mask::from_fn(d, |x, y, z| {
        *brain.get(x, y, z) && dist([x as f64, y as f64, z as f64], layout.lesion_center) <= layout.lesion_radius
    });
    let thrombus = Mask::from_fn(d, |x, y, z| {
        dist([x as f64, y as f64, z as f64], layout.thrombus_center) <= layout.thrombus_radius
    });

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let channels: [Grid3<f32>; 3] = [0, 1, 2].map(|j| {
        let mut g = Grid3::filled(d, 0f32);
        for i in 0..g.len() {
            if !brain.data()[i] {
                continue;
            }
            let mut v = spec.base_intensity[j];
            if lesion.data()[i] {
                v += spec.lesion_offset[j];
            }
            if thrombus.data()[i] {
                v += spec.thrombus_offset[j];
            }
            if spec.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            g.data_mut()[i] = v as f32;
        }
        g
    });
    let vol = Volume::multimodal(
        channels,
        spec.spacing,
        vec![(THROMBUS.to_string(), thrombus), (LESION.to_string(), lesion)],
    );
    Ok((vol, layout))
}

fn place_blobs(spec: &PhantomSpec, brain: &Mask, center: [f64; 3], rng: &mut impl Rng) -> Result<PhantomLayout> {
    let d = spec.dims;
    for _ in 0..MAX_TRIES {
        let lr = rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let shrunk = spec.brain_radii.map(|r| r - lr);
        if shrunk.iter().any(|&r| r <= 0.0) {
            continue;
        }
        let lc = [0, 1, 2].map(|a| center[a] + rng.random_range(-shrunk[a]..=shrunk[a]));
        if !inside_ellipsoid(lc, center, shrunk) {
            continue;
        }
        let tr = rng.random_range(spec.thrombus_radius.0..=spec.thrombus_radius.1);
        // direction and gap from the lesion surface
        let dir = loop {
            let v = [0; 3].map(|_| rng.random_range(-1.0..=1.0f64));
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.map(|c| c / n);
            }
        };
        let gap = rng.random_range(-spec.max_distance.min(lr)..=spec.max_distance);
        let raw = [0, 1, 2].map(|a| lc[a] + dir[a] * (lr + gap));
        let tc = raw.map(f64::round);
        if (dist(tc, lc) - lr).abs() > spec.max_distance {
            continue;
        }
        let reach = tr.ceil() as isize;
        let mut ok = true;
        let (mut z_lo, mut z_hi) = (usize::MAX, 0);
        'outer: for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let p = [tc[0] + dx as f64, tc[1] + dy as f64, tc[2] + dz as f64];
                    if dist(p, tc) > tr {
                        continue;
                    }
                    if p.iter().zip(&d).any(|(&c, &n)| c < 0.0 || c >= n as f64) {
                        ok = false;
                        break 'outer;
                    }
                    let (x, y, z) = (p[0] as usize, p[1] as usize, p[2] as usize);
                    if !*brain.get(x, y, z) {
                        ok = false;
                        break 'outer;
                    }
                    z_lo = z_lo.min(z);
                    z_hi = z_hi.max(z);
                }
            }
        }
        if !ok {
            continue;
        }
        if z_lo < spec.clear_slices && d[2] - 1 - z_hi < spec.clear_slices {
            continue;
        }
        return Ok(PhantomLayout {
            lesion_center: lc,
            lesion_radius: lr,
            thrombus_center: tc,
            thrombus_radius: tr,
        });
    }
    Err(Error::invalid(format!(
        "phantom placement infeasible after {MAX_TRIES} attempts"
    )))
}

pub const LANDMARK_COUNT: usize = 11;

/// Reference intensity deciles (min, d10, ..., d90, max) of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkModel {
    pub landmarks: [f64; LANDMARK_COUNT],
}

fn deciles(values: &mut [f64]) -> Result<[f64; LANDMARK_COUNT]> {
    if values.is_empty() {
        return Err(Error::invalid("no foreground voxels for landmarks"));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut out = [0.0; LANDMARK_COUNT];
    for (k, o) in out.iter_mut().enumerate() {
        let pos = k as f64 / 10.0 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        *o = values[lo] + (values[hi] - values[lo]) * frac;
    }
    if out.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("degenerate intensity distribution: landmarks not increasing"));
    }
    Ok(out)
}

fn foreground_values(g: &Grid3<f32>) -> Vec<f64> {
    g.data().iter().filter(|&&v| v != 0.0).map(|&v| f64::from(v)).collect()
}

/// Average the foreground deciles of `modality` across `volumes`.
pub fn fit_landmarks(volumes: &[Volume], modality: usize) -> Result<LandmarkModel> {
    if volumes.is_empty() {
        return Err(Error::invalid("fit_landmarks needs at least one volume"));
    }
    let mut acc = [0.0; LANDMARK_COUNT];
    for v in volumes {
        let ch = v
            .channels
            .get(modality)
            .ok_or_else(|| Error::invalid(format!("volume has no modality {modality}")))?;
        let l = deciles(&mut foreground_values(ch))?;
        acc.iter_mut().zip(l).for_each(|(a, b)| *a += b);
    }
    let landmarks = acc.map(|v| v / volumes.len() as f64);
    if landmarks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("averaged landmarks not increasing"));
    }
    Ok(LandmarkModel { landmarks })
}

fn piecewise(v: f64, from: &[f64; LANDMARK_COUNT], to: &[f64; LANDMARK_COUNT]) -> f64 {
    if v <= from[0] {
        return to[0];
    }
    if v >= from[LANDMARK_COUNT - 1] {
        return to[LANDMARK_COUNT - 1];
    }
    let k = from.partition_point(|&f| f <= v).clamp(1, LANDMARK_COUNT - 1) - 1;
    let t = (v - from[k]) / (from[k + 1] - from[k]);
    to[k] + t * (to[k + 1] - to[k])
}

/// Map each present modality's foreground deciles onto its reference.
pub fn standardize(vol: &Volume, models: &[LandmarkModel]) -> Result<Volume> {
    if models.len() != vol.channels.len() {
        return Err(Error::shape("standardize", &[vol.channels.len()], &[models.len()]));
    }
    let mut out = vol.clone();
    for (j, model) in models.iter().enumerate() {
        if !vol.present[j] {
            continue;
        }
        let own = deciles(&mut foreground_values(&vol.channels[j]))?;
        for v in out.channels[j].data_mut() {
            if *v != 0.0 {
                *v = piecewise(f64::from(*v), &own, &model.landmarks) as f32;
            }
        }
    }
    Ok(out)
}

/// In-plane origin of an `n1`-wide window centred on the brain.
pub fn inplane_origin(vol: &Volume, n1: usize) -> Result<[usize; 2]> {
    let d = vol.dims();
    if d[0] < n1 || d[1] < n1 {
        return Err(Error::invalid(format!(
            "volume {:?} narrower than crop side {n1}",
            d
        )));
    }
    let com = vol
        .foreground()
        .center_of_mass([1.0; 3])
        .unwrap_or([(d[0] as f64 - 1.0) / 2.0, (d[1] as f64 - 1.0) / 2.0, 0.0]);
    let place = |c: f64, size: usize| -> usize {
        let start = (c + 0.5).floor() as isize - (n1 / 2) as isize;
        start.clamp(0, (size - n1) as isize) as usize
    };
    Ok([place(com[0], d[0]), place(com[1], d[1])])
}

pub fn crop_at(vol: &Volume, origin: [usize; 3], n1: usize, s: usize) -> Result<Crop> {
    let size = [n1, n1, s];
    let channels = vol
        .channels
        .iter()
        .map(|c| c.crop(origin, size))
        .collect::<Result<Vec<_>>>()?;
    let gt = match vol.thrombus() {
        Some(m) => m.crop(origin, size)?,
        None => Mask::filled(size, false),
    };
    let contains_target = gt.count() > 0;
    Ok(Crop {
        channels,
        gt,
        contains_target,
        origin,
    })
}

/// One crop covering the thrombus slices and one free of thrombus.
pub fn sample_crops(vol: &Volume, n1: usize, s: usize, rng: &mut impl Rng) -> Result<(Crop, Crop)> {
    let d = vol.dims();
    if s == 0 || d[2] < s {
        return Err(Error::invalid(format!("volume has {} slices, crop needs {s}", d[2])));
    }
    let [ox, oy] = inplane_origin(vol, n1)?;
    let thrombus = vol
        .thrombus()
        .filter(|m| m.count() > 0)
        .ok_or_else(|| Error::invalid("volume has no thrombus"))?;
    let (mut z0, mut z1) = (usize::MAX, 0);
    for (i, _) in thrombus.data().iter().enumerate().filter(|(_, &b)| b) {
        let z = thrombus.coords(i)[2];
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let max_start = d[2] - s;
    let (lo, hi) = if z1 - z0 < s {
        (z1.saturating_sub(s - 1), z0.min(max_start))
    } else {
        warn!("thrombus spans {} slices, more than the crop depth {s}", z1 - z0 + 1);
        (z0, (z1 + 1 - s).min(max_start))
    };
    let pos_start = rng.random_range(lo..=hi);
    let free: Vec<usize> = (0..=max_start).filter(|&a| a + s <= z0 || a > z1).collect();
    if free.is_empty() {
        return Err(Error::invalid(format!(
            "no thrombus-free window of {s} slices in a volume of depth {}",
            d[2]
        )));
    }
    let neg_start = free[rng.random_range(0..free.len())];
    Ok((
        crop_at(vol, [ox, oy, pos_start], n1, s)?,
        crop_at(vol, [ox, oy, neg_start], n1, s)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            prob: 0.4,
            noise_sigma: 0.05,
        }
    }
}

/// Random flips along each axis and additive noise, each with `cfg.prob`.
pub fn augment(crop: &Crop, cfg: &AugmentConfig, rng: &mut impl Rng) -> Crop {
    let mut out = crop.clone();
    for axis in 0..3 {
        if rng.random_bool(cfg.prob) {
            out.channels.iter_mut().for_each(|c| c.flip(axis));
            out.gt.flip(axis);
        }
    }
    if rng.random_bool(cfg.prob) && cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for c in &mut out.channels {
            c.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
        }
    }
    out
}

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u8::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.push(len);
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn encode_mvol(vol: &Volume) -> Result<Vec<u8>> {
    vol.validate()?;
    let d = vol.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MVOL_MAGIC);
    out.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    let n_mod = u16::try_from(vol.channels.len()).map_err(|_| Error::Format("too many channels".into()))?;
    let n_mask = u16::try_from(vol.masks.len()).map_err(|_| Error::Format("too many masks".into()))?;
    out.extend_from_slice(&n_mod.to_le_bytes());
    out.extend_from_slice(&n_mask.to_le_bytes());
    for &x in &d {
        let x = u32::try_from(x).map_err(|_| Error::Format("dimension overflow".into()))?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    for s in vol.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for ((name, ch), &present) in vol.names.iter().zip(&vol.channels).zip(&vol.present) {
        put_name(&mut out, name)?;
        out.push(u8::from(present));
        for &v in ch.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (name, m) in &vol.masks {
        put_name(&mut out, name)?;
        out.extend(m.data().iter().map(|&b| u8::from(b)));
    }
    Ok(out)
}

pub fn decode_mvol(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MVOL_MAGIC {
        return Err(Error::Format("bad MVOL magic".into()));
    }
    let version = r.u32()?;
    if version != MVOL_VERSION {
        return Err(Error::Format(format!("unsupported MVOL version {version}")));
    }
    let n_mod = r.u16()? as usize;
    let n_mask = r.u16()? as usize;
    let d = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let numel = d
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| Error::Format(format!("dimension overflow in {:?}", d)))?;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let name = |r: &mut Reader| -> Result<String> {
        let len = r.u8()? as usize;
        String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    };
    let mut names = Vec::with_capacity(n_mod);
    let mut channels = Vec::with_capacity(n_mod);
    let mut present = Vec::with_capacity(n_mod);
    for _ in 0..n_mod {
        names.push(name(&mut r)?);
        present.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad presence flag {b}"))),
        });
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        channels.push(Grid3::from_vec(d, data)?);
    }
    let mut masks = Vec::with_capacity(n_mask);
    for _ in 0..n_mask {
        let n = name(&mut r)?;
        let raw = r.take(numel)?;
        if let Some(b) = raw.iter().find(|&&b| b > 1) {
            return Err(Error::Format(format!("mask {n} holds non-binary value {b}")));
        }
        masks.push((n, Grid3::from_vec(d, raw.iter().map(|&b| b == 1).collect())?));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after MVOL payload".into()));
    }
    let vol = Volume {
        names,
        channels,
        present,
        spacing,
        masks,
    };
    vol.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(vol)
}

pub fn write_mvol(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mvol(vol)?)?;
    Ok(())
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    decode_mvol(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_names_roundtrip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_name(&m.name().to_lowercase()), Some(m));
        }
        assert_eq!(Modality::from_name("ADC"), None);
    }

    #[test]
    fn piecewise_hits_landmarks() {
        let from = [0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10.];
        let to = from.map(|v| v * 2.0 + 1.0);
        for k in 0..LANDMARK_COUNT {
            assert_eq!(piecewise(from[k], &from, &to), to[k]);
        }
        assert_eq!(piecewise(-5.0, &from, &to), 1.0);
        assert_eq!(piecewise(0.5, &from, &to), 2.0);
    }

    #[test]
    fn noiseless_phantom_without_contrast_is_plain_ellipsoid() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            lesion_offset: [0.0; 3],
            thrombus_offset: [0.0; 3],
            ..PhantomSpec::for_dims([24, 24, 20], 4)
        };
        let v = generate_phantom(&spec, &mut stream_rng(3, 0)).unwrap();
        let fg = v.foreground();
        for c in &v.channels {
            for (i, &x) in c.data().iter().enumerate() {
                assert_eq!(x, if fg.data()[i] { 1.0 } else { 0.0 });
            }
        }
    }
}
