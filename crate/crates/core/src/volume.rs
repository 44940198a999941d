//! Synthetic volumes, canonical sizing, slicing and dataset bookkeeping.
//!
//! Volumes are `[X, Y, Z]` grids stored with `z` fastest: voxel `(x, y, z)`
//! is at `(x * Y + y) * Z + z`. `z` is depth; the probe apex sits above
//! `z = 0`, so axial slices (fixed `z`) fed forward run from top to bottom.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::serialize::{read_f64, read_u32, read_u64};
use crate::tensor::Tensor;

/// One volume with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// Grey values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Binary structure label.
    pub label: Tensor<f32>,
    /// Binary field of view: voxels inside the imaging cone.
    pub fov: Tensor<f32>,
    /// Binary mask of the slice-ambiguous construct, when present.
    pub region: Option<Tensor<f32>>,
    /// Depth indices of the two slices with identical images, shallower first.
    pub twin_slices: Option<(usize, usize)>,
    pub spacing: f64,
}

impl VolumeSample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }

    pub fn label_fraction(&self) -> f64 {
        self.label.sum() / self.label.numel() as f64
    }

    /// All `[x, y]` values of depth slice `z`, row-major.
    pub fn depth_slice(t: &Tensor<f32>, z: usize) -> Vec<f32> {
        let s = t.shape();
        let (nx, ny, nz) = (s[0], s[1], s[2]);
        (0..nx * ny).map(|i| t.data()[i * nz + z]).collect()
    }
}

#[inline]
fn index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Parameters of the synthetic generator. Lengths are in voxels unless noted.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub size: [usize; 3],
    /// Tube diameter range.
    pub tube_diameter: (f64, f64),
    /// Radius of the sling's curved part, as a fraction of the smaller lateral size.
    pub sling_radius: (f64, f64),
    /// Length of each leg, as a fraction of `Y`.
    pub leg_length: (f64, f64),
    /// Tilt of the sling plane against the axial plane, degrees.
    pub tilt_degrees: (f64, f64),
    /// Cone half-angles (lateral, elevational), degrees.
    pub half_angles: (f64, f64),
    /// Distance of the virtual apex above the first slice.
    pub apex_offset: f64,
    /// Standard deviation of the unit-mean multiplicative speckle.
    pub speckle: f64,
    /// In-plane Gaussian blur of the structure, in voxels.
    pub blur_sigma: f64,
    pub background: f64,
    pub foreground: f64,
    /// Accepted range of the label voxel fraction.
    pub label_band: (f64, f64),
    /// Probability that a volume contains the slice-ambiguous construct.
    pub ambiguity_fraction: f64,
    /// If set, structures stay inside the central this-many depth slices, so
    /// the volume can be cropped to that depth without losing labels.
    pub crop_depth: Option<usize>,
    pub spacing: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            size: [64, 64, 32],
            tube_diameter: (4.0, 6.0),
            sling_radius: (0.14, 0.19),
            leg_length: (0.12, 0.2),
            tilt_degrees: (10.0, 25.0),
            half_angles: (42.5, 35.0),
            apex_offset: 8.0,
            speckle: 0.2,
            blur_sigma: 0.5,
            background: 0.3,
            foreground: 0.85,
            label_band: (0.002, 0.015),
            ambiguity_fraction: 0.3,
            crop_depth: None,
            spacing: 1.0,
        }
    }
}

impl GeneratorConfig {
    /// Full-size configuration: 256x256x154 volumes, croppable to 128 slices.
    pub fn paper_scale() -> Self {
        GeneratorConfig {
            size: [256, 256, 154],
            tube_diameter: (16.0, 24.0),
            apex_offset: 38.0,
            crop_depth: Some(128),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&d| d < 8) {
            return Err(Error::config(format!("volume size {:?} too small (min 8 per axis)", self.size)));
        }
        let ranges = [
            ("tube_diameter", self.tube_diameter),
            ("sling_radius", self.sling_radius),
            ("leg_length", self.leg_length),
            ("tilt_degrees", self.tilt_degrees),
            ("label_band", self.label_band),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        let (a, b) = self.half_angles;
        if !(a > 0.0 && a <= 90.0 && b > 0.0 && b <= 90.0) {
            return Err(Error::config("half angles must be in (0, 90] degrees"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return Err(Error::config("ambiguity_fraction must be in [0, 1]"));
        }
        if self.speckle < 0.0 || self.blur_sigma < 0.0 || self.apex_offset < 0.0 {
            return Err(Error::config("speckle, blur_sigma and apex_offset must be non-negative"));
        }
        if !(0.0..self.foreground).contains(&self.background) || self.foreground > 1.0 {
            return Err(Error::config("need 0 <= background < foreground <= 1"));
        }
        if let Some(c) = self.crop_depth {
            if c > self.size[2] || c < 8 {
                return Err(Error::config(format!("crop depth {c} incompatible with depth {}", self.size[2])));
            }
        }
        Ok(())
    }

    /// Depth range structures may occupy.
    fn depth_range(&self) -> (usize, usize) {
        let z = self.size[2];
        match self.crop_depth {
            Some(c) => {
                let top = (z - c) / 2;
                (top, top + c)
            }
            None => (0, z),
        }
    }
}

/// Binary cone with its apex `apex_offset` above the first depth slice,
/// elliptic cross-sections set by the two half-angles, and a curved bottom at
/// distance `radial_limit` from the apex.
pub fn cone_mask(size: [usize; 3], half_angles: (f64, f64), apex_offset: f64, radial_limit: f64) -> Tensor<f32> {
    let [nx, ny, nz] = size;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let slope = |deg: f64| if deg >= 90.0 { f64::INFINITY } else { deg.to_radians().tan() };
    let (tx, ty) = (slope(half_angles.0), slope(half_angles.1));
    let mut data = vec![0.0f32; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let depth = z as f64 + 0.5 + apex_offset;
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (rx, ry) = (depth * tx, depth * ty);
                let lateral = (dx / rx).powi(2) + (dy / ry).powi(2);
                let radial = (dx * dx + dy * dy + depth * depth).sqrt();
                if lateral <= 1.0 && radial <= radial_limit {
                    data[index(size, x, y, z)] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[nx, ny, nz], data).expect("non-empty volume")
}

/// Default radial limit: the bottom arc touches the last slice on the axis.
pub fn default_radial_limit(size: [usize; 3], apex_offset: f64) -> f64 {
    apex_offset + size[2] as f64
}

struct Geometry {
    /// Centre-line samples of the sling.
    sling: Vec<[f64; 3]>,
    tube_radius: f64,
}

fn sling_geometry(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Geometry {
    let [nx, ny, _] = cfg.size;
    let (zlo, zhi) = cfg.depth_range();
    let lateral = nx.min(ny) as f64;
    let ru = rng.gen_range(cfg.sling_radius.0..=cfg.sling_radius.1) * lateral;
    let legs = rng.gen_range(cfg.leg_length.0..=cfg.leg_length.1) * ny as f64;
    let tilt = rng.gen_range(cfg.tilt_degrees.0..=cfg.tilt_degrees.1).to_radians();
    let rt = rng.gen_range(cfg.tube_diameter.0..=cfg.tube_diameter.1) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0 + rng.gen_range(-0.04..=0.04) * nx as f64;
    // the curve sits posterior (low y), the legs run anterior
    let y_span = ru + legs;
    let cy = (ny as f64 - 1.0) / 2.0 - y_span / 2.0 + ru + rng.gen_range(-0.03..=0.03) * ny as f64;
    let z_extent = y_span * tilt.tan() + 2.0 * rt;
    let depth = (zhi - zlo) as f64;
    let lo = zlo as f64 + 0.55 * depth;
    let hi = (zhi as f64 - z_extent / 2.0 - 1.0).max(lo);
    let z_mid = rng.gen_range(lo..=hi);
    let y_mid = cy - ru + y_span / 2.0;
    let z_of = |y: f64| z_mid + (y - y_mid) * tilt.tan();

    let step = 0.25;
    let mut pts = Vec::new();
    let arc = std::f64::consts::PI * ru;
    let n_arc = (arc / step).ceil() as usize;
    for i in 0..=n_arc {
        let a = std::f64::consts::PI + std::f64::consts::PI * i as f64 / n_arc as f64;
        let (x, y) = (cx + ru * a.cos(), cy + ru * a.sin());
        pts.push([x, y, z_of(y)]);
    }
    let n_leg = (legs / step).ceil() as usize;
    for side in [-1.0, 1.0] {
        for i in 1..=n_leg {
            let y = cy + legs * i as f64 / n_leg as f64;
            let x = cx + side * ru;
            pts.push([x, y, z_of(y)]);
        }
    }
    Geometry { sling: pts, tube_radius: rt }
}

/// Mark every voxel within `radius` of any centre-line sample.
fn rasterize_tube(size: [usize; 3], pts: &[[f64; 3]], radius: f64, out: &mut [bool]) -> bool {
    let mut inside = true;
    let r2 = radius * radius;
    let reach = radius.ceil() as isize;
    for p in pts {
        let c = [p[0].round() as isize, p[1].round() as isize, p[2].round() as isize];
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let v = [c[0] + dx, c[1] + dy, c[2] + dz];
                    let d2: f64 = (0..3).map(|k| (v[k] as f64 - p[k]).powi(2)).sum();
                    if d2 > r2 {
                        continue;
                    }
                    if (0..3).any(|k| v[k] < 0 || v[k] >= size[k] as isize) {
                        inside = false;
                        continue;
                    }
                    out[index(size, v[0] as usize, v[1] as usize, v[2] as usize)] = true;
                }
            }
        }
    }
    inside
}

/// Vertical rods at one `(x, y)`: a capped rod (labelled) and an uncapped
/// rod (unlabelled), at different depths in random order.
struct Construct {
    x: f64,
    y: f64,
    rod_radius: f64,
    cap_radius: f64,
    cap: (usize, usize),
    labelled: (usize, usize),
    unlabelled: (usize, usize),
}

const CAP_SLICES: usize = 2;

fn construct_geometry(cfg: &GeneratorConfig, rt: f64, rng: &mut ChaCha8Rng) -> Option<Construct> {
    let [nx, ny, _] = cfg.size;
    let (zlo, zhi) = cfg.depth_range();
    let la = rng.gen_range(4..=6usize);
    let lb = la + 2;
    let gap = rng.gen_range(2..=3usize);
    let span = CAP_SLICES + la + gap + lb;
    let start_lo = zlo + 1;
    if start_lo + span + 1 > zhi {
        return None;
    }
    let start = rng.gen_range(start_lo..=zhi - span - 1);
    let labelled_first = rng.gen_bool(0.5);
    let (cap, labelled, unlabelled) = if labelled_first {
        let cap = (start, start + CAP_SLICES);
        let a = (cap.1, cap.1 + la);
        (cap, a, (a.1 + gap, a.1 + gap + lb))
    } else {
        let b = (start, start + lb);
        let cap = (b.1 + gap, b.1 + gap + CAP_SLICES);
        (cap, (cap.1, cap.1 + la), b)
    };
    let x = (nx as f64 - 1.0) / 2.0 + rng.gen_range(-0.08..=0.08) * nx as f64;
    let y = (ny as f64 - 1.0) / 2.0 + rng.gen_range(-0.08..=0.08) * ny as f64;
    Some(Construct {
        x,
        y,
        rod_radius: rt,
        cap_radius: 2.0 * rt,
        cap,
        labelled,
        unlabelled,
    })
}

fn disk(size: [usize; 3], cx: f64, cy: f64, r: f64, z: usize, out: &mut [bool]) {
    for x in 0..size[0] {
        for y in 0..size[1] {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                out[index(size, x, y, z)] = true;
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur along `x` and `y` only, zero outside the grid.
fn blur_in_plane(size: [usize; 3], v: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], axis: usize| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for x in 0..size[0] {
            for y in 0..size[1] {
                for z in 0..size[2] {
                    let mut acc = 0.0;
                    for (t, w) in k.iter().enumerate() {
                        let off = t as isize - r;
                        let (xx, yy) = if axis == 0 { (x as isize + off, y as isize) } else { (x as isize, y as isize + off) };
                        if xx < 0 || yy < 0 || xx >= size[0] as isize || yy >= size[1] as isize {
                            continue;
                        }
                        acc += w * src[index(size, xx as usize, yy as usize, z)];
                    }
                    dst[index(size, x, y, z)] = acc;
                }
            }
        }
        dst
    };
    let once = pass(v, 0);
    pass(&once, 1)
}

/// Maximum number of geometry draws before giving up.
const MAX_ATTEMPTS: usize = 200;

/// Deterministic synthetic volume for `(cfg, seed)`.
pub fn generate_volume(cfg: &GeneratorConfig, seed: u64) -> Result<VolumeSample> {
    cfg.validate()?;
    let size = cfg.size;
    let n = size.iter().product::<usize>();
    let radial = default_radial_limit(size, cfg.apex_offset);
    let fov = cone_mask(size, cfg.half_angles, cfg.apex_offset, radial);
    let fov_b: Vec<bool> = fov.data().iter().map(|&v| v > 0.5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ambiguous = rng.gen_bool(cfg.ambiguity_fraction);

    for _ in 0..MAX_ATTEMPTS {
        let geo = sling_geometry(cfg, &mut rng);
        let mut sling = vec![false; n];
        if !rasterize_tube(size, &geo.sling, geo.tube_radius, &mut sling) {
            continue;
        }
        let mut label = sling.clone();
        let mut structure = sling.clone();
        let mut region = None;
        let mut construct = None;
        if ambiguous {
            let Some(c) = construct_geometry(cfg, geo.tube_radius, &mut rng) else {
                return Err(Error::config(format!(
                    "depth {} leaves no room for the ambiguous construct",
                    size[2]
                )));
            };
            let mut rods = vec![false; n];
            let mut cap = vec![false; n];
            let mut labelled = vec![false; n];
            for z in c.cap.0..c.cap.1 {
                disk(size, c.x, c.y, c.cap_radius, z, &mut cap);
            }
            for z in (c.labelled.0..c.labelled.1).chain(c.unlabelled.0..c.unlabelled.1) {
                disk(size, c.x, c.y, c.rod_radius, z, &mut rods);
            }
            for z in c.labelled.0..c.labelled.1 {
                disk(size, c.x, c.y, c.rod_radius, z, &mut labelled);
            }
            // keep the construct clear of the sling, with a margin
            let mut near_sling = vec![false; n];
            rasterize_tube(size, &geo.sling, geo.tube_radius + 3.0, &mut near_sling);
            let clash = (0..n).any(|i| (rods[i] || cap[i]) && near_sling[i]);
            let outside = (0..n).any(|i| (rods[i] || cap[i]) && !fov_b[i]);
            if clash || outside {
                continue;
            }
            let mut reg = vec![false; n];
            for z in (c.labelled.0..c.labelled.1).chain(c.unlabelled.0..c.unlabelled.1) {
                disk(size, c.x, c.y, c.rod_radius + 1.0, z, &mut reg);
            }
            for i in 0..n {
                label[i] |= labelled[i];
                structure[i] |= rods[i] || cap[i];
            }
            region = Some(reg);
            construct = Some(c);
        }
        if (0..n).any(|i| label[i] && !fov_b[i]) {
            continue;
        }
        let fraction = label.iter().filter(|&&b| b).count() as f64 / n as f64;
        if fraction < cfg.label_band.0 || fraction > cfg.label_band.1 {
            continue;
        }

        let twins = match &construct {
            Some(c) => match pick_twins(size, c, &sling, &fov_b, &mut rng) {
                Some(t) => Some(t),
                None => continue,
            },
            None => None,
        };
        let image = render(cfg, &structure, &fov_b, &mut rng, twins);
        let as_tensor = |v: &[bool]| Tensor::new(&size, v.iter().map(|&b| b as u8 as f32).collect()).expect("volume");
        return Ok(VolumeSample {
            id: format!("synthetic-{seed}"),
            image: Tensor::new(&size, image).expect("volume"),
            label: as_tensor(&label),
            fov: fov.clone(),
            region: region.as_deref().map(as_tensor),
            twin_slices: twins,
            spacing: cfg.spacing,
        });
    }
    Err(Error::config(format!(
        "no valid geometry after {MAX_ATTEMPTS} draws; widen label_band or adjust structure sizes"
    )))
}

/// One slice from each rod, free of sling voxels, whose cone sections nest.
fn pick_twins(size: [usize; 3], c: &Construct, sling: &[bool], fov: &[bool], rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let clear = |z: usize| {
        (0..size[0]).all(|x| (0..size[1]).all(|y| !sling[index(size, x, y, z)]))
    };
    let nests = |a: usize, b: usize| {
        (0..size[0]).all(|x| (0..size[1]).all(|y| !fov[index(size, x, y, a)] || fov[index(size, x, y, b)]))
    };
    let mut pairs: Vec<(usize, usize)> = (c.labelled.0..c.labelled.1)
        .flat_map(|a| (c.unlabelled.0..c.unlabelled.1).map(move |b| (a, b)))
        .filter(|&(a, b)| clear(a) && clear(b))
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    pairs.shuffle(rng);
    pairs.into_iter().find(|&(s, d)| nests(s, d))
}

fn render(
    cfg: &GeneratorConfig,
    structure: &[bool],
    fov: &[bool],
    rng: &mut ChaCha8Rng,
    twins: Option<(usize, usize)>,
) -> Vec<f32> {
    let size = cfg.size;
    let s: Vec<f64> = structure.iter().map(|&b| b as u8 as f64).collect();
    let s = blur_in_plane(size, &s, cfg.blur_sigma);
    let gamma = (cfg.speckle > 0.0).then(|| {
        let k = 1.0 / (cfg.speckle * cfg.speckle);
        Gamma::new(k, 1.0 / k).expect("positive shape")
    });
    let mut img = vec![0.0f32; s.len()];
    for x in 0..size[0] {
        for y in 0..size[1] {
            for z in 0..size[2] {
                let i = index(size, x, y, z);
                let atten = 1.0 - 0.3 * z as f64 / size[2] as f64;
                let clean = cfg.background * atten + (cfg.foreground - cfg.background * atten) * s[i];
                let noise = gamma.as_ref().map_or(1.0, |g| g.sample(rng));
                if fov[i] {
                    img[i] = (clean * noise).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    if let Some((src, dst)) = twins {
        for x in 0..size[0] {
            for y in 0..size[1] {
                img[index(size, x, y, dst)] = img[index(size, x, y, src)];
            }
        }
    }
    img
}

/// `n` volumes with seeds derived from `seed`, named `vol000`, `vol001`, ...
pub fn generate_dataset(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<VolumeSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut v = generate_volume(cfg, rng.gen())?;
            v.id = format!("vol{i:03}");
            Ok(v)
        })
        .collect()
}

/// Zero-pad every axis to `target`, centred. Axes larger than the target
/// are cropped symmetrically, which fails if it would remove label voxels.
pub fn pad_to_canonical(v: &VolumeSample, target: [usize; 3]) -> Result<VolumeSample> {
    let src = v.dims();
    // offset of the source origin inside the target grid (negative = crop)
    let off: Vec<isize> = (0..3).map(|k| (target[k] as isize - src[k] as isize).div_euclid(2)).collect();
    for k in 0..3 {
        if src[k] > target[k] {
            let keep = |i: usize| {
                let t = i as isize + off[k];
                t >= 0 && (t as usize) < target[k]
            };
            for x in 0..src[0] {
                for y in 0..src[1] {
                    for z in 0..src[2] {
                        let c = [x, y, z];
                        if !keep(c[k]) && v.label.data()[index(src, x, y, z)] > 0.5 {
                            return Err(Error::param(format!(
                                "cropping axis {k} from {} to {} would remove label voxels",
                                src[k], target[k]
                            )));
                        }
                    }
                }
            }
        }
    }
    let remap = |t: &Tensor<f32>| -> Tensor<f32> {
        let mut out = vec![0.0f32; target.iter().product()];
        for x in 0..src[0] {
            for y in 0..src[1] {
                for z in 0..src[2] {
                    let d = [x as isize + off[0], y as isize + off[1], z as isize + off[2]];
                    if (0..3).all(|k| d[k] >= 0 && (d[k] as usize) < target[k]) {
                        out[index(target, d[0] as usize, d[1] as usize, d[2] as usize)] = t.data()[index(src, x, y, z)];
                    }
                }
            }
        }
        Tensor::new(&target, out).expect("volume")
    };
    let shift = |z: usize| z as isize + off[2];
    let twin_slices = v.twin_slices.and_then(|(a, b)| {
        let (a, b) = (shift(a), shift(b));
        (a >= 0 && b >= 0 && (a as usize) < target[2] && (b as usize) < target[2]).then_some((a as usize, b as usize))
    });
    Ok(VolumeSample {
        id: v.id.clone(),
        image: remap(&v.image),
        label: remap(&v.label),
        fov: remap(&v.fov),
        region: v.region.as_ref().map(remap),
        twin_slices,
        spacing: v.spacing,
    })
}

/// First depth index kept when cropping `full` slices to `depth`, matching
/// the centring used by [`pad_to_canonical`].
pub fn depth_window_start(full: usize, depth: usize) -> usize {
    (-(depth as isize - full as isize).div_euclid(2)) as usize
}

/// Central `depth` slices of a `[X, Y, Z]` tensor with `Z >= depth`.
pub fn crop_depth(t: &Tensor<f32>, depth: usize) -> Result<Tensor<f32>> {
    let d = [t.shape()[0], t.shape()[1], t.shape()[2]];
    if depth == 0 || depth > d[2] {
        return Err(Error::param(format!("cannot crop depth {} to {depth}", d[2])));
    }
    let start = depth_window_start(d[2], depth);
    let target = [d[0], d[1], depth];
    Ok(Tensor::from_fn(&target, |i| {
        let (xy, z) = (i / depth, i % depth);
        t.data()[xy * d[2] + start + z]
    }))
}

/// Inverse of [`crop_depth`]: place `t` back into `full` slices, zero elsewhere.
pub fn embed_depth(t: &Tensor<f32>, full: usize) -> Result<Tensor<f32>> {
    let d = [t.shape()[0], t.shape()[1], t.shape()[2]];
    if d[2] > full {
        return Err(Error::param(format!("cannot embed depth {} into {full}", d[2])));
    }
    let start = depth_window_start(full, d[2]);
    Ok(Tensor::from_fn(&[d[0], d[1], full], |i| {
        let (xy, z) = (i / full, i % full);
        if z >= start && z < start + d[2] {
            t.data()[xy * d[2] + z - start]
        } else {
            0.0
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    /// Fixed depth `z`; slices are `[X, Y]`.
    Axial,
    /// Fixed `y`; slices are `[X, Z]`.
    Coronal,
    /// Fixed `x`; slices are `[Y, Z]`.
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Axis the slices are taken along.
    pub fn axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    pub fn slice_shape(self, dims: [usize; 3]) -> (usize, usize) {
        match self {
            Orientation::Axial => (dims[0], dims[1]),
            Orientation::Coronal => (dims[0], dims[2]),
            Orientation::Sagittal => (dims[1], dims[2]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    fn voxel(self, dims: [usize; 3], s: usize, r: usize, c: usize) -> usize {
        match self {
            Orientation::Axial => index(dims, r, c, s),
            Orientation::Coronal => index(dims, r, s, c),
            Orientation::Sagittal => index(dims, s, r, c),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            _ => Err(Error::config(format!("unknown orientation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Direction {
    /// Increasing index; for axial slices, top to bottom.
    #[default]
    Forward,
    Reverse,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "reverse" => Ok(Direction::Reverse),
            _ => Err(Error::config(format!("unknown direction `{s}`"))),
        }
    }
}

/// Ordered 2D slices of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSequence {
    pub orientation: Orientation,
    pub direction: Direction,
    /// Volume index along the slicing axis of each slice, in feed order.
    pub positions: Vec<usize>,
    /// `[1, H, W]` images.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Tensor<f32>>,
    pub fov: Vec<Tensor<f32>>,
}

impl SliceSequence {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Slice `t` along `orientation`, in `direction` order.
pub fn slices_of(t: &Tensor<f32>, orientation: Orientation, direction: Direction) -> Vec<Tensor<f32>> {
    let dims = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let (h, w) = orientation.slice_shape(dims);
    slice_positions(dims, orientation, direction)
        .into_iter()
        .map(|s| {
            let data = (0..h * w).map(|i| t.data()[orientation.voxel(dims, s, i / w, i % w)]).collect();
            Tensor::new(&[1, h, w], data).expect("slice")
        })
        .collect()
}

fn slice_positions(dims: [usize; 3], orientation: Orientation, direction: Direction) -> Vec<usize> {
    let n = dims[orientation.axis()];
    match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Reverse => (0..n).rev().collect(),
    }
}

pub fn extract_slices(v: &VolumeSample, orientation: Orientation, direction: Direction) -> SliceSequence {
    SliceSequence {
        orientation,
        direction,
        positions: slice_positions(v.dims(), orientation, direction),
        images: slices_of(&v.image, orientation, direction),
        labels: slices_of(&v.label, orientation, direction),
        fov: slices_of(&v.fov, orientation, direction),
    }
}

/// Inverse of [`slices_of`]: put per-slice maps back into a `[X, Y, Z]` volume.
pub fn assemble(
    slices: &[Tensor<f32>],
    orientation: Orientation,
    direction: Direction,
    dims: [usize; 3],
) -> Result<Tensor<f32>> {
    let positions = slice_positions(dims, orientation, direction);
    let (h, w) = orientation.slice_shape(dims);
    if slices.len() != positions.len() {
        return Err(Error::Dimension {
            op: "assemble",
            axis: "slices",
            expected: positions.len(),
            actual: slices.len(),
        });
    }
    let mut out = vec![0.0f32; dims.iter().product()];
    for (s, t) in positions.into_iter().zip(slices) {
        if t.numel() != h * w {
            return Err(Error::Dimension {
                op: "assemble",
                axis: "slice",
                expected: h * w,
                actual: t.numel(),
            });
        }
        for (i, &v) in t.data().iter().enumerate() {
            out[orientation.voxel(dims, s, i / w, i % w)] = v;
        }
    }
    Tensor::new(&dims, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

/// Sizes for `n` items split by `ratios`, with rounding slack going to test.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    let total = a + b + c;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
        return Err(Error::param(format!("invalid split ratios {ratios:?}")));
    }
    let train = (n as f64 * a / total).round() as usize;
    let val = (n as f64 * b / total).round() as usize;
    if train + val > n {
        return Err(Error::param(format!("ratios {ratios:?} cannot split {n} items")));
    }
    Ok((train, val, n - train - val))
}

/// Shuffle indices `0..n` with `seed` and cut them into train, val, test.
pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (tr, va, _) = split_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(tr + va);
    let val = idx.split_off(tr);
    Ok((idx, val, test))
}

const VOLUME_MAGIC: &[u8; 8] = b"RUNETVOL";
const VOLUME_VERSION: u32 = 1;
const NO_TWIN: u64 = u64::MAX;

pub fn write_volume(path: &Path, v: &VolumeSample) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let dims = v.dims();
    out.write_all(VOLUME_MAGIC)?;
    out.write_all(&VOLUME_VERSION.to_le_bytes())?;
    for d in dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&v.spacing.to_le_bytes())?;
    let flags: u32 = v.region.is_some() as u32;
    out.write_all(&flags.to_le_bytes())?;
    let (a, b) = v.twin_slices.map_or((NO_TWIN, NO_TWIN), |(a, b)| (a as u64, b as u64));
    out.write_all(&a.to_le_bytes())?;
    out.write_all(&b.to_le_bytes())?;
    let id = v.id.as_bytes();
    out.write_all(&(id.len() as u64).to_le_bytes())?;
    out.write_all(id)?;
    for x in v.image.data() {
        out.write_all(&x.to_le_bytes())?;
    }
    let bytes = |t: &Tensor<f32>| -> Vec<u8> { t.data().iter().map(|&x| (x > 0.5) as u8).collect() };
    out.write_all(&bytes(&v.label))?;
    out.write_all(&bytes(&v.fov))?;
    if let Some(r) = &v.region {
        out.write_all(&bytes(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let mut input = BufReader::new(File::open(path)?);
    let fail = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
    if &magic != VOLUME_MAGIC {
        return Err(fail("not a volume file"));
    }
    let version = read_u32(&mut input)?;
    if version != VOLUME_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u64(&mut input)? as usize;
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0 && n <= 1 << 32);
    let n = n.ok_or_else(|| fail("invalid dimensions"))?;
    let spacing = read_f64(&mut input)?;
    let flags = read_u32(&mut input)?;
    let (a, b) = (read_u64(&mut input)?, read_u64(&mut input)?);
    let id_len = read_u64(&mut input)? as usize;
    if id_len > 4096 {
        return Err(fail("id too long"));
    }
    let mut id = vec![0u8; id_len];
    input.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|_| fail("id is not UTF-8"))?;
    let mut raw = vec![0u8; 4 * n];
    input.read_exact(&mut raw).map_err(|_| fail("truncated image"))?;
    let image: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut mask = |what: &str| -> Result<Tensor<f32>> {
        let mut raw = vec![0u8; n];
        input.read_exact(&mut raw).map_err(|_| fail(&format!("truncated {what}")))?;
        Tensor::new(&dims, raw.into_iter().map(|b| b as f32).collect())
    };
    let label = mask("label")?;
    let fov = mask("fov")?;
    let region = if flags & 1 == 1 { Some(mask("region")?) } else { None };
    Ok(VolumeSample {
        id,
        image: Tensor::new(&dims, image)?,
        label,
        fov,
        region,
        twin_slices: (a != NO_TWIN).then_some((a as usize, b as usize)),
        spacing,
    })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "id,path,split")?;
    for e in entries {
        writeln!(out, "{},{},{}", e.id, e.path.display(), e.split.name())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,path,split") {
        return Err(Error::Format(format!("{}: missing manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("{}: line {} needs 3 fields", path.display(), i + 2)));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                split: f[2].parse()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            ambiguity_fraction: 1.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_volume() {
        let cfg = small_cfg();
        assert_eq!(generate_volume(&cfg, 5).unwrap(), generate_volume(&cfg, 5).unwrap());
        assert_ne!(generate_volume(&cfg, 5).unwrap().image, generate_volume(&cfg, 6).unwrap().image);
    }

    #[test]
    fn generated_volume_invariants() {
        for seed in 0..6 {
            let v = generate_volume(&small_cfg(), seed).unwrap();
            let f = v.label_fraction();
            assert!((0.002..=0.015).contains(&f), "fraction {f}");
            for i in 0..v.label.numel() {
                assert!(v.label.data()[i] <= v.fov.data()[i]);
                let x = v.image.data()[i];
                assert!((0.0..=1.0).contains(&x));
                if v.fov.data()[i] == 0.0 {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn twin_slices_match_in_image_and_differ_in_label() {
        for seed in 0..4 {
            let v = generate_volume(&small_cfg(), seed).unwrap();
            let (a, b) = v.twin_slices.expect("construct present");
            assert!(a < b);
            assert_eq!(VolumeSample::depth_slice(&v.image, a), VolumeSample::depth_slice(&v.image, b));
            assert_ne!(VolumeSample::depth_slice(&v.label, a), VolumeSample::depth_slice(&v.label, b));
            let region = v.region.as_ref().unwrap();
            assert!(VolumeSample::depth_slice(region, a).iter().any(|&r| r > 0.0));
        }
    }

    #[test]
    fn structure_is_brighter_than_background() {
        let v = generate_volume(&GeneratorConfig::default(), 3).unwrap();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..v.label.numel() {
            if v.label.data()[i] > 0.5 {
                fg += v.image.data()[i] as f64;
                nf += 1;
            } else if v.fov.data()[i] > 0.5 {
                bg += v.image.data()[i] as f64;
                nb += 1;
            }
        }
        assert!(fg / nf as f64 > 1.5 * bg / nb as f64);
    }

    #[test]
    fn cone_is_mirror_symmetric_and_grows_with_depth() {
        let size = [40, 36, 24];
        let m = cone_mask(size, (40.0, 30.0), 5.0, f64::INFINITY);
        for x in 0..40 {
            for y in 0..36 {
                for z in 0..24 {
                    assert_eq!(m.data()[index(size, x, y, z)], m.data()[index(size, 39 - x, y, z)]);
                }
            }
        }
        let areas: Vec<f64> = (0..24).map(|z| VolumeSample::depth_slice(&m, z).iter().map(|&v| v as f64).sum()).collect();
        assert!(areas.windows(2).all(|w| w[0] <= w[1]), "{areas:?}");
        assert!(areas[0] > 0.0);
    }

    #[test]
    fn right_angle_cone_fills_the_fan() {
        let size = [12, 12, 10];
        let r = 14.0;
        let m = cone_mask(size, (90.0, 90.0), 2.0, r);
        for x in 0..12 {
            for y in 0..12 {
                for z in 0..10 {
                    let (dx, dy, dz) = (x as f64 - 5.5, y as f64 - 5.5, z as f64 + 2.5);
                    let inside = (dx * dx + dy * dy + dz * dz).sqrt() <= r;
                    assert_eq!(m.data()[index(size, x, y, z)] == 1.0, inside);
                }
            }
        }
    }

    fn blank(dims: [usize; 3]) -> VolumeSample {
        VolumeSample {
            id: "blank".into(),
            image: Tensor::zeros(&dims),
            label: Tensor::zeros(&dims),
            fov: Tensor::zeros(&dims),
            region: None,
            twin_slices: None,
            spacing: 0.5,
        }
    }

    #[test]
    fn clinical_size_pads_to_canonical() {
        let mut v = blank([215, 235, 140]);
        v.image.data_mut()[0] = 0.7;
        let p = pad_to_canonical(&v, [256, 256, 154]).unwrap();
        assert_eq!(p.dims(), [256, 256, 154]);
        assert_eq!(p.image.sum(), v.image.sum());
        assert_eq!(p.image.data()[index([256, 256, 154], 20, 10, 7)], 0.7f32);
    }

    #[test]
    fn depth_crop_matches_canonical_crop() {
        let cfg = GeneratorConfig {
            size: [16, 16, 13],
            tube_diameter: (2.0, 3.0),
            apex_offset: 4.0,
            label_band: (0.002, 0.3),
            crop_depth: Some(8),
            ..GeneratorConfig::default()
        };
        let v = generate_volume(&cfg, 4).unwrap();
        let canon = pad_to_canonical(&v, [16, 16, 8]).unwrap();
        assert_eq!(crop_depth(&v.image, 8).unwrap(), canon.image);
        let back = embed_depth(&canon.label, 13).unwrap();
        assert_eq!(back, v.label);
    }

    #[test]
    fn canonical_volume_is_unchanged() {
        let v = generate_volume(&small_cfg(), 1).unwrap();
        assert_eq!(pad_to_canonical(&v, v.dims()).unwrap(), v);
    }

    #[test]
    fn crop_refuses_to_drop_labels() {
        let mut v = blank([8, 8, 20]);
        v.label.data_mut()[index([8, 8, 20], 3, 3, 0)] = 1.0;
        assert!(pad_to_canonical(&v, [8, 8, 16]).is_err());
    }

    #[test]
    fn crop_safe_generation() {
        let cfg = GeneratorConfig {
            size: [48, 48, 40],
            crop_depth: Some(32),
            ambiguity_fraction: 1.0,
            ..GeneratorConfig::default()
        };
        for seed in 0..3 {
            let v = generate_volume(&cfg, seed).unwrap();
            let c = pad_to_canonical(&v, [48, 48, 32]).unwrap();
            assert_eq!(c.label.sum(), v.label.sum());
        }
    }

    #[test]
    fn slice_counts_and_reversal() {
        let v = generate_volume(&small_cfg(), 2).unwrap();
        let fwd = extract_slices(&v, Orientation::Axial, Direction::Forward);
        assert_eq!(fwd.len(), 32);
        assert_eq!(fwd.images[0].shape(), &[1, 64, 64]);
        let rev = extract_slices(&v, Orientation::Axial, Direction::Reverse);
        let mut back = rev.images.clone();
        back.reverse();
        assert_eq!(back, fwd.images);
        assert_eq!(extract_slices(&v, Orientation::Coronal, Direction::Forward).images[0].shape(), &[1, 64, 32]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn slicing_round_trips(x in 1usize..6, y in 1usize..6, z in 1usize..6, o in 0usize..3, rev in any::<bool>(), seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&[x, y, z], |_| r.gen::<f32>());
            let orientation = Orientation::ALL[o];
            let direction = if rev { Direction::Reverse } else { Direction::Forward };
            let s = slices_of(&t, orientation, direction);
            prop_assert_eq!(s.len(), t.shape()[orientation.axis()]);
            prop_assert_eq!(assemble(&s, orientation, direction, [x, y, z]).unwrap(), t);
        }

        #[test]
        fn splits_partition(n in 0usize..200, a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.1f64..10.0, seed in any::<u64>()) {
            let (tr, va, te) = split_dataset(n, (a, b, c), seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split_dataset(n, (a, b, c), seed).unwrap(), (tr, va, te));
        }
    }

    #[test]
    fn split_sizes_follow_proportions() {
        assert_eq!(split_sizes(100, (85.0, 5.0, 10.0)).unwrap(), (85, 5, 10));
        assert_eq!(split_sizes(20, (85.0, 5.0, 10.0)).unwrap(), (17, 1, 2));
        assert!(split_sizes(10, (0.0, 0.0, 0.0)).is_err());
        assert!(split_sizes(10, (-1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_volume(&small_cfg(), 4).unwrap();
        let p = dir.path().join("v.vol");
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(read_volume(&p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let entries = vec![
            ManifestEntry { id: "vol000".into(), path: "vol000.vol".into(), split: Split::Train },
            ManifestEntry { id: "vol001".into(), path: "vol001.vol".into(), split: Split::Test },
        ];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
    }
}
