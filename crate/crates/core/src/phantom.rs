//! Procedural labeled phantoms: a handful of jittered ellipsoids over a smooth
//! background, plus centroid and goal-plane extraction.

use serde::{Deserialize, Serialize};

use crate::geometry::{cross, norm, Plane, Vec3};
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{Dims, LabelVolume, Volume};
use crate::{quantize_u8, Error, Result};

/// Labels whose centroids define the goal plane (LV, RV, LA).
pub const CHAMBER_LABELS: [u8; 3] = [1, 2, 3];

const MAX_ATTEMPTS: u64 = 16;

/// One entry of the structure table, in fractions of the volume extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub label: u8,
    pub name: String,
    /// Centre as a fraction of `dim - 1` along each axis.
    pub center: Vec3,
    /// Semi-axes as a fraction of `dim` along each axis.
    pub semi_axes: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    pub jitter: f64,
    pub structures: Vec<StructureSpec>,
    /// Peak of the radial background ramp at the volume centre.
    pub background_peak: f64,
    /// Amplitude of the smooth background texture.
    pub texture_amplitude: f64,
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            seed,
            jitter: 0.10,
            structures: default_structures(),
            background_peak: 60.0,
            texture_amplitude: 8.0,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::param("jitter", format!("must lie in [0, 0.5), got {}", self.jitter)));
        }
        if self.dims.is_empty() {
            return Err(Error::param("dims", "zero dimension"));
        }
        for l in CHAMBER_LABELS {
            if !self.structures.iter().any(|s| s.label == l) {
                return Err(Error::param("structures", format!("label {l} missing")));
            }
        }
        if self.structures.iter().any(|s| s.label == 0) {
            return Err(Error::param("structures", "label 0 is reserved for background"));
        }
        Ok(())
    }
}

/// Left ventricle, right ventricle, left atrium and a reward-irrelevant
/// spine-like decoy. The chamber centroids span a plane oblique to every axis.
pub fn default_structures() -> Vec<StructureSpec> {
    let s = |label, name: &str, center, semi_axes, intensity| StructureSpec {
        label,
        name: name.to_string(),
        center,
        semi_axes,
        intensity,
    };
    vec![
        s(1, "LV", [0.56, 0.52, 0.45], [0.16, 0.13, 0.14], 170.0),
        s(2, "RV", [0.36, 0.60, 0.56], [0.11, 0.09, 0.11], 130.0),
        s(3, "LA", [0.62, 0.34, 0.62], [0.09, 0.09, 0.08], 100.0),
        s(4, "spine", [0.50, 0.85, 0.50], [0.07, 0.07, 0.35], 220.0),
    ]
}

/// A realized structure in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub label: u8,
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub intensity: f64,
}

impl Ellipsoid {
    /// Inside iff the normalized quadratic form is at most 1.
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let mut q = 0.0;
        for k in 0..3 {
            let d = (p[k] - self.center[k]) / self.semi_axes[k];
            q += d * d;
        }
        q <= 1.0
    }

    fn fits(&self, dims: Dims) -> bool {
        let ext = dims.as_array();
        (0..3).all(|k| {
            self.center[k] - self.semi_axes[k] >= 0.0
                && self.center[k] + self.semi_axes[k] <= (ext[k] - 1) as f64
        })
    }
}

/// Real-valued voxel coordinate of a structure's centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid(pub Vec3);

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub structures: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn goal_plane(&self) -> Result<Plane> {
        goal_plane(&self.labels, CHAMBER_LABELS)
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut last_reason = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = SplitMix64::new(derive_seed(spec.seed, attempt));
        let structures = realize(spec, &mut rng);
        if let Some(bad) = structures.iter().find(|e| !e.fits(spec.dims)) {
            last_reason = format!("label {} leaves the volume", bad.label);
            continue;
        }
        let labels = rasterize(spec.dims, &structures);
        if !labels.is_contiguous() {
            last_reason = "a structure was fully overwritten".into();
            continue;
        }
        match chamber_centroids(&labels) {
            Ok(_) => {}
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        }
        let texture = Texture::new(&mut rng, spec.dims);
        let volume = paint(spec, &labels, &structures, &texture);
        return Ok(Phantom {
            volume,
            labels,
            structures,
        });
    }
    Err(Error::Generation(format!(
        "no valid phantom after {MAX_ATTEMPTS} attempts: {last_reason}"
    )))
}

fn realize(spec: &PhantomSpec, rng: &mut SplitMix64) -> Vec<Ellipsoid> {
    let j = spec.jitter;
    let ext = spec.dims.as_array();
    let mut factor = || 1.0 - j + 2.0 * j * rng.next_f64();
    spec.structures
        .iter()
        .map(|s| {
            let center = [0, 1, 2].map(|k| s.center[k] * (ext[k] - 1) as f64 * factor());
            let semi_axes = [0, 1, 2].map(|k| s.semi_axes[k] * ext[k] as f64 * factor());
            Ellipsoid {
                label: s.label,
                center,
                semi_axes,
                intensity: s.intensity * factor(),
            }
        })
        .collect()
}

fn rasterize(dims: Dims, structures: &[Ellipsoid]) -> LabelVolume {
    LabelVolume::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        structures
            .iter()
            .rev()
            .find(|e| e.contains(p))
            .map_or(0, |e| e.label)
    })
    .expect("dims validated")
}

/// Low-frequency sinusoidal texture with seeded directions and phases.
struct Texture {
    waves: Vec<(Vec3, f64)>,
}

impl Texture {
    fn new(rng: &mut SplitMix64, dims: Dims) -> Self {
        let ext = dims.max_extent() as f64;
        let waves = (0..3)
            .map(|_| {
                let dir = [0; 3].map(|_: u8| rng.next_f64() * 2.0 - 1.0);
                let k = std::f64::consts::TAU * (1.0 + 2.0 * rng.next_f64()) / ext;
                let n = norm(dir).max(1e-6);
                (dir.map(|d| d / n * k), std::f64::consts::TAU * rng.next_f64())
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: Vec3) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum();
        s / self.waves.len() as f64
    }
}

fn paint(spec: &PhantomSpec, labels: &LabelVolume, structures: &[Ellipsoid], texture: &Texture) -> Volume {
    let dims = spec.dims;
    let c = dims.as_array().map(|n| (n as f64 - 1.0) / 2.0);
    let r_max = norm(c).max(1.0);
    let mut mean_of = [0.0f64; 256];
    for e in structures {
        mean_of[e.label as usize] = e.intensity;
    }
    Volume::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let r = norm([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        let background = spec.background_peak * (1.0 - r / r_max) + spec.texture_amplitude * texture.at(p);
        quantize_u8(mean_of[labels.get(x, y, z) as usize] + background)
    })
    .expect("dims validated")
}

pub fn centroid(l: &LabelVolume, label: u8) -> Result<Centroid> {
    let dims = l.dims();
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &v) in l.data().iter().enumerate() {
        if v == label {
            let [x, y, z] = dims.coords(i);
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::LabelNotFound(label));
    }
    Ok(Centroid(sum.map(|s| s / n as f64)))
}

fn chamber_centroids(l: &LabelVolume) -> Result<[Centroid; 3]> {
    let cs = [
        centroid(l, CHAMBER_LABELS[0])?,
        centroid(l, CHAMBER_LABELS[1])?,
        centroid(l, CHAMBER_LABELS[2])?,
    ];
    let e1 = [0, 1, 2].map(|k| cs[1].0[k] - cs[0].0[k]);
    let e2 = [0, 1, 2].map(|k| cs[2].0[k] - cs[0].0[k]);
    if norm(cross(e1, e2)) < 1e-6 {
        return Err(Error::Degenerate("chamber centroids are collinear".into()));
    }
    Ok(cs)
}

/// Plane through the centroids of three labels.
pub fn goal_plane(l: &LabelVolume, labels: [u8; 3]) -> Result<Plane> {
    let c0 = centroid(l, labels[0])?;
    let c1 = centroid(l, labels[1])?;
    let c2 = centroid(l, labels[2])?;
    Plane::through(c0.0, c1.0, c2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_voxel_spec(dims: Dims, centers: [[usize; 3]; 3]) -> PhantomSpec {
        let ext = dims.as_array();
        let structures = centers
            .iter()
            .enumerate()
            .map(|(i, c)| StructureSpec {
                label: i as u8 + 1,
                name: format!("s{i}"),
                center: [0, 1, 2].map(|k| c[k] as f64 / (ext[k] - 1) as f64),
                semi_axes: [0.5 / ext[0] as f64; 3],
                intensity: 100.0,
            })
            .collect();
        PhantomSpec {
            structures,
            ..PhantomSpec::new(dims, 0).with_jitter(0.0)
        }
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::new(Dims::cube(24), 5).with_jitter(0.0);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.labels, b.labels);
        let spec = PhantomSpec::new(Dims::cube(24), 5);
        assert_eq!(generate(&spec).unwrap().volume, generate(&spec).unwrap().volume);
    }

    #[test]
    fn single_voxel_centroid() {
        let spec = single_voxel_spec(Dims::cube(17), [[8, 8, 8], [2, 3, 4], [12, 5, 9]]);
        let p = generate(&spec).unwrap();
        assert_eq!(p.labels.count(1), 1);
        assert_eq!(centroid(&p.labels, 1).unwrap(), Centroid([8.0, 8.0, 8.0]));
    }

    #[test]
    fn centroid_basics() {
        let mut l = LabelVolume::filled(Dims::cube(8), 0).unwrap();
        l.set(4, 5, 6, 1);
        assert_eq!(centroid(&l, 1).unwrap(), Centroid([4.0, 5.0, 6.0]));
        l.set(0, 0, 0, 2);
        l.set(2, 0, 0, 2);
        assert_eq!(centroid(&l, 2).unwrap(), Centroid([1.0, 0.0, 0.0]));
        assert!(matches!(centroid(&l, 3), Err(Error::LabelNotFound(3))));
    }

    #[test]
    fn goal_plane_known_cases() {
        let mut l = LabelVolume::filled(Dims::cube(8), 0).unwrap();
        l.set(0, 0, 0, 1);
        l.set(1, 0, 0, 2);
        l.set(0, 1, 0, 3);
        assert_eq!(goal_plane(&l, [1, 2, 3]).unwrap().coefficients(), [0.0, 0.0, 1.0, 0.0]);

        let mut l = LabelVolume::filled(Dims::cube(8), 0).unwrap();
        l.set(1, 1, 5, 1);
        l.set(6, 2, 5, 2);
        l.set(3, 7, 5, 3);
        let [a0, a1, a2, a3] = goal_plane(&l, [1, 2, 3]).unwrap().coefficients();
        assert_eq!((a0, a1), (0.0, 0.0));
        assert!((a2 * 5.0 + a3).abs() < 1e-12);

        let mut l = LabelVolume::filled(Dims::cube(8), 0).unwrap();
        l.set(1, 1, 1, 1);
        l.set(2, 2, 2, 2);
        l.set(3, 3, 3, 3);
        assert!(matches!(goal_plane(&l, [1, 2, 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn goal_plane_annihilates_centroids() {
        for seed in 0..10 {
            let p = generate(&PhantomSpec::new(Dims::cube(32), seed)).unwrap();
            let plane = p.goal_plane().unwrap();
            for l in CHAMBER_LABELS {
                let c = centroid(&p.labels, l).unwrap();
                assert!(plane.eval(c.0).abs() < 1e-9);
            }
            // Oblique to every axis.
            assert!(plane.normal().iter().all(|a| a.abs() > 1e-3), "{plane:?}");
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let spec = PhantomSpec::new(Dims::cube(16), 0).with_jitter(0.5);
        assert!(generate(&spec).is_err());
        let mut spec = PhantomSpec::new(Dims::cube(16), 0);
        spec.structures.retain(|s| s.label != 2);
        assert!(generate(&spec).is_err());
        let spec = single_voxel_spec(Dims::cube(9), [[1, 1, 1], [2, 2, 2], [3, 3, 3]]);
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
    }
}
