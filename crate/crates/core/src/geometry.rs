//! Plane algebra and nearest-neighbour oblique slicing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::image::Image2D;
use crate::volume::{Dims, VoxelGrid};
use crate::{round_half_up, Error, Result};

pub type Point = [i64; 3];
pub type Vec3 = [f64; 3];

/// Smallest cross-product norm accepted as a non-degenerate triangle.
pub const DEGENERACY_EPS: f64 = 1e-9;

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn cross_i(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub_i(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn to_vec3(p: Point) -> Vec3 {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Plane `a0*x + a1*y + a2*z + a3 = 0` in canonical form: unit L1 norm and
/// the first nonzero coefficient positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Plane([f64; 4]);

impl Plane {
    /// Normalizes and sign-canonicalizes arbitrary coefficients.
    pub fn from_coefficients(c: [f64; 4]) -> Result<Self> {
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite coefficients {c:?}")));
        }
        let n = [c[0], c[1], c[2]];
        if n.iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate("plane normal is zero".into()));
        }
        let mut l1: f64 = c.iter().map(|x| x.abs()).sum();
        let mut c = c;
        if !l1.is_finite() {
            let m = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            c = c.map(|x| x / m);
            l1 = c.iter().map(|x| x.abs()).sum();
        }
        let mut a = c.map(|x| x / l1);
        if a[..3].iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(format!("plane normal vanishes after normalization: {c:?}")));
        }
        if a.iter().find(|&&x| x != 0.0).is_some_and(|&x| x < 0.0) {
            a = a.map(|x| -x);
        }
        // -0.0 would break bitwise comparisons between equal planes.
        Ok(Plane(a.map(|x| if x == 0.0 { 0.0 } else { x })))
    }

    /// Plane through three integer voxel positions.
    pub fn from_points(p0: Point, p1: Point, p2: Point) -> Result<Self> {
        // Integer arithmetic keeps the result independent of point order up to sign.
        let n = cross_i(sub_i(p1, p0), sub_i(p2, p0));
        if n == [0, 0, 0] {
            return Err(Error::Degenerate(format!("collinear points {p0:?} {p1:?} {p2:?}")));
        }
        let a3 = -(n[0] * p0[0] + n[1] * p0[1] + n[2] * p0[2]);
        Self::from_coefficients([n[0] as f64, n[1] as f64, n[2] as f64, a3 as f64])
    }

    /// Plane through three real-valued points, e.g. structure centroids.
    pub fn through(p0: Vec3, p1: Vec3, p2: Vec3) -> Result<Self> {
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let n = cross(e1, e2);
        if !(norm(n) >= DEGENERACY_EPS) {
            return Err(Error::Degenerate(format!("collinear points {p0:?} {p1:?} {p2:?}")));
        }
        Self::from_coefficients([n[0], n[1], n[2], -dot(n, p0)])
    }

    pub fn coefficients(&self) -> [f64; 4] {
        self.0
    }

    pub fn normal(&self) -> Vec3 {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn offset(&self) -> f64 {
        self.0[3]
    }

    /// Signed residual `a . (p, 1)`.
    pub fn eval(&self, p: Vec3) -> f64 {
        dot(self.normal(), p) + self.0[3]
    }

    /// Euclidean distance between coefficient vectors.
    pub fn distance(&self, other: &Plane) -> f64 {
        self.0
            .iter()
            .zip(other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<[f64; 4]> for Plane {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Plane::from_coefficients(c)
    }
}

impl From<Plane> for [f64; 4] {
    fn from(p: Plane) -> Self {
        p.0
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a},{b},{c},{d}")
    }
}

/// Parses `a0,a1,a2,a3`; the result is canonicalized.
impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::param("plane", format!("expected 4 comma-separated numbers, got {s:?}")));
        }
        let mut c = [0.0; 4];
        for (slot, part) in c.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::param("plane", format!("not a number: {part:?}")))?;
        }
        Plane::from_coefficients(c)
    }
}

pub fn plane_distance(p: &Plane, q: &Plane) -> f64 {
    p.distance(q)
}

pub fn triangle_area(p0: Point, p1: Point, p2: Point) -> f64 {
    let n = cross_i(sub_i(p1, p0), sub_i(p2, p0));
    0.5 * norm(to_vec3(n))
}

/// Sampling lattice on a plane: pixel `(i, j)` sits at
/// `origin + (i - width/2) u + (j - height/2) v` (integer halves).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub width: usize,
    pub height: usize,
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
}

impl SliceGrid {
    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        let di = i as f64 - (self.width / 2) as f64;
        let dj = j as f64 - (self.height / 2) as f64;
        [
            self.origin[0] + di * self.u[0] + dj * self.v[0],
            self.origin[1] + di * self.u[1] + dj * self.v[1],
            self.origin[2] + di * self.u[2] + dj * self.v[2],
        ]
    }
}

pub fn slice_grid(p: &Plane, dims: Dims) -> SliceGrid {
    let n = p.normal();
    // Standard axis most orthogonal to n; first index wins ties.
    let axis = (0..3)
        .min_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()))
        .unwrap();
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let u = normalize(cross(e, n));
    let v = normalize(cross(n, u));

    let c = [
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    ];
    let t = (dot(n, c) + p.offset()) / dot(n, n);
    let origin = [c[0] - t * n[0], c[1] - t * n[1], c[2] - t * n[2]];
    let side = dims.max_extent();
    SliceGrid {
        width: side,
        height: side,
        origin,
        u,
        v,
    }
}

/// Voxel hit by pixel `(i, j)` under nearest-neighbour rounding, if in bounds.
#[inline]
pub fn nearest_voxel(g: &SliceGrid, dims: Dims, i: usize, j: usize) -> Option<usize> {
    let p = g.point(i, j);
    let r = p.map(|c| round_half_up(c) as i64);
    dims.contains(r)
        .then(|| dims.index(r[0] as usize, r[1] as usize, r[2] as usize))
}

/// Nearest-neighbour slice of any 8-bit grid; out-of-volume pixels are 0.
pub fn sample_slice<G: VoxelGrid + ?Sized>(vol: &G, g: &SliceGrid) -> Image2D {
    let dims = vol.dims();
    let voxels = vol.voxels();
    let mut data = Vec::with_capacity(g.width * g.height);
    for j in 0..g.height {
        for i in 0..g.width {
            data.push(nearest_voxel(g, dims, i, j).map_or(0, |k| voxels[k]));
        }
    }
    Image2D {
        width: g.width,
        height: g.height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::Volume;
    use proptest::prelude::*;

    fn close(a: [f64; 4], b: [f64; 4]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn known_planes() {
        let p = Plane::from_points([0, 0, 0], [1, 0, 0], [0, 1, 0]).unwrap();
        assert_eq!(p.coefficients(), [0.0, 0.0, 1.0, 0.0]);
        let p = Plane::from_points([1, 0, 0], [0, 1, 0], [0, 0, 1]).unwrap();
        assert!(close(p.coefficients(), [0.25, 0.25, 0.25, -0.25]));
        assert!(matches!(
            Plane::from_points([0, 0, 0], [1, 1, 1], [2, 2, 2]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sign_rule_extends_past_a0() {
        let p = Plane::from_coefficients([0.0, -2.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.coefficients(), [0.0, 0.5, -0.25, -0.25]);
        assert!(Plane::from_coefficients([0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn distances() {
        let z = Plane::from_coefficients([0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = Plane::from_coefficients([0.0, 1.0, 0.0, 0.0]).unwrap();
        let d = Plane::from_coefficients([1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(plane_distance(&z, &z), 0.0);
        assert!((plane_distance(&z, &y) - 2f64.sqrt()).abs() < 1e-15);
        // (0.25^2 * 2 + 0.75^2 + 0.25^2) = 0.75
        assert!((plane_distance(&z, &d) - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn areas() {
        assert_eq!(triangle_area([0, 0, 0], [1, 0, 0], [0, 1, 0]), 0.5);
        assert_eq!(triangle_area([0, 0, 0], [2, 0, 0], [0, 2, 0]), 2.0);
        assert_eq!(triangle_area([1, 1, 1], [2, 2, 2], [5, 5, 5]), 0.0);
    }

    #[test]
    fn parse_plane() {
        let p: Plane = "0, 0, 2, -1".parse().unwrap();
        assert!(close(p.coefficients(), [0.0, 0.0, 2.0 / 3.0, -1.0 / 3.0]));
        assert!("1,2,3".parse::<Plane>().is_err());
        assert!("a,b,c,d".parse::<Plane>().is_err());
        assert!("0,0,0,1".parse::<Plane>().is_err());
        assert!("nan,0,1,0".parse::<Plane>().is_err());
    }

    #[test]
    fn axis_aligned_grid_stays_on_its_slice() {
        for k in 0..8 {
            let p = Plane::from_coefficients([0.0, 0.0, 1.0, -(k as f64)]).unwrap();
            let dims = Dims::new(8, 10, 8);
            let g = slice_grid(&p, dims);
            assert_eq!(g.width, 10);
            for j in 0..g.height {
                for i in 0..g.width {
                    assert_eq!(round_half_up(g.point(i, j)[2]), k as f64);
                }
            }
            let vol = Volume::from_fn(dims, |_, _, z| z as u8).unwrap();
            let img = sample_slice(&vol, &g);
            let in_bounds = (0..g.height)
                .flat_map(|j| (0..g.width).map(move |i| (i, j)))
                .filter(|&(i, j)| nearest_voxel(&g, dims, i, j).is_some());
            for (i, j) in in_bounds {
                assert_eq!(img.get(i, j), k as u8);
            }
        }
    }

    #[test]
    fn constant_volume_slices_constant() {
        let dims = Dims::cube(12);
        let vol = Volume::filled(dims, 9).unwrap();
        let p = Plane::from_points([1, 2, 3], [9, 4, 1], [5, 11, 8]).unwrap();
        let g = slice_grid(&p, dims);
        let img = sample_slice(&vol, &g);
        for j in 0..g.height {
            for i in 0..g.width {
                let expect = if nearest_voxel(&g, dims, i, j).is_some() { 9 } else { 0 };
                assert_eq!(img.get(i, j), expect);
            }
        }
        assert!(img.data.contains(&9));
    }

    #[test]
    fn random_grids_are_orthonormal_and_on_plane() {
        let mut rng = SplitMix64::new(17);
        let dims = Dims::new(32, 40, 24);
        for _ in 0..1000 {
            let c = [0; 4].map(|_: i32| rng.next_f64() * 2.0 - 1.0);
            let Ok(p) = Plane::from_coefficients(c) else { continue };
            let g = slice_grid(&p, dims);
            let n = p.normal();
            assert!(dot(g.u, g.v).abs() < 1e-9);
            assert!((norm(g.u) - 1.0).abs() < 1e-9);
            assert!((norm(g.v) - 1.0).abs() < 1e-9);
            assert!(dot(g.u, n).abs() < 1e-9);
            assert!(dot(g.v, n).abs() < 1e-9);
            assert!(p.eval(g.origin).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn permutation_and_scale_invariance(
            p0 in prop::array::uniform3(-20i64..20),
            p1 in prop::array::uniform3(-20i64..20),
            p2 in prop::array::uniform3(-20i64..20),
        ) {
            prop_assume!(triangle_area(p0, p1, p2) > 0.0);
            let base = Plane::from_points(p0, p1, p2).unwrap();
            for (a, b, c) in [(p0, p2, p1), (p1, p0, p2), (p1, p2, p0), (p2, p0, p1), (p2, p1, p0)] {
                prop_assert_eq!(Plane::from_points(a, b, c).unwrap(), base);
            }
            let double = |q: Point| [0, 1, 2].map(|k| p0[k] + 2 * (q[k] - p0[k]));
            prop_assert_eq!(Plane::from_points(p0, double(p1), double(p2)).unwrap(), base);
            let again = Plane::from_coefficients(base.coefficients()).unwrap();
            prop_assert!(close(again.coefficients(), base.coefficients()));
        }

        #[test]
        fn distance_is_a_metric(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let mut plane = || loop {
                let c = [0; 4].map(|_: i32| rng.next_f64() * 2.0 - 1.0);
                if let Ok(p) = Plane::from_coefficients(c) { return p; }
            };
            let (a, b, c) = (plane(), plane(), plane());
            prop_assert_eq!(a.distance(&b), b.distance(&a));
            prop_assert!(a.distance(&c) <= a.distance(&b) + b.distance(&c) + 1e-12);
            prop_assert!(a.distance(&b) >= 0.0);
        }
    }
}
