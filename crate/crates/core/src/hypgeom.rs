//! Upper half-plane, unit disk and the modular group SL(2,ℤ).
//!
//! Convention: a matrix g = (a b; c d) acts by g·z = (az+b)/(cz+d) and the
//! automorphy factor is J(g,z) = cz+d. The disk is reached through the Cayley
//! map φ(z) = (z−i)/(z+i).

use std::cmp::Ordering;
use std::fmt;

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cabs, cone, cx, Cx, Real};

/// Default bound on reduction sweeps.
pub const DEFAULT_REDUCTION_LIMIT: usize = 200;
/// Default cap on enumerated group elements.
pub const DEFAULT_GROUP_CAP: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point is not in the upper half-plane (Im z = {0})")]
    NotInHalfPlane(f64),
    #[error("point is not in the open unit disk (|w| = {0})")]
    NotInDisk(f64),
    #[error("matrix has determinant {0}, expected 1")]
    NotUnimodular(f64),
    #[error("integer overflow in the group law")]
    Overflow,
    #[error("reduction did not terminate after {0} sweeps")]
    IterationLimit(usize),
    #[error("enumeration would exceed the cap of {cap} elements")]
    CapacityExceeded { cap: usize },
}

/// A point z = x + iy with y > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HPoint<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> HPoint<T> {
    pub fn new(x: T, y: T) -> Result<Self, GeomError> {
        if y > T::zero() && x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(GeomError::NotInHalfPlane(y.f64()))
        }
    }

    pub fn from_complex(z: Cx<T>) -> Result<Self, GeomError> {
        Self::new(z.re, z.im)
    }

    pub fn i() -> Self {
        Self { x: T::zero(), y: T::one() }
    }

    #[inline]
    pub fn z(&self) -> Cx<T> {
        cx(self.x, self.y)
    }

    /// Cayley image w = (z−i)/(z+i).
    pub fn to_disk(&self) -> DPoint<T> {
        let z = self.z();
        let i = cx(T::zero(), T::one());
        DPoint { w: (z - i) / (z + i) }
    }

    /// 1 − |φ(z)|², computed as 4y/|z+i|² to keep accuracy near the boundary.
    pub fn disk_defect(&self) -> T {
        let d = self.x * self.x + (self.y + T::one()) * (self.y + T::one());
        T::lit(4.0) * self.y / d
    }

    /// Membership in the closed standard fundamental domain, with tolerance.
    pub fn in_fundamental_domain(&self, tol: T) -> bool {
        self.x.abs() <= T::lit(0.5) + tol && self.x * self.x + self.y * self.y >= T::one() - tol
    }
}

/// A point of the open unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DPoint<T> {
    pub w: Cx<T>,
}

impl<T: Real> DPoint<T> {
    pub fn new(w: Cx<T>) -> Result<Self, GeomError> {
        let r = cabs(w);
        if r < T::one() {
            Ok(Self { w })
        } else {
            Err(GeomError::NotInDisk(r.f64()))
        }
    }

    /// Inverse Cayley map z = i(1+w)/(1−w).
    pub fn to_half_plane(&self) -> HPoint<T> {
        let one = cone::<T>();
        let i = cx(T::zero(), T::one());
        let z = i * (one + self.w) / (one - self.w);
        let y = (T::one() - self.w.norm_sqr()) / (one - self.w).norm_sqr();
        HPoint { x: z.re, y }
    }
}

/// Hyperbolic distance on ℍ (curvature −1).
pub fn distance<T: Real>(z: &HPoint<T>, w: &HPoint<T>) -> T {
    let num = (z.x - w.x) * (z.x - w.x) + (z.y - w.y) * (z.y - w.y);
    let arg = T::one() + num / (T::lit(2.0) * z.y * w.y);
    arg.max(T::one()).acosh()
}

/// Anything with real matrix entries (a, b, c, d) acting by Möbius maps.
pub trait Mobius<T: Real> {
    fn entries(&self) -> [T; 4];
}

/// Element of SL(2,ℤ) with exact integer entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sl2z {
    pub a: i64,
    pub b: i64,
    pub c: i64,
    pub d: i64,
}

impl Sl2z {
    pub const IDENTITY: Sl2z = Sl2z { a: 1, b: 0, c: 0, d: 1 };
    pub const S: Sl2z = Sl2z { a: 0, b: -1, c: 1, d: 0 };
    pub const T: Sl2z = Sl2z { a: 1, b: 1, c: 0, d: 1 };

    pub fn new(a: i64, b: i64, c: i64, d: i64) -> Result<Self, GeomError> {
        let det = a
            .checked_mul(d)
            .zip(b.checked_mul(c))
            .and_then(|(ad, bc)| ad.checked_sub(bc))
            .ok_or(GeomError::Overflow)?;
        if det == 1 {
            Ok(Self { a, b, c, d })
        } else {
            Err(GeomError::NotUnimodular(det as f64))
        }
    }

    /// T^n.
    pub fn translation(n: i64) -> Self {
        Self { a: 1, b: n, c: 0, d: 1 }
    }

    pub fn mul(&self, o: &Sl2z) -> Result<Sl2z, GeomError> {
        let f = |x: i64, y: i64, u: i64, v: i64| -> Option<i64> {
            x.checked_mul(y)?.checked_add(u.checked_mul(v)?)
        };
        let e = || GeomError::Overflow;
        Ok(Sl2z {
            a: f(self.a, o.a, self.b, o.c).ok_or_else(e)?,
            b: f(self.a, o.b, self.b, o.d).ok_or_else(e)?,
            c: f(self.c, o.a, self.d, o.c).ok_or_else(e)?,
            d: f(self.c, o.b, self.d, o.d).ok_or_else(e)?,
        })
    }

    pub fn inverse(&self) -> Sl2z {
        Sl2z { a: self.d, b: -self.b, c: -self.c, d: self.a }
    }

    pub fn neg(&self) -> Sl2z {
        Sl2z { a: -self.a, b: -self.b, c: -self.c, d: -self.d }
    }

    pub fn height(&self) -> i64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs())
    }

    /// a² + b² + c² + d² = 2 cosh d(i, γi).
    pub fn frobenius_sq(&self) -> i64 {
        self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d
    }

    /// Representative of ±γ with c > 0, or c = 0 and d > 0.
    pub fn psl_canonical(&self) -> Sl2z {
        if self.c < 0 || (self.c == 0 && self.d < 0) {
            self.neg()
        } else {
            *self
        }
    }

    fn order_key(&self) -> (i64, i64, i64, i64) {
        (self.c, self.d, self.a, self.b)
    }
}

impl Ord for Sl2z {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for Sl2z {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Sl2z {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} {}; {} {})", self.a, self.b, self.c, self.d)
    }
}

impl<T: Real> Mobius<T> for Sl2z {
    fn entries(&self) -> [T; 4] {
        [T::int(self.a), T::int(self.b), T::int(self.c), T::int(self.d)]
    }
}

/// Element of SL(2,ℝ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sl2r<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> Sl2r<T> {
    pub fn new(a: T, b: T, c: T, d: T) -> Result<Self, GeomError> {
        let det = a * d - b * c;
        if (det - T::one()).abs() <= T::lit(1e-12).max(T::default_epsilon() * T::lit(16.0)) {
            Ok(Self { a, b, c, d })
        } else {
            Err(GeomError::NotUnimodular(det.f64()))
        }
    }

    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero(), c: T::zero(), d: T::one() }
    }

    /// Rotation k_θ fixing i.
    pub fn rotation(theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self { a: c, b: s, c: -s, d: c }
    }

    pub fn mul(&self, o: &Self) -> Self {
        Self {
            a: self.a * o.a + self.b * o.c,
            b: self.a * o.b + self.b * o.d,
            c: self.c * o.a + self.d * o.c,
            d: self.c * o.b + self.d * o.d,
        }
    }

    pub fn inverse(&self) -> Self {
        Self { a: self.d, b: -self.b, c: -self.c, d: self.a }
    }
}

impl<T: Real> From<&Sl2z> for Sl2r<T> {
    fn from(g: &Sl2z) -> Self {
        let [a, b, c, d] = Mobius::<T>::entries(g);
        Self { a, b, c, d }
    }
}

impl<T: Real> Mobius<T> for Sl2r<T> {
    fn entries(&self) -> [T; 4] {
        [self.a, self.b, self.c, self.d]
    }
}

/// g·z = (az+b)/(cz+d); the imaginary part is formed as y/|cz+d|².
pub fn mobius_apply<T: Real, G: Mobius<T>>(g: &G, z: &HPoint<T>) -> HPoint<T> {
    let [a, b, c, d] = g.entries();
    let zc = z.z();
    let den = zc * c + cx(d, T::zero());
    let num = zc * a + cx(b, T::zero());
    let q = num / den;
    HPoint { x: q.re, y: z.y / den.norm_sqr() }
}

/// J(g,z) = cz + d.
pub fn automorphy_j<T: Real, G: Mobius<T>>(g: &G, z: &HPoint<T>) -> Cx<T> {
    let [_, _, c, d] = g.entries();
    z.z() * c + cx(d, T::zero())
}

/// Derivative of z ↦ g·z, that is J(g,z)⁻².
pub fn jacobian_jd<T: Real, G: Mobius<T>>(g: &G, z: &HPoint<T>) -> Cx<T> {
    let j = automorphy_j(g, z);
    cone::<T>() / (j * j)
}

/// Disk form of g: the matrix (α β; β̄ ᾱ) = C g C⁻¹ with C the Cayley matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskMap<T> {
    pub alpha: Cx<T>,
    pub beta: Cx<T>,
}

impl<T: Real> DiskMap<T> {
    pub fn of<G: Mobius<T>>(g: &G) -> Self {
        let [a, b, c, d] = g.entries();
        let h = T::lit(0.5);
        Self {
            alpha: cx((a + d) * h, (b - c) * h),
            beta: cx((a - d) * h, -(b + c) * h),
        }
    }

    /// w ↦ (αw + β)/(β̄w + ᾱ).
    pub fn apply(&self, w: Cx<T>) -> Cx<T> {
        (self.alpha * w + self.beta) / (self.beta.conj() * w + self.alpha.conj())
    }

    /// Disk Jacobian J_𝔻(g,w) = (β̄w + ᾱ)⁻².
    pub fn jacobian(&self, w: Cx<T>) -> Cx<T> {
        let j = self.beta.conj() * w + self.alpha.conj();
        cone::<T>() / (j * j)
    }

    /// |β|/|α|, the contraction ratio governing series expansions.
    pub fn ratio(&self) -> T {
        cabs(self.beta) / cabs(self.alpha)
    }
}

/// Generator letter of a reduction word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    S,
    T(i64),
}

impl Generator {
    pub fn matrix(&self) -> Sl2z {
        match *self {
            Generator::S => Sl2z::S,
            Generator::T(n) => Sl2z::translation(n),
        }
    }
}

/// Outcome of reducing a point into the fundamental domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionResult<T> {
    pub zstar: HPoint<T>,
    /// γ with γ·z = z*.
    pub gamma: Sl2z,
    /// Letters applied in order: z* = g_k ⋯ g_1 · z with `word[0] = g_1`.
    pub word: Vec<Generator>,
}

/// Reduces z into the closed fundamental domain with the default sweep limit.
pub fn reduce_to_fundamental<T: Real>(z: &HPoint<T>) -> Result<ReductionResult<T>, GeomError> {
    reduce_with_limit(z, DEFAULT_REDUCTION_LIMIT)
}

/// Reduction loop z ← z − ⌊Re z + 1/2⌋, z ← −1/z while |z| < 1.
///
/// Boundary ties resolve to Re z* ≤ 0: the translation step maps Re z = 1/2
/// to −1/2, and a point on the unit arc with Re z > 0 is sent through S.
pub fn reduce_with_limit<T: Real>(
    z: &HPoint<T>,
    limit: usize,
) -> Result<ReductionResult<T>, GeomError> {
    let eps = T::lit(1e-13);
    let half = T::lit(0.5);
    let mut p = *z;
    let mut gamma = Sl2z::IDENTITY;
    let mut word = Vec::new();
    let mut done = false;
    for _ in 0..limit {
        let n = (p.x + half).floor();
        if n != T::zero() {
            let k = n.to_i64().ok_or(GeomError::Overflow)?;
            p.x -= n;
            gamma = Sl2z::translation(-k).mul(&gamma)?;
            word.push(Generator::T(-k));
        }
        let r2 = p.x * p.x + p.y * p.y;
        if r2 < T::one() - eps {
            p = HPoint { x: -p.x / r2, y: p.y / r2 };
            gamma = Sl2z::S.mul(&gamma)?;
            word.push(Generator::S);
        } else {
            done = true;
            break;
        }
    }
    if !done {
        return Err(GeomError::IterationLimit(limit));
    }
    if p.x > T::zero() && p.x * p.x + p.y * p.y < T::one() + eps {
        p = HPoint { x: -p.x, y: p.y };
        gamma = Sl2z::S.mul(&gamma)?;
        word.push(Generator::S);
    }
    Ok(ReductionResult { zstar: p, gamma, word })
}

/// All γ ∈ SL(2,ℤ) with max(|a|,|b|,|c|,|d|) ≤ height, ordered by (c, d, a, b).
pub fn enumerate_gamma(height: i64, cap: usize) -> Result<Vec<Sl2z>, GeomError> {
    let h = height.max(0);
    let mut out = Vec::new();
    for c in -h..=h {
        for d in -h..=h {
            if c.gcd(&d) != 1 {
                continue;
            }
            for (a, b) in solutions_for_row(c, d, |a, b| a.abs() <= h && b.abs() <= h, h) {
                out.push(Sl2z { a, b, c, d });
                if out.len() > cap {
                    return Err(GeomError::CapacityExceeded { cap });
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// One representative of each ±γ with d(i, γ·i) ≤ radius, ordered by (c, d, a, b).
///
/// The bound is a² + b² + c² + d² ≤ 2 cosh(radius).
pub fn enumerate_psl_ball(radius: f64, cap: usize) -> Result<Vec<Sl2z>, GeomError> {
    let bound = (2.0 * radius.cosh()).floor() as i64;
    let side = ((bound as f64).sqrt().floor() as i64).max(1);
    let mut out = Vec::new();
    for c in 0..=side {
        for d in -side..=side {
            if (c == 0 && d <= 0) || c.gcd(&d) != 1 || c * c + d * d > bound {
                continue;
            }
            let rest = bound - c * c - d * d;
            for (a, b) in solutions_for_row(c, d, |a, b| a * a + b * b <= rest, side) {
                out.push(Sl2z { a, b, c, d });
                if out.len() > cap {
                    return Err(GeomError::CapacityExceeded { cap });
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Integer pairs (a, b) with ad − bc = 1 and |a|, |b| ≤ reach that pass `keep`.
fn solutions_for_row(
    c: i64,
    d: i64,
    keep: impl Fn(i64, i64) -> bool,
    reach: i64,
) -> Vec<(i64, i64)> {
    let mut sols = Vec::new();
    if c == 0 {
        // d = ±1, a = d, b free.
        for b in -reach..=reach {
            if keep(d, b) {
                sols.push((d, b));
            }
        }
        return sols;
    }
    // Particular solution of a d − b c = 1 via the extended gcd.
    let e = d.extended_gcd(&(-c));
    let (a0, b0) = (e.x * e.gcd, e.y * e.gcd);
    // General solution (a0 + t c, b0 + t d); scan the window of t that keeps |a| ≤ reach.
    let ac = c.abs();
    let lo = Integer::div_floor(&(-reach - a0), &ac) - 1;
    let hi = Integer::div_floor(&(reach - a0), &ac) + 1;
    for s in lo..=hi {
        let t = if c > 0 { s } else { -s };
        let (a, b) = (a0 + t * c, b0 + t * d);
        if a.abs() <= reach && b.abs() <= reach && keep(a, b) {
            sols.push((a, b));
        }
    }
    sols
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(x: f64, y: f64) -> HPoint<f64> {
        HPoint::new(x, y).unwrap()
    }

    #[test]
    fn mobius_examples() {
        let z = hp(2.0, 3.0);
        assert_eq!(mobius_apply(&Sl2z::IDENTITY, &z), z);
        let i = mobius_apply(&Sl2z::S, &hp(0.0, 1.0));
        assert_relative_eq!(i.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(i.y, 1.0, epsilon = 1e-15);
        let t = mobius_apply(&Sl2z::T, &hp(0.3, 0.7));
        assert_relative_eq!(t.x, 1.3, epsilon = 1e-15);
        assert_relative_eq!(t.y, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn cocycle_for_s_and_t() {
        let z = hp(0.2, 1.1);
        let st = Sl2z::S.mul(&Sl2z::T).unwrap();
        let lhs = automorphy_j(&st, &z);
        let rhs = automorphy_j(&Sl2z::S, &mobius_apply(&Sl2z::T, &z)) * automorphy_j(&Sl2z::T, &z);
        assert!((lhs - rhs).norm() < 1e-12);
        assert_eq!(automorphy_j(&Sl2z::S, &z), z.z());
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let z = hp(0.0, 1.0);
        let h = 1e-5;
        let f = |w: Cx<f64>| -cone::<f64>() / w;
        let fd = (f(z.z() + cx(h, 0.0)) - f(z.z() - cx(h, 0.0))) / cx(2.0 * h, 0.0);
        assert!((fd - jacobian_jd(&Sl2z::S, &z)).norm() < 1e-8);
        assert_eq!(jacobian_jd(&Sl2z::T, &hp(0.4, 2.0)), cone());
    }

    #[test]
    fn cayley_roundtrip() {
        let z = hp(-0.7, 0.35);
        let back = z.to_disk().to_half_plane();
        assert_relative_eq!(back.x, z.x, epsilon = 1e-14);
        assert_relative_eq!(back.y, z.y, epsilon = 1e-14);
        assert_relative_eq!(z.disk_defect(), 1.0 - z.to_disk().w.norm_sqr(), epsilon = 1e-15);
    }

    #[test]
    fn disk_map_conjugates_the_action() {
        let g = Sl2z::new(2, 1, 7, 4).unwrap();
        let z = hp(0.3, 0.8);
        let m = DiskMap::of(&g);
        let lhs = m.apply(z.to_disk().w);
        let rhs = mobius_apply(&g, &z).to_disk().w;
        assert!((lhs - rhs).norm() < 1e-13);
        // |J_𝔻| = (1 − |gw|²)/(1 − |w|²).
        let w = z.to_disk().w;
        let ratio = (1.0 - lhs.norm_sqr()) / (1.0 - w.norm_sqr());
        assert_relative_eq!(m.jacobian(w).norm(), ratio, max_relative = 1e-12);
    }

    #[test]
    fn reduction_examples() {
        let r = reduce_to_fundamental(&hp(0.0, 1.0)).unwrap();
        assert_eq!(r.gamma, Sl2z::IDENTITY);
        let r = reduce_to_fundamental(&hp(1.0, 1.0)).unwrap();
        assert_eq!(r.gamma, Sl2z::translation(-1));
        assert_relative_eq!(r.zstar.x, 0.0);
        let z = hp(0.1, 0.1);
        let r = reduce_to_fundamental(&z).unwrap();
        assert!(r.zstar.in_fundamental_domain(1e-12));
        let img = mobius_apply(&r.gamma, &z);
        assert!((img.z() - r.zstar.z()).norm() < 1e-10);
        let prod = r.word.iter().fold(Sl2z::IDENTITY, |acc, g| g.matrix().mul(&acc).unwrap());
        assert_eq!(prod, r.gamma);
    }

    #[test]
    fn reduction_tie_breaking_prefers_negative_real_part() {
        let r = reduce_to_fundamental(&hp(0.5, 2.0)).unwrap();
        assert_relative_eq!(r.zstar.x, -0.5);
        let t = std::f64::consts::FRAC_PI_3 * 0.5;
        let r = reduce_to_fundamental(&hp(t.sin(), t.cos())).unwrap();
        assert!(r.zstar.x <= 0.0);
        let rho = reduce_to_fundamental(&hp(0.5, 3f64.sqrt() / 2.0)).unwrap();
        assert_relative_eq!(rho.zstar.x, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn reduction_limit_is_reported() {
        assert_eq!(reduce_with_limit(&hp(0.3, 1e-9), 2), Err(GeomError::IterationLimit(2)));
    }

    #[test]
    fn enumeration_height_one_matches_brute_force() {
        let list = enumerate_gamma(1, DEFAULT_GROUP_CAP).unwrap();
        let mut brute = Vec::new();
        for a in -1..=1 {
            for b in -1..=1 {
                for c in -1..=1 {
                    for d in -1..=1 {
                        if a * d - b * c == 1 {
                            brute.push(Sl2z { a, b, c, d });
                        }
                    }
                }
            }
        }
        brute.sort();
        assert_eq!(list, brute);
        for g in [Sl2z::IDENTITY, Sl2z::S, Sl2z::T, Sl2z::T.inverse()] {
            assert!(list.contains(&g) && list.contains(&g.neg()));
        }
    }

    #[test]
    fn enumeration_brute_force_height_four() {
        let list = enumerate_gamma(4, DEFAULT_GROUP_CAP).unwrap();
        let mut count = 0;
        for a in -4i64..=4 {
            for b in -4i64..=4 {
                for c in -4i64..=4 {
                    for d in -4i64..=4 {
                        if a * d - b * c == 1 {
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(list.len(), count);
        let small = enumerate_gamma(2, DEFAULT_GROUP_CAP).unwrap();
        assert!(small.iter().all(|g| list.contains(g)));
        assert!(list.iter().all(|g| list.contains(&g.inverse()) && list.contains(&g.neg())));
    }

    #[test]
    fn enumeration_cap() {
        assert_eq!(
            enumerate_gamma(6, 10),
            Err(GeomError::CapacityExceeded { cap: 10 })
        );
    }

    #[test]
    fn psl_ball_matches_filtered_box() {
        let radius = 4.0;
        let ball = enumerate_psl_ball(radius, DEFAULT_GROUP_CAP).unwrap();
        let bound = (2.0 * radius.cosh()).floor() as i64;
        let mut filtered: Vec<Sl2z> = enumerate_gamma(8, DEFAULT_GROUP_CAP)
            .unwrap()
            .into_iter()
            .filter(|g| g.frobenius_sq() <= bound && g.psl_canonical() == *g)
            .collect();
        filtered.sort();
        assert_eq!(ball, filtered);
    }
}
