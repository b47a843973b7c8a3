//! Truncated weighted Bergman spaces H_m and their block sums.
//!
//! Every operator matrix lives in the disk model, in the orthonormal basis
//! e_n(w) = c_n wⁿ with c_n² = Γ(n+m)/(π n! Γ(m−1)). Half-plane functions are
//! transported by the unitary (U F)(z) = κ_m(z) F(φ(z)) where
//! κ_m(z) = 2^{m−1} e^{iπm/4} (z+i)^{−m}.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypgeom::{DiskMap, HPoint, Mobius};
use crate::scalar::{cis, cone, cpowi, creal, cx, czero, Cx, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BergmanError {
    #[error("weight {0} is below 2")]
    WeightTooSmall(u32),
    #[error("truncation must be positive")]
    EmptyTruncation,
    #[error("series expansion ratio {ratio} leaves no safe sampling circle")]
    SeriesDivergence { ratio: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed operator file: {0}")]
    Format(String),
}

/// Truncated model of H_m spanned by e_0, …, e_{N−1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BergmanModel<T> {
    pub m: u32,
    pub n: usize,
    norms: Vec<T>,
}

impl<T: Real> BergmanModel<T> {
    pub fn new(m: u32, n: usize) -> Result<Self, BergmanError> {
        if m < 2 {
            return Err(BergmanError::WeightTooSmall(m));
        }
        if n == 0 {
            return Err(BergmanError::EmptyTruncation);
        }
        Ok(Self { m, n, norms: basis_norms(m, n) })
    }

    /// c_m = (m−1)/(4π), so that K(z,z) = c_m y^{−m}.
    pub fn kernel_constant(&self) -> T {
        T::of(self.m as usize - 1) / (T::lit(4.0) * T::pi())
    }

    /// The normalizing constant c_n of e_n.
    pub fn norm(&self, n: usize) -> T {
        self.norms[n]
    }

    pub fn norms(&self) -> &[T] {
        &self.norms
    }

    /// e_n(w).
    pub fn basis_eval(&self, n: usize, w: Cx<T>) -> Cx<T> {
        cpowi(w, n as i32) * self.norms[n]
    }

    /// (e_0(w), …, e_{N−1}(w)).
    pub fn basis_vector(&self, w: Cx<T>) -> DVector<Cx<T>> {
        let mut out = DVector::from_element(self.n, czero());
        let mut p = cone::<T>();
        for k in 0..self.n {
            out[k] = p * self.norms[k];
            p *= w;
        }
        out
    }

    /// Disk kernel (m−1)/π · (1 − u v̄)^{−m}.
    pub fn kernel_disk(&self, u: Cx<T>, v: Cx<T>) -> Cx<T> {
        let c = T::of(self.m as usize - 1) / T::pi();
        cpowi(cone::<T>() - u * v.conj(), -(self.m as i32)) * c
    }

    /// Half-plane kernel c_m ((z − w̄)/(2i))^{−m}.
    pub fn kernel(&self, z: &HPoint<T>, w: &HPoint<T>) -> Cx<T> {
        let q = (z.z() - w.z().conj()) / cx(T::zero(), T::lit(2.0));
        cpowi(q, -(self.m as i32)) * self.kernel_constant()
    }

    /// κ_m(z) = 2^{m−1} e^{iπm/4} (z+i)^{−m}.
    pub fn cayley_factor(&self, z: &HPoint<T>) -> Cx<T> {
        cayley_factor(self.m as i32, z)
    }

    /// Coordinates of E_z: coeffs[n] = conj(κ_m(z) e_n(φ(z))), so ⟨f, E_z⟩ = (U f)(z).
    pub fn evaluation_vector(&self, z: &HPoint<T>) -> EvaluationVector<T> {
        let k = self.cayley_factor(z);
        let coeffs = self.basis_vector(z.to_disk().w).map(|e| (e * k).conj());
        EvaluationVector { point: *z, coeffs }
    }

    /// Coordinates of the disk evaluation functional: conj(e_n(w)).
    pub fn evaluation_vector_disk(&self, w: Cx<T>) -> DVector<Cx<T>> {
        self.basis_vector(w).map(|e| e.conj())
    }

    /// Value at z ∈ ℍ of the half-plane function with disk coordinates `f`.
    pub fn half_plane_value(&self, f: &DVector<Cx<T>>, z: &HPoint<T>) -> Cx<T> {
        let e = self.basis_vector(z.to_disk().w);
        e.dot(f) * self.cayley_factor(z)
    }

    /// Matrix of L_m(g): (L_m(g) f)(z) = f(g⁻¹z) J(g⁻¹, z)^{−m}.
    ///
    /// In the disk, with g⁻¹ = (α β; β̄ ᾱ), column k holds the Taylor
    /// coefficients of c_k s(w)^k (β̄w + ᾱ)^{−m}, s(w) = (αw+β)/(β̄w+ᾱ), divided
    /// by c_n. Coefficients are read off by FFT on several circles; each entry
    /// takes the circle with the smallest roundoff bound.
    pub fn discrete_series_matrix<G: Mobius<T>>(&self, g: &G) -> Result<DMatrix<Cx<T>>, BergmanError>
    where
        T: FftNum,
    {
        let [a, b, c, d] = g.entries();
        let inv = crate::hypgeom::Sl2r { a: d, b: -b, c: -c, d: a };
        discrete_series_disk(self, &DiskMap::of(&inv))
    }
}

/// c_n for n < N: c_0² = (m−1)/π, c_{n+1}² = c_n² (n+m)/(n+1).
fn basis_norms<T: Real>(m: u32, n: usize) -> Vec<T> {
    let mut sq = T::of(m as usize - 1) / T::pi();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(sq.sqrt());
        sq *= T::of(k + m as usize) / T::of(k + 1);
    }
    out
}

pub fn cayley_factor<T: Real>(m: i32, z: &HPoint<T>) -> Cx<T> {
    let zi = z.z() + cx(T::zero(), T::one());
    let phase = cis(T::pi() * T::of(m.rem_euclid(8) as usize) / T::lit(4.0));
    cpowi(zi, -m) * phase * T::lit(2.0).powi(m - 1)
}

fn discrete_series_disk<T: Real + FftNum>(
    model: &BergmanModel<T>,
    h: &DiskMap<T>,
) -> Result<DMatrix<Cx<T>>, BergmanError> {
    let n = model.n;
    let rho = h.ratio();
    let rf = rho.f64();
    if !(rf < 0.97) {
        return Err(BergmanError::SeriesDivergence { ratio: rf });
    }
    // Aliasing on the unit circle decays like ρ^{M−N}; ask for 1e−18.
    let need = if rf > 0.0 { n as f64 + 18.0 / -rf.log10() } else { 0.0 };
    let mut size = (4 * n).max(64).max(need.ceil() as usize).next_power_of_two();
    if size > 1 << 18 {
        return Err(BergmanError::SeriesDivergence { ratio: rf });
    }
    size = size.max(8);
    let radii = [1.0, 0.8, 0.6, 0.4, 0.25];
    let m = model.m as i32;
    let alpha_abs = crate::scalar::cabs(h.alpha).f64();
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(size);
    let mut best_err = vec![f64::INFINITY; n * n];
    let mut out = DMatrix::from_element(n, n, czero());
    for &r in &radii {
        let smax = (r + rf) / (1.0 + r * rf);
        let jmax = (alpha_abs * (1.0 - rf * r)).powi(-m);
        let rt = T::lit(r);
        let mut s = Vec::with_capacity(size);
        let mut j = Vec::with_capacity(size);
        for l in 0..size {
            let w = cis(T::two_pi() * T::of(l) / T::of(size)) * rt;
            let den = h.beta.conj() * w + h.alpha.conj();
            s.push((h.alpha * w + h.beta) / den);
            j.push(cpowi(den, -m));
        }
        let mut pow: Vec<Cx<T>> = vec![cone(); size];
        let mut buf = vec![czero::<T>(); size];
        for k in 0..n {
            for l in 0..size {
                buf[l] = pow[l] * j[l];
            }
            fft.process(&mut buf);
            let ck = model.norm(k).f64();
            let scale_k = ck * smax.powi(k as i32) * jmax * f64::EPSILON;
            let mut rpow = 1.0f64;
            for row in 0..n {
                let err = scale_k / (rpow * model.norm(row).f64());
                if err < best_err[row * n + k] {
                    best_err[row * n + k] = err;
                    let factor = model.norm(k) / (model.norm(row) * T::of(size) * T::lit(rpow));
                    out[(row, k)] = buf[row] * factor;
                }
                rpow *= r;
            }
            for l in 0..size {
                pow[l] *= s[l];
            }
        }
    }
    Ok(out)
}

/// The truncated vector E_z in the basis e_0, …, e_{N−1}.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationVector<T> {
    pub point: HPoint<T>,
    pub coeffs: DVector<Cx<T>>,
}

/// A block sum H_{m_1} ⊕ ⋯ ⊕ H_{m_n}, each block truncated at the same N.
#[derive(Clone, PartialEq)]
pub struct BlockModel<T> {
    pub blocks: Vec<Arc<BergmanModel<T>>>,
}

impl<T: Real> BlockModel<T> {
    pub fn new(weights: &[u32], n: usize) -> Result<Self, BergmanError> {
        if weights.is_empty() {
            return Err(BergmanError::ShapeMismatch("no blocks".into()));
        }
        let blocks = weights
            .iter()
            .map(|&m| BergmanModel::new(m, n).map(Arc::new))
            .collect::<Result<_, _>>()?;
        Ok(Self { blocks })
    }

    pub fn scalar(model: BergmanModel<T>) -> Self {
        Self { blocks: vec![Arc::new(model)] }
    }

    pub fn truncation(&self) -> usize {
        self.blocks[0].n
    }

    pub fn rank(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.len() * self.truncation()
    }

    pub fn weights(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.m).collect()
    }

    pub fn space(&self) -> Space {
        Space { weights: self.weights(), n: self.truncation() }
    }

    /// H_z = diag(y^{m_i/2}).
    pub fn block_twist(&self, z: &HPoint<T>) -> DVector<T> {
        DVector::from_iterator(
            self.rank(),
            self.blocks.iter().map(|b| z.y.powf(T::of(b.m as usize) / T::lit(2.0))),
        )
    }
}

impl<T: Real> fmt::Debug for BlockModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockModel({:?}, N={})", self.weights(), self.truncation())
    }
}

/// Tag of a (block) space: weights and common truncation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Space {
    pub weights: Vec<u32>,
    pub n: usize,
}

impl Space {
    pub fn scalar(m: u32, n: usize) -> Self {
        Self { weights: vec![m], n }
    }

    pub fn dim(&self) -> usize {
        self.weights.len() * self.n
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w: Vec<String> = self.weights.iter().map(|m| format!("H{m}")).collect();
        write!(f, "{}[N={}]", w.join("+"), self.n)
    }
}

/// A matrix between tagged spaces; products check tags at runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T: Real> {
    pub data: DMatrix<Cx<T>>,
    pub rows: Space,
    pub cols: Space,
}

impl<T: Real> OperatorMatrix<T> {
    pub fn new(data: DMatrix<Cx<T>>, rows: Space, cols: Space) -> Result<Self, BergmanError> {
        if data.nrows() != rows.dim() || data.ncols() != cols.dim() {
            return Err(BergmanError::ShapeMismatch(format!(
                "{}x{} matrix for {} <- {}",
                data.nrows(),
                data.ncols(),
                rows,
                cols
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn identity(space: Space) -> Self {
        let d = space.dim();
        Self { data: DMatrix::identity(d, d), rows: space.clone(), cols: space }
    }

    pub fn zeros(rows: Space, cols: Space) -> Self {
        Self { data: DMatrix::from_element(rows.dim(), cols.dim(), czero()), rows, cols }
    }

    /// self · other, requiring other's row space to be self's column space.
    pub fn compose(&self, other: &Self) -> Result<Self, BergmanError> {
        if self.cols != other.rows {
            return Err(BergmanError::ShapeMismatch(format!(
                "cannot compose ({} <- {}) with ({} <- {})",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self { data: &self.data * &other.data, rows: self.rows.clone(), cols: other.cols.clone() })
    }

    pub fn add(&self, other: &Self) -> Result<Self, BergmanError> {
        self.same_shape(other)?;
        Ok(Self { data: &self.data + &other.data, ..self.clone() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, BergmanError> {
        self.same_shape(other)?;
        Ok(Self { data: &self.data - &other.data, ..self.clone() })
    }

    pub fn scale(&self, s: Cx<T>) -> Self {
        Self { data: &self.data * s, ..self.clone() }
    }

    fn same_shape(&self, other: &Self) -> Result<(), BergmanError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(BergmanError::ShapeMismatch(format!(
                "({} <- {}) vs ({} <- {})",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn adjoint(&self) -> Self {
        Self { data: self.data.adjoint(), rows: self.cols.clone(), cols: self.rows.clone() }
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> T {
        op_norm(&self.data)
    }

    /// Block (i, j) as a plain matrix.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<Cx<T>> {
        let (nr, nc) = (self.rows.n, self.cols.n);
        self.data.view((i * nr, j * nc), (nr, nc)).into_owned()
    }
}

pub fn op_norm<T: Real>(a: &DMatrix<Cx<T>>) -> T {
    if a.is_empty() {
        return T::zero();
    }
    a.clone().singular_values().max()
}

/// Frobenius norm of the top-left `k`×`k` block.
pub fn leading_frobenius<T: Real>(a: &DMatrix<Cx<T>>, k: usize) -> T {
    let k = k.min(a.nrows()).min(a.ncols());
    let mut s = T::zero();
    for j in 0..k {
        for i in 0..k {
            s += a[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

#[derive(Serialize, Deserialize)]
struct OperatorFile {
    format: String,
    rows: Space,
    cols: Space,
    /// Row-major (re, im) pairs.
    data: Vec<[f64; 2]>,
}

const OPERATOR_FORMAT: &str = "operator_v1";

impl OperatorMatrix<f64> {
    pub fn to_json(&self) -> String {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.data.nrows() {
            for j in 0..self.data.ncols() {
                let v = self.data[(i, j)];
                data.push([v.re, v.im]);
            }
        }
        let file = OperatorFile {
            format: OPERATOR_FORMAT.into(),
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            data,
        };
        serde_json::to_string(&file).expect("operator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BergmanError> {
        let file: OperatorFile =
            serde_json::from_str(text).map_err(|e| BergmanError::Format(e.to_string()))?;
        if file.format != OPERATOR_FORMAT {
            return Err(BergmanError::Format(format!("unknown format {}", file.format)));
        }
        let (r, c) = (file.rows.dim(), file.cols.dim());
        if file.data.len() != r * c {
            return Err(BergmanError::Format("entry count does not match the spaces".into()));
        }
        let data = DMatrix::from_row_iterator(r, c, file.data.iter().map(|p| Complex::new(p[0], p[1])));
        Self::new(data, file.rows, file.cols)
    }
}

/// Gram matrix of a truncated model under a weighted disk rule.
pub fn gram_matrix<T: Real>(
    model: &BergmanModel<T>,
    rule: &crate::quad::QuadratureRule<T>,
) -> DMatrix<Cx<T>> {
    let mut g = DMatrix::from_element(model.n, model.n, czero());
    for (node, &w) in rule.nodes.iter().zip(&rule.weights) {
        let e = model.basis_vector(node.w);
        for k in 0..model.n {
            let ek = e[k] * w;
            for j in 0..model.n {
                g[(j, k)] += ek * e[j].conj();
            }
        }
    }
    g
}

/// Random vector supported on degrees < `support`, unit norm.
pub fn random_low_degree<R: rand::Rng>(n: usize, support: usize, rng: &mut R) -> DVector<Cx<f64>> {
    let mut v = DVector::from_element(n, czero());
    for k in 0..support.min(n) {
        v[k] = cx(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let nrm = v.norm();
    if nrm > 0.0 {
        v /= creal(nrm);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypgeom::{mobius_apply, automorphy_j, Sl2r, Sl2z};
    use crate::quad::{integrate, weighted_disk_rule};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn hp(x: f64, y: f64) -> HPoint<f64> {
        HPoint::new(x, y).unwrap()
    }

    #[test]
    fn basis_normalization_examples() {
        let m = BergmanModel::<f64>::new(4, 10).unwrap();
        assert_relative_eq!(m.basis_eval(0, czero()).re, (3.0 / PI).sqrt(), epsilon = 1e-15);
        assert_eq!(m.basis_eval(3, czero()), czero());
    }

    #[test]
    fn gram_is_identity() {
        for weight in [2u32, 4, 12, 16] {
            let m = BergmanModel::<f64>::new(weight, 40).unwrap();
            let rule = weighted_disk_rule::<f64>(weight, crate::quad::disk_level_for(40)).unwrap();
            let g = gram_matrix(&m, &rule);
            let err = (g - DMatrix::<Cx<f64>>::identity(40, 40)).norm();
            assert!(err < 1e-10, "m = {weight}: {err}");
        }
    }

    #[test]
    fn kernel_examples() {
        let m = BergmanModel::<f64>::new(4, 4).unwrap();
        let i = HPoint::i();
        assert_relative_eq!(m.kernel(&i, &i).re, 3.0 / (4.0 * PI), epsilon = 1e-15);
        let (z, w) = (hp(0.3, 1.7), hp(-1.1, 0.4));
        assert!((m.kernel(&z, &w) - m.kernel(&w, &z).conj()).norm() < 1e-12);
        let zz = m.kernel(&z, &z);
        assert_relative_eq!(zz.re, m.kernel_constant() * z.y.powi(-4), max_relative = 1e-13);
    }

    #[test]
    fn evaluation_vector_sums_to_kernel() {
        let model = BergmanModel::<f64>::new(4, 80).unwrap();
        for r in [0.3, 0.6, 0.8] {
            let w = cx(r * 0.6, r * 0.8);
            let z = crate::hypgeom::DPoint { w }.to_half_plane();
            let e = model.evaluation_vector(&z);
            let k = model.kernel(&z, &z).re;
            let s: f64 = e.coeffs.iter().map(|c| c.norm_sqr()).sum();
            assert!((s - k).abs() / k < 1e-6, "|w| = {r}");
        }
    }

    #[test]
    fn evaluation_vector_is_zero_past_degree_zero_at_origin() {
        let model = BergmanModel::<f64>::new(6, 8).unwrap();
        let e = model.evaluation_vector(&HPoint::i());
        assert!(e.coeffs.iter().skip(1).all(|c| c.norm() == 0.0));
        assert!(e.coeffs[0].norm() > 0.0);
    }

    #[test]
    fn reproducing_property_in_the_half_plane() {
        // ⟨f, K(·,w)⟩ over ℍ, computed in the disk, for f = U e_3.
        let model = BergmanModel::<f64>::new(4, 40).unwrap();
        let rule = weighted_disk_rule::<f64>(4, 8).unwrap();
        let w0 = hp(0.2, 1.3);
        let f3 = |z: &HPoint<f64>| model.basis_eval(3, z.to_disk().w) * model.cayley_factor(z);
        // ∫_ℍ F(z) conj(G(z)) y^m dμ = ∫_𝔻 (F/κ)(conj(G/κ)) (1−|v|²)^{m−2} dA.
        let val: Cx<f64> = integrate(&rule, |n| {
            let z = n.h;
            let k = model.cayley_factor(&z);
            let g = model.kernel(&z, &w0);
            Ok::<_, String>(f3(&z) / k * (g / k).conj())
        })
        .unwrap();
        assert!((val - f3(&w0)).norm() < 1e-6, "{val} vs {}", f3(&w0));
    }

    #[test]
    fn cayley_unitary_intertwines_the_action() {
        // (L f)(z) = f(hz) J(h,z)^{−m} with h = g⁻¹ agrees with the disk formula.
        let model = BergmanModel::<f64>::new(6, 30).unwrap();
        let g = Sl2z::new(2, 1, 1, 1).unwrap();
        let l = model.discrete_series_matrix(&g).unwrap();
        let mut coeffs = DVector::from_element(30, czero());
        coeffs[2] = cone();
        coeffs[0] = cx(0.5, -0.25);
        let lf = &l * &coeffs;
        let h = g.inverse();
        for z in [hp(0.1, 1.2), hp(-0.4, 0.7)] {
            let direct = model.half_plane_value(&coeffs, &mobius_apply(&h, &z))
                * cpowi(automorphy_j(&h, &z), -6);
            let via = model.half_plane_value(&lf, &z);
            assert!((direct - via).norm() < 1e-8, "{direct} vs {via}");
        }
    }

    #[test]
    fn identity_and_rotations() {
        let model = BergmanModel::<f64>::new(4, 20).unwrap();
        let id = model.discrete_series_matrix(&Sl2z::IDENTITY).unwrap();
        assert!((id - DMatrix::<Cx<f64>>::identity(20, 20)).norm() < 1e-13);
        let rot = model.discrete_series_matrix(&Sl2r::rotation(0.37)).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                if i != j {
                    assert!(rot[(i, j)].norm() < 1e-13);
                }
            }
            assert_relative_eq!(rot[(i, i)].norm(), 1.0, epsilon = 1e-12);
        }
        // S acts as w ↦ −w up to the constant phase (−i)^{−m}.
        let s = model.discrete_series_matrix(&Sl2z::S).unwrap();
        for k in 1..20 {
            assert!((s[(k, k)] + s[(k - 1, k - 1)]).norm() < 1e-12);
        }
    }

    #[test]
    fn homomorphism_on_leading_block() {
        let model = BergmanModel::<f64>::new(4, 60).unwrap();
        let g = Sl2z::T;
        let h = Sl2z::new(1, 0, 1, 1).unwrap();
        let gh = g.mul(&h).unwrap();
        let lg = model.discrete_series_matrix(&g).unwrap();
        let lh = model.discrete_series_matrix(&h).unwrap();
        let lgh = model.discrete_series_matrix(&gh).unwrap();
        let diff = &lgh - &lg * &lh;
        assert!(leading_frobenius(&diff, 10) < 1e-12);
    }

    #[test]
    fn unitarity_on_low_degrees() {
        // ρ ≈ 0.87 spreads degree 6 far out, so the truncation must be generous.
        let model = BergmanModel::<f64>::new(8, 300).unwrap();
        let l = model.discrete_series_matrix(&Sl2z::new(1, 2, 1, 3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_low_degree(300, 6, &mut rng);
        let h = random_low_degree(300, 6, &mut rng);
        let a = (&l * &f).dotc(&(&l * &h));
        assert!((a - f.dotc(&h)).norm() < 1e-10);
    }

    #[test]
    fn operator_tags_are_checked() {
        let a = OperatorMatrix::<f64>::identity(Space::scalar(4, 3));
        let b = OperatorMatrix::<f64>::zeros(Space::scalar(16, 3), Space::scalar(4, 3));
        assert!(b.compose(&a).is_ok());
        assert!(a.compose(&b).is_err());
        assert_eq!(b.adjoint().rows, Space::scalar(4, 3));
    }

    #[test]
    fn operator_json_roundtrip() {
        let mut a = OperatorMatrix::<f64>::zeros(Space::scalar(16, 2), Space::scalar(4, 2));
        a.data[(1, 0)] = cx(0.1, -3.5e-17);
        let back = OperatorMatrix::from_json(&a.to_json()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn twist_examples() {
        let b = BlockModel::<f64>::new(&[4, 16], 3).unwrap();
        assert_eq!(b.block_twist(&HPoint::i()), DVector::from_vec(vec![1.0, 1.0]));
        let z = hp(0.2, 2.0);
        let h = b.block_twist(&z);
        assert_relative_eq!(h[0] * h[0], 16.0, epsilon = 1e-12);
        assert_relative_eq!(h[1] * h[1], 2f64.powi(16), epsilon = 1e-9);
    }
}
