//! Berezin symbols of truncated operators, the Berezin transform, and the
//! normalized Γ-trace τ(A) = (1/μ(F)) ∫_F tr S(A) dμ.
//!
//! On a block sum with weights m_1, …, m_n and evaluation vectors E_z^i ∈ H_{m_i},
//!
//! * K_A(z,w)_{ij} = ⟨A_{ij} E_w^j, E_z^i⟩,
//! * S(A)(z)_{ij} = K_A(z,z)_{ij} / (‖E_z^i‖ ‖E_z^j‖),
//! * Q(A)(z) = H_z⁻¹ S(A)(z) H_z with H_z = diag(y^{m_i/2}),
//!
//! and tr is the normalized trace (1/n)·Tr. S is normalized by the truncated
//! norms ‖E_z^i‖², which equal c_{m_i} y^{−m_i} up to the truncation tail, so
//! S(I) is exactly the identity.

use nalgebra::{DMatrix, DVector};
use rustfft::FftNum;
use thiserror::Error;

use crate::bergman::{BergmanError, BergmanModel, BlockModel, OperatorMatrix};
use crate::hypgeom::{mobius_apply, HPoint, Mobius, Sl2r};
use crate::modforms::InvariantSymbol;
use crate::quad::{Domain, PolarRule, QuadratureRule};
use crate::scalar::{cabs, cone, cpowi, creal, czero, Cx, Real};

#[derive(Debug, Error)]
pub enum BerezinError {
    #[error(transparent)]
    Bergman(#[from] BergmanError),
    #[error(transparent)]
    Forms(#[from] crate::modforms::ModError),
    #[error("rule is not on the fundamental domain")]
    WrongDomain,
    #[error("operator on {op} does not act on the model {model}")]
    ShapeMismatch { op: String, model: String },
}

/// The Berezin symbols of one operator on a block model.
#[derive(Debug, Clone, Copy)]
pub struct BerezinSymbol<'a, T: Real> {
    pub op: &'a OperatorMatrix<T>,
    pub model: &'a BlockModel<T>,
}

impl<'a, T: Real> BerezinSymbol<'a, T> {
    pub fn new(op: &'a OperatorMatrix<T>, model: &'a BlockModel<T>) -> Result<Self, BerezinError> {
        let space = model.space();
        if op.rows != space || op.cols != space {
            return Err(BerezinError::ShapeMismatch { op: format!("{} <- {}", op.rows, op.cols), model: space.to_string() });
        }
        Ok(Self { op, model })
    }

    fn vectors(&self, z: &HPoint<T>) -> Vec<DVector<Cx<T>>> {
        self.model.blocks.iter().map(|b| b.evaluation_vector(z).coeffs).collect()
    }

    fn pairing(&self, ez: &[DVector<Cx<T>>], ew: &[DVector<Cx<T>>]) -> DMatrix<Cx<T>> {
        let r = self.model.rank();
        DMatrix::from_fn(r, r, |i, j| {
            let a = self.op.block(i, j);
            ez[i].dotc(&(a * &ew[j]))
        })
    }

    /// K_A(z,w) = E_z* A E_w.
    pub fn two_point(&self, z: &HPoint<T>, w: &HPoint<T>) -> DMatrix<Cx<T>> {
        self.pairing(&self.vectors(z), &self.vectors(w))
    }

    /// R(A)(z,w) = (1/c) H_w K_A(w,z) H_z* with the kernel constants c_{m_i}.
    pub fn r(&self, z: &HPoint<T>, w: &HPoint<T>) -> DMatrix<Cx<T>> {
        let k = self.two_point(w, z);
        let (hw, hz) = (self.model.block_twist(w), self.model.block_twist(z));
        let c: Vec<T> = self.model.blocks.iter().map(|b| b.kernel_constant()).collect();
        DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] * (hw[i] * hz[j] / (c[i] * c[j]).sqrt()))
    }

    /// S(A)(z).
    pub fn s(&self, z: &HPoint<T>) -> DMatrix<Cx<T>> {
        let e = self.vectors(z);
        let norms: Vec<T> = e.iter().map(|v| v.norm()).collect();
        let k = self.pairing(&e, &e);
        DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] / (norms[i] * norms[j]))
    }

    /// Q(A)(z) = H_z⁻¹ S(A)(z) H_z.
    pub fn q(&self, z: &HPoint<T>) -> DMatrix<Cx<T>> {
        let s = self.s(z);
        let w = self.model.weights();
        DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
            s[(i, j)] * z.y.powf(T::lit((w[j] as f64 - w[i] as f64) / 2.0))
        })
    }
}

pub fn symbol_s<T: Real>(a: &OperatorMatrix<T>, model: &BlockModel<T>, z: &HPoint<T>) -> Result<DMatrix<Cx<T>>, BerezinError> {
    Ok(BerezinSymbol::new(a, model)?.s(z))
}

pub fn symbol_two_point<T: Real>(
    a: &OperatorMatrix<T>,
    model: &BlockModel<T>,
    z: &HPoint<T>,
    w: &HPoint<T>,
) -> Result<DMatrix<Cx<T>>, BerezinError> {
    Ok(BerezinSymbol::new(a, model)?.two_point(z, w))
}

pub fn symbol_q<T: Real>(a: &OperatorMatrix<T>, model: &BlockModel<T>, z: &HPoint<T>) -> Result<DMatrix<Cx<T>>, BerezinError> {
    Ok(BerezinSymbol::new(a, model)?.q(z))
}

/// Scalar fast path: ⟨A E_z, E_z⟩ / ⟨E_z, E_z⟩ on one Bergman model.
pub fn symbol_s_scalar<T: Real>(a: &DMatrix<Cx<T>>, model: &BergmanModel<T>, z: &HPoint<T>) -> Cx<T> {
    let e = model.evaluation_vector(z).coeffs;
    e.dotc(&(a * &e)) / creal(e.norm_squared())
}

/// The Berezin transform Bf(z) = ((m−1)/π) ∫_𝔻 f(g_z ζ) (1−|ζ|²)^{m−2} dA(ζ)
/// on H_m, where g_z ζ = x + yζ in the half-plane picture of the node.
pub fn berezin_transform<T: Real>(
    f: &InvariantSymbol<T>,
    m: u32,
    z: &HPoint<T>,
    rule: &PolarRule<T>,
) -> Result<Cx<T>, BerezinError> {
    let mut terms = Vec::with_capacity(rule.circles.len());
    for c in &rule.circles {
        let mut ring = Vec::with_capacity(c.angles);
        for q in 0..c.angles {
            let h = c.node(q).h;
            let w = HPoint { x: z.x + z.y * h.x, y: z.y * h.y };
            ring.push(f.eval(&w)?);
        }
        let avg = crate::quad::tree_reduce::<T, Cx<T>>(ring).unwrap_or_else(czero) / T::of(c.angles);
        terms.push(avg * (c.weight * T::two_pi() * c.one_minus_r2.powi(m as i32 - 2)));
    }
    let total = crate::quad::tree_reduce::<T, Cx<T>>(terms).unwrap_or_else(czero);
    Ok(total * (T::of(m as usize - 1) / T::pi()))
}

/// The block Berezin transform of a twisted symbol G = H u H⁻¹:
///
///   Φ_z(G)_{ab} = 4 √(c_a c_b) ∫_𝔻 G_ab(g_z ζ) v^{m_b − m_a} (1−|ζ|²)^{(m_a+m_b)/2 − 2} dA,
///
/// with v = (1−ζ)/|1−ζ|. Φ_z(G) = H_z (Bu)(z) H_z⁻¹; it is completely positive
/// in G and Φ_z(I) = I up to the radial cut of the rule.
pub fn berezin_transform_twisted<T, G>(
    weights: &[u32],
    g: G,
    z: &HPoint<T>,
    rule: &PolarRule<T>,
) -> DMatrix<Cx<T>>
where
    T: Real,
    G: Fn(&HPoint<T>) -> DMatrix<Cx<T>>,
{
    let n = weights.len();
    let c: Vec<T> = weights.iter().map(|&m| T::of(m as usize - 1) / (T::lit(4.0) * T::pi())).collect();
    let mut terms = Vec::with_capacity(rule.circles.len());
    for circle in &rule.circles {
        let base = circle.weight * T::two_pi() / T::of(circle.angles);
        let mut scale = DMatrix::from_element(n, n, T::zero());
        for a in 0..n {
            for b in 0..n {
                let e = (weights[a] + weights[b]) as f64 / 2.0 - 2.0;
                scale[(a, b)] = base * circle.one_minus_r2.powf(T::lit(e)) * T::lit(4.0) * (c[a] * c[b]).sqrt();
            }
        }
        let mut ring = DMatrix::from_element(n, n, czero::<T>());
        for q in 0..circle.angles {
            let node = circle.node(q);
            let p = HPoint { x: z.x + z.y * node.h.x, y: z.y * node.h.y };
            let val = g(&p);
            let one_minus = Cx::new(T::one() - node.w.re, -node.w.im);
            let v = one_minus / creal(cabs(one_minus));
            for a in 0..n {
                for b in 0..n {
                    let phase = cpowi(v, weights[b] as i32 - weights[a] as i32);
                    ring[(a, b)] += val[(a, b)] * phase * scale[(a, b)];
                }
            }
        }
        terms.push(ring);
    }
    crate::quad::tree_reduce::<T, DMatrix<Cx<T>>>(terms).unwrap_or_else(|| DMatrix::from_element(n, n, czero()))
}

/// Precomputed W_i = (1/μ(F)) ∫_F E^i E^{i*} / ‖E^i‖² dμ, so that
/// τ(A) = (1/n) Σ_i Tr(A_ii W_i).
#[derive(Debug, Clone)]
pub struct TraceWeights<T: Real> {
    pub weights: Vec<u32>,
    pub n: usize,
    pub w: Vec<DMatrix<Cx<T>>>,
    /// Quadrature error estimate of μ(F), relative.
    pub rel_error: f64,
}

/// A trace estimate with its quadrature error bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceValue<T> {
    pub value: Cx<T>,
    pub error_bar: f64,
}

impl<T: Real> TraceWeights<T> {
    pub fn new(model: &BlockModel<T>, rule: &QuadratureRule<T>) -> Result<Self, BerezinError> {
        if rule.domain != Domain::FundamentalDomain {
            return Err(BerezinError::WrongDomain);
        }
        let mu = T::pi() / T::lit(3.0);
        let n = model.truncation();
        let mut w = Vec::with_capacity(model.rank());
        for b in &model.blocks {
            let mut acc = DMatrix::from_element(n, n, czero::<T>());
            for (node, &wt) in rule.nodes.iter().zip(&rule.weights) {
                let e = b.evaluation_vector(&node.h).coeffs;
                let s = wt / (e.norm_squared() * mu);
                acc.gerc(creal(s), &e, &e, cone());
            }
            w.push(acc);
        }
        Ok(Self { weights: model.weights(), n, w, rel_error: rule.error_estimate.f64() / mu.f64() })
    }

    /// τ(A) = (1/n) Σ_i Tr(A_ii W_i).
    pub fn tau(&self, a: &OperatorMatrix<T>) -> Result<TraceValue<T>, BerezinError> {
        if a.rows.weights != self.weights || a.cols != a.rows || a.rows.n != self.n {
            return Err(BerezinError::ShapeMismatch {
                op: format!("{} <- {}", a.rows, a.cols),
                model: format!("{:?}[N={}]", self.weights, self.n),
            });
        }
        let r = self.weights.len();
        let mut total = czero::<T>();
        for i in 0..r {
            let blk = a.block(i, i);
            // Tr(A W) = Σ_ab A[a,b] W[b,a]; W is Hermitian so W[b,a] = conj(W[a,b]).
            let mut s = czero::<T>();
            for bcol in 0..self.n {
                for arow in 0..self.n {
                    s += blk[(arow, bcol)] * self.w[i][(arow, bcol)].conj();
                }
            }
            total += s;
        }
        let value = total / T::of(r);
        let error_bar = cabs(value).f64() * self.rel_error;
        Ok(TraceValue { value, error_bar })
    }
}

/// τ(A) on the fundamental-domain rule.
pub fn trace_tau<T: Real>(
    a: &OperatorMatrix<T>,
    model: &BlockModel<T>,
    rule: &QuadratureRule<T>,
) -> Result<TraceValue<T>, BerezinError> {
    TraceWeights::new(model, rule)?.tau(a)
}

/// (1/μ(F)) ∫_F tr(f(z) Q(A)(z)) dμ for a matrix function f given on F.
pub fn trace_via_q<T, F>(
    a: &OperatorMatrix<T>,
    model: &BlockModel<T>,
    f: F,
    rule: &QuadratureRule<T>,
) -> Result<Cx<T>, BerezinError>
where
    T: Real,
    F: Fn(&HPoint<T>) -> DMatrix<Cx<T>>,
{
    if rule.domain != Domain::FundamentalDomain {
        return Err(BerezinError::WrongDomain);
    }
    let sym = BerezinSymbol::new(a, model)?;
    let r = T::of(model.rank());
    let mut terms = Vec::with_capacity(rule.len());
    for (node, &w) in rule.nodes.iter().zip(&rule.weights) {
        let q = sym.q(&node.h);
        terms.push((f(&node.h) * q).trace() * (w / r));
    }
    let total = crate::quad::tree_reduce::<T, Cx<T>>(terms).unwrap_or_else(czero);
    Ok(total * (T::lit(3.0) / T::pi()))
}

/// Scalar form: (1/μ(F)) ∫_F f(z) tr Q(A)(z) dμ.
pub fn trace_via_q_scalar<T: Real>(
    a: &OperatorMatrix<T>,
    model: &BlockModel<T>,
    f: &InvariantSymbol<T>,
    rule: &QuadratureRule<T>,
) -> Result<Cx<T>, BerezinError> {
    let n = model.rank();
    trace_via_q(a, model, |z| DMatrix::from_diagonal_element(n, n, f.eval_reduced(z)), rule)
}

/// |S(L(g)⁻¹ A L(g))(z) − S(A)(g·z)| on a scalar model.
pub fn covariance_check<T, G>(
    a: &DMatrix<Cx<T>>,
    model: &BergmanModel<T>,
    g: &G,
    z: &HPoint<T>,
) -> Result<T, BerezinError>
where
    T: Real + FftNum,
    G: Mobius<T>,
{
    let [ga, gb, gc, gd] = g.entries();
    let inv = Sl2r { a: gd, b: -gb, c: -gc, d: ga };
    let lg = model.discrete_series_matrix(g)?;
    let linv = model.discrete_series_matrix(&inv)?;
    let conj = &linv * a * &lg;
    let lhs = symbol_s_scalar(&conj, model, z);
    let rhs = symbol_s_scalar(a, model, &mobius_apply(g, z));
    Ok(cabs(lhs - rhs))
}
