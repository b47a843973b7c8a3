//! Toeplitz operators P M_u P on truncated Bergman spaces: scalar symbols,
//! cusp-form intertwiners H_m → H_{m+p}, and matrix symbols on block sums.
//!
//! Matrices are assembled in the disk model with a hyperbolic polar rule.
//! On each circle the transported symbol is sampled once and its angular
//! Fourier coefficients are read off by FFT, so that
//!
//!   T[j,k] = Σ_circles W (1−r²)^{m_row−2} c_j c_k r^{j+k} · 2π û_{j−k}(r).
//!
//! A half-plane symbol u between H_{m_col} and H_{m_row} is carried to the
//! disk as ũ(w) = u(z) κ_{m_col}(z)/κ_{m_row}(z) = u(z) e^{−iπq/4} (1−w)^q with
//! q = m_col − m_row.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::{FftNum, FftPlanner};
use thiserror::Error;

use crate::berezin::{
    berezin_transform_twisted, symbol_s_scalar, trace_via_q, BerezinError, BerezinSymbol, TraceWeights,
};
use crate::bergman::{BergmanError, BergmanModel, BlockModel, OperatorMatrix, Space};
use num_integer::Integer;

use crate::hypgeom::{
    mobius_apply, reduce_to_fundamental, GeomError, HPoint, Mobius, Sl2z, DEFAULT_GROUP_CAP,
};
use crate::modforms::{
    cusp_basis, domain_grid, petersson, tail_estimate, InvariantSymbol, ModError, PreparedForm, QExpansion, Shell,
};
use crate::quad::{Node, PolarRule, PolarSpec, QuadError, QuadratureRule};
use crate::scalar::{cabs, cis, cpowi, creal, cx, czero, Cx, Real};

#[derive(Debug, Error)]
pub enum ToeplitzError {
    #[error(transparent)]
    Bergman(#[from] BergmanError),
    #[error(transparent)]
    Forms(#[from] ModError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Berezin(#[from] BerezinError),
    #[error("form of weight {0} is not cuspidal (a_0 ≠ 0)")]
    NotCuspidal(u32),
    #[error("symbol entry ({row},{col}) is not bounded after the H_z twist (grid sup {sup:e})")]
    NotInLinftyH { row: usize, col: usize, sup: f64 },
    #[error("entry ({row},{col}) has the wrong automorphy class for weights {weights:?}")]
    Equivariance { row: usize, col: usize, weights: Vec<u32> },
    #[error("weights differ: {0} vs {1}")]
    WeightMismatch(u32, u32),
    #[error("group enumeration exceeded its capacity of {cap} elements")]
    CapacityExceeded { cap: usize },
    #[error("least-squares system is ill-conditioned: {0}")]
    IllConditioned(String),
}

/// A disk node with its reduction z* = γz ∈ F and the cocycle cz + d of γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedNode<T> {
    pub node: Node<T>,
    pub zstar: HPoint<T>,
    pub cocycle: Cx<T>,
}

impl<T: Real> ReducedNode<T> {
    pub fn new(node: Node<T>) -> Result<Self, GeomError> {
        let red = reduce_to_fundamental(&node.h)?;
        let [_, _, c, d] = Mobius::<T>::entries(&red.gamma);
        let cocycle = node.h.z() * c + creal(d);
        Ok(Self { node, zstar: red.zstar, cocycle })
    }
}

/// A polar rule whose nodes have been reduced into F once, for reuse across symbols.
#[derive(Debug, Clone)]
pub struct DiskNodes<T> {
    pub rule: PolarRule<T>,
    /// Reduced nodes, circle by circle in angle order.
    pub circles: Vec<Vec<ReducedNode<T>>>,
}

impl<T: Real> DiskNodes<T> {
    pub fn new(rule: PolarRule<T>) -> Result<Self, ToeplitzError> {
        let mut circles = Vec::with_capacity(rule.circles.len());
        for c in &rule.circles {
            let nodes = (0..c.angles).map(|q| ReducedNode::new(c.node(q))).collect::<Result<_, _>>()?;
            circles.push(nodes);
        }
        Ok(Self { rule, circles })
    }

    /// Nodes for operators truncated at `n`.
    pub fn for_level(level: usize, n: usize) -> Result<Self, ToeplitzError> {
        Self::new(PolarRule::new(PolarSpec::for_level(level, n))?)
    }

    pub fn spec(&self) -> PolarSpec {
        self.rule.spec
    }

    pub fn len(&self) -> usize {
        self.rule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rule.is_empty()
    }
}

/// e^{−iπq/4} (1−w)^q, the factor κ_{m+q}/κ_m written in the disk variable.
pub fn transport_factor<T: Real>(q: i32, w: Cx<T>) -> Cx<T> {
    let phase = cis(-T::pi() * T::int(q.rem_euclid(8) as i64) / T::lit(4.0));
    cpowi(cx(T::one() - w.re, -w.im), q) * phase
}

/// Assembles ⟨P_row M_u e_k^{col}, e_j^{row}⟩ for a half-plane symbol u.
pub fn assemble<T, F>(
    nodes: &DiskNodes<T>,
    rows: &BergmanModel<T>,
    cols: &BergmanModel<T>,
    u: F,
) -> DMatrix<Cx<T>>
where
    T: Real + FftNum,
    F: Fn(&ReducedNode<T>) -> Cx<T>,
{
    let (nr, nc) = (rows.n, cols.n);
    let q = cols.m as i32 - rows.m as i32;
    let mut planner = FftPlanner::<T>::new();
    let mut out = DMatrix::from_element(nr, nc, czero::<T>());
    let mut rpow = vec![T::one(); nr + nc];
    for (circle, reduced) in nodes.rule.circles.iter().zip(&nodes.circles) {
        let size = circle.angles;
        let mut buf: Vec<Cx<T>> =
            reduced.iter().map(|rn| u(rn) * transport_factor(q, rn.node.w)).collect();
        planner.plan_fft_forward(size).process(&mut buf);
        for i in 1..rpow.len() {
            rpow[i] = rpow[i - 1] * circle.r;
        }
        let radial = circle.weight * circle.one_minus_r2.powi(rows.m as i32 - 2) * T::two_pi() / T::of(size);
        for k in 0..nc {
            let ck = cols.norm(k) * radial;
            for j in 0..nr {
                let idx = (j as isize - k as isize).rem_euclid(size as isize) as usize;
                let s = rows.norm(j) * ck * rpow[j + k];
                out[(j, k)] += buf[idx] * s;
            }
        }
    }
    out
}

/// One entry u_ij of a matrix symbol, as a function on ℍ.
#[derive(Clone)]
pub enum SymbolEntry<T> {
    Zero,
    /// A Γ-invariant bounded function (diagonal class).
    Invariant(InvariantSymbol<T>),
    /// A holomorphic form f of weight m_i − m_j.
    Form(Arc<PreparedForm<T>>),
    /// conj(g) y^p for a form g of weight p = m_j − m_i.
    ConjForm(Arc<PreparedForm<T>>),
}

impl<T: Real> SymbolEntry<T> {
    /// Automorphy exponent e with u(γz) = (cz+d)^e u(z), if fixed by the entry.
    fn exponent(&self) -> Option<i32> {
        match self {
            Self::Zero => None,
            Self::Invariant(_) => Some(0),
            Self::Form(f) => Some(f.weight() as i32),
            Self::ConjForm(g) => Some(-(g.weight() as i32)),
        }
    }

    /// Value at the original (unreduced) point of a reduced node.
    pub fn value(&self, rn: &ReducedNode<T>) -> Cx<T> {
        match self {
            Self::Zero => czero(),
            Self::Invariant(s) => s.eval_reduced(&rn.zstar),
            Self::Form(f) => f.eval_with(&rn.zstar, rn.cocycle),
            Self::ConjForm(g) => g.eval_with(&rn.zstar, rn.cocycle).conj() * rn.node.h.y.powi(g.weight() as i32),
        }
    }

    /// Value at a point of F (no reduction needed).
    pub fn value_on_domain(&self, z: &HPoint<T>) -> Cx<T> {
        match self {
            Self::Zero => czero(),
            Self::Invariant(s) => s.eval_reduced(z),
            Self::Form(f) => f.eval_reduced(z),
            Self::ConjForm(g) => g.eval_reduced(z).conj() * z.y.powi(g.weight() as i32),
        }
    }

    /// The entry of the adjoint symbol sitting at the transposed position.
    fn adjoint(&self) -> Self {
        match self {
            Self::Zero => Self::Zero,
            Self::Invariant(s) => Self::Invariant(s.conjugate()),
            Self::Form(f) => Self::ConjForm(f.clone()),
            Self::ConjForm(g) => Self::Form(g.clone()),
        }
    }
}

impl<T> fmt::Debug for SymbolEntry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => write!(f, "0"),
            Self::Invariant(s) => write!(f, "{s:?}"),
            Self::Form(g) => write!(f, "Form(weight {})", g.form.weight),
            Self::ConjForm(g) => write!(f, "ConjForm(weight {})", g.form.weight),
        }
    }
}

/// A matrix-valued symbol on the block sum H_{m_1} ⊕ ⋯ ⊕ H_{m_n}.
#[derive(Clone, Debug)]
pub struct MatrixSymbol<T> {
    pub weights: Vec<u32>,
    /// Row-major n×n entries.
    pub entries: Vec<SymbolEntry<T>>,
}

impl<T: Real> MatrixSymbol<T> {
    /// Checks that entry (i,j) transforms with exponent m_i − m_j and that
    /// holomorphic entries are cusp forms (the cusp bound is what makes
    /// ‖H_z u H_z⁻¹‖ bounded).
    pub fn new(weights: Vec<u32>, entries: Vec<SymbolEntry<T>>) -> Result<Self, ToeplitzError> {
        let n = weights.len();
        if n == 0 || entries.len() != n * n {
            return Err(BergmanError::ShapeMismatch(format!("{} entries for {n} blocks", entries.len())).into());
        }
        for i in 0..n {
            for j in 0..n {
                let e = &entries[i * n + j];
                let want = weights[i] as i32 - weights[j] as i32;
                if let Some(got) = e.exponent() {
                    if got != want {
                        return Err(ToeplitzError::Equivariance { row: i, col: j, weights: weights.clone() });
                    }
                }
                if let SymbolEntry::Form(f) | SymbolEntry::ConjForm(f) = e {
                    if !f.form.cuspidal {
                        let sup = twisted_sup(e, want, 24, 40.0);
                        return Err(ToeplitzError::NotInLinftyH { row: i, col: j, sup });
                    }
                }
            }
        }
        Ok(Self { weights, entries })
    }

    pub fn scalar(m: u32, f: InvariantSymbol<T>) -> Self {
        Self { weights: vec![m], entries: vec![SymbolEntry::Invariant(f)] }
    }

    /// The identity symbol.
    pub fn identity(weights: Vec<u32>) -> Self {
        let n = weights.len();
        let one = InvariantSymbol::constant(cx(T::one(), T::zero()));
        let entries = (0..n * n)
            .map(|ix| if ix / n == ix % n { SymbolEntry::Invariant(one.clone()) } else { SymbolEntry::Zero })
            .collect();
        Self { weights, entries }
    }

    /// [[0, ḡ y^p], [f, 0]] on H_m ⊕ H_{m+p}.
    pub fn cusp_pair(m: u32, f: &QExpansion, g: &QExpansion) -> Result<Self, ToeplitzError> {
        if f.weight != g.weight {
            return Err(ToeplitzError::WeightMismatch(f.weight, g.weight));
        }
        let p = f.weight;
        let entries = vec![
            SymbolEntry::Zero,
            SymbolEntry::ConjForm(Arc::new(PreparedForm::new(g)?)),
            SymbolEntry::Form(Arc::new(PreparedForm::new(f)?)),
            SymbolEntry::Zero,
        ];
        Self::new(vec![m, m + p], entries)
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> &SymbolEntry<T> {
        &self.entries[i * self.rank() + j]
    }

    /// u(z) at a point of F.
    pub fn value_on_domain(&self, z: &HPoint<T>) -> DMatrix<Cx<T>> {
        let n = self.rank();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j).value_on_domain(z))
    }

    /// H_z u(z) H_z⁻¹ with H_z = diag(y^{m_i/2}).
    pub fn twisted_on_domain(&self, z: &HPoint<T>) -> DMatrix<Cx<T>> {
        let n = self.rank();
        DMatrix::from_fn(n, n, |i, j| {
            let s = z.y.powf(T::lit((self.weights[i] as f64 - self.weights[j] as f64) / 2.0));
            self.entry(i, j).value_on_domain(z) * s
        })
    }

    /// sup over a grid of F of ‖H_z u H_z⁻¹‖_F.
    pub fn linfty_h_norm(&self, n: usize, y_max: f64) -> f64 {
        domain_grid(n, y_max)
            .into_iter()
            .map(|(x, y)| {
                let z = HPoint { x: T::lit(x), y: T::lit(y) };
                self.twisted_on_domain(&z).norm().f64()
            })
            .fold(0.0, f64::max)
    }

    /// H_z⁻¹ (H_z*)⁻¹ u* H_z* H_z, whose Toeplitz operator is T_u*.
    pub fn adjoint(&self) -> Self {
        let n = self.rank();
        let entries = (0..n * n).map(|ix| self.entries[(ix % n) * n + ix / n].adjoint()).collect();
        Self { weights: self.weights.clone(), entries }
    }
}

fn twisted_sup<T: Real>(e: &SymbolEntry<T>, exponent: i32, n: usize, y_max: f64) -> f64 {
    domain_grid(n, y_max)
        .into_iter()
        .map(|(x, y)| {
            let z = HPoint { x: T::lit(x), y: T::lit(y) };
            cabs(e.value_on_domain(&z) * z.y.powf(T::lit(exponent as f64 / 2.0))).f64()
        })
        .fold(0.0, f64::max)
}

/// T_f on H_m for a Γ-invariant symbol.
pub fn toeplitz_matrix<T: Real + FftNum>(
    f: &InvariantSymbol<T>,
    model: &BergmanModel<T>,
    nodes: &DiskNodes<T>,
) -> OperatorMatrix<T> {
    let data = assemble(nodes, model, model, |rn| f.eval_reduced(&rn.zstar));
    let space = Space::scalar(model.m, model.n);
    OperatorMatrix { data, rows: space.clone(), cols: space }
}

fn cusp_form<T: Real>(f: &QExpansion) -> Result<Arc<PreparedForm<T>>, ToeplitzError> {
    if !f.cuspidal {
        return Err(ToeplitzError::NotCuspidal(f.weight));
    }
    Ok(Arc::new(PreparedForm::new(f)?))
}

/// T_f = P_{m+p} M_f P_m : H_m → H_{m+p} for a cusp form f of weight p.
pub fn toeplitz_block<T: Real + FftNum>(
    f: &QExpansion,
    m: u32,
    n: usize,
    nodes: &DiskNodes<T>,
) -> Result<OperatorMatrix<T>, ToeplitzError> {
    let pf = cusp_form::<T>(f)?;
    let entry = SymbolEntry::Form(pf);
    let cols = BergmanModel::<T>::new(m, n)?;
    let rows = BergmanModel::<T>::new(m + f.weight, n)?;
    let data = assemble(nodes, &rows, &cols, |rn| entry.value(rn));
    Ok(OperatorMatrix::new(data, Space::scalar(m + f.weight, n), Space::scalar(m, n))?)
}

/// P_m M_{ḡ y^p} P_{m+p} : H_{m+p} → H_m, assembled directly.
pub fn adjoint_block<T: Real + FftNum>(
    g: &QExpansion,
    m: u32,
    n: usize,
    nodes: &DiskNodes<T>,
) -> Result<OperatorMatrix<T>, ToeplitzError> {
    let pg = cusp_form::<T>(g)?;
    let entry = SymbolEntry::ConjForm(pg);
    let cols = BergmanModel::<T>::new(m + g.weight, n)?;
    let rows = BergmanModel::<T>::new(m, n)?;
    let data = assemble(nodes, &rows, &cols, |rn| entry.value(rn));
    Ok(OperatorMatrix::new(data, Space::scalar(m, n), Space::scalar(m + g.weight, n))?)
}

/// Exact T_f : H_m → H_{m+p} from the Taylor series of the transported form.
///
/// f·e_k already lies in H_{m+p}, so T_f[j,k] = b_{j−k} c_k^{(m)} / c_j^{(m+p)}
/// where ũ = Σ b_n wⁿ. The b_n are read off by FFT on a circle of radius
/// 1 − 6/N, so this is independent of any area quadrature.
pub fn toeplitz_block_series<T: Real + FftNum>(
    f: &QExpansion,
    m: u32,
    n: usize,
) -> Result<OperatorMatrix<T>, ToeplitzError> {
    let pf = cusp_form::<T>(f)?;
    let p = f.weight;
    let cols = BergmanModel::<T>::new(m, n)?;
    let rows = BergmanModel::<T>::new(m + p, n)?;
    let radius = 1.0 - 6.0 / (n as f64 + 6.0);
    let size = (8 * n).max(1024).next_power_of_two();
    let entry = SymbolEntry::Form(pf);
    let mut buf = Vec::with_capacity(size);
    for l in 0..size {
        let w = cis(T::two_pi() * T::of(l) / T::of(size)) * T::lit(radius);
        let rn = ReducedNode::new(Node::from_disk(w))?;
        buf.push(entry.value(&rn) * transport_factor(-(p as i32), w));
    }
    FftPlanner::<T>::new().plan_fft_forward(size).process(&mut buf);
    let b: Vec<Cx<T>> =
        (0..n).map(|k| buf[k] / (T::of(size) * T::lit(radius).powi(k as i32))).collect();
    let data = DMatrix::from_fn(n, n, |j, k| {
        if j >= k {
            b[j - k] * (cols.norm(k) / rows.norm(j))
        } else {
            czero()
        }
    });
    Ok(OperatorMatrix::new(data, Space::scalar(m + p, n), Space::scalar(m, n))?)
}

/// Block matrix whose (i,j) block is P_{m_i} M_{u_ij} P_{m_j}.
pub fn matrix_toeplitz<T: Real + FftNum>(
    sym: &MatrixSymbol<T>,
    block: &BlockModel<T>,
    nodes: &DiskNodes<T>,
) -> Result<OperatorMatrix<T>, ToeplitzError> {
    if sym.weights != block.weights() {
        return Err(BergmanError::ShapeMismatch(format!(
            "symbol weights {:?} vs model {:?}",
            sym.weights,
            block.weights()
        ))
        .into());
    }
    let n = block.truncation();
    let r = block.rank();
    let mut data = DMatrix::from_element(r * n, r * n, czero::<T>());
    for i in 0..r {
        for j in 0..r {
            let e = sym.entry(i, j);
            if matches!(e, SymbolEntry::Zero) {
                continue;
            }
            let b = assemble(nodes, &block.blocks[i], &block.blocks[j], |rn| e.value(rn));
            data.view_mut((i * n, j * n), (n, n)).copy_from(&b);
        }
    }
    Ok(OperatorMatrix::new(data, block.space(), block.space())?)
}

/// Side of the leading block on which truncated identities are compared.
pub const LEADING_BLOCK: usize = 10;

/// Polar-rule level paired with truncation `n` (level 6 at N = 60).
pub fn level_for(n: usize) -> usize {
    (n / 10).clamp(3, 10)
}

fn leading_residual<T: Real>(a: &DMatrix<Cx<T>>, k: usize) -> f64 {
    crate::bergman::leading_frobenius(a, k).f64()
}

/// ‖T_f L_m(γ) − L_{m+p}(γ) T_f‖_F on the leading block for T_f : H_m → H_{m+p}.
pub fn intertwining_residual<T, G>(tf: &OperatorMatrix<T>, g: &G, k: usize) -> Result<f64, ToeplitzError>
where
    T: Real + FftNum,
    G: Mobius<T>,
{
    let cols = BergmanModel::<T>::new(tf.cols.weights[0], tf.cols.n)?;
    let rows = BergmanModel::<T>::new(tf.rows.weights[0], tf.rows.n)?;
    let lc = cols.discrete_series_matrix(g)?;
    let lr = rows.discrete_series_matrix(g)?;
    let diff = &tf.data * lc - lr * &tf.data;
    Ok(leading_residual(&diff, k))
}

/// Residuals of the adjoint formula (T_g)* = P_m M_{ḡ y^p} P_{m+p}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointCheck {
    /// Against the conjugate transpose of T_g built on the same nodes. The two
    /// integrands are pointwise conjugate, so this is at rounding level.
    pub same_nodes: f64,
    /// Against the conjugate transpose of the exact series matrix of T_g.
    pub vs_series: f64,
}

pub fn adjoint_formula_check<T: Real + FftNum>(
    g: &QExpansion,
    m: u32,
    n: usize,
    nodes: &DiskNodes<T>,
) -> Result<AdjointCheck, ToeplitzError> {
    let partner = adjoint_block(g, m, n, nodes)?;
    let tg = toeplitz_block(g, m, n, nodes)?;
    let exact = toeplitz_block_series::<T>(g, m, n)?;
    let same_nodes = (tg.data.adjoint() - &partner.data).norm().f64();
    let vs_series = (exact.data.adjoint() - &partner.data).norm().f64();
    Ok(AdjointCheck { same_nodes, vs_series })
}

/// ‖(T_g)* T_f − T_{f ḡ y^p}‖_F on the leading block.
pub fn composite_identity_check<T: Real + FftNum>(
    f: &QExpansion,
    g: &QExpansion,
    m: u32,
    n: usize,
    nodes: &DiskNodes<T>,
) -> Result<f64, ToeplitzError> {
    if f.weight != g.weight {
        return Err(ToeplitzError::WeightMismatch(f.weight, g.weight));
    }
    let tf = toeplitz_block(f, m, n, nodes)?;
    let tg = if f == g { tf.clone() } else { toeplitz_block(g, m, n, nodes)? };
    let lhs = tg.adjoint().compose(&tf)?;
    let model = BergmanModel::<T>::new(m, n)?;
    let rhs = toeplitz_matrix(&InvariantSymbol::pairing(f, g)?, &model, nodes);
    Ok(leading_residual(&(lhs.data - rhs.data), LEADING_BLOCK))
}

/// τ((T_g)* T_f) against the normalized Petersson product ⟨f, g⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeterssonRatio {
    pub tau: Cx<f64>,
    pub petersson: Cx<f64>,
    pub ratio: Cx<f64>,
}

pub fn petersson_ratio(
    f: &QExpansion,
    g: &QExpansion,
    m: u32,
    n: usize,
    nodes: &DiskNodes<f64>,
    frule: &QuadratureRule<f64>,
) -> Result<PeterssonRatio, ToeplitzError> {
    let tf = toeplitz_block(f, m, n, nodes)?;
    let tg = if f == g { tf.clone() } else { toeplitz_block(g, m, n, nodes)? };
    let prod = tg.adjoint().compose(&tf)?;
    let model = BlockModel::scalar(BergmanModel::<f64>::new(m, n)?);
    let tau = TraceWeights::new(&model, frule)?.tau(&prod)?.value;
    let pet = petersson(f, g, frule)?;
    Ok(PeterssonRatio { tau, petersson: pet, ratio: tau / pet })
}

/// Smallest eigenvalue of Φ_z(G G*) − Φ_z(G) Φ_z(G)* for a twisted symbol G.
/// Φ_z is completely positive with Φ_z(I) ≤ I, so this is ≥ 0 (Kadison–Schwarz).
pub fn kadison_check<T, G>(weights: &[u32], g: G, z: &HPoint<T>, rule: &PolarRule<T>) -> f64
where
    T: Real,
    G: Fn(&HPoint<T>) -> DMatrix<Cx<T>>,
{
    let gg = berezin_transform_twisted(weights, |p| {
        let v = g(p);
        &v * v.adjoint()
    }, z, rule);
    let phi = berezin_transform_twisted(weights, &g, z, rule);
    let d = gg - &phi * phi.adjoint();
    let h = (&d + d.adjoint()) * creal(T::lit(0.5));
    h.symmetric_eigenvalues().iter().fold(f64::INFINITY, |acc, v| acc.min(v.f64()))
}

impl<T: Real> MatrixSymbol<T> {
    /// H_p u(p) H_p⁻¹ at an arbitrary point of ℍ.
    pub fn twisted_at(&self, p: &HPoint<T>) -> Result<DMatrix<Cx<T>>, ToeplitzError> {
        let rn = ReducedNode::new(Node::from_half_plane(*p))?;
        let n = self.rank();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            let s = p.y.powf(T::lit((self.weights[i] as f64 - self.weights[j] as f64) / 2.0));
            self.entry(i, j).value(&rn) * s
        }))
    }
}

/// B applied to a matrix symbol, sampled at a list of points.
#[derive(Debug, Clone)]
pub struct BField<T> {
    pub points: Vec<HPoint<T>>,
    /// H_z (Bu)(z) H_z⁻¹, directly comparable with S(T_u)(z).
    pub values: Vec<DMatrix<Cx<T>>>,
    /// Per-height mass of the Γ-sum, accumulated over all points.
    pub shells: Vec<Shell>,
    pub tail: f64,
}

/// Each coset Γ_∞γ is summed over translates within 16 (Im γw + Im z) of z.
const TRANSLATION_REACH: f64 = 16.0;

/// Cosets Γ_∞γ of PSL(2,ℤ) with Im(γw) ≥ 1/height², as (γ, shell) where γ is
/// a representative and shell = ⌈|cw+d| / √Im w⌉ ≤ height.
pub fn cosets_near<T: Real>(w: &HPoint<T>, height: i64, cap: usize) -> Result<Vec<(Sl2z, i64)>, ToeplitzError> {
    let (x, y) = (w.x.f64(), w.y.f64());
    let h = height.max(1) as f64;
    let mut out = vec![(Sl2z::IDENTITY, 1)];
    let cmax = (h / y.sqrt()).floor() as i64;
    for c in 1..=cmax {
        let cf = c as f64;
        let rad = (h * h * y - cf * cf * y * y).max(0.0).sqrt();
        let lo = (-cf * x - rad).ceil() as i64;
        let hi = (-cf * x + rad).floor() as i64;
        for d in lo..=hi {
            let e = c.extended_gcd(&d);
            if e.gcd != 1 {
                continue;
            }
            let norm = ((cf * x + d as f64).powi(2) + cf * cf * y * y).sqrt();
            let shell = ((norm / y.sqrt()).ceil() as i64).clamp(1, height.max(1));
            // e.x c + e.y d = 1, so (a, b) = (e.y, −e.x) gives ad − bc = 1.
            out.push((Sl2z { a: e.y, b: -e.x, c, d }, shell));
            if out.len() > cap {
                return Err(ToeplitzError::CapacityExceeded { cap });
            }
        }
    }
    Ok(out)
}

/// Bu(z) from the integral over ℍ, unfolded as Σ_γ ∫_F:
///
///   (H Bu H⁻¹)_ab(z) = √(c_a c_b) y^{(m_a+m_b)/2} ∫_ℍ u_ab(w) q^{−m_b} q̄^{−m_a} Im(w)^{m_a} dμ(w),
///
/// q = (w − z̄)/(2i). On γF the entry is recovered from F by its automorphy
/// exponent, u_ab(γw) = (cw+d)^{m_a−m_b} u_ab(w). For each node w of F the sum
/// runs over the cosets Γ_∞γ with Im(γw) ≥ 1/height², each through the
/// translates within reach of z. Shell k collects the images with
/// Im(γw) ∈ [1/k², 1/(k−1)²), with their mass measured after the prefactor.
pub fn operator_b_apply<T: Real>(
    sym: &MatrixSymbol<T>,
    points: &[HPoint<T>],
    height: i64,
    rule: &QuadratureRule<T>,
) -> Result<BField<T>, ToeplitzError> {
    if rule.domain != crate::quad::Domain::FundamentalDomain {
        return Err(BerezinError::WrongDomain.into());
    }
    let cosets: Vec<Vec<(Sl2z, i64)>> =
        rule.nodes.iter().map(|nd| cosets_near(&nd.h, height, DEFAULT_GROUP_CAP)).collect::<Result<_, _>>()?;
    let n = sym.rank();
    let w8 = &sym.weights;
    let c: Vec<T> = w8.iter().map(|&m| T::of(m as usize - 1) / (T::lit(4.0) * T::pi())).collect();
    let mut shells: Vec<Shell> = (1..=height.max(1)).map(|h| Shell { height: h, count: 0, mass: 0.0 }).collect();
    let samples: Vec<DMatrix<Cx<T>>> = rule.nodes.iter().map(|nd| sym.value_on_domain(&nd.h)).collect();
    let two_i = cx(T::zero(), T::lit(2.0));
    let mut values = Vec::with_capacity(points.len());
    for z in points {
        let zbar = cx(z.x, -z.y);
        let pref = DMatrix::from_fn(n, n, |a, b| {
            (c[a] * c[b]).sqrt() * z.y.powf(T::lit((w8[a] + w8[b]) as f64 / 2.0))
        });
        let mut terms = Vec::with_capacity(rule.len());
        for (((nd, &wt), u), near) in rule.nodes.iter().zip(&rule.weights).zip(&samples).zip(&cosets) {
            let mut acc = DMatrix::from_element(n, n, czero::<T>());
            for (g, shell) in near {
                let j = nd.h.z() * T::int(g.c) + creal(T::int(g.d));
                let gw = mobius_apply(g, &nd.h);
                let reach = (TRANSLATION_REACH * (gw.y + z.y).f64()).ceil() as i64;
                let centre = (z.x - gw.x).f64().round() as i64;
                let mut mass = T::zero();
                for t in centre - reach..=centre + reach {
                    let q = (cx(gw.x + T::int(t), gw.y) - zbar) / two_i;
                    for a in 0..n {
                        for b in 0..n {
                            let uab = u[(a, b)];
                            if uab == czero() {
                                continue;
                            }
                            let v = uab
                                * cpowi(j, w8[a] as i32 - w8[b] as i32)
                                * cpowi(q, -(w8[b] as i32))
                                * cpowi(q.conj(), -(w8[a] as i32))
                                * gw.y.powi(w8[a] as i32);
                            acc[(a, b)] += v;
                            mass += cabs(v) * pref[(a, b)];
                        }
                    }
                }
                let s = &mut shells[*shell as usize - 1];
                s.count += 1;
                s.mass += (mass * wt).f64();
            }
            terms.push(acc * creal(wt));
        }
        let total = crate::quad::tree_reduce::<T, DMatrix<Cx<T>>>(terms)
            .unwrap_or_else(|| DMatrix::from_element(n, n, czero()));
        values.push(DMatrix::from_fn(n, n, |a, b| total[(a, b)] * pref[(a, b)]));
    }
    let tail = tail_estimate(&shells);
    Ok(BField { points: points.to_vec(), values, shells, tail })
}

/// ‖u‖²_{L²_H} = ∫_F ‖H u H⁻¹‖²_F dμ on a fundamental-domain rule.
pub fn l2h_norm_sq<T: Real>(sym: &MatrixSymbol<T>, rule: &QuadratureRule<T>) -> f64 {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(nd, &w)| (sym.twisted_on_domain(&nd.h).norm_squared() * w).f64())
        .sum()
}

/// Result of comparing T*(A) = Q(A)/(n μ(F)) with the τ-pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct TStarCheck {
    /// max |⟨Q(A)/(nμ), f⟩_{L²_H} − ⟨A, T_f⟩_τ| with the right side from the
    /// adjoint symbol through tr(f♯ Q(A)).
    pub residual: f64,
    /// Pairings ⟨T*(A), f⟩ for each dictionary symbol.
    pub pairings: Vec<Cx<f64>>,
}

pub fn t_star_check(
    a: &OperatorMatrix<f64>,
    model: &BlockModel<f64>,
    dictionary: &[MatrixSymbol<f64>],
    rule: &QuadratureRule<f64>,
) -> Result<TStarCheck, ToeplitzError> {
    let sym = BerezinSymbol::new(a, model)?;
    let r = model.rank() as f64;
    let mu = std::f64::consts::PI / 3.0;
    let s_vals: Vec<DMatrix<Cx<f64>>> = rule.nodes.iter().map(|nd| sym.s(&nd.h)).collect();
    let mut residual = 0.0f64;
    let mut pairings = Vec::with_capacity(dictionary.len());
    for f in dictionary {
        let mut lhs = czero::<f64>();
        for ((nd, &w), s) in rule.nodes.iter().zip(&rule.weights).zip(&s_vals) {
            let fh = f.twisted_on_domain(&nd.h);
            lhs += (s * fh.adjoint()).trace() * w;
        }
        lhs /= r * mu;
        let sharp = f.adjoint();
        let rhs = trace_via_q(a, model, |z| sharp.value_on_domain(z), rule)?;
        residual = residual.max((lhs - rhs).norm());
        pairings.push(lhs);
    }
    Ok(TStarCheck { residual, pairings })
}

/// One rung of the density ladder.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DensityRung {
    pub weight: u32,
    pub size: usize,
    /// ‖t − Σ c_i d_i‖ / ‖t‖ in L²(F, dμ).
    pub symbol_residual: f64,
    /// ‖T_t − Σ c_i T_{d_i}‖_τ / ‖T_t‖_τ.
    pub operator_residual: f64,
    /// Ridge added to the operator Gram matrix, relative to its mean diagonal.
    pub ridge: f64,
    /// max |G_Q − G_τ| / max |G_τ| between the Gram matrix from the Q-pairing
    /// ∫ d_j tr Q(T_{d_i}*) and the one from τ(T_{d_i}* T_{d_j}).
    pub gram_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DensityCurve {
    pub target_norm: f64,
    pub target_tau_norm: f64,
    pub rungs: Vec<DensityRung>,
}

/// Relative singular-value cut for the symbol-level least squares.
const LSQ_RCOND: f64 = 1e-12;

/// Projects `target` onto span{(f_i, g_j)_k} for k running through `weights`,
/// in L²(F, dμ) and, through the Toeplitz map on H_m, in the τ-2-norm.
///
/// The τ-norm is ‖X‖²_τ = Tr(X W X*) with the trace weights W of the rule, so
/// the operator problem is an ordinary least-squares problem for the columns
/// vec(T_{d_i} W^{1/2}). Its Gram matrix is positive by construction; the
/// Q-pairing Gram matrix is compared against it and the gap reported.
pub fn density_experiment(
    weights: &[u32],
    target: &InvariantSymbol<f64>,
    m: u32,
    n: usize,
    depth: usize,
    nodes: &DiskNodes<f64>,
    frule: &QuadratureRule<f64>,
) -> Result<DensityCurve, ToeplitzError> {
    let model = BergmanModel::<f64>::new(m, n)?;
    let block = BlockModel::scalar(model.clone());
    let root_w = {
        let tw = TraceWeights::new(&block, frule)?;
        let eig = tw.w[0].clone().symmetric_eigen();
        let vals = eig.eigenvalues.map(|v| cx(v.max(0.0).sqrt(), 0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.adjoint()
    };
    let wsqrt: Vec<f64> = frule.weights.iter().map(|w| w.sqrt()).collect();
    let sample = |s: &InvariantSymbol<f64>| -> DVector<Cx<f64>> {
        DVector::from_iterator(
            frule.len(),
            frule.nodes.iter().zip(&wsqrt).map(|(nd, w)| s.eval_reduced(&nd.h) * *w),
        )
    };
    let op_column = |s: &InvariantSymbol<f64>| -> (DVector<Cx<f64>>, DMatrix<Cx<f64>>) {
        let t = toeplitz_matrix(s, &model, nodes).data;
        let v = &t * &root_w;
        (DVector::from_column_slice(v.as_slice()), t)
    };
    // ∫ f tr Q(T_d*) dμ/μ(F) = τ(T_d* T_f) through the Q-pairing; the
    // weighted symbol of T_d* at the nodes is computed once per operator.
    let adjoint_symbol = |td: &DMatrix<Cx<f64>>| -> DVector<Cx<f64>> {
        let adj = td.adjoint();
        DVector::from_iterator(
            frule.len(),
            frule.nodes.iter().zip(&wsqrt).map(|(nd, w)| symbol_s_scalar(&adj, &model, &nd.h) * *w),
        )
    };
    let q_pair = |sd: &DVector<Cx<f64>>, f: &DVector<Cx<f64>>| -> Cx<f64> {
        sd.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<Cx<f64>>() * (3.0 / std::f64::consts::PI)
    };
    let t_sym = sample(target);
    let target_norm = t_sym.norm();
    let (t_op, _) = op_column(target);
    let target_tau_norm = t_op.norm();

    let mut sym_cols: Vec<DVector<Cx<f64>>> = Vec::new();
    let mut op_cols: Vec<DVector<Cx<f64>>> = Vec::new();
    let mut adj_syms: Vec<DVector<Cx<f64>>> = Vec::new();
    let mut rungs = Vec::with_capacity(weights.len());
    for &k in weights {
        let basis = cusp_basis(k, depth)?;
        for f in &basis {
            for g in &basis {
                let d = InvariantSymbol::pairing(f, g)?;
                let col = sample(&d);
                let norm = col.norm();
                let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
                let scaled = InvariantSymbol::Combination(vec![(cx(scale, 0.0), d)]);
                sym_cols.push(col * cx(scale, 0.0));
                let (v, t) = op_column(&scaled);
                op_cols.push(v);
                adj_syms.push(adjoint_symbol(&t));
            }
        }
        let size = sym_cols.len();
        let symbol_residual = lsq_residual(&sym_cols, &t_sym)? / target_norm;
        let a = DMatrix::from_columns(&op_cols);
        let gram = a.adjoint() * &a;
        let rhs = a.adjoint() * &t_op;
        let (coef, ridge) = ridge_solve(&gram, &rhs)?;
        let operator_residual = (&t_op - &a * coef).norm() / target_tau_norm;
        let gmax = gram.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut gap = 0.0f64;
        for i in 0..size {
            for j in 0..size {
                gap = gap.max((q_pair(&adj_syms[i], &sym_cols[j]) - gram[(i, j)]).norm());
            }
        }
        rungs.push(DensityRung {
            weight: k,
            size,
            symbol_residual,
            operator_residual,
            ridge,
            gram_discrepancy: gap / gmax,
        });
    }
    Ok(DensityCurve { target_norm, target_tau_norm, rungs })
}

/// ‖t − A c‖ for the least-squares c over the given columns.
fn lsq_residual(cols: &[DVector<Cx<f64>>], t: &DVector<Cx<f64>>) -> Result<f64, ToeplitzError> {
    if cols.is_empty() {
        return Ok(t.norm());
    }
    let a = DMatrix::from_columns(cols);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let c = svd.solve(t, LSQ_RCOND * smax).map_err(|e| ToeplitzError::IllConditioned(e.to_string()))?;
    Ok((t - a * c).norm())
}

/// Solves G c = b for a Hermitian Gram matrix, adding the smallest ridge
/// λ ∈ {0, 1e−14, 1e−13, …}·tr G/size for which Cholesky succeeds.
fn ridge_solve(gram: &DMatrix<Cx<f64>>, rhs: &DVector<Cx<f64>>) -> Result<(DVector<Cx<f64>>, f64), ToeplitzError> {
    let size = gram.nrows();
    if size == 0 {
        return Ok((DVector::zeros(0), 0.0));
    }
    let scale = gram.trace().re / size as f64;
    let mut ridge = 0.0;
    for step in 0..=12 {
        let g = gram + DMatrix::from_diagonal_element(size, size, cx(ridge * scale, 0.0));
        if let Some(ch) = g.cholesky() {
            return Ok((ch.solve(rhs), ridge));
        }
        ridge = 10f64.powi(step - 14);
    }
    Err(ToeplitzError::IllConditioned(format!("Gram matrix of size {size} not positive with ridge up to {ridge:e}")))
}
