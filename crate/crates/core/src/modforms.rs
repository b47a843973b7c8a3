//! Modular forms for SL(2,ℤ): exact q-expansions, evaluation anywhere on ℍ,
//! Petersson products, Γ-invariant symbols and Poincaré series.
//!
//! Convention: a weight-k form satisfies f(γz) = (cz+d)^k f(z).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypgeom::{
    enumerate_gamma, reduce_to_fundamental, DiskMap, GeomError, HPoint, Sl2z,
    DEFAULT_GROUP_CAP,
};
use crate::quad::{integrate, Domain, QuadError, QuadratureRule};
use crate::scalar::{cabs, cis, cpowi, creal, czero, Cx, Real};

#[derive(Debug, Error)]
pub enum ModError {
    #[error("weight {0} is not an even integer ≥ 4")]
    BadWeight(u32),
    #[error("S_{0} is empty")]
    EmptySpace(u32),
    #[error("weights differ: {0} vs {1}")]
    WeightMismatch(u32, u32),
    #[error("q-series tail bound {bound:e} exceeds tolerance {tol:e}")]
    TailTooLarge { bound: f64, tol: f64 },
    #[error("rule is not on the fundamental domain")]
    WrongDomain,
    #[error("point set is not Γ-inequivalent: {0} and {1}")]
    EquivalentPoints(usize, usize),
    #[error("orbit constraints are numerically singular (rank {rank} of {needed})")]
    RankDeficient { rank: usize, needed: usize },
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("malformed q-expansion: {0}")]
    Format(String),
}

/// Truncated q-expansion Σ_{n≤M} a_n qⁿ of a weight-k form, exact over ℤ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QExpansion {
    pub weight: u32,
    pub coeffs: Vec<BigInt>,
    pub cuspidal: bool,
}

impl QExpansion {
    pub fn new(weight: u32, coeffs: Vec<BigInt>) -> Result<Self, ModError> {
        if weight < 4 || weight % 2 == 1 {
            return Err(ModError::BadWeight(weight));
        }
        if coeffs.is_empty() {
            return Err(ModError::Format("no coefficients".into()));
        }
        let cuspidal = coeffs[0].is_zero();
        Ok(Self { weight, coeffs, cuspidal })
    }

    /// Index M of the last stored coefficient.
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, n: usize) -> &BigInt {
        &self.coeffs[n]
    }

    /// Product, truncated to the shorter of the two expansions.
    pub fn mul(&self, other: &Self) -> Self {
        let m = self.order().min(other.order());
        let mut out = vec![BigInt::zero(); m + 1];
        for (i, a) in self.coeffs.iter().enumerate().take(m + 1) {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate().take(m + 1 - i) {
                out[i + j] += a * b;
            }
        }
        let cuspidal = out[0].is_zero();
        Self { weight: self.weight + other.weight, coeffs: out, cuspidal }
    }

    /// Coefficientwise a·self + b·other for equal weights.
    pub fn combine(&self, a: &BigInt, other: &Self, b: &BigInt) -> Result<Self, ModError> {
        if self.weight != other.weight {
            return Err(ModError::WeightMismatch(self.weight, other.weight));
        }
        let m = self.order().min(other.order());
        let coeffs: Vec<BigInt> =
            (0..=m).map(|n| a * &self.coeffs[n] + b * &other.coeffs[n]).collect();
        let cuspidal = coeffs[0].is_zero();
        Ok(Self { weight: self.weight, coeffs, cuspidal })
    }

    pub fn pow(&self, e: u32) -> Self {
        let mut acc = Self {
            weight: 0,
            coeffs: {
                let mut v = vec![BigInt::zero(); self.order() + 1];
                v[0] = BigInt::one();
                v
            },
            cuspidal: false,
        };
        for _ in 0..e {
            acc = acc.mul(self);
        }
        acc
    }

    /// Coefficients as floats.
    pub fn float_coeffs<T: Real>(&self) -> Vec<T> {
        self.coeffs.iter().map(|c| T::lit(c.to_f64().unwrap_or(f64::INFINITY))).collect()
    }

    /// Smallest C with |a_n| ≤ C n^k for 1 ≤ n ≤ M.
    pub fn growth_constant(&self) -> f64 {
        let k = self.weight as f64;
        (1..=self.order())
            .map(|n| self.coeffs[n].abs().to_f64().unwrap_or(f64::INFINITY) / (n as f64).powf(k))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        let file = QExpansionFile {
            format: QEXP_FORMAT.into(),
            weight: self.weight,
            order: self.order(),
            cuspidal: self.cuspidal,
            coeffs: self.coeffs.iter().map(|c| c.to_string()).collect(),
        };
        serde_json::to_string(&file).expect("q-expansion serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModError> {
        let file: QExpansionFile =
            serde_json::from_str(text).map_err(|e| ModError::Format(e.to_string()))?;
        if file.format != QEXP_FORMAT {
            return Err(ModError::Format(format!("unknown format {}", file.format)));
        }
        if file.coeffs.len() != file.order + 1 {
            return Err(ModError::Format("coefficient count does not match M".into()));
        }
        let coeffs = file
            .coeffs
            .iter()
            .map(|s| s.parse::<BigInt>().map_err(|e| ModError::Format(format!("{s}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let f = Self::new(file.weight, coeffs)?;
        if f.cuspidal != file.cuspidal {
            return Err(ModError::Format("cuspidal flag disagrees with a_0".into()));
        }
        Ok(f)
    }
}

impl fmt::Display for QExpansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "weight {} (M = {}):", self.weight, self.order())?;
        for (n, c) in self.coeffs.iter().enumerate().take(6) {
            write!(f, " {c}q^{n}")?;
        }
        if self.order() > 5 {
            write!(f, " + …")?;
        }
        Ok(())
    }
}

const QEXP_FORMAT: &str = "qexp_v1";

#[derive(Serialize, Deserialize)]
struct QExpansionFile {
    format: String,
    weight: u32,
    #[serde(rename = "M")]
    order: usize,
    cuspidal: bool,
    coeffs: Vec<String>,
}

/// Bernoulli numbers B_0 … B_n (B_1 = −1/2).
pub fn bernoulli(n: usize) -> Vec<BigRational> {
    let mut b: Vec<BigRational> = Vec::with_capacity(n + 1);
    for m in 0..=n {
        if m == 0 {
            b.push(BigRational::one());
            continue;
        }
        let mut s = BigRational::zero();
        let mut binom = BigInt::one();
        for (j, bj) in b.iter().enumerate() {
            s += BigRational::from_integer(binom.clone()) * bj;
            binom = binom * BigInt::from(m + 1 - j) / BigInt::from(j + 1);
        }
        b.push(-s / BigRational::from_integer(BigInt::from(m + 1)));
    }
    b
}

/// σ_e(n) by brute force over divisors.
pub fn divisor_sum(n: u64, e: u32) -> BigInt {
    let mut s = BigInt::zero();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            s += BigInt::from(d).pow(e);
            let q = n / d;
            if q != d {
                s += BigInt::from(q).pow(e);
            }
        }
        d += 1;
    }
    s
}

/// E_k = 1 − (2k/B_k) Σ σ_{k−1}(n) qⁿ.
pub fn eisenstein_qexp(k: u32, m: usize) -> Result<QExpansion, ModError> {
    if k < 4 || k % 2 == 1 {
        return Err(ModError::BadWeight(k));
    }
    let bk = bernoulli(k as usize).pop().expect("non-empty");
    let c = -BigRational::from_integer(BigInt::from(2 * k)) / bk;
    if !c.is_integer() {
        return Err(ModError::Format(format!("E_{k} is not integral")));
    }
    let c = c.to_integer();
    let mut coeffs = vec![BigInt::one()];
    coeffs.extend((1..=m as u64).map(|n| &c * divisor_sum(n, k - 1)));
    QExpansion::new(k, coeffs)
}

/// Δ = q Π_{n≤M} (1 − qⁿ)²⁴ truncated at q^M.
pub fn delta_qexp(m: usize) -> QExpansion {
    // Π (1 − qⁿ) up to q^{M−1}, then raise to the 24th power.
    let len = m.max(1);
    let mut p = vec![BigInt::zero(); len];
    p[0] = BigInt::one();
    for n in 1..len {
        for j in (n..len).rev() {
            let t = p[j - n].clone();
            p[j] -= t;
        }
    }
    let mut acc = vec![BigInt::zero(); len];
    acc[0] = BigInt::one();
    for _ in 0..24 {
        let mut next = vec![BigInt::zero(); len];
        for (i, a) in acc.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in p.iter().enumerate().take(len - i) {
                next[i + j] += a * b;
            }
        }
        acc = next;
    }
    let mut coeffs = vec![BigInt::zero()];
    coeffs.extend(acc.into_iter().take(m));
    QExpansion { weight: 12, coeffs, cuspidal: true }
}

/// dim S_k for SL(2,ℤ), from the classical formula.
pub fn cusp_dimension(k: u32) -> usize {
    if k < 12 || k % 2 == 1 {
        return 0;
    }
    let q = (k / 12) as usize;
    if k % 12 == 2 {
        q - 1
    } else {
        q
    }
}

/// Basis of S_k: Δ·E_4^a E_6^b (4a + 6b = k − 12) in reduced echelon form,
/// each row scaled to primitive integers with positive leading coefficient.
pub fn cusp_basis(k: u32, m: usize) -> Result<Vec<QExpansion>, ModError> {
    if k < 12 || k % 2 == 1 {
        return Err(ModError::EmptySpace(k));
    }
    let m = m.max(1);
    let delta = delta_qexp(m);
    let e4 = eisenstein_qexp(4, m)?;
    let e6 = eisenstein_qexp(6, m)?;
    let rest = k - 12;
    let mut rows: Vec<Vec<BigRational>> = Vec::new();
    for b in 0..=rest / 6 {
        let r4 = rest - 6 * b;
        if r4 % 4 != 0 {
            continue;
        }
        let f = delta.mul(&e4.pow(r4 / 4)).mul(&e6.pow(b));
        rows.push(f.coeffs.iter().map(|c| BigRational::from_integer(c.clone())).collect());
    }
    let rows = reduced_echelon(rows);
    let forms = rows
        .into_iter()
        .map(|r| QExpansion { weight: k, coeffs: primitive_integers(&r), cuspidal: true })
        .collect::<Vec<_>>();
    if forms.is_empty() {
        return Err(ModError::EmptySpace(k));
    }
    Ok(forms)
}

fn reduced_echelon(mut rows: Vec<Vec<BigRational>>) -> Vec<Vec<BigRational>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for col in 0..ncols {
        let Some(p) = (rank..rows.len()).find(|&i| !rows[i][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, p);
        let piv = rows[rank][col].clone();
        for v in rows[rank].iter_mut() {
            *v /= piv.clone();
        }
        for i in 0..rows.len() {
            if i != rank && !rows[i][col].is_zero() {
                let f = rows[i][col].clone();
                for j in 0..ncols {
                    let t = &rows[rank][j] * &f;
                    rows[i][j] -= t;
                }
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rows.truncate(rank);
    rows
}

fn primitive_integers(row: &[BigRational]) -> Vec<BigInt> {
    let lcm = row.iter().fold(BigInt::one(), |acc, r| acc.lcm(r.denom()));
    let ints: Vec<BigInt> = row.iter().map(|r| (r * &lcm).to_integer()).collect();
    let g = ints.iter().fold(BigInt::zero(), |acc, v| acc.gcd(v));
    let lead_neg = ints.iter().find(|v| !v.is_zero()).is_some_and(|v| v.is_negative());
    let g = if g.is_zero() { BigInt::one() } else { g };
    let g = if lead_neg { -g } else { g };
    ints.into_iter().map(|v| v / &g).collect()
}

/// A form value with the estimated q-series truncation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormValue<T> {
    pub value: Cx<T>,
    pub tail_bound: f64,
}

/// Default absolute tolerance for the q-series tail.
pub const TAIL_TOLERANCE: f64 = 1e-13;

/// Evaluates f at z via z* = γz ∈ F: f(z) = (cz+d)^{−k} f(z*).
pub fn eval_form<T: Real>(f: &QExpansion, z: &HPoint<T>) -> Result<FormValue<T>, ModError> {
    let red = reduce_to_fundamental(z)?;
    let FormValue { value, tail_bound } = eval_series(f, &red.zstar, TAIL_TOLERANCE)?;
    let [_, _, c, d] = crate::hypgeom::Mobius::<T>::entries(&red.gamma);
    let j = z.z() * c + creal(d);
    let jk = cpowi(j, -(f.weight as i32));
    Ok(FormValue { value: value * jk, tail_bound: tail_bound * cabs(jk).f64() })
}

/// Sums the q-series directly at z (no reduction). Terms whose bound falls
/// below the rounding level of the leading term are skipped.
pub fn eval_series<T: Real>(f: &QExpansion, z: &HPoint<T>, tol: f64) -> Result<FormValue<T>, ModError> {
    let r = (-2.0 * std::f64::consts::PI * z.y.f64()).exp();
    let k = f.weight as f64;
    let c = f.growth_constant().max(1.0);
    let bound = |n: usize| c * (n as f64).powf(k) * r.powi(n as i32);
    // Stop once the term bound has decayed below 1e−20 of the largest one.
    let lead = (1..=f.order()).map(bound).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut cut = f.order();
    for n in 1..=f.order() {
        if bound(n) < 1e-20 * lead && (n as f64) * r.ln().abs() > k {
            cut = n;
            break;
        }
    }
    let tail = tail_sum(c, k, r, cut);
    if tail > tol.max(1e-20 * lead) && tail > tol {
        return Err(ModError::TailTooLarge { bound: tail, tol });
    }
    let q = cis(T::two_pi() * z.x) * T::lit(r);
    let coeffs = f.float_coeffs::<T>();
    let mut acc = czero::<T>();
    for n in (0..=cut.min(f.order())).rev() {
        acc = acc * q + creal(coeffs[n]);
    }
    Ok(FormValue { value: acc, tail_bound: tail })
}

/// Σ_{n>cut} C n^k rⁿ, bounded by a geometric series once the ratio is < 1.
fn tail_sum(c: f64, k: f64, r: f64, cut: usize) -> f64 {
    let n0 = cut as f64 + 1.0;
    let ratio = r * ((n0 + 1.0) / n0).powf(k);
    if ratio >= 1.0 {
        return f64::INFINITY;
    }
    c * n0.powf(k) * r.powf(n0) / (1.0 - ratio)
}

/// Petersson product (1/μ(F)) ∫_F f ḡ y^k dμ with μ(F) = π/3.
pub fn petersson<T: Real>(
    f: &QExpansion,
    g: &QExpansion,
    rule: &QuadratureRule<T>,
) -> Result<Cx<T>, ModError> {
    if f.weight != g.weight {
        return Err(ModError::WeightMismatch(f.weight, g.weight));
    }
    if rule.domain != Domain::FundamentalDomain {
        return Err(ModError::WrongDomain);
    }
    let k = f.weight as i32;
    let total: Cx<T> = integrate(rule, |n| -> Result<Cx<T>, ModError> {
        let a = eval_series(f, &n.h, TAIL_TOLERANCE)?.value;
        let b = eval_series(g, &n.h, TAIL_TOLERANCE)?.value;
        Ok(a * b.conj() * n.h.y.powi(k))
    })?;
    Ok(total * (T::lit(3.0) / T::pi()))
}

/// Petersson Gram matrix of a list of forms of equal weight.
pub fn petersson_gram(forms: &[QExpansion], rule: &QuadratureRule<f64>) -> Result<DMatrix<Cx<f64>>, ModError> {
    let n = forms.len();
    let mut g = DMatrix::from_element(n, n, czero());
    for i in 0..n {
        for j in i..n {
            let v = petersson(&forms[i], &forms[j], rule)?;
            g[(i, j)] = v;
            g[(j, i)] = v.conj();
        }
    }
    Ok(g)
}

/// Float copy of a q-expansion for repeated evaluation on F.
#[derive(Debug, Clone)]
pub struct PreparedForm<T> {
    pub form: QExpansion,
    coeffs: Vec<T>,
    growth: f64,
}

impl<T: Real> PreparedForm<T> {
    /// Fails if the expansion is too short to evaluate to [`TAIL_TOLERANCE`] on F.
    pub fn new(f: &QExpansion) -> Result<Self, ModError> {
        let corner = HPoint { x: T::lit(0.5), y: T::lit(3f64.sqrt() / 2.0) };
        eval_series::<T>(f, &corner, TAIL_TOLERANCE)?;
        Ok(Self { form: f.clone(), coeffs: f.float_coeffs(), growth: f.growth_constant().max(1.0) })
    }

    pub fn weight(&self) -> u32 {
        self.form.weight
    }

    /// f(z) for z with Im z ≥ √3/2, summed until terms drop below 1e−18 of the first.
    pub fn eval_reduced(&self, z: &HPoint<T>) -> Cx<T> {
        let (q, r) = nome(z);
        self.eval_nome(q, r)
    }

    /// f at the point with nome q = e^{2πiz}, |q| = r.
    pub fn eval_nome(&self, q: Cx<T>, r: f64) -> Cx<T> {
        let k = self.form.weight as i32;
        let first = self.coeffs[0].f64().abs().max(self.growth * r);
        let mut cut = self.coeffs.len() - 1;
        let mut rn = r;
        for n in 1..self.coeffs.len() {
            if self.growth * (n as f64).powi(k) * rn < 1e-18 * first {
                cut = n;
                break;
            }
            rn *= r;
        }
        let mut acc = czero::<T>();
        for n in (0..=cut).rev() {
            acc = acc * q + creal(self.coeffs[n]);
        }
        acc
    }

    /// f(z) anywhere, given z* = γz and the cocycle cz + d of γ.
    pub fn eval_with(&self, zstar: &HPoint<T>, cocycle: Cx<T>) -> Cx<T> {
        self.eval_reduced(zstar) * cpowi(cocycle, -(self.form.weight as i32))
    }
}

/// The nome q = e^{2πiz} and its modulus.
pub fn nome<T: Real>(z: &HPoint<T>) -> (Cx<T>, f64) {
    let r = (-2.0 * std::f64::consts::PI * z.y.f64()).exp();
    (cis(T::two_pi() * z.x) * T::lit(r), r)
}

type SymbolFn<T> = Arc<dyn Fn(&HPoint<T>) -> Cx<T> + Send + Sync>;

/// A bounded Γ-invariant function on ℍ.
#[derive(Clone)]
pub enum InvariantSymbol<T> {
    /// (f, g)_k = f(z) conj(g(z)) y^k for forms of weight k.
    Pairing { f: Arc<PreparedForm<T>>, g: Arc<PreparedForm<T>> },
    /// A function on F, extended to ℍ by invariance.
    OnDomain { name: String, func: SymbolFn<T> },
    /// Σ cᵢ sᵢ.
    Combination(Vec<(Cx<T>, InvariantSymbol<T>)>),
}

impl<T: Real> InvariantSymbol<T> {
    pub fn pairing(f: &QExpansion, g: &QExpansion) -> Result<Self, ModError> {
        if f.weight != g.weight {
            return Err(ModError::WeightMismatch(f.weight, g.weight));
        }
        Ok(Self::Pairing { f: Arc::new(PreparedForm::new(f)?), g: Arc::new(PreparedForm::new(g)?) })
    }

    pub fn on_domain(name: impl Into<String>, func: impl Fn(&HPoint<T>) -> Cx<T> + Send + Sync + 'static) -> Self {
        Self::OnDomain { name: name.into(), func: Arc::new(func) }
    }

    /// The constant function c.
    pub fn constant(c: Cx<T>) -> Self {
        Self::on_domain(format!("constant {:.6}", c.re.f64()), move |_| c)
    }

    pub fn eval(&self, z: &HPoint<T>) -> Result<Cx<T>, ModError> {
        Ok(self.eval_reduced(&reduce_to_fundamental(z)?.zstar))
    }

    /// Value at a point already reduced into F.
    pub fn eval_reduced(&self, zstar: &HPoint<T>) -> Cx<T> {
        match self {
            Self::Pairing { f, g } => {
                let (q, r) = nome(zstar);
                let a = f.eval_nome(q, r);
                let b = g.eval_nome(q, r);
                a * b.conj() * zstar.y.powi(f.weight() as i32)
            }
            Self::OnDomain { func, .. } => func(zstar),
            Self::Combination(terms) => {
                terms.iter().fold(czero(), |acc, (c, s)| acc + *c * s.eval_reduced(zstar))
            }
        }
    }

    /// The pointwise complex conjugate.
    pub fn conjugate(&self) -> Self {
        match self {
            Self::Pairing { f, g } => Self::Pairing { f: g.clone(), g: f.clone() },
            Self::OnDomain { name, func } => {
                let func = func.clone();
                Self::on_domain(format!("conj({name})"), move |z| func(z).conj())
            }
            Self::Combination(terms) => {
                Self::Combination(terms.iter().map(|(c, s)| (c.conj(), s.conjugate())).collect())
            }
        }
    }

    /// sup |value| over an n×n grid of F with y ≤ y_max.
    pub fn sup_on_grid(&self, n: usize, y_max: f64) -> Result<f64, ModError> {
        let mut sup = 0.0f64;
        for (x, y) in domain_grid(n, y_max) {
            let z = HPoint { x: T::lit(x), y: T::lit(y) };
            sup = sup.max(cabs(self.eval(&z)?).f64());
        }
        Ok(sup)
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Pairing { f, g } => format!(
                "(f, g)_{} pairing (M = {})",
                f.weight(),
                f.form.order().min(g.form.order())
            ),
            Self::OnDomain { name, .. } => name.clone(),
            Self::Combination(terms) => {
                let parts: Vec<String> = terms.iter().map(|(_, s)| s.describe()).collect();
                format!("combination of [{}]", parts.join(", "))
            }
        }
    }
}

impl<T> fmt::Debug for InvariantSymbol<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Pairing { f: a, .. } => write!(f, "Pairing(weight {})", a.form.weight),
            Self::OnDomain { name, .. } => write!(f, "OnDomain({name})"),
            Self::Combination(terms) => write!(f, "Combination({} terms)", terms.len()),
        }
    }
}

/// Grid points of F: x ∈ [−1/2, 1/2], y from the arc to y_max.
pub fn domain_grid(n: usize, y_max: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        let x = -0.5 + (i as f64 + 0.5) / n as f64;
        let y0 = (1.0 - x * x).sqrt();
        for j in 0..n {
            let t = (j as f64 + 0.5) / n as f64;
            pts.push((x, y0 * (y_max / y0).powf(t)));
        }
    }
    pts
}

/// Polynomial Σ a_j w^j on the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskPolynomial<T: Real> {
    pub coeffs: Vec<Cx<T>>,
}

impl<T: Real> DiskPolynomial<T> {
    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn eval(&self, w: Cx<T>) -> Cx<T> {
        self.coeffs.iter().rev().fold(czero(), |acc, &a| acc * w + a)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == T::zero())
    }
}

/// Terms of a Γ-sum with max-entry height exactly `height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub height: i64,
    pub count: usize,
    /// Σ |term| over the shell.
    pub mass: f64,
}

impl Shell {
    /// Mean |term| per element; the per-shell element count fluctuates
    /// arithmetically, the mean decays like a power of the height.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mass / self.count as f64
        }
    }
}

/// Partial Poincaré sum with per-shell diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincareValue<T> {
    pub value: Cx<T>,
    pub shells: Vec<Shell>,
    /// Outer-shell mass plus the power-law estimate of everything beyond it.
    pub tail: f64,
}

/// P_{m,f}(w) = Σ_γ J_𝔻(γ,w)^m f(γw) over enumerate_gamma(height), w = φ(z).
pub fn poincare_series<T: Real>(
    m: u32,
    poly: &DiskPolynomial<T>,
    z: &HPoint<T>,
    height: i64,
) -> Result<PoincareValue<T>, ModError> {
    let group = enumerate_gamma(height, DEFAULT_GROUP_CAP)?;
    Ok(poincare_with(m, poly, z.to_disk().w, &group, height))
}

/// Poincaré sum over a precomputed group list of heights ≤ `height`.
pub fn poincare_with<T: Real>(
    m: u32,
    poly: &DiskPolynomial<T>,
    w: Cx<T>,
    group: &[Sl2z],
    height: i64,
) -> PoincareValue<T> {
    let mut shells: Vec<Shell> =
        (1..=height.max(0)).map(|h| Shell { height: h, count: 0, mass: 0.0 }).collect();
    let mut terms = Vec::with_capacity(group.len());
    for g in group {
        let d = DiskMap::<T>::of(g);
        let t = cpowi(d.jacobian(w), m as i32) * poly.eval(d.apply(w));
        let h = g.height() as usize;
        if h >= 1 && h <= shells.len() {
            shells[h - 1].count += 1;
            shells[h - 1].mass += cabs(t).f64();
        }
        terms.push(t);
    }
    let value = crate::quad::tree_reduce(terms).unwrap_or_else(czero);
    let tail = tail_estimate(&shells);
    PoincareValue { value, shells, tail }
}

/// Outer-shell mass plus Σ_{h>H} (dN/dh)·mean(h), with mean(h) ∝ h^{−p} fitted
/// on the outer half of the shells and N(h) ≈ κh² fitted from the total count.
pub fn tail_estimate(shells: &[Shell]) -> f64 {
    let Some(outer) = shells.last() else {
        return f64::INFINITY;
    };
    let big_h = outer.height as f64;
    let fit: Vec<(f64, f64)> = shells
        .iter()
        .filter(|s| 2 * s.height >= outer.height && s.count > 0 && s.mass > 0.0)
        .map(|s| ((s.height as f64).ln(), s.mean().ln()))
        .collect();
    if fit.len() < 2 {
        return if outer.mass == 0.0 { 0.0 } else { f64::INFINITY };
    }
    let n = fit.len() as f64;
    let (sx, sy) = fit.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = fit
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    let p = -sxy / sxx;
    if !(p > 2.5) {
        return f64::INFINITY;
    }
    let total: usize = shells.iter().map(|s| s.count).sum();
    let kappa = total as f64 / (big_h * big_h);
    let mean_h = (my - p * (big_h.ln() - mx)).exp();
    outer.mass + 2.0 * kappa * mean_h * big_h * big_h / (p - 2.0)
}

/// Γ-invariant magnitude (1−|w|²)^m |P(w)|.
pub fn poincare_magnitude<T: Real>(m: u32, w: Cx<T>, p: Cx<T>) -> T {
    (T::one() - w.norm_sqr()).powi(m as i32) * cabs(p)
}

/// Result of fitting a polynomial whose Poincaré series hits given targets.
#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub poly: DiskPolynomial<f64>,
    pub achieved: Vec<Cx<f64>>,
    pub residual: f64,
    /// Numerical rank of the evaluation system.
    pub rank: usize,
    /// Rank below the number of points: the targets are only met in the
    /// least-squares sense.
    pub rank_deficient: bool,
    /// Singular values at or below this level were treated as zero.
    pub noise_floor: f64,
}

/// Default dictionary size for `separation_check`.
pub const SEPARATION_DICTIONARY: usize = 8;

/// Least-squares solve of P_{m,f}(z_i) = c_i over f ∈ span{1, w, …, w^{D−1}}.
///
/// Row i of the system holds the truncated Poincaré sums of the monomials at
/// z_i. Singular values below ten times the truncation tail of those sums are
/// discarded, so functionals that vanish in the limit (for example every
/// Poincaré series when S_{2m} = 0) are not fitted to truncation noise.
pub fn separation_check(
    points: &[HPoint<f64>],
    targets: &[Cx<f64>],
    m: u32,
    height: i64,
) -> Result<SeparationResult, ModError> {
    separation_with_dictionary(points, targets, m, height, SEPARATION_DICTIONARY)
}

pub fn separation_with_dictionary(
    points: &[HPoint<f64>],
    targets: &[Cx<f64>],
    m: u32,
    height: i64,
    dictionary: usize,
) -> Result<SeparationResult, ModError> {
    if points.len() != targets.len() {
        return Err(ModError::Format("points and targets differ in length".into()));
    }
    let reduced = points
        .iter()
        .map(reduce_to_fundamental)
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..points.len() {
        for j in 0..i {
            let (a, b) = (reduced[i].zstar, reduced[j].zstar);
            if (a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 {
                return Err(ModError::EquivalentPoints(j, i));
            }
        }
    }
    let group = enumerate_gamma(height, DEFAULT_GROUP_CAP)?;
    let d = dictionary.max(1);
    let mut a = DMatrix::from_element(points.len(), d, czero::<f64>());
    let mut floor = 0.0f64;
    for (i, p) in points.iter().enumerate() {
        let w = p.to_disk().w;
        let mut shells: Vec<Shell> =
            (1..=height).map(|h| Shell { height: h, count: 0, mass: 0.0 }).collect();
        let mut cols: Vec<Vec<Cx<f64>>> = vec![Vec::with_capacity(group.len()); d];
        for g in &group {
            let map = DiskMap::of(g);
            let jm = cpowi(map.jacobian(w), m as i32);
            let h = g.height() as usize;
            shells[h - 1].count += 1;
            shells[h - 1].mass += jm.norm();
            let v = map.apply(w);
            let mut pw = jm;
            for col in cols.iter_mut() {
                col.push(pw);
                pw *= v;
            }
        }
        for (j, col) in cols.into_iter().enumerate() {
            a[(i, j)] = crate::quad::tree_reduce(col).unwrap_or_else(czero);
        }
        // Monomials are bounded by 1 on the disk.
        floor = floor.max(tail_estimate(&shells));
    }
    let b = DVector::from_vec(targets.to_vec());
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let noise_floor = (10.0 * floor * (d as f64).sqrt()).max(1e-12 * smax);
    let rank = svd.singular_values.iter().filter(|&&s| s > noise_floor).count();
    let coeffs = if rank == 0 || b.iter().all(|c| c.norm() == 0.0) {
        DVector::from_element(d, czero())
    } else {
        svd.solve(&b, noise_floor).map_err(|_| ModError::RankDeficient { rank, needed: points.len() })?
    };
    let achieved = &a * &coeffs;
    let residual = (&achieved - &b).norm();
    Ok(SeparationResult {
        poly: DiskPolynomial { coeffs: coeffs.iter().copied().collect() },
        achieved: achieved.iter().copied().collect(),
        residual,
        rank,
        rank_deficient: rank < points.len(),
        noise_floor,
    })
}

/// Petersson normalization helper: ∫_F g dμ / μ(F).
pub fn average_over_domain(rule: &QuadratureRule<f64>, g: impl Fn(&HPoint<f64>) -> Cx<f64>) -> Result<Cx<f64>, ModError> {
    let total: Cx<f64> = integrate(rule, |n| Ok::<_, ModError>(g(&n.h)))?;
    Ok(total * (3.0 / std::f64::consts::PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypgeom::mobius_apply;
    use crate::scalar::{cone, cx};
    use crate::quad::fundamental_rule;
    use approx::assert_relative_eq;

    fn hp(x: f64, y: f64) -> HPoint<f64> {
        HPoint::new(x, y).unwrap()
    }

    #[test]
    fn bernoulli_examples() {
        let b = bernoulli(12);
        assert_eq!(b[1], BigRational::new((-1).into(), 2.into()));
        assert_eq!(b[4], BigRational::new((-1).into(), 30.into()));
        assert_eq!(b[6], BigRational::new(1.into(), 42.into()));
        assert_eq!(b[12], BigRational::new((-691).into(), 2730.into()));
    }

    #[test]
    fn eisenstein_examples() {
        let e4 = eisenstein_qexp(4, 5).unwrap();
        let e6 = eisenstein_qexp(6, 5).unwrap();
        assert_eq!(e4.coeffs[0], BigInt::one());
        assert_eq!(e4.coeffs[1], BigInt::from(240));
        assert_eq!(e4.coeffs[2], BigInt::from(240 * 9));
        assert_eq!(e6.coeffs[1], BigInt::from(-504));
        assert!(eisenstein_qexp(5, 3).is_err());
    }

    #[test]
    fn delta_examples() {
        let d = delta_qexp(10);
        let want = [0i64, 1, -24, 252, -1472, 4830, -6048, -16744, 84480, -113643, -115920];
        assert_eq!(d.coeffs, want.iter().map(|&v| BigInt::from(v)).collect::<Vec<_>>());
        assert!(d.cuspidal);
    }

    #[test]
    fn delta_from_eisenstein() {
        let m = 60;
        let e4 = eisenstein_qexp(4, m).unwrap();
        let e6 = eisenstein_qexp(6, m).unwrap();
        let diff = e4.pow(3).combine(&BigInt::one(), &e6.pow(2), &BigInt::from(-1)).unwrap();
        let d = delta_qexp(m);
        for n in 0..=m {
            assert_eq!(&diff.coeffs[n], &(&d.coeffs[n] * 1728));
        }
    }

    #[test]
    fn cusp_basis_dimensions() {
        for k in (12..=40).step_by(2) {
            let got = cusp_basis(k, 20).map_or(0, |b| b.len());
            assert_eq!(got, cusp_dimension(k), "k = {k}");
        }
        assert_eq!(cusp_basis(12, 5).unwrap()[0], delta_qexp(5));
        let e4 = eisenstein_qexp(4, 8).unwrap();
        assert_eq!(cusp_basis(16, 8).unwrap()[0], delta_qexp(8).mul(&e4));
        assert!(matches!(cusp_basis(10, 5), Err(ModError::EmptySpace(10))));
        assert!(matches!(cusp_basis(13, 5), Err(ModError::EmptySpace(13))));
    }

    #[test]
    fn echelon_leading_terms() {
        let b = cusp_basis(24, 20).unwrap();
        assert_eq!(b[0].coeffs[1], BigInt::one());
        assert_eq!(b[0].coeffs[2], BigInt::zero());
        assert_eq!(b[1].coeffs[1], BigInt::zero());
        assert!(b[1].coeffs[2].is_positive());
    }

    #[test]
    fn delta_periodicity_and_automorphy() {
        let d = delta_qexp(200);
        let a = eval_form(&d, &hp(0.0, 1.0)).unwrap().value;
        let b = eval_form(&d, &hp(1.0, 1.0)).unwrap().value;
        assert!((a - b).norm() < 1e-12);
        let z = hp(0.3, 1.4);
        let sz = mobius_apply(&Sl2z::S, &z);
        let lhs = eval_form(&d, &sz).unwrap().value;
        let rhs = cpowi(z.z(), 12) * eval_form(&d, &z).unwrap().value;
        assert!((lhs - rhs).norm() < 1e-9);
    }

    #[test]
    fn delta_at_i_matches_known_value() {
        // Δ(i) = Γ(1/4)^24 / (2^24 π^18).
        let g = 3.625_609_908_221_908_f64;
        let want = g.powi(24) / (2f64.powi(24) * std::f64::consts::PI.powi(18));
        let got = eval_form(&delta_qexp(50), &HPoint::<f64>::i()).unwrap().value;
        assert_relative_eq!(got.re, want, max_relative = 1e-12);
        assert!(got.im.abs() < 1e-18);
    }

    #[test]
    fn cusp_decay() {
        let d = delta_qexp(200);
        let mut last = f64::INFINITY;
        for j in 0..20 {
            let y = 2.0 + 0.5 * j as f64;
            let v = eval_form(&d, &hp(0.0, y)).unwrap().value.norm() * y.powi(6);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn tail_guard_trips_on_short_series() {
        let d = delta_qexp(2);
        let r = eval_series(&d, &hp(0.0, 0.9), 1e-15);
        assert!(matches!(r, Err(ModError::TailTooLarge { .. })));
    }

    #[test]
    fn petersson_basic_properties() {
        let rule = fundamental_rule::<f64>(6).unwrap();
        let d = delta_qexp(60);
        let dd = petersson(&d, &d, &rule).unwrap();
        assert!(dd.re > 0.0 && dd.im.abs() < 1e-20);
        // ⟨Δ, Δ⟩ ≈ 1.035362e−6 with this normalization.
        assert_relative_eq!(dd.re, 1.035_362_056_804_3e-6 * 3.0 / std::f64::consts::PI, max_relative = 1e-6);
        let e4 = eisenstein_qexp(4, 4).unwrap();
        assert!(matches!(petersson(&d, &e4, &rule), Err(ModError::WeightMismatch(12, 4))));
    }

    #[test]
    fn qexp_json_roundtrip() {
        let f = cusp_basis(24, 30).unwrap()[1].clone();
        assert_eq!(QExpansion::from_json(&f.to_json()).unwrap(), f);
        assert!(QExpansion::from_json("{\"format\":\"x\"}").is_err());
    }

    #[test]
    fn pairing_symbol_is_invariant_and_cuspidal() {
        let d = delta_qexp(100);
        let s = InvariantSymbol::<f64>::pairing(&d, &d).unwrap();
        let z = hp(0.37, 0.21);
        let zs = reduce_to_fundamental(&z).unwrap().zstar;
        let (a, b) = (s.eval(&z).unwrap(), s.eval(&zs).unwrap());
        assert!((a - b).norm() < 1e-8 * b.norm().max(1e-12));
        assert!(s.eval(&hp(0.1, 1e3)).unwrap().norm() < 1e-100);
    }

    #[test]
    fn zero_poincare_series() {
        let p = poincare_series(4, &DiskPolynomial::<f64>::zero(), &hp(0.1, 1.2), 4).unwrap();
        assert_eq!(p.value, czero());
    }

    #[test]
    fn separation_zero_targets() {
        let r = separation_check(&[HPoint::i(), hp(0.0, 2.0)], &[czero(), czero()], 6, 6).unwrap();
        assert!(r.poly.is_zero());
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn separation_rejects_equivalent_points() {
        let r = separation_check(&[HPoint::i(), hp(1.0, 1.0)], &[cone(), czero()], 6, 6);
        assert!(matches!(r, Err(ModError::EquivalentPoints(0, 1))));
    }

    #[test]
    fn single_point_separation() {
        for m in [6u32, 8, 10] {
            let r = separation_check(&[HPoint::i()], &[cone()], m, 8).unwrap();
            assert!(r.residual < 1e-8, "m = {m}: {}", r.residual);
        }
        // No weight-8 cusp forms: every P_{4,f} vanishes.
        let r = separation_check(&[HPoint::i()], &[cone()], 4, 8).unwrap();
        assert!(r.rank_deficient);
        assert!((r.residual - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shell_means_decay_and_tail_covers_automorphy() {
        let poly = DiskPolynomial { coeffs: vec![cone(), cx(0.5, 0.2), cx(0.0, -0.3)] };
        let z = hp(0.1, 1.2);
        let p = poincare_series(4, &poly, &z, 16).unwrap();
        for s in p.shells.windows(2).skip(3) {
            assert!(s[1].mean() < s[0].mean());
        }
        let w = z.to_disk().w;
        for g in [Sl2z::S, Sl2z::T, Sl2z::new(2, 1, 1, 1).unwrap()] {
            let pg = poincare_series(4, &poly, &mobius_apply(&g, &z), 16).unwrap();
            let res = (p.value - cpowi(DiskMap::of(&g).jacobian(w), 4) * pg.value).norm();
            assert!(res <= p.tail.max(pg.tail), "{g}: {res} > {}", p.tail);
        }
    }
}
