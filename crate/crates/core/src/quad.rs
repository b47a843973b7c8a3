//! Quadrature over the modular fundamental domain and weighted disk rules.
//!
//! * `fundamental_rule` integrates against dμ = y⁻²dxdy over F using the
//!   substitution u = 1/y, under which dμ = dx du on
//!   {|x| ≤ 1/2, 0 < u ≤ 1/√(1−x²)}.
//! * `weighted_disk_rule` integrates against (1−|w|²)^{m−2} dA over 𝔻.
//! * `TiledRule` spreads a fundamental-domain rule over the Γ-translates γF
//!   with d(i, γi) below a radius; it is how Γ-periodic integrands over ℍ are
//!   evaluated.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypgeom::{enumerate_psl_ball, mobius_apply, DPoint, GeomError, HPoint, Sl2z};
use crate::scalar::{cis, cx, Cx, Real};

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("integrand failed at node {index}: {message}")]
    Evaluation { index: usize, message: String },
    #[error("invalid rule parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("rule cache I/O failed for {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Integration domain and measure of a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// F with dμ = y⁻² dx dy.
    FundamentalDomain,
    /// 𝔻 with (1−|w|²)^{weight−2} dA.
    FullDisk { weight: u32 },
    /// 𝔻 with the Euclidean area dA, in hyperbolic polar coordinates.
    PolarDisk,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::FundamentalDomain => write!(f, "fundamental"),
            Domain::FullDisk { weight } => write!(f, "disk-m{weight}"),
            Domain::PolarDisk => write!(f, "polar-disk"),
        }
    }
}

/// A node carried in both models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node<T> {
    pub h: HPoint<T>,
    pub w: Cx<T>,
}

impl<T: Real> Node<T> {
    pub fn from_half_plane(h: HPoint<T>) -> Self {
        Self { h, w: h.to_disk().w }
    }

    pub fn from_disk(w: Cx<T>) -> Self {
        Self { h: DPoint { w }.to_half_plane(), w }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<Node<T>>,
    pub weights: Vec<T>,
    pub domain: Domain,
    pub level: usize,
    pub error_estimate: T,
}

impl<T: Real> QuadratureRule<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ wᵢ, the measure of the domain as seen by the rule.
    pub fn total_weight(&self) -> T {
        pairwise_sum(&self.weights)
    }
}

/// Values that a rule can accumulate.
pub trait Accumulate<T>: Sized {
    fn scaled(self, w: T) -> Self;
    fn plus(self, other: Self) -> Self;
}

impl<T: Real> Accumulate<T> for T {
    fn scaled(self, w: T) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl<T: Real> Accumulate<T> for Complex<T> {
    fn scaled(self, w: T) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl<T: Real> Accumulate<T> for DMatrix<Complex<T>> {
    fn scaled(self, w: T) -> Self {
        self * Complex::new(w, T::zero())
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl<T: Real> Accumulate<T> for DVector<Complex<T>> {
    fn scaled(self, w: T) -> Self {
        self * Complex::new(w, T::zero())
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

/// Pairwise tree reduction in fixed order.
pub fn tree_reduce<T, V: Accumulate<T>>(mut items: Vec<V>) -> Option<V> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.plus(b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    tree_reduce::<T, T>(xs.to_vec()).unwrap_or_else(T::zero)
}

/// Σ wᵢ g(nodeᵢ) with deterministic pairwise summation.
///
/// Evaluation failures carry the offending node index.
pub fn integrate<T, V, E, G>(rule: &QuadratureRule<T>, g: G) -> Result<V, QuadError>
where
    T: Real,
    V: Accumulate<T>,
    E: fmt::Display,
    G: Fn(&Node<T>) -> Result<V, E>,
{
    let mut terms = Vec::with_capacity(rule.len());
    for (index, (node, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let v = g(node).map_err(|e| QuadError::Evaluation { index, message: e.to_string() })?;
        terms.push(v.scaled(w));
    }
    tree_reduce(terms).ok_or_else(|| QuadError::InvalidParameter("empty rule".into()))
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut x = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let nf = T::of(n);
    for i in 0..n.div_ceil(2) {
        let mut t = (T::pi() * (T::of(i) + T::lit(0.75)) / (nf + T::lit(0.5))).cos();
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, t);
            dp = d;
            let step = p / d;
            t -= step;
            if step.abs() <= T::default_epsilon() * T::lit(4.0) {
                let (_, d) = legendre_with_derivative(n, t);
                dp = d;
                break;
            }
        }
        let wi = T::lit(2.0) / ((T::one() - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = T::zero();
    }
    (x, w)
}

fn legendre_with_derivative<T: Real>(n: usize, x: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = x;
    if n == 0 {
        return (T::one(), T::zero());
    }
    for k in 2..=n {
        let kf = T::of(k);
        let p2 = ((T::lit(2.0) * kf - T::one()) * x * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = T::of(n) * (x * p1 - p0) / (x * x - T::one());
    (p1, d)
}

/// Gauss–Jacobi rule on [−1, 1] for the weight (1−x)^α (β = 0).
///
/// Golub–Welsch gives starting nodes; each is polished by Newton steps on the
/// three-term recurrence and the weights come from the Christoffel formula,
/// rescaled so that they sum to 2^{α+1}/(α+1).
pub fn gauss_jacobi<T: Real>(n: usize, alpha: T) -> (Vec<T>, Vec<T>) {
    let b = T::zero();
    let a = alpha;
    let two = T::lit(2.0);
    let mut jm = DMatrix::<T>::zeros(n, n);
    for k in 0..n {
        let kf = T::of(k);
        let s = two * kf + a + b;
        let diag = if k == 0 {
            (b - a) / (a + b + two)
        } else {
            (b * b - a * a) / (s * (s + two))
        };
        jm[(k, k)] = diag;
        if k + 1 < n {
            let k1 = kf + T::one();
            let s1 = two * k1 + a + b;
            let num = T::lit(4.0) * k1 * (k1 + a) * (k1 + b) * (k1 + a + b);
            let den = s1 * s1 * (s1 + T::one()) * (s1 - T::one());
            let off = (num / den).sqrt();
            jm[(k, k + 1)] = off;
            jm[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::new(jm);
    let mut x: Vec<T> = eig.eigenvalues.iter().copied().collect();
    x.sort_by(|p, q| p.partial_cmp(q).expect("finite eigenvalues"));
    let mut w = Vec::with_capacity(n);
    for xi in x.iter_mut() {
        for _ in 0..8 {
            let (p, d, _) = jacobi_with_derivative(n, a, *xi);
            let step = p / d;
            *xi -= step;
            if step.abs() <= T::default_epsilon() * T::lit(4.0) {
                break;
            }
        }
        let (_, d, _) = jacobi_with_derivative(n, a, *xi);
        w.push(T::one() / ((T::one() - *xi * *xi) * d * d));
    }
    let target = two.powf(a + T::one()) / (a + T::one());
    let scale = target / pairwise_sum(&w);
    for wi in w.iter_mut() {
        *wi *= scale;
    }
    (x, w)
}

/// (P_n, P_n′, P_{n−1}) for the Jacobi family with β = 0.
fn jacobi_with_derivative<T: Real>(n: usize, a: T, x: T) -> (T, T, T) {
    let two = T::lit(2.0);
    let b = T::zero();
    let mut p0 = T::one();
    if n == 0 {
        return (p0, T::zero(), T::zero());
    }
    let mut p1 = (a - b) / two + (a + b + two) * x / two;
    for k in 2..=n {
        let kf = T::of(k);
        let s = two * kf + a + b;
        let c1 = two * kf * (kf + a + b) * (s - two);
        let c2 = (s - T::one()) * (s * (s - two) * x + a * a - b * b);
        let c3 = two * (kf + a - T::one()) * (kf + b - T::one()) * s;
        let p2 = (c2 * p1 - c3 * p0) / c1;
        p0 = p1;
        p1 = p2;
    }
    let nf = T::of(n);
    let s = two * nf + a + b;
    let d = (nf * ((a - b) - s * x) * p1 + two * (nf + a) * (nf + b) * p0)
        / (s * (T::one() - x * x));
    (p1, d, p0)
}

/// Nodes per axis of the fundamental-domain rule at a level.
pub fn fundamental_nodes_per_axis(level: usize) -> usize {
    6 * level.max(1)
}

fn fundamental_rule_raw<T: Real>(level: usize) -> QuadratureRule<T> {
    let n = fundamental_nodes_per_axis(level);
    let (gx, gw) = gauss_legendre::<T>(n);
    let half = T::lit(0.5);
    let mut nodes = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (&tx, &wx) in gx.iter().zip(&gw) {
        let x = tx * half;
        let umax = T::one() / (T::one() - x * x).sqrt();
        for (&tu, &wu) in gx.iter().zip(&gw) {
            let u = (tu + T::one()) * half * umax;
            let h = HPoint { x, y: T::one() / u };
            nodes.push(Node::from_half_plane(h));
            weights.push(wx * half * wu * half * umax);
        }
    }
    QuadratureRule { nodes, weights, domain: Domain::FundamentalDomain, level, error_estimate: T::zero() }
}

/// Tensor Gauss rule for ∫_F g dμ; the error estimate compares with level − 1
/// (or level + 1 at level 1) on μ(F).
pub fn fundamental_rule<T: Real>(level: usize) -> Result<QuadratureRule<T>, QuadError> {
    if level == 0 {
        return Err(QuadError::InvalidParameter("level must be at least 1".into()));
    }
    let mut rule = fundamental_rule_raw::<T>(level);
    let other = fundamental_rule_raw::<T>(if level == 1 { 2 } else { level - 1 });
    rule.error_estimate = (rule.total_weight() - other.total_weight()).abs();
    Ok(rule)
}

/// Radial and angular node counts of the weighted disk rule at a level.
pub fn disk_nodes(level: usize) -> (usize, usize) {
    let nr = 10 * level.max(1);
    (nr, 2 * nr + 1)
}

/// Smallest disk level integrating Gram entries of degree < n exactly.
pub fn disk_level_for(n: usize) -> usize {
    n / 10 + 2
}

/// Polar rule for ∫_𝔻 g (1−|w|²)^{m−2} dA: Gauss–Jacobi in s = r², equispaced angles.
///
/// Exact for wʲw̄ᵏ whenever |j−k| < n_θ and j + k < 4 n_r.
pub fn weighted_disk_rule<T: Real>(m: u32, level: usize) -> Result<QuadratureRule<T>, QuadError> {
    if m < 2 {
        return Err(QuadError::InvalidParameter(format!("weight {m} < 2")));
    }
    if level == 0 {
        return Err(QuadError::InvalidParameter("level must be at least 1".into()));
    }
    let (nr, nt) = disk_nodes(level);
    let alpha = T::of(m as usize - 2);
    let (xs, ws) = gauss_jacobi::<T>(nr, alpha);
    let two = T::lit(2.0);
    let base = T::lit(0.25) / two.powf(alpha) * T::two_pi() / T::of(nt);
    let mut nodes = Vec::with_capacity(nr * nt);
    let mut weights = Vec::with_capacity(nr * nt);
    for (&x, &wj) in xs.iter().zip(&ws) {
        let r = ((T::one() + x) / two).sqrt();
        for l in 0..nt {
            let theta = T::two_pi() * T::of(l) / T::of(nt);
            nodes.push(Node::from_disk(cis(theta) * r));
            weights.push(base * wj);
        }
    }
    let exact = T::pi() / T::of(m as usize - 1);
    let total = pairwise_sum(&weights);
    Ok(QuadratureRule {
        nodes,
        weights,
        domain: Domain::FullDisk { weight: m },
        level,
        error_estimate: (total - exact).abs(),
    })
}

/// Monte-Carlo estimate of ∫_F g dμ by rejection sampling in (x, u = 1/y).
///
/// Returns (estimate, standard error).
pub fn monte_carlo_fundamental<R: Rng>(
    g: impl Fn(&HPoint<f64>) -> f64,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let umax = 2.0 / 3f64.sqrt();
    let area = umax;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let x: f64 = rng.gen_range(-0.5..0.5);
        let u: f64 = rng.gen_range(0.0..umax);
        let v = if u > 0.0 && u * u * (1.0 - x * x) <= 1.0 {
            g(&HPoint { x, y: 1.0 / u }) * area
        } else {
            0.0
        };
        s1 += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// A fundamental-domain rule together with Γ-translates covering a hyperbolic
/// ball around i.
///
/// Integrals over ℍ of a Γ-periodic density are computed as
/// Σ_γ Σ_i wᵢ h(γ zᵢ) with h(γ z) expressed through the value at zᵢ.
#[derive(Debug, Clone)]
pub struct TiledRule<T> {
    pub base: QuadratureRule<T>,
    /// PSL(2,ℤ) representatives with d(i, γi) ≤ radius.
    pub group: Vec<Sl2z>,
    pub radius: f64,
}

impl<T: Real> TiledRule<T> {
    pub fn new(base: QuadratureRule<T>, radius: f64, cap: usize) -> Result<Self, QuadError> {
        if base.domain != Domain::FundamentalDomain {
            return Err(QuadError::InvalidParameter("tiling needs a fundamental-domain rule".into()));
        }
        let group = enumerate_psl_ball(radius, cap)?;
        Ok(Self { base, group, radius })
    }

    pub fn node_count(&self) -> usize {
        self.base.len() * self.group.len()
    }

    /// Materializes the tiled nodes γ·zᵢ (group-major order) as a plain rule on ℍ with dμ weights.
    pub fn materialize(&self) -> Vec<(HPoint<T>, T)> {
        let mut out = Vec::with_capacity(self.node_count());
        for g in &self.group {
            for (node, &w) in self.base.nodes.iter().zip(&self.base.weights) {
                out.push((mobius_apply(g, &node.h), w));
            }
        }
        out
    }
}

/// Shape of a hyperbolic polar rule on 𝔻.
///
/// The radial variable is the hyperbolic distance d from 0 (r = tanh(d/2)),
/// cut at `d_max`, with `per_unit` Gauss–Legendre nodes on each unit panel.
/// Each circle carries an equispaced power-of-two number of angles, about
/// `oversample`·π·e^d, clamped to [`min_angles`, `max_angles`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarSpec {
    pub d_max: f64,
    pub per_unit: usize,
    pub oversample: f64,
    pub min_angles: usize,
    pub max_angles: usize,
}

impl PolarSpec {
    /// Rule used for operators truncated at `n`; finer with `level`.
    pub fn for_level(level: usize, n: usize) -> Self {
        let level = level.max(1) as f64;
        let grow = (4.0 * n.max(1) as f64).ln();
        Self {
            d_max: grow + 4.0 + 0.75 * level,
            per_unit: 4 + level as usize,
            oversample: 0.5 * level,
            min_angles: (2 * n + 16).next_power_of_two(),
            max_angles: 1 << (11 + level as usize).min(16),
        }
    }

    pub fn angles_at(&self, d: f64) -> usize {
        let want = (self.oversample * std::f64::consts::PI * d.exp()).ceil() as usize;
        want.next_power_of_two().clamp(self.min_angles, self.max_angles.max(self.min_angles))
    }
}

/// One circle |w| = r of a polar rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarCircle<T> {
    /// Hyperbolic distance from 0.
    pub d: T,
    pub r: T,
    /// 1 − r², computed as sech²(d/2).
    pub one_minus_r2: T,
    /// Radial weight for ∫ g r dr.
    pub weight: T,
    pub angles: usize,
}

impl<T: Real> PolarCircle<T> {
    /// Node at angle index q: w = r e^{2πiq/M}, with the half-plane image
    /// computed without cancellation near w = 1.
    pub fn node(&self, q: usize) -> Node<T> {
        let theta = T::two_pi() * T::of(q) / T::of(self.angles);
        let (s, c) = theta.sin_cos();
        let w = cx(self.r * c, self.r * s);
        let one_minus_r = T::lit(2.0) / (self.d.exp() + T::one());
        let half = (theta / T::lit(2.0)).sin();
        let den = one_minus_r * one_minus_r + T::lit(4.0) * self.r * half * half;
        let h = HPoint { x: -T::lit(2.0) * self.r * s / den, y: self.one_minus_r2 / den };
        Node { h, w }
    }
}

/// Polar rule for ∫_𝔻 g dA built from a [`PolarSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolarRule<T> {
    pub spec: PolarSpec,
    pub circles: Vec<PolarCircle<T>>,
}

impl<T: Real> PolarRule<T> {
    pub fn new(spec: PolarSpec) -> Result<Self, QuadError> {
        if !(spec.d_max > 0.0) || spec.per_unit == 0 || spec.min_angles == 0 {
            return Err(QuadError::InvalidParameter(format!("degenerate polar rule {spec:?}")));
        }
        let panels = spec.d_max.ceil() as usize;
        let width = spec.d_max / panels as f64;
        let (gx, gw) = gauss_legendre::<f64>(spec.per_unit);
        let mut circles = Vec::with_capacity(panels * spec.per_unit);
        for p in 0..panels {
            let a = p as f64 * width;
            for (&x, &wx) in gx.iter().zip(&gw) {
                let d = a + 0.5 * width * (x + 1.0);
                let dt = T::lit(d);
                let half = dt / T::lit(2.0);
                let sech = T::one() / half.cosh();
                let r = half.tanh();
                circles.push(PolarCircle {
                    d: dt,
                    r,
                    one_minus_r2: sech * sech,
                    weight: T::lit(0.5 * width * wx) * r * sech * sech / T::lit(2.0),
                    angles: spec.angles_at(d),
                });
            }
        }
        Ok(Self { spec, circles })
    }

    pub fn for_level(level: usize, n: usize) -> Result<Self, QuadError> {
        Self::new(PolarSpec::for_level(level, n))
    }

    pub fn len(&self) -> usize {
        self.circles.iter().map(|c| c.angles).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.circles.is_empty()
    }

    /// Flattened rule with node weights 2π/M times the radial weight.
    pub fn to_rule(&self) -> QuadratureRule<T> {
        let mut nodes = Vec::with_capacity(self.len());
        let mut weights = Vec::with_capacity(self.len());
        for c in &self.circles {
            let w = c.weight * T::two_pi() / T::of(c.angles);
            for q in 0..c.angles {
                nodes.push(c.node(q));
                weights.push(w);
            }
        }
        let total = pairwise_sum(&weights);
        QuadratureRule {
            nodes,
            weights,
            domain: Domain::PolarDisk,
            level: 0,
            error_estimate: (total - T::pi()).abs(),
        }
    }
}

/// Identifies a cached rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleKey {
    pub domain: Domain,
    pub level: usize,
}

impl RuleKey {
    pub fn file_name(&self) -> String {
        format!("rule_{}_l{}.json", self.domain, self.level)
    }
}

#[derive(Serialize, Deserialize)]
struct RuleFile {
    format: String,
    domain: Domain,
    level: usize,
    error_estimate: f64,
    /// (x, y, weight): half-plane coordinates for fundamental rules, disk
    /// coordinates (Re w, Im w) for disk rules.
    nodes: Vec<[f64; 3]>,
}

const RULE_FORMAT: &str = "rule_v1";

/// On-disk cache of `f64` rules keyed by (domain, level).
#[derive(Debug, Clone)]
pub struct RuleCache {
    dir: Option<PathBuf>,
}

impl RuleCache {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    /// A cache that never touches the filesystem.
    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn fundamental(&self, level: usize) -> Result<QuadratureRule<f64>, QuadError> {
        self.get(RuleKey { domain: Domain::FundamentalDomain, level }, || fundamental_rule(level))
    }

    pub fn disk(&self, m: u32, level: usize) -> Result<QuadratureRule<f64>, QuadError> {
        self.get(RuleKey { domain: Domain::FullDisk { weight: m }, level }, || {
            weighted_disk_rule(m, level)
        })
    }

    fn get(
        &self,
        key: RuleKey,
        build: impl FnOnce() -> Result<QuadratureRule<f64>, QuadError>,
    ) -> Result<QuadratureRule<f64>, QuadError> {
        let Some(dir) = &self.dir else { return build() };
        let path = dir.join(key.file_name());
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(rule) = decode_rule(&text, key) {
                return Ok(rule);
            }
        }
        let rule = build()?;
        let io = |e: std::io::Error| QuadError::Cache { path: path.clone(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(&path, encode_rule(&rule)).map_err(io)?;
        Ok(rule)
    }
}

/// Serializes a rule into the `rule_v1` JSON layout.
pub fn encode_rule(rule: &QuadratureRule<f64>) -> String {
    let nodes = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(n, &w)| match rule.domain {
            Domain::FundamentalDomain => [n.h.x, n.h.y, w],
            Domain::FullDisk { .. } | Domain::PolarDisk => [n.w.re, n.w.im, w],
        })
        .collect();
    let file = RuleFile {
        format: RULE_FORMAT.into(),
        domain: rule.domain,
        level: rule.level,
        error_estimate: rule.error_estimate,
        nodes,
    };
    serde_json::to_string(&file).expect("rule serializes")
}

fn decode_rule(text: &str, key: RuleKey) -> Result<QuadratureRule<f64>, String> {
    let file: RuleFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if file.format != RULE_FORMAT || file.domain != key.domain || file.level != key.level {
        return Err("stale cache entry".into());
    }
    let mut nodes = Vec::with_capacity(file.nodes.len());
    let mut weights = Vec::with_capacity(file.nodes.len());
    for [a, b, w] in file.nodes {
        nodes.push(match file.domain {
            Domain::FundamentalDomain => Node::from_half_plane(HPoint { x: a, y: b }),
            Domain::FullDisk { .. } | Domain::PolarDisk => Node::from_disk(cx(a, b)),
        });
        weights.push(w);
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        domain: file.domain,
        level: file.level,
        error_estimate: file.error_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre::<f64>(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert_relative_eq!(s, 2.0 / 13.0, epsilon = 1e-14);
    }

    #[test]
    fn jacobi_matches_beta_moments() {
        for &alpha in &[0.0, 2.0, 7.0, 10.0] {
            let (x, w) = gauss_jacobi::<f64>(12, alpha);
            // ∫(1−x)^α (1+x)^k dx = 2^{α+k+1} B(α+1, k+1).
            for k in 0..20 {
                let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (1.0 + x).powi(k)).sum();
                let mut beta = 1.0 / (alpha + 1.0);
                for j in 1..=k {
                    beta *= j as f64 / (alpha + 1.0 + j as f64);
                }
                let exact = 2f64.powf(alpha + k as f64 + 1.0) * beta;
                assert_relative_eq!(s, exact, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn fundamental_area() {
        let rule = fundamental_rule::<f64>(6).unwrap();
        assert!((rule.total_weight() - PI / 3.0).abs() < 1e-8);
        assert!(rule.nodes.iter().all(|n| n.h.in_fundamental_domain(1e-12)));
        assert!(rule.weights.iter().all(|&w| w > 0.0));
        let zero: f64 = integrate(&rule, |_| Ok::<f64, String>(0.0)).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn fundamental_area_error_never_grows() {
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let err = (fundamental_rule::<f64>(level).unwrap().total_weight() - PI / 3.0).abs();
            // Past the rounding floor the error only jitters.
            assert!(err <= last || err < 1e-14, "level {level}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn fundamental_rule_agrees_with_monte_carlo() {
        let rule = fundamental_rule::<f64>(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fs: Vec<Box<dyn Fn(&HPoint<f64>) -> f64>> = vec![
            Box::new(|_| 1.0),
            Box::new(|z| (-z.y).exp()),
            Box::new(|z| z.x * z.x / (1.0 + z.y)),
            Box::new(|z| 1.0 / (z.y * z.y)),
            Box::new(|z| (2.0 * PI * z.x).cos() * (-0.5 * z.y).exp()),
        ];
        for f in &fs {
            let q: f64 = integrate(&rule, |n| Ok::<f64, String>(f(&n.h))).unwrap();
            let (mc, se) = monte_carlo_fundamental(f, 200_000, &mut rng);
            assert!((q - mc).abs() < 3.0 * se + 1e-12, "{q} vs {mc} ± {se}");
        }
    }

    #[test]
    fn disk_rule_beta_integrals() {
        for m in 2..=12u32 {
            let rule = weighted_disk_rule::<f64>(m, 3).unwrap();
            assert_relative_eq!(rule.total_weight(), PI / (m as f64 - 1.0), max_relative = 1e-12);
        }
        let rule = weighted_disk_rule::<f64>(4, 3).unwrap();
        let odd: Complex<f64> = integrate(&rule, |n| Ok::<_, String>(n.w)).unwrap();
        assert!(odd.norm() < 1e-12);
        let cross: Complex<f64> =
            integrate(&rule, |n| Ok::<_, String>(n.w.powi(5) * n.w.conj().powi(3))).unwrap();
        assert!(cross.norm() < 1e-12);
    }

    #[test]
    fn integration_is_linear_and_commutes_with_conjugation() {
        let rule = fundamental_rule::<f64>(3).unwrap();
        let g = |n: &Node<f64>| cx((-n.h.y).exp(), n.h.x);
        let h = |n: &Node<f64>| cx(n.h.x * n.h.x, 1.0 / n.h.y);
        let (a, b) = (cx(0.3, -1.2), cx(2.0, 0.5));
        let ig: Cx<f64> = integrate(&rule, |n| Ok::<_, String>(g(n))).unwrap();
        let ih: Cx<f64> = integrate(&rule, |n| Ok::<_, String>(h(n))).unwrap();
        let lin: Cx<f64> = integrate(&rule, |n| Ok::<_, String>(a * g(n) + b * h(n))).unwrap();
        assert!((lin - (a * ig + b * ih)).norm() < 1e-12);
        let conj: Cx<f64> = integrate(&rule, |n| Ok::<_, String>(g(n).conj())).unwrap();
        assert!((conj - ig.conj()).norm() < 1e-14);
    }

    #[test]
    fn evaluation_errors_carry_the_node_index() {
        let rule = fundamental_rule::<f64>(1).unwrap();
        let r: Result<f64, _> = integrate(&rule, |n| if n.h.y > 2.0 { Err("boom") } else { Ok(1.0) });
        match r {
            Err(QuadError::Evaluation { index, .. }) => assert!(rule.nodes[index].h.y > 2.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RuleCache::in_dir(dir.path());
        let a = cache.fundamental(3).unwrap();
        let b = cache.fundamental(3).unwrap();
        assert_eq!(a, b);
        let d1 = cache.disk(6, 2).unwrap();
        let d2 = cache.disk(6, 2).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(encode_rule(&d1), encode_rule(&weighted_disk_rule(6, 2).unwrap()));
    }

    #[test]
    fn f32_rules_work() {
        let rule = fundamental_rule::<f32>(3).unwrap();
        assert!((rule.total_weight() - std::f32::consts::PI / 3.0).abs() < 1e-5);
    }

    fn polar_beta(rule: &PolarRule<f64>, m: i32) -> f64 {
        rule.circles.iter().map(|c| c.weight * 2.0 * PI * c.one_minus_r2.powi(m - 2)).sum()
    }

    #[test]
    fn polar_rule_beta_moments() {
        let rule = PolarRule::<f64>::for_level(6, 60).unwrap();
        for m in 3..=12 {
            let exact = PI / (m as f64 - 1.0);
            assert!((polar_beta(&rule, m) - exact).abs() < 1e-8, "m = {m}");
        }
        // The plain area misses the annulus beyond d_max.
        let cut = PI / (rule.spec.d_max / 2.0).cosh().powi(2);
        assert_relative_eq!(PI - polar_beta(&rule, 2), cut, max_relative = 1e-6);
    }

    #[test]
    fn polar_rule_refines_with_level() {
        let err = |level| (polar_beta(&PolarRule::for_level(level, 40).unwrap(), 4) - PI / 3.0).abs();
        assert!(err(6) < err(3));
    }

    #[test]
    fn polar_nodes_match_the_cayley_map() {
        let rule = PolarRule::<f64>::for_level(3, 20).unwrap();
        for c in rule.circles.iter().step_by(7) {
            for q in (0..c.angles).step_by(c.angles / 8) {
                let node = c.node(q);
                assert_relative_eq!(node.w.norm(), c.r, max_relative = 1e-14);
                let back = node.h.to_disk().w;
                assert!((back - node.w).norm() < 1e-12 * (1.0 + node.h.y));
                assert!(node.h.y > 0.0);
            }
        }
    }

    #[test]
    fn polar_rule_flattens_to_a_disk_rule() {
        let rule = PolarRule::<f64>::for_level(2, 10).unwrap();
        let flat = rule.to_rule();
        assert_eq!(flat.len(), rule.len());
        assert_eq!(flat.domain, Domain::PolarDisk);
        let cut = PI / (rule.spec.d_max / 2.0).cosh().powi(2);
        assert_relative_eq!(flat.error_estimate, cut, max_relative = 1e-6);
        assert!(PolarRule::<f64>::new(PolarSpec { d_max: 0.0, ..rule.spec }).is_err());
        assert!(rule.circles.iter().all(|c| c.angles.is_power_of_two()));
    }
}
