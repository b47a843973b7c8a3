//! Berezin quantization of weighted Bergman spaces on the upper half-plane
//! under the modular group SL(2,ℤ).
//!
//! The numeric core is generic over [`Real`] (`f32`/`f64`); q-expansions are
//! exact over arbitrary-precision integers. Aliases at the crate root fix the
//! scalar to `f64`, which is what the experiments and the CLI use.

pub mod scalar;
pub mod hypgeom;
pub mod quad;
pub mod bergman;
pub mod modforms;
pub mod berezin;
pub mod toeplitz;

pub use scalar::{Cx, Real};

pub type C64 = Cx<f64>;
pub type HPoint64 = hypgeom::HPoint<f64>;
pub type Rule64 = quad::QuadratureRule<f64>;

/// Library version recorded in experiment reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
