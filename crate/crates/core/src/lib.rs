//! Finite-order matrix laminates: construction, estimate checks and spatial
//! realization.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`) and over the
//! matrix dimension `D`. The aliases below fix the common double-precision
//! instances.

pub mod delta_shift;
pub mod field;
pub mod laminate;
pub mod matrix;
pub mod realization;
pub mod report;
pub mod scalar;
pub mod suite;
pub mod svd;
pub mod zero_det;

pub use delta_shift::{build_delta_laminate, verify_delta, DeltaBuild, DeltaError};
pub use field::{
    energy_compare, strict_repair, weak_repair, FieldError, FieldStats, Generator, GradientField, RepairOutcome,
    StrictParams, TraceRow, WeakParams,
};
pub use laminate::{AtomLabel, Integrand, Laminate, LaminateDoc, LaminateError, LaminateStats, LaminateTree};
pub use matrix::Mat;
pub use realization::{realize_laminate, RealizationError, SawtoothMap};
pub use report::{Check, EstimateReport};
pub use scalar::Scalar;
pub use svd::{signed_svd, RotSvd, SvdError, SvdOrdering};
pub use zero_det::{build_zero_det_laminate, rigidity_scan, verify_geometry, GeomParams, ZeroDetBuild, ZeroDetError};

pub type Mat2 = Mat<f64, 2>;
pub type Mat3 = Mat<f64, 3>;
pub type Mat4 = Mat<f64, 4>;
pub type Mat2f = Mat<f32, 2>;
pub type Mat3f = Mat<f32, 3>;

pub type Laminate2 = Laminate<f64, 2>;
pub type Laminate3 = Laminate<f64, 3>;
pub type Laminate4 = Laminate<f64, 4>;

pub type Field2 = GradientField<f64, 2>;
pub type Field3 = GradientField<f64, 3>;

pub type Map2 = SawtoothMap<f64>;
