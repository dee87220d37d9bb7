//! Identification of continuous-time diffusively coupled networks (DCNs) from
//! frequency-domain data, including recovery of the physical RLC component
//! values the network encodes.
//!
//! The pipeline has three steps: a local polynomial method (LPM) for the
//! non-parametric frequency response and noise covariance, a constrained
//! SK-iteration fitting the structured polynomial matrices, and a sample
//! maximum-likelihood Gauss-Newton refinement. A Kron-reduction based
//! subnetwork path identifies local dynamics from partial measurements.

pub mod experiment;
pub mod lpm;
pub mod netmodel;
pub mod networks;
pub mod polymat;
pub mod signalgen;
pub mod smle;
pub mod structest;
pub mod subnet;

pub use netmodel::{ComponentEstimate, DCNModel, ModelError, RLCNetwork};
pub use polymat::{PolyError, Polynomial, PolynomialMatrix};
