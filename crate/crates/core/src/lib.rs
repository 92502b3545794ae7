//! Spectral toolkit for the magnetized Vlasov equation on `T³ × R³`.
//!
//! The crate covers exact gyration transport ([`kinematics`]), spectral
//! distributions ([`phase_space`]), the linear density equation and its
//! Volterra kernel ([`linear_volterra`]), a split-step nonlinear solver
//! ([`nonlinear_vlasov`]), plasma echoes and echo-kernel moments
//! ([`echo_growth`]), hybrid analytic norms ([`analytic_norms`]) and the
//! scenario runner ([`runner_io`]).

pub mod analytic_norms;
pub mod echo_growth;
pub mod error;
pub mod fields;
pub mod kinematics;
pub mod linear_volterra;
pub mod nonlinear_vlasov;
pub mod phase_space;
pub mod runner_io;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/linear.md")]
    mod linear {}
    #[doc = include_str!("../../../book/src/nonlinear.md")]
    mod nonlinear {}
    #[doc = include_str!("../../../book/src/echoes.md")]
    mod echoes {}
    #[doc = include_str!("../../../book/src/norms.md")]
    mod norms {}
    #[doc = include_str!("../../../book/src/moments.md")]
    mod moments {}
    #[doc = include_str!("../../../book/src/runner.md")]
    mod runner {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
