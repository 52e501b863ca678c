//! Adaptive CutFEM solver for the Poisson problem on geometries with small
//! negative features (holes and notches).
//!
//! Features start out filled in. Each iteration solves a P1 CutFEM problem on
//! a background triangulation, rebuilds an H(div) flux from vertex-patch mixed
//! problems, and splits an a posteriori estimator into a numerical part (per
//! element) and a defeaturing part (per neglected feature). Dörfler marking on
//! the joint list then either refines elements or puts features back.
//!
//! The pipeline, in module order: [`geometry`] and [`mesh`] describe features
//! and the cut background mesh, [`primal`] solves for `u_h`, [`rt`] and
//! [`flux`] reconstruct the flux, [`estimator`] evaluates indicators,
//! [`adaptive`] drives the loop, [`config`] and [`output`] handle files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod quadrature;
pub mod mesh;
pub mod linalg;
pub mod problem;
pub mod primal;
pub mod rt;
pub mod flux;
pub mod estimator;
pub mod adaptive;
pub mod config;
pub mod output;
