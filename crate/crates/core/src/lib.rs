//! Numerical laboratory for mild solutions of semilinear parabolic equations
//! driven by a rough path and a Brownian motion on the torus.

pub mod archive;
pub mod controlled;
pub mod convolution;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod increment;
pub mod propagator;
pub mod rng;
pub mod rough_path;
pub mod sewing;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod torus;
pub mod transform;

pub use archive::Archive;
pub use controlled::{ControlledEnsemble, ControlledOperatorFamily, MultiplicationSymbol, ScrpNormReport};
pub use ensemble::{BrownianDriver, SampleEnsemble};
pub use error::{Error, Result};
pub use grid::{PairPolicy, TimeGrid};
pub use increment::{Increment, MartingaleTaggedIncrement};
pub use propagator::{GeneratorFamily, GridPropagator, Propagator, SmoothingReport};
pub use rough_path::{BrownianMode, HolderExponents, LiftEnsemble, LiftKind, RoughPathLift};
pub use sewing::{Germ, SewingConfig, SewingResult};
pub use solver::{MildSolution, Nonlinearity, PicardConfig, RspdeProblem};
pub use spectral::{FieldShape, SpaceIndex, SpectralField, C64};
pub use torus::{preset, TorusProblemSpec};
