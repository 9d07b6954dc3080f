pub mod error;
pub mod diagnostics;
pub mod etel;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod losses;
pub mod manifold;
pub mod samplers;

pub use error::{Error, Result};
pub use etel::{AlphaRule, CustomTarget, EtelSolution, Evaluation, LogTarget, PosteriorKind, Prior, Target};
pub use inference::{FunctionalInterval, Membership, PosteriorSummary};
pub use manifold::{ManifoldKind, ManifoldPoint, ManifoldSpec, TangentBasis, TangentSpace, TangentVector};
pub use samplers::{Algorithm, Chain, PrecondMethod, SamplerConfig};
