//! Challenge domain model and competition bundle parsing.

mod bundle;
mod types;
mod validate;

pub use bundle::*;
pub use types::*;
pub use validate::{config_notices, resolve_phase_split, validate_config, ResolveError, Violation};
