//! Pipeline wiring behind the `unitts` command.

pub mod artifacts;
pub mod config;
pub mod pipeline;

pub use artifacts::{Precondition, Usage};
pub use config::PipelineConfig;
pub use pipeline::Pipeline;

/// Process exit code for an error: 2 usage, 3 precondition or artifact, 4 numerical.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(unitts::Error::Numerical(_)) = cause.downcast_ref::<unitts::Error>() {
            return 4;
        }
    }
    3
}
