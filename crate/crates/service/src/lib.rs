//! Live teleoperation host: runs the shared-autonomy loop at 10 Hz wall clock,
//! takes operator commands over a web socket and streams telemetry back.

pub mod error;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::ServiceError;
pub use server::router;
pub use session::{Overrides, Registry, ServiceConfig, Session, SessionHandle};
