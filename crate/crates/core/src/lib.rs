pub mod clock;
pub mod domain;
pub mod engagement;
pub mod error;
pub mod net;
pub mod ocr;
pub mod pipeline;
pub mod progress;
pub mod store;
pub mod synthesis;
pub mod upload;
pub mod sync;

pub use error::{Error, Result};
