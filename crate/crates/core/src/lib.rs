#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod autodiff;
pub mod bundle;
pub mod dataset_io;
pub mod error;
pub mod inversion;
pub mod latent_edit;
pub mod metrics;
pub mod mechanisms;
pub mod phantom;
pub mod reference;
pub mod scm;
pub mod stats;

pub use error::{Error, Result};
