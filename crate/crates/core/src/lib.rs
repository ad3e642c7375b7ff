pub mod domains;
pub mod error;
pub mod fem;
pub mod linwave;
pub mod meshing;
pub mod mosco;
pub mod sparse;
pub mod spectral;
pub mod verify;
pub mod westervelt;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/domains.md")]
    mod domains {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/linear.md")]
    mod linear {}
    #[doc = include_str!("../../../book/src/westervelt.md")]
    mod westervelt {}
    #[doc = include_str!("../../../book/src/mosco.md")]
    mod mosco {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
