pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod flops;
pub mod introspect;
pub mod model;
pub mod params;
pub mod restcn;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/capsules.md")]
    mod capsules {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/introspection.md")]
    mod introspection {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
