pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod navsim;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/navigation.md")]
    mod navigation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
