pub mod config;
pub mod control;
pub mod dictionary;
pub mod edmd;
pub mod error;
pub mod io;
pub mod lifting;
pub mod linalg;
pub mod oracles;
pub mod pipeline;
pub mod plant;
pub mod poly;
pub mod spatial;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/koopman.md")]
    mod koopman {}
    #[doc = include_str!("../../../book/src/lifting.md")]
    mod lifting {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
