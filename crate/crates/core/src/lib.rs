#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cells;
pub mod error;
pub mod harness;
pub mod norm;
pub mod numkit;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/window.md")]
    struct Window;
    #[doc = include_str!("../../../book/src/gradients.md")]
    struct Gradients;
    #[doc = include_str!("../../../book/src/lstm.md")]
    struct Lstm;
    #[doc = include_str!("../../../book/src/tasks.md")]
    struct Tasks;
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    struct Gradcheck;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/statistics.md")]
    struct Statistics;
}
