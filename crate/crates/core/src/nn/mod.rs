//! Numeric substrate: the reverse-mode tape and the named parameter store.

pub mod params;
pub mod tape;

pub use params::{fan_in_init, uniform_init, BoundParams, GradStore, ParamStore};
pub use tape::{concat_cols, concat_rows, mean_of, Tape, Var};
