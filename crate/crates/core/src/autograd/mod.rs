mod gradcheck;
mod graph;
mod losses;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use graph::{gelu_with_derivative, Graph, Var, MASK_HIDDEN_THRESHOLD};
pub use losses::IGNORE_INDEX;
pub(crate) use graph::log_sum_exp;
