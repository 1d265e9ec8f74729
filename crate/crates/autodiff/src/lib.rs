//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated; a single
//! call to [`Graph::backward`] then yields gradients for every leaf created
//! with [`Graph::param`]. The graph is meant to be rebuilt for each forward
//! pass.
//!
//! ```
//! use autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param("x", Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod error;
mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{analytic_gradient, check_gradients};
pub use graph::{GradMap, Gradients, Graph, Var};
pub use ops::{AttrValue, Attrs, Op, KL_CLAMP, L2_NORM_FLOOR, LAYER_NORM_EPS};
pub use optim::{Adam, Sgd};
pub use params::{digest_tensors, ParamStore};
pub use tensor::{argmax, Tensor};
