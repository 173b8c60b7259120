//! Neural-symbolic engine coupling first-order rules, grounded into a Markov
//! logic network, with neural pseudo-label and concept predictors.
//!
//! Module map:
//! - [`logic`]: rule language (types, parser, renderer) and Lukasiewicz ops
//! - [`ground`]: rule grounding into ground-atom graphs
//! - [`mln`]: Markov-logic potentials, exact inference, weight learning
//! - [`neural`]: task and concept networks with hand-written backprop
//! - [`bilevel`]: bridges between pseudo-labels and ground atoms, E-step math
//! - [`infer`]: transductive explanation and inductive rule application
//! - [`tasks`]: synthetic datasets, task rule packs, metrics
//! - [`train`]: variational EM driver, checkpoints, evaluation

pub mod bilevel;
pub mod ground;
pub mod infer;
pub mod logic;
pub mod mln;
pub mod neural;
pub mod tasks;
pub mod train;
