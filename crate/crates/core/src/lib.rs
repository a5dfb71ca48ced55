//! Continual learning with binary supermasks on a frozen random backbone.
//!
//! A fixed, randomly initialized network is shared by every task. Individual
//! tasks are captured as binary masks ("impressions") trained with the
//! edge-popup algorithm; new tasks are then learned as layerwise linear
//! combinations of a small basis of impressions, so the only per-task state
//! is a coefficient matrix α of size |basis| × depth. Because the backbone
//! and stored masks are immutable, earlier tasks cannot be forgotten.
//!
//! Modules follow the pipeline: [`backbone`] holds the frozen substrate,
//! [`edgepopup`] trains individual supermasks, [`impressions`] manages basis
//! collections and their combination, [`alphatrain`] learns α for new tasks,
//! [`gninfer`] infers task identity when it is not given at inference, and
//! [`harness`] orchestrates the experiment protocols over [`tasks`].

pub mod alphatrain;
pub mod backbone;
pub mod checksum;
pub mod edgepopup;
pub mod error;
pub mod gninfer;
pub mod harness;
pub mod impressions;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
