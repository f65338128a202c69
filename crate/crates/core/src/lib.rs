//! Multi-agent generative flow networks with tabular flows.
//!
//! Local per-agent flow tables are composed into a joint flow over global
//! states; training algorithms (centralized, independent, joint and
//! condition-augmented joint) fit them with flow-matching losses on a
//! multi-agent hyper-grid, and exact dynamic programming measures how close
//! the sampler gets to the reward-proportional target.

pub mod analysis;
pub mod cli;
pub mod env;
pub mod error;
pub mod flow_table;
pub mod fm_loss;
pub mod hypergrid;
pub mod joint_flow;
pub mod mcmc;
pub mod measure;
pub mod trainer;

pub use env::{ActionProfile, AgentId, CustomEnv, Environment, GlobalState, GridEnv, LocalAction, LocalObs, Phase};
pub use error::{Error, Result};
pub use flow_table::{FlowParams, FlowView, GlobalSpace, LocalSpace, StateSpace};
pub use hypergrid::{Hypergrid, HypergridSpec};
pub use measure::DiscreteMeasure;
pub use trainer::{Algorithm, TrainConfig, Trainer};
