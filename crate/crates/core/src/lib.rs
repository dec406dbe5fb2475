pub mod agent;
pub mod belief;
pub mod cli;
pub mod envs;
pub mod error;
pub mod gmm;
pub mod mdn;
pub mod optim;

pub use belief::{
    chain_gradient, Belief, BeliefGradient, BeliefShape, FeatureJacobian, MgfFeatures,
};
pub use error::{Error, Result};
pub use gmm::{gaussian_overlap, jtd, GmmReturn, SCALE_FLOOR};
pub use mdn::{jtd_gradient, Activation, HeadGradient, NetworkSpec};
