pub mod attribution;
pub mod bkt;
pub mod bundle;
pub mod features;
pub mod forest;
pub mod mastery;
pub mod nudge;
pub mod pipeline;
pub mod rng;
pub mod simulator;
