pub mod cloud;
pub mod exec;
pub mod filterpipe;
pub mod flowalign;
pub mod geom;
pub mod grasp;
pub mod imitate;
pub mod io;
pub mod posegraph;
pub mod registration;
pub mod simarm;
mod serde_vec3;
pub mod synth;
pub mod taskeval;
