pub mod anchor;
pub mod ba;
pub mod clustering;
pub mod densify;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod sim;
