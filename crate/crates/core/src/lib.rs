pub mod acquisition;
pub mod bandit;
pub mod gp;
pub mod gradcheck;
pub mod harness;
mod linalg;
pub mod space;
pub mod strategies;
