pub mod bags;
pub mod cli;
pub mod diff;
pub mod gleason;
pub mod metrics;
pub mod models;
pub mod training;
