pub mod agents;
pub mod config;
pub mod evaluator;
pub mod providers;
pub mod runner;
pub mod service;
pub mod tagspan;
