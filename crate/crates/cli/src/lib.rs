pub mod config;
pub mod problems;
pub mod output;
pub mod runner;
