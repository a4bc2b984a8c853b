pub mod config;
pub mod run;
pub mod tcp;
pub mod trace;
