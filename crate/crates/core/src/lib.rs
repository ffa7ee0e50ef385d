//! Learned and VCG mechanisms for hybrid sponsored-search auctions, where a
//! slot shows either an independent store or a store+brand bundle and at
//! most `C` slots go to bundles.

pub mod engine;
pub mod model;
pub mod network;
pub mod data;
pub mod rng;
pub mod vcg;
pub mod train;
pub mod eval;
pub mod checkpoint;
pub mod config;
pub mod runner;
