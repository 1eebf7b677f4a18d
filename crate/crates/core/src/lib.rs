//! GAN-based economic scenario generator and market-risk engine.

pub mod data;
pub mod gan;
pub mod pipeline;
pub mod portfolio;
pub mod rng;
pub mod scenario;
pub mod synth;
pub mod validation;
pub mod valuation;
