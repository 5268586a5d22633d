//! Pedestrian trajectory forecasting with per-pedestrian LSTMs and social,
//! navigation and semantic pooling.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod maps;
pub mod model;
pub mod pooling;
pub mod pipeline;
pub mod synthetic;
pub mod training;
