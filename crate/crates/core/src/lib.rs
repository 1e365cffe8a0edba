//! Next-window prediction of multivariate binary event sequences with online
//! per-patient adaptation.
//!
//! A population GRU predictor is trained on all training sequences. At test
//! time, for every patient and every window, three adapted copies are fitted
//! on the fly (on retrieved neighbors from a hidden-state memory, on the
//! patient's own recency-weighted prefix, and on both), and a meta switch
//! picks among the four models by their discounted past losses, either
//! globally or per event type.

pub mod adaptation;
pub mod evaluation;
pub mod event_data;
pub mod exec;
pub mod memory;
pub mod neural;
pub mod pipeline;
pub mod switching;
pub mod trainer;
