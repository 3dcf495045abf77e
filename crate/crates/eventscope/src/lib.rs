//! Anomaly detection and root-cause localization for structured cloud event
//! streams.

pub mod detector;
pub mod efp;
pub mod esp;
pub mod evalkit;
pub mod event_model;
pub mod rcl;
pub mod cli;
