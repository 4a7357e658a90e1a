// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented decoder-only transformer for studying how few-shot prompts
//! with corrupted labels are processed layer by layer.

pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod interventions;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod prompting;

pub use error::{Error, Result};
