//! Context-based retrieval of replacement parts for incomplete point-cloud
//! objects.
//!
//! A part encoder maps normalized part clouds to unit feature vectors; a small
//! transformer over part tokens classifies the object. A warehouse part is
//! scored by inserting it into the incomplete object and reading the
//! probability of the object's class.

pub mod baseline;
pub mod error;
pub mod dataprep;
pub mod geometry;
pub mod gradcore;
pub mod partencoder;
pub mod manifest;
pub mod pipeline;
pub mod model;
pub mod relnet;
pub mod retrieval;
pub mod selftest;
pub mod simloss;

pub use error::{Error, Result};
