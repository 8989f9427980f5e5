//! On-disk formats: feature files, the model container, and the JSON/TSV
//! control plane (manifests, lexicons, keyword lists, detection logs).

pub mod features;
pub mod manifest;
pub mod model;
