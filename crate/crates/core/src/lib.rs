//! City-scale 3D question answering toolkit: labeled point clouds in, scene
//! graphs, templated QA pairs with symbolic gold answers, splits and scoring out.

pub mod dataset;
pub mod eval;
pub mod ingest;
pub mod oracle;
pub mod scene;
pub mod semantics;
pub mod templates;
