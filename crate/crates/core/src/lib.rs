//! Social 3D scene graphs.
//!
//! A 3D scene graph of objects is augmented with human nodes and directed
//! activity edges inferred from registered RGB-D frames. The crate covers
//! the graph model and its encodings, per-person visibility analysis, the
//! inference-client abstraction, the per-frame augmentation pipeline,
//! activity consolidation, benchmark evaluation, and social-cost planning.

pub mod benchmark;
pub mod consolidation;
pub mod geometry;
pub mod graph;
pub mod inference;
pub mod lexicon;
pub mod pipeline;
pub mod planner;
pub mod synthetic;
pub mod visibility;

pub use geometry::{Aabb, Vec3};
pub use graph::{
    ActivityEdge, BehaviorDescription, EntityNode, FrameGlossaryEntry, GraphError, HeadPose,
    HumanNode, Node, NodeId, SocialSceneGraph, SpatialEdge,
};
pub use lexicon::FrameLexicon;
