pub mod annotation;
pub mod boosted_trees;
pub mod bootstrap;
pub mod dense_flow;
pub mod eval;
pub mod features;
pub mod frame_store;
pub mod inference;
pub mod pipeline;
pub mod segmentation;
