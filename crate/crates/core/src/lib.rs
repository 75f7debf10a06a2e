#![no_std]

extern crate alloc;

pub mod bench_eval;
pub mod feedback;
pub mod geometry;
pub mod llm_backend;
pub mod math;
pub mod objectives;
pub mod planner;
pub mod pose_synthesis;
pub mod preference;
pub mod scene_graph;
pub mod session;
