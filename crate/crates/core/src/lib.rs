//! Lane-centerline graphs for collaborative HD-map construction.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod assignment;
pub mod geo_map;
pub mod geometry;
pub mod graph;
pub mod metrics;
pub mod rgcn;
pub mod scenario;
pub mod transport;
