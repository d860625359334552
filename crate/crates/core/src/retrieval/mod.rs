//! Serving: per-objective indices, quota weights, allocation and fusion.

mod index;
mod io;
mod pipeline;
mod quota;
mod serve;

pub use index::{Hit, IvfParams, ObjectiveIndex, SearchResult};
pub use io::{read_indices, write_indices, IndexManifest, IndexSetManifest, INDEX_VERSION};
pub use pipeline::{build_indices, fuse, quota_for_indices, Candidate, FusedResult, SearchMode, ServingState};
pub use quota::{aggregate_user_weights, allocate_quota, ItemWeightStore};
pub use serve::{serve_lines, serve_listener, serve_tcp, Request};
pub(crate) use index::top_q;
