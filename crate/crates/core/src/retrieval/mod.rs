//! Packed binary codes, Hamming search, sliding-window matching and mAP.

mod codes;
mod geometry;
mod metrics;
mod search;

pub use codes::{hamming, pack_code, unpack_code, words_for, PackedCodeSet, CODE_DB_MAGIC, CODE_DB_VERSION};
pub use geometry::{map_box_to_feature, BoundingBox, FeatureBox};
pub use metrics::{average_precision, compute_map, one_hot, MapOptions};
pub use search::{
    axis_origins, local_rerank, sliding_window_match, top_k_global, window_origins, Ranked, RetrievalResult,
    WindowMatch, WindowQuery, WINDOW_STRIDE,
};
