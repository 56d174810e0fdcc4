//! Interaction logs, holdout splits, and the personalized sharing partition.

mod io;
mod sharing;
mod split;
pub mod synthetic;
mod table;

pub use io::{load_prepared, save_prepared, Prepared, PreparedManifest};
pub use sharing::{
    apply_unshare_requests, assign_sharing, issue_unshare_requests, parse_unshare_requests,
    render_unshare_requests, requests_from_partition, AllMarker, GroupRatios, RequestedItems,
    ShareGroup, SharingPartition, UnshareRequest, UserShare,
};
pub use split::{split_holdout, DatasetSplits, SplitRatios};
pub use table::{filter_min_interactions, load_interactions, Delimiter, IdMap, InteractionTable};
