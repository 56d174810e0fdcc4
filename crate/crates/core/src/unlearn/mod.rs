//! Withdrawing shared interactions: graph updates, contrastive unlearning,
//! the retrain reference and storage models.

mod forget;
mod run;
mod storage;

pub use forget::{
    apply_unshare, build_forgotten_graph, forgotten_views, new_global_views, recent_snapshots, snapshot_views,
    ForgottenViewSet,
};
pub use run::{retrain_oracle, run_unlearning, UnlearnConfig, UnlearnReport, UnlearnRoundStats};
pub use storage::{render_storage_table, storage_cost, storage_reports, StorageMethod, StorageParams, StorageReport};
