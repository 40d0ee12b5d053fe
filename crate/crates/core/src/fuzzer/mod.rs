//! Coverage-guided fuzzing over packet sequences, with a flat-blob baseline.

pub mod campaign;
pub mod corpus;
pub mod exec;
pub mod mutate;
pub mod packet;

pub use campaign::{
    run_campaign, CampaignConfig, CampaignError, CampaignResult, CampaignSummary, Strategy, BLOB_CHUNK,
};
pub use corpus::{CorpusError, CrashEntry, CrashMeta, CrashStore, ReplayContext};
pub use exec::{ExecConfig, Executor, Outcome, RestoreMode, Signature, Verdict, DEFAULT_TICK_BUDGET};
pub use mutate::{merge, mutate, reorder, Population};
pub use packet::{Lineage, MutationKind, Packet, PacketKind, PacketSequence, MAX_PACKETS, MAX_PAYLOAD};
