//! Agent memory with atomic CRUD operations over a vector store, a
//! streaming document environment, task construction, and reward tooling.

pub mod environment;
pub mod memory;
pub mod par;
pub mod policy;
pub mod protocol;
pub mod retrieval;
pub mod reward;
pub mod task;

pub use environment::{Episode, EpisodeConfig, Observation, WordCounter};
pub use memory::{EntryId, MemoryState};
pub use par::Exec;
pub use protocol::{ActionKind, ActionSequence, MemoryAction, SchemaVariant};
pub use retrieval::{Embedder, HashEmbedder};
pub use task::TaskInstance;
