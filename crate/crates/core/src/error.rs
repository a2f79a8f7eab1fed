use thiserror::Error;

use crate::keytree::{MemberId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("the root node has no parent")]
    RootHasNoParent,
    #[error("a group needs at least one member")]
    EmptyGroup,
    #[error("member {0} is not in the group")]
    MemberNotFound(MemberId),
    #[error("member {0} is already in the group")]
    AlreadyMember(MemberId),
    #[error("node {0} does not exist")]
    NodeNotFound(NodeId),
    #[error("ciphertext is not decryptable with the given keys")]
    NotDecryptable,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("configuration is not full and balanced, no closed-form prediction")]
    NotPredictable,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("internal inconsistency: {0}")]
    InternalInconsistency(String),
}
