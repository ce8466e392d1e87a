//! Leader-based agreement on key-distribution proposals, authenticated by
//! temporary signatures.

mod election;
mod message;
mod proposal;
mod replica;

pub use election::elect_leader;
pub use message::{Disclosure, Equivocation, Payload, ProtocolMessage, Step};
pub use proposal::{
    build_proposal, validate_proposal, Budget, Demand, DemandBook, DemandId, Plan, Proposal,
    ProposalDefect, ProposalDigest,
};
pub use replica::{
    CommitRecord, EndpointOutput, EnvError, NodeEnv, Replica, ReplicaConfig, ReplicaEvent,
    StepOutput, ViewChangeReason, ViewState, FRAME_SLOTS, TIMER_SLOTS,
};
