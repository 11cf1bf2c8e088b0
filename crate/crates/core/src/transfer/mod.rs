//! Transfer control: one relay plus one streaming job per transfer, driven
//! by job callbacks through a small state machine.

pub mod fsm;
pub mod service;

pub use fsm::{step, Step, TransferEvent, TransferState};
pub use service::{
    callbacks_router, point_at_relay, request, serve_transfers, transfers_router, JobsSettings, RelayEndpoints,
    RelayRequest, TransferError, TransferRecord, TransferRequest, TransferServer, TransferService, TransferdConfig,
    Transition,
};

#[cfg(test)]
mod tests;
