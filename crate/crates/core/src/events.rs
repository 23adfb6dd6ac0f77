//! Payloads carried by scheduled events.

use crate::ids::{ExchangeId, MessageId, NodeId, QueueId, ReplicaId, RequestId, ServiceId};
use crate::workload::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PayloadKind {
    TradeRequest,
    LineCheckRequest,
    Response,
    LogRecord,
    MetricSample,
}

/// What a bus message carries: the request it belongs to and the pipeline
/// stage that should handle it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Body {
    pub request: Option<RequestId>,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Publish {
    pub exchange: ExchangeId,
    pub routing_key: String,
    pub kind: PayloadKind,
    pub body: Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AckRef {
    pub msg: MessageId,
    pub consumer: ReplicaId,
    pub attempt: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveryRef {
    pub msg: MessageId,
    pub queue: QueueId,
    pub consumer: ReplicaId,
    pub attempt: u32,
    pub broadcast: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallRef {
    pub request: RequestId,
    pub caller: ReplicaId,
    pub callee: ReplicaId,
    /// 0 for the first try, 1 for the single retry.
    pub attempt: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lifecycle {
    /// Restart a failed replica on the best available node.
    Restart { replica: ReplicaId },
    /// A starting replica finished booting.
    Started { replica: ReplicaId, incarnation: u32 },
    /// Poll an in-progress rolling update or migration.
    UpdatePoll { service: ServiceId },
    MigrationPoll { replica: ReplicaId },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Publishes plus an optional ack, applied atomically when the packet
    /// reaches the broker member.
    ToBroker {
        from: NodeId,
        member: NodeId,
        publishes: Vec<Publish>,
        ack: Option<AckRef>,
    },
    ToConsumer {
        from: NodeId,
        to: NodeId,
        delivery: DeliveryRef,
    },
    AckTimeout {
        msg: MessageId,
        attempt: u32,
    },
    HealthProbe,
    Fault {
        index: u32,
    },
    WorkArrival {
        source: u32,
    },
    ProcessingDone {
        node: NodeId,
        epoch: u32,
        job: u64,
    },
    DirectCall {
        from: NodeId,
        to: NodeId,
        call: CallRef,
    },
    DirectReply {
        from: NodeId,
        to: NodeId,
        call: CallRef,
        refused: bool,
    },
    Takeover {
        service: ServiceId,
        candidate: ReplicaId,
    },
    Lifecycle(Lifecycle),
}
