use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown die {die} (cluster has {total} dies)")]
    UnknownDie { die: u32, total: u32 },

    #[error("calibration needs at least two distinct measurements: {0}")]
    DegenerateCalibration(String),

    #[error("hash ring is empty")]
    EmptyRing,

    #[error("unknown namespace {0}")]
    UnknownNamespace(u32),

    #[error("unknown server {0}")]
    UnknownServer(u32),

    #[error("server {0} is unavailable")]
    ServerUnavailable(u32),

    #[error("namespace {namespace} quota exceeded: need {needed} bytes, {remaining} remaining")]
    QuotaExceeded {
        namespace: u32,
        needed: u64,
        remaining: u64,
    },

    #[error("object of {size} bytes does not fit in tier capacity {capacity}")]
    ObjectTooLarge { size: u64, capacity: u64 },

    #[error("tier capacity exhausted on server {server}: no evictable object in namespace {namespace}")]
    CapacityExhausted { server: u32, namespace: u32 },

    #[error("unknown model {model} version {version}")]
    UnknownModel { model: String, version: u32 },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("buffer overflow: rank {src} sends {tokens} tokens to rank {dst}, max_tokens is {max_tokens}")]
    BufferOverflow {
        src: usize,
        dst: usize,
        tokens: usize,
        max_tokens: usize,
    },

    #[error("buffer aliasing on rank {rank}: {region} buffer still holds unconsumed data")]
    BufferAliasing { rank: usize, region: &'static str },

    #[error("missing combine contributions for token {token} of rank {rank}: got {got}, expected {expected}")]
    MissingContributions {
        rank: usize,
        token: usize,
        got: usize,
        expected: usize,
    },

    #[error("event scheduled at {at}us before current time {now}us")]
    EventInPast { at: u64, now: u64 },

    #[error("resource over-subscription: {0}")]
    ResourceOversubscribed(String),

    #[error("divisibility violated: {0}")]
    Divisibility(String),

    #[error("destination buffer allocation failed: need {needed} bytes, {free} free")]
    AllocationFailed { needed: u64, free: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("granularity mismatch: {0}")]
    Granularity(String),

    #[error("unknown operator class `{0}`")]
    UnknownOpClass(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
