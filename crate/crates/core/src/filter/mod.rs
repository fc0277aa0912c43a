//! Filter points and chains applied to task messages.
//!
//! A round crosses four filter points: task data leaving the server and
//! entering a client, then the task result leaving the client and entering
//! the server. The two-way quantization configuration quantizes on both OUT
//! points and dequantizes on both IN points, so the trainer and aggregator
//! only ever see full-precision tensors.

mod message;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{dequantize_message, quantize_message, CodecError, Precision};

pub use message::{
    decode_message, encode_message, Message, MessageDecodeError, MessageKind, Payload,
    FTMS_MAGIC, HDR_JOB_ID, HDR_PRECISION, HDR_ROUND, HDR_SOURCE, HDR_STATE, STATE_PLAIN,
    STATE_QUANTIZED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPoint {
    TaskDataOutServer,
    TaskDataInClient,
    TaskResultOutClient,
    TaskResultInServer,
}

impl FilterPoint {
    pub const ALL: [FilterPoint; 4] = [
        FilterPoint::TaskDataOutServer,
        FilterPoint::TaskDataInClient,
        FilterPoint::TaskResultOutClient,
        FilterPoint::TaskResultInServer,
    ];

    pub fn expected_kind(self) -> MessageKind {
        match self {
            FilterPoint::TaskDataOutServer | FilterPoint::TaskDataInClient => MessageKind::TaskData,
            FilterPoint::TaskResultOutClient | FilterPoint::TaskResultInServer => {
                MessageKind::TaskResult
            }
        }
    }

    pub fn is_outbound(self) -> bool {
        matches!(
            self,
            FilterPoint::TaskDataOutServer | FilterPoint::TaskResultOutClient
        )
    }

    /// The ingress point that receives what this egress point sends.
    pub fn peer(self) -> FilterPoint {
        match self {
            FilterPoint::TaskDataOutServer => FilterPoint::TaskDataInClient,
            FilterPoint::TaskDataInClient => FilterPoint::TaskDataOutServer,
            FilterPoint::TaskResultOutClient => FilterPoint::TaskResultInServer,
            FilterPoint::TaskResultInServer => FilterPoint::TaskResultOutClient,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FilterPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterPoint::TaskDataOutServer => "task_data_out_server",
            FilterPoint::TaskDataInClient => "task_data_in_client",
            FilterPoint::TaskResultOutClient => "task_result_out_client",
            FilterPoint::TaskResultInServer => "task_result_in_server",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterErrorKind {
    #[error("{found} message presented where {expected} is expected")]
    KindMismatch {
        expected: MessageKind,
        found: MessageKind,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("payload is an unresolved stream reference")]
    UnresolvedStream,
    #[error("message header says {header}, bundle says {bundle}")]
    PrecisionMismatch { header: String, bundle: Precision },
    #[error("unknown filter {0:?}")]
    UnknownFilter(String),
    #[error("filter {0:?} requires a precision")]
    MissingPrecision(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("filter {} at {point}: {kind}", filter.as_deref().unwrap_or("<chain>"))]
pub struct FilterError {
    /// `None` when the chain rejected the message before any filter ran.
    pub filter: Option<String>,
    pub point: FilterPoint,
    pub kind: FilterErrorKind,
}

/// A named message transform.
pub trait Filter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn process(&self, msg: Message) -> Result<Message, FilterErrorKind>;
}

/// Replaces a plain payload with a quantized bundle; quantized payloads pass
/// through untouched.
#[derive(Debug, Clone)]
pub struct QuantizeFilter {
    pub precision: Precision,
}

impl Filter for QuantizeFilter {
    fn name(&self) -> &str {
        "quantize"
    }

    fn process(&self, mut msg: Message) -> Result<Message, FilterErrorKind> {
        match &msg.payload {
            Payload::Plain(model) => {
                let bundle = quantize_message(model, self.precision)?;
                msg.replace_payload(Payload::Quantized(bundle));
                msg.set_header(HDR_PRECISION, self.precision.name());
                Ok(msg)
            }
            Payload::Quantized(b) => {
                log::debug!("quantize: payload already quantized ({}), passing through", b.precision);
                Ok(msg)
            }
            Payload::Stream(_) => Err(FilterErrorKind::UnresolvedStream),
        }
    }
}

/// Restores a quantized payload to full precision; plain payloads pass
/// through untouched. The codec comes from the bundle and must agree with
/// the precision header.
#[derive(Debug, Clone, Default)]
pub struct DequantizeFilter;

impl Filter for DequantizeFilter {
    fn name(&self) -> &str {
        "dequantize"
    }

    fn process(&self, mut msg: Message) -> Result<Message, FilterErrorKind> {
        match &msg.payload {
            Payload::Quantized(bundle) => {
                if let Some(header) = msg.header(HDR_PRECISION) {
                    if header != bundle.precision.name() {
                        return Err(FilterErrorKind::PrecisionMismatch {
                            header: header.to_owned(),
                            bundle: bundle.precision,
                        });
                    }
                }
                let model = dequantize_message(bundle)?;
                msg.replace_payload(Payload::Plain(model));
                msg.headers.remove(HDR_PRECISION);
                Ok(msg)
            }
            Payload::Plain(_) => {
                log::debug!("dequantize: payload already plain, passing through");
                Ok(msg)
            }
            Payload::Stream(_) => Err(FilterErrorKind::UnresolvedStream),
        }
    }
}

/// Per-point ordered filter lists. Immutable once built and shared by
/// reference between the server and client sides of a job.
#[derive(Debug, Clone, Default)]
pub struct FilterChain {
    points: [Vec<Arc<dyn Filter>>; 4],
}

impl FilterChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, point: FilterPoint, filter: Arc<dyn Filter>) -> Self {
        self.points[point.index()].push(filter);
        self
    }

    pub fn filters(&self, point: FilterPoint) -> &[Arc<dyn Filter>] {
        &self.points[point.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.points.iter().all(Vec::is_empty)
    }

    /// Builds a chain from filter registry names.
    pub fn from_config(config: &FilterConfig) -> Result<Self, FilterError> {
        let mut chain = Self::new();
        for (&point, names) in &config.filters {
            for name in names {
                let filter = build_filter(name, config.precision).map_err(|kind| FilterError {
                    filter: Some(name.clone()),
                    point,
                    kind,
                })?;
                chain = chain.with(point, filter);
            }
        }
        Ok(chain)
    }
}

/// Registry lookup for filter names used in job configuration.
pub fn build_filter(
    name: &str,
    precision: Option<Precision>,
) -> Result<Arc<dyn Filter>, FilterErrorKind> {
    match name {
        "quantize" => {
            let precision =
                precision.ok_or_else(|| FilterErrorKind::MissingPrecision(name.to_owned()))?;
            Ok(Arc::new(QuantizeFilter { precision }))
        }
        "dequantize" => Ok(Arc::new(DequantizeFilter)),
        other => Err(FilterErrorKind::UnknownFilter(other.to_owned())),
    }
}

/// The `filters` / `precision` part of a job configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub filters: BTreeMap<FilterPoint, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
}

impl FilterConfig {
    pub fn two_way(precision: Precision) -> Self {
        let mut filters = BTreeMap::new();
        for point in FilterPoint::ALL {
            let name = if point.is_outbound() { "quantize" } else { "dequantize" };
            filters.insert(point, vec![name.to_owned()]);
        }
        Self {
            filters,
            precision: Some(precision),
        }
    }
}

/// Runs `chain`'s filters for `point` in registration order.
pub fn apply_chain(
    msg: Message,
    point: FilterPoint,
    chain: &FilterChain,
) -> Result<Message, FilterError> {
    if msg.kind != point.expected_kind() {
        return Err(FilterError {
            filter: None,
            point,
            kind: FilterErrorKind::KindMismatch {
                expected: point.expected_kind(),
                found: msg.kind,
            },
        });
    }
    chain.filters(point).iter().try_fold(msg, |msg, f| {
        f.process(msg).map_err(|kind| FilterError {
            filter: Some(f.name().to_owned()),
            point,
            kind,
        })
    })
}

/// Quantize at both egress points, dequantize at both ingress points.
pub fn standard_two_way_config(precision: Precision) -> FilterChain {
    let mut chain = FilterChain::new();
    for point in FilterPoint::ALL {
        let filter: Arc<dyn Filter> = if point.is_outbound() {
            Arc::new(QuantizeFilter { precision })
        } else {
            Arc::new(DequantizeFilter)
        };
        chain = chain.with(point, filter);
    }
    chain
}
