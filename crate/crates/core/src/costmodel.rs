//! Analytic timing and sizing model for prefill, decode and data movement.
//!
//! Prefill is compute-bound and batch-independent: `tokens / prefill_throughput`.
//! Decode is memory-bound; the default curve is affine in batch size,
//! `t0 * (1 + b / b_half)`, calibrated so that a batch of 32 takes twice as
//! long per step as a batch of 8 and a lightly loaded GPU produces a token
//! every 18 ms. Every result is rounded half-up to whole nanoseconds so that
//! event ordering never depends on platform float quirks.

use crate::time::Nanos;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("prefill of zero tokens")]
    EmptyPrefill,
    #[error("decode step with an empty batch")]
    EmptyBatch,
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

/// Per-GPU compute and memory characteristics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpuProfile {
    /// Prefill tokens per second.
    pub prefill_throughput: f64,
    /// Per-step decode latency at vanishing batch size, in milliseconds.
    pub decode_base_ms: f64,
    /// Batch size at which the per-step latency doubles over `decode_base_ms`.
    pub decode_half_batch: f64,
    /// Device memory available for K,V blocks, in bytes.
    pub hbm_capacity: u64,
    pub kv_bytes_per_token: u64,
    pub num_layers: u32,
    /// Optional measured decode curve replacing the affine model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_curve: Option<Vec<(u32, f64)>>,
}

impl Default for GpuProfile {
    fn default() -> Self {
        GpuProfile {
            prefill_throughput: 8192.0,
            decode_base_ms: 12.0,
            decode_half_batch: 16.0,
            hbm_capacity: 60_000_000_000,
            kv_bytes_per_token: 1_100_000,
            num_layers: 32,
            decode_curve: None,
        }
    }
}

impl GpuProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.prefill_throughput) {
            return Err(CostError::InvalidProfile("prefill_throughput must be > 0".into()));
        }
        if !positive(self.decode_base_ms) || !positive(self.decode_half_batch) {
            return Err(CostError::InvalidProfile("decode parameters must be > 0".into()));
        }
        if self.hbm_capacity == 0 || self.kv_bytes_per_token == 0 || self.num_layers == 0 {
            return Err(CostError::InvalidProfile(
                "hbm_capacity, kv_bytes_per_token and num_layers must be > 0".into(),
            ));
        }
        if let Some(curve) = &self.decode_curve {
            PiecewiseDecode::new(curve.clone())?;
        }
        Ok(())
    }

    fn decode_model(&self) -> Result<DecodeCurve, CostError> {
        Ok(match &self.decode_curve {
            Some(points) => DecodeCurve::Piecewise(PiecewiseDecode::new(points.clone())?),
            None => DecodeCurve::Affine(AffineDecode {
                base_ms: self.decode_base_ms,
                half_batch: self.decode_half_batch,
            }),
        })
    }
}

/// Bandwidths (bytes/second) and fixed per-transfer latency (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkProfile {
    pub pcie_bandwidth: f64,
    pub disk_bandwidth: f64,
    pub network_bandwidth: f64,
    pub per_transfer_latency: f64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        LinkProfile {
            pcie_bandwidth: 25e9,
            disk_bandwidth: 3e9,
            network_bandwidth: 12.5e9,
            per_transfer_latency: 10e-6,
        }
    }
}

impl LinkProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, v) in [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("disk_bandwidth", self.disk_bandwidth),
            ("network_bandwidth", self.network_bandwidth),
            ("per_transfer_latency", self.per_transfer_latency),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::InvalidProfile(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn bandwidth(&self, link: Link) -> f64 {
        match link {
            Link::PcieH2D | Link::PcieD2H => self.pcie_bandwidth,
            Link::DiskRead | Link::DiskWrite => self.disk_bandwidth,
            Link::Network => self.network_bandwidth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Link {
    PcieH2D,
    PcieD2H,
    DiskRead,
    DiskWrite,
    Network,
}

impl Link {
    pub const ALL: [Link; 5] = [
        Link::PcieH2D,
        Link::PcieD2H,
        Link::DiskRead,
        Link::DiskWrite,
        Link::Network,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Link {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pcie_h2d" | "pcieh2d" | "h2d" => Ok(Link::PcieH2D),
            "pcie_d2h" | "pcied2h" | "d2h" => Ok(Link::PcieD2H),
            "disk_read" | "diskread" => Ok(Link::DiskRead),
            "disk_write" | "diskwrite" => Ok(Link::DiskWrite),
            "network" | "net" => Ok(Link::Network),
            _ => Err(CostError::UnknownLink(s.to_string())),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Link::PcieH2D => "pcie_h2d",
            Link::PcieD2H => "pcie_d2h",
            Link::DiskRead => "disk_read",
            Link::DiskWrite => "disk_write",
            Link::Network => "network",
        };
        f.write_str(s)
    }
}

/// Per-step decode latency as a function of batch size.
pub trait DecodeLatency {
    fn step_time(&self, batch_size: u32) -> Result<Nanos, CostError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineDecode {
    pub base_ms: f64,
    pub half_batch: f64,
}

impl DecodeLatency for AffineDecode {
    fn step_time(&self, batch_size: u32) -> Result<Nanos, CostError> {
        if batch_size == 0 {
            return Err(CostError::EmptyBatch);
        }
        let ms = self.base_ms * (1.0 + batch_size as f64 / self.half_batch);
        Ok(Nanos::from_secs_f64(ms / 1e3))
    }
}

/// Measured `(batch, ms)` points, linearly interpolated; the last segment's
/// slope is extended past the final point.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseDecode {
    points: Vec<(u32, f64)>,
}

impl PiecewiseDecode {
    pub fn new(mut points: Vec<(u32, f64)>) -> Result<Self, CostError> {
        points.sort_by_key(|p| p.0);
        if points.len() < 2 {
            return Err(CostError::InvalidProfile(
                "decode curve needs at least two points".into(),
            ));
        }
        for w in points.windows(2) {
            if w[0].0 == w[1].0 || w[1].1 <= w[0].1 {
                return Err(CostError::InvalidProfile(
                    "decode curve must be strictly increasing".into(),
                ));
            }
        }
        if points[0].0 == 0 || points[0].1 <= 0.0 {
            return Err(CostError::InvalidProfile("decode curve starts at batch >= 1".into()));
        }
        Ok(PiecewiseDecode { points })
    }
}

impl DecodeLatency for PiecewiseDecode {
    fn step_time(&self, batch_size: u32) -> Result<Nanos, CostError> {
        if batch_size == 0 {
            return Err(CostError::EmptyBatch);
        }
        let b = batch_size as f64;
        let seg = self
            .points
            .windows(2)
            .find(|w| batch_size <= w[1].0)
            .unwrap_or(&self.points[self.points.len() - 2..]);
        let (x0, y0) = (seg[0].0 as f64, seg[0].1);
        let (x1, y1) = (seg[1].0 as f64, seg[1].1);
        let ms = (y0 + (b - x0) * (y1 - y0) / (x1 - x0)).max(y0.min(y1) * 0.5);
        Ok(Nanos::from_secs_f64(ms / 1e3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeCurve {
    Affine(AffineDecode),
    Piecewise(PiecewiseDecode),
}

impl DecodeLatency for DecodeCurve {
    fn step_time(&self, batch_size: u32) -> Result<Nanos, CostError> {
        match self {
            DecodeCurve::Affine(m) => m.step_time(batch_size),
            DecodeCurve::Piecewise(m) => m.step_time(batch_size),
        }
    }
}

pub fn kv_bytes(tokens: u64, profile: &GpuProfile) -> u64 {
    tokens * profile.kv_bytes_per_token
}

/// Bytes one layer of a `tokens`-long cache occupies, rounded up so that
/// `num_layers * kv_bytes_per_layer >= kv_bytes`.
pub fn kv_bytes_per_layer(tokens: u64, profile: &GpuProfile) -> u64 {
    kv_bytes(tokens, profile).div_ceil(profile.num_layers as u64)
}

pub fn prefill_time(tokens: u64, profile: &GpuProfile) -> Result<Nanos, CostError> {
    if tokens == 0 {
        return Err(CostError::EmptyPrefill);
    }
    Ok(Nanos::from_secs_f64(tokens as f64 / profile.prefill_throughput))
}

pub fn decode_step_time(batch_size: u32, profile: &GpuProfile) -> Result<Nanos, CostError> {
    profile.decode_model()?.step_time(batch_size)
}

pub fn transfer_time(bytes: u64, link: Link, profile: &LinkProfile) -> Nanos {
    Nanos::from_secs_f64(profile.per_transfer_latency + bytes as f64 / profile.bandwidth(link))
}

/// Bundles the GPU and link profiles of one node.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub gpu: GpuProfile,
    pub link: LinkProfile,
    decode: DecodeCurve,
}

impl CostModel {
    pub fn new(gpu: GpuProfile, link: LinkProfile) -> Result<Self, CostError> {
        gpu.validate()?;
        link.validate()?;
        let decode = gpu.decode_model()?;
        Ok(CostModel { gpu, link, decode })
    }

    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        kv_bytes(tokens, &self.gpu)
    }

    pub fn prefill_time(&self, tokens: u64) -> Result<Nanos, CostError> {
        prefill_time(tokens, &self.gpu)
    }

    pub fn decode_step_time(&self, batch_size: u32) -> Result<Nanos, CostError> {
        self.decode.step_time(batch_size)
    }

    pub fn transfer_time(&self, bytes: u64, link: Link) -> Nanos {
        transfer_time(bytes, link, &self.link)
    }

    /// Largest batch whose decode step stays within `budget`, at least 1.
    pub fn max_batch_within(&self, budget: Nanos, cap: u32) -> u32 {
        let mut best = 1;
        for b in 1..=cap.max(1) {
            match self.decode_step_time(b) {
                Ok(t) if t <= budget => best = b,
                _ => break,
            }
        }
        best
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::new(GpuProfile::default(), LinkProfile::default())
            .expect("default profiles are valid")
    }
}
