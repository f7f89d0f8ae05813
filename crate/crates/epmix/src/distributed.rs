//! Central/worker runtime that spreads likelihood-site refinement across
//! processes. One pass: the central node broadcasts the global state, every
//! worker refines its shard of likelihood sites against that snapshot and
//! sends back summed deltas, and the central node applies them in worker-id
//! order, refines the group-effect sites, and reruns the covariance update.
//! The result is identical to the single-process parallel schedule.
//!
//! Framing: every message is a 4-byte little-endian length prefix followed
//! by UTF-8 JSON with floats at 17 significant digits, so numerical state
//! survives the wire bit-exactly.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::{
    apply_alpha_bulk, apply_u_bulk, assemble, check_convergence, check_mp_precondition,
    combine_sigma, init_sites, refine_like_batch, refine_re_batch, run_mp, EpConfig, GlobalDelta,
    PassStats, Posterior, SkipCounters,
};
use crate::expfam::{GaussianNat, IwParams, ReductionMap};
use crate::model::{layout_of, Dataset, Extras, ModelSpec};
use crate::quadrature::gauss_hermite;
use crate::sparse::SparseGlobal;
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a single frame; anything larger is treated as a corrupt
/// length prefix rather than a plausible payload.
const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

/// How long either side waits on a single frame before declaring the peer
/// lost.
const FRAME_TIMEOUT: Duration = Duration::from_secs(120);

/// One worker's slice of the problem. Group ids and labels stay global so
/// the worker's deltas address the right blocks of the broadcast global.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub worker_id: usize,
    /// Index of the first observation of this shard in the full dataset.
    pub first_row: usize,
    /// The shard's rows only; `group_labels` covers every group.
    pub data: Dataset,
}

/// Wire messages. The model prior travels once, whole, inside
/// `AssignShard`'s spec; broadcasts carry only the assembled global, so no
/// message ever holds a divided prior share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Hello {
        version: u32,
        worker_id: usize,
    },
    AssignShard {
        spec: ModelSpec,
        config: EpConfig,
        shard: Shard,
    },
    GlobalBroadcast {
        pass: usize,
        global: SparseGlobal,
        sigma: IwParams,
    },
    SiteDeltas {
        pass: usize,
        delta: GlobalDelta,
        max_info: f64,
        max_prec: f64,
        skips: SkipCounters,
    },
    Converged {
        passes: usize,
        converged: bool,
        labels: Vec<String>,
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    Shutdown,
    Error {
        message: String,
    },
}

/// Serializes one length-prefixed frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let payload = crate::jsonio::to_string_17(msg)?.into_bytes();
    if payload.len() > MAX_FRAME_BYTES as usize {
        return Err(Error::Protocol(format!(
            "message of {} bytes exceeds the frame limit",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses exactly one frame, rejecting zero-length, oversized, truncated,
/// or malformed payloads.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("frame shorter than its length prefix".into()));
    }
    let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if len == 0 {
        return Err(Error::Protocol("zero-length frame".into()));
    }
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame length {len} exceeds the limit")));
    }
    let body = &bytes[4..];
    if body.len() != len as usize {
        return Err(Error::Protocol(format!(
            "frame advertises {len} bytes but carries {}",
            body.len()
        )));
    }
    decode_payload(body)
}

fn decode_payload(body: &[u8]) -> Result<Message> {
    serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
}

/// Writes one frame to a stream. IO failures are protocol errors: the peer
/// is gone or corrupt.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let frame = encode(msg)?;
    w.write_all(&frame)
        .and_then(|()| w.flush())
        .map_err(|e| Error::Protocol(format!("send failed: {e}")))
}

/// Reads one frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix)
        .map_err(|e| Error::Protocol(format!("receive failed: {e}")))?;
    let len = u32::from_le_bytes(prefix);
    if len == 0 {
        return Err(Error::Protocol("zero-length frame".into()));
    }
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame length {len} exceeds the limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|e| Error::Protocol(format!("truncated frame: {e}")))?;
    decode_payload(&body)
}

/// Contiguous near-equal split of `n` rows into `k` shards (some possibly
/// empty when k > n).
fn shard_ranges(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / k;
    let rem = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for w in 0..k {
        let len = base + usize::from(w < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn slice_dataset(data: &Dataset, range: &std::ops::Range<usize>) -> Dataset {
    Dataset {
        group_of: data.group_of[range.clone()].to_vec(),
        group_labels: data.group_labels.clone(),
        y: data.y[range.clone()].to_vec(),
        x: data.x[range.clone()].to_vec(),
        z: data.z[range.clone()].to_vec(),
        extras: match &data.extras {
            Extras::Offsets(o) => Extras::Offsets(o[range.clone()].to_vec()),
            Extras::Trials(t) => Extras::Trials(t[range.clone()].to_vec()),
        },
    }
}

/// State written out when a distributed fit aborts mid-run.
#[derive(Serialize)]
struct PartialDump<'a> {
    completed_passes: usize,
    trace: &'a [PassStats],
    theta: &'a SparseGlobal,
    sigma: &'a IwParams,
    error: String,
}

fn expect_site_deltas(msg: Message, worker: usize, pass: usize) -> Result<(GlobalDelta, f64, f64, SkipCounters)> {
    match msg {
        Message::SiteDeltas {
            pass: p,
            delta,
            max_info,
            max_prec,
            skips,
        } => {
            if p != pass {
                return Err(Error::Protocol(format!(
                    "worker {worker} answered pass {p} during pass {pass}"
                )));
            }
            Ok((delta, max_info, max_prec, skips))
        }
        Message::Error { message } => {
            Err(Error::Protocol(format!("worker {worker} failed: {message}")))
        }
        other => Err(Error::Protocol(format!(
            "worker {worker} sent {} when site deltas were expected",
            variant_name(&other)
        ))),
    }
}

fn variant_name(msg: &Message) -> &'static str {
    match msg {
        Message::Hello { .. } => "Hello",
        Message::AssignShard { .. } => "AssignShard",
        Message::GlobalBroadcast { .. } => "GlobalBroadcast",
        Message::SiteDeltas { .. } => "SiteDeltas",
        Message::Converged { .. } => "Converged",
        Message::Shutdown => "Shutdown",
        Message::Error { .. } => "Error",
    }
}

/// Runs the central node: accepts `n_workers` connections on `listener`,
/// hands each a contiguous shard, drives the synchronous per-pass protocol,
/// and returns the fitted posterior. On failure mid-fit, the current state
/// is dumped to `dump_path` (when given) before the error propagates.
///
/// The returned posterior's likelihood sites are their starting values:
/// refined likelihood sites live only on the workers, while the global
/// already contains their full product.
pub fn serve_central(
    listener: &TcpListener,
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &EpConfig,
    n_workers: usize,
    dump_path: Option<&Path>,
) -> Result<Posterior> {
    if n_workers == 0 {
        return Err(Error::Config("a distributed fit needs at least one worker".into()));
    }
    cfg.validate()?;
    let layout = layout_of(spec, data)?;
    check_mp_precondition(spec.priors.re_dof, layout.n_groups, layout.q)?;
    let mut sites = init_sites(data, spec, &layout)?;
    let mut theta = assemble(data, &sites, &layout)?;
    let mut sigma = combine_sigma(&sites.prior_sigma, &sites.re_sigma);

    let ranges = shard_ranges(data.n_obs(), n_workers);
    let mut workers: Vec<TcpStream> = Vec::with_capacity(n_workers);
    for w in 0..n_workers {
        let (mut stream, _) = listener.accept()?;
        stream.set_read_timeout(Some(FRAME_TIMEOUT))?;
        stream.set_nodelay(true)?;
        match read_frame(&mut stream)? {
            Message::Hello { version, .. } if version == PROTOCOL_VERSION => {}
            Message::Hello { version, .. } => {
                let msg = format!(
                    "protocol version mismatch: central speaks {PROTOCOL_VERSION}, worker {version}"
                );
                let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
                return Err(Error::Protocol(msg));
            }
            other => {
                let msg = format!("expected Hello, got {}", variant_name(&other));
                let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
                return Err(Error::Protocol(msg));
            }
        }
        write_frame(
            &mut stream,
            &Message::Hello {
                version: PROTOCOL_VERSION,
                worker_id: w,
            },
        )?;
        write_frame(
            &mut stream,
            &Message::AssignShard {
                spec: spec.clone(),
                config: *cfg,
                shard: Shard {
                    worker_id: w,
                    first_row: ranges[w].start,
                    data: slice_dataset(data, &ranges[w]),
                },
            },
        )?;
        workers.push(stream);
    }

    let mut trace: Vec<PassStats> = Vec::new();
    let mut total_skips = SkipCounters::default();
    // The pass loop is fallible in many places; run it to completion or to
    // the first error, then handle the dump in one place.
    let loop_result = (|| -> Result<()> {
        while trace.len() < cfg.max_passes {
            let pass = trace.len() + 1;
            for stream in &mut workers {
                write_frame(
                    stream,
                    &Message::GlobalBroadcast {
                        pass,
                        global: theta.clone(),
                        sigma: sigma.clone(),
                    },
                )?;
            }
            let mut merged = GlobalDelta::new();
            let (mut like_info, mut like_prec) = (0.0f64, 0.0f64);
            let mut skips = SkipCounters::default();
            for w in 0..n_workers {
                let msg = read_frame(&mut workers[w])?;
                let (delta, max_info, max_prec, wskips) = expect_site_deltas(msg, w, pass)?;
                merged.merge(&delta);
                like_info = like_info.max(max_info);
                like_prec = like_prec.max(max_prec);
                skips.absorb(&wskips);
            }
            apply_alpha_bulk(&mut theta, &merged)?;
            let re = refine_re_batch(
                &theta,
                &sigma,
                &mut sites.re_theta,
                &sites.re_sigma,
                cfg.damping,
            );
            apply_u_bulk(&mut theta, &re.delta)?;
            let (sigma_scale, sigma_dof) = run_mp(&theta, &mut sigma, &mut sites)?;
            skips.absorb(&re.skips);
            total_skips.absorb(&skips);
            trace.push(PassStats {
                pass,
                like_info,
                like_prec,
                re_info: re.max_info,
                re_prec: re.max_prec,
                sigma_scale,
                sigma_dof,
                skips,
            });
            if check_convergence(&trace, cfg.conv_frac, cfg.min_passes) {
                break;
            }
        }
        Ok(())
    })();

    if let Err(e) = loop_result {
        if let Some(path) = dump_path {
            let dump = PartialDump {
                completed_passes: trace.len(),
                trace: &trace,
                theta: &theta,
                sigma: &sigma,
                error: e.to_string(),
            };
            if let Ok(json) = crate::jsonio::to_string_17(&dump) {
                let _ = std::fs::write(path, json);
            }
        }
        let abort = Message::Error {
            message: format!("central aborted: {e}"),
        };
        for stream in &mut workers {
            let _ = write_frame(stream, &abort);
        }
        return Err(e);
    }

    let converged = check_convergence(&trace, cfg.conv_frac, cfg.min_passes);
    let posterior = Posterior {
        layout,
        theta,
        sigma,
        sites,
        passes: trace.len(),
        converged,
        skips: total_skips,
        trace,
    };
    let (mean, sd) = posterior.theta_summaries();
    let done = Message::Converged {
        passes: posterior.passes,
        converged,
        labels: layout.labels(),
        mean: mean.iter().copied().collect(),
        sd: sd.iter().copied().collect(),
    };
    for stream in &mut workers {
        write_frame(stream, &done)?;
        write_frame(stream, &Message::Shutdown)?;
    }
    Ok(posterior)
}

/// Receives a frame on the worker side, reporting any receive failure back
/// to the central node before giving up.
fn worker_recv(stream: &mut TcpStream) -> Result<Message> {
    match read_frame(stream) {
        Ok(msg) => Ok(msg),
        Err(e) => {
            let _ = write_frame(
                stream,
                &Message::Error {
                    message: e.to_string(),
                },
            );
            Err(e)
        }
    }
}

/// Runs one worker: connects to the central node, receives a shard, and
/// refines its likelihood sites once per broadcast pass until shut down.
pub fn run_worker(addr: &str) -> Result<()> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(FRAME_TIMEOUT))?;
    stream.set_nodelay(true)?;
    write_frame(
        &mut stream,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            worker_id: 0,
        },
    )?;
    match worker_recv(&mut stream)? {
        Message::Hello { version, .. } if version == PROTOCOL_VERSION => {}
        Message::Hello { version, .. } => {
            let msg = format!(
                "protocol version mismatch: worker speaks {PROTOCOL_VERSION}, central {version}"
            );
            let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
            return Err(Error::Protocol(msg));
        }
        Message::Error { message } => return Err(Error::Protocol(message)),
        other => {
            let msg = format!("expected Hello, got {}", variant_name(&other));
            let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
            return Err(Error::Protocol(msg));
        }
    }
    let (spec, cfg, shard) = match worker_recv(&mut stream)? {
        Message::AssignShard { spec, config, shard } => (spec, config, shard),
        Message::Error { message } => return Err(Error::Protocol(message)),
        other => {
            let msg = format!("expected a shard assignment, got {}", variant_name(&other));
            let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
            return Err(Error::Protocol(msg));
        }
    };
    cfg.validate()?;
    let data = shard.data;
    let h = spec.likelihood.hyper_dim();
    let rule = gauss_hermite(cfg.quad_order)?;
    let maps: Vec<ReductionMap> = (0..data.n_obs())
        .map(|n| crate::expfam::reduction_matrix(&data.z[n], &data.x[n], h))
        .collect();
    let kernels: Vec<_> = (0..data.n_obs()).map(|n| data.kernel(n)).collect();
    // Same starting value the central node folded into the initial global.
    let mut like_sites = vec![GaussianNat::identity(1 + h); data.n_obs()];

    loop {
        match worker_recv(&mut stream)? {
            Message::GlobalBroadcast {
                pass,
                mut global,
                sigma: _,
            } => {
                global.refresh_aux()?;
                let result = refine_like_batch(
                    &global,
                    &data.group_of,
                    &maps,
                    &kernels,
                    &mut like_sites,
                    &rule,
                    cfg.damping,
                );
                write_frame(
                    &mut stream,
                    &Message::SiteDeltas {
                        pass,
                        delta: result.delta,
                        max_info: result.max_info,
                        max_prec: result.max_prec,
                        skips: result.skips,
                    },
                )?;
            }
            Message::Converged { .. } => {}
            Message::Shutdown => return Ok(()),
            Message::Error { message } => return Err(Error::Protocol(message)),
            other => {
                let msg = format!("unexpected {} mid-fit", variant_name(&other));
                let _ = write_frame(&mut stream, &Message::Error { message: msg.clone() });
                return Err(Error::Protocol(msg));
            }
        }
    }
}
