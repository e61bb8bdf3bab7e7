//! Framed wire protocol for external score providers.
//!
//! A provider (typically a subprocess wrapping a learned score network)
//! speaks length-prefixed frames over a byte stream: every frame is a u32
//! little-endian payload length followed by the payload. On startup the
//! provider announces itself with a handshake frame; afterwards each score
//! request is a JSON header frame plus one raster frame (float32
//! little-endian, row-major, the state first and any conditioning channels
//! after it), answered by a JSON status frame and, on success, one raster
//! frame holding the score.

use std::io::{self, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::grid::{AngularGrid, PhotometryStack, Quantity, ScalarField};
use crate::sampler::{SamplerError, ScorePrior};

/// Protocol identifier carried by the handshake frame.
pub const PROTOCOL_NAME: &str = "lensforge-score";
/// Protocol revision carried by the handshake frame.
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on any frame body, checked before allocating; corrupt
/// length prefixes must not trigger huge allocations.
pub const MAX_FRAME_BYTES: u32 = 1 << 28;

/// Writes one length-prefixed frame and flushes.
pub fn write_frame(writer: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_BYTES)
        .ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidInput, "frame payload exceeds the size cap")
        })?;
    writer.write_all(&len.to_le_bytes())?;
    writer.write_all(payload)?;
    writer.flush()
}

/// Reads one length-prefixed frame.
pub fn read_frame(reader: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    reader.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds the {MAX_FRAME_BYTES}-byte cap"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    reader.read_exact(&mut payload)?;
    Ok(payload)
}

#[derive(Debug, Serialize, Deserialize)]
struct Handshake {
    proto: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct RequestHeader {
    op: String,
    sigma: f64,
    shape: [usize; 2],
    cond_channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseHeader {
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn f64s_to_f32_bytes(values: &[f64], out: &mut Vec<u8>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn f32_bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn send_error(writer: &mut impl Write, message: String) -> io::Result<()> {
    let header = ResponseHeader { ok: false, error: Some(message) };
    write_frame(writer, &serde_json::to_vec(&header).expect("response header serializes"))
}

/// Serves score requests until the peer closes the stream.
///
/// This is the provider side of the protocol, generic over transports so a
/// subprocess pipe, a socket, or an in-memory buffer all work. Malformed
/// input yields a structured `{"ok": false, ...}` response — never a panic;
/// when the framing itself can no longer be trusted (an undecodable header)
/// the connection is answered and then closed.
pub fn serve_score<R, W, P>(
    mut reader: R,
    mut writer: W,
    prior: &P,
    grid: AngularGrid,
) -> io::Result<()>
where
    R: Read,
    W: Write,
    P: ScorePrior + ?Sized,
{
    let handshake = Handshake { proto: PROTOCOL_NAME.into(), version: PROTOCOL_VERSION };
    write_frame(&mut writer, &serde_json::to_vec(&handshake).expect("handshake serializes"))?;

    loop {
        let header_bytes = match read_frame(&mut reader) {
            Ok(bytes) => bytes,
            // Peer hung up between requests: a normal shutdown.
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                send_error(&mut writer, e.to_string())?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let header: RequestHeader = match serde_json::from_slice(&header_bytes) {
            Ok(h) => h,
            Err(e) => {
                // With an undecodable header the stream position is
                // ambiguous; reply and close rather than guess.
                send_error(&mut writer, format!("malformed request header: {e}"))?;
                return Ok(());
            }
        };

        let raster = match read_frame(&mut reader) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                send_error(&mut writer, e.to_string())?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };

        // Framing is intact from here on, so application-level problems are
        // answered in-band and the connection keeps serving.
        if let Err(message) = validate_request(&header, &raster, grid) {
            send_error(&mut writer, message)?;
            continue;
        }

        let n_pix = grid.len();
        let values = f32_bytes_to_f64s(&raster);
        let x = ScalarField::new(grid, Quantity::Generic, values[..n_pix].to_vec())
            .expect("raster length was validated");
        let conditioning = if header.cond_channels == 3 {
            let planes = &values[n_pix..];
            let stacked: Vec<[f64; 3]> = (0..n_pix)
                .map(|j| [planes[j], planes[n_pix + j], planes[2 * n_pix + j]])
                .collect();
            Some(
                PhotometryStack::new(grid, stacked)
                    .expect("conditioning length was validated"),
            )
        } else {
            None
        };

        match prior.score(&x, header.sigma, conditioning.as_ref()) {
            Ok(score) => {
                let ok = ResponseHeader { ok: true, error: None };
                write_frame(&mut writer, &serde_json::to_vec(&ok).expect("header serializes"))?;
                let mut bytes = Vec::with_capacity(4 * n_pix);
                f64s_to_f32_bytes(score.values(), &mut bytes);
                write_frame(&mut writer, &bytes)?;
            }
            Err(e) => send_error(&mut writer, e.to_string())?,
        }
    }
}

fn validate_request(
    header: &RequestHeader,
    raster: &[u8],
    grid: AngularGrid,
) -> Result<(), String> {
    if header.op != "score" {
        return Err(format!("unsupported op {:?}", header.op));
    }
    if !header.sigma.is_finite() || header.sigma < 0.0 {
        return Err(format!("sigma must be finite and non-negative, got {}", header.sigma));
    }
    let n = grid.n_pix();
    if header.shape != [n, n] {
        return Err(format!(
            "shape {:?} does not match the provider grid [{n}, {n}]",
            header.shape
        ));
    }
    if header.cond_channels != 0 && header.cond_channels != 3 {
        return Err(format!(
            "cond_channels must be 0 or 3, got {}",
            header.cond_channels
        ));
    }
    let expected = 4 * n * n * (1 + header.cond_channels);
    if raster.len() != expected {
        return Err(format!(
            "raster frame holds {} bytes, expected {expected}",
            raster.len()
        ));
    }
    Ok(())
}

struct Connection {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A score prior served by a subprocess speaking the framed protocol.
///
/// The connection is a dedicated pipe pair with at most one in-flight
/// request (enforced by the interior lock), so concurrent chains serialize
/// their score calls rather than interleaving frames.
pub struct ExternalScorePrior {
    command: String,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalScorePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorePrior").field("command", &self.command).finish()
    }
}

impl ExternalScorePrior {
    /// Launches `command` (via `sh -c`) and validates its handshake.
    pub fn spawn(command: &str) -> Result<Self, SamplerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| {
                SamplerError::Protocol(format!("failed to launch score provider {command:?}: {e}"))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut conn = Connection { child, stdin, stdout };

        let bytes = read_frame(&mut conn.stdout).map_err(|e| {
            SamplerError::Protocol(format!("score provider sent no handshake: {e}"))
        })?;
        let handshake: Handshake = serde_json::from_slice(&bytes)
            .map_err(|e| SamplerError::Protocol(format!("malformed handshake: {e}")))?;
        if handshake.proto != PROTOCOL_NAME || handshake.version != PROTOCOL_VERSION {
            return Err(SamplerError::Protocol(format!(
                "provider speaks {}/{}, expected {PROTOCOL_NAME}/{PROTOCOL_VERSION}",
                handshake.proto, handshake.version
            )));
        }
        Ok(Self { command: command.to_string(), conn: Mutex::new(conn) })
    }
}

impl ScorePrior for ExternalScorePrior {
    fn score(
        &self,
        x: &ScalarField,
        sigma: f64,
        conditioning: Option<&PhotometryStack>,
    ) -> Result<ScalarField, SamplerError> {
        let grid = x.grid();
        let n = grid.n_pix();
        let n_pix = grid.len();
        let cond_channels = match conditioning {
            Some(stack) => {
                if stack.grid() != grid {
                    return Err(SamplerError::InvalidArgument(
                        "conditioning stack grid differs from the state grid".into(),
                    ));
                }
                3
            }
            None => 0,
        };

        let mut conn = self.conn.lock().map_err(|_| {
            SamplerError::Protocol("score provider connection poisoned".into())
        })?;

        let header = RequestHeader {
            op: "score".into(),
            sigma,
            shape: [n, n],
            cond_channels,
        };
        write_frame(&mut conn.stdin, &serde_json::to_vec(&header).expect("header serializes"))?;
        let mut raster = Vec::with_capacity(4 * n_pix * (1 + cond_channels));
        f64s_to_f32_bytes(x.values(), &mut raster);
        if let Some(stack) = conditioning {
            for channel in 0..3 {
                for v in stack.values() {
                    raster.extend_from_slice(&(v[channel] as f32).to_le_bytes());
                }
            }
        }
        write_frame(&mut conn.stdin, &raster)?;

        let bytes = read_frame(&mut conn.stdout)?;
        let response: ResponseHeader = serde_json::from_slice(&bytes)
            .map_err(|e| SamplerError::Protocol(format!("malformed response header: {e}")))?;
        if !response.ok {
            return Err(SamplerError::Protocol(
                response.error.unwrap_or_else(|| "provider reported an unspecified error".into()),
            ));
        }
        let score_bytes = read_frame(&mut conn.stdout)?;
        if score_bytes.len() != 4 * n_pix {
            return Err(SamplerError::Protocol(format!(
                "score raster holds {} bytes, expected {}",
                score_bytes.len(),
                4 * n_pix
            )));
        }
        Ok(ScalarField::new(grid, Quantity::Generic, f32_bytes_to_f64s(&score_bytes))?)
    }

    fn name(&self) -> String {
        format!("external({})", self.command)
    }
}
