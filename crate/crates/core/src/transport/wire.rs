//! Framed byte-stream form of [`Envelope`] for cross-process runs.
//!
//! Frame layout, fixed across platforms:
//!
//! ```text
//! u32 BE  frame length (all bytes after this prefix)
//! u32 BE  header length H
//! H bytes UTF-8 JSON header: every envelope field except tensor data
//! per tensor:
//!     u32 BE   name length, then the UTF-8 name
//!     u32 BE   rank, then rank × u32 BE dims
//!     f64 LE   × (product of dims) values
//! ```
//!
//! Lengths and dims follow network byte order; float payloads stay
//! little-endian so the dominant platforms can load them without swapping.
//! Both choices are fixed by this format, so frames written anywhere parse
//! anywhere.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transport::{Endpoint, Envelope, MsgType, Phase};

/// Decode guards: keep a corrupt or hostile frame from allocating wildly.
const MAX_NAME_BYTES: u32 = 1 << 16;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 27;
const MAX_FRAME_BYTES: u32 = 1 << 30;

#[derive(Serialize, Deserialize)]
struct FrameHeader {
    msg_type: MsgType,
    epoch: u64,
    batch: u64,
    phase: Phase,
    sender: Endpoint,
    receiver: Endpoint,
    note: Option<String>,
    tensor_count: u32,
}

/// Serialize one envelope into a complete frame (length prefix included).
pub fn encode_frame(envelope: &Envelope) -> Result<Vec<u8>> {
    envelope.validate()?;
    let header = serde_json::to_vec(&FrameHeader {
        msg_type: envelope.msg_type,
        epoch: envelope.epoch,
        batch: envelope.batch,
        phase: envelope.phase,
        sender: envelope.sender,
        receiver: envelope.receiver,
        note: envelope.note.clone(),
        tensor_count: envelope.payload.len() as u32,
    })
    .map_err(|e| Error::Codec(format!("frame header: {e}")))?;

    let mut body = Vec::with_capacity(4 + header.len());
    body.extend_from_slice(&(header.len() as u32).to_be_bytes());
    body.extend_from_slice(&header);
    for (name, tensor) in &envelope.payload {
        body.extend_from_slice(&(name.len() as u32).to_be_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(tensor.rank() as u32).to_be_bytes());
        for &dim in tensor.shape() {
            body.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        for &v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    if body.len() as u64 > u64::from(MAX_FRAME_BYTES) {
        return Err(Error::Codec(format!(
            "frame of {} bytes exceeds the {} byte limit",
            body.len(),
            MAX_FRAME_BYTES
        )));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Parse a complete frame (length prefix included).
pub fn decode_frame(bytes: &[u8]) -> Result<Envelope> {
    if bytes.len() < 4 {
        return Err(Error::Codec("frame shorter than its length prefix".into()));
    }
    let declared = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[4..];
    if declared != body.len() {
        return Err(Error::Codec(format!(
            "length prefix says {declared} bytes but the frame carries {}",
            body.len()
        )));
    }
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<Envelope> {
    let mut r = SliceReader { body, at: 0 };
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.bytes(header_len, "header")?;
    let header: FrameHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Codec(format!("frame header: {e}")))?;

    let mut payload = Vec::with_capacity(header.tensor_count as usize);
    for _ in 0..header.tensor_count {
        let name_len = r.u32("tensor name length")?;
        if name_len > MAX_NAME_BYTES {
            return Err(Error::Codec(format!(
                "tensor name of {name_len} bytes exceeds the limit"
            )));
        }
        let name = std::str::from_utf8(r.bytes(name_len as usize, "tensor name")?)
            .map_err(|_| Error::Codec("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        if rank > MAX_RANK {
            return Err(Error::Codec(format!("tensor rank {rank} exceeds the limit")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = r.u32("tensor dim")?;
            elements = elements.saturating_mul(u64::from(d));
            dims.push(d as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(Error::Codec(format!(
                "tensor of {elements} elements exceeds the limit"
            )));
        }
        let mut data = Vec::with_capacity(elements as usize);
        for _ in 0..elements {
            let raw = r.bytes(8, "tensor values")?;
            data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
        }
        payload.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.at != body.len() {
        return Err(Error::Codec(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.at
        )));
    }

    let envelope = Envelope {
        msg_type: header.msg_type,
        epoch: header.epoch,
        batch: header.batch,
        phase: header.phase,
        sender: header.sender,
        receiver: header.receiver,
        note: header.note,
        payload,
    };
    envelope.validate()?;
    Ok(envelope)
}

struct SliceReader<'a> {
    body: &'a [u8],
    at: usize,
}

impl<'a> SliceReader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.body.len() {
            return Err(Error::Codec(format!("frame truncated inside {what}")));
        }
        let out = &self.body[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.bytes(4, what)?;
        Ok(u32::from_be_bytes(raw.try_into().expect("4 bytes")))
    }
}

/// Read one frame from a byte stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Envelope> {
    let mut prefix = [0u8; 4];
    reader.read_exact(&mut prefix)?;
    let len = u32::from_be_bytes(prefix);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Codec(format!(
            "incoming frame of {len} bytes exceeds the limit"
        )));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    decode_body(&body)
}

/// Write one frame to a byte stream.
pub fn write_frame(writer: &mut impl Write, envelope: &Envelope) -> Result<()> {
    writer.write_all(&encode_frame(envelope)?)?;
    writer.flush()?;
    Ok(())
}

/// Envelope carrier over one TCP connection.
pub struct StreamTransport {
    stream: TcpStream,
}

impl StreamTransport {
    /// Dial a peer.
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(StreamTransport { stream })
    }

    /// Bind, accept a single peer, and return the established transport
    /// along with the bound local address (useful with an ephemeral port).
    pub fn listen(addr: &str) -> Result<(Self, SocketAddr)> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        Ok((StreamTransport { stream }, local))
    }

    pub fn send(&mut self, envelope: &Envelope) -> Result<()> {
        write_frame(&mut self.stream, envelope)
    }

    pub fn recv(&mut self) -> Result<Envelope> {
        read_frame(&mut self.stream)
    }

    pub fn peer_addr(&self) -> Result<SocketAddr> {
        Ok(self.stream.peer_addr()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{NetId, WorkerId};
    use crate::transport::{CONTEXTS_TENSOR, CONTEXT_GRADS_TENSOR};
    use proptest::prelude::*;

    fn ep(net: u32, worker: u32) -> Endpoint {
        (NetId(net), WorkerId(worker))
    }

    fn context_env(values: Tensor) -> Envelope {
        Envelope::new(
            MsgType::ContextBatch,
            3,
            17,
            Phase::Contexts,
            ep(1, 2),
            ep(2, 1),
            vec![(CONTEXTS_TENSOR.into(), values)],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_on_awkward_floats() {
        let values = Tensor::from_vec(
            &[2, 3],
            vec![0.1, -3.7e-300, f64::MIN_POSITIVE, -0.0, 1.5, 6.02e23],
        )
        .unwrap();
        let env = context_env(values);
        let decoded = decode_frame(&encode_frame(&env).unwrap()).unwrap();
        assert_eq!(env, decoded);
        let (_, original) = &env.payload[0];
        let (_, copy) = &decoded.payload[0];
        for (a, b) in original.data().iter().zip(copy.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frame_size_matches_the_hand_computed_layout() {
        let env = context_env(Tensor::zeros(&[1, 64]));
        let frame = encode_frame(&env).unwrap();
        // Tensor block by hand: 4 (name len) + 8 ("contexts") + 4 (rank)
        // + 2·4 (dims) + 64·8 (values) = 536 bytes.
        let tensor_block = 4 + 8 + 4 + 8 + 512;
        let header_len =
            u32::from_be_bytes(frame[4..8].try_into().unwrap()) as usize;
        assert_eq!(frame.len(), 4 + 4 + header_len + tensor_block);
        // And the prefix covers exactly everything after itself.
        let prefix = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(prefix, frame.len() - 4);
    }

    #[test]
    fn corrupt_prefix_and_truncation_are_codec_errors() {
        let env = context_env(Tensor::zeros(&[2, 2]));
        let mut frame = encode_frame(&env).unwrap();
        assert!(matches!(
            decode_frame(&frame[..frame.len() - 5]),
            Err(Error::Codec(_))
        ));
        frame[0] ^= 0x01;
        assert!(matches!(decode_frame(&frame), Err(Error::Codec(_))));
    }

    #[test]
    fn garbage_header_is_a_codec_error() {
        let mut body = Vec::new();
        body.extend_from_slice(&5u32.to_be_bytes());
        body.extend_from_slice(b"hello");
        let mut frame = Vec::new();
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        assert!(matches!(decode_frame(&frame), Err(Error::Codec(_))));
    }

    #[test]
    fn tcp_bridge_round_trips_envelopes_both_ways() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut transport = StreamTransport { stream };
            let received = transport.recv().unwrap();
            transport.send(&received).unwrap(); // echo
        });
        let mut client = StreamTransport::connect(&addr.to_string()).unwrap();
        let env = context_env(Tensor::filled(&[3, 5], 0.25));
        client.send(&env).unwrap();
        let echoed = client.recv().unwrap();
        assert_eq!(env, echoed);
        server.join().unwrap();
    }

    fn finite_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0e12..1.0e12f64, len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn any_context_or_grad_envelope_round_trips(
            rows in 1usize..6,
            cols in 1usize..9,
            epoch in 0u64..1000,
            batch in 0u64..1000,
            as_grad in any::<bool>(),
            seed_values in finite_values(48),
        ) {
            let data = seed_values[..rows * cols].to_vec();
            let tensor = Tensor::from_vec(&[rows, cols], data).unwrap();
            let (msg_type, phase, name) = if as_grad {
                (MsgType::SliceGrad, Phase::GradReturn, CONTEXT_GRADS_TENSOR)
            } else {
                (MsgType::ContextBatch, Phase::Contexts, CONTEXTS_TENSOR)
            };
            let env = Envelope::new(
                msg_type, epoch, batch, phase, ep(1, 1), ep(2, 1),
                vec![(name.into(), tensor)],
            ).unwrap();
            let decoded = decode_frame(&encode_frame(&env).unwrap()).unwrap();
            prop_assert_eq!(env, decoded);
        }

        #[test]
        fn any_weight_envelope_round_trips(
            n_tensors in 1usize..4,
            dim_a in 1usize..5,
            dim_b in 1usize..5,
            values in finite_values(64),
            global in any::<bool>(),
        ) {
            let mut payload = Vec::new();
            for i in 0..n_tensors {
                let data = values[i * dim_a * dim_b..(i + 1) * dim_a * dim_b].to_vec();
                payload.push((
                    format!("layer{i}.kernel"),
                    Tensor::from_vec(&[dim_a, dim_b], data).unwrap(),
                ));
            }
            let (msg_type, phase) = if global {
                (MsgType::GlobalWeights, Phase::GlobalSync)
            } else {
                (MsgType::WeightReport, Phase::WeightReport)
            };
            let env = Envelope::new(msg_type, 1, 2, phase, ep(3, 2), ep(3, 1), payload).unwrap();
            let decoded = decode_frame(&encode_frame(&env).unwrap()).unwrap();
            prop_assert_eq!(env, decoded);
        }
    }
}
