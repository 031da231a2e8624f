//! Byte transports carrying wire frames: TCP, an in-memory loopback with
//! the same byte contract, and a capturing wrapper for traffic inspection.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::splitnet::wire::{MsgType, WireError, WireMessage, HEADER_LEN, WIRE_MAGIC};

pub trait Transport: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Protocol(format!("connect to {}: {}", addr, e)))?;
        stream.set_nodelay(true).ok();
        Ok(TcpTransport { stream })
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        stream.set_nodelay(true).ok();
        TcpTransport { stream }
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.stream
            .write_all(frame)
            .map_err(|e| Error::Protocol(format!("send failed: {}", e)))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut header = [0u8; HEADER_LEN];
        self.stream
            .read_exact(&mut header)
            .map_err(|e| Error::Protocol(format!("recv header failed: {}", e)))?;
        if header[0..4] != WIRE_MAGIC {
            return Err(WireError::MalformedFrame("bad magic on stream".into()).into());
        }
        let payload_len = u32::from_le_bytes(header[13..17].try_into().unwrap()) as usize;
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + payload_len, 0);
        self.stream
            .read_exact(&mut frame[HEADER_LEN..])
            .map_err(|e| Error::Protocol(format!("recv payload failed: {}", e)))?;
        Ok(frame)
    }
}

/// In-memory transport; frames cross as whole byte vectors, so the byte
/// contract is identical to TCP.
pub struct LoopbackTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Connected pair of loopback endpoints.
pub fn loopback_pair() -> (LoopbackTransport, LoopbackTransport) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        LoopbackTransport { tx: tx_a, rx: rx_a },
        LoopbackTransport { tx: tx_b, rx: rx_b },
    )
}

impl Transport for LoopbackTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Protocol("loopback peer disconnected".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| Error::Protocol("loopback peer disconnected".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Shared capture of every frame that crossed a transport.
#[derive(Clone, Default)]
pub struct FrameCapture {
    frames: Arc<Mutex<Vec<(Direction, Vec<u8>)>>>,
}

impl FrameCapture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, dir: Direction, frame: &[u8]) {
        self.frames.lock().unwrap().push((dir, frame.to_vec()));
    }

    pub fn frame_count(&self) -> usize {
        self.frames.lock().unwrap().len()
    }

    pub fn total_bytes(&self) -> usize {
        self.frames.lock().unwrap().iter().map(|(_, f)| f.len()).sum()
    }

    /// Decode every captured frame into (direction, type, tensor dims).
    pub fn inventory(&self) -> Result<Vec<(Direction, MsgType, Vec<Vec<u32>>)>> {
        let frames = self.frames.lock().unwrap();
        let mut out = Vec::with_capacity(frames.len());
        for (dir, bytes) in frames.iter() {
            let msg = WireMessage::decode(bytes)?;
            let dims = msg.tensors.iter().map(|t| t.dims().to_vec()).collect();
            out.push((*dir, msg.msg_type, dims));
        }
        Ok(out)
    }

    pub fn raw_frames(&self) -> Vec<(Direction, Vec<u8>)> {
        self.frames.lock().unwrap().clone()
    }
}

/// Transport wrapper recording all traffic into a `FrameCapture`.
pub struct CaptureTransport<T: Transport> {
    inner: T,
    capture: FrameCapture,
}

impl<T: Transport> CaptureTransport<T> {
    pub fn new(inner: T, capture: FrameCapture) -> Self {
        CaptureTransport { inner, capture }
    }
}

impl<T: Transport> Transport for CaptureTransport<T> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.capture.push(Direction::Sent, frame);
        self.inner.send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let frame = self.inner.recv_frame()?;
        self.capture.push(Direction::Received, &frame);
        Ok(frame)
    }
}

/// Transport that fails after a fixed number of sends; exercises the
/// connection-loss path in tests.
pub struct FlakyTransport<T: Transport> {
    inner: T,
    sends_left: usize,
}

impl<T: Transport> FlakyTransport<T> {
    pub fn new(inner: T, sends_before_failure: usize) -> Self {
        FlakyTransport { inner, sends_left: sends_before_failure }
    }
}

impl<T: Transport> Transport for FlakyTransport<T> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        if self.sends_left == 0 {
            return Err(Error::Protocol("simulated connection loss".into()));
        }
        self.sends_left -= 1;
        self.inner.send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.inner.recv_frame()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitnet::wire::WireTensor;

    #[test]
    fn loopback_carries_frames_both_ways() {
        let (mut a, mut b) = loopback_pair();
        let msg = WireMessage::new(MsgType::Hello, 0, vec![WireTensor::scalar_f32(1.0)]);
        a.send_frame(&msg.encode()).unwrap();
        let got = WireMessage::decode(&b.recv_frame().unwrap()).unwrap();
        assert_eq!(got, msg);
        let reply = WireMessage::new(MsgType::Shutdown, 9, vec![]);
        b.send_frame(&reply.encode()).unwrap();
        assert_eq!(WireMessage::decode(&a.recv_frame().unwrap()).unwrap(), reply);
    }

    #[test]
    fn capture_records_traffic() {
        let (a, mut b) = loopback_pair();
        let capture = FrameCapture::new();
        let mut a = CaptureTransport::new(a, capture.clone());
        a.send_frame(&WireMessage::new(MsgType::EpochEnd, 3, vec![]).encode()).unwrap();
        b.recv_frame().unwrap();
        let inv = capture.inventory().unwrap();
        assert_eq!(inv.len(), 1);
        assert_eq!(inv[0].1, MsgType::EpochEnd);
        assert_eq!(capture.total_bytes(), 17);
    }

    #[test]
    fn tcp_transport_roundtrip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = TcpTransport::from_stream(stream);
            let frame = t.recv_frame().unwrap();
            t.send_frame(&frame).unwrap();
        });
        let mut client = TcpTransport::connect(&addr.to_string()).unwrap();
        let msg = WireMessage::new(
            MsgType::Activation,
            7,
            vec![WireTensor::vector_f32(&[1.0, 2.0, 3.0])],
        );
        client.send_frame(&msg.encode()).unwrap();
        let echoed = WireMessage::decode(&client.recv_frame().unwrap()).unwrap();
        assert_eq!(echoed, msg);
        handle.join().unwrap();
    }
}
