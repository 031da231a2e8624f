//! Framed binary wire protocol.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//!   magic      4 bytes  "NPK1"
//!   msg_type   1 byte   0 HELLO, 1 ACTIVATION, 2 GRADIENT, 3 METRICS,
//!                       4 EPOCH_END, 5 SHUTDOWN, 6 ERROR
//!   batch_id   8 bytes  u64
//!   payload_len 4 bytes u32, byte length of the payload
//!   payload    concatenated tensors:
//!              [dtype 1 byte (0 = f32, 1 = f64)]
//!              [ndim 1 byte][dims: u32 each][row-major data]
//! ```
//!
//! `decode(encode(m)) == m` bit-exactly. Decoding rejects bad magic,
//! truncated frames, unknown message types, and unknown dtypes with the
//! declared error codes.

use crate::numcore::Matrix;

pub const WIRE_MAGIC: [u8; 4] = *b"NPK1";
pub const HEADER_LEN: usize = 17;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("MALFORMED_FRAME: {0}")]
    MalformedFrame(String),
    #[error("UNKNOWN_TYPE: {0}")]
    UnknownType(u8),
    #[error("LENGTH_MISMATCH: declared {declared}, actual {actual}")]
    LengthMismatch { declared: usize, actual: usize },
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::MalformedFrame(_) => "MALFORMED_FRAME",
            WireError::UnknownType(_) => "UNKNOWN_TYPE",
            WireError::LengthMismatch { .. } => "LENGTH_MISMATCH",
        }
    }

    /// Numeric code carried inside ERROR frames.
    pub fn numeric(&self) -> f32 {
        match self {
            WireError::MalformedFrame(_) => 1.0,
            WireError::UnknownType(_) => 2.0,
            WireError::LengthMismatch { .. } => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Activation = 1,
    Gradient = 2,
    Metrics = 3,
    EpochEnd = 4,
    Shutdown = 5,
    Error = 6,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0 => MsgType::Hello,
            1 => MsgType::Activation,
            2 => MsgType::Gradient,
            3 => MsgType::Metrics,
            4 => MsgType::EpochEnd,
            5 => MsgType::Shutdown,
            6 => MsgType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone)]
pub enum WireTensor {
    F32 { dims: Vec<u32>, data: Vec<f32> },
    F64 { dims: Vec<u32>, data: Vec<f64> },
}

impl PartialEq for WireTensor {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (WireTensor::F32 { dims: d1, data: a }, WireTensor::F32 { dims: d2, data: b }) => {
                d1 == d2
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (WireTensor::F64 { dims: d1, data: a }, WireTensor::F64 { dims: d2, data: b }) => {
                d1 == d2
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl WireTensor {
    pub fn from_matrix_f32(m: &Matrix) -> Self {
        WireTensor::F32 {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_matrix_f64(m: &Matrix) -> Self {
        WireTensor::F64 {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().to_vec(),
        }
    }

    pub fn scalar_f32(v: f64) -> Self {
        WireTensor::F32 { dims: vec![1], data: vec![v as f32] }
    }

    pub fn vector_f32(v: &[f64]) -> Self {
        WireTensor::F32 { dims: vec![v.len() as u32], data: v.iter().map(|&x| x as f32).collect() }
    }

    pub fn dims(&self) -> &[u32] {
        match self {
            WireTensor::F32 { dims, .. } | WireTensor::F64 { dims, .. } => dims,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            WireTensor::F32 { data, .. } => data.iter().map(|&v| v as f64).collect(),
            WireTensor::F64 { data, .. } => data.clone(),
        }
    }

    /// Interpret a 2-d tensor as a matrix (f32 data widens to f64).
    pub fn to_matrix(&self) -> Result<Matrix, WireError> {
        let dims = self.dims();
        if dims.len() != 2 {
            return Err(WireError::MalformedFrame(format!(
                "expected a 2-d tensor, got {} dims",
                dims.len()
            )));
        }
        Matrix::from_vec(dims[0] as usize, dims[1] as usize, self.values())
            .map_err(|e| WireError::MalformedFrame(e.to_string()))
    }

    fn encoded_len(&self) -> usize {
        match self {
            WireTensor::F32 { dims, data } => 2 + 4 * dims.len() + 4 * data.len(),
            WireTensor::F64 { dims, data } => 2 + 4 * dims.len() + 8 * data.len(),
        }
    }

    fn encode_into(&self, buf: &mut Vec<u8>) {
        match self {
            WireTensor::F32 { dims, data } => {
                buf.push(0);
                buf.push(dims.len() as u8);
                for d in dims {
                    buf.extend_from_slice(&d.to_le_bytes());
                }
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            WireTensor::F64 { dims, data } => {
                buf.push(1);
                buf.push(dims.len() as u8);
                for d in dims {
                    buf.extend_from_slice(&d.to_le_bytes());
                }
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub batch_id: u64,
    pub tensors: Vec<WireTensor>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, batch_id: u64, tensors: Vec<WireTensor>) -> Self {
        WireMessage { msg_type, batch_id, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload_len: usize = self.tensors.iter().map(|t| t.encoded_len()).sum();
        let mut buf = Vec::with_capacity(HEADER_LEN + payload_len);
        buf.extend_from_slice(&WIRE_MAGIC);
        buf.push(self.msg_type as u8);
        buf.extend_from_slice(&self.batch_id.to_le_bytes());
        buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
        for t in &self.tensors {
            t.encode_into(&mut buf);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::MalformedFrame(format!(
                "frame of {} bytes is shorter than the {}-byte header",
                bytes.len(),
                HEADER_LEN
            )));
        }
        if bytes[0..4] != WIRE_MAGIC {
            return Err(WireError::MalformedFrame("bad magic".into()));
        }
        let msg_type = MsgType::from_byte(bytes[4])?;
        let batch_id = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let declared = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let actual = bytes.len() - HEADER_LEN;
        if declared != actual {
            return Err(WireError::LengthMismatch { declared, actual });
        }
        let mut tensors = Vec::new();
        let payload = &bytes[HEADER_LEN..];
        let mut pos = 0usize;
        while pos < payload.len() {
            let (tensor, used) = decode_tensor(&payload[pos..])?;
            tensors.push(tensor);
            pos += used;
        }
        Ok(WireMessage { msg_type, batch_id, tensors })
    }
}

fn decode_tensor(bytes: &[u8]) -> Result<(WireTensor, usize), WireError> {
    if bytes.len() < 2 {
        return Err(WireError::MalformedFrame("truncated tensor header".into()));
    }
    let dtype = bytes[0];
    let ndim = bytes[1] as usize;
    if dtype > 1 {
        return Err(WireError::UnknownType(dtype));
    }
    if ndim > 8 {
        return Err(WireError::MalformedFrame(format!("tensor rank {} too large", ndim)));
    }
    let mut pos = 2;
    if bytes.len() < pos + 4 * ndim {
        return Err(WireError::MalformedFrame("truncated tensor dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        dims.push(d);
        count = count.saturating_mul(d as u64);
    }
    let elem = if dtype == 0 { 4 } else { 8 };
    let need = count
        .checked_mul(elem)
        .filter(|&n| n <= bytes.len() as u64 - pos as u64)
        .ok_or_else(|| WireError::MalformedFrame("tensor data exceeds payload".into()))?
        as usize;
    let tensor = if dtype == 0 {
        let mut data = Vec::with_capacity(count as usize);
        for chunk in bytes[pos..pos + need].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        WireTensor::F32 { dims, data }
    } else {
        let mut data = Vec::with_capacity(count as usize);
        for chunk in bytes[pos..pos + need].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        WireTensor::F64 { dims, data }
    };
    Ok((tensor, pos + need))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn empty_shutdown_is_17_bytes() {
        let m = WireMessage::new(MsgType::Shutdown, 0, vec![]);
        assert_eq!(m.encode().len(), 17);
    }

    #[test]
    fn activation_payload_length_matches_layout() {
        let mut rng = Rng::new(1);
        let z = rng.normal_matrix(2, 3, 0.0, 1.0);
        let m = WireMessage::new(MsgType::Activation, 5, vec![WireTensor::from_matrix_f32(&z)]);
        let bytes = m.encode();
        // dtype 1 + ndim 1 + 2 dims * 4 + 6 values * 4 = 34
        assert_eq!(bytes.len(), 17 + 34);
        let declared = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
        assert_eq!(declared, 34);
    }

    #[test]
    fn roundtrip_identity() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let n = 1 + rng.below(4);
            let mut tensors = Vec::new();
            for _ in 0..n {
                let r = 1 + rng.below(5);
                let c = 1 + rng.below(5);
                let m = rng.normal_matrix(r, c, 0.0, 3.0);
                if rng.below(2) == 0 {
                    tensors.push(WireTensor::from_matrix_f32(&m));
                } else {
                    tensors.push(WireTensor::from_matrix_f64(&m));
                }
            }
            let msg = WireMessage::new(MsgType::Metrics, rng.next_u64(), tensors);
            let decoded = WireMessage::decode(&msg.encode()).unwrap();
            assert_eq!(decoded, msg);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = WireMessage::new(MsgType::Hello, 0, vec![]).encode();
        bytes[0] = b'X';
        assert!(matches!(
            WireMessage::decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }

    #[test]
    fn rejects_unknown_message_type() {
        let mut bytes = WireMessage::new(MsgType::Hello, 0, vec![]).encode();
        bytes[4] = 99;
        assert_eq!(WireMessage::decode(&bytes), Err(WireError::UnknownType(99)));
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut bytes =
            WireMessage::new(MsgType::Activation, 1, vec![WireTensor::scalar_f32(1.0)]).encode();
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(
            WireMessage::decode(truncated),
            Err(WireError::LengthMismatch { .. })
        ));
        // header shorter than 17 bytes
        bytes.truncate(10);
        assert!(matches!(
            WireMessage::decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes =
            WireMessage::new(MsgType::Activation, 1, vec![WireTensor::scalar_f32(1.0)]).encode();
        bytes[HEADER_LEN] = 7; // dtype byte of the first tensor
        assert_eq!(WireMessage::decode(&bytes), Err(WireError::UnknownType(7)));
    }

    #[test]
    fn rejects_oversized_tensor_dims() {
        // tensor claims more data than the payload holds
        let mut payload = vec![0u8, 2]; // f32, 2 dims
        payload.extend_from_slice(&1000u32.to_le_bytes());
        payload.extend_from_slice(&1000u32.to_le_bytes());
        payload.extend_from_slice(&[0u8; 8]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&WIRE_MAGIC);
        bytes.push(MsgType::Activation as u8);
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&payload);
        assert!(matches!(
            WireMessage::decode(&bytes),
            Err(WireError::MalformedFrame(_))
        ));
    }
}
