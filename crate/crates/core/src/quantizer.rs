//! Unbiased modular lattice quantizer with decoder side information.
//!
//! A vector `x` is randomly rounded to the cubic lattice `eps * Z^d`
//! (`E[eps * z] = x`), and only the residues `z mod B` travel on the wire.
//! The receiver resolves each residue to the lattice point closest to its own
//! vector `y`; this is exact whenever `max_k |x_k - y_k| < (B/2 - 1) * eps`.
//! A 16-bit checksum of `z` detects (with probability `1 - 2^-16`) the
//! aliasing that happens when the models are too far apart.
//!
//! Wire format, little endian:
//!
//! ```text
//! [u32 dimension][u16 log2(B)][u16 checksum][residues, log2(B) bits each, LSB first, zero padded]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::SimRng;

/// Size of the fixed message header in bits.
pub const HEADER_BITS: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("invalid quantizer config: {0}")]
    InvalidConfig(String),
    #[error("vector has dimension {got}, quantizer expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("checksum mismatch (sent {sent:#06x}, decoded {decoded:#06x}): distance criterion violated")]
    DistanceCriterion { sent: u16, decoded: u16 },
    #[error("malformed wire message: {0}")]
    Wire(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Lattice step.
    pub epsilon: f64,
    /// Modular range, a power of two `>= 4`.
    pub range_b: u64,
    pub dimension: usize,
}

impl QuantizerConfig {
    pub fn new(epsilon: f64, range_b: u64, dimension: usize) -> Result<Self, QuantizerError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(QuantizerError::InvalidConfig(format!("epsilon = {epsilon}")));
        }
        if range_b < 4 || !range_b.is_power_of_two() || range_b > 1 << 32 {
            return Err(QuantizerError::InvalidConfig(format!(
                "range_B = {range_b} must be a power of two in [4, 2^32]"
            )));
        }
        if dimension == 0 || dimension > u32::MAX as usize {
            return Err(QuantizerError::InvalidConfig(format!("dimension = {dimension}")));
        }
        Ok(QuantizerConfig {
            epsilon,
            range_b,
            dimension,
        })
    }

    pub fn log2_b(&self) -> u16 {
        self.range_b.trailing_zeros() as u16
    }

    /// Exact size of an encoded message: `d * log2(B) + 64`.
    pub fn bit_cost(&self) -> u64 {
        self.dimension as u64 * self.log2_b() as u64 + HEADER_BITS
    }

    /// Worst-case `||decoded - x||` of a successful round trip.
    pub fn round_trip_error_bound(&self) -> f64 {
        self.epsilon * (self.dimension as f64).sqrt()
    }

    /// Largest coordinate-wise distance for which decoding is guaranteed.
    pub fn success_radius(&self) -> f64 {
        (self.range_b as f64 / 2.0 - 1.0) * self.epsilon
    }
}

/// Lattice step that makes the round-trip error bound `eta * H * M_hat`.
pub fn select_epsilon(eta: f64, mean_h: f64, m_hat: f64, dimension: usize) -> f64 {
    eta * mean_h * m_hat / (dimension as f64).sqrt()
}

/// Smallest admissible `B` whose success radius exceeds `max_distance`.
pub fn range_for_distance(max_distance: f64, epsilon: f64) -> u64 {
    let mut b: u64 = 4;
    while (b as f64 / 2.0 - 1.0) * epsilon <= max_distance && b < 1 << 32 {
        b <<= 1;
    }
    b
}

/// Residues of a lattice point plus its checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedMessage {
    log2_b: u16,
    checksum: u16,
    residues: Vec<u32>,
}

impl QuantizedMessage {
    pub fn residues(&self) -> &[u32] {
        &self.residues
    }

    pub fn checksum(&self) -> u16 {
        self.checksum
    }

    pub fn dimension(&self) -> usize {
        self.residues.len()
    }

    pub fn bit_cost(&self) -> u64 {
        self.residues.len() as u64 * self.log2_b as u64 + HEADER_BITS
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let width = self.log2_b as u32;
        let payload_bits = self.residues.len() as u64 * width as u64;
        let mut out = Vec::with_capacity(8 + payload_bits.div_ceil(8) as usize);
        out.extend_from_slice(&(self.residues.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.log2_b.to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        let mut acc: u64 = 0;
        let mut filled: u32 = 0;
        for &r in &self.residues {
            acc |= (r as u64) << filled;
            filled += width;
            while filled >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            out.push(acc as u8);
        }
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, QuantizerError> {
        if bytes.len() < 8 {
            return Err(QuantizerError::Wire(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let dimension = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let log2_b = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        let checksum = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        if !(2..=32).contains(&log2_b) {
            return Err(QuantizerError::Wire(format!("log2(B) = {log2_b}")));
        }
        let width = log2_b as u32;
        let expected = (dimension as u64 * width as u64).div_ceil(8) as usize;
        let payload = &bytes[8..];
        if payload.len() != expected {
            return Err(QuantizerError::Wire(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mask: u64 = (1u64 << width) - 1;
        let mut residues = Vec::with_capacity(dimension);
        let mut acc: u64 = 0;
        let mut filled: u32 = 0;
        let mut next = payload.iter();
        for _ in 0..dimension {
            while filled < width {
                acc |= (*next.next().expect("length checked") as u64) << filled;
                filled += 8;
            }
            residues.push((acc & mask) as u32);
            acc >>= width;
            filled -= width;
        }
        if acc != 0 {
            return Err(QuantizerError::Wire("non-zero padding bits".into()));
        }
        Ok(QuantizedMessage {
            log2_b,
            checksum,
            residues,
        })
    }
}

/// 16-bit fold of FNV-1a over the little-endian lattice coordinates.
pub fn lattice_checksum(z: &[i64]) -> u16 {
    let mut h: u32 = 0x811c_9dc5;
    for v in z {
        for byte in v.to_le_bytes() {
            h ^= byte as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
    }
    ((h >> 16) ^ (h & 0xffff)) as u16
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    config: QuantizerConfig,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig) -> Self {
        Quantizer { config }
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    fn check_dim(&self, got: usize) -> Result<(), QuantizerError> {
        if got != self.config.dimension {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.config.dimension,
                got,
            });
        }
        Ok(())
    }

    /// Unbiased randomized rounding of `x / eps` to integers.
    pub fn round(&self, x: &[f64], rng: &mut SimRng) -> Result<Vec<i64>, QuantizerError> {
        self.check_dim(x.len())?;
        Ok(x.iter()
            .map(|&v| {
                let scaled = v / self.config.epsilon;
                let floor = scaled.floor();
                let up = rng.random::<f64>() < scaled - floor;
                floor as i64 + up as i64
            })
            .collect())
    }

    pub fn encode_lattice(&self, z: &[i64]) -> Result<QuantizedMessage, QuantizerError> {
        self.check_dim(z.len())?;
        let b = self.config.range_b as i64;
        Ok(QuantizedMessage {
            log2_b: self.config.log2_b(),
            checksum: lattice_checksum(z),
            residues: z.iter().map(|v| v.rem_euclid(b) as u32).collect(),
        })
    }

    pub fn encode(&self, x: &[f64], rng: &mut SimRng) -> Result<QuantizedMessage, QuantizerError> {
        let z = self.round(x, rng)?;
        self.encode_lattice(&z)
    }

    /// Lattice coordinates nearest to `side_info` that match the residues.
    pub fn resolve(&self, msg: &QuantizedMessage, side_info: &[f64]) -> Result<Vec<i64>, QuantizerError> {
        self.check_dim(side_info.len())?;
        self.check_dim(msg.dimension())?;
        if msg.log2_b != self.config.log2_b() {
            return Err(QuantizerError::Wire(format!(
                "message uses log2(B) = {}, quantizer {}",
                msg.log2_b,
                self.config.log2_b()
            )));
        }
        let b = self.config.range_b as f64;
        let bi = self.config.range_b as i64;
        Ok(msg
            .residues
            .iter()
            .zip(side_info)
            .map(|(&r, &y)| {
                // smallest z = r (mod B) with z > y/eps - B/2
                let low = y / self.config.epsilon - b / 2.0;
                let k = ((low - r as f64) / b).floor() as i64 + 1;
                let mut z = r as i64 + k * bi;
                // the division can round across a window edge
                while z as f64 <= low {
                    z += bi;
                }
                while (z - bi) as f64 > low {
                    z -= bi;
                }
                z
            })
            .collect())
    }

    /// Reconstructs `eps * z`, or reports a checksum mismatch.
    pub fn decode(&self, msg: &QuantizedMessage, side_info: &[f64]) -> Result<Vec<f64>, QuantizerError> {
        let z = self.resolve(msg, side_info)?;
        let decoded = lattice_checksum(&z);
        if decoded != msg.checksum {
            return Err(QuantizerError::DistanceCriterion {
                sent: msg.checksum,
                decoded,
            });
        }
        Ok(z.iter().map(|&v| v as f64 * self.config.epsilon).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::substream;

    fn q(eps: f64, b: u64, d: usize) -> Quantizer {
        Quantizer::new(QuantizerConfig::new(eps, b, d).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(QuantizerConfig::new(0.0, 8, 1).is_err());
        assert!(QuantizerConfig::new(1.0, 2, 1).is_err());
        assert!(QuantizerConfig::new(1.0, 12, 1).is_err());
        assert!(QuantizerConfig::new(1.0, 8, 0).is_err());
        assert!(QuantizerConfig::new(1.0, 1 << 33, 1).is_err());
    }

    #[test]
    fn bit_cost_arithmetic() {
        let cfg = QuantizerConfig::new(0.5, 256, 10).unwrap();
        assert_eq!(cfg.bit_cost(), 144);
        let msg = Quantizer::new(cfg).encode(&[0.3; 10], &mut substream(1, 1)).unwrap();
        assert_eq!(msg.bit_cost(), 144);
    }

    #[test]
    fn lattice_points_round_deterministically() {
        let quant = q(0.25, 16, 3);
        let x = [0.25 * 7.0, -0.25 * 3.0, 0.25 * 21.0];
        let mut rng = substream(2, 1);
        for _ in 0..50 {
            assert_eq!(quant.round(&x, &mut rng).unwrap(), vec![7, -3, 21]);
        }
        let msg = quant.encode(&x, &mut rng).unwrap();
        assert_eq!(msg.residues(), &[7, 13, 5]);
    }

    #[test]
    fn hand_decode_example() {
        let quant = q(1.0, 8, 1);
        let mut rng = substream(3, 1);
        let msg = quant.encode(&[3.0], &mut rng).unwrap();
        assert_eq!(msg.residues(), &[3]);
        assert_eq!(quant.decode(&msg, &[0.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn hand_aliasing_example() {
        let quant = q(1.0, 8, 1);
        let msg = quant.encode(&[10.0], &mut substream(3, 1)).unwrap();
        assert_eq!(msg.residues(), &[2]);
        assert_eq!(quant.resolve(&msg, &[0.0]).unwrap(), vec![2]);
        assert!(matches!(
            quant.decode(&msg, &[0.0]),
            Err(QuantizerError::DistanceCriterion { .. })
        ));
    }

    #[test]
    fn zero_distance_decode() {
        let quant = q(0.1, 4, 4);
        let mut rng = substream(4, 1);
        let x = [12.34, -56.78, 0.05, 1e6];
        let z = quant.round(&x, &mut rng).unwrap();
        let msg = quant.encode_lattice(&z).unwrap();
        let out = quant.decode(&msg, &x).unwrap();
        let expected: Vec<f64> = z.iter().map(|&v| v as f64 * 0.1).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn wire_round_trip_and_layout() {
        let quant = q(1.0, 8, 3);
        let msg = quant.encode_lattice(&[1, 2, 7]).unwrap();
        let wire = msg.to_wire();
        // 3 residues x 3 bits = 9 bits -> 2 payload bytes
        assert_eq!(wire.len(), 10);
        assert_eq!(&wire[0..4], &3u32.to_le_bytes());
        assert_eq!(&wire[4..6], &3u16.to_le_bytes());
        assert_eq!(&wire[6..8], &lattice_checksum(&[1, 2, 7]).to_le_bytes());
        // bits: 1 = 001, 2 = 010, 7 = 111 packed LSB first -> 0b1_1010_001 0b0000_0001
        assert_eq!(wire[8], 0b1101_0001);
        assert_eq!(wire[9], 0b0000_0001);
        assert_eq!(QuantizedMessage::from_wire(&wire).unwrap(), msg);
    }

    #[test]
    fn wire_rejects_malformed() {
        assert!(QuantizedMessage::from_wire(&[0; 4]).is_err());
        let msg = q(1.0, 8, 3).encode_lattice(&[1, 2, 7]).unwrap();
        let mut wire = msg.to_wire();
        wire.pop();
        assert!(QuantizedMessage::from_wire(&wire).is_err());
        let mut wire = msg.to_wire();
        wire[9] |= 0x80;
        assert!(QuantizedMessage::from_wire(&wire).is_err());
    }

    #[test]
    fn selection_rule_examples() {
        assert_eq!(QuantizerConfig::new(0.7, 8, 1).unwrap().round_trip_error_bound(), 0.7);
        let b = QuantizerConfig::new(0.01, 8, 100).unwrap().round_trip_error_bound();
        assert!((b - 0.1).abs() < 1e-15);
        let eps = select_epsilon(0.01, 4.0, 5.0, 16);
        assert!((eps - 0.05).abs() < 1e-15);
        let bound = QuantizerConfig::new(eps, 8, 16).unwrap().round_trip_error_bound();
        assert!((bound - 0.2).abs() < 1e-15);
    }

    #[test]
    fn range_selection() {
        assert_eq!(range_for_distance(0.0, 1.0), 4);
        assert_eq!(range_for_distance(1.0, 1.0), 8);
        assert_eq!(range_for_distance(2.9, 1.0), 8);
        assert_eq!(range_for_distance(3.0, 1.0), 16);
        let b = range_for_distance(123.4, 0.01);
        assert!((b as f64 / 2.0 - 1.0) * 0.01 > 123.4);
        assert!((b as f64 / 4.0 - 1.0) * 0.01 <= 123.4);
    }
}
