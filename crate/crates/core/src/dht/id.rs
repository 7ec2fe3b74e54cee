use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::BitXor;

pub const ID_BITS: usize = 256;
const ID_BYTES: usize = ID_BITS / 8;

/// A 256-bit identifier in the DHT key space. Ordering is numeric (big-endian).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(#[serde(with = "hex_bytes")] pub [u8; ID_BYTES]);

/// XOR distance between two ids; same representation, numeric ordering.
pub type Distance = PeerId;

impl PeerId {
    pub const ZERO: PeerId = PeerId([0; ID_BYTES]);

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; ID_BYTES];
        rng.fill(&mut bytes);
        PeerId(bytes)
    }

    /// A random id whose distance to `self` falls in bucket `bucket`: the
    /// first `bucket` bits agree, bit `bucket` differs, the rest are random.
    pub fn random_in_bucket<R: Rng + ?Sized>(&self, bucket: usize, rng: &mut R) -> Self {
        assert!(bucket < ID_BITS, "bucket out of range");
        let mut noise = PeerId::random(rng);
        for i in 0..=bucket {
            let want = if i == bucket { !self.bit(i) } else { self.bit(i) };
            let (byte, mask) = (i / 8, 0x80u8 >> (i % 8));
            if want {
                noise.0[byte] |= mask;
            } else {
                noise.0[byte] &= !mask;
            }
        }
        noise
    }

    /// SHA-256 of `data`, e.g. a dataset title.
    pub fn sha256(data: &[u8]) -> Self {
        PeerId(Sha256::digest(data).into())
    }

    /// An id whose low 64 bits are `v` and the rest zero.
    pub fn from_low_u64(v: u64) -> Self {
        let mut bytes = [0u8; ID_BYTES];
        bytes[ID_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        PeerId(bytes)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    /// Number of leading zero bits (256 for zero).
    pub fn leading_zeros(&self) -> u32 {
        let mut count = 0;
        for b in self.0 {
            if b == 0 {
                count += 8;
            } else {
                return count + b.leading_zeros();
            }
        }
        count
    }

    pub fn bit(&self, index_from_msb: usize) -> bool {
        let byte = self.0[index_from_msb / 8];
        (byte >> (7 - index_from_msb % 8)) & 1 == 1
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut bytes = [0u8; ID_BYTES];
        hex::decode_to_slice(s, &mut bytes)?;
        Ok(PeerId(bytes))
    }
}

impl BitXor for PeerId {
    type Output = Distance;

    fn bitxor(self, rhs: PeerId) -> Distance {
        let mut out = [0u8; ID_BYTES];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(rhs.0.iter())) {
            *o = a ^ b;
        }
        PeerId(out)
    }
}

pub fn xor_distance(a: PeerId, b: PeerId) -> Distance {
    a ^ b
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerId({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex()[..12])
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(D::Error::custom)?;
        Ok(out)
    }
}
