//! `FVM1` wire messages between clients and server.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "FVM1" | version u16 | kind u8 (1 update, 2 broadcast)
//! update:    client_id u32 | L u32 | C_1..C_L u32 | P u32 | sample_count u32
//! broadcast: round u32     | L u32 | C_1..C_L u32 | P u32
//! payload:   P params f64, then per layer C_l mu values and C_l sigma values
//! ```
//!
//! For an update the per-layer pair is `(mu_bar, sigma_bar)`, for a broadcast
//! `(var_mu, var_sigma)`. Nothing else is representable: no voxels, no labels.

use crate::vfda::PrototypeVariance;

pub const FVM_MAGIC: [u8; 4] = *b"FVM1";
pub const FVM_VERSION: u16 = 1;
pub const KIND_UPDATE: u8 = 1;
pub const KIND_BROADCAST: u8 = 2;

/// Momentum-accumulated statistics of one encoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mu_bar: Vec<f64>,
    pub sigma_bar: Vec<f64>,
}

impl LayerStats {
    pub fn zeros(channels: usize) -> Self {
        LayerStats {
            mu_bar: vec![0.0; channels],
            sigma_bar: vec![0.0; channels],
        }
    }
}

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub sample_count: u32,
    pub params: Vec<f64>,
    pub stats: Vec<LayerStats>,
}

impl ClientUpdate {
    pub const FIELDS: [&'static str; 4] = ["client_id", "sample_count", "params", "stats"];
}

/// What the server sends at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBroadcast {
    pub round: u32,
    pub params: Vec<f64>,
    pub variances: Vec<PrototypeVariance>,
}

impl GlobalBroadcast {
    pub const FIELDS: [&'static str; 3] = ["round", "params", "variances"];
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MessageError {
    #[error("bad magic {0:?}, expected FVM1")]
    BadMagic(Vec<u8>),
    #[error("unsupported message version {found}, expected {FVM_VERSION}")]
    VersionMismatch { found: u16 },
    #[error("message kind {found} where {expected} was expected")]
    WrongKind { expected: u8, found: u8 },
    #[error("truncated message: need at least {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after message payload")]
    TrailingBytes(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

fn header_len(layers: usize) -> usize {
    4 + 2 + 1 + 4 + 4 + 4 * layers + 4
}

/// Encoded size of an update with per-layer channel counts `channels`.
pub fn update_size(channels: &[usize], params: usize) -> usize {
    header_len(channels.len()) + 4 + 8 * (params + 2 * channels.iter().sum::<usize>())
}

/// Encoded size of a broadcast with per-layer channel counts `channels`.
pub fn broadcast_size(channels: &[usize], params: usize) -> usize {
    header_len(channels.len()) + 8 * (params + 2 * channels.iter().sum::<usize>())
}

fn to_u32(v: usize, what: &str) -> Result<u32, MessageError> {
    u32::try_from(v).map_err(|_| MessageError::Malformed(format!("{what} {v} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn begin(kind: u8, id: u32, channels: &[usize], params: usize) -> Result<Vec<u8>, MessageError> {
    let mut out = Vec::new();
    out.extend_from_slice(&FVM_MAGIC);
    out.extend_from_slice(&FVM_VERSION.to_le_bytes());
    out.push(kind);
    put_u32(&mut out, id);
    put_u32(&mut out, to_u32(channels.len(), "layer count")?);
    for &c in channels {
        put_u32(&mut out, to_u32(c, "channel count")?);
    }
    put_u32(&mut out, to_u32(params, "parameter count")?);
    Ok(out)
}

pub fn serialize_update(u: &ClientUpdate) -> Result<Vec<u8>, MessageError> {
    let channels: Vec<usize> = u.stats.iter().map(|s| s.mu_bar.len()).collect();
    if u.stats.iter().any(|s| s.sigma_bar.len() != s.mu_bar.len()) {
        return Err(MessageError::Malformed("mu_bar and sigma_bar lengths differ".into()));
    }
    let mut out = begin(KIND_UPDATE, u.client_id, &channels, u.params.len())?;
    put_u32(&mut out, u.sample_count);
    put_f64s(&mut out, &u.params);
    for s in &u.stats {
        put_f64s(&mut out, &s.mu_bar);
        put_f64s(&mut out, &s.sigma_bar);
    }
    Ok(out)
}

pub fn serialize_broadcast(b: &GlobalBroadcast) -> Result<Vec<u8>, MessageError> {
    let channels: Vec<usize> = b.variances.iter().map(|v| v.var_mu.len()).collect();
    if b.variances.iter().any(|v| v.var_sigma.len() != v.var_mu.len()) {
        return Err(MessageError::Malformed("var_mu and var_sigma lengths differ".into()));
    }
    let mut out = begin(KIND_BROADCAST, b.round, &channels, b.params.len())?;
    put_f64s(&mut out, &b.params);
    for v in &b.variances {
        put_f64s(&mut out, &v.var_mu);
        put_f64s(&mut out, &v.var_sigma);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MessageError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(MessageError::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MessageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, MessageError> {
        let raw = self.take(n.checked_mul(8).ok_or(MessageError::Malformed("payload size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Rejects a payload the remaining bytes cannot hold before allocating it.
    fn expect_remaining(&self, n_f64: usize) -> Result<(), MessageError> {
        let need = n_f64.checked_mul(8).and_then(|b| b.checked_add(self.pos));
        match need {
            Some(need) if need <= self.bytes.len() => Ok(()),
            _ => Err(MessageError::Truncated {
                expected: need.unwrap_or(usize::MAX),
                actual: self.bytes.len(),
            }),
        }
    }

    fn finish(&self) -> Result<(), MessageError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(MessageError::TrailingBytes(n)),
        }
    }
}

/// Parses the common prefix; returns the reader, id field and channel list.
fn open(bytes: &[u8], kind: u8) -> Result<(Reader<'_>, u32, Vec<usize>, usize), MessageError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic_len = bytes.len().min(4);
    if bytes[..magic_len] != FVM_MAGIC[..magic_len] {
        return Err(MessageError::BadMagic(bytes[..magic_len].to_vec()));
    }
    r.take(4)?;
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != FVM_VERSION {
        return Err(MessageError::VersionMismatch { found: version });
    }
    let found = r.take(1)?[0];
    if found != kind {
        return Err(MessageError::WrongKind { expected: kind, found });
    }
    let id = r.u32()?;
    let layers = r.u32()? as usize;
    // each layer header field is 4 bytes; refuse absurd counts before allocating
    if layers > (bytes.len() - r.pos) / 4 {
        return Err(MessageError::Truncated {
            expected: r.pos + 4 * layers,
            actual: bytes.len(),
        });
    }
    let channels = (0..layers).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>, _>>()?;
    let params = r.u32()? as usize;
    Ok((r, id, channels, params))
}

pub fn deserialize_update(bytes: &[u8]) -> Result<ClientUpdate, MessageError> {
    let (mut r, client_id, channels, p) = open(bytes, KIND_UPDATE)?;
    let sample_count = r.u32()?;
    r.expect_remaining(p + 2 * channels.iter().sum::<usize>())?;
    let params = r.f64s(p)?;
    let stats = channels
        .iter()
        .map(|&c| {
            Ok(LayerStats {
                mu_bar: r.f64s(c)?,
                sigma_bar: r.f64s(c)?,
            })
        })
        .collect::<Result<Vec<_>, MessageError>>()?;
    r.finish()?;
    if sample_count == 0 {
        return Err(MessageError::Malformed("sample_count must be at least 1".into()));
    }
    Ok(ClientUpdate {
        client_id,
        sample_count,
        params,
        stats,
    })
}

pub fn deserialize_broadcast(bytes: &[u8]) -> Result<GlobalBroadcast, MessageError> {
    let (mut r, round, channels, p) = open(bytes, KIND_BROADCAST)?;
    r.expect_remaining(p + 2 * channels.iter().sum::<usize>())?;
    let params = r.f64s(p)?;
    let variances = channels
        .iter()
        .map(|&c| {
            Ok(PrototypeVariance {
                var_mu: r.f64s(c)?,
                var_sigma: r.f64s(c)?,
            })
        })
        .collect::<Result<Vec<_>, MessageError>>()?;
    r.finish()?;
    if !variances.iter().all(PrototypeVariance::is_valid) {
        return Err(MessageError::Malformed("global variances must be finite and non-negative".into()));
    }
    Ok(GlobalBroadcast { round, params, variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_update(seed: u64, channels: &[usize], p: usize) -> ClientUpdate {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| r.random_range(-1e3..1e3)).collect::<Vec<f64>>();
        ClientUpdate {
            client_id: 7,
            sample_count: 8,
            params: v(p),
            stats: channels
                .iter()
                .map(|&c| LayerStats {
                    mu_bar: v(c),
                    sigma_bar: v(c),
                })
                .collect(),
        }
    }

    fn broadcast() -> GlobalBroadcast {
        GlobalBroadcast {
            round: 3,
            params: vec![1.5, -2.0, f64::MIN_POSITIVE],
            variances: vec![PrototypeVariance::filled(2, 0.25), PrototypeVariance::zeros(4)],
        }
    }

    #[test]
    fn update_round_trip_is_bit_exact() {
        for seed in 0..20 {
            let u = random_update(seed, &[8, 16, 32], 100);
            let bytes = serialize_update(&u).unwrap();
            let back = deserialize_update(&bytes).unwrap();
            assert_eq!(back, u);
            let bits = |x: &ClientUpdate| x.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&u));
        }
    }

    #[test]
    fn broadcast_round_trip() {
        let b = broadcast();
        assert_eq!(deserialize_broadcast(&serialize_broadcast(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn message_size_matches_layout() {
        let p = 1234;
        let u = random_update(1, &[32, 32, 32], p);
        let header = 4 + 2 + 1 + 4 * 3 + 4 * 3 + 4;
        assert_eq!(header, 35);
        assert_eq!(serialize_update(&u).unwrap().len(), header + 8 * (p + 2 * 3 * 32));
        assert_eq!(update_size(&[32, 32, 32], p), header + 8 * (p + 2 * 3 * 32));
        let b = broadcast();
        assert_eq!(serialize_broadcast(&b).unwrap().len(), broadcast_size(&[2, 4], 3));
    }

    #[test]
    fn distinct_decode_errors() {
        let bytes = serialize_update(&random_update(2, &[4], 10)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_update(&bad), Err(MessageError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(deserialize_update(&bad), Err(MessageError::VersionMismatch { found: 9 })));
        for cut in [0, 3, 6, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(deserialize_update(&bytes[..cut]), Err(MessageError::Truncated { .. })),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(deserialize_update(&long), Err(MessageError::TrailingBytes(1))));
        assert!(matches!(
            deserialize_broadcast(&bytes),
            Err(MessageError::WrongKind { expected: 2, found: 1 })
        ));
        let mut huge = bytes;
        huge[11..15].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(deserialize_update(&huge), Err(MessageError::Truncated { .. })));
    }

    #[test]
    fn schema_carries_only_parameters_and_statistics() {
        // destructuring breaks the build if a field is added without review
        let ClientUpdate {
            client_id: _,
            sample_count: _,
            params: _,
            stats: _,
        } = random_update(0, &[1], 1);
        let GlobalBroadcast {
            round: _,
            params: _,
            variances: _,
        } = broadcast();
        let LayerStats { mu_bar: _, sigma_bar: _ } = LayerStats::zeros(1);
        let PrototypeVariance { var_mu: _, var_sigma: _ } = PrototypeVariance::zeros(1);
        let fields: Vec<&str> = ClientUpdate::FIELDS.iter().chain(&GlobalBroadcast::FIELDS).copied().collect();
        for f in fields {
            for banned in ["volume", "voxel", "label", "image", "sample_data"] {
                assert!(!f.contains(banned), "{f}");
            }
        }
    }
}
