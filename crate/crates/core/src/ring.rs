//! Two's-complement ring arithmetic over Z_{2^l} and additive secret sharing.
//!
//! Every value is stored as a `u64` already reduced modulo `2^width`. A pair of
//! shares held by the server and the client reconstructs to the plaintext by
//! adding them modulo `2^width`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_WIDTH: u32 = 64;

/// Low `width` bits set.
#[inline]
pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Reduce a mathematical integer into `[0, 2^width)`.
#[inline]
pub fn reduce(v: i128, width: u32) -> u64 {
    (v as u64) & mask(width)
}

pub fn check_width(width: u32) -> Result<()> {
    if (1..=MAX_WIDTH).contains(&width) {
        Ok(())
    } else {
        Err(Error::WidthOutOfRange(width))
    }
}

/// Bit width, power-of-two scale exponent and MSB-known flag of a tensor.
///
/// A value `q` under this meta stands for the real number `q / 2^scale_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitWidthMeta {
    pub width: u32,
    pub scale_exp: i32,
    pub nonneg: bool,
}

impl BitWidthMeta {
    pub fn new(width: u32, scale_exp: i32) -> Result<Self> {
        check_width(width)?;
        Ok(Self {
            width,
            scale_exp,
            nonneg: false,
        })
    }

    pub fn with_nonneg(mut self, nonneg: bool) -> Self {
        self.nonneg = nonneg;
        self
    }

    pub fn with_width(mut self, width: u32) -> Self {
        self.width = width;
        self
    }
}

/// Interpret a ring element as a mathematical integer.
pub fn signed_value(x: u64, meta: &BitWidthMeta) -> i128 {
    let x = x & mask(meta.width);
    if meta.nonneg || meta.width == 0 {
        return x as i128;
    }
    let half = 1i128 << (meta.width - 1);
    if (x as i128) < half {
        x as i128
    } else {
        x as i128 - (1i128 << meta.width)
    }
}

/// Plain two's-complement interpretation at `width` bits, ignoring any flag.
#[inline]
pub fn to_signed(x: u64, width: u32) -> i128 {
    signed_value(x, &BitWidthMeta { width, scale_exp: 0, nonneg: false })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
    pub meta: BitWidthMeta,
}

impl PlainTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u64>, meta: BitWidthMeta) -> Result<Self> {
        check_width(meta.width)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        let m = mask(meta.width);
        if data.iter().any(|&v| v & !m != 0) {
            return Err(Error::MetaMismatch(format!(
                "value does not fit in {} bits",
                meta.width
            )));
        }
        Ok(Self { shape, data, meta })
    }

    /// Build from mathematical integers, reducing each modulo `2^width`.
    pub fn from_signed(shape: Vec<usize>, values: &[i64], meta: BitWidthMeta) -> Result<Self> {
        check_width(meta.width)?;
        let data = values.iter().map(|&v| reduce(v as i128, meta.width)).collect();
        Self::new(shape, data, meta)
    }

    pub fn zeros(shape: Vec<usize>, meta: BitWidthMeta) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0; n], meta)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn signed_values(&self) -> Vec<i128> {
        self.data.iter().map(|&v| signed_value(v, &self.meta)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Server,
    Client,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::Server => Party::Client,
            Party::Client => Party::Server,
        }
    }
}

/// One party's additive share of an integer tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareTensor {
    pub party: Party,
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
    pub meta: BitWidthMeta,
}

impl ShareTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Public constant added by the server only; the client's share is unchanged.
    pub fn add_public(&mut self, c: i128) {
        if self.party == Party::Server {
            let m = mask(self.meta.width);
            let c = reduce(c, self.meta.width);
            for v in &mut self.data {
                *v = v.wrapping_add(c) & m;
            }
        }
    }

    /// Multiply by a public constant modulo `2^width`.
    pub fn scale_public(&mut self, c: i128) {
        let m = mask(self.meta.width);
        let c = reduce(c, self.meta.width);
        for v in &mut self.data {
            *v = v.wrapping_mul(c) & m;
        }
    }

    /// Reinterpret at a smaller width by discarding the high bits. Exact modulo
    /// the new width, so it needs no interaction.
    pub fn narrowed(&self, width: u32) -> ShareTensor {
        let m = mask(width);
        ShareTensor {
            party: self.party,
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v & m).collect(),
            meta: self.meta.with_width(width),
        }
    }
}

/// Split a plaintext into a (server, client) pair. The server share is drawn
/// uniformly from `rng`.
pub fn share<R: Rng + ?Sized>(x: &PlainTensor, rng: &mut R) -> Result<(ShareTensor, ShareTensor)> {
    check_width(x.meta.width)?;
    let m = mask(x.meta.width);
    let server: Vec<u64> = (0..x.len()).map(|_| rng.gen::<u64>() & m).collect();
    let client = x
        .data
        .iter()
        .zip(&server)
        .map(|(&v, &s)| v.wrapping_sub(s) & m)
        .collect();
    Ok((
        ShareTensor {
            party: Party::Server,
            shape: x.shape.clone(),
            data: server,
            meta: x.meta,
        },
        ShareTensor {
            party: Party::Client,
            shape: x.shape.clone(),
            data: client,
            meta: x.meta,
        },
    ))
}

pub fn share_seeded(x: &PlainTensor, seed: u64) -> Result<(ShareTensor, ShareTensor)> {
    share(x, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn reconstruct(a: &ShareTensor, b: &ShareTensor) -> Result<PlainTensor> {
    if a.party == b.party {
        return Err(Error::SameParty);
    }
    if a.meta.width != b.meta.width || a.meta.scale_exp != b.meta.scale_exp {
        return Err(Error::MetaMismatch(format!("{:?} vs {:?}", a.meta, b.meta)));
    }
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let m = mask(a.meta.width);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.wrapping_add(y) & m)
        .collect();
    Ok(PlainTensor {
        shape: a.shape.clone(),
        data,
        meta: BitWidthMeta {
            nonneg: a.meta.nonneg && b.meta.nonneg,
            ..a.meta
        },
    })
}

/// `Σ coeffs[k] · shares[k]` computed locally by one party.
pub fn local_lincomb(shares: &[&ShareTensor], coeffs: &[i64]) -> Result<ShareTensor> {
    if shares.is_empty() || shares.len() != coeffs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} shares vs {} coefficients",
            shares.len(),
            coeffs.len()
        )));
    }
    let first = shares[0];
    for s in &shares[1..] {
        if s.party != first.party {
            return Err(Error::MixedParties);
        }
        if s.meta.width != first.meta.width {
            return Err(Error::MetaMismatch(format!(
                "widths {} and {}",
                s.meta.width, first.meta.width
            )));
        }
        if s.data.len() != first.data.len() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", s.shape, first.shape)));
        }
    }
    let width = first.meta.width;
    let m = mask(width);
    let cs: Vec<u64> = coeffs.iter().map(|&c| reduce(c as i128, width)).collect();
    let mut data = vec![0u64; first.data.len()];
    for (s, &c) in shares.iter().zip(&cs) {
        for (acc, &v) in data.iter_mut().zip(&s.data) {
            *acc = acc.wrapping_add(v.wrapping_mul(c));
        }
    }
    for v in &mut data {
        *v &= m;
    }
    // Non-negative inputs below 2^(w-1) stay representable iff Σ c_k (2^(w-1) - 1) < 2^(w-1).
    let half = 1i128 << (width - 1);
    let coeff_sum: i128 = coeffs.iter().map(|&c| c as i128).sum();
    let nonneg = shares.iter().all(|s| s.meta.nonneg)
        && coeffs.iter().all(|&c| c >= 0)
        && coeff_sum * (half - 1) < half;
    Ok(ShareTensor {
        party: first.party,
        shape: first.shape.clone(),
        data,
        meta: BitWidthMeta { nonneg, ..first.meta },
    })
}

/// Both parties' shares of one logical tensor, as held by the simulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shared {
    pub server: ShareTensor,
    pub client: ShareTensor,
}

impl Shared {
    pub fn from_plain<R: Rng + ?Sized>(x: &PlainTensor, rng: &mut R) -> Result<Self> {
        let (server, client) = share(x, rng)?;
        Ok(Self { server, client })
    }

    pub fn reconstruct(&self) -> Result<PlainTensor> {
        reconstruct(&self.server, &self.client)
    }

    pub fn meta(&self) -> BitWidthMeta {
        self.server.meta
    }

    pub fn shape(&self) -> &[usize] {
        &self.server.shape
    }

    pub fn len(&self) -> usize {
        self.server.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.server.data.is_empty()
    }

    pub fn set_meta(&mut self, meta: BitWidthMeta) {
        self.server.meta = meta;
        self.client.meta = meta;
    }

    pub fn set_shape(&mut self, shape: Vec<usize>) {
        self.server.shape = shape.clone();
        self.client.shape = shape;
    }

    /// Apply the same local map to both shares.
    pub fn map_local<F>(&self, f: F) -> Result<Shared>
    where
        F: Fn(&ShareTensor) -> Result<ShareTensor>,
    {
        Ok(Shared {
            server: f(&self.server)?,
            client: f(&self.client)?,
        })
    }

    pub fn narrowed(&self, width: u32) -> Shared {
        Shared {
            server: self.server.narrowed(width),
            client: self.client.narrowed(width),
        }
    }
}
