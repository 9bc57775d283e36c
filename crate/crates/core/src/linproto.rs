//! OT-based linear protocols: 1-out-of-2 OT, the bit-serial GEMM and the
//! bit-width conversions Ext, Trunc, TR and Requant.
//!
//! Comparisons inside the conversions are provided by an ideal helper that
//! hands the parties fresh arithmetic shares of the wrap and carry bits. The
//! meter is charged by the closed-form costs in [`cost`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{CostModel, Phase, Session};
use crate::ring::{check_width, mask, reduce, signed_value, BitWidthMeta, Party, ShareTensor, Shared};

pub const TAG_OT: &str = "OT";
pub const TAG_GEMM: &str = "GEMM";
pub const TAG_EXT: &str = "Ext";
pub const TAG_TRUNC: &str = "Trunc";
pub const TAG_TR: &str = "TR";
pub const TAG_RELU: &str = "ReLU";

pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Per-element costs in bits and per-invocation round counts.
pub mod cost {
    use super::ceil_log2;
    use crate::netsim::CostModel;

    fn nonneg(v: i128) -> u64 {
        v.max(0) as u64
    }

    pub fn ext(c: &CostModel, l1: u32, l2: u32, msb: bool) -> u64 {
        let (lam, l1, l2) = (c.lambda as i128, l1 as i128, l2 as i128);
        if msb {
            nonneg(2 * lam - l1 + l2 + 2)
        } else {
            nonneg(lam * (l1 + 1) + 13 * l1 + l2)
        }
    }

    pub fn trunc(c: &CostModel, l1: u32, l2: u32, msb: bool) -> u64 {
        let (lam, l1, l2) = (c.lambda as i128, l1 as i128, l2 as i128);
        if msb {
            nonneg(3 * lam + l1 + l2 + 20)
        } else {
            nonneg(lam * (l1 + 3) + 15 * l1 + l2 + 20)
        }
    }

    pub fn tr(c: &CostModel, l1: u32, l2: u32, msb: bool) -> u64 {
        let (lam, l1, l2) = (c.lambda as i128, l1 as i128, l2 as i128);
        if msb {
            nonneg(lam + 2)
        } else {
            nonneg(lam * (l2 + 1) + 13 * l2 + l1)
        }
    }

    pub fn relu(c: &CostModel, l: u32) -> u64 {
        c.relu_unit_coeff * c.lambda * l as u64
    }

    /// One correlated OT carrying `payload_bits` per message.
    pub fn ot(c: &CostModel, payload_bits: u64) -> u64 {
        c.lambda + c.ot_payload_factor * payload_bits
    }

    pub fn gemm_ot_count(m: usize, l: usize, l_w: u32) -> u64 {
        l_w as u64 * l as u64 * m as u64
    }

    pub fn gemm_offline(c: &CostModel, m: usize, l: usize, n: usize, l_w: u32, l_acc: u32) -> u64 {
        gemm_ot_count(m, l, l_w) * ot(c, n as u64 * l_acc as u64)
    }

    pub fn gemm_online(m: usize, n: usize, l_acc: u32) -> u64 {
        m as u64 * n as u64 * l_acc as u64
    }

    pub fn ext_rounds(l1: u32) -> u64 {
        ceil_log2(l1 as u64) as u64 + 1
    }

    pub fn trunc_rounds(l1: u32) -> u64 {
        ceil_log2(l1 as u64) as u64 + 2
    }

    pub fn tr_rounds(l2: u32) -> u64 {
        ceil_log2(l2 as u64) as u64 + 1
    }

    pub fn relu_rounds(l: u32) -> u64 {
        ceil_log2(l as u64) as u64 + 1
    }

    pub const OT_OFFLINE_ROUNDS: u64 = 2;
    pub const GEMM_ONLINE_ROUNDS: u64 = 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtRole {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtEndpoint {
    pub party: Party,
    pub role: OtRole,
}

impl OtEndpoint {
    pub fn sender(party: Party) -> Self {
        Self { party, role: OtRole::Sender }
    }

    pub fn receiver(party: Party) -> Self {
        Self { party, role: OtRole::Receiver }
    }
}

/// Functional 1-out-of-2 OT, charged offline.
pub fn ot_transfer(
    session: &mut Session,
    send: &OtEndpoint,
    m0: &[u8],
    m1: &[u8],
    recv: &OtEndpoint,
    choice: bool,
) -> Result<Vec<u8>> {
    if send.role != OtRole::Sender || recv.role != OtRole::Receiver || send.party == recv.party {
        return Err(Error::InvalidConfig("OT needs one sender and one receiver".into()));
    }
    if m0.len() != m1.len() {
        return Err(Error::OtLengthMismatch(m0.len(), m1.len()));
    }
    // The choice goes to the ideal functionality only; the sender never sees it.
    let picked = if choice { m1 } else { m0 };
    let out = session.deliver(send.party, picked.to_vec())?;
    let bits = cost::ot(&session.cost, 8 * m0.len() as u64);
    session.charge(TAG_OT, Phase::Offline, bits as i64)?;
    session.charge_rounds(TAG_OT, Phase::Offline, cost::OT_OFFLINE_ROUNDS);
    Ok(out)
}

/// Server-held weight matrix in sign-magnitude form over bit planes.
///
/// Entry `(i, j)` equals `±Σ_b bit_b(codes[i·cols+j]) · importance[b]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPlaneWeights {
    pub rows: usize,
    pub cols: usize,
    pub importance: Vec<u64>,
    pub codes: Vec<u64>,
    pub negative: Vec<bool>,
}

/// Importance set `{2^(l_w-1), …, 2, 1}` indexed by bit position.
pub fn standard_importance(l_w: u32) -> Vec<u64> {
    (0..l_w).map(|b| 1u64 << b).collect()
}

impl BitPlaneWeights {
    pub fn new(
        rows: usize,
        cols: usize,
        importance: Vec<u64>,
        codes: Vec<u64>,
        negative: Vec<bool>,
    ) -> Result<Self> {
        if importance.is_empty() || importance.len() > 32 {
            return Err(Error::InvalidConfig(format!(
                "weight width {} outside [1, 32]",
                importance.len()
            )));
        }
        if codes.len() != rows * cols || negative.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} weights with {} codes",
                codes.len()
            )));
        }
        let limit = mask(importance.len() as u32);
        if codes.iter().any(|&c| c > limit) {
            return Err(Error::InvalidConfig("weight code exceeds bit-plane count".into()));
        }
        Ok(Self { rows, cols, importance, codes, negative })
    }

    /// Standard binary codebook: `|v| ≤ 2^l_w − 1`.
    pub fn from_ints(rows: usize, cols: usize, l_w: u32, values: &[i64]) -> Result<Self> {
        let max = mask(l_w) as i64;
        if let Some(v) = values.iter().find(|v| v.abs() > max) {
            return Err(Error::InvalidConfig(format!("weight {v} needs more than {l_w} magnitude bits")));
        }
        Self::new(
            rows,
            cols,
            standard_importance(l_w),
            values.iter().map(|v| v.unsigned_abs()).collect(),
            values.iter().map(|&v| v < 0).collect(),
        )
    }

    pub fn l_w(&self) -> u32 {
        self.importance.len() as u32
    }

    pub fn value(&self, idx: usize) -> i64 {
        let code = self.codes[idx];
        let mag: u64 = self
            .importance
            .iter()
            .enumerate()
            .filter(|(b, _)| code >> b & 1 == 1)
            .map(|(_, w)| w)
            .sum();
        if self.negative[idx] {
            -(mag as i64)
        } else {
            mag as i64
        }
    }

    pub fn values(&self) -> Vec<i64> {
        (0..self.codes.len()).map(|i| self.value(i)).collect()
    }

    /// Bits needed for the largest representable magnitude.
    pub fn magnitude_bits(&self) -> u32 {
        let max: u64 = self.importance.iter().sum();
        64 - max.leading_zeros()
    }

    /// Minimum accumulator width for inputs of `l_x` bits.
    pub fn required_acc(&self, l_x: u32) -> u32 {
        l_x + self.magnitude_bits() + ceil_log2(self.cols as u64)
    }
}

fn helper_bits(session: &mut Session, bits: &[u64], width: u32) -> (Vec<u64>, Vec<u64>) {
    let m = mask(width);
    let rng = session.helper_rng();
    let s: Vec<u64> = bits.iter().map(|_| rng.gen::<u64>() & m).collect();
    let c = bits
        .iter()
        .zip(&s)
        .map(|(&b, &r)| b.wrapping_sub(r) & m)
        .collect();
    (s, c)
}

fn with_data(t: &ShareTensor, data: Vec<u64>, meta: BitWidthMeta) -> ShareTensor {
    ShareTensor {
        party: t.party,
        shape: t.shape.clone(),
        data,
        meta,
    }
}

fn check_msb(x: &Shared, msb: bool) -> Result<()> {
    if msb && !x.meta().nonneg {
        return Err(Error::InvalidConversion(
            "MSB-known variant requested for a tensor without a known sign".into(),
        ));
    }
    Ok(())
}

/// Unsigned view `u = x + 2^(l-1)` of a signed tensor, or `x` itself when nonneg.
fn offset_view(x: &Shared) -> (Vec<u64>, Vec<u64>, bool) {
    let meta = x.meta();
    let l = meta.width;
    if meta.nonneg {
        return (x.server.data.clone(), x.client.data.clone(), false);
    }
    let m = mask(l);
    let off = 1u64 << (l - 1);
    let s = x.server.data.iter().map(|&v| v.wrapping_add(off) & m).collect();
    (s, x.client.data.clone(), true)
}

fn charge_conversion(session: &mut Session, tag: &str, per_elem: u64, n: usize, rounds: u64) -> Result<()> {
    session.charge(tag, Phase::Online, (per_elem * n as u64) as i64)?;
    if n > 0 {
        session.charge_rounds(tag, Phase::Online, rounds);
    }
    Ok(())
}

/// Extend from the current width to `l2` bits, preserving the value.
pub fn ext(session: &mut Session, x: &Shared, l2: u32, msb: bool) -> Result<Shared> {
    let meta = x.meta();
    let l1 = meta.width;
    check_width(l2)?;
    if l2 <= l1 {
        return Err(Error::InvalidConversion(format!("ext {l1} -> {l2} does not widen")));
    }
    check_msb(x, msb)?;
    let (us, uc, signed) = offset_view(x);
    let wrap: Vec<u64> = us
        .iter()
        .zip(&uc)
        .map(|(&a, &b)| ((a as u128 + b as u128) >> l1) as u64)
        .collect();
    let (ws, wc) = helper_bits(session, &wrap, l2);
    let m2 = mask(l2);
    let lift = |u: &[u64], w: &[u64]| -> Vec<u64> {
        u.iter()
            .zip(w)
            .map(|(&u, &w)| u.wrapping_sub(w.wrapping_shl(l1)) & m2)
            .collect()
    };
    let mut zs = lift(&us, &ws);
    let zc = lift(&uc, &wc);
    if signed {
        let off = 1u64 << (l1 - 1);
        for v in &mut zs {
            *v = v.wrapping_sub(off) & m2;
        }
    }
    let out_meta = meta.with_width(l2);
    charge_conversion(
        session,
        TAG_EXT,
        cost::ext(&session.cost, l1, l2, msb),
        x.len(),
        cost::ext_rounds(l1),
    )?;
    Ok(Shared {
        server: with_data(&x.server, zs, out_meta),
        client: with_data(&x.client, zc, out_meta),
    })
}

/// Shared core of Trunc and TR. Returns the right-shifted value at `out_width`.
fn shift_right(session: &mut Session, x: &Shared, k: u32, out_width: u32) -> Result<(Vec<u64>, Vec<u64>)> {
    let l1 = x.meta().width;
    let (us, uc, signed) = offset_view(x);
    let low = mask(k);
    let mut bits = Vec::with_capacity(us.len());
    for (&a, &b) in us.iter().zip(&uc) {
        let carry = ((a & low) + (b & low)) >> k;
        let wrap = ((a as u128 + b as u128) >> l1) as u64;
        bits.push((carry, wrap));
    }
    let carry: Vec<u64> = bits.iter().map(|p| p.0).collect();
    let (cs, cc) = helper_bits(session, &carry, out_width);
    let needs_wrap = out_width > l1 - k;
    let (ws, wc) = if needs_wrap {
        let wrap: Vec<u64> = bits.iter().map(|p| p.1).collect();
        helper_bits(session, &wrap, out_width)
    } else {
        (vec![0; us.len()], vec![0; us.len()])
    };
    let m = mask(out_width);
    let hi = l1 - k;
    let combine = |u: &[u64], c: &[u64], w: &[u64]| -> Vec<u64> {
        u.iter()
            .zip(c)
            .zip(w)
            .map(|((&u, &c), &w)| (u >> k).wrapping_add(c).wrapping_sub(w.wrapping_shl(hi)) & m)
            .collect()
    };
    let mut zs = combine(&us, &cs, &ws);
    let zc = combine(&uc, &cc, &wc);
    if signed {
        let off = 1u64 << (l1 - 1 - k);
        for v in &mut zs {
            *v = v.wrapping_sub(off) & m;
        }
    }
    Ok((zs, zc))
}

fn check_shift(l1: u32, k: u32) -> Result<()> {
    if k == 0 || k >= l1 {
        return Err(Error::InvalidConversion(format!("shift {k} outside (0, {l1})")));
    }
    Ok(())
}

/// Arithmetic right shift by `k` at unchanged width; the scale exponent drops by `k`.
pub fn trunc(session: &mut Session, x: &Shared, k: u32, msb: bool) -> Result<Shared> {
    let meta = x.meta();
    let l1 = meta.width;
    check_shift(l1, k)?;
    check_msb(x, msb)?;
    let (zs, zc) = shift_right(session, x, k, l1)?;
    let out_meta = BitWidthMeta {
        scale_exp: meta.scale_exp - k as i32,
        ..meta
    };
    charge_conversion(
        session,
        TAG_TRUNC,
        cost::trunc(&session.cost, l1, k, msb),
        x.len(),
        cost::trunc_rounds(l1),
    )?;
    Ok(Shared {
        server: with_data(&x.server, zs, out_meta),
        client: with_data(&x.client, zc, out_meta),
    })
}

/// Right shift by `k` and drop the high `k` bits: output width `l1 − k`.
pub fn truncate_reduce(session: &mut Session, x: &Shared, k: u32, msb: bool) -> Result<Shared> {
    let meta = x.meta();
    let l1 = meta.width;
    check_shift(l1, k)?;
    check_msb(x, msb)?;
    let (zs, zc) = shift_right(session, x, k, l1 - k)?;
    let out_meta = BitWidthMeta {
        width: l1 - k,
        scale_exp: meta.scale_exp - k as i32,
        nonneg: meta.nonneg,
    };
    charge_conversion(
        session,
        TAG_TR,
        cost::tr(&session.cost, l1, k, msb),
        x.len(),
        cost::tr_rounds(k),
    )?;
    Ok(Shared {
        server: with_data(&x.server, zs, out_meta),
        client: with_data(&x.client, zc, out_meta),
    })
}

/// Keep the low `l2` bits. Local and free.
pub fn narrow(x: &Shared, l2: u32) -> Result<Shared> {
    check_width(l2)?;
    let l1 = x.meta().width;
    if l2 > l1 {
        return Err(Error::InvalidConversion(format!("narrow {l1} -> {l2} widens")));
    }
    Ok(x.narrowed(l2))
}

/// Rescale to `to.scale_exp` and resize to `to.width`: Trunc, then Ext or a
/// local narrow. Wraps on overflow.
pub fn requant(session: &mut Session, x: &Shared, to: BitWidthMeta, msb: bool) -> Result<Shared> {
    check_width(to.width)?;
    let meta = x.meta();
    let shift = meta.scale_exp - to.scale_exp;
    if shift < 0 {
        return Err(Error::InvalidConversion(format!(
            "scale ratio 2^{shift} is below one"
        )));
    }
    let mut cur = if shift > 0 {
        trunc(session, x, shift as u32, msb)?
    } else {
        x.clone()
    };
    let w = cur.meta().width;
    if to.width > w {
        cur = ext(session, &cur, to.width, msb)?;
    } else if to.width < w {
        cur = narrow(&cur, to.width)?;
    }
    Ok(cur)
}

/// Ideal ReLU: output is re-shared and flagged nonneg.
pub fn relu(session: &mut Session, x: &Shared) -> Result<Shared> {
    let meta = x.meta();
    let l = meta.width;
    let plain = x.reconstruct()?;
    let vals: Vec<u64> = plain
        .data
        .iter()
        .map(|&v| if signed_value(v, &meta) < 0 { 0 } else { v })
        .collect();
    let (s, c) = helper_bits(session, &vals, l);
    let out_meta = meta.with_nonneg(true);
    charge_conversion(
        session,
        TAG_RELU,
        cost::relu(&session.cost, l),
        x.len(),
        cost::relu_rounds(l),
    )?;
    Ok(Shared {
        server: with_data(&x.server, s, out_meta),
        client: with_data(&x.client, c, out_meta),
    })
}

/// `Y = W·X` with W held by the server and X shared (shape `[L, N]`).
///
/// For every weight bit the client offers `(r, r + 𝔹[b]·X_c[j,:])` and the
/// server picks with that bit, the weight sign negating the second message
/// inside the functionality. An input narrower than `l_acc` is extended first.
pub fn gemm_ot(session: &mut Session, w: &BitPlaneWeights, x: &Shared, l_acc: u32) -> Result<Shared> {
    check_width(l_acc)?;
    let (l, n) = match x.shape() {
        [l, n] => (*l, *n),
        s => return Err(Error::ShapeMismatch(format!("GEMM input must be 2-D, got {s:?}"))),
    };
    if l != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "weights {}x{} against input {l}x{n}",
            w.rows, w.cols
        )));
    }
    let l_x = x.meta().width;
    let need = w.required_acc(l_x);
    if l_acc < need {
        return Err(Error::AccumulatorOverflow { have: l_acc, need });
    }
    if l_x < l_acc {
        let msb = x.meta().nonneg;
        let xe = ext(session, x, l_acc, msb)?;
        gemm_core(session, w, &xe, l, n)
    } else {
        gemm_core(session, w, x, l, n)
    }
}

/// [`gemm_ot`] on an input already extended to the accumulator width, whose
/// values are known to fit in `value_bits` signed bits.
pub fn gemm_ot_extended(session: &mut Session, w: &BitPlaneWeights, x: &Shared, value_bits: u32) -> Result<Shared> {
    let (l, n) = match x.shape() {
        [l, n] => (*l, *n),
        s => return Err(Error::ShapeMismatch(format!("GEMM input must be 2-D, got {s:?}"))),
    };
    if l != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "weights {}x{} against input {l}x{n}",
            w.rows, w.cols
        )));
    }
    let l_acc = x.meta().width;
    let need = w.required_acc(value_bits);
    if l_acc < need {
        return Err(Error::AccumulatorOverflow { have: l_acc, need });
    }
    gemm_core(session, w, x, l, n)
}

fn gemm_core(session: &mut Session, w: &BitPlaneWeights, x: &Shared, l: usize, n: usize) -> Result<Shared> {
    let l_acc = x.meta().width;
    let m_rows = w.rows;
    let acc_mask = mask(l_acc);
    let wv = w.values();

    let mut ys = vec![0u64; m_rows * n];
    for i in 0..m_rows {
        for j in 0..l {
            let c = reduce(wv[i * l + j] as i128, l_acc);
            if c == 0 {
                continue;
            }
            let row = &x.server.data[j * n..(j + 1) * n];
            for (acc, &v) in ys[i * n..(i + 1) * n].iter_mut().zip(row) {
                *acc = acc.wrapping_add(c.wrapping_mul(v));
            }
        }
    }

    let mut yc = vec![0u64; m_rows * n];
    let importance: Vec<u64> = w.importance.iter().map(|&b| reduce(b as i128, l_acc)).collect();
    for i in 0..m_rows {
        for j in 0..l {
            let idx = i * l + j;
            let code = w.codes[idx];
            let neg = w.negative[idx];
            let xc = &x.client.data[j * n..(j + 1) * n];
            for (b, &beta) in importance.iter().enumerate() {
                let choice = code >> b & 1 == 1;
                let rng = session.rng(Party::Client);
                for t in 0..n {
                    let r: u64 = rng.gen();
                    yc[i * n + t] = yc[i * n + t].wrapping_sub(r);
                    let received = if choice {
                        let d = beta.wrapping_mul(xc[t]);
                        if neg {
                            r.wrapping_sub(d)
                        } else {
                            r.wrapping_add(d)
                        }
                    } else {
                        r
                    };
                    ys[i * n + t] = ys[i * n + t].wrapping_add(received);
                }
            }
        }
    }
    for v in ys.iter_mut().chain(yc.iter_mut()) {
        *v &= acc_mask;
    }

    let c = session.cost;
    session.charge(
        TAG_GEMM,
        Phase::Offline,
        cost::gemm_offline(&c, m_rows, l, n, w.l_w(), l_acc) as i64,
    )?;
    session.charge(TAG_GEMM, Phase::Online, cost::gemm_online(m_rows, n, l_acc) as i64)?;
    if m_rows * l * n > 0 {
        session.charge_rounds(TAG_GEMM, Phase::Offline, cost::OT_OFFLINE_ROUNDS);
        session.charge_rounds(TAG_GEMM, Phase::Online, cost::GEMM_ONLINE_ROUNDS);
    }

    let meta = BitWidthMeta {
        width: l_acc,
        scale_exp: x.meta().scale_exp,
        nonneg: false,
    };
    let shape = vec![m_rows, n];
    Ok(Shared {
        server: ShareTensor { party: Party::Server, shape: shape.clone(), data: ys, meta },
        client: ShareTensor { party: Party::Client, shape, data: yc, meta },
    })
}

/// Static cost of [`gemm_ot`] on an input already at `l_acc` bits.
pub fn gemm_cost(c: &CostModel, m: usize, l: usize, n: usize, l_w: u32, l_acc: u32) -> (u64, u64) {
    (cost::gemm_offline(c, m, l, n, l_w, l_acc), cost::gemm_online(m, n, l_acc))
}
