//! Winograd F(m×m, r×r) transforms, tiling, extension-bit bounds and the
//! quantized Winograd convolution over shares.

use crate::error::{Error, Result};
use crate::linproto::{self, ceil_log2, BitPlaneWeights};
use crate::netsim::Session;
use crate::quant::{self, Codebook};
use crate::ring::{mask, reduce, BitWidthMeta, Party, ShareTensor, Shared};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    pub m: usize,
    pub r: usize,
    pub n: usize,
    /// `Bᵀ`, n×n.
    pub bt: Vec<Vec<i64>>,
    /// `Aᵀ`, m×n.
    pub at: Vec<Vec<i64>>,
    /// `G`, n×r.
    pub g: Vec<Vec<f64>>,
    /// `g_denom · G`, integral.
    pub g_scaled: Vec<Vec<i64>>,
    pub g_denom: i64,
}

pub fn transform_matrices(m: usize, r: usize) -> Result<TransformSet> {
    let (bt, at, g_scaled, g_denom): (Vec<Vec<i64>>, Vec<Vec<i64>>, Vec<Vec<i64>>, i64) = match (m, r) {
        (2, 3) => (
            vec![
                vec![1, 0, -1, 0],
                vec![0, 1, 1, 0],
                vec![0, -1, 1, 0],
                vec![0, 1, 0, -1],
            ],
            vec![vec![1, 1, 1, 0], vec![0, 1, -1, -1]],
            vec![vec![2, 0, 0], vec![1, 1, 1], vec![1, -1, 1], vec![0, 0, 2]],
            2,
        ),
        (4, 3) => (
            vec![
                vec![4, 0, -5, 0, 1, 0],
                vec![0, -4, -4, 1, 1, 0],
                vec![0, 4, -4, -1, 1, 0],
                vec![0, -2, -1, 2, 1, 0],
                vec![0, 2, -1, -2, 1, 0],
                vec![0, 4, 0, -5, 0, 1],
            ],
            vec![
                vec![1, 1, 1, 1, 1, 0],
                vec![0, 1, -1, 2, -2, 0],
                vec![0, 1, 1, 4, 4, 0],
                vec![0, 1, -1, 8, -8, 1],
            ],
            vec![
                vec![6, 0, 0],
                vec![-4, -4, -4],
                vec![-4, 4, -4],
                vec![1, 2, 4],
                vec![1, -2, 4],
                vec![0, 0, 24],
            ],
            24,
        ),
        _ => return Err(Error::UnsupportedTile { m, r }),
    };
    let g = g_scaled
        .iter()
        .map(|row| row.iter().map(|&v| v as f64 / g_denom as f64).collect())
        .collect();
    Ok(TransformSet {
        m,
        r,
        n: m + r - 1,
        bt,
        at,
        g,
        g_scaled,
        g_denom,
    })
}

impl TransformSet {
    /// Bits added by `BᵀXB`.
    pub fn feature_ext_bits(&self) -> u32 {
        ext_bits_for_transform(&self.bt, true)
    }

    /// Bits added by `Aᵀ(·)A`.
    pub fn output_ext_bits(&self) -> u32 {
        ext_bits_for_transform(&self.at, true)
    }
}

/// ℓ1 norm of every row of `mt`.
pub fn row_l1_norms(mt: &[Vec<i64>]) -> Vec<u64> {
    mt.iter()
        .map(|row| row.iter().map(|v| v.unsigned_abs()).sum())
        .collect()
}

/// `ceil(max_j log2 ‖M_{:,j}‖₁)`, doubled for `MᵀXM`. Takes `Mᵀ`, so the
/// columns of `M` are the rows passed in.
pub fn ext_bits_for_transform(mt: &[Vec<i64>], two_sided: bool) -> u32 {
    let max = row_l1_norms(mt).into_iter().max().unwrap_or(0);
    let one = ceil_log2(max);
    if two_sided {
        2 * one
    } else {
        one
    }
}

/// `Mᵀ X M` over exact integers, with `mt = Mᵀ` (k×s) and `x` s×s row-major.
pub fn two_sided(mt: &[Vec<i64>], x: &[i128]) -> Vec<i128> {
    let k = mt.len();
    let s = mt.first().map_or(0, |r| r.len());
    let mut tmp = vec![0i128; k * s];
    for i in 0..k {
        for v in 0..s {
            tmp[i * s + v] = (0..s).map(|u| mt[i][u] as i128 * x[u * s + v]).sum();
        }
    }
    let mut out = vec![0i128; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = (0..s).map(|v| tmp[i * s + v] * mt[j][v] as i128).sum();
        }
    }
    out
}

/// Most negative reachable value of entry `(p, p)` of `MᵀXM` over `l_x`-bit
/// inputs, for the row `p` of `mt` with the largest ℓ1 norm. Returns the input
/// and `p`.
pub fn adversarial_input(mt: &[Vec<i64>], l_x: u32) -> (Vec<i128>, usize) {
    let norms = row_l1_norms(mt);
    let max = norms.iter().copied().max().unwrap_or(0);
    // Among the widest rows prefer one whose products share a sign, so every
    // input can sit at the most negative value.
    let negatives = |row: &[i64]| {
        let pos = row.iter().filter(|v| **v > 0).count();
        let neg = row.iter().filter(|v| **v < 0).count();
        2 * pos * neg
    };
    let p = (0..mt.len())
        .filter(|&i| norms[i] == max)
        .min_by_key(|&i| negatives(&mt[i]))
        .unwrap_or(0);
    let s = mt[p].len();
    let lo = -(1i128 << (l_x - 1));
    let hi = (1i128 << (l_x - 1)) - 1;
    let mut x = vec![0i128; s * s];
    for u in 0..s {
        for v in 0..s {
            x[u * s + v] = match (mt[p][u] * mt[p][v]).signum() {
                1 => lo,
                -1 => hi,
                _ => 0,
            };
        }
    }
    (x, p)
}

/// Spatial geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, r: usize, pad: usize, stride: usize) -> Result<Self> {
        if r == 0 || stride == 0 || h + 2 * pad < r || w + 2 * pad < r {
            return Err(Error::InvalidConfig(format!(
                "conv geometry {c}x{h}x{w}, kernel {r}, pad {pad}, stride {stride} has no output"
            )));
        }
        Ok(Self { c, h, w, r, pad, stride })
    }

    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.r) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.r) / self.stride + 1
    }

    fn at(&self, data: &[u64], c: usize, y: isize, x: isize) -> u64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0
        } else {
            data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// Tile grid for a stride-1 layer: ragged borders are zero-filled and cropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub geom: ConvGeom,
    pub m: usize,
    pub n: usize,
    pub th: usize,
    pub tw: usize,
}

impl TileGrid {
    pub fn new(geom: ConvGeom, ts: &TransformSet) -> Result<Self> {
        if geom.stride != 1 {
            return Err(Error::InvalidConfig("Winograd tiling needs stride 1".into()));
        }
        if geom.r != ts.r {
            return Err(Error::InvalidConfig(format!(
                "kernel {} against transform for {}",
                geom.r, ts.r
            )));
        }
        Ok(Self {
            geom,
            m: ts.m,
            n: ts.n,
            th: geom.h_out().div_ceil(ts.m),
            tw: geom.w_out().div_ceil(ts.m),
        })
    }

    pub fn tiles(&self) -> usize {
        self.th * self.tw
    }
}

/// `BᵀXB` on every tile of one party's share (or a plaintext), output laid out
/// as `[n²][C][T]`, reduced modulo `2^width`.
pub fn input_transform(data: &[u64], width: u32, grid: &TileGrid, ts: &TransformSet) -> Vec<u64> {
    let (n, m, c_n, t_n) = (grid.n, grid.m, grid.geom.c, grid.tiles());
    let pad = grid.geom.pad as isize;
    let msk = mask(width);
    let mut out = vec![0u64; n * n * c_n * t_n];
    let mut tile = vec![0u64; n * n];
    let mut tmp = vec![0u64; n * n];
    for c in 0..c_n {
        for ti in 0..grid.th {
            for tj in 0..grid.tw {
                let t = ti * grid.tw + tj;
                for u in 0..n {
                    for v in 0..n {
                        let y = (ti * m + u) as isize - pad;
                        let x = (tj * m + v) as isize - pad;
                        tile[u * n + v] = grid.geom.at(data, c, y, x);
                    }
                }
                for i in 0..n {
                    for v in 0..n {
                        let mut acc = 0u64;
                        for u in 0..n {
                            acc = acc.wrapping_add((ts.bt[i][u] as u64).wrapping_mul(tile[u * n + v]));
                        }
                        tmp[i * n + v] = acc;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0u64;
                        for v in 0..n {
                            acc = acc.wrapping_add(tmp[i * n + v].wrapping_mul(ts.bt[j][v] as u64));
                        }
                        out[((i * n + j) * c_n + c) * t_n + t] = acc & msk;
                    }
                }
            }
        }
    }
    out
}

/// `Aᵀ(·)A` on `[n²][K][T]` data and untile into `K × H_out × W_out`.
pub fn output_transform(data: &[u64], width: u32, grid: &TileGrid, ts: &TransformSet, k_n: usize) -> Vec<u64> {
    let (n, m, t_n) = (grid.n, grid.m, grid.tiles());
    let (h_out, w_out) = (grid.geom.h_out(), grid.geom.w_out());
    let msk = mask(width);
    let mut out = vec![0u64; k_n * h_out * w_out];
    let mut tmp = vec![0u64; m * n];
    for k in 0..k_n {
        for ti in 0..grid.th {
            for tj in 0..grid.tw {
                let t = ti * grid.tw + tj;
                let at = |i: usize, j: usize| data[((i * n + j) * k_n + k) * t_n + t];
                for p in 0..m {
                    for j in 0..n {
                        let mut acc = 0u64;
                        for i in 0..n {
                            acc = acc.wrapping_add((ts.at[p][i] as u64).wrapping_mul(at(i, j)));
                        }
                        tmp[p * n + j] = acc;
                    }
                }
                for p in 0..m {
                    for q in 0..m {
                        let (y, x) = (ti * m + p, tj * m + q);
                        if y >= h_out || x >= w_out {
                            continue;
                        }
                        let mut acc = 0u64;
                        for j in 0..n {
                            acc = acc.wrapping_add(tmp[p * n + j].wrapping_mul(ts.at[q][j] as u64));
                        }
                        out[(k * h_out + y) * w_out + x] = acc & msk;
                    }
                }
            }
        }
    }
    out
}

/// `C·r·r × H_out·W_out` patch matrix of one party's share.
pub fn im2col(data: &[u64], geom: &ConvGeom) -> Vec<u64> {
    let (r, ho, wo) = (geom.r, geom.h_out(), geom.w_out());
    let cols = ho * wo;
    let mut out = vec![0u64; geom.c * r * r * cols];
    for c in 0..geom.c {
        for dy in 0..r {
            for dx in 0..r {
                let row = (c * r + dy) * r + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let y = (oy * geom.stride + dy) as isize - geom.pad as isize;
                        let x = (ox * geom.stride + dx) as isize - geom.pad as isize;
                        out[row * cols + oy * wo + ox] = geom.at(data, c, y, x);
                    }
                }
            }
        }
    }
    out
}

/// Winograd-domain weights: `n²` matrices of shape K×C.
#[derive(Debug, Clone, PartialEq)]
pub struct WinoWeights {
    pub k: usize,
    pub c: usize,
    pub n: usize,
    pub planes: Vec<BitPlaneWeights>,
    /// Codeword `q` stands for `q / 2^scale_exp`.
    pub scale_exp: i32,
}

impl WinoWeights {
    pub fn l_w(&self) -> u32 {
        self.planes.first().map_or(0, |p| p.l_w())
    }

    pub fn magnitude_bits(&self) -> u32 {
        self.planes.first().map_or(0, |p| p.magnitude_bits())
    }

    pub fn value(&self, pos: usize, k: usize, c: usize) -> i64 {
        self.planes[pos].value(k * self.c + c)
    }
}

fn check_weight_len(len: usize, k: usize, c: usize, r: usize) -> Result<()> {
    if len != k * c * r * r {
        return Err(Error::ShapeMismatch(format!(
            "{len} weights for {k}x{c}x{r}x{r}"
        )));
    }
    Ok(())
}

/// Split `[K][C][n²]` entries of (code, negative) into `n²` K×C matrices.
fn build_planes(entries: &[(u64, bool)], k: usize, c: usize, n: usize, importance: &[u64]) -> Result<Vec<BitPlaneWeights>> {
    (0..n * n)
        .map(|pos| {
            let pick = |kk: usize, cc: usize| entries[(kk * c + cc) * n * n + pos];
            let all: Vec<(u64, bool)> = (0..k).flat_map(|kk| (0..c).map(move |cc| (kk, cc))).map(|(kk, cc)| pick(kk, cc)).collect();
            BitPlaneWeights::new(
                k,
                c,
                importance.to_vec(),
                all.iter().map(|e| e.0).collect(),
                all.iter().map(|e| e.1).collect(),
            )
        })
        .collect()
}

/// Exact integer transform `(dG) W (dG)ᵀ` of integer spatial weights, valid
/// when `d` is a power of two. The scale exponent grows by `2·log2 d`.
pub fn exact_weights(w: &[i64], k: usize, c: usize, ts: &TransformSet) -> Result<WinoWeights> {
    check_weight_len(w.len(), k, c, ts.r)?;
    let d = ts.g_denom;
    if d & (d - 1) != 0 {
        return Err(Error::InvalidConfig(format!(
            "G denominator {d} is not a power of two; use quantized weights"
        )));
    }
    let (n, r) = (ts.n, ts.r);
    let mut u = Vec::with_capacity(k * c * n * n);
    for kernel in w.chunks(r * r) {
        let x: Vec<i128> = kernel.iter().map(|&v| v as i128).collect();
        let mut gw = vec![0i128; n * r];
        for i in 0..n {
            for j in 0..r {
                gw[i * r + j] = (0..r).map(|t| ts.g_scaled[i][t] as i128 * x[t * r + j]).sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                let v: i128 = (0..r).map(|t| gw[i * r + t] * ts.g_scaled[j][t] as i128).sum();
                u.push(v as i64);
            }
        }
    }
    let max = u.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let l_w = (64 - max.leading_zeros()).max(1);
    let importance = linproto::standard_importance(l_w);
    let entries: Vec<(u64, bool)> = u.iter().map(|&v| (v.unsigned_abs(), v < 0)).collect();
    let planes = build_planes(&entries, k, c, n, &importance)?;
    Ok(WinoWeights {
        k,
        c,
        n,
        planes,
        scale_exp: 2 * d.trailing_zeros() as i32,
    })
}

/// Offline weight path: transform float weights, pick a power-of-two scale by
/// max-abs calibration and round each entry to the nearest codeword.
pub fn weight_transform_offline(w: &[f64], k: usize, c: usize, ts: &TransformSet, cb: &Codebook) -> Result<WinoWeights> {
    check_weight_len(w.len(), k, c, ts.r)?;
    let u = quant::winograd_domain(w, &ts.g);
    let max = u.iter().fold(0f64, |a, v| a.max(v.abs()));
    let scale_exp = if max > 0.0 {
        (cb.max_magnitude() as f64 / max).log2().floor() as i32
    } else {
        0
    };
    let factor = 2f64.powi(scale_exp);
    let entries: Vec<(u64, bool)> = u
        .iter()
        .map(|&v| {
            let code = cb.nearest_code(v.abs() * factor);
            (code, v < 0.0 && code != 0)
        })
        .collect();
    let planes = build_planes(&entries, k, c, ts.n, &cb.importance)?;
    Ok(WinoWeights {
        k,
        c,
        n: ts.n,
        planes,
        scale_exp,
    })
}

/// Bit widths of one Winograd convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QWinConvConfig {
    pub geom: ConvGeom,
    pub k: usize,
    pub m: usize,
    pub l_a: u32,
    pub l_fe: u32,
    pub l_acc: u32,
    pub l_oe: u32,
    pub out: BitWidthMeta,
}

impl QWinConvConfig {
    /// Smallest widths that cannot overflow, for weights with `mag_bits`
    /// magnitude bits.
    pub fn minimal(geom: ConvGeom, k: usize, ts: &TransformSet, l_a: u32, mag_bits: u32, out: BitWidthMeta) -> Self {
        let l_fe = l_a + ts.feature_ext_bits();
        let l_acc = l_fe + mag_bits + ceil_log2(geom.c as u64);
        let l_oe = l_acc + ts.output_ext_bits();
        Self {
            geom,
            k,
            m: ts.m,
            l_a,
            l_fe,
            l_acc,
            l_oe,
            out,
        }
    }

    pub fn validate(&self, ts: &TransformSet, weights: &WinoWeights) -> Result<()> {
        let need_fe = self.l_a + ts.feature_ext_bits();
        let need_acc = self.l_fe + weights.magnitude_bits() + ceil_log2(self.geom.c as u64);
        let need_oe = self.l_acc + ts.output_ext_bits();
        if self.l_fe < need_fe {
            return Err(Error::AccumulatorOverflow { have: self.l_fe, need: need_fe });
        }
        if self.l_acc < need_acc {
            return Err(Error::AccumulatorOverflow { have: self.l_acc, need: need_acc });
        }
        if self.l_oe < need_oe {
            return Err(Error::AccumulatorOverflow { have: self.l_oe, need: need_oe });
        }
        if self.l_oe > 64 {
            return Err(Error::WidthOutOfRange(self.l_oe));
        }
        if weights.k != self.k || weights.c != self.geom.c || ts.m != self.m {
            return Err(Error::ShapeMismatch("weights do not match the layer".into()));
        }
        Ok(())
    }
}

fn map_shares(x: &Shared, shape: Vec<usize>, meta: BitWidthMeta, f: impl Fn(&[u64]) -> Vec<u64>) -> Shared {
    let mk = |s: &ShareTensor| ShareTensor {
        party: s.party,
        shape: shape.clone(),
        data: f(&s.data),
        meta,
    };
    Shared {
        server: mk(&x.server),
        client: mk(&x.client),
    }
}

/// Local feature transform of a shared `[C, H, W]` tensor into `[n², C, T]`.
pub fn shared_input_transform(x: &Shared, grid: &TileGrid, ts: &TransformSet) -> Shared {
    let meta = x.meta().with_nonneg(false);
    let shape = vec![grid.n * grid.n, grid.geom.c, grid.tiles()];
    map_shares(x, shape, meta, |d| input_transform(d, meta.width, grid, ts))
}

/// Local output transform of `[n², K, T]` into `[K, H_out, W_out]`.
pub fn shared_output_transform(x: &Shared, grid: &TileGrid, ts: &TransformSet, k: usize) -> Shared {
    let meta = x.meta().with_nonneg(false);
    let shape = vec![k, grid.geom.h_out(), grid.geom.w_out()];
    map_shares(x, shape, meta, |d| output_transform(d, meta.width, grid, ts, k))
}

/// Local patch extraction of a shared `[C, H, W]` tensor.
pub fn shared_im2col(x: &Shared, geom: &ConvGeom) -> Shared {
    let shape = vec![geom.c * geom.r * geom.r, geom.h_out() * geom.w_out()];
    map_shares(x, shape, x.meta(), |d| im2col(d, geom))
}

/// Independent GEMMs `planes[p] · X[p]` on an input shaped `[P, L, N]` that is
/// already at the accumulator width and bounded by `value_bits`.
pub fn batched_gemm(
    session: &mut Session,
    planes: &[BitPlaneWeights],
    weight_scale_exp: i32,
    x: &Shared,
    value_bits: u32,
) -> Result<Shared> {
    let (p_n, l, n) = match x.shape() {
        [a, b, c] => (*a, *b, *c),
        s => return Err(Error::ShapeMismatch(format!("expected [P, L, N], got {s:?}"))),
    };
    if p_n != planes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{p_n} input slices against {} weight matrices",
            planes.len()
        )));
    }
    let k = planes.first().map_or(0, |w| w.rows);
    let mut ys = Vec::with_capacity(p_n * k * n);
    let mut yc = Vec::with_capacity(p_n * k * n);
    for (pos, w) in planes.iter().enumerate() {
        if w.rows != k {
            return Err(Error::ShapeMismatch("weight matrices differ in row count".into()));
        }
        let slice = |s: &ShareTensor| ShareTensor {
            party: s.party,
            shape: vec![l, n],
            data: s.data[pos * l * n..(pos + 1) * l * n].to_vec(),
            meta: s.meta,
        };
        let xv = Shared {
            server: slice(&x.server),
            client: slice(&x.client),
        };
        let y = linproto::gemm_ot_extended(session, w, &xv, value_bits)?;
        ys.extend_from_slice(&y.server.data);
        yc.extend_from_slice(&y.client.data);
    }
    let meta = BitWidthMeta {
        width: x.meta().width,
        scale_exp: x.meta().scale_exp + weight_scale_exp,
        nonneg: false,
    };
    let shape = vec![p_n, k, n];
    Ok(Shared {
        server: ShareTensor { party: Party::Server, shape: shape.clone(), data: ys, meta },
        client: ShareTensor { party: Party::Client, shape, data: yc, meta },
    })
}

/// `n²` GEMMs of `(K×C)·(C×T)` on transformed features already extended to
/// the accumulator width and bounded by `value_bits`.
pub fn winograd_gemm(session: &mut Session, weights: &WinoWeights, v: &Shared, value_bits: u32) -> Result<Shared> {
    if v.shape().get(1) != Some(&weights.c) {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} against weights with C={}",
            v.shape(),
            weights.c
        )));
    }
    batched_gemm(session, &weights.planes, weights.scale_exp, v, value_bits)
}

/// Quantized Winograd convolution over shares:
/// Ext → BᵀXB → Ext → n² GEMMs → Ext → Aᵀ(·)A → Requant.
pub fn qwinconv(session: &mut Session, x: &Shared, weights: &WinoWeights, cfg: &QWinConvConfig) -> Result<Shared> {
    let ts = transform_matrices(cfg.m, cfg.geom.r)?;
    cfg.validate(&ts, weights)?;
    let g = cfg.geom;
    if x.shape() != [g.c, g.h, g.w] || x.meta().width != cfg.l_a {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} at {} bits, layer expects [{}, {}, {}] at {} bits",
            x.shape(),
            x.meta().width,
            g.c,
            g.h,
            g.w,
            cfg.l_a
        )));
    }
    let grid = TileGrid::new(g, &ts)?;
    let widen = |session: &mut Session, t: Shared, to: u32| -> Result<Shared> {
        if to > t.meta().width {
            let msb = t.meta().nonneg;
            linproto::ext(session, &t, to, msb)
        } else {
            Ok(t)
        }
    };
    let xe = widen(session, x.clone(), cfg.l_fe)?;
    let v = shared_input_transform(&xe, &grid, &ts);
    let v = widen(session, v, cfg.l_acc)?;
    let mm = winograd_gemm(session, weights, &v, cfg.l_fe)?;
    let mm = widen(session, mm, cfg.l_oe)?;
    let y = shared_output_transform(&mm, &grid, &ts, cfg.k);
    linproto::requant(session, &y, cfg.out, false)
}

/// Plaintext integer Winograd with the given weights, unreduced.
pub fn plain_winograd(x: &[i64], weights: &WinoWeights, geom: &ConvGeom, ts: &TransformSet) -> Result<Vec<i128>> {
    let grid = TileGrid::new(*geom, ts)?;
    let (n, c_n, t_n, k_n) = (ts.n, geom.c, grid.tiles(), weights.k);
    let xu: Vec<u64> = x.iter().map(|&v| v as u64).collect();
    let v = input_transform(&xu, 64, &grid, ts);
    let mut mm = vec![0u64; n * n * k_n * t_n];
    for pos in 0..n * n {
        for k in 0..k_n {
            for t in 0..t_n {
                let mut acc: i128 = 0;
                for c in 0..c_n {
                    acc += weights.value(pos, k, c) as i128 * v[(pos * c_n + c) * t_n + t] as i64 as i128;
                }
                mm[(pos * k_n + k) * t_n + t] = acc as u64;
            }
        }
    }
    let y = output_transform(&mm, 64, &grid, ts, k_n);
    Ok(y.into_iter().map(|v| v as i64 as i128).collect())
}

/// Plaintext integer convolution (cross-correlation with zero padding), unreduced.
pub fn plain_direct(x: &[i64], w: &[i64], k_n: usize, geom: &ConvGeom) -> Vec<i128> {
    let (r, ho, wo) = (geom.r, geom.h_out(), geom.w_out());
    let mut out = vec![0i128; k_n * ho * wo];
    for k in 0..k_n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc: i128 = 0;
                for c in 0..geom.c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let y = (oy * geom.stride + dy) as isize - geom.pad as isize;
                            let xx = (ox * geom.stride + dx) as isize - geom.pad as isize;
                            if y < 0 || xx < 0 || y as usize >= geom.h || xx as usize >= geom.w {
                                continue;
                            }
                            acc += w[((k * geom.c + c) * r + dy) * r + dx] as i128
                                * x[(c * geom.h + y as usize) * geom.w + xx as usize] as i128;
                        }
                    }
                }
                out[(k * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Floor-shift by `shift` and wrap into signed `l_out` bits.
pub fn requant_plain(acc: &[i128], shift: u32, l_out: u32) -> Vec<i64> {
    acc.iter()
        .map(|&v| {
            let s = v.div_euclid(1i128 << shift);
            crate::ring::to_signed(reduce(s, l_out), l_out) as i64
        })
        .collect()
}

/// Plaintext quantized direct convolution: integer conv, floor shift, wrap.
pub fn direct_quant_conv(x: &[i64], w: &[i64], k_n: usize, geom: &ConvGeom, shift: u32, l_out: u32) -> Vec<i64> {
    requant_plain(&plain_direct(x, w, k_n, geom), shift, l_out)
}

/// Direct convolution over shares: local im2col then one GEMM at `l_acc`.
pub fn direct_conv_shared(
    session: &mut Session,
    x: &Shared,
    w: &BitPlaneWeights,
    geom: &ConvGeom,
    l_acc: u32,
) -> Result<Shared> {
    let cols = shared_im2col(x, geom);
    let y = linproto::gemm_ot(session, w, &cols, l_acc)?;
    let mut y = y;
    y.set_shape(vec![w.rows, geom.h_out(), geom.w_out()]);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::CostModel;
    use crate::ring::PlainTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn float_conv(x: &[f64], w: &[f64], n: usize, r: usize) -> Vec<f64> {
        let o = n - r + 1;
        let mut y = vec![0.0; o * o];
        for i in 0..o {
            for j in 0..o {
                for u in 0..r {
                    for v in 0..r {
                        y[i * o + j] += w[u * r + v] * x[(i + u) * n + j + v];
                    }
                }
            }
        }
        y
    }

    fn float_winograd(x: &[f64], w: &[f64], ts: &TransformSet) -> Vec<f64> {
        let (n, m) = (ts.n, ts.m);
        let u = quant::winograd_domain(w, &ts.g);
        let bt: Vec<Vec<f64>> = ts.bt.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let at: Vec<Vec<f64>> = ts.at.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for a in 0..n {
                    for b in 0..n {
                        v[i * n + j] += bt[i][a] * x[a * n + b] * bt[j][b];
                    }
                }
            }
        }
        let mut y = vec![0.0; m * m];
        for p in 0..m {
            for q in 0..m {
                for i in 0..n {
                    for j in 0..n {
                        y[p * m + q] += at[p][i] * u[i * n + j] * v[i * n + j] * at[q][j];
                    }
                }
            }
        }
        y
    }

    #[test]
    fn unsupported_tile() {
        assert_eq!(transform_matrices(3, 3), Err(Error::UnsupportedTile { m: 3, r: 3 }));
    }

    #[test]
    fn transform_identity_holds() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for m in [2, 4] {
            let ts = transform_matrices(m, 3).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..ts.n * ts.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = float_conv(&x, &w, ts.n, 3);
                let b = float_winograd(&x, &w, &ts);
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() < 1e-9, "m={m}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn norm_examples() {
        let t2 = transform_matrices(2, 3).unwrap();
        assert!(row_l1_norms(&t2.bt).iter().all(|&v| v == 2));
        let t4 = transform_matrices(4, 3).unwrap();
        assert_eq!(*row_l1_norms(&t4.bt).iter().max().unwrap(), 10);
        assert_eq!(t2.feature_ext_bits(), 2);
        assert_eq!(t4.feature_ext_bits(), 8);
        assert_eq!(t2.output_ext_bits(), 4);
        assert_eq!(t4.output_ext_bits(), 10);
        let id: Vec<Vec<i64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as i64).collect()).collect();
        assert_eq!(ext_bits_for_transform(&id, true), 0);
    }

    fn fits(v: i128, w: u32) -> bool {
        v >= -(1i128 << (w - 1)) && v < (1i128 << (w - 1))
    }

    #[test]
    fn adversarial_input_respects_bound() {
        for m in [2, 4] {
            let ts = transform_matrices(m, 3).unwrap();
            for mt in [&ts.bt, &ts.at] {
                let bits = ext_bits_for_transform(mt, true);
                for l_x in [4, 6, 8] {
                    let (x, p) = adversarial_input(mt, l_x);
                    assert!(x.iter().all(|&v| fits(v, l_x)));
                    let y = two_sided(mt, &x);
                    assert!(y.iter().all(|&v| fits(v, l_x + bits)));
                    let norm = row_l1_norms(mt)[p] as i128;
                    assert!(y[p * mt.len() + p] <= -(norm * norm) * (1 << (l_x - 1)) + norm * norm);
                }
            }
        }
    }

    #[test]
    fn two_sided_bound_is_tight_for_f2() {
        let ts = transform_matrices(2, 3).unwrap();
        for mt in [&ts.bt, &ts.at] {
            let bits = ext_bits_for_transform(mt, true);
            let (x, p) = adversarial_input(mt, 6);
            let v = two_sided(mt, &x)[p * mt.len() + p];
            assert!(!fits(v, 6 + bits - 1));
        }
    }

    #[test]
    fn two_sided_bound_has_slack_for_f4() {
        // 10² = 100 < 2^7, so seven extra bits already hold every B-transformed tile.
        let ts = transform_matrices(4, 3).unwrap();
        let (x, p) = adversarial_input(&ts.bt, 6);
        let v = two_sided(&ts.bt, &x)[p * 6 + p];
        assert!(fits(v, 6 + 7));
        assert!(!fits(v, 6 + 6));
    }

    #[test]
    fn tiling_examples() {
        let ts = transform_matrices(2, 3).unwrap();
        let g = ConvGeom::new(1, 4, 4, 3, 1, 1).unwrap();
        let grid = TileGrid::new(g, &ts).unwrap();
        assert_eq!(grid.tiles(), 4);
        let g = ConvGeom::new(1, 4, 4, 3, 0, 1).unwrap();
        assert_eq!(TileGrid::new(g, &ts).unwrap().tiles(), 1);
    }

    #[test]
    fn exact_weights_impulse() {
        let ts = transform_matrices(2, 3).unwrap();
        let mut w = vec![0i64; 9];
        w[4] = 1;
        let ww = exact_weights(&w, 1, 1, &ts).unwrap();
        assert_eq!(ww.scale_exp, 2);
        let mid: Vec<i64> = ts.g_scaled.iter().map(|r| r[1]).collect();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ww.value(i * 4 + j, 0, 0), mid[i] * mid[j]);
            }
        }
        assert!(exact_weights(&w, 1, 1, &transform_matrices(4, 3).unwrap()).is_err());
    }

    #[test]
    fn offline_zero_weights() {
        let ts = transform_matrices(2, 3).unwrap();
        let cb = Codebook::standard(2).unwrap();
        let ww = weight_transform_offline(&[0.0; 18], 2, 1, &ts, &cb).unwrap();
        assert!(ww.planes.iter().all(|p| p.values().iter().all(|&v| v == 0)));
    }

    #[test]
    fn offline_weights_use_codebook() {
        let ts = transform_matrices(2, 3).unwrap();
        let cb = quant::reweight_bits(3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ww = weight_transform_offline(&w, 2, 3, &ts, &cb).unwrap();
        let allowed = cb.representable();
        let u = quant::winograd_domain(&w, &ts.g);
        let f = 2f64.powi(ww.scale_exp);
        for pos in 0..16 {
            for k in 0..2 {
                for c in 0..3 {
                    let v = ww.value(pos, k, c);
                    assert!(allowed.contains(&v.unsigned_abs()));
                    let exact = u[(k * 3 + c) * 16 + pos] * f;
                    assert!(exact.abs() <= cb.max_magnitude() as f64);
                    let best = allowed
                        .iter()
                        .map(|&a| (a as f64 - exact.abs()).abs())
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!((v.unsigned_abs() as f64 - exact.abs()).abs(), best);
                }
            }
        }
    }

    fn share_plain(x: &[i64], shape: Vec<usize>, meta: BitWidthMeta, seed: u64) -> Shared {
        let p = PlainTensor::from_signed(shape, x, meta).unwrap();
        Shared::from_plain(&p, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn plain_winograd_matches_direct_exact_weights() {
        let ts = transform_matrices(2, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (c, k, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
            let g = ConvGeom::new(c, h, w, 3, 1, 1).unwrap();
            let x: Vec<i64> = (0..c * h * w).map(|_| rng.gen_range(-8..8)).collect();
            let wt: Vec<i64> = (0..k * c * 9).map(|_| rng.gen_range(-3..=3)).collect();
            let ww = exact_weights(&wt, k, c, &ts).unwrap();
            let a = plain_winograd(&x, &ww, &g, &ts).unwrap();
            let b = plain_direct(&x, &wt, k, &g);
            let b4: Vec<i128> = b.iter().map(|v| v * 4).collect();
            assert_eq!(a, b4);
        }
    }

    #[test]
    fn qwinconv_zero_input() {
        let ts = transform_matrices(2, 3).unwrap();
        let g = ConvGeom::new(1, 2, 2, 3, 1, 1).unwrap();
        let ww = exact_weights(&[1; 9], 1, 1, &ts).unwrap();
        let out = BitWidthMeta::new(8, -2).unwrap();
        let cfg = QWinConvConfig::minimal(g, 1, &ts, 4, ww.magnitude_bits(), out);
        let x = share_plain(&[0; 4], vec![1, 2, 2], BitWidthMeta::new(4, 0).unwrap(), 1);
        let mut s = Session::new(CostModel::default(), 1);
        let y = qwinconv(&mut s, &x, &ww, &cfg).unwrap();
        assert!(y.reconstruct().unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn qwinconv_centre_kernel_reproduces_input() {
        let ts = transform_matrices(2, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let g = ConvGeom::new(1, 5, 3, 3, 1, 1).unwrap();
        let mut wt = vec![0i64; 9];
        wt[4] = 1;
        let ww = exact_weights(&wt, 1, 1, &ts).unwrap();
        let out = BitWidthMeta::new(6, 0).unwrap();
        let cfg = QWinConvConfig::minimal(g, 1, &ts, 6, ww.magnitude_bits(), out);
        let x: Vec<i64> = (0..15).map(|_| rng.gen_range(-32..32)).collect();
        let xs = share_plain(&x, vec![1, 5, 3], BitWidthMeta::new(6, 0).unwrap(), 3);
        let mut s = Session::new(CostModel::default(), 1);
        let y = qwinconv(&mut s, &xs, &ww, &cfg).unwrap();
        let got: Vec<i64> = y.reconstruct().unwrap().signed_values().iter().map(|&v| v as i64).collect();
        assert_eq!(got, x);
    }

    #[test]
    fn qwinconv_matches_plain_winograd_quantized() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for trial in 0..30 {
            let m = if trial % 3 == 0 { 4 } else { 2 };
            let ts = transform_matrices(m, 3).unwrap();
            let (c, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (h, w) = (rng.gen_range(2..=7), rng.gen_range(2..=7));
            let g = ConvGeom::new(c, h, w, 3, 1, 1).unwrap();
            let l_a = [4, 6][trial % 2];
            let cb = if trial % 4 == 1 { quant::reweight_bits(2).unwrap() } else { Codebook::standard(2).unwrap() };
            let wf: Vec<f64> = (0..k * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ww = weight_transform_offline(&wf, k, c, &ts, &cb).unwrap();
            let half = 1i64 << (l_a - 1);
            let x: Vec<i64> = (0..c * h * w).map(|_| rng.gen_range(-half..half)).collect();
            let shift = 3;
            let out = BitWidthMeta::new(l_a + 4, ww.scale_exp - shift).unwrap();
            let cfg = QWinConvConfig::minimal(g, k, &ts, l_a, ww.magnitude_bits(), out);
            let xs = share_plain(&x, vec![c, h, w], BitWidthMeta::new(l_a, 0).unwrap(), trial as u64);
            let mut s = Session::new(CostModel::default(), trial as u64);
            let y = qwinconv(&mut s, &xs, &ww, &cfg).unwrap();
            let got: Vec<i64> = y.reconstruct().unwrap().signed_values().iter().map(|&v| v as i64).collect();
            let want = requant_plain(&plain_winograd(&x, &ww, &g, &ts).unwrap(), shift as u32, l_a + 4);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn direct_quant_conv_examples() {
        let g = ConvGeom::new(1, 1, 1, 3, 1, 1).unwrap();
        let w: Vec<i64> = (1..=9).collect();
        assert_eq!(direct_quant_conv(&[3], &w, 1, &g, 0, 16), vec![15]);
        assert_eq!(direct_quant_conv(&[0], &w, 1, &g, 0, 16), vec![0]);
    }

    #[test]
    fn direct_conv_shared_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for stride in [1, 2] {
            let (c, k, h, w) = (2, 3, 5, 6);
            let g = ConvGeom::new(c, h, w, 3, 1, stride).unwrap();
            let x: Vec<i64> = (0..c * h * w).map(|_| rng.gen_range(-8..8)).collect();
            let wt: Vec<i64> = (0..k * c * 9).map(|_| rng.gen_range(-3..=3)).collect();
            let bw = BitPlaneWeights::from_ints(k, c * 9, 2, &wt).unwrap();
            let l_acc = bw.required_acc(4);
            let xs = share_plain(&x, vec![c, h, w], BitWidthMeta::new(4, 0).unwrap(), 1);
            let mut s = Session::new(CostModel::default(), 1);
            let y = direct_conv_shared(&mut s, &xs, &bw, &g, l_acc).unwrap();
            let got = y.reconstruct().unwrap().signed_values();
            assert_eq!(got, plain_direct(&x, &wt, k, &g));
        }
    }

    #[test]
    fn float_conv_tracks_quantized_conv() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let g = ConvGeom::new(2, 4, 4, 3, 0, 1).unwrap();
        let xf: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wf: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xq = quant::quantize_per_tensor(&xf, 8, 6).unwrap();
        let wq = quant::quantize_per_tensor(&wf, 8, 6).unwrap();
        let y = direct_quant_conv(&xq, &wq, 1, &g, 6, 16);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += wf[(c * 3 + dy) * 3 + dx] * xf[(c * 4 + oy + dy) * 4 + ox + dx];
                        }
                    }
                }
                let got = y[oy * 2 + ox] as f64 / 64.0;
                assert!((got - acc).abs() < 18.0 * 2.0 / 64.0 + 1.0 / 64.0);
            }
        }
    }
}
