//! Layer-level network descriptions (TOML), presets, and their lowering into
//! protocol graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphopt::{GemmWeights, GraphBuilder, LocalOp, ProtocolGraph};
use crate::linproto::{ceil_log2, BitPlaneWeights};
use crate::quant::Codebook;
use crate::ring::{BitWidthMeta, PlainTensor};
use crate::winograd::{self, ConvGeom};

pub const NETWORK_SCHEMA_VERSION: u32 = 1;
/// Width of residual operands and of block boundaries.
pub const RESIDUAL_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    #[default]
    Standard,
    Reweighted,
}

impl CodebookKind {
    pub fn build(self, l_w: u32) -> Result<Codebook> {
        match self {
            CodebookKind::Standard => Codebook::standard(l_w),
            CodebookKind::Reweighted => Codebook::reweighted(l_w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDesc {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default = "default_input_bits")]
    pub bits: u32,
    #[serde(default = "default_input_scale")]
    pub scale_exp: i32,
    /// Post-activation data: values lie in `[0, 2^(bits−1))`.
    #[serde(default)]
    pub nonneg: bool,
}

fn default_input_bits() -> u32 {
    8
}

fn default_input_scale() -> i32 {
    4
}

/// Quantization defaults applied to every layer without an override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Defaults {
    pub l_w: u32,
    pub l_a: u32,
    pub m: usize,
    pub codebook: CodebookKind,
    pub l_add: u32,
    pub l_res: u32,
    pub winograd: bool,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            l_w: 2,
            l_a: 6,
            m: 2,
            codebook: CodebookKind::Standard,
            l_add: 16,
            l_res: RESIDUAL_BITS,
            winograd: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOverride {
    pub l_w: Option<u32>,
    pub l_a: Option<u32>,
    pub m: Option<usize>,
    pub winograd: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        name: String,
        k: usize,
        #[serde(default = "default_r")]
        r: usize,
        #[serde(default = "one")]
        stride: usize,
        pad: Option<usize>,
        #[serde(default, flatten)]
        quant: QuantOverride,
    },
    Relu,
    /// Fully connected layer over the whole `[C, H, W]` input.
    Fc {
        name: String,
        k: usize,
        #[serde(default, flatten)]
        quant: QuantOverride,
    },
    /// Two 3×3 stride-1 convolutions with a ReLU between them, an identity
    /// shortcut joined at the end, and a closing ReLU.
    Residual {
        name: String,
        #[serde(default, flatten)]
        quant: QuantOverride,
    },
}

fn default_r() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDesc {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub input: InputDesc,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub layers: Vec<LayerDesc>,
}

/// Resolved quantization of one GEMM layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub l_w: u32,
    pub l_a: u32,
    pub m: usize,
    pub winograd: bool,
    pub codebook: CodebookKind,
}

/// How the quantization of each layer is chosen at lowering time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BuildMode {
    /// Per-layer settings from the description.
    #[default]
    AsDescribed,
    /// Every layer direct (no Winograd), standard codebook, at the given widths.
    Uniform { l_w: u32, l_a: u32 },
    /// Weight widths per GEMM layer name, everything else as described.
    Plan(Vec<(String, u32)>),
}

/// One GEMM layer as seen by planning: name, kernel geometry and float weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmLayer {
    pub name: String,
    pub k: usize,
    pub geom: ConvGeom,
    pub quant: LayerQuant,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op<'a> {
    Conv { name: &'a str, k: usize, r: usize, stride: usize, pad: usize, q: QuantOverride },
    Fc { name: &'a str, k: usize, q: QuantOverride },
    Relu,
    Residual { name: &'a str, q: QuantOverride },
}

impl NetworkDesc {
    pub fn from_toml(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: Option<u32>,
        }
        let probe: Probe = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        match probe.schema_version {
            Some(NETWORK_SCHEMA_VERSION) => {}
            Some(found) => {
                return Err(Error::SchemaVersion {
                    found,
                    expected: NETWORK_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Parse("missing schema_version".into())),
        }
        let d: NetworkDesc = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    fn ops(&self) -> Vec<Op<'_>> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerDesc::Conv {
                    name,
                    k,
                    r,
                    stride,
                    pad,
                    quant,
                } => Op::Conv {
                    name,
                    k: *k,
                    r: *r,
                    stride: *stride,
                    pad: pad.unwrap_or(r / 2),
                    q: *quant,
                },
                LayerDesc::Fc { name, k, quant } => Op::Fc { name, k: *k, q: *quant },
                LayerDesc::Relu => Op::Relu,
                LayerDesc::Residual { name, quant } => Op::Residual { name, q: *quant },
            })
            .collect()
    }

    fn resolve(&self, q: QuantOverride, geom: &ConvGeom, mode: &BuildMode, name: &str) -> LayerQuant {
        let d = &self.defaults;
        let mut lq = LayerQuant {
            l_w: q.l_w.unwrap_or(d.l_w),
            l_a: q.l_a.unwrap_or(d.l_a),
            m: q.m.unwrap_or(d.m),
            winograd: q.winograd.unwrap_or(d.winograd),
            codebook: d.codebook,
        };
        match mode {
            BuildMode::AsDescribed => {}
            BuildMode::Uniform { l_w, l_a } => {
                lq.l_w = *l_w;
                lq.l_a = *l_a;
                lq.winograd = false;
                lq.codebook = CodebookKind::Standard;
            }
            BuildMode::Plan(p) => {
                if let Some((_, l_w)) = p.iter().find(|(n, _)| n == name) {
                    lq.l_w = *l_w;
                }
            }
        }
        lq.winograd &= geom.stride == 1 && geom.r == 3;
        lq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != NETWORK_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: NETWORK_SCHEMA_VERSION,
            });
        }
        let i = &self.input;
        if i.c == 0 || i.h == 0 || i.w == 0 {
            return bad(format!("input dims {}x{}x{} must be positive", i.c, i.h, i.w));
        }
        if !(2..=16).contains(&i.bits) {
            return bad(format!("input width {} outside [2, 16]", i.bits));
        }
        let d = &self.defaults;
        if d.l_res != RESIDUAL_BITS {
            return bad(format!("residual width must be {RESIDUAL_BITS}, got {}", d.l_res));
        }
        if !(d.l_res..=32).contains(&d.l_add) {
            return bad(format!("adder width {} outside [{}, 32]", d.l_add, d.l_res));
        }
        self.gemm_layers().map(|_| ())
    }

    /// Walk the layers tracking shapes; returns every GEMM layer in order.
    pub fn gemm_layers(&self) -> Result<Vec<GemmLayer>> {
        self.gemm_layers_with(&BuildMode::AsDescribed)
    }

    fn gemm_layers_with(&self, mode: &BuildMode) -> Result<Vec<GemmLayer>> {
        let mut shape = (self.input.c, self.input.h, self.input.w);
        let mut out = vec![];
        let mut names = std::collections::BTreeSet::new();
        let mut idx = 0u64;
        let mut push = |name: String, k: usize, geom: ConvGeom, q: QuantOverride, out: &mut Vec<GemmLayer>| -> Result<()> {
            if k == 0 {
                return Err(Error::InvalidConfig(format!("layer {name} has K=0")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate layer name {name}")));
            }
            let quant = self.resolve(q, &geom, mode, &name);
            check_quant(&name, &quant)?;
            let weights = synth_weights(self.seed, idx, k, geom.c, geom.r);
            idx += 1;
            out.push(GemmLayer {
                name,
                k,
                geom,
                quant,
                weights,
            });
            Ok(())
        };
        for op in self.ops() {
            match op {
                Op::Relu => {}
                Op::Conv {
                    name,
                    k,
                    r,
                    stride,
                    pad,
                    q,
                } => {
                    let geom = ConvGeom::new(shape.0, shape.1, shape.2, r, pad, stride)?;
                    push(name.to_string(), k, geom, q, &mut out)?;
                    shape = (k, geom.h_out(), geom.w_out());
                }
                Op::Fc { name, k, q } => {
                    if shape.1 != shape.2 {
                        return Err(Error::InvalidConfig(format!(
                            "fc {name} needs a square input, got {}x{}",
                            shape.1, shape.2
                        )));
                    }
                    let geom = ConvGeom::new(shape.0, shape.1, shape.2, shape.1, 0, 1)?;
                    push(name.to_string(), k, geom, q, &mut out)?;
                    shape = (k, 1, 1);
                }
                Op::Residual { name, q } => {
                    let geom = ConvGeom::new(shape.0, shape.1, shape.2, 3, 1, 1)?;
                    push(format!("{name}.conv1"), shape.0, geom, q, &mut out)?;
                    push(format!("{name}.conv2"), shape.0, geom, q, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Seeded input tensor matching the description.
    pub fn sample_input(&self, seed: u64) -> Result<PlainTensor> {
        use rand::Rng;
        let i = &self.input;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let half = 1i64 << (i.bits - 1);
        let lo = if i.nonneg { 0 } else { -half };
        let vals: Vec<i64> = (0..i.c * i.h * i.w).map(|_| rng.gen_range(lo..half)).collect();
        PlainTensor::from_signed(vec![i.c, i.h, i.w], &vals, self.input_meta()?)
    }

    pub fn input_meta(&self) -> Result<BitWidthMeta> {
        Ok(BitWidthMeta::new(self.input.bits, self.input.scale_exp)?.with_nonneg(self.input.nonneg))
    }

    /// Lower to a protocol graph with no optimization applied.
    pub fn build_graph(&self, mode: &BuildMode) -> Result<ProtocolGraph> {
        self.validate()?;
        let layers = self.gemm_layers_with(mode)?;
        let mut lw = Lowering {
            b: GraphBuilder::new(),
            layers: layers.into_iter(),
            defaults: self.defaults,
        };
        let meta = self.input_meta()?;
        lw.b.layer("input");
        let x = lw.b.input(vec![self.input.c, self.input.h, self.input.w], meta);
        let mut cur = Cur {
            id: x,
            width: meta.width,
            scale: meta.scale_exp,
            shape: vec![self.input.c, self.input.h, self.input.w],
            nonneg: meta.nonneg,
        };
        let ops = self.ops();
        for (i, op) in ops.iter().enumerate() {
            let next = next_width(&ops[i + 1..], &self.defaults, mode);
            cur = match *op {
                Op::Relu => {
                    lw.b.layer(&format!("relu{i}"));
                    Cur {
                        id: lw.b.relu(cur.id),
                        nonneg: true,
                        ..cur
                    }
                }
                Op::Conv { .. } | Op::Fc { .. } => {
                    let layer = lw.next_layer()?;
                    lw.conv(cur, &layer, Target::Width(next))?
                }
                Op::Residual { name, .. } => lw.residual(cur, name, next)?,
            };
        }
        lw.b.layer("output");
        lw.b.finish(cur.id)
    }
}

fn check_quant(name: &str, q: &LayerQuant) -> Result<()> {
    let lo = if q.codebook == CodebookKind::Reweighted { 2 } else { 1 };
    if !(lo..=16).contains(&q.l_w) || !(2..=16).contains(&q.l_a) {
        return Err(Error::InvalidConfig(format!(
            "layer {name}: W{}A{} outside supported widths",
            q.l_w, q.l_a
        )));
    }
    if q.winograd && q.m != 2 && q.m != 4 {
        return Err(Error::UnsupportedTile { m: q.m, r: 3 });
    }
    Ok(())
}

/// Kaiming-normal float weights `[K][C][r][r]`, deterministic per layer.
pub fn synth_weights(seed: u64, layer: u64, k: usize, c: usize, r: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ layer.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let std = (2.0 / (c * r * r) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..k * c * r * r).map(|_| normal.sample(&mut rng)).collect()
}

/// Spatial weights quantized to a codebook with a power-of-two scale, as one
/// `K × (C·r²)` matrix.
pub fn direct_weights(w: &[f64], k: usize, cb: &Codebook) -> Result<GemmWeights> {
    let cols = w.len() / k.max(1);
    let max = w.iter().fold(0f64, |a, v| a.max(v.abs()));
    let scale_exp = if max > 0.0 {
        (cb.max_magnitude() as f64 / max).log2().floor() as i32
    } else {
        0
    };
    let f = 2f64.powi(scale_exp);
    let codes: Vec<u64> = w.iter().map(|v| cb.nearest_code(v.abs() * f)).collect();
    let negative = w.iter().zip(&codes).map(|(v, &c)| *v < 0.0 && c != 0).collect();
    Ok(GemmWeights {
        planes: vec![BitPlaneWeights::new(k, cols, cb.importance.clone(), codes, negative)?],
        scale_exp,
    })
}

/// Activation width the next GEMM layer wants at its input.
fn next_width(rest: &[Op<'_>], d: &Defaults, mode: &BuildMode) -> Option<u32> {
    for op in rest {
        let q = match op {
            Op::Relu => continue,
            Op::Residual { .. } => return Some(RESIDUAL_BITS),
            Op::Conv { q, .. } | Op::Fc { q, .. } => q,
        };
        return Some(match mode {
            BuildMode::Uniform { l_a, .. } => *l_a,
            _ => q.l_a.unwrap_or(d.l_a),
        });
    }
    None
}

#[derive(Debug, Clone)]
struct Cur {
    id: usize,
    width: u32,
    scale: i32,
    shape: Vec<usize>,
    nonneg: bool,
}

#[derive(Debug, Clone, Copy)]
enum Target {
    /// Requantize to this width (or the residual width at the end of the net).
    Width(Option<u32>),
    /// Leave the output at its extended width for a residual join.
    Join,
}

struct Lowering {
    b: GraphBuilder,
    layers: std::vec::IntoIter<GemmLayer>,
    defaults: Defaults,
}

impl Lowering {
    fn next_layer(&mut self) -> Result<GemmLayer> {
        self.layers
            .next()
            .ok_or_else(|| Error::Invariant("layer walk out of sync".into()))
    }

    /// Requant (w, e) to (l, e − (w − l)): keeps the top `l` bits.
    fn to_width(&mut self, cur: Cur, l: u32) -> Cur {
        if cur.width == l {
            return cur;
        }
        let scale = cur.scale - (cur.width as i32 - l as i32).max(0);
        Cur {
            id: self.b.requant(cur.id, l, scale),
            width: l,
            scale,
            ..cur
        }
    }

    fn conv(&mut self, cur: Cur, layer: &GemmLayer, target: Target) -> Result<Cur> {
        let q = layer.quant;
        let geom = layer.geom;
        let cb = q.codebook.build(q.l_w)?;
        self.b.layer(&layer.name);
        let x = self.to_width(cur, q.l_a);
        let e_in = x.scale;
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let (y, l_oe, e_acc) = if q.winograd {
            let ts = winograd::transform_matrices(q.m, 3)?;
            let w = winograd::weight_transform_offline(&layer.weights, layer.k, geom.c, &ts, &cb)?;
            let cfg = winograd::QWinConvConfig::minimal(
                geom,
                layer.k,
                &ts,
                q.l_a,
                w.magnitude_bits(),
                BitWidthMeta::new(q.l_a, 0)?,
            );
            let widx = self.b.add_weights(GemmWeights {
                planes: w.planes,
                scale_exp: w.scale_exp,
            });
            let (c, h, ww, pad) = (geom.c, geom.h, geom.w, geom.pad);
            let v = self.b.ext(x.id, cfg.l_fe);
            let v = self.b.local(v, LocalOp::WinoInput { m: q.m, c, h, w: ww, pad });
            let v = self.b.ext(v, cfg.l_acc);
            let v = self.b.gemm(v, widx, cfg.l_fe);
            let v = self.b.ext(v, cfg.l_oe);
            let y = self.b.local(
                v,
                LocalOp::WinoOutput {
                    m: q.m,
                    k: layer.k,
                    c,
                    h,
                    w: ww,
                    pad,
                },
            );
            (y, cfg.l_oe, e_in + w.scale_exp)
        } else {
            let gw = direct_weights(&layer.weights, layer.k, &cb)?;
            let mag = gw.planes[0].magnitude_bits();
            let l_acc = q.l_a + mag + ceil_log2((geom.c * geom.r * geom.r) as u64);
            let e_w = gw.scale_exp;
            let widx = self.b.add_weights(gw);
            let v = self.b.ext(x.id, l_acc);
            let v = self.b.local(
                v,
                LocalOp::Im2col {
                    c: geom.c,
                    h: geom.h,
                    w: geom.w,
                    r: geom.r,
                    pad: geom.pad,
                    stride: geom.stride,
                },
            );
            let v = self.b.gemm(v, widx, q.l_a);
            let y = self.b.local(v, LocalOp::Reshape { shape: vec![layer.k, ho, wo] });
            (y, l_acc, e_in + e_w)
        };
        let acc = Cur {
            id: y,
            width: l_oe,
            scale: e_acc,
            shape: vec![layer.k, ho, wo],
            nonneg: false,
        };
        Ok(match target {
            Target::Join => acc,
            Target::Width(w) => {
                let w = w.unwrap_or(RESIDUAL_BITS);
                let scale = e_in.min(e_acc);
                Cur {
                    id: self.b.requant(acc.id, w, scale),
                    width: w,
                    scale,
                    ..acc
                }
            }
        })
    }

    fn residual(&mut self, cur: Cur, name: &str, next: Option<u32>) -> Result<Cur> {
        let l_res = self.defaults.l_res;
        self.b.layer(&format!("{name}.in"));
        let x = self.to_width(cur, l_res);
        let conv1 = self.next_layer()?;
        let conv2 = self.next_layer()?;
        let h = self.conv(x.clone(), &conv1, Target::Width(Some(conv2.quant.l_a)))?;
        self.b.layer(&format!("{name}.relu1"));
        let h = Cur {
            id: self.b.relu(h.id),
            nonneg: true,
            ..h
        };
        let main = self.conv(h, &conv2, Target::Join)?;
        let jp = plan_join(main.width, main.scale, l_res, x.scale, self.defaults.l_add, x.nonneg);
        let mut res = x;
        if let Some(e) = jp.align_res {
            self.b.layer(&format!("{name}.align"));
            let shift = (res.scale - e) as u32;
            let src = if shift >= res.width {
                self.b.ext(res.id, shift + 1)
            } else {
                res.id
            };
            res = Cur {
                id: self.b.requant(src, l_res, e),
                scale: e,
                ..res
            };
        }
        self.b.layer(&format!("{name}.add"));
        let y = self
            .b
            .residual(main.id, res.id, jp.l_add, jp.e_add, jp.width, jp.e_out);
        self.b.layer(&format!("{name}.relu2"));
        let y = self.b.relu(y);
        self.b.layer(&format!("{name}.out"));
        let w = next.unwrap_or(RESIDUAL_BITS);
        let scale = jp.e_out - 1 - (RESIDUAL_BITS as i32 - w as i32).max(0);
        Ok(Cur {
            id: self.b.requant(y, w, scale),
            width: w,
            scale,
            shape: main.shape,
            nonneg: true,
        })
    }
}

/// Formats of one residual join.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinPlan {
    pub l_add: u32,
    pub e_add: i32,
    pub e_out: i32,
    /// Output width of the baseline join.
    pub width: u32,
    /// Scale the residual must be requantized to first, when it is too fine.
    pub align_res: Option<i32>,
}

/// Choose adder and output scales so that neither join variant can wrap:
/// main is truncated by at least one bit, the residual only shifted left.
pub fn plan_join(l_main: u32, e_main: i32, l_res: u32, e_res: i32, l_add: u32, res_nonneg: bool) -> JoinPlan {
    let l_add = l_add.min(l_main);
    let l_res_eff = l_res + u32::from(res_nonneg);
    let a_min = (l_main as i32 - l_add as i32 + 1).max(1);
    let b_max = l_add as i32 - 1 - l_res_eff as i32;
    let e_add = (e_main - a_min).min(e_res + b_max.max(1));
    let (e_out, align_res) = if e_add > e_res {
        (e_res, None)
    } else {
        (e_add - 1, Some(e_add - 1))
    };
    JoinPlan {
        l_add,
        e_add,
        e_out,
        width: if l_main > l_add { l_main } else { l_add + 1 },
        align_res,
    }
}

/// Named desk-scale descriptions.
pub fn preset(name: &str) -> Result<NetworkDesc> {
    let conv = |name: &str, k: usize| LayerDesc::Conv {
        name: name.into(),
        k,
        r: 3,
        stride: 1,
        pad: None,
        quant: QuantOverride::default(),
    };
    let d = match name {
        "resnet32-block" => NetworkDesc {
            schema_version: NETWORK_SCHEMA_VERSION,
            name: name.into(),
            seed: 32,
            input: InputDesc {
                c: 64,
                h: 8,
                w: 8,
                bits: 8,
                scale_exp: 4,
                nonneg: true,
            },
            defaults: Defaults::default(),
            layers: vec![LayerDesc::Residual {
                name: "block".into(),
                quant: QuantOverride::default(),
            }],
        },
        "minionn-toy" => NetworkDesc {
            schema_version: NETWORK_SCHEMA_VERSION,
            name: name.into(),
            seed: 7,
            input: InputDesc {
                c: 3,
                h: 8,
                w: 8,
                bits: 8,
                scale_exp: 4,
                nonneg: true,
            },
            defaults: Defaults {
                l_a: 4,
                ..Defaults::default()
            },
            layers: vec![
                conv("conv1", 8),
                LayerDesc::Relu,
                conv("conv2", 8),
                LayerDesc::Relu,
                LayerDesc::Conv {
                    name: "down".into(),
                    k: 16,
                    r: 3,
                    stride: 2,
                    pad: Some(1),
                    quant: QuantOverride::default(),
                },
                LayerDesc::Relu,
                LayerDesc::Fc {
                    name: "fc".into(),
                    k: 10,
                    quant: QuantOverride::default(),
                },
            ],
        },
        _ => return Err(Error::InvalidConfig(format!("unknown preset {name:?}"))),
    };
    d.validate()?;
    Ok(d)
}

/// Reference convolution shapes `(H, W, C, K)` for single-layer benchmarks.
pub const BENCH_DIMS: [(usize, usize, usize, usize); 4] =
    [(32, 32, 16, 32), (16, 16, 32, 64), (56, 56, 64, 64), (28, 28, 128, 128)];

/// A single-convolution description whose input is a post-ReLU activation at `l_a` bits.
pub fn single_conv(h: usize, w: usize, c: usize, k: usize, q: LayerQuant, seed: u64) -> Result<NetworkDesc> {
    let d = NetworkDesc {
        schema_version: NETWORK_SCHEMA_VERSION,
        name: format!("conv-{h}x{w}x{c}x{k}"),
        seed,
        input: InputDesc {
            c,
            h,
            w,
            bits: q.l_a,
            scale_exp: 4,
            nonneg: true,
        },
        defaults: Defaults {
            l_w: q.l_w,
            l_a: q.l_a,
            m: q.m,
            codebook: q.codebook,
            winograd: q.winograd,
            ..Defaults::default()
        },
        layers: vec![LayerDesc::Conv {
            name: "conv".into(),
            k,
            r: 3,
            stride: 1,
            pad: None,
            quant: QuantOverride::default(),
        }],
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphopt::{simplify_check, TensorInfo};
    use proptest::prelude::*;

    const TOY: &str = r#"
schema_version = 1
name = "toy"
seed = 11

[input]
c = 2
h = 6
w = 6
nonneg = true

[defaults]
l_w = 2
l_a = 4

[[layers]]
op = "conv"
name = "c1"
k = 4

[[layers]]
op = "relu"

[[layers]]
op = "residual"
name = "b1"
l_w = 3

[[layers]]
op = "fc"
name = "fc"
k = 3
l_a = 6
"#;

    #[test]
    fn toml_parses_and_round_trips() {
        let d = NetworkDesc::from_toml(TOY).unwrap();
        assert_eq!(d.layers.len(), 4);
        let names: Vec<String> = d.gemm_layers().unwrap().into_iter().map(|l| l.name).collect();
        assert_eq!(names, ["c1", "b1.conv1", "b1.conv2", "fc"]);
        let again = NetworkDesc::from_toml(&d.to_toml().unwrap()).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn toml_errors_are_reported() {
        assert!(matches!(
            NetworkDesc::from_toml(&TOY.replace("schema_version = 1", "schema_version = 2")),
            Err(Error::SchemaVersion { found: 2, .. })
        ));
        assert!(NetworkDesc::from_toml(&TOY.replace("schema_version = 1", "")).is_err());
        assert!(NetworkDesc::from_toml(&TOY.replace("c = 2", "c = 0")).is_err());
        assert!(NetworkDesc::from_toml(&TOY.replace("name = \"fc\"", "name = \"c1\"")).is_err());
        assert!(NetworkDesc::from_toml(&TOY.replace("l_a = 4", "l_a = 40")).is_err());
        assert!(NetworkDesc::from_toml("not toml [").is_err());
    }

    #[test]
    fn presets_build_and_chain_shapes() {
        for name in ["resnet32-block", "minionn-toy"] {
            let d = preset(name).unwrap();
            for mode in [BuildMode::AsDescribed, BuildMode::Uniform { l_w: 8, l_a: 8 }] {
                let g = d.build_graph(&mode).unwrap();
                g.analyze().unwrap();
            }
        }
        assert!(preset("nope").is_err());
        let d = preset("resnet32-block").unwrap();
        let g = d.build_graph(&BuildMode::AsDescribed).unwrap();
        let infos = g.analyze().unwrap();
        assert_eq!(infos[g.output_node().unwrap()].shape, vec![64, 8, 8]);
    }

    #[test]
    fn winograd_only_where_stride_one_and_r_three() {
        let d = preset("minionn-toy").unwrap();
        let layers = d.gemm_layers().unwrap();
        let wino: Vec<bool> = layers.iter().map(|l| l.quant.winograd).collect();
        assert_eq!(wino, [true, true, false, false]);
    }

    #[test]
    fn weights_are_seeded() {
        assert_eq!(synth_weights(1, 0, 2, 2, 3), synth_weights(1, 0, 2, 2, 3));
        assert_ne!(synth_weights(1, 0, 2, 2, 3), synth_weights(1, 1, 2, 2, 3));
        let d = NetworkDesc::from_toml(TOY).unwrap();
        assert_eq!(d.sample_input(3).unwrap(), d.sample_input(3).unwrap());
        assert!(d.sample_input(3).unwrap().signed_values().iter().all(|&v| (0..128).contains(&v)));
    }

    #[test]
    fn direct_weights_fit_the_codebook() {
        let w = synth_weights(5, 0, 4, 3, 3);
        for cb in [Codebook::standard(3).unwrap(), Codebook::reweighted(3).unwrap()] {
            let g = direct_weights(&w, 4, &cb).unwrap();
            let p = &g.planes[0];
            assert_eq!((p.rows, p.cols), (4, 27));
            let max = w.iter().fold(0f64, |a, v| a.max(v.abs())) * 2f64.powi(g.scale_exp);
            assert!(max <= cb.max_magnitude() as f64 && 2.0 * max > cb.max_magnitude() as f64);
        }
    }

    fn info(width: u32, scale: i32, nonneg: bool) -> TensorInfo {
        TensorInfo {
            shape: vec![4],
            meta: BitWidthMeta::new(width, scale).unwrap().with_nonneg(nonneg),
            msb_bound: None,
        }
    }

    proptest! {
        #[test]
        fn join_plans_admit_simplification(
            l_main in 12u32..28,
            e_main in -4i32..12,
            e_res in -6i32..8,
            nonneg in any::<bool>(),
        ) {
            let jp = plan_join(l_main, e_main, 8, e_res, 16, nonneg);
            let e_r = jp.align_res.unwrap_or(e_res);
            prop_assert!(e_r >= jp.e_out || jp.align_res.is_none());
            prop_assert!(jp.e_add < e_main && jp.e_out < jp.e_add && jp.e_out >= e_r);
            prop_assert!(jp.width > jp.l_add || jp.width == l_main);
            let main = info(l_main, e_main, false);
            let res = info(8, e_r, nonneg);
            prop_assert_eq!(simplify_check(&main, &res, jp.l_add, jp.e_add, jp.e_out), Ok(()));
        }
    }
}
