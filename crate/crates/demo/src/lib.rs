//! Browser demo: layer cost breakdowns, Winograd transform bounds and
//! codebook comparisons, each returned as a JSON string.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use winoshare::netsim::CostModel;
use winoshare::network::{synth_weights, CodebookKind};
use winoshare::quant::{self, Codebook};
use winoshare::scenario::{bench_conv, BenchConv};
use winoshare::winograd;

/// Predicted communication of one 3×3 convolution, split by protocol.
pub fn conv_cost_json(dims: [usize; 4], l_w: u32, l_a: u32, winograd: bool, optimized: bool, lambda: u64) -> Result<String, String> {
    let [h, w, c, k] = dims;
    let mut cfg = BenchConv::optimized(h, w, c, k, l_w, l_a);
    cfg.winograd = winograd;
    cfg.fuse = optimized;
    cfg.msb = optimized;
    cfg.predict_only = true;
    let cost = CostModel::with_lambda(lambda).map_err(|e| e.to_string())?;
    let doc = bench_conv(&cfg, cost).map_err(|e| e.to_string())?;
    let mut by_protocol: BTreeMap<String, u64> = BTreeMap::new();
    for r in &doc.rows {
        *by_protocol.entry(r.protocol.clone()).or_default() += r.bits;
    }
    Ok(json!({
        "total_bits": doc.totals.total_bits,
        "megabytes": doc.total_megabytes(),
        "offline_bits": doc.totals.offline_bits,
        "online_bits": doc.totals.online_bits,
        "rounds": doc.totals.rounds,
        "by_protocol": by_protocol,
        "latency": doc.latency,
    })
    .to_string())
}

/// Extension bits for the input and output transforms of `F(m, 3)`, with the
/// worst-case tile value for `l_x`-bit inputs.
pub fn transform_bounds_json(m: usize, l_x: u32) -> Result<String, String> {
    if !(2..=16).contains(&l_x) {
        return Err(format!("input width {l_x} outside [2, 16]"));
    }
    let ts = winograd::transform_matrices(m, 3).map_err(|e| e.to_string())?;
    let side = |mt: &[Vec<i64>]| -> Value {
        let bits = winograd::ext_bits_for_transform(mt, true);
        let (x, p) = winograd::adversarial_input(mt, l_x);
        let worst = winograd::two_sided(mt, &x)[p * mt.len() + p];
        json!({
            "row_l1_norms": winograd::row_l1_norms(mt),
            "ext_bits": bits,
            "width": l_x + bits,
            "worst_value": worst.to_string(),
            "min_bits_for_worst": min_signed_bits(worst),
        })
    };
    Ok(json!({
        "m": m,
        "tile": ts.n,
        "input_transform": side(&ts.bt),
        "output_transform": side(&ts.at),
    })
    .to_string())
}

fn min_signed_bits(v: i128) -> u32 {
    (1..=127).find(|&w| v >= -(1i128 << (w - 1)) && v < (1i128 << (w - 1))).unwrap_or(128)
}

/// Standard against re-weighted codebook on synthetic weights with a share
/// of outliers at three times the largest regular magnitude.
pub fn codebook_compare_json(l_w: u32, outlier_permille: u32, seed: u64) -> Result<String, String> {
    if outlier_permille > 1000 {
        return Err("outlier share above 1000 permille".into());
    }
    let mut w = synth_weights(seed, 0, 64, 16, 3);
    let max = w.iter().fold(0f64, |m, v| m.max(v.abs()));
    let n = w.len() * outlier_permille as usize / 1000;
    let stride = w.len().checked_div(n).unwrap_or(0);
    for i in 0..n {
        w[i * stride] = if i % 2 == 0 { 3.0 * max } else { -3.0 * max };
    }
    let describe = |kind: CodebookKind| -> Result<Value, String> {
        let cb: Codebook = kind.build(l_w).map_err(|e| e.to_string())?;
        Ok(json!({
            "importance": cb.descending(),
            "representable": cb.representable(),
            "max_magnitude": cb.max_magnitude(),
            "mse": quant::quantization_mse(&w, &cb),
        }))
    };
    Ok(json!({
        "weights": w.len(),
        "outliers": n,
        "outlier_detected": quant::detect_outlier(&w, quant::DEFAULT_OUTLIER_TAU),
        "standard": describe(CodebookKind::Standard)?,
        "reweighted": describe(CodebookKind::Reweighted)?,
    })
    .to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn conv_cost(h: usize, w: usize, c: usize, k: usize, l_w: u32, l_a: u32, winograd: bool, optimized: bool, lambda: u64) -> Result<String, JsError> {
    conv_cost_json([h, w, c, k], l_w, l_a, winograd, optimized, lambda).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn transform_bounds(m: usize, l_x: u32) -> Result<String, JsError> {
    transform_bounds_json(m, l_x).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn codebook_compare(l_w: u32, outlier_permille: u32, seed: u64) -> Result<String, JsError> {
    codebook_compare_json(l_w, outlier_permille, seed).map_err(|e| JsError::new(&e))
}
