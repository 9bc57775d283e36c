//! End-to-end scenarios behind the CLI: single-convolution benchmarks,
//! network runs with an optimization waterfall, and bit-width planning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphopt::{optimize, PassConfig, ProtocolGraph};
use crate::netsim::{CommMeter, CostModel};
use crate::network::{single_conv, BuildMode, CodebookKind, LayerQuant, NetworkDesc};
use crate::quant::{self, PlanProblem};
use crate::report::{output_checksum, PlanRow, PlanSummary, ReportDocument, StepTotal};
use crate::ring::PlainTensor;
use crate::winograd;

/// One convolution micro-benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConv {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub l_w: u32,
    pub l_a: u32,
    pub m: usize,
    pub winograd: bool,
    pub fuse: bool,
    pub msb: bool,
    pub codebook: CodebookKind,
    pub seed: u64,
    /// Skip execution and report the formula prediction only.
    pub predict_only: bool,
}

impl BenchConv {
    /// All optimizations on, `F(2,3)`, standard codebook.
    pub fn optimized(h: usize, w: usize, c: usize, k: usize, l_w: u32, l_a: u32) -> Self {
        Self {
            h,
            w,
            c,
            k,
            l_w,
            l_a,
            m: 2,
            winograd: true,
            fuse: true,
            msb: true,
            codebook: CodebookKind::Standard,
            seed: 1,
            predict_only: false,
        }
    }

    pub fn desc(&self) -> Result<NetworkDesc> {
        if [self.h, self.w, self.c, self.k].contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "dims {}x{}x{}x{} must be positive",
                self.h, self.w, self.c, self.k
            )));
        }
        let q = LayerQuant {
            l_w: self.l_w,
            l_a: self.l_a,
            m: self.m,
            winograd: self.winograd,
            codebook: self.codebook,
        };
        single_conv(self.h, self.w, self.c, self.k, q, self.seed)
    }

    pub fn passes(&self) -> PassConfig {
        PassConfig {
            decompose: self.fuse,
            fuse_ext_ext: self.fuse,
            fuse_trunc_ext: self.fuse,
            simplify_residual: false,
            msb: self.msb,
        }
    }
}

/// Build, optimize, and (unless `predict_only`) run one convolution.
pub fn bench_conv(cfg: &BenchConv, cost: CostModel) -> Result<ReportDocument> {
    cost.validate()?;
    let desc = cfg.desc()?;
    let g = desc.build_graph(&BuildMode::AsDescribed)?;
    let (g, passes) = optimize(&g, cfg.passes(), &cost)?;
    let predicted = g.predict(&cost)?;
    let mut doc = if cfg.predict_only {
        ReportDocument::from_meter(&desc.name, cfg.seed, cost, &predicted, predicted.total_bits())
    } else {
        let x = desc.sample_input(cfg.seed)?;
        let (y, meter) = g.run_metered(&x, cost, cfg.seed)?;
        check_dual_track(&meter, &predicted)?;
        let mut d = ReportDocument::from_meter(&desc.name, cfg.seed, cost, &meter, predicted.total_bits());
        d.output_checksum = Some(output_checksum(&y));
        d
    };
    doc.passes = passes;
    Ok(doc)
}

fn check_dual_track(metered: &CommMeter, predicted: &CommMeter) -> Result<()> {
    if metered != predicted {
        return Err(Error::Invariant(format!(
            "metered {} bits differ from predicted {}",
            metered.total_bits(),
            predicted.total_bits()
        )));
    }
    Ok(())
}

/// Cumulative configurations of the optimization waterfall, in order.
pub fn waterfall_steps() -> Vec<(&'static str, Option<PassConfig>)> {
    let none = PassConfig::none();
    let res = PassConfig {
        simplify_residual: true,
        ..none
    };
    let fuse = PassConfig {
        simplify_residual: true,
        ..PassConfig::fusion()
    };
    vec![
        ("w8a8-direct", None),
        ("winograd+quant", Some(none)),
        ("+residual", Some(res)),
        ("+fusion", Some(fuse)),
        ("+msb", Some(PassConfig::all())),
    ]
}

/// Options of a network run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub passes: PassConfig,
    pub mode: BuildMode,
    /// Seed of the random input (the description seed drives the weights).
    pub input_seed: u64,
    /// Also evaluate every waterfall step.
    pub waterfall: bool,
    /// Execute the waterfall steps as well as predicting them.
    pub execute_steps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            passes: PassConfig::all(),
            mode: BuildMode::AsDescribed,
            input_seed: 0,
            waterfall: false,
            execute_steps: false,
        }
    }
}

fn step_graph(desc: &NetworkDesc, step: Option<PassConfig>, cost: &CostModel) -> Result<ProtocolGraph> {
    match step {
        None => desc.build_graph(&BuildMode::Uniform { l_w: 8, l_a: 8 }),
        Some(p) => Ok(optimize(&desc.build_graph(&BuildMode::AsDescribed)?, p, cost)?.0),
    }
}

/// Build, optimize, run on a seeded input, and report.
pub fn run_network(desc: &NetworkDesc, opts: &RunOptions, cost: CostModel) -> Result<(ReportDocument, PlainTensor)> {
    cost.validate()?;
    desc.validate()?;
    let g = desc.build_graph(&opts.mode)?;
    let (g, passes) = optimize(&g, opts.passes, &cost)?;
    let x = desc.sample_input(opts.input_seed)?;
    let (y, meter) = g.run_metered(&x, cost, opts.input_seed)?;
    let predicted = g.predict(&cost)?;
    check_dual_track(&meter, &predicted)?;
    let mut doc = ReportDocument::from_meter(&desc.name, desc.seed, cost, &meter, predicted.total_bits());
    doc.passes = passes;
    doc.output_checksum = Some(output_checksum(&y));
    if opts.waterfall {
        for (name, step) in waterfall_steps() {
            let sg = step_graph(desc, step, &cost)?;
            let predicted_bits = sg.predicted_bits(&cost)?;
            let (metered_bits, output_checksum) = if opts.execute_steps {
                let (sy, m) = sg.run_metered(&x, cost, opts.input_seed)?;
                (Some(m.total_bits()), Some(crate::report::output_checksum(&sy)))
            } else {
                (None, None)
            };
            doc.steps.push(StepTotal {
                step: name.to_string(),
                predicted_bits,
                metered_bits,
                output_checksum,
            });
        }
    }
    Ok((doc, y))
}

/// Per-layer Hessian trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub name: String,
    pub hessian_trace: f64,
}

pub fn parse_sensitivities(s: &str) -> Result<Vec<Sensitivity>> {
    serde_json::from_str(s).map_err(|e| Error::Parse(format!("sensitivity file: {e}")))
}

/// Default weight-width candidates of the planner.
pub const PLAN_CHOICES: [u32; 3] = [2, 3, 4];

fn plan_mode(names: &[String], widths: &[u32]) -> BuildMode {
    BuildMode::Plan(names.iter().cloned().zip(widths.iter().copied()).collect())
}

/// Predicted bits of the nodes labelled with each name, after all passes.
pub fn layer_bits(g: &ProtocolGraph, names: &[String], cost: &CostModel) -> Result<Vec<u64>> {
    let m = g.predict(cost)?;
    Ok(names.iter().map(|n| m.layer_bits(n)).collect())
}

/// Cost and perturbation tables for the planner, one row per GEMM layer.
pub fn plan_problem(
    desc: &NetworkDesc,
    sens: &[Sensitivity],
    choices: &[u32],
    budget: u64,
    cost: &CostModel,
) -> Result<(PlanProblem, Vec<String>)> {
    if choices.is_empty() {
        return Err(Error::InvalidConfig("no bit-width choices".into()));
    }
    let layers = desc.gemm_layers()?;
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    for s in sens {
        if !names.contains(&s.name) {
            return Err(Error::InvalidConfig(format!("sensitivity for unknown layer {}", s.name)));
        }
        if !s.hessian_trace.is_finite() || s.hessian_trace < 0.0 {
            return Err(Error::InvalidConfig(format!("layer {}: bad Hessian trace", s.name)));
        }
    }
    let mut costs = vec![vec![0u64; choices.len()]; layers.len()];
    let mut omegas = vec![vec![0f64; choices.len()]; layers.len()];
    for (j, &l_w) in choices.iter().enumerate() {
        let g = desc.build_graph(&plan_mode(&names, &vec![l_w; names.len()]))?;
        let (g, _) = optimize(&g, PassConfig::all(), cost)?;
        for (i, bits) in layer_bits(&g, &names, cost)?.into_iter().enumerate() {
            costs[i][j] = bits;
        }
    }
    for (i, layer) in layers.iter().enumerate() {
        let tr = sens
            .iter()
            .find(|s| s.name == layer.name)
            .ok_or_else(|| Error::InvalidConfig(format!("no sensitivity for layer {}", layer.name)))?
            .hessian_trace;
        let g = if layer.quant.winograd {
            winograd::transform_matrices(layer.quant.m, 3)?.g
        } else {
            identity(layer.geom.r)
        };
        for (j, &l_w) in choices.iter().enumerate() {
            let cb = layer.quant.codebook.build(l_w)?;
            omegas[i][j] = quant::perturbation_omega(tr, &layer.weights, &g, &cb, None);
        }
    }
    Ok((PlanProblem { costs, omegas, budget }, names))
}

fn identity(r: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|i| (0..r).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Solve the planning ILP and describe the chosen widths.
pub fn plan_bits(desc: &NetworkDesc, sens: &[Sensitivity], budget: u64, choices: &[u32], cost: CostModel) -> Result<PlanSummary> {
    let (p, names) = plan_problem(desc, sens, choices, budget, &cost)?;
    let plan = quant::ilp_assign(&p)?;
    let layers = desc.gemm_layers()?;
    let rows = names
        .iter()
        .enumerate()
        .map(|(i, name)| PlanRow {
            name: name.clone(),
            l_w: choices[plan.choice[i]],
            l_a: layers[i].quant.l_a,
            cost_bits: p.costs[i][plan.choice[i]],
            omega: p.omegas[i][plan.choice[i]],
        })
        .collect();
    Ok(PlanSummary {
        budget,
        objective: plan.objective,
        cost_bits: plan.cost,
        layers: rows,
    })
}

/// Build mode that applies a plan.
pub fn plan_build_mode(plan: &PlanSummary) -> BuildMode {
    BuildMode::Plan(plan.layers.iter().map(|r| (r.name.clone(), r.l_w)).collect())
}

/// Metered bits of the planned layers when the network runs under `plan`.
pub fn metered_plan_bits(desc: &NetworkDesc, plan: &PlanSummary, input_seed: u64, cost: CostModel) -> Result<u64> {
    let opts = RunOptions {
        mode: plan_build_mode(plan),
        input_seed,
        ..RunOptions::default()
    };
    let g = desc.build_graph(&opts.mode)?;
    let (g, _) = optimize(&g, opts.passes, &cost)?;
    let (_, m) = g.run_metered(&desc.sample_input(input_seed)?, cost, input_seed)?;
    Ok(plan.layers.iter().map(|r| m.layer_bits(&r.name)).sum())
}

/// Communication of one `H×W×C×K` 3×3 convolution layer under the cost
/// model, with or without fusion and MSB optimization. Zero-size layers cost 0.
pub fn layer_comm_cost(dims: (usize, usize, usize, usize), l_w: u32, l_a: u32, optimized: bool, cost: &CostModel) -> Result<u64> {
    let (h, w, c, k) = dims;
    if [h, w, c, k].contains(&0) {
        return Ok(0);
    }
    let mut b = BenchConv::optimized(h, w, c, k, l_w, l_a);
    b.fuse = optimized;
    b.msb = optimized;
    b.predict_only = true;
    let g = b.desc()?.build_graph(&BuildMode::AsDescribed)?;
    let (g, _) = optimize(&g, b.passes(), cost)?;
    g.predicted_bits(cost)
}
