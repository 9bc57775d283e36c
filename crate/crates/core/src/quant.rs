//! Plaintext quantization: per-tensor quantizer, outlier test, standard and
//! re-weighted codebooks, the perturbation metric and the bit-width ILP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_OUTLIER_TAU: f64 = 6.0;

/// Importance set over `l_w` bit planes, indexed by bit position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub importance: Vec<u64>,
}

impl Codebook {
    pub fn standard(l_w: u32) -> Result<Self> {
        if !(1..=16).contains(&l_w) {
            return Err(Error::InvalidConfig(format!("weight width {l_w} outside [1, 16]")));
        }
        Ok(Self {
            importance: (0..l_w).map(|b| 1u64 << b).collect(),
        })
    }

    /// `{2^l_w, 2^(l_w-2), …, 2, 1}`: the top plane doubles, the count stays `l_w`.
    pub fn reweighted(l_w: u32) -> Result<Self> {
        if !(2..=16).contains(&l_w) {
            return Err(Error::InvalidConfig(format!(
                "re-weighting needs 2 <= l_w <= 16, got {l_w}"
            )));
        }
        let mut importance: Vec<u64> = (0..l_w - 1).map(|b| 1u64 << b).collect();
        importance.push(1u64 << l_w);
        Ok(Self { importance })
    }

    pub fn l_w(&self) -> u32 {
        self.importance.len() as u32
    }

    pub fn is_standard(&self) -> bool {
        self.importance
            .iter()
            .enumerate()
            .all(|(b, &w)| w == 1u64 << b)
    }

    /// `2^l_w − 1`.
    pub fn normalizer(&self) -> f64 {
        ((1u64 << self.l_w()) - 1) as f64
    }

    /// Importance set from the most significant plane down.
    pub fn descending(&self) -> Vec<u64> {
        self.importance.iter().rev().copied().collect()
    }

    pub fn magnitude(&self, code: u64) -> u64 {
        self.importance
            .iter()
            .enumerate()
            .filter(|(b, _)| code >> b & 1 == 1)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn max_magnitude(&self) -> u64 {
        self.importance.iter().sum()
    }

    /// Distinct representable magnitudes, ascending.
    pub fn representable(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (0..1u64 << self.l_w()).map(|c| self.magnitude(c)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Code whose magnitude is nearest to `target`; ties go to the smaller magnitude.
    pub fn nearest_code(&self, target: f64) -> u64 {
        let mut best = (f64::INFINITY, u64::MAX, 0u64);
        for code in 0..1u64 << self.l_w() {
            let mag = self.magnitude(code);
            let d = (target - mag as f64).abs();
            if d < best.0 || (d == best.0 && mag < best.1) {
                best = (d, mag, code);
            }
        }
        best.2
    }
}

/// Standard codebook re-weighted; errors for `l_w < 2`.
pub fn reweight_bits(l_w: u32) -> Result<Codebook> {
    Codebook::reweighted(l_w)
}

/// `clamp(round(x · 2^scale_exp), −2^(l−1), 2^(l−1) − 1)`, rounding half away from zero.
pub fn quantize_per_tensor(x: &[f64], l: u32, scale_exp: i32) -> Result<Vec<i64>> {
    if !(1..=16).contains(&l) {
        return Err(Error::InvalidConfig(format!("plaintext quantizer width {l} outside [1, 16]")));
    }
    let lo = -(1i64 << (l - 1));
    let hi = (1i64 << (l - 1)) - 1;
    let s = 2f64.powi(scale_exp);
    Ok(x
        .iter()
        .map(|&v| ((v * s).round() as i64).clamp(lo, hi))
        .collect())
}

fn mean_std(w: &[f64]) -> (f64, f64) {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(max − mean) / std > tau`; degenerate tensors report no outlier.
pub fn detect_outlier(w: &[f64], tau: f64) -> bool {
    if w.is_empty() {
        return false;
    }
    let (mean, std) = mean_std(w);
    if std <= 0.0 || !std.is_finite() {
        return false;
    }
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max - mean) / std > tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedWeight {
    pub code: u64,
    pub negative: bool,
}

/// Nearest codeword to `|w_f|·(2^l_w − 1)/s`.
pub fn quantize_reweighted(w_f: f64, s: f64, cb: &Codebook) -> QuantizedWeight {
    if s <= 0.0 || w_f == 0.0 {
        return QuantizedWeight { code: 0, negative: false };
    }
    let target = w_f.abs() * cb.normalizer() / s;
    let code = cb.nearest_code(target);
    QuantizedWeight {
        code,
        negative: w_f < 0.0 && code != 0,
    }
}

/// `s · codeword / (2^l_w − 1)` with the sign applied.
pub fn dequantize(q: QuantizedWeight, s: f64, cb: &Codebook) -> f64 {
    let v = s * cb.magnitude(q.code) as f64 / cb.normalizer();
    if q.negative {
        -v
    } else {
        v
    }
}

/// Scale that maps the largest magnitude onto the top codeword.
pub fn max_abs_scale(w: &[f64], cb: &Codebook) -> f64 {
    let max = w.iter().fold(0f64, |m, v| m.max(v.abs()));
    max * cb.normalizer() / cb.max_magnitude() as f64
}

/// Quantize then dequantize every entry with max-abs calibration.
pub fn fake_quantize(w: &[f64], cb: &Codebook) -> Vec<f64> {
    let s = max_abs_scale(w, cb);
    w.iter()
        .map(|&v| dequantize(quantize_reweighted(v, s, cb), s, cb))
        .collect()
}

pub fn quantization_mse(w: &[f64], cb: &Codebook) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let q = fake_quantize(w, cb);
    w.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / w.len() as f64
}

/// `∂L/∂w^(b) = 𝔹[b] / (2^l_w − 1) · ∂L/∂w_q`.
pub fn grad_reweighted(upstream: f64, b: usize, cb: &Codebook) -> Result<f64> {
    let beta = cb
        .importance
        .get(b)
        .ok_or_else(|| Error::InvalidConfig(format!("bit index {b} outside codebook")))?;
    Ok(*beta as f64 / cb.normalizer() * upstream)
}

/// `G W Gᵀ` for every `r×r` kernel in `w` (length multiple of `r²`).
pub fn winograd_domain(w: &[f64], g: &[Vec<f64>]) -> Vec<f64> {
    let n = g.len();
    let r = g.first().map_or(0, |row| row.len());
    if r == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(w.len() / (r * r) * n * n);
    for k in w.chunks(r * r) {
        let mut gw = vec![0f64; n * r];
        for i in 0..n {
            for j in 0..r {
                gw[i * r + j] = (0..r).map(|t| g[i][t] * k[t * r + j]).sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                out.push((0..r).map(|t| gw[i * r + t] * g[j][t]).sum());
            }
        }
    }
    out
}

/// `Tr̄(H) · ‖Quant(GWGᵀ) − GWGᵀ‖²`. `scale` defaults to max-abs calibration.
pub fn perturbation_omega(
    hessian_trace: f64,
    w: &[f64],
    g: &[Vec<f64>],
    cb: &Codebook,
    scale: Option<f64>,
) -> f64 {
    if hessian_trace == 0.0 {
        return 0.0;
    }
    let u = winograd_domain(w, g);
    let s = scale.unwrap_or_else(|| max_abs_scale(&u, cb));
    let err: f64 = u
        .iter()
        .map(|&v| (dequantize(quantize_reweighted(v, s, cb), s, cb) - v).powi(2))
        .sum();
    hessian_trace * err
}

/// Per-layer choice table for the bit-width ILP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    /// `costs[i][j]`: communication of layer `i` under choice `j`.
    pub costs: Vec<Vec<u64>>,
    /// `omegas[i][j]`: perturbation of layer `i` under choice `j`.
    pub omegas: Vec<Vec<f64>>,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitWidthPlan {
    pub choice: Vec<usize>,
    pub objective: f64,
    pub cost: u64,
}

impl PlanProblem {
    pub fn validate(&self) -> Result<()> {
        if self.costs.len() != self.omegas.len() {
            return Err(Error::InvalidConfig("cost and perturbation tables differ in layer count".into()));
        }
        for (c, o) in self.costs.iter().zip(&self.omegas) {
            if c.is_empty() || c.len() != o.len() {
                return Err(Error::InvalidConfig("every layer needs matching, non-empty choices".into()));
            }
            if o.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidConfig("perturbations must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn min_budget(&self) -> u64 {
        self.costs.iter().map(|c| *c.iter().min().unwrap_or(&0)).sum()
    }

    fn check_feasible(&self) -> Result<()> {
        self.validate()?;
        let min_budget = self.min_budget();
        if min_budget > self.budget {
            return Err(Error::Infeasible { budget: self.budget, min_budget });
        }
        Ok(())
    }

    fn evaluate(&self, choice: &[usize]) -> (f64, u64) {
        let mut obj = 0.0;
        let mut cost = 0;
        for (i, &j) in choice.iter().enumerate() {
            obj += self.omegas[i][j];
            cost += self.costs[i][j];
        }
        (obj, cost)
    }
}

/// Exact minimum of `Σ Ω` subject to `Σ C ≤ ζ`, by depth-first branch and
/// bound. Among equal objectives the lexicographically smallest choice wins.
pub fn ilp_assign(p: &PlanProblem) -> Result<BitWidthPlan> {
    p.check_feasible()?;
    let l = p.costs.len();
    let mut min_cost_suffix = vec![0u64; l + 1];
    let mut min_omega_suffix = vec![0f64; l + 1];
    for i in (0..l).rev() {
        min_cost_suffix[i] = min_cost_suffix[i + 1] + p.costs[i].iter().min().unwrap();
        min_omega_suffix[i] =
            min_omega_suffix[i + 1] + p.omegas[i].iter().cloned().fold(f64::INFINITY, f64::min);
    }

    struct Search<'a> {
        p: &'a PlanProblem,
        min_cost_suffix: Vec<u64>,
        min_omega_suffix: Vec<f64>,
        stack: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, i: usize, cost: u64, obj: f64) {
            if i == self.p.costs.len() {
                let (total, _) = self.p.evaluate(&self.stack);
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.stack.clone()));
                }
                return;
            }
            for j in 0..self.p.costs[i].len() {
                let c = cost + self.p.costs[i][j];
                if c + self.min_cost_suffix[i + 1] > self.p.budget {
                    continue;
                }
                let o = obj + self.p.omegas[i][j];
                if let Some((b, _)) = &self.best {
                    let bound = o + self.min_omega_suffix[i + 1];
                    if bound - 1e-9 * bound.abs() > *b {
                        continue;
                    }
                }
                self.stack.push(j);
                self.visit(i + 1, c, o);
                self.stack.pop();
            }
        }
    }

    let mut s = Search {
        p,
        min_cost_suffix,
        min_omega_suffix,
        stack: Vec::with_capacity(l),
        best: None,
    };
    s.visit(0, 0, 0.0);
    let (_, choice) = s
        .best
        .ok_or_else(|| Error::Invariant("feasible problem produced no plan".into()))?;
    let (objective, cost) = p.evaluate(&choice);
    Ok(BitWidthPlan { choice, objective, cost })
}

/// Reference solver: every assignment in lexicographic order.
pub fn ilp_exhaustive(p: &PlanProblem) -> Result<BitWidthPlan> {
    p.check_feasible()?;
    let l = p.costs.len();
    let mut idx = vec![0usize; l];
    let mut best: Option<BitWidthPlan> = None;
    loop {
        let (objective, cost) = p.evaluate(&idx);
        if cost <= p.budget && best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(BitWidthPlan { choice: idx.clone(), objective, cost });
        }
        let mut k = l;
        loop {
            if k == 0 {
                return best.ok_or_else(|| Error::Invariant("feasible problem produced no plan".into()));
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < p.costs[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn per_tensor_examples() {
        assert_eq!(quantize_per_tensor(&[0.5], 4, 3).unwrap(), vec![4]);
        assert_eq!(quantize_per_tensor(&[10.0], 4, 0).unwrap(), vec![7]);
        assert_eq!(quantize_per_tensor(&[-10.0], 4, 0).unwrap(), vec![-8]);
        assert_eq!(quantize_per_tensor(&[2.5, -2.5], 8, 0).unwrap(), vec![3, -3]);
        assert!(quantize_per_tensor(&[0.0], 17, 0).is_err());
    }

    #[test]
    fn outlier_examples() {
        assert!(!detect_outlier(&[1.5; 64], 6.0));
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut w: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
        assert!(!detect_outlier(&w, 6.0));
        let (mean, std) = mean_std(&w);
        w.push(mean + 10.0 * std);
        assert!(detect_outlier(&w, 6.0));
    }

    #[test]
    fn reweighted_codebooks() {
        let cb = reweight_bits(4).unwrap();
        assert_eq!(cb.descending(), vec![16, 4, 2, 1]);
        assert_eq!(cb.max_magnitude(), 23);
        assert_eq!(Codebook::standard(4).unwrap().max_magnitude(), 15);
        let cb2 = reweight_bits(2).unwrap();
        assert_eq!(cb2.representable(), vec![0, 1, 4, 5]);
        assert!(reweight_bits(1).is_err());
        for l in 2..=8 {
            let s = Codebook::standard(l).unwrap();
            let r = reweight_bits(l).unwrap();
            assert_eq!(s.l_w(), r.l_w());
            assert!(r.representable().len() <= 1 << l);
            assert!(r.max_magnitude() > s.max_magnitude());
            assert_eq!(r.max_magnitude(), (1 << l) + (1 << (l - 1)) - 1);
        }
    }

    #[test]
    fn quantize_examples() {
        let std4 = Codebook::standard(4).unwrap();
        assert_eq!(quantize_reweighted(0.0, 1.0, &std4).code, 0);
        assert_eq!(quantize_reweighted(1.0, 1.0, &std4).code, 0b1111);
        let rw = reweight_bits(4).unwrap();
        let q = quantize_reweighted(18.0 / 15.0, 1.0, &rw);
        assert_eq!(rw.magnitude(q.code), 18);
        assert_eq!(q.code, (1 << 3) | (1 << 1));
    }

    #[test]
    fn nearest_code_is_global_optimum() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for l in 1..=6u32 {
            for cb in [Codebook::standard(l).unwrap(), reweight_bits(l.max(2)).unwrap()] {
                let mags = cb.representable();
                for _ in 0..200 {
                    let t = rng.gen_range(-2.0..cb.max_magnitude() as f64 + 3.0);
                    let got = cb.magnitude(cb.nearest_code(t));
                    let best = mags
                        .iter()
                        .map(|&m| (t - m as f64).abs())
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!((t - got as f64).abs(), best);
                }
            }
        }
    }

    #[test]
    fn tie_goes_to_smaller_codeword() {
        let cb = Codebook::standard(2).unwrap();
        assert_eq!(cb.magnitude(cb.nearest_code(1.5)), 1);
    }

    #[test]
    fn grad_examples() {
        let cb = Codebook::standard(4).unwrap();
        assert!((grad_reweighted(1.0, 3, &cb).unwrap() - 8.0 / 15.0).abs() < 1e-15);
        assert_eq!(grad_reweighted(0.0, 3, &cb).unwrap(), 0.0);
        let rw = reweight_bits(4).unwrap();
        assert!((grad_reweighted(1.0, 3, &rw).unwrap() - 16.0 / 15.0).abs() < 1e-15);
        assert!(grad_reweighted(1.0, 4, &cb).is_err());
    }

    fn g23() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.5],
            vec![0.5, -0.5, 0.5],
            vec![0.0, 0.0, 1.0],
        ]
    }

    #[test]
    fn omega_examples() {
        let cb = Codebook::standard(4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..9 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(perturbation_omega(0.0, &w, &g23(), &cb, None), 0.0);
        // Centre impulse: every nonzero entry of GWGᵀ is ±1/4, the top codeword.
        let mut imp = vec![0.0; 9];
        imp[4] = 1.0;
        assert_eq!(perturbation_omega(3.0, &imp, &g23(), &cb, None), 0.0);

        let mut prev = f64::INFINITY;
        for l in [2, 4, 8] {
            let om = perturbation_omega(1.0, &w, &g23(), &Codebook::standard(l).unwrap(), None);
            assert!(om <= prev);
            prev = om;
        }
    }

    fn random_problem(rng: &mut ChaCha20Rng, l: usize, k: usize) -> PlanProblem {
        let costs: Vec<Vec<u64>> = (0..l)
            .map(|_| {
                let mut c: Vec<u64> = (0..k).map(|_| rng.gen_range(1..100)).collect();
                c.sort_unstable();
                c
            })
            .collect();
        let omegas: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                let mut o: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
                o.sort_by(|a, b| b.partial_cmp(a).unwrap());
                o
            })
            .collect();
        let lo: u64 = costs.iter().map(|c| c[0]).sum();
        let hi: u64 = costs.iter().map(|c| c[k - 1]).sum();
        PlanProblem { costs, omegas, budget: rng.gen_range(lo..=hi) }
    }

    #[test]
    fn ilp_examples() {
        let p = PlanProblem {
            costs: vec![vec![1, 2, 3]],
            omegas: vec![vec![3.0, 1.0, 2.0]],
            budget: 10,
        };
        assert_eq!(ilp_assign(&p).unwrap().choice, vec![1]);

        let p = PlanProblem {
            costs: vec![vec![5, 1, 9], vec![4, 2]],
            omegas: vec![vec![0.0, 5.0, 0.0], vec![0.0, 5.0]],
            budget: 3,
        };
        assert_eq!(ilp_assign(&p).unwrap().choice, vec![1, 1]);

        let p = PlanProblem { budget: 2, ..p };
        assert_eq!(ilp_assign(&p), Err(Error::Infeasible { budget: 2, min_budget: 3 }));
    }

    #[test]
    fn ilp_tie_breaks_lexicographically() {
        let p = PlanProblem {
            costs: vec![vec![1, 1], vec![1, 1]],
            omegas: vec![vec![1.0, 1.0], vec![2.0, 2.0]],
            budget: 4,
        };
        assert_eq!(ilp_assign(&p).unwrap().choice, vec![0, 0]);
        assert_eq!(ilp_exhaustive(&p).unwrap().choice, vec![0, 0]);
    }

    #[test]
    fn ilp_matches_exhaustive() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let l = rng.gen_range(1..=5);
            let p = random_problem(&mut rng, l, 3);
            let a = ilp_assign(&p).unwrap();
            let b = ilp_exhaustive(&p).unwrap();
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.choice, b.choice);
            assert!(a.cost <= p.budget);
        }
    }

    proptest! {
        #[test]
        fn grad_is_linear(u in -1e6f64..1e6, a in -100f64..100.0, b in 0usize..4) {
            let cb = Codebook::standard(4).unwrap();
            let lhs = grad_reweighted(a * u, b, &cb).unwrap();
            let rhs = a * grad_reweighted(u, b, &cb).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn plan_respects_budget(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 4, 3);
            let plan = ilp_assign(&p).unwrap();
            prop_assert_eq!(plan.choice.len(), 4);
            prop_assert!(plan.cost <= p.budget);
        }
    }
}
