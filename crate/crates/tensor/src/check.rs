//! Central finite-difference gradient checking in 64-bit precision.

use crate::graph::{Graph, NodeId};

/// Step and tolerances for [`gradient_check`]. An element passes when its
/// absolute error is within `abs_tol` or its relative error within `rel_tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub elements: usize,
    pub failures: usize,
    /// Largest relative error among elements whose absolute error exceeds
    /// `abs_tol`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compare the analytic gradient of a scalar function of `inputs` against
/// central differences. `build` must be deterministic and return a scalar.
pub fn gradient_check<B>(inputs: &[(Vec<f64>, Vec<usize>)], build: B, cfg: CheckConfig) -> CheckReport
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().zip(inputs).map(|(v, (_, s))| g.input(v.clone(), s)).collect();
        let root = build(&mut g, &ids);
        g.scalar(root)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(v, s)| g.variable(v.clone(), s)).collect();
    let root = build(&mut g, &ids);
    g.backward(root).expect("gradient check root must be scalar");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (v, _))| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut report = CheckReport {
        elements: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for t in 0..values.len() {
        for i in 0..values[t].len() {
            let orig = values[t][i];
            values[t][i] = orig + cfg.h;
            let plus = eval(&values);
            values[t][i] = orig - cfg.h;
            let minus = eval(&values);
            values[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[t][i];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.elements += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if rel_err > cfg.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    report
}

/// Deterministic values in (-1, 1) for check inputs.
fn fill(seed: u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233;
            (t.sin() * 43_758.545_3).fract()
        })
        .collect()
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<(Vec<f64>, Vec<usize>)> {
    shapes
        .iter()
        .enumerate()
        .map(|(k, s)| (fill(seed * 31 + k as u64, s.iter().product()), s.to_vec()))
        .collect()
}

/// Reduce a tensor to a scalar with fixed weights so every element carries
/// a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let w = g.input(fill(seed, g.value(x).len()), &shape);
    let p = g.mul(x, w);
    g.sum(p)
}

/// Finite-difference check of every differentiable primitive, plus a small
/// three-layer composition.
pub fn primitive_suite(cfg: CheckConfig) -> Vec<(&'static str, CheckReport)> {
    let bits = |seed: u64, n: usize| -> Vec<f64> { fill(seed, n).iter().map(|v| f64::from(u8::from(*v > 0.0))).collect() };
    let bce_targets = bits(90, 12);
    let bce_mask: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
    vec![
        (
            "matmul",
            gradient_check(&inputs(1, &[&[3, 4], &[4, 5]]), |g, x| {
                let y = g.matmul(x[0], x[1]);
                project(g, y, 10)
            }, cfg),
        ),
        (
            "add/sub/mul/scale",
            gradient_check(&inputs(2, &[&[2, 3], &[2, 3]]), |g, x| {
                let a = g.add(x[0], x[1]);
                let b = g.sub(a, x[1]);
                let c = g.mul(b, x[1]);
                let d = g.scale(c, 0.37);
                project(g, d, 11)
            }, cfg),
        ),
        (
            "add_row",
            gradient_check(&inputs(3, &[&[4, 3], &[3]]), |g, x| {
                let y = g.add_row(x[0], x[1]);
                project(g, y, 12)
            }, cfg),
        ),
        (
            "sigmoid/swish",
            gradient_check(&inputs(4, &[&[3, 3]]), |g, x| {
                let s = g.sigmoid(x[0]);
                let w = g.swish(s);
                let v = g.swish(x[0]);
                let y = g.add(w, v);
                project(g, y, 13)
            }, cfg),
        ),
        (
            "softmax_rows",
            gradient_check(&inputs(5, &[&[3, 5]]), |g, x| {
                let y = g.softmax_rows(x[0]);
                project(g, y, 14)
            }, cfg),
        ),
        (
            "rmsnorm",
            gradient_check(&inputs(6, &[&[3, 6], &[6]]), |g, x| {
                let y = g.rmsnorm(x[0], x[1], 1e-6);
                project(g, y, 15)
            }, cfg),
        ),
        (
            "rope",
            gradient_check(&inputs(7, &[&[4, 8]]), |g, x| {
                let y = g.rope(x[0], &[0, 1, 5, 17], 4, 10_000.0);
                project(g, y, 16)
            }, cfg),
        ),
        (
            "causal_attention",
            gradient_check(&inputs(8, &[&[6, 8], &[6, 8], &[6, 8]]), |g, x| {
                let y = g.causal_attention(x[0], x[1], x[2], 2, 3, 2);
                project(g, y, 17)
            }, cfg),
        ),
        (
            "prefix_attention",
            gradient_check(&inputs(9, &[&[3, 4], &[3, 4], &[3, 4], &[5, 4], &[5, 4]]), |g, x| {
                let y = g.prefix_attention(x[0], x[1], x[2], x[3], x[4], &[(0, 0), (0, 3), (2, 3)], 2);
                project(g, y, 18)
            }, cfg),
        ),
        (
            "slice_cols/gather_rows/concat_rows",
            gradient_check(&inputs(10, &[&[4, 5], &[2, 3]]), |g, x| {
                let s = g.slice_cols(x[0], 1, 3);
                let r = g.gather_rows(s, &[3, 0, 3]);
                let c = g.concat_rows(&[r, x[1]]);
                project(g, c, 19)
            }, cfg),
        ),
        (
            "sum/mean",
            gradient_check(&inputs(11, &[&[3, 4]]), |g, x| {
                let sq = g.mul(x[0], x[0]);
                let m = g.mean(sq);
                let s = g.sum(x[0]);
                g.add(m, s)
            }, cfg),
        ),
        (
            "bce_with_logits",
            gradient_check(&inputs(12, &[&[3, 4]]), |g, x| {
                let s = g.scale(x[0], 3.0);
                g.bce_with_logits(s, bce_targets.clone(), bce_mask.clone())
            }, cfg),
        ),
        (
            "softmax_cross_entropy",
            gradient_check(&inputs(13, &[&[4, 3]]), |g, x| g.softmax_cross_entropy(x[0], &[0, 2, 1, 2]), cfg),
        ),
        (
            "binary_nll",
            gradient_check(&inputs(14, &[&[5]]), |g, x| {
                let p = g.sigmoid(x[0]);
                g.binary_nll(p, vec![1.0, 0.0, 1.0, 1.0, 0.0], 1e-7, 1.0 - 1e-7)
            }, cfg),
        ),
        (
            "clamp/masked_mse",
            // Scaled into (-0.5, 0.5), strictly inside the clip range.
            gradient_check(&inputs(15, &[&[2, 3]]), |g, x| {
                let h = g.scale(x[0], 0.5);
                let c = g.clamp(h, -1.0, 1.0);
                g.masked_mse(c, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
            }, cfg),
        ),
        (
            "three-layer composition",
            gradient_check(&inputs(16, &[&[3, 4], &[4, 6], &[6], &[6, 5], &[5, 2]]), |g, x| {
                let h = g.matmul(x[0], x[1]);
                let h = g.add_row(h, x[2]);
                let h = g.sigmoid(h);
                let h = g.matmul(h, x[3]);
                let h = g.sigmoid(h);
                let h = g.matmul(h, x[4]);
                project(g, h, 20)
            }, cfg),
        ),
    ]
}
