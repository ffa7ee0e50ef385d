use super::{Graph, Matrix, NodeId, Result};

/// Outcome of comparing analytic gradients of one input block against
/// central differences.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub node: NodeId,
    pub worst_relative_error: f64,
    pub checked: usize,
    /// Entries whose ±h probe crossed a min-tie or relu kink.
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.worst_relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.worst_relative_error).fold(0.0, f64::max)
    }
}

/// Denominator floor so that near-zero gradients are compared absolutely.
const SCALE_FLOOR: f64 = 1e-6;

fn objective(graph: &Graph, output: NodeId, seed: &Matrix) -> f64 {
    graph.value(output).iter().zip(seed.iter()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of `⟨seed, output⟩` against the reverse pass,
/// for every entry of every node in `wrt`. The graph is left forwarded at
/// its original bindings.
pub fn grad_check(
    graph: &mut Graph,
    output: NodeId,
    seed: &Matrix,
    wrt: &[NodeId],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = graph.backward(&[(output, seed.clone())])?;
    let base_signature = graph.branch_signature();
    let mut blocks = Vec::with_capacity(wrt.len());

    for &node in wrt {
        let original = graph.try_value(node)?.clone();
        let grad = analytic.get(node)?;
        let mut report = BlockReport { node, worst_relative_error: 0.0, checked: 0, excluded: 0 };
        for idx in 0..original.len() {
            let (r, c) = (idx / original.ncols(), idx % original.ncols());
            let mut probe = original.clone();

            probe[[r, c]] = original[[r, c]] + h;
            graph.forward(&[(node, probe.clone())])?;
            let plus = objective(graph, output, seed);
            let kink_plus = graph.branch_signature() != base_signature;

            probe[[r, c]] = original[[r, c]] - h;
            graph.forward(&[(node, probe)])?;
            let minus = objective(graph, output, seed);
            let kink_minus = graph.branch_signature() != base_signature;

            if kink_plus || kink_minus {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let exact = grad[[r, c]];
            let rel = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(SCALE_FLOOR);
            report.worst_relative_error = report.worst_relative_error.max(rel);
            report.checked += 1;
        }
        graph.forward(&[(node, original)])?;
        blocks.push(report);
    }
    Ok(GradCheckReport { blocks, tolerance })
}
