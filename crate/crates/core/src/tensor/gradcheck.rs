use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamValues, ShadowParams};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Coordinates probed per parameter; `None` probes all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
    /// When a stencil crosses a kink, retry with the step divided by 10 up
    /// to this many times before skipping the coordinate.
    pub refinements: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_param: Some(8),
            seed: 0,
            refinements: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the stencil crossed a relu or clamp kink.
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares reverse-mode gradients with central differences in f64.
///
/// `build` records the forward pass for the given parameter values and
/// returns the scalar loss node.
pub fn check_gradients<E>(
    params: &ShadowParams<f64>,
    cfg: &GradCheckConfig,
    mut build: impl FnMut(&ShadowParams<f64>) -> Result<(Graph<f64>, NodeId), E>,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
{
    let (graph, loss) = build(params)?;
    let base_kinks = graph.kink_signature();
    let grads = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();

    for id in params.ids() {
        let n = params.value(id).len();
        let indices: Vec<usize> = match cfg.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for index in indices {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
            let original = probe.value(id).data()[index];

            let mut numeric = None;
            let mut step = cfg.step;
            for _ in 0..=cfg.refinements {
                probe.value_mut(id).data_mut()[index] = original + step;
                let (gp, lp) = build(&probe)?;
                let plus = gp.value(lp).item();
                let plus_kinks = gp.kink_signature();

                probe.value_mut(id).data_mut()[index] = original - step;
                let (gm, lm) = build(&probe)?;
                let minus = gm.value(lm).item();
                let minus_kinks = gm.kink_signature();

                probe.value_mut(id).data_mut()[index] = original;
                if plus_kinks == base_kinks && minus_kinks == base_kinks {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let rel = relative_error(analytic, numeric, cfg.floor);
            report.checked += 1;
            report.max_relative_error = report.max_relative_error.max(rel);
            if rel > cfg.tolerance || !rel.is_finite() {
                report.mismatches.push(GradMismatch {
                    param: id,
                    index,
                    analytic,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}
