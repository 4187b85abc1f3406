//! Central finite-difference gradient checking.
//!
//! The analytic side runs the graph in `f32`; the numeric side rebuilds the
//! same graph in `f64` and differentiates only through `forward`, so it never
//! touches the backward rules it is checking.

use std::collections::BTreeMap;

use serde::Serialize;

use super::graph::{Bindings, Gradients, Graph, NodeId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Something that can lay out the same scalar-valued graph at any precision.
pub trait GraphBuilder {
    fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId>;
}

/// Input values for a gradient check, held in `f64` and cast as needed.
#[derive(Clone, Debug, Default)]
pub struct Feed {
    pub reals: BTreeMap<String, Tensor<f64>>,
    pub indices: BTreeMap<String, Vec<usize>>,
}

impl Feed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn real(mut self, name: &str, t: Tensor<f64>) -> Self {
        self.reals.insert(name.to_string(), t);
        self
    }

    pub fn index(mut self, name: &str, ids: Vec<usize>) -> Self {
        self.indices.insert(name.to_string(), ids);
        self
    }

    fn cast<R: Real>(&self) -> BTreeMap<String, Tensor<R>> {
        self.reals
            .iter()
            .map(|(k, v)| (k.clone(), v.cast::<R>()))
            .collect()
    }
}

fn bind<'a, R: Real>(
    reals: &'a BTreeMap<String, Tensor<R>>,
    indices: &'a BTreeMap<String, Vec<usize>>,
) -> Bindings<'a, R> {
    let mut b = Bindings::new();
    for (k, v) in reals {
        b.tensor(k.clone(), v);
    }
    for (k, v) in indices {
        b.indices(k.clone(), v);
    }
    b
}

/// Value and gradients of the builder's scalar output, computed in `f32`.
pub fn analytic_gradients<B: GraphBuilder>(builder: &B, feed: &Feed) -> Result<(f32, Gradients<f32>)> {
    let mut g = Graph::<f32>::new();
    let out = builder.build(&mut g)?;
    let reals = feed.cast::<f32>();
    g.forward(&bind(&reals, &feed.indices))?;
    let value = g.scalar(out)?;
    Ok((value, g.backward(out)?))
}

/// Scalar output evaluated in `f64`.
pub fn evaluate_f64<B: GraphBuilder>(builder: &B, feed: &Feed) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let out = builder.build(&mut g)?;
    g.forward(&bind(&feed.reals, &feed.indices))?;
    g.scalar(out)
}

/// Central differences in `f64` with step `h = 1e-4 · (1 + |x|)` for each
/// element of each named input.
pub fn numeric_gradients<B: GraphBuilder>(
    builder: &B,
    feed: &Feed,
    names: &[String],
) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut g = Graph::<f64>::new();
    let out = builder.build(&mut g)?;
    let mut reals = feed.reals.clone();
    let mut result = BTreeMap::new();
    for name in names {
        let base = reals
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Graph(format!("no value bound for {name:?}")))?;
        let mut grad = Tensor::<f64>::zeros(base.shape().to_vec());
        for i in 0..base.len() {
            let x = base.data()[i];
            let h = 1e-4 * (1.0 + x.abs());
            let mut eval_at = |v: f64| -> Result<f64> {
                reals.get_mut(name).expect("present").data_mut()[i] = v;
                g.forward(&bind(&reals, &feed.indices))?;
                g.scalar(out)
            };
            let plus = eval_at(x + h)?;
            let minus = eval_at(x - h)?;
            eval_at(x)?;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        result.insert(name.clone(), grad);
    }
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to float noise compare in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn compare(
    analytic: &Gradients<f32>,
    numeric: &BTreeMap<String, Tensor<f64>>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut params = Vec::new();
    for (name, num) in numeric {
        let ana = analytic
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no analytic gradient for {name:?}")))?;
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (a, n)) in ana.data().iter().zip(num.data()).enumerate() {
            let e = relative_error(*a as f64, *n);
            if e > worst.max_rel_error || i == 0 {
                worst.max_rel_error = e;
                worst.worst_index = i;
                worst.analytic = *a as f64;
                worst.numeric = *n;
            }
        }
        params.push(worst);
    }
    let passed = params.iter().all(|p| p.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        tolerance,
        params,
        passed,
    })
}

/// Checks every `requires_grad` input of the builder's graph.
pub fn grad_check<B: GraphBuilder>(builder: &B, feed: &Feed, tolerance: f64) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(builder, feed)?;
    let names: Vec<String> = analytic.keys().cloned().collect();
    let numeric = numeric_gradients(builder, feed, &names)?;
    compare(&analytic, &numeric, tolerance)
}

/// Checks only the named inputs (for graphs with many parameters).
pub fn grad_check_params<B: GraphBuilder>(
    builder: &B,
    feed: &Feed,
    names: &[String],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(builder, feed)?;
    let numeric = numeric_gradients(builder, feed, names)?;
    compare(&analytic, &numeric, tolerance)
}
