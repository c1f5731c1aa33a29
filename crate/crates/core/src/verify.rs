//! Finite-difference gradient suite over the network's differentiable
//! components, run in 64-bit precision.
//!
//! Every component is evaluated at random points, reduced to a scalar with
//! fixed weights, and its backward pass is compared against central
//! differences for each input and each parameter it reads. Points are
//! redrawn while any relu, max, clamp or sampler input sits near a kink.

use std::cell::RefCell;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{self, HaaModel, ModelConfig, Variant};
use crate::nn::{self, Activation, ParamStore, PoolKind, Session};
use crate::rng;
use crate::tensor::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_EPS, KINK_MARGIN};
use crate::tensor::{Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 20;
const MAX_DRAWS: usize = 200;
/// Gradient multiplier used by the fault-injection fixture.
const FAULT_FACTOR: f64 = 1.5;

type Build = fn(&mut Session<f64>, &[Var]) -> Result<Var>;
type Sample = fn(&mut ChaCha8Rng) -> Fixture;

/// Checked inputs plus the parameters a component reads.
struct Fixture {
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
}

struct Component {
    name: &'static str,
    sample: Sample,
    build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub points: usize,
    /// Checked coordinates per point, inputs and parameters together.
    pub coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Names of all checked components, in table order.
pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|c| c.name).collect()
}

/// Runs every component at `points` random points.
///
/// `fault` names a component whose backward pass is deliberately scaled, so
/// the harness itself can be shown to catch a wrong gradient.
pub fn run_suite(seed: u64, points: usize, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    if let Some(f) = fault {
        if !COMPONENTS.iter().any(|c| c.name == f) {
            return Err(Error::invalid(format!(
                "unknown component {f:?}; expected one of {}",
                component_names().join(", ")
            )));
        }
    }
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, c)| check_component(c, seed, i as u64, points, fault == Some(c.name)))
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(reports: &[CheckReport]) -> String {
    let mut out = format!("{:<20} {:>7} {:>6} {:>12}  result\n", "component", "points", "coords", "max rel err");
    for r in reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<20} {:>7} {:>6} {:>12.3e}  {verdict}",
            r.component, r.points, r.coordinates, r.max_rel_error
        );
    }
    out
}

fn check_component(c: &Component, seed: u64, index: u64, points: usize, fault: bool) -> Result<CheckReport> {
    let mut rng = rng::stream(seed, rng::GRADCHECK, index);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..points {
        let fx = smooth_fixture(c, &mut rng)?;
        coordinates = fx.inputs.iter().map(Tensor::numel).sum::<usize>() + fx.store.numel();
        worst = worst.max(compare(c.build, &fx, fault).map_err(|e| Error::invalid(format!("{}: {e}", c.name)))?);
    }
    Ok(CheckReport {
        component: c.name,
        max_rel_error: worst,
        points,
        coordinates,
    })
}

fn smooth_fixture(c: &Component, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    for _ in 0..MAX_DRAWS {
        let fx = (c.sample)(rng);
        if evaluate(c.build, &fx.store, &fx.inputs, false, false)?.margin >= KINK_MARGIN {
            return Ok(fx);
        }
    }
    Err(Error::invalid(format!("{}: no smooth check point in {MAX_DRAWS} draws", c.name)))
}

struct Evaluated {
    value: f64,
    margin: f64,
    /// Input gradients followed by parameter gradients in store order.
    grads: Vec<Vec<f64>>,
}

fn evaluate(build: Build, store: &ParamStore<f64>, inputs: &[Tensor<f64>], fault: bool, grads: bool) -> Result<Evaluated> {
    let mut s = Session::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| s.graph.param(t.clone())).collect();
    let mut out = build(&mut s, &vars)?;
    if fault {
        out = s.graph.scale_grad(out, FAULT_FACTOR);
    }
    let shape = s.graph.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = s.input(Tensor::from_parts(shape, reduction_weights(n)));
    let prod = s.graph.mul(out, w)?;
    let loss = s.graph.sum_all(prod)?;
    let mut result = Evaluated {
        value: s.graph.value(loss).item(),
        margin: s.graph.kink_margin(),
        grads: Vec::new(),
    };
    if grads {
        let g = s.graph.backward(loss)?;
        for (v, t) in vars.iter().zip(inputs) {
            result.grads.push(g.get(*v).map_or_else(|| vec![0.0; t.numel()], Tensor::to_vec));
        }
        let bound = s.all_param_grads(&g);
        for (name, t) in store.iter() {
            result.grads.push(bound.get(name).map_or_else(|| vec![0.0; t.numel()], Tensor::to_vec));
        }
    }
    Ok(result)
}

/// Distinct, nonzero upstream weights so every output coordinate is tested.
fn reduction_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.6 + (1.7 * i as f64 + 0.4).sin()).collect()
}

fn compare(build: Build, fx: &Fixture, fault: bool) -> Result<f64> {
    let analytic = evaluate(build, &fx.store, &fx.inputs, fault, true)?.grads;
    let failure = RefCell::new(None);
    let value = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| match evaluate(build, store, inputs, false, false) {
        Ok(e) => e.value,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..fx.inputs.len() {
        let g = finite_diff_grad(
            |probe| {
                let mut inputs = fx.inputs.clone();
                inputs[k] = probe.clone();
                value(&fx.store, &inputs)
            },
            &fx.inputs[k],
            DEFAULT_EPS,
        );
        numeric.push(g.to_vec());
    }
    for (name, t) in fx.store.iter() {
        let g = finite_diff_grad(
            |probe| {
                let mut store = fx.store.clone();
                store.insert(name.clone(), probe.clone());
                value(&store, &fx.inputs)
            },
            t,
            DEFAULT_EPS,
        );
        numeric.push(g.to_vec());
    }
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = max_relative_error(a, n);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn fixture(inputs: Vec<Tensor<f64>>, params: Vec<(&str, Tensor<f64>)>) -> Fixture {
    let mut store = ParamStore::new();
    for (name, t) in params {
        store.insert(name, t);
    }
    Fixture { inputs, store }
}

/// Replaces every parameter with uniform noise, keeping GeM exponents in a
/// sensible range.
fn randomize(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let value = if name.ends_with(".p") {
            uniform(rng, t.shape(), 1.5, 4.0)
        } else {
            uniform(rng, t.shape(), -1.0, 1.0)
        };
        out.insert(name.clone(), value);
    }
    out
}

fn small_model(variant: Variant) -> HaaModel {
    let config = ModelConfig {
        input_h: 12,
        input_w: 8,
        widths: vec![4],
        strides: vec![1],
        hll_widths: vec![3],
        embed_dim: 12,
        reduction: 2,
        stripes: 3,
        share_backbone: false,
    };
    HaaModel::new(config, variant).expect("valid verification config")
}

const CE_LABELS: [usize; 4] = [0, 3, 1, 4];
const TRIPLET_IDS: [usize; 6] = [0, 0, 1, 1, 2, 2];
const BOXES: [[f64; 4]; 3] = [
    [0.2, 0.0, 0.8, 0.3],
    [0.1, 0.05, 0.7, 0.4],
    [0.3, 0.1, 0.9, 0.35],
];

static COMPONENTS: [Component; 14] = [
    Component {
        name: "conv",
        sample: |r| {
            fixture(
                vec![uniform(r, &[2, 2, 6, 5], -2.0, 2.0)],
                vec![("conv.w", uniform(r, &[3, 2, 3, 3], -1.0, 1.0)), ("conv.b", uniform(r, &[3], -1.0, 1.0))],
            )
        },
        build: |s, v| nn::conv(s, v[0], "conv", 2, 1),
    },
    Component {
        name: "dense",
        sample: |r| {
            fixture(
                vec![uniform(r, &[3, 5], -2.0, 2.0)],
                vec![("fc.w", uniform(r, &[4, 5], -1.0, 1.0)), ("fc.b", uniform(r, &[4], -1.0, 1.0))],
            )
        },
        build: |s, v| nn::dense(s, v[0], "fc", Activation::None),
    },
    Component {
        name: "gap",
        sample: |r| fixture(vec![uniform(r, &[2, 3, 4, 3], -2.0, 2.0)], vec![]),
        build: |s, v| nn::gap(&mut s.graph, v[0]),
    },
    Component {
        name: "gmp",
        sample: |r| fixture(vec![uniform(r, &[2, 3, 4, 3], -2.0, 2.0)], vec![]),
        build: |s, v| nn::gmp(&mut s.graph, v[0]),
    },
    Component {
        name: "gem (x, p)",
        sample: |r| {
            let p = r.gen_range(1.0..6.0);
            fixture(vec![uniform(r, &[2, 3, 4, 3], 0.1, 2.0)], vec![("pool.p", Tensor::full(&[1], p))])
        },
        build: |s, v| nn::pool(s, v[0], PoolKind::Gem, "pool"),
    },
    Component {
        name: "affine sampler",
        sample: |r| {
            let mut params = Vec::new();
            for _ in 0..2 {
                params.extend([r.gen_range(0.3..1.0), r.gen_range(0.3..1.0), r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6)]);
            }
            fixture(
                vec![uniform(r, &[2, 2, 7, 5], -2.0, 2.0), Tensor::from_parts(vec![2, 4], params)],
                vec![],
            )
        },
        build: |s, v| nn::affine_grid_sample(&mut s.graph, v[0], v[1], 6, 4),
    },
    Component {
        name: "channel attention",
        sample: |r| {
            fixture(
                vec![uniform(r, &[2, 4, 3, 3], 0.1, 2.0)],
                vec![
                    ("han.gem.p", Tensor::full(&[1], r.gen_range(1.5..4.0))),
                    ("han.down.w", uniform(r, &[2, 4], -1.0, 1.0)),
                    ("han.down.b", uniform(r, &[2], -1.0, 1.0)),
                    ("han.up.w", uniform(r, &[4, 2], -1.0, 1.0)),
                    ("han.up.b", uniform(r, &[4], -1.0, 1.0)),
                ],
            )
        },
        build: |s, v| model::channel_attention(s, v[0], "han"),
    },
    Component {
        name: "spatial attention",
        sample: |r| fixture(vec![uniform(r, &[2, 3, 4, 3], -2.0, 2.0)], vec![]),
        build: |s, v| model::spatial_attention(&mut s.graph, v[0]),
    },
    Component {
        name: "adaptive fusion",
        sample: |r| {
            fixture(
                vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)],
                vec![
                    ("fuse.black.w", uniform(r, &[2, 4], -1.0, 1.0)),
                    ("fuse.black.b", uniform(r, &[2], -1.0, 1.0)),
                    ("fuse.weight.w", uniform(r, &[2, 2], -1.0, 1.0)),
                    ("fuse.weight.b", uniform(r, &[2], -1.0, 1.0)),
                ],
            )
        },
        build: |s, v| {
            let out = model::adaptive_fuse(s, v[0], v[1])?;
            s.graph.concat(&[out.f, out.black_logits], 1)
        },
    },
    Component {
        name: "head-shoulder loc",
        sample: |r| {
            let m = small_model(Variant::HsaOnly);
            let mut store = randomize(&m.init_params::<f64>(0), r);
            store.remove_prefix("hsa.");
            Fixture {
                inputs: vec![uniform(r, &[2, 3, 12, 8], 0.0, 1.0)],
                store,
            }
        },
        build: |s, v| small_model(Variant::HsaOnly).hll_predict(s, v[0]),
    },
    Component {
        name: "hsa stripe",
        sample: |r| {
            let m = small_model(Variant::HsaOnly);
            let mut store = ParamStore::new();
            for (name, t) in randomize(&m.init_params::<f64>(0), r).iter() {
                if ["hsa.han0.", "hsa.pool0.", "hsa.red0."].iter().any(|p| name.starts_with(p)) {
                    store.insert(name.clone(), t.clone());
                }
            }
            Fixture {
                inputs: vec![uniform(r, &[2, 4, 4, 3], 0.1, 2.0)],
                store,
            }
        },
        build: |s, v| small_model(Variant::HsaOnly).stripe_feature(s, v[0], 0),
    },
    Component {
        name: "cross entropy",
        sample: |r| fixture(vec![uniform(r, &[4, 5], -2.0, 2.0)], vec![]),
        build: |s, v| losses::cross_entropy(&mut s.graph, v[0], &CE_LABELS),
    },
    Component {
        name: "batch-hard triplet",
        sample: |r| fixture(vec![uniform(r, &[6, 3], -1.0, 1.0)], vec![]),
        build: |s, v| losses::batch_hard_triplet(&mut s.graph, v[0], &TRIPLET_IDS, losses::TRIPLET_MARGIN),
    },
    Component {
        name: "box regression",
        sample: |r| fixture(vec![uniform(r, &[3, 4], -1.0, 1.0)], vec![]),
        build: |s, v| losses::box_l2(&mut s.graph, v[0], &BOXES),
    },
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_enough_components() {
        let names = component_names();
        assert!(names.len() >= 12);
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn every_component_passes() {
        for r in run_suite(1, 2, None).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn injected_fault_is_reported_by_name() {
        let reports = run_suite(1, 1, Some("spatial attention")).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.component).collect();
        assert_eq!(failed, ["spatial attention"]);
        assert!(format_table(&reports).lines().any(|l| l.starts_with("spatial attention") && l.ends_with("FAIL")));
    }

    #[test]
    fn unknown_fault_target_is_rejected() {
        assert!(run_suite(1, 1, Some("nope")).unwrap_err().to_string().contains("unknown component"));
    }
}
