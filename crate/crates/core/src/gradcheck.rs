//! Central finite-difference verification of every differentiable layer.
//!
//! Each case builds a small random instance, reduces the layer output to a
//! scalar with a fixed random projection, and compares the reverse-mode
//! gradient of every input against `(f(x + h) − f(x − h)) / 2h` evaluated
//! at f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::detect::geometry::{BBox, Roi};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::norm::RunningStats;
use crate::nn::config::{BlockVariant, DropoutPlacement, NetworkConfig, StageSpec, StemSpec};
use crate::nn::{build_network, forward_backbone, forward_block, ForwardCtx, ParamStore};
use crate::rng::{indexed_stream, StreamRng, STREAM_GRADCHECK};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::loss::{detection_loss, HeadBatch};

/// Every checked layer, in report order.
pub const LAYERS: [&str; 13] = [
    "conv2d",
    "batch_norm",
    "relu",
    "max_pool2d",
    "dropout",
    "softmax",
    "block_original",
    "block_bn_after_add",
    "block_no_second_relu",
    "ps_roi_pool",
    "ps_vote_classify",
    "detection_loss",
    "backbone",
];

/// Harness self-test: a convolution whose analytic gradient is scaled by
/// 1.05. Never part of `all`; it must be reported as failing.
pub const CORRUPT_FIXTURE: &str = "fixture_corrupt_adjoint";

/// Coordinates of one input tensor probed by finite differences at most.
const MAX_PROBES: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl GradcheckConfig {
    /// 20 instances, step 1e-5, tolerance 1e-4.
    pub fn f64_default() -> Self {
        GradcheckConfig {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }

    /// 20 instances, step 1e-5, tolerance 1e-2.
    pub fn f32_default() -> Self {
        GradcheckConfig {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn render_reports(reports: &[LayerReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {}  max_rel_err={:.3e}  instances={}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.instances
        );
    }
    out
}

type Builder<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

/// One random instance: the checked inputs and the function of them.
struct Case<T> {
    inputs: Vec<Tensor<T>>,
    build: Builder<T>,
}

fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Normal values pushed at least 0.05 away from zero (keeps kinks away).
fn away_from_zero<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    normal::<T, R>(rng, shape).map(|v| if v < T::zero() { v - T::lit(0.05) } else { v + T::lit(0.05) })
}

fn conv_case<T: Real>(rng: &mut StreamRng) -> Case<T> {
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let h = rng.random_range(4..=6);
    let w = rng.random_range(4..=6);
    Case {
        inputs: vec![
            normal(rng, &[2, cin, h, w]),
            normal(rng, &[cout, cin, k, k]),
            normal(rng, &[cout]),
        ],
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
    }
}

fn bn_case<T: Real>(rng: &mut StreamRng, instance: usize) -> Case<T> {
    let c = rng.random_range(1..=3);
    let training = instance % 2 == 0;
    let mean: Vec<T> = (0..c).map(|_| T::lit(rng.random_range(-0.5..0.5))).collect();
    let var: Vec<T> = (0..c).map(|_| T::lit(rng.random_range(0.5..2.0))).collect();
    Case {
        inputs: vec![normal(rng, &[2, c, 3, 3]), normal(rng, &[c]), normal(rng, &[c])],
        build: Box::new(move |g, v| {
            let (mut m, mut s) = (mean.clone(), var.clone());
            let stats = RunningStats {
                mean: &mut m,
                var: &mut s,
                eps: T::lit(1e-5),
                momentum_stat: T::lit(0.9),
            };
            g.batch_norm(v[0], v[1], v[2], stats, training)
        }),
    }
}

fn block_case<T: Real>(rng: &mut StreamRng, instance: usize, variant: BlockVariant) -> Case<T> {
    let projection = instance % 2 == 1;
    let (cin, cout, stride) = if projection { (2, 3, 2) } else { (2, 2, 1) };
    let mut names = vec!["x".to_owned()];
    let mut inputs = vec![normal(rng, &[2, cin, 4, 4])];
    let mut add = |name: &str, t: Tensor<T>| {
        names.push(format!("b/{name}"));
        inputs.push(t);
    };
    add("conv1/w", normal(rng, &[cout, cin, 3, 3]));
    add("bn1/gamma", normal(rng, &[cout]));
    add("bn1/beta", normal(rng, &[cout]));
    add("conv2/w", normal(rng, &[cout, cout, 3, 3]));
    add("bn2/gamma", normal(rng, &[cout]));
    add("bn2/beta", normal(rng, &[cout]));
    if projection {
        add("proj/w", normal(rng, &[cout, cin, 1, 1]));
    }
    Case {
        inputs,
        build: Box::new(move |g, v| {
            let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            let mut store = ParamStore::<T>::default();
            for bn in ["b/bn1", "b/bn2"] {
                store.buffers.insert(format!("{bn}/running_mean"), Tensor::zeros(&[cout]));
                store.buffers.insert(format!("{bn}/running_var"), Tensor::ones(&[cout]));
            }
            let mut rng = StreamRng::seed_from_u64(0);
            let mut ctx = ForwardCtx {
                graph: g,
                vars: &vars,
                store: &mut store,
                training: true,
                rng: &mut rng,
                bn_eps: T::lit(1e-5),
                bn_momentum: T::lit(0.9),
            };
            forward_block(&mut ctx, v[0], "b", variant, stride, None)
        }),
    }
}

fn random_roi<R: Rng>(rng: &mut R, extent: f64) -> Roi {
    let x1 = rng.random_range(0.0..0.6 * extent);
    let y1 = rng.random_range(0.0..0.6 * extent);
    let x2 = rng.random_range(x1 + 0.3 * extent..=extent);
    let y2 = rng.random_range(y1 + 0.3 * extent..=extent);
    Roi::new(BBox::new(x1, y1, x2, y2))
}

fn ps_roi_case<T: Real>(rng: &mut StreamRng) -> Case<T> {
    let k = rng.random_range(1..=3);
    let groups = rng.random_range(2..=3);
    let stride = rng.random_range(1..=2);
    let side = 6;
    let rois: Vec<Roi> = (0..rng.random_range(1..=3))
        .map(|_| random_roi(rng, (side * stride) as f64))
        .collect();
    Case {
        inputs: vec![normal(rng, &[1, k * k * groups, side, side])],
        build: Box::new(move |g, v| {
            let pooled = g.ps_roi_pool(v[0], &rois, k, groups, stride)?;
            let votes = g.mean_spatial(pooled)?;
            g.softmax(votes)
        }),
    }
}

fn detection_loss_case<T: Real>(rng: &mut StreamRng) -> Case<T> {
    let classes = rng.random_range(1..=3);
    let rpn_labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
    let roi_labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..=classes)).collect();
    let rpn_targets: Vec<T> = normal::<T, _>(rng, &[8]).into_data();
    let roi_targets: Vec<T> = normal::<T, _>(rng, &[8]).into_data();
    let lambda = rng.random_range(0.5..2.0);
    Case {
        inputs: vec![
            normal(rng, &[4, 2]),
            normal(rng, &[2, 4]),
            normal(rng, &[5, classes + 1]),
            normal(rng, &[2, 4]),
        ],
        build: Box::new(move |g, v| {
            let rpn = HeadBatch {
                logits: v[0],
                labels: &rpn_labels,
                reg: Some(v[1]),
                reg_targets: &rpn_targets,
            };
            let roi = HeadBatch {
                logits: v[2],
                labels: &roi_labels,
                reg: Some(v[3]),
                reg_targets: &roi_targets,
            };
            Ok(detection_loss(g, &rpn, &roi, lambda)?.total)
        }),
    }
}

fn backbone_case<T: Real>(rng: &mut StreamRng) -> Result<Case<T>> {
    let cfg = NetworkConfig {
        stem: StemSpec {
            channels: 3,
            kernel: 3,
            stride: 1,
            pool_window: 2,
            pool_stride: 2,
        },
        stages: vec![StageSpec {
            blocks: 1,
            width: 4,
            stride: 1,
        }],
        dropout: crate::nn::DropoutConfig {
            placement: DropoutPlacement::None,
            rate: 0.0,
        },
        head_reduce_channels: 4,
        rpn_channels: 4,
        ..NetworkConfig::default()
    };
    let built: ParamStore<T> = build_network(&cfg, rng)?;
    let used = |n: &str| n.starts_with("stem/") || n.starts_with("stage") || n.starts_with("head/");
    let names: Vec<String> = built.params.keys().filter(|n| used(n)).cloned().collect();
    let mut inputs = vec![normal(rng, &[2, 3, 8, 8])];
    // zero-initialized biases put ReLU inputs exactly on the kink wherever
    // the incoming activations vanish
    for n in &names {
        let p = &built.params[n];
        inputs.push(if n.ends_with("/b") { normal(rng, p.shape()) } else { p.clone() });
    }
    let buffers = built.buffers.clone();
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut store = ParamStore {
                params: BTreeMap::new(),
                buffers: buffers.clone(),
            };
            let mut rng = StreamRng::seed_from_u64(0);
            let mut ctx = ForwardCtx {
                graph: g,
                vars: &vars,
                store: &mut store,
                training: true,
                rng: &mut rng,
                bn_eps: T::lit(1e-5),
                bn_momentum: T::lit(0.9),
            };
            forward_backbone(&mut ctx, v[0], &cfg)
        }),
    })
}

fn make_case<T: Real>(name: &str, rng: &mut StreamRng, instance: usize) -> Result<Case<T>> {
    Ok(match name {
        "conv2d" | CORRUPT_FIXTURE => conv_case(rng),
        "batch_norm" => bn_case(rng, instance),
        "relu" => Case {
            inputs: vec![away_from_zero(rng, &[2, 3, 4, 4])],
            build: Box::new(|g, v| g.relu(v[0])),
        },
        "max_pool2d" => {
            let (win, stride) = if instance % 2 == 0 { (2, 2) } else { (3, 1) };
            Case {
                inputs: vec![normal(rng, &[1, 2, 6, 6])],
                build: Box::new(move |g, v| g.max_pool2d(v[0], win, stride)),
            }
        }
        "dropout" => {
            // training mode with a replayed mask on even instances, eval on odd
            let training = instance % 2 == 0;
            let mask_seed: u64 = rng.random();
            Case {
                inputs: vec![normal(rng, &[2, 3, 4, 4])],
                build: Box::new(move |g, v| {
                    let mut r = StreamRng::seed_from_u64(mask_seed);
                    let d = g.dropout(v[0], 0.5, training, &mut r)?;
                    // dropout in eval mode is the identity node; scale keeps the
                    // checked function a proper graph operation
                    g.scale(d, T::one())
                }),
            }
        }
        "softmax" => Case {
            inputs: vec![normal(rng, &[3, 5])],
            build: Box::new(|g, v| g.softmax(v[0])),
        },
        "block_original" => block_case(rng, instance, BlockVariant::Original),
        "block_bn_after_add" => block_case(rng, instance, BlockVariant::BnAfterAdd),
        "block_no_second_relu" => block_case(rng, instance, BlockVariant::NoSecondRelu),
        "ps_roi_pool" => ps_roi_case(rng),
        "ps_vote_classify" => {
            let k = rng.random_range(1..=3);
            let groups = rng.random_range(2..=4);
            Case {
                inputs: vec![normal(rng, &[2, groups, k, k])],
                build: Box::new(|g, v| {
                    let votes = g.mean_spatial(v[0])?;
                    g.softmax(votes)
                }),
            }
        }
        "detection_loss" => detection_loss_case(rng),
        "backbone" => backbone_case(rng)?,
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck layer {other:?}; known: all, {}, {CORRUPT_FIXTURE}",
                LAYERS.join(", ")
            )))
        }
    })
}

/// Projected scalar `Σ out ⊙ proj` of a case at `inputs`.
fn evaluate<T: Real>(case: &Case<T>, inputs: &[Tensor<T>], proj: &Tensor<T>, trainable: bool) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = (case.build)(&mut g, &vars)?;
    let p = g.input(proj.clone());
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Relative error of one instance: `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
///
/// `exact` and `case` are the same instance at f64 and at `T`; the analytic
/// gradient comes from `case` and the finite differences from `exact`.
fn check_instance<T: Real>(
    exact: &Case<f64>,
    case: &Case<T>,
    rng: &mut StreamRng,
    cfg: &GradcheckConfig,
    corrupt: bool,
) -> Result<f64> {
    let mut probe = Graph::new();
    let vars: Vec<Var> = exact.inputs.iter().map(|t| probe.input(t.clone())).collect();
    let out = (exact.build)(&mut probe, &vars)?;
    let proj: Tensor<f64> = normal(rng, probe.value(out).shape());

    let (mut g, vars, loss) = evaluate(case, &case.inputs, &proj.cast(), true)?;
    g.backward(loss)?;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (i, input) in exact.inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = if input.len() <= MAX_PROBES {
            (0..input.len()).collect()
        } else {
            sample(rng, input.len(), MAX_PROBES).into_vec()
        };
        for c in coords {
            let mut shifted = exact.inputs.clone();
            shifted[i].data_mut()[c] = input.data()[c] + cfg.step;
            let (gp, _, lp) = evaluate(exact, &shifted, &proj, false)?;
            shifted[i].data_mut()[c] = input.data()[c] - cfg.step;
            let (gm, _, lm) = evaluate(exact, &shifted, &proj, false)?;
            let num = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * cfg.step);
            let mut ana = analytic.data()[c].as_f64();
            if corrupt {
                ana *= 1.05;
            }
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
    }
    Ok(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8))
}

/// Checks one layer over `cfg.instances` random instances.
pub fn check_layer<T: Real>(name: &str, cfg: &GradcheckConfig) -> Result<LayerReport> {
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut max_err: f64 = 0.0;
    for i in 0..cfg.instances {
        let mut rng = indexed_stream(cfg.seed ^ salt, STREAM_GRADCHECK, i as u64);
        let case = make_case::<T>(name, &mut rng.clone(), i)?;
        let exact = make_case::<f64>(name, &mut rng, i)?;
        let err = check_instance(&exact, &case, &mut rng, cfg, name == CORRUPT_FIXTURE)?;
        max_err = max_err.max(err);
    }
    Ok(LayerReport {
        name: name.to_owned(),
        instances: cfg.instances,
        max_rel_err: max_err,
        passed: max_err < cfg.tolerance,
    })
}

/// Expands a `--layers` argument: `all` or a comma-separated list of names.
pub fn resolve_layers(spec: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part == "all" {
            out.extend(LAYERS.iter().map(|s| s.to_string()));
        } else if LAYERS.contains(&part) || part == CORRUPT_FIXTURE {
            out.push(part.to_owned());
        } else {
            return Err(Error::Config(format!(
                "unknown gradcheck layer {part:?}; known: all, {}, {CORRUPT_FIXTURE}",
                LAYERS.join(", ")
            )));
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no gradcheck layers selected".into()));
    }
    Ok(out)
}

pub fn run<T: Real>(layers: &[String], cfg: &GradcheckConfig) -> Result<Vec<LayerReport>> {
    layers.iter().map(|l| check_layer::<T>(l, cfg)).collect()
}
