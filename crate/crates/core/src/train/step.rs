use super::Branch;
use crate::data::TokenPyramid;
use crate::depth::{active_plan, DepthPolicy, LayerSet};
use crate::error::{Error, Result};
use crate::model::sequence::{bind, check_policy, sequence_logits, BoundParams};
use crate::model::{MaskKind, ModelParams};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Gradients, Tensor, Var};

/// Per-scale active sets of a branch: the policy's zone rule for the
/// subnet branch, every layer everywhere for the full branch.
pub fn branch_plan(policy: &DepthPolicy, branch: Branch) -> Vec<LayerSet> {
    match branch {
        Branch::Subnet => active_plan(policy),
        Branch::Full => vec![LayerSet::full(policy.depth); policy.scales],
    }
}

/// AdamW hyper-parameters together with their moment state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::for_params(params.tensors()),
        }
    }
}

fn targets(batch: &[&TokenPyramid]) -> Vec<usize> {
    batch.iter().flat_map(|p| p.flat_tokens()).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Rows {
    All,
    Bridge,
    Flexible,
}

/// `1/(B·T)` on the selected rows, zero elsewhere, so the per-zone losses
/// add up to the mean over every position.
fn row_weights(b: usize, total: usize, split: usize, rows: Rows) -> Vec<f64> {
    let w = 1.0 / (b * total) as f64;
    (0..b * total)
        .map(|i| {
            let bridge = i % total < split;
            match rows {
                Rows::All => w,
                Rows::Bridge if bridge => w,
                Rows::Flexible if !bridge => w,
                _ => 0.0,
            }
        })
        .collect()
}

struct Pass {
    graph: Graph,
    bound: BoundParams,
    loss: Var,
}

fn build(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    policy: &DepthPolicy,
    branch: Branch,
    trainable: bool,
    split_layers: bool,
    rows: Rows,
) -> Result<Pass> {
    check_policy(params, policy)?;
    let schedule = &params.config.schedule;
    let split = schedule.prefix_tokens(policy.bridge);
    let mut graph = Graph::new();
    let bound = bind(&mut graph, params, trainable, split_layers);
    let logits = sequence_logits(
        &mut graph,
        &bound,
        params,
        batch,
        &branch_plan(policy, branch),
        MaskKind::BlockCausal,
        split,
    )?;
    let weights = row_weights(batch.len(), schedule.total_tokens(), split, rows);
    let loss = graph.weighted_nll(logits, &targets(batch), &weights)?;
    Ok(Pass { graph, bound, loss })
}

fn collect(grads: &Gradients, graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, graph.value(v).shape()))
        .collect()
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("training loss is {loss}")))
    }
}

/// Mean token cross-entropy of the batch under the branch's active sets.
pub fn pyramid_loss(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    policy: &DepthPolicy,
    branch: Branch,
) -> Result<f64> {
    let pass = build(params, batch, policy, branch, false, false, Rows::All)?;
    pass.graph.value(pass.loss).item()
}

/// Loss and its gradient with respect to every parameter tensor, in
/// declaration order.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    policy: &DepthPolicy,
    branch: Branch,
) -> Result<(f64, Vec<Tensor>)> {
    let pass = build(params, batch, policy, branch, true, false, Rows::All)?;
    let loss = finite(pass.graph.value(pass.loss).item()?)?;
    let grads = pass.graph.backward(pass.loss)?;
    Ok((loss, collect(&grads, &pass.graph, &pass.bound.vars)))
}

/// One AdamW update on the branch loss; returns the loss before the
/// update. A non-finite loss aborts with a numeric error and leaves the
/// parameters untouched.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[&TokenPyramid],
    branch: Branch,
    policy: &DepthPolicy,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(params, batch, policy, branch)?;
    let mut tensors = params.tensors_mut();
    adam_step(&mut tensors, &grads, &mut opt.state, &opt.config)?;
    Ok(loss)
}

/// How gradient is split between the bridge and the flexible zone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// By the tokens a layer processes: each layer is applied through one
    /// copy of its weights on bridge-zone rows and another on
    /// flexible-zone rows, and one backward pass of the full loss splits
    /// its gradient between them. A layer skipped on flexible rows gets
    /// exactly zero flexible gradient.
    #[default]
    TokenRows,
    /// By loss terms: one backward pass of the bridge-scale loss and one
    /// of the flexible-scale loss. Flexible-zone loss still reaches
    /// full-only layers through the keys/values they computed for
    /// bridge tokens.
    LossTerms,
}

/// Per-layer gradient tensors (in layer declaration order) by source.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSources {
    pub bridge: Vec<Vec<Tensor>>,
    pub flexible: Vec<Vec<Tensor>>,
}

fn layer_chunks(params: &ModelParams, all: Vec<Tensor>) -> Vec<Vec<Tensor>> {
    (0..params.layers.len())
        .map(|l| all[params.layer_tensor_range(l)].to_vec())
        .collect()
}

pub fn gradient_sources(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    policy: &DepthPolicy,
    branch: Branch,
    mode: GradientMode,
) -> Result<GradientSources> {
    match mode {
        GradientMode::TokenRows => {
            let pass = build(params, batch, policy, branch, true, true, Rows::All)?;
            finite(pass.graph.value(pass.loss).item()?)?;
            let grads = pass.graph.backward(pass.loss)?;
            let flex = pass.bound.flexible.as_ref().expect("split layers bound");
            Ok(GradientSources {
                bridge: (0..params.layers.len())
                    .map(|l| collect(&grads, &pass.graph, pass.bound.layer(l)))
                    .collect(),
                flexible: flex
                    .iter()
                    .map(|vars| collect(&grads, &pass.graph, vars))
                    .collect(),
            })
        }
        GradientMode::LossTerms => {
            let zone = |rows| -> Result<Vec<Vec<Tensor>>> {
                let pass = build(params, batch, policy, branch, true, false, rows)?;
                finite(pass.graph.value(pass.loss).item()?)?;
                let grads = pass.graph.backward(pass.loss)?;
                Ok(layer_chunks(params, collect(&grads, &pass.graph, &pass.bound.vars)))
            };
            Ok(GradientSources {
                bridge: zone(Rows::Bridge)?,
                flexible: zone(Rows::Flexible)?,
            })
        }
    }
}

/// Per-layer L2 gradient norms by source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceReport {
    pub bridge_norms: Vec<f64>,
    pub flexible_norms: Vec<f64>,
}

fn norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Gradient norms without updating the parameters.
pub fn gradient_source_report(
    params: &ModelParams,
    batch: &[&TokenPyramid],
    policy: &DepthPolicy,
    branch: Branch,
    mode: GradientMode,
) -> Result<SourceReport> {
    let s = gradient_sources(params, batch, policy, branch, mode)?;
    Ok(SourceReport {
        bridge_norms: s.bridge.iter().map(|g| norm(g)).collect(),
        flexible_norms: s.flexible.iter().map(|g| norm(g)).collect(),
    })
}
