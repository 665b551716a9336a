//! Convergence bounds on the gap between the federated and centralized
//! trajectories, the mobility factor, and estimators for the constants the
//! bounds consume.
//!
//! Bound values can come out negative for aggressive parameters. They are
//! returned raw; callers that use them as a bound on a norm clamp at zero.

use std::collections::BTreeMap;

use log::warn;
use serde::Serialize;

use crate::data::{label_counts, LabelDistribution, LabeledDataset, PartitionPlan};
use crate::engine::{Checkpoint, RunOutput};
use crate::error::{Error, Result};
use crate::mobility::{assignments_at, MobilityState, TrajectoryTrace};
use crate::model::{loss_and_gradient, GradientVector, ModelSpec, ParamVector};

/// Step size, smoothness, and aggregation periods shared by every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub eta: f64,
    pub beta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
}

impl Schedule {
    pub fn new(eta: f64, beta: f64, tau_l: usize, tau_e: usize) -> Result<Self> {
        if !(eta > 0.0) || !(beta > 0.0) || tau_l == 0 || tau_e == 0 {
            return Err(Error::contract("need eta > 0, beta > 0, tau_l >= 1, tau_e >= 1"));
        }
        Ok(Self { eta, beta, tau_l, tau_e })
    }

    /// Local updates per cloud epoch.
    pub fn period(&self) -> usize {
        self.tau_l * self.tau_e
    }

    pub fn big_h(&self) -> f64 {
        big_h(self.tau_l, self.tau_e, self.eta, self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessParams {
    pub beta: f64,
    pub rho: f64,
}

/// Gradient-difference measurements for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityEstimates {
    pub delta_m: Vec<f64>,
    /// `δ = Σ α_m δ_m`
    pub delta: f64,
    /// `Δ_n^[j]` for every edge epoch `j` (index 0 is the initial membership).
    pub delta_n_series: Vec<Vec<f64>>,
    /// `Δ^[j] = Σ θ_n^[j] Δ_n^[j]`
    pub delta_series: Vec<f64>,
    pub g: f64,
    pub l_n: Vec<f64>,
    pub l: f64,
    pub lambda_star: Option<f64>,
}

/// `r(τ) = (δ/β)[(1+ηβ)^τ − 1] − τηδ`
pub fn r_term(tau: usize, eta: f64, delta: f64, beta: f64) -> f64 {
    (delta / beta) * ((1.0 + eta * beta).powi(tau as i32) - 1.0) - tau as f64 * eta * delta
}

/// `h(t) = τ_l[Σ_{r=1}^{R}(1+ηβ)^r − R]` with `R = ⌊(t−1)/τ_l⌋`.
pub fn h_func(t: usize, tau_l: usize, eta: f64, beta: f64) -> Result<f64> {
    if t < 1 || tau_l < 1 {
        return Err(Error::contract("h(t) needs t >= 1 and tau_l >= 1"));
    }
    let rounds = (t - 1) / tau_l;
    let growth: f64 = (1..=rounds).map(|r| (1.0 + eta * beta).powi(r as i32)).sum();
    Ok(tau_l as f64 * (growth - rounds as f64))
}

/// `H = Σ_{r=1}^{τ_e−1} h(r·τ_l)`
pub fn big_h(tau_l: usize, tau_e: usize, eta: f64, beta: f64) -> f64 {
    (1..tau_e)
        .map(|r| h_func(r * tau_l, tau_l, eta, beta).expect("r·tau_l >= 1"))
        .sum()
}

fn triangle(tau_e: usize) -> f64 {
    0.5 * tau_e as f64 * (tau_e as f64 - 1.0)
}

/// Per-cloud-epoch bound without mobility:
/// `r(τ_lτ_e) − η(δ−Δ)[½τ_e(τ_e−1)τ_l + H]`.
pub fn u_static(s: &Schedule, delta: f64, big_delta: f64) -> f64 {
    if big_delta > delta {
        warn!("edge gradient difference {big_delta} exceeds vehicle difference {delta}");
    }
    r_term(s.period(), s.eta, delta, s.beta)
        - s.eta * (delta - big_delta) * (triangle(s.tau_e) * s.tau_l as f64 + s.big_h())
}

fn window<'a>(s: &Schedule, k: usize, delta_series: &'a [f64]) -> Result<&'a [f64]> {
    if k < 1 {
        return Err(Error::contract("cloud epochs are numbered from 1"));
    }
    let start = (k - 1) * s.tau_e + 1;
    let end = (k - 1) * s.tau_e + s.tau_e;
    if s.tau_e > 1 && delta_series.len() < end {
        return Err(Error::contract(format!(
            "edge difference series has {} entries, epoch {k} needs index {}",
            delta_series.len(),
            end - 1
        )));
    }
    Ok(if s.tau_e > 1 { &delta_series[start..end] } else { &[] })
}

/// Per-cloud-epoch bound with mobility for epoch `k` (1-based):
/// `r(τ_lτ_e) − ητ_l[½τ_e(τ_e−1)δ − Σ_j j·Δ^[(k−1)τ_e+j]]`.
pub fn u_mobile(s: &Schedule, delta: f64, k: usize, delta_series: &[f64]) -> Result<f64> {
    let weighted: f64 = window(s, k, delta_series)?
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1) as f64 * d)
        .sum();
    Ok(r_term(s.period(), s.eta, delta, s.beta)
        - s.eta * s.tau_l as f64 * (triangle(s.tau_e) * delta - weighted))
}

/// `γ_k = (U_nomob − U_mob) / (τ_lτ_e)`; positive means mobility helps.
pub fn mobility_factor(u_nomob: f64, u_mob: f64, tau_l: usize, tau_e: usize) -> f64 {
    (u_nomob - u_mob) / (tau_l * tau_e) as f64
}

/// The same factor in expanded form, with `Δ^[0]` taken from the series:
/// `(η/τ_e)[Σ_j j(Δ^[0] − Δ^[(k−1)τ_e+j]) − (δ − Δ^[0])H/τ_l]`.
pub fn mobility_factor_expanded(s: &Schedule, delta: f64, k: usize, delta_series: &[f64]) -> Result<f64> {
    let d0 = *delta_series
        .first()
        .ok_or_else(|| Error::contract("edge difference series is empty"))?;
    let shuffled: f64 = window(s, k, delta_series)?
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1) as f64 * (d0 - d))
        .sum();
    Ok(s.eta / s.tau_e as f64 * (shuffled - (delta - d0) * s.big_h() / s.tau_l as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorCase {
    Iid,
    /// Edge pools are i.i.d. but vehicles are not (local non-i.i.d. partition).
    EdgeIid,
    EdgeNiid,
}

/// Constants for the closed-form mobility factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormInputs {
    pub delta: f64,
    pub g: f64,
    pub edges: usize,
    pub l: f64,
    pub lambda_star: f64,
}

fn check_mixing(lambda_star: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda_star) {
        return Err(Error::NonMixing(format!("lambda* = {lambda_star} is outside [0, 1)")));
    }
    Ok(())
}

fn decay_sum(s: &Schedule, mut term: impl FnMut(usize) -> f64) -> f64 {
    (1..s.tau_e).map(|j| j as f64 * term(j)).sum()
}

/// Closed-form `γ_k` for the three initial distributions.
pub fn mobility_factor_closed(case: FactorCase, s: &Schedule, c: &ClosedFormInputs, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::contract("cloud epochs are numbered from 1"));
    }
    match case {
        FactorCase::Iid => Ok(0.0),
        FactorCase::EdgeIid => Ok(-s.eta * c.delta * s.big_h() / s.period() as f64),
        FactorCase::EdgeNiid => {
            check_mixing(c.lambda_star)?;
            let base = (k - 1) * s.tau_e;
            let sum = decay_sum(s, |j| 1.0 - c.lambda_star.powi((base + j) as i32));
            Ok(s.eta * c.g * c.edges as f64 * c.l / s.tau_e as f64 * sum)
        }
    }
}

/// Edge non-i.i.d. factor on a ring of `edges` servers with sojourn `p_s`.
///
/// By default `λ* = p_s + (1−p_s)cos(2π/N)` is substituted into the general
/// closed form. With `power` the ring variant
/// `(ηGNL/τ_e)Σ_j j[(1−p_s)(1−cos(2π/N))]^{kτ_e+j}` is evaluated instead; the
/// two disagree, and the general form is the one consistent with the rest of
/// the analysis.
pub fn mobility_factor_ring(
    s: &Schedule,
    c: &ClosedFormInputs,
    k: usize,
    sojourn: f64,
    power: bool,
) -> Result<f64> {
    let cos = (2.0 * std::f64::consts::PI / c.edges as f64).cos();
    let lambda = sojourn + (1.0 - sojourn) * cos;
    check_mixing(lambda)?;
    if !power {
        let inputs = ClosedFormInputs { lambda_star: lambda, ..*c };
        return mobility_factor_closed(FactorCase::EdgeNiid, s, &inputs, k);
    }
    let base = (1.0 - sojourn) * (1.0 - cos);
    let sum = decay_sum(s, |j| base.powi((k * s.tau_e + j) as i32));
    Ok(s.eta * c.g * c.edges as f64 * c.l / s.tau_e as f64 * sum)
}

/// `Δ^[j] ≤ G·λ*^j·N·L`
pub fn delta_bound(j: usize, g: f64, edges: usize, l: f64, lambda_star: f64) -> f64 {
    g * lambda_star.powi(j as i32) * edges as f64 * l
}

/// Per-vehicle full-shard loss and gradient at one probe point.
struct ProbeGradients {
    losses: Vec<f64>,
    grads: Vec<GradientVector>,
    global: GradientVector,
}

fn probe_gradients(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    shards: &[Vec<usize>],
    alpha: &[f64],
    w: &ParamVector,
) -> Result<ProbeGradients> {
    let mut losses = Vec::with_capacity(shards.len());
    let mut grads = Vec::with_capacity(shards.len());
    for (m, shard) in shards.iter().enumerate() {
        if shard.is_empty() {
            return Err(Error::Vehicle {
                vehicle: m,
                source: Box::new(Error::Empty("shard".into())),
            });
        }
        let (loss, grad) = loss_and_gradient(spec, w, &dataset.gather(shard)?)?;
        losses.push(loss);
        grads.push(grad);
    }
    let global = GradientVector::weighted_sum(w.dim(), alpha.iter().copied().zip(grads.iter()));
    Ok(ProbeGradients { losses, grads, global })
}

fn edge_gap(probe: &ProbeGradients, covered: &[usize], sizes: &[usize]) -> f64 {
    let total: usize = covered.iter().map(|&m| sizes[m]).sum();
    let pooled = GradientVector::weighted_sum(
        probe.global.dim(),
        covered
            .iter()
            .map(|&m| (sizes[m] as f64 / total as f64, &probe.grads[m])),
    );
    pooled.distance(&probe.global)
}

/// `δ_m`, `Δ_n^[j]` and their weighted aggregates.
///
/// The supremum over `w` is approximated by the maximum over `probes`; for
/// the quadratic task the differences do not depend on `w`, so any probe
/// gives the exact values. `G`, `L` and `λ*` are left at zero / `None`.
pub fn estimate_gradient_differences(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    membership: &[MobilityState],
    probes: &[ParamVector],
) -> Result<HeterogeneityEstimates> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set".into()));
    }
    let alpha = plan.alpha();
    let sizes = plan.shard_sizes();
    let probe_grads = probes
        .iter()
        .map(|w| probe_gradients(spec, dataset, &plan.shards, &alpha, w))
        .collect::<Result<Vec<_>>>()?;

    let delta_m: Vec<f64> = (0..plan.num_vehicles())
        .map(|m| {
            probe_grads
                .iter()
                .map(|p| p.grads[m].distance(&p.global))
                .fold(0.0, f64::max)
        })
        .collect();
    let delta = alpha.iter().zip(&delta_m).map(|(a, d)| a * d).sum();

    let mut delta_n_series = Vec::with_capacity(membership.len());
    let mut delta_series = Vec::with_capacity(membership.len());
    for state in membership {
        let members = state.members();
        let per_edge: Vec<f64> = members
            .iter()
            .map(|covered| {
                if covered.is_empty() {
                    return 0.0;
                }
                probe_grads
                    .iter()
                    .map(|p| edge_gap(p, covered, &sizes))
                    .fold(0.0, f64::max)
            })
            .collect();
        let theta = crate::engine::edge_weights(state, &sizes);
        delta_series.push(theta.iter().zip(&per_edge).map(|(t, d)| t * d).sum());
        delta_n_series.push(per_edge);
    }
    Ok(HeterogeneityEstimates {
        delta_m,
        delta,
        delta_n_series,
        delta_series,
        g: 0.0,
        l_n: vec![],
        l: 0.0,
        lambda_star: None,
    })
}

/// `G`: the largest class-conditional gradient norm over the probe set.
/// Classes with no samples are skipped.
pub fn estimate_g(spec: &ModelSpec, dataset: &LabeledDataset, probes: &[ParamVector]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set".into()));
    }
    let by_class = dataset.indices_by_class();
    let mut g = 0.0f64;
    for (c, indices) in by_class.iter().enumerate() {
        if indices.is_empty() {
            warn!("class {c} has no samples; skipped when estimating G");
            continue;
        }
        let batch = dataset.gather(indices)?;
        for w in probes {
            let (_, grad) = loss_and_gradient(spec, w, &batch)?;
            g = g.max(grad.norm());
        }
    }
    Ok(g)
}

/// `β` and `ρ` as the largest gradient and loss difference quotients over
/// all probe pairs and vehicles. These are lower estimates of the true constants.
pub fn estimate_smoothness(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    probes: &[ParamVector],
) -> Result<SmoothnessParams> {
    if probes.len() < 2 {
        return Err(Error::contract("smoothness estimation needs at least two probes"));
    }
    let alpha = plan.alpha();
    let grads = probes
        .iter()
        .map(|w| probe_gradients(spec, dataset, &plan.shards, &alpha, w))
        .collect::<Result<Vec<_>>>()?;
    let (mut beta, mut rho) = (0.0f64, 0.0f64);
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let gap = probes[i].distance(&probes[j]);
            if gap == 0.0 {
                continue;
            }
            for m in 0..plan.num_vehicles() {
                beta = beta.max(grads[i].grads[m].distance(&grads[j].grads[m]) / gap);
                rho = rho.max((grads[i].losses[m] - grads[j].losses[m]).abs() / gap);
            }
        }
    }
    if beta == 0.0 || rho == 0.0 {
        return Err(Error::contract("probe set is degenerate; constants came out zero"));
    }
    Ok(SmoothnessParams { beta, rho })
}

/// `‖p − p_n^[j]‖₁` per edge (outer index) and edge epoch (inner index).
/// An edge with no vehicles contributes 0.
pub fn prob_diff_series(
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    membership: &[MobilityState],
) -> Result<Vec<Vec<f64>>> {
    let all = plan.shards.concat();
    let global = LabelDistribution::from_counts(&label_counts(dataset, &all))?;
    let per_vehicle: Vec<Vec<f64>> = plan.shards.iter().map(|s| label_counts(dataset, s)).collect();
    let edges = membership.first().map_or(0, MobilityState::num_edges);
    let mut series = vec![Vec::with_capacity(membership.len()); edges];
    for state in membership {
        for (n, covered) in state.members().iter().enumerate() {
            let mut pooled = vec![0.0; global.num_classes()];
            for &m in covered {
                pooled.iter_mut().zip(&per_vehicle[m]).for_each(|(a, c)| *a += c);
            }
            let diff = match LabelDistribution::from_counts(&pooled) {
                Ok(p) => crate::data::probability_difference(&global, &p)?,
                Err(_) => 0.0,
            };
            series[n].push(diff);
        }
    }
    Ok(series)
}

/// `L_n = max_j ‖p − p_n^[j]‖₁ / (N·λ*^j)` and `L = Σ θ_n L_n`.
pub fn fit_l(series: &[Vec<f64>], lambda_star: f64, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
    if !(lambda_star < 1.0) {
        return Err(Error::NonMixing(format!("lambda* = {lambda_star}")));
    }
    if !(lambda_star > 0.0) {
        return Err(Error::contract("fit_l needs lambda* > 0"));
    }
    if series.is_empty() || series.iter().any(Vec::is_empty) {
        return Err(Error::Empty("probability difference series".into()));
    }
    if theta.len() != series.len() {
        return Err(Error::contract("one weight per edge required"));
    }
    let n = series.len() as f64;
    let l_n: Vec<f64> = series
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(j, d)| d / (n * lambda_star.powi(j as i32)))
                .fold(0.0, f64::max)
        })
        .collect();
    let l = theta.iter().zip(&l_n).map(|(t, l)| t * l).sum();
    Ok((l_n, l))
}

/// Inputs for the loss bound after `T = K·τ_l·τ_e` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub eta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    pub smoothness: SmoothnessParams,
    pub epsilon: f64,
    pub phi: f64,
}

/// `φ = min_k (1 − βη/2) / ‖ṽ^((k−1)τ_lτ_e) − w*‖²` over the checkpoints
/// `k−1 = 0..K−1`.
pub fn phi_from_checkpoints(checkpoints: &[Checkpoint], w_star: &ParamVector, beta: f64, eta: f64) -> Result<f64> {
    let starts = &checkpoints[..checkpoints.len().saturating_sub(1)];
    if starts.is_empty() {
        return Err(Error::Empty("checkpoints".into()));
    }
    let numerator = 1.0 - beta * eta / 2.0;
    Ok(starts
        .iter()
        .map(|c| numerator / c.v_tilde.distance(w_star).powi(2))
        .fold(f64::INFINITY, f64::min))
}

/// `F(w^(T)) − F(w*) ≤ 1 / (Tηφ − (ρ/ε²)Σ_k U_k)`.
///
/// Checks the step-size condition `η ≤ 1/β` and the per-epoch condition
/// `ηφ − ρU_k/(τ_lτ_eε²) > 0`; `u_series` values are clamped at zero.
pub fn convergence_bound(inputs: &BoundInputs, u_series: &[f64]) -> Result<f64> {
    let BoundInputs {
        eta,
        tau_l,
        tau_e,
        cloud_epochs,
        smoothness: SmoothnessParams { beta, rho },
        epsilon,
        phi,
    } = *inputs;
    if u_series.len() != cloud_epochs {
        return Err(Error::contract(format!(
            "{} epoch bounds for K = {cloud_epochs}",
            u_series.len()
        )));
    }
    let mut failed = Vec::new();
    if eta > 1.0 / beta {
        failed.push(format!("(1) eta = {eta} exceeds 1/beta = {}", 1.0 / beta));
    }
    let per_epoch = (tau_l * tau_e) as f64 * epsilon * epsilon;
    if let Some(k) = u_series
        .iter()
        .position(|u| eta * phi - rho * u.max(0.0) / per_epoch <= 0.0)
    {
        failed.push(format!("(2) fails at k = {}", k + 1));
    }
    let total_t = (cloud_epochs * tau_l * tau_e) as f64;
    let denominator = total_t * eta * phi - rho / (epsilon * epsilon) * u_series.iter().map(|u| u.max(0.0)).sum::<f64>();
    if !(denominator > 0.0) {
        failed.push(format!("denominator {denominator} is not positive"));
    }
    if !failed.is_empty() {
        return Err(Error::Conditions(failed.join("; ")));
    }
    Ok(1.0 / denominator)
}

/// The remaining conditions of the loss bound:
/// `F(ṽ^(kT)) − F(w*) ≥ ε` and `F(w^(kT)) ≥ ε` for all `k`.
/// Returns the failures, empty when both hold.
pub fn trajectory_conditions(epsilon: f64, v_gaps: &[f64], cloud_losses: &[f64]) -> Vec<String> {
    let mut failed = Vec::new();
    if let Some(k) = v_gaps.iter().position(|g| *g < epsilon) {
        failed.push(format!("(3) fails at k = {}", k + 1));
    }
    if let Some(k) = cloud_losses.iter().position(|f| *f < epsilon) {
        failed.push(format!("(4) fails at k = {}", k + 1));
    }
    failed
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeGapReport {
    pub delta: f64,
    pub delta0: f64,
    pub gap: f64,
    /// Whether `δ = Δ^[0]` is expected for this partition.
    pub asserted: bool,
    pub holds: bool,
}

/// Compare `δ` with `Δ^[0]`. Equality is expected for i.i.d. and edge
/// non-i.i.d. partitions; for local non-i.i.d. it is only reported.
pub fn check_edge_gap(case: FactorCase, estimates: &HeterogeneityEstimates, tolerance: f64) -> Result<EdgeGapReport> {
    let delta0 = *estimates
        .delta_series
        .first()
        .ok_or_else(|| Error::Empty("edge difference series".into()))?;
    let gap = estimates.delta - delta0;
    let asserted = case != FactorCase::EdgeIid;
    Ok(EdgeGapReport {
        delta: estimates.delta,
        delta0,
        gap,
        asserted,
        holds: !asserted || gap.abs() <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochBound {
    pub u_static: f64,
    pub u_mobile: f64,
    pub gamma_def: f64,
    pub gamma_closed: Option<f64>,
    /// Ring closed form, for edge non-i.i.d. runs on a ring.
    pub gamma_ring: Option<f64>,
    pub delta: f64,
    #[serde(rename = "Delta_series")]
    pub delta_series: Vec<f64>,
    /// Measured `‖u − ṽ‖` at the end of the epoch, when tracked.
    pub cf_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub epsilon: f64,
    pub bound: Option<f64>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundConstants {
    pub case: FactorCase,
    pub schedule: Schedule,
    pub rho: Option<f64>,
    #[serde(rename = "H")]
    pub big_h: f64,
    pub delta: f64,
    pub delta_m: Vec<f64>,
    #[serde(rename = "Delta0")]
    pub delta0: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "L_n")]
    pub l_n: Vec<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub lambda_star: Option<f64>,
    pub edge_gap: EdgeGapReport,
    pub phi: Option<f64>,
    pub convergence: Vec<ConvergencePoint>,
}

/// Bound report for one run: shared constants plus one entry per cloud epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub epochs: BTreeMap<usize, EpochBound>,
}

impl BoundReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Settings for [`bound_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSettings {
    pub case: FactorCase,
    pub eta: f64,
    pub tau_l: usize,
    pub tau_e: usize,
    /// Mixing rate of the mobility model; `None` when movement never mixes.
    pub lambda_star: Option<f64>,
    /// Probe points for the supremum estimates (at most this many checkpoints).
    pub probes: usize,
    pub epsilon_grid: Vec<f64>,
    /// Tolerance for `δ = Δ^[0]`, relative to `δ`.
    pub edge_gap_rel_tol: f64,
    /// Sojourn probability when vehicles move on a ring.
    pub ring_sojourn: Option<f64>,
    /// Use the power form for the ring factor.
    pub ring_factor_power: bool,
}

fn spaced<T: Clone>(items: &[T], count: usize) -> Vec<T> {
    if items.len() <= count || count < 2 {
        return items.iter().take(count.max(1)).cloned().collect();
    }
    (0..count)
        .map(|i| items[i * (items.len() - 1) / (count - 1)].clone())
        .collect()
}

/// Evaluate every bound for a finished run from its logged membership and
/// checkpoints.
pub fn bound_report(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    membership: &TrajectoryTrace,
    checkpoints: &[Checkpoint],
    cf_at_boundaries: Option<&[f64]>,
    settings: &ReportSettings,
) -> Result<BoundReport> {
    let cloud_epochs = checkpoints.len().saturating_sub(1);
    if cloud_epochs == 0 {
        return Err(Error::Empty("checkpoints".into()));
    }
    let states = membership
        .steps()
        .map(|j| assignments_at(membership, j, plan.num_vehicles()))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<ParamVector> = checkpoints.iter().map(|c| c.cloud_model.clone()).collect();
    let probes = spaced(&models, settings.probes.max(2));

    let quadratic = !spec.is_classifier();
    let smoothness = if quadratic {
        None
    } else {
        estimate_smoothness(spec, dataset, plan, &probes).ok()
    };
    // The quadratic loss has identity Hessian: β = 1 exactly.
    let beta = smoothness.map_or(1.0, |s| s.beta);
    let schedule = Schedule::new(settings.eta, beta, settings.tau_l, settings.tau_e)?;

    let mut est = estimate_gradient_differences(spec, dataset, plan, &states, &probes)?;
    est.g = estimate_g(spec, &dataset.subset(&plan.shards.concat()), &probes)?;
    est.lambda_star = settings.lambda_star;
    let series = prob_diff_series(dataset, plan, &states)?;
    let theta0 = crate::engine::edge_weights(&states[0], &plan.shard_sizes());
    if let Some(lambda) = settings.lambda_star.filter(|l| *l > 0.0 && *l < 1.0) {
        let (l_n, l) = fit_l(&series, lambda, &theta0)?;
        est.l_n = l_n;
        est.l = l;
    }
    let edge_gap = check_edge_gap(settings.case, &est, settings.edge_gap_rel_tol * est.delta)?;
    let d0 = edge_gap.delta0;
    let closed = ClosedFormInputs {
        delta: est.delta,
        g: est.g,
        edges: states[0].num_edges(),
        l: est.l,
        lambda_star: settings.lambda_star.unwrap_or(1.0),
    };

    let mut epochs = BTreeMap::new();
    let mut u_series = Vec::with_capacity(cloud_epochs);
    for k in 1..=cloud_epochs {
        let u_nomob = u_static(&schedule, est.delta, d0);
        let u_mob = u_mobile(&schedule, est.delta, k, &est.delta_series)?;
        let lo = (k - 1) * schedule.tau_e;
        let hi = (k * schedule.tau_e + 1).min(est.delta_series.len());
        u_series.push(if settings.lambda_star.is_some() { u_mob } else { u_nomob });
        epochs.insert(
            k,
            EpochBound {
                u_static: u_nomob,
                u_mobile: u_mob,
                gamma_def: mobility_factor(u_nomob, u_mob, schedule.tau_l, schedule.tau_e),
                gamma_closed: mobility_factor_closed(settings.case, &schedule, &closed, k).ok(),
                gamma_ring: settings
                    .ring_sojourn
                    .filter(|_| settings.case == FactorCase::EdgeNiid)
                    .and_then(|ps| {
                        mobility_factor_ring(&schedule, &closed, k, ps, settings.ring_factor_power).ok()
                    }),
                delta: est.delta,
                delta_series: est.delta_series[lo..hi].to_vec(),
                cf_diff: cf_at_boundaries.and_then(|c| c.get(k - 1).copied()),
            },
        );
    }

    let (phi, convergence, rho) = if quadratic {
        let w_star = spec.weighted_target(&global_label_weights(dataset, plan))?;
        let phi = phi_from_checkpoints(checkpoints, &w_star, beta, settings.eta)?;
        let rho = estimate_quadratic_rho(spec, dataset, plan, checkpoints)?;
        let points = settings
            .epsilon_grid
            .iter()
            .map(|&epsilon| {
                let inputs = BoundInputs {
                    eta: settings.eta,
                    tau_l: settings.tau_l,
                    tau_e: settings.tau_e,
                    cloud_epochs,
                    smoothness: SmoothnessParams { beta, rho },
                    epsilon,
                    phi,
                };
                match convergence_bound(&inputs, &u_series) {
                    Ok(b) => ConvergencePoint { epsilon, bound: Some(b), failed: None },
                    Err(e) => ConvergencePoint { epsilon, bound: None, failed: Some(e.to_string()) },
                }
            })
            .collect();
        (Some(phi), points, Some(rho))
    } else {
        (None, vec![], smoothness.map(|s| s.rho))
    };

    Ok(BoundReport {
        constants: BoundConstants {
            case: settings.case,
            schedule,
            rho,
            big_h: schedule.big_h(),
            delta: est.delta,
            delta_m: est.delta_m,
            delta0: d0,
            g: est.g,
            l_n: est.l_n,
            l: est.l,
            lambda_star: settings.lambda_star,
            edge_gap,
            phi,
            convergence,
        },
        epochs,
    })
}

/// Sample weights of each target index over the whole training split.
fn global_label_weights(dataset: &LabeledDataset, plan: &PartitionPlan) -> Vec<f64> {
    let counts = label_counts(dataset, &plan.shards.concat());
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// Lipschitz constant of the vehicle losses over the ball holding every
/// checkpoint: `max_m sup ‖w − b̄_m‖` plus the spread of targets inside the shard.
fn estimate_quadratic_rho(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    checkpoints: &[Checkpoint],
) -> Result<f64> {
    let mut rho = 0.0f64;
    for shard in &plan.shards {
        let batch = dataset.gather(shard)?;
        for c in checkpoints {
            for w in [&c.cloud_model, &c.v_tilde] {
                let (_, g) = loss_and_gradient(spec, w, &batch)?;
                rho = rho.max(g.norm());
            }
        }
    }
    Ok(rho)
}

/// Convenience wrapper taking a whole [`RunOutput`].
pub fn report_for_run(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    output: &RunOutput,
    settings: &ReportSettings,
) -> Result<BoundReport> {
    let cf: Vec<f64> = output
        .records
        .iter()
        .filter(|r| r.event == crate::engine::Event::CloudAgg)
        .map(|r| r.cf_difference)
        .collect();
    bound_report(
        spec,
        dataset,
        plan,
        &output.membership,
        &output.checkpoints,
        Some(&cf),
        settings,
    )
}
