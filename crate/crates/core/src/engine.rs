//! The Mob-HierFAVG training loop.
//!
//! One cloud epoch is `tau_e` edge epochs followed by a cloud aggregation.
//! One edge epoch is: edge distribution, `tau_l` local SGD updates, one
//! mobility step, then edge aggregation over the vehicles each edge covers
//! after the move. A vehicle can therefore download from one edge and upload
//! to another.
//!
//! Alongside the fleet the loop tracks two reference trajectories: the
//! virtual cloud model `u` (the `α`-weighted mean of all vehicle models) and
//! the virtual centralized model `v` (full-gradient descent on the global
//! loss, reset to `u` at each cloud aggregation).

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{label_counts, LabelDistribution, LabeledDataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::mobility::{assignments_at, step_assignments, MobilityState, TrajectoryTrace, TransitionMatrix};
use crate::model::{evaluate_accuracy, forward_loss, loss_and_gradient, gradient, sgd_step, ModelSpec, ParamVector};
use crate::rng::{stream, Domain};

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Static,
    Markov(TransitionMatrix),
    Trace(TrajectoryTrace),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyEdgePolicy {
    /// Keep the edge's previous model.
    CarryForward,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// Each local step uses the vehicle's whole shard.
    Full,
    Samples(usize),
}

/// Which events produce a [`RoundRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Cloud,
    Edge,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HflConfig {
    pub vehicles: usize,
    pub edges: usize,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    pub eta: f64,
    pub batch: BatchSize,
    pub scenario: Scenario,
    pub seed: u64,
    pub workers: usize,
    pub empty_edge: EmptyEdgePolicy,
    /// Track the virtual centralized model (one full-batch gradient per local step).
    pub track_virtual: bool,
    pub log: LogLevel,
}

impl Default for HflConfig {
    fn default() -> Self {
        Self {
            vehicles: 32,
            edges: 4,
            tau_l: 6,
            tau_e: 10,
            cloud_epochs: 600,
            eta: 0.1,
            batch: BatchSize::Samples(20),
            scenario: Scenario::Static,
            seed: 0,
            workers: 1,
            empty_edge: EmptyEdgePolicy::CarryForward,
            track_virtual: true,
            log: LogLevel::Edge,
        }
    }
}

impl HflConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M", self.vehicles),
            ("N", self.edges),
            ("tau_l", self.tau_l),
            ("tau_e", self.tau_e),
            ("K", self.cloud_epochs),
            ("workers", self.workers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.vehicles < self.edges {
            return Err(Error::config("M", "need M >= N"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("eta", "must be positive"));
        }
        if self.batch == BatchSize::Samples(0) {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        match &self.scenario {
            Scenario::Markov(q) if q.size() != self.edges => {
                Err(Error::config("mobility", "transition matrix size differs from N"))
            }
            Scenario::Trace(t) if t.num_edges() != self.edges => {
                Err(Error::config("mobility", "trace edge count differs from N"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Local,
    EdgeAgg,
    CloudAgg,
}

impl Event {
    pub fn as_str(&self) -> &'static str {
        match self {
            Event::Local => "local",
            Event::EdgeAgg => "edge_agg",
            Event::CloudAgg => "cloud_agg",
        }
    }
}

/// Metrics at one logged event.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub tau: usize,
    /// 1-based cloud epoch the event belongs to.
    pub cloud_epoch: usize,
    /// 1-based edge epoch within the cloud epoch.
    pub edge_round: usize,
    pub event: Event,
    /// Accuracy of the virtual cloud model; `None` for the quadratic task.
    pub test_accuracy: Option<f64>,
    /// Global training loss of the virtual cloud model.
    pub train_loss: f64,
    /// `‖u − ṽ‖`; zero when the virtual centralized model is not tracked.
    pub cf_difference: f64,
    /// `(1/N) Σ_n ‖p − p_n‖₁` for the current edge membership.
    pub avg_prob_difference: f64,
    pub theta: Vec<f64>,
}

/// Model snapshot at a cloud boundary `k·tau_l·tau_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud_epoch: usize,
    pub cloud_model: ParamVector,
    /// Virtual centralized model before resynchronization (`w⁽⁰⁾` at k = 0).
    pub v_tilde: ParamVector,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Edge membership at the end of every edge epoch (step 0 is the start).
    pub membership: TrajectoryTrace,
    pub checkpoints: Vec<Checkpoint>,
    pub final_model: ParamVector,
}

/// Receives each record as soon as it is produced.
pub trait RunObserver {
    fn on_record(&mut self, record: &RoundRecord) -> Result<()>;
}

impl RunObserver for () {
    fn on_record(&mut self, _: &RoundRecord) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&RoundRecord) -> Result<()>> RunObserver for F {
    fn on_record(&mut self, record: &RoundRecord) -> Result<()> {
        self(record)
    }
}

/// Without-replacement minibatches over one shard, reshuffled per pass.
#[derive(Debug, Clone)]
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(shard: &[usize], seed: u64, vehicle: usize) -> Self {
        let mut rng = stream(seed, Domain::Batch, vehicle as u64, 0);
        let mut order = shard.to_vec();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    fn next(&mut self, size: BatchSize) -> &[usize] {
        let size = match size {
            BatchSize::Full => return &self.order,
            BatchSize::Samples(s) if s >= self.order.len() => return &self.order,
            BatchSize::Samples(s) => s,
        };
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += size;
        &self.order[start..start + size]
    }
}

#[derive(Debug, Clone)]
struct Vehicle {
    params: ParamVector,
    shard: Vec<usize>,
    sampler: BatchSampler,
}

/// Per-vehicle models, shards, and positions.
#[derive(Debug, Clone)]
pub struct FleetState {
    vehicles: Vec<Vehicle>,
    pub mobility: MobilityState,
    pub tau: usize,
}

impl FleetState {
    pub fn new(plan: &PartitionPlan, mobility: MobilityState, init: &ParamVector, seed: u64) -> Result<Self> {
        if plan.shards.len() != mobility.num_vehicles() {
            return Err(Error::contract("plan and mobility state disagree on M"));
        }
        if let Some(m) = plan.shards.iter().position(Vec::is_empty) {
            return Err(Error::Vehicle {
                vehicle: m,
                source: Box::new(Error::Empty("shard".into())),
            });
        }
        let vehicles = plan
            .shards
            .iter()
            .enumerate()
            .map(|(m, shard)| Vehicle {
                params: init.clone(),
                shard: shard.clone(),
                sampler: BatchSampler::new(shard, seed, m),
            })
            .collect();
        Ok(Self {
            vehicles,
            mobility,
            tau: 0,
        })
    }

    pub fn params(&self) -> Vec<&ParamVector> {
        self.vehicles.iter().map(|v| &v.params).collect()
    }

    pub fn params_of(&self, vehicle: usize) -> &ParamVector {
        &self.vehicles[vehicle].params
    }

    pub fn set_params(&mut self, vehicle: usize, params: ParamVector) {
        self.vehicles[vehicle].params = params;
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.vehicles.iter().map(|v| v.shard.len()).collect()
    }

    /// `α_m = |D_m| / |D|`
    pub fn alpha(&self) -> Vec<f64> {
        let sizes = self.shard_sizes();
        let total: usize = sizes.iter().sum();
        sizes.iter().map(|&s| s as f64 / total as f64).collect()
    }

    /// `θ_n = Σ_{m∈E_n} |D_m| / |D|` under the current membership.
    pub fn theta(&self) -> Vec<f64> {
        edge_weights(&self.mobility, &self.shard_sizes())
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }
}

pub fn edge_weights(state: &MobilityState, sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    let mut theta = vec![0.0; state.num_edges()];
    for (m, &size) in sizes.iter().enumerate() {
        theta[state.edge_of(m)] += size as f64;
    }
    theta.iter_mut().for_each(|t| *t /= total as f64);
    theta
}

/// `w_m ← w_{e,n}` for every vehicle `m` covered by edge `n`.
pub fn edge_distribute(edge_models: &[ParamVector], fleet: &mut FleetState) -> Result<()> {
    if edge_models.len() != fleet.mobility.num_edges() {
        return Err(Error::contract("one edge model per edge required"));
    }
    for (m, vehicle) in fleet.vehicles.iter_mut().enumerate() {
        vehicle.params = edge_models[fleet.mobility.edge_of(m)].clone();
    }
    Ok(())
}

/// One SGD step on every vehicle, each on its own sampled batch. With more
/// than one worker the vehicles are processed on `pool`; the result is the
/// same either way.
pub fn local_update_round(
    fleet: &mut FleetState,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    eta: f64,
    batch: BatchSize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<()> {
    let update = |(m, vehicle): (usize, &mut Vehicle)| -> Result<()> {
        let indices = vehicle.sampler.next(batch);
        let step = dataset
            .gather(indices)
            .and_then(|b| gradient(spec, &vehicle.params, &b))
            .and_then(|g| sgd_step(&vehicle.params, &g, eta))
            .map_err(|e| Error::Vehicle {
                vehicle: m,
                source: Box::new(e),
            })?;
        vehicle.params = step;
        Ok(())
    };
    match pool {
        Some(pool) => pool.install(|| {
            fleet
                .vehicles
                .par_iter_mut()
                .enumerate()
                .map(update)
                .collect::<Result<Vec<()>>>()
        })?,
        None => fleet
            .vehicles
            .iter_mut()
            .enumerate()
            .map(update)
            .collect::<Result<Vec<()>>>()?,
    };
    Ok(())
}

/// `w̃_{e,n} = Σ_{m∈E_n} α_{m,n} w̃_m` over the current membership.
/// `previous` supplies the model kept by an empty edge under `CarryForward`.
pub fn edge_aggregate(
    fleet: &FleetState,
    previous: &[ParamVector],
    policy: EmptyEdgePolicy,
) -> Result<Vec<ParamVector>> {
    let members = fleet.mobility.members();
    let sizes = fleet.shard_sizes();
    let mut out = Vec::with_capacity(members.len());
    for (n, covered) in members.iter().enumerate() {
        if covered.is_empty() {
            match policy {
                EmptyEdgePolicy::CarryForward => {
                    warn!("edge {n} covers no vehicle at tau {}; keeping its model", fleet.tau);
                    out.push(previous[n].clone());
                    continue;
                }
                EmptyEdgePolicy::Fail => {
                    warn!("edge {n} covers no vehicle at tau {}", fleet.tau);
                    return Err(Error::DegenerateEdge {
                        edge: n,
                        message: format!("no vehicle to aggregate at tau {}", fleet.tau),
                    });
                }
            }
        }
        let total: usize = covered.iter().map(|&m| sizes[m]).sum();
        let weights: Vec<f64> = covered.iter().map(|&m| sizes[m] as f64 / total as f64).collect();
        let dim = fleet.vehicles[covered[0]].params.dim();
        out.push(ParamVector::weighted_sum(
            dim,
            weights.iter().copied().zip(covered.iter().map(|&m| &fleet.vehicles[m].params)),
        ));
    }
    Ok(out)
}

/// `w = Σ θ_n w̃_{e,n}`
pub fn cloud_aggregate(edge_models: &[ParamVector], theta: &[f64]) -> Result<ParamVector> {
    if edge_models.len() != theta.len() || edge_models.is_empty() {
        return Err(Error::contract("one weight per edge model required"));
    }
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::contract(format!("edge weights sum to {sum}")));
    }
    Ok(ParamVector::weighted_sum(
        edge_models[0].dim(),
        theta.iter().copied().zip(edge_models.iter()),
    ))
}

/// `u = Σ_m α_m w_m`
pub fn virtual_cloud(fleet: &FleetState) -> ParamVector {
    let alpha = fleet.alpha();
    let dim = fleet.vehicles[0].params.dim();
    ParamVector::weighted_sum(dim, alpha.iter().copied().zip(fleet.vehicles.iter().map(|v| &v.params)))
}

/// `ṽ = v − η∇F(v)` with the exact full-dataset gradient.
pub fn virtual_centralized_step(
    v: &ParamVector,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    eta: f64,
) -> Result<ParamVector> {
    let batch = dataset.full_batch()?;
    sgd_step(v, &gradient(spec, v, &batch)?, eta)
}

pub fn cf_difference(u: &ParamVector, v_tilde: &ParamVector) -> f64 {
    u.distance(v_tilde)
}

/// Initial vehicle placement: the plan's assignment when it has one,
/// otherwise a seeded uniformly random placement with `M/N` (±1) vehicles per edge.
pub fn initial_placement(plan: &PartitionPlan, edges: usize, seed: u64) -> Result<MobilityState> {
    if let Some(assignment) = &plan.edge_assignment {
        return MobilityState::new(assignment.clone(), edges);
    }
    let m = plan.num_vehicles();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut stream(seed, Domain::Placement, 0, 0));
    let mut assignment = vec![0; m];
    for (slot, &vehicle) in order.iter().enumerate() {
        assignment[vehicle] = slot * edges / m;
    }
    MobilityState::new(assignment, edges)
}

/// Global label distribution plus per-vehicle label counts, for the
/// probability-difference metric.
struct LabelTracker {
    global: LabelDistribution,
    per_vehicle: Vec<Vec<f64>>,
}

impl LabelTracker {
    fn new(dataset: &LabeledDataset, plan: &PartitionPlan) -> Result<Self> {
        let all: Vec<usize> = plan.shards.concat();
        let global = LabelDistribution::from_counts(&label_counts(dataset, &all))?;
        let per_vehicle = plan.shards.iter().map(|s| label_counts(dataset, s)).collect();
        Ok(Self { global, per_vehicle })
    }

    /// `(1/N) Σ_n ‖p − p_n‖₁`; empty edges contribute nothing.
    fn average_difference(&self, state: &MobilityState) -> f64 {
        let classes = self.global.num_classes();
        let mut pooled = vec![vec![0.0; classes]; state.num_edges()];
        for (m, counts) in self.per_vehicle.iter().enumerate() {
            for (acc, c) in pooled[state.edge_of(m)].iter_mut().zip(counts) {
                *acc += c;
            }
        }
        let total: f64 = pooled
            .iter()
            .filter_map(|counts| LabelDistribution::from_counts(counts).ok())
            .map(|p| {
                p.probs()
                    .iter()
                    .zip(self.global.probs())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        total / state.num_edges() as f64
    }
}

/// Run the full training procedure.
///
/// Records are handed to `observer` as they are produced, so an error leaves
/// every metric up to the failing event with the observer.
pub fn run_mob_hierfavg(
    config: &HflConfig,
    plan: &PartitionPlan,
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    config.validate()?;
    spec.validate()?;
    if plan.num_vehicles() != config.vehicles {
        return Err(Error::config(
            "M",
            format!("plan has {} shards, config has M = {}", plan.num_vehicles(), config.vehicles),
        ));
    }
    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::config("workers", e.to_string()))?,
        )
    } else {
        None
    };

    let initial = match &config.scenario {
        Scenario::Trace(trace) => assignments_at(trace, 0, config.vehicles)?,
        _ => initial_placement(plan, config.edges, config.seed)?,
    };
    let init = spec.init_params(&mut stream(config.seed, Domain::Init, 0, 0));
    let mut fleet = FleetState::new(plan, initial, &init, config.seed)?;
    let labels = LabelTracker::new(train, plan)?;
    let test = if spec.is_classifier() { test } else { None };
    // The global loss F covers the union of the shards, not samples no vehicle holds.
    let full = train.gather(&plan.shards.concat())?;

    let mut membership = TrajectoryTrace::new(config.edges);
    membership.record(0, &fleet.mobility)?;
    let mut edge_models = vec![init.clone(); config.edges];
    let mut v = init.clone();
    let mut v_tilde = init.clone();
    let mut checkpoints = vec![Checkpoint {
        cloud_epoch: 0,
        cloud_model: init.clone(),
        v_tilde: init.clone(),
    }];
    let mut records = Vec::new();
    let mut edge_epoch = 0u64;

    let mut emit = |event: Event,
                    k: usize,
                    r: usize,
                    fleet: &FleetState,
                    u: &ParamVector,
                    v_tilde: &ParamVector,
                    records: &mut Vec<RoundRecord>|
     -> Result<()> {
        let wanted = match event {
            Event::Local => config.log >= LogLevel::All,
            Event::EdgeAgg => config.log >= LogLevel::Edge,
            Event::CloudAgg => true,
        };
        if !wanted {
            return Ok(());
        }
        let theta = fleet.theta();
        let record = RoundRecord {
            tau: fleet.tau,
            cloud_epoch: k,
            edge_round: r,
            event,
            test_accuracy: test.map(|t| evaluate_accuracy(spec, u, t)).transpose()?,
            train_loss: forward_loss(spec, u, &full)?,
            cf_difference: if config.track_virtual { cf_difference(u, v_tilde) } else { 0.0 },
            avg_prob_difference: labels.average_difference(&fleet.mobility),
            theta,
        };
        observer.on_record(&record)?;
        records.push(record);
        Ok(())
    };

    for k in 1..=config.cloud_epochs {
        for r in 1..=config.tau_e {
            edge_distribute(&edge_models, &mut fleet)?;
            for _ in 0..config.tau_l {
                fleet.tau += 1;
                local_update_round(&mut fleet, spec, train, config.eta, config.batch, pool.as_ref())?;
                if config.track_virtual {
                    let (_, g) = loss_and_gradient(spec, &v, &full)?;
                    v_tilde = sgd_step(&v, &g, config.eta)?;
                    v = v_tilde.clone();
                }
                if config.log >= LogLevel::All {
                    let u = virtual_cloud(&fleet);
                    emit(Event::Local, k, r, &fleet, &u, &v_tilde, &mut records)?;
                }
            }

            edge_epoch += 1;
            fleet.mobility = match &config.scenario {
                Scenario::Static => fleet.mobility.clone(),
                Scenario::Markov(q) => step_assignments(&fleet.mobility, q, config.seed, edge_epoch)?,
                Scenario::Trace(trace) => assignments_at(trace, edge_epoch as usize, config.vehicles)?,
            };
            membership.record(edge_epoch as usize, &fleet.mobility)?;

            edge_models = edge_aggregate(&fleet, &edge_models, config.empty_edge)?;
            let u = virtual_cloud(&fleet);
            emit(Event::EdgeAgg, k, r, &fleet, &u, &v_tilde, &mut records)?;
        }

        let cloud = cloud_aggregate(&edge_models, &fleet.theta())?;
        edge_models = vec![cloud.clone(); config.edges];
        emit(Event::CloudAgg, k, config.tau_e, &fleet, &cloud, &v_tilde, &mut records)?;
        checkpoints.push(Checkpoint {
            cloud_epoch: k,
            cloud_model: cloud.clone(),
            v_tilde: v_tilde.clone(),
        });
        // v ← u at every cloud boundary
        v = cloud;
    }

    let final_model = edge_models[0].clone();
    edge_distribute(&edge_models, &mut fleet)?;
    Ok(RunOutput {
        records,
        membership,
        checkpoints,
        final_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_iid};
    use crate::mobility::{ring_transition, RingParams};
    use proptest::prelude::*;

    fn quad_setup(targets: Vec<Vec<f64>>, copies: usize) -> (ModelSpec, LabeledDataset, PartitionPlan) {
        let m = targets.len();
        let spec = ModelSpec::MeanQuadratic {
            targets: targets.into_iter().map(ParamVector::from_vec).collect(),
        };
        let labels: Vec<usize> = (0..m).flat_map(|t| std::iter::repeat_n(t, copies)).collect();
        let ds = LabeledDataset::new(vec![], labels, 0, m).unwrap();
        let shards = (0..m).map(|t| (t * copies..(t + 1) * copies).collect()).collect();
        let plan = PartitionPlan {
            shards,
            edge_assignment: None,
            unassigned_classes: vec![],
        };
        (spec, ds, plan)
    }

    fn fleet_with(params: Vec<Vec<f64>>, sizes: &[usize], assignment: Vec<usize>, edges: usize) -> FleetState {
        let mut start = 0;
        let shards = sizes
            .iter()
            .map(|&s| {
                let shard: Vec<usize> = (start..start + s).collect();
                start += s;
                shard
            })
            .collect();
        let plan = PartitionPlan {
            shards,
            edge_assignment: None,
            unassigned_classes: vec![],
        };
        let dim = params[0].len();
        let mut fleet = FleetState::new(
            &plan,
            MobilityState::new(assignment, edges).unwrap(),
            &ParamVector::zeros(dim),
            0,
        )
        .unwrap();
        for (m, p) in params.into_iter().enumerate() {
            fleet.set_params(m, ParamVector::from_vec(p));
        }
        fleet
    }

    #[test]
    fn distribute_copies_edge_models() {
        let mut fleet = fleet_with(vec![vec![0.0]; 4], &[1, 1, 1, 1], vec![0, 1, 1, 0], 2);
        let models = vec![ParamVector::from_vec(vec![1.0]), ParamVector::from_vec(vec![2.0])];
        edge_distribute(&models, &mut fleet).unwrap();
        let got: Vec<f64> = fleet.params().iter().map(|p| p.as_slice()[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 2.0, 1.0]);

        let same = vec![ParamVector::from_vec(vec![5.0]); 2];
        edge_distribute(&same, &mut fleet).unwrap();
        assert!(fleet.params().iter().all(|p| p.as_slice() == [5.0]));
    }

    #[test]
    fn edge_aggregate_examples() {
        let fleet = fleet_with(vec![vec![0.0], vec![4.0]], &[10, 30], vec![0, 0], 1);
        let prev = vec![ParamVector::zeros(1)];
        let out = edge_aggregate(&fleet, &prev, EmptyEdgePolicy::Fail).unwrap();
        assert!((out[0].as_slice()[0] - 3.0).abs() < 1e-15);

        let fleet = fleet_with(vec![vec![1.0], vec![2.0], vec![3.0]], &[1, 2, 3], vec![0, 1, 2], 3);
        let out = edge_aggregate(&fleet, &vec![ParamVector::zeros(1); 3], EmptyEdgePolicy::Fail).unwrap();
        for (m, model) in out.iter().enumerate() {
            assert_eq!(model, fleet.params_of(m));
        }

        let params: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.7, (i * i) as f64]).collect();
        let fleet = fleet_with(params.clone(), &[5; 8], vec![0; 8], 1);
        let out = edge_aggregate(&fleet, &[ParamVector::zeros(2)], EmptyEdgePolicy::Fail).unwrap();
        for d in 0..2 {
            let brute: f64 = params.iter().map(|p| p[d]).sum::<f64>() / 8.0;
            assert!((out[0].as_slice()[d] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_edge_policies() {
        let fleet = fleet_with(vec![vec![1.0], vec![3.0]], &[1, 1], vec![0, 0], 2);
        let prev = vec![ParamVector::from_vec(vec![9.0]), ParamVector::from_vec(vec![7.0])];
        let out = edge_aggregate(&fleet, &prev, EmptyEdgePolicy::CarryForward).unwrap();
        assert_eq!(out[1].as_slice(), &[7.0]);
        assert!(matches!(
            edge_aggregate(&fleet, &prev, EmptyEdgePolicy::Fail),
            Err(Error::DegenerateEdge { edge: 1, .. })
        ));
    }

    #[test]
    fn cloud_aggregate_examples() {
        let same = vec![ParamVector::from_vec(vec![2.5, -1.0]); 3];
        assert_eq!(cloud_aggregate(&same, &[0.2, 0.3, 0.5]).unwrap().as_slice(), &[2.5, -1.0]);
        let models = vec![ParamVector::from_vec(vec![0.0]), ParamVector::from_vec(vec![4.0])];
        assert_eq!(cloud_aggregate(&models, &[0.25, 0.75]).unwrap().as_slice(), &[3.0]);
        assert!(matches!(cloud_aggregate(&models, &[0.25, 0.7]), Err(Error::Contract(_))));
    }

    #[test]
    fn virtual_models() {
        let fleet = fleet_with(vec![vec![2.0, 1.0]; 3], &[1, 2, 3], vec![0, 0, 0], 1);
        assert_eq!(virtual_cloud(&fleet).as_slice(), &[2.0, 1.0]);

        let params = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 1.0]];
        let fleet = fleet_with(params.clone(), &[1, 2, 5], vec![0, 0, 0], 1);
        let u = virtual_cloud(&fleet);
        for d in 0..2 {
            let brute = (params[0][d] + 2.0 * params[1][d] + 5.0 * params[2][d]) / 8.0;
            assert!((u.as_slice()[d] - brute).abs() < 1e-12);
        }

        let (spec, ds, _) = quad_setup(vec![vec![1.0], vec![1.0]], 2);
        let w_star = ParamVector::from_vec(vec![1.0]);
        assert_eq!(virtual_centralized_step(&w_star, &spec, &ds, 0.1).unwrap(), w_star);
        let step = virtual_centralized_step(&ParamVector::zeros(1), &spec, &ds, 0.1).unwrap();
        assert!((step.as_slice()[0] - 0.1).abs() < 1e-15);

        assert_eq!(cf_difference(&ParamVector::from_vec(vec![3.0]), &ParamVector::from_vec(vec![1.0])), 2.0);
        assert_eq!(cf_difference(&u, &u), 0.0);
    }

    #[test]
    fn local_update_matches_centralized_step_for_one_vehicle() {
        let ds = generate_synthetic(3, 4, 10, 2.0, 1).unwrap();
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 4,
            num_classes: 3,
        };
        let plan = partition_iid(&ds, 1, 1).unwrap();
        let init = spec.init_params(&mut stream(1, Domain::Init, 0, 0));
        let mut fleet = FleetState::new(&plan, MobilityState::new(vec![0], 1).unwrap(), &init, 1).unwrap();
        local_update_round(&mut fleet, &spec, &ds, 0.1, BatchSize::Full, None).unwrap();
        let central = virtual_centralized_step(&init, &spec, &ds, 0.1).unwrap();
        // Full shard in shuffled order: same gradient up to summation order.
        for (a, b) in fleet.params_of(0).as_slice().iter().zip(central.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gradients_leave_fleet_unchanged() {
        let (spec, ds, plan) = quad_setup(vec![vec![1.0, 2.0]; 4], 3);
        let target = ParamVector::from_vec(vec![1.0, 2.0]);
        let mut fleet = FleetState::new(&plan, MobilityState::new(vec![0, 0, 1, 1], 2).unwrap(), &target, 3).unwrap();
        local_update_round(&mut fleet, &spec, &ds, 0.1, BatchSize::Samples(2), None).unwrap();
        assert!(fleet.params().iter().all(|p| **p == target));
    }

    #[test]
    fn local_updates_independent_of_worker_count() {
        let ds = generate_synthetic(4, 5, 40, 2.0, 9).unwrap();
        let spec = ModelSpec::Mlp {
            input_dim: 5,
            hidden: vec![6],
            num_classes: 4,
        };
        let plan = partition_iid(&ds, 8, 2).unwrap();
        let init = spec.init_params(&mut stream(4, Domain::Init, 0, 0));
        let state = MobilityState::new(vec![0, 0, 1, 1, 0, 1, 0, 1], 2).unwrap();
        let mut serial = FleetState::new(&plan, state.clone(), &init, 4).unwrap();
        let mut parallel = FleetState::new(&plan, state, &init, 4).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        for _ in 0..5 {
            local_update_round(&mut serial, &spec, &ds, 0.1, BatchSize::Samples(7), None).unwrap();
            local_update_round(&mut parallel, &spec, &ds, 0.1, BatchSize::Samples(7), Some(&pool)).unwrap();
        }
        for m in 0..8 {
            assert_eq!(serial.params_of(m), parallel.params_of(m));
        }
    }

    #[test]
    fn static_single_vehicle_has_zero_cf_difference() {
        let ds = generate_synthetic(3, 4, 10, 2.0, 5).unwrap();
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 4,
            num_classes: 3,
        };
        let plan = partition_iid(&ds, 1, 1).unwrap();
        let config = HflConfig {
            vehicles: 1,
            edges: 1,
            tau_l: 3,
            tau_e: 2,
            cloud_epochs: 4,
            batch: BatchSize::Full,
            log: LogLevel::All,
            ..HflConfig::default()
        };
        let out = run_mob_hierfavg(&config, &plan, &spec, &ds, Some(&ds), &mut ()).unwrap();
        assert!(out.records.iter().all(|r| r.cf_difference < 1e-13), "{:?}", out.records.iter().map(|r| r.cf_difference).collect::<Vec<_>>());
    }

    #[test]
    fn one_step_two_vehicles_matches_hand_simulation() {
        let (spec, ds, plan) = quad_setup(vec![vec![1.0, 0.0], vec![0.0, 3.0]], 2);
        let config = HflConfig {
            vehicles: 2,
            edges: 1,
            tau_l: 1,
            tau_e: 1,
            cloud_epochs: 1,
            batch: BatchSize::Full,
            ..HflConfig::default()
        };
        let out = run_mob_hierfavg(&config, &plan, &spec, &ds, None, &mut ()).unwrap();
        let w0 = spec.init_params(&mut stream(0, Domain::Init, 0, 0));
        let w0 = w0.as_slice();
        // w_m = w0 − 0.1 (w0 − b_m); cloud = mean
        let expected: Vec<f64> = (0..2)
            .map(|d| {
                let b = [[1.0, 0.0], [0.0, 3.0]];
                (0..2).map(|m| w0[d] - 0.1 * (w0[d] - b[m][d])).sum::<f64>() / 2.0
            })
            .collect();
        for (a, b) in out.final_model.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn event_counts_at_default_periods() {
        let (spec, ds, plan) = quad_setup((0..32).map(|i| vec![i as f64, 1.0]).collect(), 2);
        let config = HflConfig {
            cloud_epochs: 5,
            log: LogLevel::All,
            scenario: Scenario::Markov(ring_transition(RingParams::new(4, 0.5).unwrap()).unwrap()),
            ..HflConfig::default()
        };
        let out = run_mob_hierfavg(&config, &plan, &spec, &ds, None, &mut ()).unwrap();
        let count = |e: Event| out.records.iter().filter(|r| r.event == e).count();
        assert_eq!(count(Event::CloudAgg), 5);
        assert_eq!(count(Event::EdgeAgg), 50);
        assert_eq!(count(Event::Local), 300);
        assert_eq!(out.checkpoints.len(), 6);
        assert_eq!(out.membership.steps().count(), 51);
        for r in &out.records {
            assert!((r.theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_virtual_models_coincide() {
        // Full-batch steps on the quadratic are affine, so the weighted average
        // of vehicle models follows centralized descent exactly.
        let (spec, ds, plan) = quad_setup(vec![vec![1.0], vec![-1.0], vec![4.0], vec![2.0]], 1);
        let config = HflConfig {
            vehicles: 4,
            edges: 2,
            tau_l: 2,
            tau_e: 2,
            cloud_epochs: 3,
            batch: BatchSize::Full,
            log: LogLevel::All,
            ..HflConfig::default()
        };
        let out = run_mob_hierfavg(&config, &plan, &spec, &ds, None, &mut ()).unwrap();
        assert!(out.records.iter().all(|r| r.cf_difference < 1e-12));
        for c in &out.checkpoints {
            assert!(c.cloud_model.distance(&c.v_tilde) < 1e-12);
        }
    }

    #[test]
    fn observer_sees_records_before_failure() {
        let (spec, ds, plan) = quad_setup(vec![vec![1.0]; 2], 1);
        let config = HflConfig {
            vehicles: 2,
            edges: 2,
            tau_l: 1,
            tau_e: 2,
            cloud_epochs: 3,
            empty_edge: EmptyEdgePolicy::Fail,
            scenario: Scenario::Markov(TransitionMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap()),
            ..HflConfig::default()
        };
        let plan = PartitionPlan {
            edge_assignment: Some(vec![0, 1]),
            ..plan
        };
        let mut seen = 0;
        let mut counter = |_: &RoundRecord| -> Result<()> {
            seen += 1;
            Ok(())
        };
        let err = run_mob_hierfavg(&config, &plan, &spec, &ds, None, &mut counter).unwrap_err();
        assert!(matches!(err, Error::DegenerateEdge { edge: 1, .. }));
        assert_eq!(seen, 0);
    }

    #[test]
    fn initial_placement_is_balanced() {
        let plan = PartitionPlan {
            shards: (0..32).map(|i| vec![i]).collect(),
            edge_assignment: None,
            unassigned_classes: vec![],
        };
        let state = initial_placement(&plan, 4, 3).unwrap();
        assert_eq!(state.counts(), vec![8; 4]);
        assert_eq!(state, initial_placement(&plan, 4, 3).unwrap());
    }

    proptest! {
        #[test]
        fn hierarchy_collapses_to_flat_mean(
            values in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..12),
            sizes_seed in prop::collection::vec(1usize..50, 12),
            edges_seed in prop::collection::vec(0usize..4, 12),
        ) {
            let m = values.len();
            let sizes = &sizes_seed[..m];
            let assignment: Vec<usize> = edges_seed[..m].to_vec();
            let mut fleet = fleet_with(values.clone(), sizes, assignment, 4);
            let prev = vec![ParamVector::zeros(3); 4];
            let edge_models = edge_aggregate(&fleet, &prev, EmptyEdgePolicy::CarryForward).unwrap();
            let theta = fleet.theta();
            prop_assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for covered in fleet.mobility.members() {
                if covered.is_empty() { continue; }
                let total: usize = covered.iter().map(|&i| sizes[i]).sum();
                let alpha_sum: f64 = covered.iter().map(|&i| sizes[i] as f64 / total as f64).sum();
                prop_assert!((alpha_sum - 1.0).abs() < 1e-12);
            }
            let cloud = cloud_aggregate(&edge_models, &theta).unwrap();
            let flat = virtual_cloud(&fleet);
            for (a, b) in cloud.as_slice().iter().zip(flat.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let synced = vec![cloud.clone(); 4];
            edge_distribute(&synced, &mut fleet).unwrap();
            prop_assert!(fleet.params().iter().all(|p| **p == cloud));
            prop_assert!(synced.iter().all(|e| *e == cloud));
        }
    }
}
