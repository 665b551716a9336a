//! Markov mobility of vehicles between edge servers.
//!
//! A vehicle's edge is observed once per edge epoch. Between observations it
//! moves according to a row-stochastic transition matrix `Q`, where
//! `Q[i][j]` is the probability of moving from edge `i` to edge `j`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

const ROW_SUM_TOL: f64 = 1e-12;
const UNIT_MODULUS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::contract("transition matrix needs at least one edge"));
        }
        let mut entries = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::contract(format!("row {i} has {} entries, expected {size}", row.len())));
            }
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::contract(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::contract(format!("row {i} sums to {sum}")));
            }
            entries.extend_from_slice(row);
        }
        Ok(Self { size, entries })
    }

    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        Self { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.size + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.size..(from + 1) * self.size]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.size).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size, self.size, &self.entries)
    }

    /// `Qᵀθ`: the edge occupancy one step later.
    pub fn propagate(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|to| (0..self.size).map(|from| theta[from] * self.get(from, to)).sum())
            .collect()
    }

    /// Every edge reachable from every other through positive entries.
    pub fn is_irreducible(&self) -> bool {
        let reach_all = |forward: bool| {
            let mut seen = vec![false; self.size];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..self.size {
                    let w = if forward { self.get(i, j) } else { self.get(j, i) };
                    if w > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach_all(true) && reach_all(false)
    }

    /// Read a whitespace- or comma-separated square matrix, one row per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect();
            rows.push(row.map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad matrix entry: {e}"),
            })?);
        }
        Self::from_rows(&rows)
    }
}

/// Ring of `edges` servers where a vehicle stays with probability `sojourn`
/// and otherwise moves to either neighbour with equal probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingParams {
    pub edges: usize,
    pub sojourn: f64,
}

impl RingParams {
    pub fn new(edges: usize, sojourn: f64) -> Result<Self> {
        if edges < 2 {
            return Err(Error::config("N", format!("ring needs at least 2 edges, got {edges}")));
        }
        if !(0.0..=1.0).contains(&sojourn) {
            return Err(Error::config("sojourn", format!("p_s must lie in [0, 1], got {sojourn}")));
        }
        Ok(Self { edges, sojourn })
    }

    /// `|p_s + (1 − p_s)cos(2π/N)|`, the ring's second eigenvalue modulus.
    pub fn second_eigenvalue(&self) -> f64 {
        let angle = 2.0 * std::f64::consts::PI / self.edges as f64;
        (self.sojourn + (1.0 - self.sojourn) * angle.cos()).abs()
    }
}

pub fn ring_transition(params: RingParams) -> Result<TransitionMatrix> {
    let RingParams { edges: n, sojourn } = RingParams::new(params.edges, params.sojourn)?;
    let step = (1.0 - sojourn) / 2.0;
    let mut rows = vec![vec![0.0; n]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = sojourn;
        // For N = 2 both neighbours are the same edge and the terms merge.
        row[(i + 1) % n] += step;
        row[(i + n - 1) % n] += step;
    }
    TransitionMatrix::from_rows(&rows)
}

/// Closed-form circulant spectrum `p_s + (1 − p_s)cos(2πn/N)`, `n = 0..N`.
pub fn eigenvalues_ring(params: RingParams) -> Vec<f64> {
    let n = params.edges as f64;
    (0..params.edges)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n;
            params.sojourn + (1.0 - params.sojourn) * angle.cos()
        })
        .collect()
}

/// Largest eigenvalue modulus of `Q` once a single Perron root is removed.
pub fn lambda_star(q: &TransitionMatrix) -> Result<f64> {
    if q.size() == 1 {
        return Ok(0.0);
    }
    let eigen = q.to_dmatrix().complex_eigenvalues();
    let perron = eigen
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1.re - 1.0).hypot(a.1.im);
            let db = (b.1.re - 1.0).hypot(b.1.im);
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .expect("nonempty spectrum");
    let runner_up = eigen
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != perron)
        .map(|(_, z)| z.norm())
        .fold(0.0f64, f64::max);
    if runner_up >= 1.0 - UNIT_MODULUS_TOL {
        return Err(Error::NonMixing(format!(
            "second eigenvalue modulus {runner_up:.12} is not below 1"
        )));
    }
    if !q.is_irreducible() {
        return Err(Error::Structure("transition matrix is reducible".into()));
    }
    Ok(runner_up)
}

/// Edge index of every vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MobilityState {
    assignment: Vec<usize>,
    edges: usize,
}

impl MobilityState {
    pub fn new(assignment: Vec<usize>, edges: usize) -> Result<Self> {
        if let Some(bad) = assignment.iter().find(|&&e| e >= edges) {
            return Err(Error::contract(format!("edge {bad} out of range [0, {edges})")));
        }
        Ok(Self { assignment, edges })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn edge_of(&self, vehicle: usize) -> usize {
        self.assignment[vehicle]
    }

    pub fn num_edges(&self) -> usize {
        self.edges
    }

    pub fn num_vehicles(&self) -> usize {
        self.assignment.len()
    }

    /// Vehicles covered by each edge, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.edges];
        for (m, &e) in self.assignment.iter().enumerate() {
            members[e].push(m);
        }
        members
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.edges];
        for &e in &self.assignment {
            counts[e] += 1;
        }
        counts
    }
}

/// Move every vehicle one step. Vehicle `m` draws from the stream keyed by
/// `(seed, m, step)`, so the result does not depend on evaluation order.
pub fn step_assignments(state: &MobilityState, q: &TransitionMatrix, seed: u64, step: u64) -> Result<MobilityState> {
    if q.size() != state.num_edges() {
        return Err(Error::contract("transition matrix size differs from edge count"));
    }
    let assignment = state
        .assignment
        .iter()
        .enumerate()
        .map(|(m, &from)| {
            let u: f64 = stream(seed, Domain::Mobility, m as u64, step).random();
            sample_row(q.row(from), u)
        })
        .collect();
    Ok(MobilityState {
        assignment,
        edges: state.edges,
    })
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}

/// Edge label distributions and occupancy after one mobility step.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEvolution {
    pub distributions: Vec<LabelDistribution>,
    pub theta: Vec<f64>,
}

/// `p_n' = Σ_{n'} θ_{n'} Q_{n',n} p_{n'} / θ_n'` with `θ' = Qᵀθ`.
pub fn label_evolution(
    distributions: &[LabelDistribution],
    q: &TransitionMatrix,
    theta: &[f64],
) -> Result<LabelEvolution> {
    let n = q.size();
    if distributions.len() != n || theta.len() != n {
        return Err(Error::contract("one distribution and one weight per edge required"));
    }
    let total: f64 = theta.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!("edge weights sum to {total}")));
    }
    let classes = distributions[0].num_classes();
    let next_theta = q.propagate(theta);
    let mut next = Vec::with_capacity(n);
    for (to, &weight) in next_theta.iter().enumerate() {
        if weight <= 0.0 {
            return Err(Error::DegenerateEdge {
                edge: to,
                message: "no vehicle mass arrives".into(),
            });
        }
        let mut probs = vec![0.0; classes];
        for (from, dist) in distributions.iter().enumerate() {
            let mass = theta[from] * q.get(from, to);
            for (acc, p) in probs.iter_mut().zip(dist.probs()) {
                *acc += mass * p;
            }
        }
        for p in &mut probs {
            *p /= weight;
        }
        next.push(LabelDistribution::from_counts(&probs)?);
    }
    Ok(LabelEvolution {
        distributions: next,
        theta: next_theta,
    })
}

/// Linear speed-to-sojourn map `p_s = clamp(intercept − slope·v·Δt/a, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SojournMap {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for SojournMap {
    /// Geometric boundary-crossing model: a vehicle covering `v·Δt` of a road
    /// segment of length `a` leaves with that probability.
    fn default() -> Self {
        Self {
            intercept: 1.0,
            slope: 1.0,
        }
    }
}

impl SojournMap {
    pub fn sojourn(&self, speed: f64, side_length: f64, interval: f64) -> Result<f64> {
        if !(speed >= 0.0) || !(side_length > 0.0) || !(interval > 0.0) {
            return Err(Error::contract("need v >= 0, a > 0, interval > 0"));
        }
        Ok((self.intercept - self.slope * speed * interval / side_length).clamp(0.0, 1.0))
    }
}

pub fn sojourn_from_speed(speed: f64, side_length: f64, interval: f64) -> Result<f64> {
    SojournMap::default().sojourn(speed, side_length, interval)
}

/// Per-step vehicle→edge observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrace {
    steps: BTreeMap<usize, BTreeMap<usize, usize>>,
    edges: usize,
}

impl TrajectoryTrace {
    pub fn new(edges: usize) -> Self {
        Self {
            steps: BTreeMap::new(),
            edges,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.keys().copied()
    }

    pub fn push(&mut self, step: usize, vehicle: usize, edge: usize) -> Result<()> {
        if edge >= self.edges {
            return Err(Error::contract(format!("edge {edge} out of range [0, {})", self.edges)));
        }
        if self.steps.entry(step).or_default().insert(vehicle, edge).is_some() {
            return Err(Error::contract(format!("vehicle {vehicle} appears twice at step {step}")));
        }
        Ok(())
    }

    pub fn record(&mut self, step: usize, state: &MobilityState) -> Result<()> {
        for (m, &e) in state.assignment().iter().enumerate() {
            self.push(step, m, e)?;
        }
        Ok(())
    }

    pub fn parse<R: Read>(reader: R, edges: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).collect::<Vec<_>>() != ["step", "vehicle", "edge"] {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `step,vehicle,edge`".into(),
            });
        }
        let mut trace = Self::new(edges);
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let mut fields = [0usize; 3];
            for (slot, field) in fields.iter_mut().zip(rec.iter()) {
                *slot = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad integer `{field}`"),
                })?;
            }
            trace.push(fields[0], fields[1], fields[2]).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(trace)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["step", "vehicle", "edge"])?;
        for (step, row) in &self.steps {
            for (vehicle, edge) in row {
                w.write_record([step.to_string(), vehicle.to_string(), edge.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_trace(path: &Path, edges: usize) -> Result<TrajectoryTrace> {
    TrajectoryTrace::parse(std::fs::File::open(path)?, edges)
}

/// Assignment of vehicles `0..vehicles` at `step`.
pub fn assignments_at(trace: &TrajectoryTrace, step: usize, vehicles: usize) -> Result<MobilityState> {
    let row = trace.steps.get(&step);
    let assignment = (0..vehicles)
        .map(|m| {
            row.and_then(|r| r.get(&m).copied())
                .ok_or(Error::TraceGap { step, vehicle: m })
        })
        .collect::<Result<Vec<_>>>()?;
    MobilityState::new(assignment, trace.edges)
}

/// Row-normalized transition counts between consecutive steps `t → t + 1`.
/// Rows without observations become self-loops.
pub fn empirical_transition(trace: &TrajectoryTrace) -> Result<TransitionMatrix> {
    let n = trace.edges;
    let mut counts = vec![vec![0.0f64; n]; n];
    for (&step, row) in &trace.steps {
        let Some(next) = trace.steps.get(&(step + 1)) else {
            continue;
        };
        for (&vehicle, &from) in row {
            let to = *next.get(&vehicle).ok_or(Error::TraceGap {
                step: step + 1,
                vehicle,
            })?;
            counts[from][to] += 1.0;
        }
    }
    let rows: Vec<Vec<f64>> = counts
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                let mut own = vec![0.0; n];
                own[i] = 1.0;
                own
            } else {
                row.iter().map(|c| c / total).collect()
            }
        })
        .collect();
    TransitionMatrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::probability_difference;
    use nalgebra::SymmetricEigen;

    fn ring(n: usize, ps: f64) -> TransitionMatrix {
        ring_transition(RingParams::new(n, ps).unwrap()).unwrap()
    }

    fn dense_spectrum(q: &TransitionMatrix) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(q.to_dmatrix()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    #[test]
    fn ring_examples() {
        assert_eq!(ring(4, 1.0), TransitionMatrix::identity(4));
        let q = ring(3, 0.4);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.4 } else { 0.3 };
                assert!((q.get(i, j) - expected).abs() < 1e-15);
            }
        }
        let q = ring(2, 0.7);
        for (row, expected) in q.rows().iter().zip([[0.7, 0.3], [0.3, 0.7]]) {
            for (a, b) in row.iter().zip(expected) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(RingParams::new(4, 1.2).is_err());
        assert!(RingParams::new(1, 0.5).is_err());
    }

    #[test]
    fn ring_is_doubly_stochastic() {
        for n in 2..9 {
            let q = ring(n, 0.35);
            let theta = vec![1.0 / n as f64; n];
            for (a, b) in q.propagate(&theta).iter().zip(&theta) {
                assert!((a - b).abs() < 1e-15);
            }
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(q.get(i, j), q.get(j, i));
                }
            }
        }
    }

    #[test]
    fn ring_spectrum_examples() {
        assert!(eigenvalues_ring(RingParams::new(5, 1.0).unwrap()).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let ev = eigenvalues_ring(RingParams::new(4, 0.5).unwrap());
        for (a, b) in ev.iter().zip([1.0, 0.5, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let ev = eigenvalues_ring(RingParams::new(4, 0.0).unwrap());
        for (a, b) in ev.iter().zip([1.0, 0.0, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_spectrum_matches_dense_solver() {
        for n in 3..=8 {
            for ps in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
                let params = RingParams::new(n, ps).unwrap();
                let mut closed = eigenvalues_ring(params);
                closed.sort_by(f64::total_cmp);
                let dense = dense_spectrum(&ring(n, ps));
                for (a, b) in closed.iter().zip(&dense) {
                    assert!((a - b).abs() <= 1e-10, "N={n} p_s={ps}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn lambda_star_examples() {
        assert!((lambda_star(&ring(4, 0.5)).unwrap() - 0.5).abs() < 1e-10);
        assert!(matches!(lambda_star(&ring(4, 1.0)), Err(Error::NonMixing(_))));
        assert!(matches!(lambda_star(&ring(4, 0.0)), Err(Error::NonMixing(_))));
        // odd ring with p_s = 0 is aperiodic
        let q = ring(5, 0.0);
        let expected = (4.0 * std::f64::consts::PI / 5.0).cos().abs();
        assert!((lambda_star(&q).unwrap() - expected).abs() < 1e-10);
        for n in 3..=8 {
            let p = RingParams::new(n, 0.6).unwrap();
            assert!((lambda_star(&ring(n, 0.6)).unwrap() - p.second_eigenvalue()).abs() < 1e-10);
        }
    }

    #[test]
    fn lambda_star_rejects_reducible_chain() {
        let q = TransitionMatrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(lambda_star(&q), Err(Error::Structure(_))));
    }

    #[test]
    fn identity_leaves_state_unchanged() {
        let state = MobilityState::new(vec![0, 1, 2, 3, 1], 4).unwrap();
        let next = step_assignments(&state, &TransitionMatrix::identity(4), 1, 0).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn periodic_ring_step_statistics() {
        let m = 100_000;
        let state = MobilityState::new(vec![0; m], 4).unwrap();
        let next = step_assignments(&state, &ring(4, 0.0), 17, 3).unwrap();
        let counts = next.counts();
        assert_eq!(counts[0], 0);
        assert_eq!(counts[2], 0);
        let sigma = (m as f64 * 0.25).sqrt();
        for e in [1, 3] {
            assert!((counts[e] as f64 - m as f64 / 2.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
        let again = step_assignments(&state, &ring(4, 0.0), 17, 3).unwrap();
        assert_eq!(next, again);
    }

    fn pairs_start() -> Vec<LabelDistribution> {
        (0..4)
            .map(|n| {
                let mut p = vec![0.0; 8];
                p[2 * n] = 0.5;
                p[2 * n + 1] = 0.5;
                LabelDistribution::new(p).unwrap()
            })
            .collect()
    }

    #[test]
    fn label_evolution_fixed_point() {
        let q = ring(4, 0.3);
        let same = vec![LabelDistribution::uniform(8); 4];
        let out = label_evolution(&same, &q, &[0.25; 4]).unwrap();
        for d in &out.distributions {
            for p in d.probs() {
                assert!((p - 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_evolution_one_ring_step() {
        let out = label_evolution(&pairs_start(), &ring(4, 0.5), &[0.25; 4]).unwrap();
        let expected = [0.25, 0.25, 0.125, 0.125, 0.0, 0.0, 0.125, 0.125];
        for (a, b) in out.distributions[0].probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Hand sum over the vector above: 2·0.125 + 2·0 + 2·0.125 + 2·0 = 0.5.
        let uniform = LabelDistribution::uniform(8);
        let before = probability_difference(&uniform, &pairs_start()[0]).unwrap();
        let after = probability_difference(&uniform, &out.distributions[0]).unwrap();
        assert!((before - 1.5).abs() < 1e-15);
        assert!((after - 0.5).abs() < 1e-15);
    }

    #[test]
    fn label_evolution_exact_decay_series() {
        // Oracle: the deviation of edge n from uniform, in the pair basis,
        // is e_n − ¼·1; the ring eigenvalue 0 mode vanishes after one step and
        // the remaining modes decay by λ* = 0.5.
        let q = ring(4, 0.5);
        let uniform = LabelDistribution::uniform(8);
        let mut dists = pairs_start();
        let mut theta = vec![0.25; 4];
        for j in 0..=20 {
            let expected = if j == 0 { 1.5 } else { 0.5f64.powi(j - 1) * 0.5 };
            for d in &dists {
                let got = probability_difference(&uniform, d).unwrap();
                assert!((got - expected).abs() < 1e-12, "j={j}: {got} vs {expected}");
            }
            let next = label_evolution(&dists, &q, &theta).unwrap();
            dists = next.distributions;
            theta = next.theta;
        }
    }

    #[test]
    fn mixing_decay_rate_is_lambda_star() {
        // The worst edge difference shrinks no slower than λ*^j asymptotically,
        // so its ratio to λ*^j stays bounded by the early maximum.
        for n in 3..=6 {
            for ps in [0.2, 0.5, 0.8] {
                let q = ring(n, ps);
                let lam = lambda_star(&q).unwrap();
                let mut dists: Vec<LabelDistribution> = (0..n)
                    .map(|e| {
                        let mut p = vec![0.0; n];
                        p[e] = 1.0;
                        LabelDistribution::new(p).unwrap()
                    })
                    .collect();
                let uniform = LabelDistribution::uniform(n);
                let mut theta = vec![1.0 / n as f64; n];
                let mut ratios = Vec::new();
                let mut j = 0;
                while lam.powi(j) > 1e-9 && j <= 60 {
                    let worst = dists
                        .iter()
                        .map(|d| probability_difference(&uniform, d).unwrap())
                        .fold(0.0, f64::max);
                    ratios.push(worst / lam.powi(j));
                    let next = label_evolution(&dists, &q, &theta).unwrap();
                    dists = next.distributions;
                    theta = next.theta;
                    j += 1;
                }
                let head = ratios.len().min(6);
                let early = ratios[..head].iter().cloned().fold(0.0, f64::max);
                for (j, r) in ratios.iter().enumerate() {
                    assert!(*r <= early * (1.0 + 1e-6), "N={n} ps={ps} j={j}: {r} > {early}");
                }
            }
        }
    }

    #[test]
    fn label_evolution_tracks_theta_drift() {
        let q = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let dists = vec![
            LabelDistribution::new(vec![1.0, 0.0]).unwrap(),
            LabelDistribution::new(vec![0.0, 1.0]).unwrap(),
        ];
        let out = label_evolution(&dists, &q, &[0.5, 0.5]).unwrap();
        assert_eq!(out.theta, vec![0.25, 0.75]);
        assert_eq!(out.distributions[0].probs(), &[1.0, 0.0]);
        let p1 = out.distributions[1].probs();
        assert!((p1[0] - 1.0 / 3.0).abs() < 1e-15);

        let trap = TransitionMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            label_evolution(&dists, &trap, &[0.5, 0.5]),
            Err(Error::DegenerateEdge { edge: 0, .. })
        ));
    }

    #[test]
    fn sojourn_examples() {
        assert_eq!(sojourn_from_speed(0.0, 1000.0, 1.0).unwrap(), 1.0);
        assert_eq!(sojourn_from_speed(1000.0, 1000.0, 1.0).unwrap(), 0.0);
        assert!((sojourn_from_speed(30.0, 1000.0, 1.0).unwrap() - 0.97).abs() < 1e-15);
        assert_eq!(sojourn_from_speed(5000.0, 1000.0, 1.0).unwrap(), 0.0);
        let custom = SojournMap {
            intercept: 0.95,
            slope: 2.0,
        };
        assert!((custom.sojourn(10.0, 1000.0, 1.0).unwrap() - 0.93).abs() < 1e-15);
        assert!(sojourn_from_speed(-1.0, 1000.0, 1.0).is_err());
    }

    #[test]
    fn static_trace_is_identity() {
        let mut trace = TrajectoryTrace::new(3);
        let state = MobilityState::new(vec![0, 1, 2, 2], 3).unwrap();
        for t in 0..5 {
            trace.record(t, &state).unwrap();
        }
        assert_eq!(empirical_transition(&trace).unwrap(), TransitionMatrix::identity(3));
        assert_eq!(assignments_at(&trace, 2, 4).unwrap(), state);
        assert!(matches!(
            assignments_at(&trace, 2, 5),
            Err(Error::TraceGap { step: 2, vehicle: 4 })
        ));
    }

    #[test]
    fn empirical_transition_recovers_generator() {
        let q = ring(4, 0.6);
        let mut state = MobilityState::new((0..10).map(|m| m % 4).collect(), 4).unwrap();
        let mut trace = TrajectoryTrace::new(4);
        for t in 0..10_000 {
            trace.record(t, &state).unwrap();
            state = step_assignments(&state, &q, 5, t as u64).unwrap();
        }
        let est = empirical_transition(&trace).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((est.get(i, j) - q.get(i, j)).abs() < 0.02, "({i},{j})");
            }
        }
    }

    #[test]
    fn trace_csv_round_trip_and_errors() {
        let mut trace = TrajectoryTrace::new(2);
        trace.record(0, &MobilityState::new(vec![0, 1], 2).unwrap()).unwrap();
        trace.record(1, &MobilityState::new(vec![1, 1], 2).unwrap()).unwrap();
        let mut buf = Vec::new();
        trace.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "step,vehicle,edge\n0,0,0\n0,1,1\n1,0,1\n1,1,1\n");
        assert_eq!(TrajectoryTrace::parse(buf.as_slice(), 2).unwrap(), trace);

        let bad = "step,vehicle,edge\n0,0,0\n0,x,1\n";
        assert!(matches!(TrajectoryTrace::parse(bad.as_bytes(), 2), Err(Error::Parse { line: 3, .. })));
        let dup = "step,vehicle,edge\n0,0,0\n0,0,1\n";
        assert!(matches!(TrajectoryTrace::parse(dup.as_bytes(), 2), Err(Error::Parse { line: 3, .. })));
        let range = "step,vehicle,edge\n0,0,5\n";
        assert!(matches!(TrajectoryTrace::parse(range.as_bytes(), 2), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn matrix_text_parsing() {
        let q = TransitionMatrix::parse("# Q\n0.5 0.5\n0.25,0.75\n").unwrap();
        assert_eq!(q.get(1, 1), 0.75);
        assert!(TransitionMatrix::parse("0.5 0.6\n0.5 0.5\n").is_err());
    }
}
