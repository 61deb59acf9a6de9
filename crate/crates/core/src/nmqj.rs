//! Non-Markovian quantum jump ensembles.
//!
//! An ensemble of N members is stored as groups of identical states with
//! integer counts. Each step samples positive jumps (rate γ > 0, member goes
//! to Aψ) and negative jumps (rate γ < 0, a member in the source state
//! Aψ′/‖Aψ′‖ returns to the target ψ′), then propagates every group with the
//! effective Hamiltonian. A negative channel whose source holds no members
//! is the unravelling's positivity violation and aborts the run.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::bath::RateTable;
use crate::error::{Error, PositivityViolation, Result};
use crate::model::{ChannelKind, ExcitonBasis, JumpChannel};
use crate::scalar::{creal, norm_sqr};
use crate::system::ExcitonSystem;
use crate::tcl::{step_count, DensityMatrix};
use crate::Real;

/// Largest per-step jump probability of a group before a warning is logged.
pub const DEFAULT_PROBABILITY_CAP: f64 = 0.1;
/// Per-member jump activity targeted by one substep.
pub const DEFAULT_SUBSTEP_PROBABILITY: f64 = 0.005;
pub const DEFAULT_MAX_SUBSTEPS: u32 = 64;
/// Two states are the same group when 1 − |⟨φ|ψ⟩| is below this.
pub const DEFAULT_MATCH_TOL: f64 = 1e-9;
/// Expected negative-jump flow (members per step) below which an empty
/// source is not reported.
pub const FLOW_FLOOR: f64 = 1e-12;

/// Smallest batch of groups handed to one worker.
const PAR_MIN_LEN: usize = 32;

/// A set of ensemble members sharing one normalized state.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<T: Real> {
    /// Exciton-basis state, normalized.
    pub state: DVector<Complex<T>>,
    pub count: u64,
}

/// Grouped ensemble of pure states.
#[derive(Debug, Clone)]
pub struct EnsembleRegistry<T: Real> {
    groups: Vec<Group<T>>,
    total: u64,
    time: T,
}

impl<T: Real> EnsembleRegistry<T> {
    /// All `n` members in `state` (exciton basis, normalized here) at t = 0.
    pub fn new(state: DVector<Complex<T>>, n: u64) -> Result<Self> {
        Self::from_groups(vec![Group { state, count: n }], T::zero())
    }

    pub fn from_groups(groups: Vec<Group<T>>, time: T) -> Result<Self> {
        let mut out = Vec::with_capacity(groups.len());
        let mut total = 0u64;
        for g in groups {
            if g.count == 0 {
                continue;
            }
            let state = normalized(g.state)
                .ok_or_else(|| Error::InvalidInput("ensemble state has zero norm".into()))?;
            total += g.count;
            out.push(Group { state, count: g.count });
        }
        if total == 0 {
            return Err(Error::InvalidInput("ensemble needs at least one member".into()));
        }
        let mut reg = Self { groups: out, total, time };
        reg.merge(DEFAULT_MATCH_TOL);
        Ok(reg)
    }

    pub fn groups(&self) -> &[Group<T>] {
        &self.groups
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.groups[0].state.len()
    }

    /// Number of members in a group matching `state` up to global phase.
    pub fn count_of(&self, state: &DVector<Complex<T>>, tol: f64) -> u64 {
        let Some(state) = normalized(state.clone()) else { return 0 };
        self.groups.iter().filter(|g| same_state(&g.state, &state, tol)).map(|g| g.count).sum()
    }

    /// ρ = Σ_g (n_g/N)|ψ_g⟩⟨ψ_g| in the exciton basis.
    pub fn density_exciton(&self) -> DMatrix<Complex<T>> {
        let n = self.dim();
        let mut rho = DMatrix::zeros(n, n);
        let inv = T::one() / T::from_count(self.total);
        for g in &self.groups {
            let w = creal(T::from_count(g.count) * inv);
            for j in 0..n {
                let cj = g.state[j].conj() * w;
                for i in 0..n {
                    rho[(i, j)] += g.state[i] * cj;
                }
            }
        }
        rho
    }

    /// Merges groups equal up to global phase; the first occurrence keeps its
    /// position and state. Empty groups are dropped.
    pub fn merge(&mut self, tol: f64) {
        let groups = std::mem::take(&mut self.groups);
        let mut index = StateIndex::new(tol);
        let mut kept: Vec<Group<T>> = Vec::with_capacity(groups.len());
        for g in groups {
            if g.count == 0 {
                continue;
            }
            match index.find(&g.state, &kept, |k| &k.state) {
                Some(i) => kept[i].count += g.count,
                None => {
                    index.insert(&g.state, kept.len());
                    kept.push(g);
                }
            }
        }
        self.groups = kept;
    }

    fn check(&self) {
        let sum: u64 = self.groups.iter().map(|g| g.count).sum();
        assert_eq!(sum, self.total, "ensemble member count drifted");
    }
}

/// ρ of the ensemble in the site basis.
pub fn reconstruct_density<T: Real>(registry: &EnsembleRegistry<T>, basis: &ExcitonBasis<T>) -> DensityMatrix<T> {
    DensityMatrix::new(basis.to_site(&registry.density_exciton()), registry.time())
}

fn normalized<T: Real>(mut v: DVector<Complex<T>>) -> Option<DVector<Complex<T>>> {
    let n2 = v.iter().fold(T::zero(), |a, z| a + norm_sqr(*z));
    if !(n2 > T::zero()) || !n2.is_finite() {
        return None;
    }
    v *= creal(T::one() / n2.sqrt());
    Some(v)
}

/// |⟨a|b⟩| for normalized states.
fn fidelity<T: Real>(a: &DVector<Complex<T>>, b: &DVector<Complex<T>>) -> T {
    let mut s = Complex::new(T::zero(), T::zero());
    for (x, y) in a.iter().zip(b.iter()) {
        s += x.conj() * *y;
    }
    norm_sqr(s).sqrt()
}

fn same_state<T: Real>(a: &DVector<Complex<T>>, b: &DVector<Complex<T>>, tol: f64) -> bool {
    fidelity(a, b).as_f64() >= 1.0 - tol
}

/// Lookup of states up to global phase.
///
/// Keys are the component magnitudes binned on a grid. If |⟨φ|ψ⟩| ≥ 1 − tol
/// then every | |φ_i| − |ψ_i| | ≤ √(2 tol), so a query checks its own cell
/// and the neighbouring cell along every coordinate lying within that margin
/// of a cell edge. Matches are therefore never missed.
struct StateIndex {
    cells: HashMap<Vec<i64>, Vec<usize>>,
    cell: f64,
    margin: f64,
    tol: f64,
}

impl StateIndex {
    fn new(tol: f64) -> Self {
        let margin = (2.0 * tol).sqrt() * 1.01 + 1e-12;
        Self { cells: HashMap::new(), cell: (4.0 * margin).max(1e-3), margin, tol }
    }

    fn key<T: Real>(&self, psi: &DVector<Complex<T>>) -> Vec<i64> {
        psi.iter().map(|z| (norm_sqr(*z).sqrt().as_f64() / self.cell).floor() as i64).collect()
    }

    fn insert<T: Real>(&mut self, psi: &DVector<Complex<T>>, id: usize) {
        let k = self.key(psi);
        self.cells.entry(k).or_default().push(id);
    }

    /// Smallest id of a stored state matching `psi`.
    fn find<T: Real, S, F>(&self, psi: &DVector<Complex<T>>, store: &[S], state_of: F) -> Option<usize>
    where
        F: Fn(&S) -> &DVector<Complex<T>>,
    {
        let base = self.key(psi);
        let mut alts = Vec::new();
        for (i, z) in psi.iter().enumerate() {
            let x = norm_sqr(*z).sqrt().as_f64() / self.cell;
            let frac = x - x.floor();
            let m = self.margin / self.cell;
            // magnitudes are never negative, so cell 0 has no lower neighbour
            if frac < m && x >= 1.0 {
                alts.push((i, -1));
            } else if frac > 1.0 - m {
                alts.push((i, 1));
            }
        }
        let mut best: Option<usize> = None;
        let mut key = base.clone();
        for mask in 0u64..(1u64 << alts.len()) {
            for (bit, &(i, d)) in alts.iter().enumerate() {
                key[i] = base[i] + if mask >> bit & 1 == 1 { d } else { 0 };
            }
            if let Some(ids) = self.cells.get(&key) {
                for &id in ids {
                    if best.is_some_and(|b| b <= id) {
                        continue;
                    }
                    if same_state(state_of(&store[id]), psi, self.tol) {
                        best = Some(id);
                    }
                }
            }
        }
        best
    }
}

/// Effective non-Hermitian generator in the exciton basis (rad/ps):
/// H_S + H_LS − (i/2) Σ γ(t,ω) A†A.
pub fn effective_hamiltonian<T: Real>(
    system: &ExcitonSystem<T>,
    table: &RateTable<T>,
    t: T,
    lamb_shift: bool,
) -> Result<DMatrix<Complex<T>>> {
    let rates = table.rates_at(t)?;
    let lamb = if lamb_shift { table.lamb_at(t)? } else { None };
    Ok(system.k_matrix(&rates, lamb.as_deref()))
}

/// First-order no-jump step (1 − i dt H_eff)ψ, renormalized.
pub fn no_jump_step<T: Real>(
    state: &DVector<Complex<T>>,
    h_eff: &DMatrix<Complex<T>>,
    dt: T,
) -> Result<DVector<Complex<T>>> {
    let next = state - (h_eff * state) * Complex::new(T::zero(), dt);
    normalized(next).ok_or_else(|| Error::Step { time: f64::NAN, reason: "no-jump evolution annihilated the state".into() })
}

/// P⁺ = dt·γ·⟨ψ|A†A|ψ⟩.
pub fn positive_jump_probability<T: Real>(state: &DVector<Complex<T>>, channel: &JumpChannel<T>, rate: T, dt: T) -> T {
    let p = dt * rate * channel.weight(state);
    if p.as_f64() > DEFAULT_PROBABILITY_CAP {
        log::warn!(
            "jump probability {:.3} on channel site {} ω = {:.3} exceeds {}; reduce dt",
            p.as_f64(),
            channel.site,
            channel.frequency.as_f64(),
            DEFAULT_PROBABILITY_CAP
        );
    }
    p
}

/// Normalized Aψ.
pub fn apply_positive_jump<T: Real>(state: &DVector<Complex<T>>, channel: &JumpChannel<T>) -> Result<DVector<Complex<T>>> {
    normalized(channel.apply(state))
        .ok_or_else(|| Error::InvalidInput("jump operator annihilates the state".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpDirection {
    Positive,
    Negative,
}

/// Members moved by one channel between two groups in one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpEvent {
    pub step: u64,
    /// Channel index in the system's channel list.
    pub channel: usize,
    /// Zero-based site of the channel.
    pub site: usize,
    /// Signed channel frequency in cm⁻¹.
    pub omega_cm: f64,
    pub direction: JumpDirection,
    /// Group index before the step.
    pub source: usize,
    /// Negative jumps: target group index before the step. Positive jumps:
    /// index of the new group in the pre-merge list.
    pub target: usize,
    pub count: u64,
}

/// Random streams keyed by (seed, step, group), independent of scheduling.
#[derive(Debug, Clone, Copy)]
pub struct JumpRng {
    pub seed: u64,
    pub step: u64,
    pub substep: u32,
}

impl JumpRng {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step, substep: 0 }
    }

    fn stream(&self, group: usize) -> ChaCha8Rng {
        let key = splitmix64(self.step) ^ splitmix64(u64::from(self.substep).wrapping_add(1) << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ key));
        rng.set_stream(group as u64);
        rng
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Positive { channel: usize },
    Negative { channel: usize, target: usize },
}

/// Result of sampling one step's jumps against a frozen snapshot.
struct Sampled<T: Real> {
    /// Post-jump counts of the snapshot groups.
    counts: Vec<u64>,
    /// Groups created by positive jumps, in (source, channel) order.
    born: Vec<Group<T>>,
    events: Vec<JumpEvent>,
    moved_pos: u64,
    moved_neg: u64,
    warnings: u64,
}

struct NegativeFlow<T: Real> {
    target: usize,
    channel: usize,
    source: Option<usize>,
    /// N′·dt·|γ|·⟨ψ′|A†A|ψ′⟩.
    flow: T,
    image: DVector<Complex<T>>,
}

struct SampleParams<'a, T: Real> {
    channels: &'a [JumpChannel<T>],
    /// Rate of every channel for this step.
    rates: &'a [T],
    dt: T,
    time: T,
    step: u64,
    rng: JumpRng,
    cap: f64,
    tol: f64,
}

fn sample_jumps<T: Real>(groups: &[Group<T>], p: &SampleParams<'_, T>) -> Result<Sampled<T>> {
    let n_groups = groups.len();
    let dephasing = |k: usize| p.channels[k].kind == ChannelKind::Dephasing;

    // positive outcomes per source group; images are built only for draws
    let positives: Vec<Vec<(usize, T)>> = groups
        .par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|g| {
            let mut out = Vec::new();
            for (k, ch) in p.channels.iter().enumerate() {
                let gamma = p.rates[k];
                if !(gamma > T::zero()) {
                    continue;
                }
                let w = ch.weight(&g.state);
                if !(w > T::zero()) {
                    continue;
                }
                // |⟨ψ|Aψ⟩| / ‖Aψ‖ is the fidelity of the image with ψ
                if dephasing(k) && (norm_sqr(ch.overlap(&g.state)) / w).sqrt().as_f64() >= 1.0 - p.tol {
                    continue;
                }
                out.push((k, p.dt * gamma * w));
            }
            out
        })
        .collect();

    // negative flows per target group, then source lookup
    let negatives: Vec<Vec<NegativeFlow<T>>> = if p.rates.iter().any(|g| *g < T::zero()) {
        let mut index = StateIndex::new(p.tol);
        for (i, g) in groups.iter().enumerate() {
            index.insert(&g.state, i);
        }
        groups
            .par_iter()
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .map(|(h, g)| {
                let mut out = Vec::new();
                for (k, ch) in p.channels.iter().enumerate() {
                    let gamma = p.rates[k];
                    if !(gamma < T::zero()) {
                        continue;
                    }
                    let w = ch.weight(&g.state);
                    if !(w > T::zero()) {
                        continue;
                    }
                    let image = normalized(ch.apply(&g.state)).expect("positive weight implies nonzero image");
                    let source = index.find(&image, groups, |s| &s.state);
                    if source == Some(h) {
                        continue;
                    }
                    let flow = T::from_count(g.count) * p.dt * (-gamma) * w;
                    out.push(NegativeFlow { target: h, channel: k, source, flow, image });
                }
                out
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut per_source: Vec<Vec<(Outcome, T)>> = positives
        .into_iter()
        .map(|v| v.into_iter().map(|(channel, pr)| (Outcome::Positive { channel }, pr)).collect())
        .collect();
    for f in negatives.iter().flatten() {
        match f.source {
            Some(s) => {
                let pr = f.flow / T::from_count(groups[s].count);
                per_source[s].push((Outcome::Negative { channel: f.channel, target: f.target }, pr));
            }
            None if f.flow.as_f64() > FLOW_FLOOR => {
                let ch = &p.channels[f.channel];
                return Err(PositivityViolation {
                    time: p.time.as_f64(),
                    site: ch.site,
                    omega_cm: ch.frequency.as_f64(),
                    rate: p.rates[f.channel].as_f64(),
                    target: to_pairs(&groups[f.target].state),
                    source_state: to_pairs(&f.image),
                    source_count: 0,
                    expected_flow: f.flow.as_f64(),
                }
                .into());
            }
            None => {}
        }
    }

    // the unravelling cannot move more members out of a source than it holds
    let mut warnings = 0;
    for (s, outs) in per_source.iter().enumerate() {
        let total: f64 = outs.iter().map(|(_, pr)| pr.as_f64()).sum();
        if total > 1.0 + 1e-12 {
            if let Some((Outcome::Negative { channel, target }, _)) =
                outs.iter().find(|(o, _)| matches!(o, Outcome::Negative { .. }))
            {
                let ch = &p.channels[*channel];
                let flow: f64 = outs
                    .iter()
                    .filter(|(o, _)| matches!(o, Outcome::Negative { .. }))
                    .map(|(_, pr)| pr.as_f64() * groups[s].count as f64)
                    .sum();
                return Err(PositivityViolation {
                    time: p.time.as_f64(),
                    site: ch.site,
                    omega_cm: ch.frequency.as_f64(),
                    rate: p.rates[*channel].as_f64(),
                    target: to_pairs(&groups[*target].state),
                    source_state: to_pairs(&groups[s].state),
                    source_count: groups[s].count,
                    expected_flow: flow,
                }
                .into());
            }
            return Err(Error::Step {
                time: p.time.as_f64(),
                reason: format!("total jump probability {total:.3} of group {s} exceeds 1; reduce dt"),
            });
        }
        if total > p.cap {
            warnings += 1;
        }
    }

    // multinomial per source, each on its own stream: the number of
    // members leaving first, then their split over the outcomes
    let draws: Vec<Vec<u64>> = per_source
        .par_iter()
        .with_min_len(PAR_MIN_LEN)
        .enumerate()
        .map(|(s, outs)| {
            let mut k = vec![0u64; outs.len()];
            let total: f64 = outs.iter().map(|(_, pr)| pr.as_f64()).sum();
            if !(total > 0.0) {
                return k;
            }
            let mut rng = p.rng.stream(s);
            let mut left = binomial(groups[s].count, total.min(1.0), &mut rng);
            let mut mass = total;
            for (i, (_, pr)) in outs.iter().enumerate() {
                if left == 0 {
                    break;
                }
                let pr = pr.as_f64();
                let x = binomial(left, if mass > 0.0 { pr / mass } else { 1.0 }, &mut rng);
                k[i] = x;
                left -= x;
                mass -= pr;
            }
            k
        })
        .collect();

    // commit in canonical order
    let mut counts: Vec<u64> = groups.iter().map(|g| g.count).collect();
    let mut born = Vec::new();
    let mut events = Vec::new();
    let (mut moved_pos, mut moved_neg) = (0, 0);
    for (s, (outs, ks)) in per_source.iter().zip(&draws).enumerate() {
        for ((outcome, _), &k) in outs.iter().zip(ks) {
            if k == 0 {
                continue;
            }
            counts[s] -= k;
            let (channel, direction, target) = match *outcome {
                Outcome::Positive { channel } => {
                    let state = normalized(p.channels[channel].apply(&groups[s].state))
                        .expect("positive weight implies nonzero image");
                    born.push(Group { state, count: k });
                    moved_pos += k;
                    (channel, JumpDirection::Positive, n_groups + born.len() - 1)
                }
                Outcome::Negative { channel, target } => {
                    counts[target] += k;
                    moved_neg += k;
                    (channel, JumpDirection::Negative, target)
                }
            };
            let ch = &p.channels[channel];
            events.push(JumpEvent {
                step: p.step,
                channel,
                site: ch.site,
                omega_cm: ch.frequency.as_f64(),
                direction,
                source: s,
                target,
                count: k,
            });
        }
    }
    Ok(Sampled { counts, born, events, moved_pos, moved_neg, warnings })
}

/// Binomial(n, q) draw with the degenerate cases short-circuited.
fn binomial(n: u64, q: f64, rng: &mut ChaCha8Rng) -> u64 {
    if n == 0 || q <= 0.0 {
        0
    } else if q >= 1.0 {
        n
    } else {
        Binomial::new(n, q).expect("valid binomial parameters").sample(rng)
    }
}

fn cexp<T: Real>(z: Complex<T>) -> Complex<T> {
    let r = z.re.exp();
    Complex::new(r * z.im.cos(), r * z.im.sin())
}

fn to_pairs<T: Real>(v: &DVector<Complex<T>>) -> Vec<(f64, f64)> {
    v.iter().map(|z| (z.re.as_f64(), z.im.as_f64())).collect()
}

/// Samples the negative jumps of one channel and moves members between
/// groups. States are not propagated. Returns the recorded events.
pub fn negative_jump<T: Real>(
    registry: &mut EnsembleRegistry<T>,
    channels: &[JumpChannel<T>],
    channel: usize,
    rate: T,
    dt: T,
    rng: &JumpRng,
) -> Result<Vec<JumpEvent>> {
    if !(rate < T::zero()) {
        return Err(Error::InvalidInput("negative_jump needs a negative rate".into()));
    }
    let mut rates = vec![T::zero(); channels.len()];
    rates[channel] = rate;
    let params = SampleParams {
        channels,
        rates: &rates,
        dt,
        time: registry.time,
        step: rng.step,
        rng: *rng,
        cap: DEFAULT_PROBABILITY_CAP,
        tol: DEFAULT_MATCH_TOL,
    };
    let s = sample_jumps(&registry.groups, &params)?;
    for (g, c) in registry.groups.iter_mut().zip(s.counts) {
        g.count = c;
    }
    registry.merge(DEFAULT_MATCH_TOL);
    registry.check();
    Ok(s.events)
}

/// Settings of an ensemble run.
#[derive(Debug, Clone, Copy)]
pub struct NmqjConfig<T: Real> {
    /// Step in ps; the rate table must contain the step midpoints.
    pub dt: T,
    pub seed: u64,
    pub probability_cap: f64,
    pub match_tol: f64,
    pub lamb_shift: bool,
    pub record_events: bool,
    /// Target per-member jump activity of one substep; 0 disables
    /// substepping.
    pub substep_probability: f64,
    pub max_substeps: u32,
}

impl<T: Real> NmqjConfig<T> {
    pub fn new(dt: T, seed: u64) -> Self {
        Self {
            dt,
            seed,
            probability_cap: DEFAULT_PROBABILITY_CAP,
            match_tol: DEFAULT_MATCH_TOL,
            lamb_shift: false,
            record_events: false,
            substep_probability: DEFAULT_SUBSTEP_PROBABILITY,
            max_substeps: DEFAULT_MAX_SUBSTEPS,
        }
    }
}

/// Per-step summary returned by [`NmqjEngine::step`].
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub substeps: u32,
    /// Groups carried through a jump-and-propagate cycle, summed over the
    /// substeps.
    pub group_updates: u64,
    pub jumps_pos: u64,
    pub jumps_neg: u64,
    pub warnings: u64,
    pub events: Vec<JumpEvent>,
}

/// Sampled ensemble run.
#[derive(Debug, Clone)]
pub struct NmqjRun<T: Real> {
    pub times: Vec<T>,
    /// Reconstructed ρ(t) in the exciton basis.
    pub exciton: Vec<DMatrix<Complex<T>>>,
    /// Reconstructed ρ(t) in the site basis.
    pub site: Vec<DMatrix<Complex<T>>>,
    pub n_groups: Vec<usize>,
    /// Members moved by positive / negative jumps during the step ending at
    /// each sample (0 for the first sample).
    pub jumps_pos: Vec<u64>,
    pub jumps_neg: Vec<u64>,
    pub events: Vec<JumpEvent>,
    pub warnings: u64,
    pub trajectories: u64,
}

impl<T: Real> NmqjRun<T> {
    pub fn exciton_population(&self, m: usize) -> Vec<T> {
        self.exciton.iter().map(|r| r[(m, m)].re).collect()
    }
}

/// Steps jump ensembles of an [`ExcitonSystem`].
#[derive(Debug, Clone, Copy)]
pub struct NmqjEngine<'a, T: Real> {
    system: &'a ExcitonSystem<T>,
    table: &'a RateTable<T>,
    config: NmqjConfig<T>,
}

impl<'a, T: Real> NmqjEngine<'a, T> {
    pub fn new(system: &'a ExcitonSystem<T>, table: &'a RateTable<T>, config: NmqjConfig<T>) -> Result<Self> {
        if !(config.dt > T::zero()) {
            return Err(Error::InvalidInput("dt must be > 0".into()));
        }
        if config.lamb_shift && table.lamb.is_none() {
            return Err(Error::InvalidInput("Lamb shift requested but the rate table has none".into()));
        }
        Ok(Self { system, table, config })
    }

    pub fn config(&self) -> &NmqjConfig<T> {
        &self.config
    }

    /// Effective generator at time `t`.
    pub fn effective_hamiltonian(&self, t: T) -> Result<DMatrix<Complex<T>>> {
        effective_hamiltonian(self.system, self.table, t, self.config.lamb_shift)
    }

    /// Largest per-member jump activity dt·Σ|γ|⟨A†A⟩ over the groups at
    /// time `t`.
    fn activity(&self, groups: &[Group<T>], t: T, dt: T) -> Result<T> {
        let col = self.table.rates_at(t)?;
        let channels = self.system.channels();
        Ok(groups
            .par_iter()
            .with_min_len(PAR_MIN_LEN)
            .map(|g| {
                channels
                    .iter()
                    .enumerate()
                    .map(|(k, ch)| col[self.system.column(k)].abs() * ch.weight(&g.state))
                    .fold(T::zero(), |a, b| a + b)
            })
            .reduce(T::zero, |a, b| a.max(b))
            * dt)
    }

    /// One output step, `step` being its index from t = 0.
    ///
    /// The step is split into the fewest equal substeps that keep the jump
    /// activity of every group below `substep_probability` (at most
    /// `max_substeps`). Each substep samples jumps synchronously on the
    /// states at its start, with rates read at its midpoint, then propagates
    /// the remaining members with the effective Hamiltonian.
    pub fn step(&self, reg: &mut EnsembleRegistry<T>, step: u64) -> Result<StepReport> {
        let dt = self.config.dt;
        let t0 = reg.time;
        let n_sub = if self.config.substep_probability > 0.0 {
            let a = self.activity(&reg.groups, t0 + dt * T::lit(0.5), dt)?.as_f64();
            ((a / self.config.substep_probability).ceil() as u32).clamp(1, self.config.max_substeps.max(1))
        } else {
            1
        };
        let h = dt / T::from_count(u64::from(n_sub));
        let mut report = StepReport::default();
        for sub in 0..n_sub {
            let t = t0 + h * T::from_count(u64::from(sub));
            let rng = JumpRng { seed: self.config.seed, step, substep: sub };
            self.substep(reg, t, h, step, rng, &mut report)?;
        }
        reg.time = t0 + dt;
        Ok(report)
    }

    fn substep(
        &self,
        reg: &mut EnsembleRegistry<T>,
        t: T,
        h: T,
        step: u64,
        rng: JumpRng,
        report: &mut StepReport,
    ) -> Result<()> {
        let tm = t + h * T::lit(0.5);
        let col_rates = self.table.rates_at(tm)?;
        let lamb = if self.config.lamb_shift { self.table.lamb_at(tm)? } else { None };
        let channels = self.system.channels();
        let rates: Vec<T> = (0..channels.len()).map(|k| col_rates[self.system.column(k)]).collect();
        let params = SampleParams {
            channels,
            rates: &rates,
            dt: h,
            time: t,
            step,
            rng,
            cap: self.config.probability_cap,
            tol: self.config.match_tol,
        };
        let sampled = sample_jumps(&reg.groups, &params)?;
        let prop = Propagator::new(self.system, &col_rates, lamb.as_deref(), h);
        let mut next: Vec<Group<T>> = reg
            .groups
            .par_iter()
            .zip(sampled.counts.par_iter())
            .with_min_len(PAR_MIN_LEN)
            .map(|(g, &count)| {
                let state = if count > 0 { prop.apply(&g.state) } else { Some(g.state.clone()) };
                state.map(|state| Group { state, count })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Step { time: t.as_f64(), reason: "no-jump evolution annihilated a state".into() })?;
        next.extend(sampled.born);
        reg.groups = next;
        reg.time = t + h;
        reg.merge(self.config.match_tol);
        reg.check();
        report.substeps += 1;
        report.group_updates += reg.groups.len() as u64;
        report.jumps_pos += sampled.moved_pos;
        report.jumps_neg += sampled.moved_neg;
        report.warnings += sampled.warnings;
        if self.config.record_events {
            report.events.extend(sampled.events);
        }
        Ok(())
    }

    /// Runs `trajectories` members from `initial` (exciton basis) at t = 0 to
    /// `t_final`, sampling ρ every step.
    pub fn run(&self, initial: &DVector<Complex<T>>, trajectories: u64, t_final: T) -> Result<NmqjRun<T>> {
        let mut reg = EnsembleRegistry::new(initial.clone(), trajectories)?;
        let steps = step_count(t_final, self.config.dt)?;
        let basis = self.system.basis();
        let mut out = NmqjRun {
            times: Vec::with_capacity(steps + 1),
            exciton: Vec::with_capacity(steps + 1),
            site: Vec::with_capacity(steps + 1),
            n_groups: Vec::with_capacity(steps + 1),
            jumps_pos: Vec::with_capacity(steps + 1),
            jumps_neg: Vec::with_capacity(steps + 1),
            events: Vec::new(),
            warnings: 0,
            trajectories,
        };
        let record = |reg: &EnsembleRegistry<T>, pos: u64, neg: u64, out: &mut NmqjRun<T>| {
            let rho = reg.density_exciton();
            out.times.push(reg.time);
            out.site.push(basis.to_site(&rho));
            out.exciton.push(rho);
            out.n_groups.push(reg.groups.len());
            out.jumps_pos.push(pos);
            out.jumps_neg.push(neg);
        };
        record(&reg, 0, 0, &mut out);
        for k in 0..steps {
            let report = self.step(&mut reg, k as u64)?;
            // pin the clock to the grid rather than accumulating dt
            reg.time = self.config.dt * T::from_count(k as u64 + 1);
            out.warnings += report.warnings;
            out.events.extend(report.events);
            record(&reg, report.jumps_pos, report.jumps_neg, &mut out);
        }
        if out.warnings > 0 {
            log::warn!(
                "{} group-steps had a total jump probability above {}; a smaller dt is more accurate",
                out.warnings,
                self.config.probability_cap
            );
        }
        Ok(out)
    }
}

/// exp(−i K dt) for one step.
enum Propagator<T: Real> {
    Diagonal(Vec<Complex<T>>),
    Dense(DMatrix<Complex<T>>),
}

impl<T: Real> Propagator<T> {
    fn new(system: &ExcitonSystem<T>, rates: &[T], lamb: Option<&[T]>, dt: T) -> Self {
        let mi = Complex::new(T::zero(), -dt);
        if system.is_diagonal() {
            Self::Diagonal(system.k_diagonal(rates, lamb).into_iter().map(|k| cexp(k * mi)).collect())
        } else {
            Self::Dense((system.k_matrix(rates, lamb) * mi).exp())
        }
    }

    fn apply(&self, psi: &DVector<Complex<T>>) -> Option<DVector<Complex<T>>> {
        let v = match self {
            Self::Diagonal(d) => DVector::from_iterator(psi.len(), psi.iter().zip(d).map(|(a, b)| *a * *b)),
            Self::Dense(u) => u * psi,
        };
        normalized(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{build_rate_table, RateTableOptions, SpectralDensity};
    use crate::model::{build_channels, diagonalize, dimer, DEFAULT_DEGENERACY_TOL_CM};

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn basis_vec(n: usize, i: usize) -> DVector<Complex<f64>> {
        let mut v = DVector::zeros(n);
        v[i] = c(1.0, 0.0);
        v
    }

    fn dimer_system(lam: f64, markovian: bool, t_final: f64) -> (ExcitonSystem<f64>, RateTable<f64>) {
        let basis = diagonalize(&dimer(50.0, 100.0));
        let ch = build_channels(&basis, DEFAULT_DEGENERACY_TOL_CM);
        let freqs: Vec<f64> = ch.iter().map(|c| c.frequency).collect();
        let j = SpectralDensity::new(lam, 30.0).unwrap();
        let table =
            build_rate_table(&j, 300.0, &freqs, 0.0005, t_final, RateTableOptions { markovian, lamb_shift: false })
                .unwrap();
        (ExcitonSystem::new(basis, ch, &table).unwrap(), table)
    }

    #[test]
    fn index_finds_phase_rotated_states() {
        let psi = normalized(DVector::from_vec(vec![c(0.3, 0.1), c(0.0, 0.7), c(0.5, -0.2)])).unwrap();
        let groups = vec![Group { state: psi.clone(), count: 1 }];
        let mut idx = StateIndex::new(DEFAULT_MATCH_TOL);
        idx.insert(&psi, 0);
        let rotated = &psi * Complex::from_polar(1.0, 2.1);
        assert_eq!(idx.find(&rotated, &groups, |g| &g.state), Some(0));
        let other = normalized(DVector::from_vec(vec![c(0.3, 0.1), c(0.0, 0.7), c(0.5, 0.2)])).unwrap();
        assert_eq!(idx.find(&other, &groups, |g| &g.state), None);
    }

    #[test]
    fn merge_combines_counts() {
        let a = basis_vec(2, 0);
        let b = &a * c(0.0, 1.0);
        let reg = EnsembleRegistry::from_groups(
            vec![Group { state: a, count: 3 }, Group { state: basis_vec(2, 1), count: 4 }, Group { state: b, count: 5 }],
            0.0,
        )
        .unwrap();
        assert_eq!(reg.groups().len(), 2);
        assert_eq!(reg.groups()[0].count, 8);
        assert_eq!(reg.total(), 12);
    }

    #[test]
    fn density_of_half_half_ensemble() {
        let reg = EnsembleRegistry::from_groups(
            vec![Group { state: basis_vec(2, 0), count: 50 }, Group { state: basis_vec(2, 1), count: 50 }],
            0.0,
        )
        .unwrap();
        let rho = reg.density_exciton();
        assert!((rho - DMatrix::identity(2, 2) * c(0.5, 0.0)).camax() < 1e-15);
    }

    #[test]
    fn positive_jump_closed_forms() {
        let (sys, _) = dimer_system(30.0, true, 0.01);
        let theta = 0.5 * (2.0f64 * 50.0 / 100.0).atan();
        let e2 = basis_vec(2, 1);
        let mut total_p = 0.0;
        for ch in sys.channels().iter().filter(|ch| ch.kind == ChannelKind::Relaxation) {
            total_p += positive_jump_probability(&e2, ch, 2.0, 0.001);
            let j = apply_positive_jump(&e2, ch).unwrap();
            assert!((fidelity(&j, &basis_vec(2, 0)) - 1.0).abs() < 1e-14);
        }
        let expected = 0.001 * 2.0 * 2.0 * 0.25 * (2.0 * theta).sin().powi(2);
        assert!((total_p - expected).abs() < 1e-15);
        // orthogonal to the channel source
        let ch = sys.channels().iter().find(|ch| ch.kind == ChannelKind::Relaxation).unwrap();
        assert_eq!(positive_jump_probability(&basis_vec(2, 0), ch, 2.0, 0.001), 0.0);
        assert!(apply_positive_jump(&basis_vec(2, 0), ch).is_err());
    }

    #[test]
    fn first_order_no_jump_matches_norm_decay() {
        let (sys, table) = dimer_system(30.0, true, 0.01);
        let h = effective_hamiltonian(&sys, &table, 0.0, false).unwrap();
        let psi = normalized(DVector::from_vec(vec![c(0.6, 0.1), c(0.2, -0.7)])).unwrap();
        let dt = 1e-6;
        let raw = &psi - (&h * &psi) * c(0.0, dt);
        let norm2: f64 = raw.iter().map(|z| z.norm_sqr()).sum();
        let rates = table.rates_at(0.0).unwrap();
        let mut decay = 0.0;
        for (k, ch) in sys.channels().iter().enumerate() {
            decay += rates[sys.column(k)] * ch.weight(&psi);
        }
        // the first-order map is exact up to O((dt‖H_eff‖)²)
        let second = (dt * 2.0 * h.camax()).powi(2);
        assert!(dt * decay > 100.0 * second);
        assert!((norm2 - (1.0 - dt * decay)).abs() < second);
        let next = no_jump_step(&psi, &h, dt).unwrap();
        let exact = Propagator::new(&sys, &rates, None, dt).apply(&psi).unwrap();
        assert!((next - exact).camax() < 1e-8);
    }

    #[test]
    fn zero_rates_leave_counts_alone() {
        let (sys, table) = dimer_system(0.0, false, 0.05);
        let engine = NmqjEngine::new(&sys, &table, NmqjConfig::new(0.001, 3)).unwrap();
        let psi = normalized(DVector::from_vec(vec![c(0.6, 0.0), c(0.8, 0.0)])).unwrap();
        let run = engine.run(&psi, 1000, 0.05).unwrap();
        assert!(run.n_groups.iter().all(|n| *n == 1));
        assert!(run.jumps_pos.iter().chain(&run.jumps_neg).all(|j| *j == 0));
        for rho in &run.exciton {
            assert!((rho[(0, 0)].re - 0.36).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_jump_undoes_relaxation() {
        let (sys, _) = dimer_system(30.0, true, 0.01);
        let k = sys.channels().iter().position(|ch| ch.kind == ChannelKind::Relaxation).unwrap();
        let mut reg = EnsembleRegistry::from_groups(
            vec![Group { state: basis_vec(2, 1), count: 600 }, Group { state: basis_vec(2, 0), count: 400 }],
            0.0,
        )
        .unwrap();
        let events = negative_jump(&mut reg, sys.channels(), k, -5.0, 0.01, &JumpRng::new(1, 0)).unwrap();
        assert_eq!(reg.total(), 1000);
        assert!(events.iter().all(|e| e.direction == JumpDirection::Negative && e.source == 1 && e.target == 0));
        let moved: u64 = events.iter().map(|e| e.count).sum();
        assert!(moved > 0);
        assert_eq!(reg.count_of(&basis_vec(2, 1), 1e-9), 600 + moved);
    }

    #[test]
    fn empty_source_is_a_violation() {
        let (sys, _) = dimer_system(30.0, true, 0.01);
        let k = sys.channels().iter().position(|ch| ch.kind == ChannelKind::Relaxation).unwrap();
        let mut reg = EnsembleRegistry::new(basis_vec(2, 1), 100).unwrap();
        let err = negative_jump(&mut reg, sys.channels(), k, -5.0, 0.01, &JumpRng::new(1, 0)).unwrap_err();
        match err {
            Error::Positivity(v) => {
                assert_eq!(v.source_count, 0);
                assert!(v.expected_flow > 0.0);
            }
            other => panic!("unexpected {other}"),
        }
        // no target weight: nothing to do
        let mut reg = EnsembleRegistry::new(basis_vec(2, 0), 100).unwrap();
        assert!(negative_jump(&mut reg, sys.channels(), k, -5.0, 0.01, &JumpRng::new(1, 0)).unwrap().is_empty());
    }

    #[test]
    fn seeded_runs_repeat() {
        let (sys, table) = dimer_system(30.0, false, 0.2);
        let mut cfg = NmqjConfig::new(0.001, 11);
        cfg.record_events = true;
        let engine = NmqjEngine::new(&sys, &table, cfg).unwrap();
        let psi = sys.basis().state_to_exciton(&basis_vec(2, 0));
        let a = engine.run(&psi, 500, 0.2).unwrap();
        let b = engine.run(&psi, 500, 0.2).unwrap();
        assert_eq!(a.events, b.events);
        assert!(!a.events.is_empty());
        for (x, y) in a.site.iter().zip(&b.site) {
            assert_eq!(x, y);
        }
    }
}
