//! Iterative magnitude pruning over an arbitrary orthonormal dictionary.
//!
//! Each round rewinds to the projection of the original initialization onto
//! the current span, retrains there with every inactive coefficient pinned to
//! exactly zero, then drops the dictionary elements whose removal changes the
//! trained solution the least. Because the dictionary is orthonormal, the
//! projection residual of a candidate subset is the energy of the dropped
//! coefficients, so the optimal subset keeps the largest coefficients.

use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::dictionary::{factorize, ActiveSet, BasisKind, Dictionary};
use crate::linalg::DenseMatrix;
use crate::nn::{sgd, InputShape, Network, ParamVector, TrainConfig};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Fraction of the currently active elements (or groups) kept per round.
    #[serde(default = "PruneSchedule::default_tau")]
    pub tau: f64,
    pub rounds: usize,
    /// Prune whole bottleneck groups instead of single elements.
    #[serde(default)]
    pub grouped: bool,
    /// Floor on surviving elements (groups, when grouped).
    #[serde(default = "PruneSchedule::default_min_active")]
    pub min_active: usize,
    /// Restart every round from the original initialization. When off, a
    /// round starts from the previous round's solution projected onto the
    /// new span.
    #[serde(default = "PruneSchedule::default_rewind")]
    pub rewind: bool,
}

impl PruneSchedule {
    fn default_tau() -> f64 {
        0.8
    }
    fn default_min_active() -> usize {
        1
    }
    fn default_rewind() -> bool {
        true
    }

    pub fn new(tau: f64, rounds: usize) -> Self {
        Self {
            tau,
            rounds,
            grouped: false,
            min_active: 1,
            rewind: true,
        }
    }

    pub fn grouped(self) -> Self {
        Self { grouped: true, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    /// Survivor count after pruning `current` units: `⌈τ·current⌉`, forced
    /// strictly below `current` and no lower than `min_active`. `None` when
    /// nothing can be removed.
    pub fn next_count(&self, current: usize) -> Option<usize> {
        if current == 0 {
            return None;
        }
        // tolerance absorbs products like 0.8 * 5 = 4.000000000000001
        let keep = ((self.tau * current as f64) - 1e-9).ceil().max(0.0) as usize;
        let keep = keep.min(current - 1).max(self.min_active);
        (keep < current).then_some(keep)
    }
}

/// One point of an accuracy-vs-compression curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub round: usize,
    pub active_count: usize,
    /// Removed elements over the prunable dimension.
    pub compression_ratio: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `‖w − P w‖²` of the sparsify step that produced this round's active set.
    pub sparsify_residual: f64,
}

/// `‖w‖_{D,0}`: coefficients above `zero_tol` in absolute value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SparsityMeasure {
    pub value: usize,
}

pub const ZERO_TOL: f64 = 1e-12;

pub fn sparsity(dict: &Dictionary, w: &[f64], zero_tol: f64) -> Result<SparsityMeasure> {
    let a = dict.to_coefficients(w)?;
    Ok(SparsityMeasure {
        value: a.iter().filter(|v| v.abs() > zero_tol).count(),
    })
}

/// Elements a pruning run can remove: the whole dictionary, or only the
/// bottleneck block in grouped mode.
pub fn prunable_dim(dict: &Dictionary, grouped: bool) -> Result<usize> {
    if grouped {
        let b = dict
            .bottleneck()
            .ok_or_else(|| Error::invalid("grouped pruning needs a bottleneck dictionary"))?;
        Ok(b.d_in * b.d_out)
    } else {
        Ok(dict.dim())
    }
}

/// Active elements that count towards compression.
pub fn prunable_active(dict: &Dictionary, active: &ActiveSet, grouped: bool) -> Result<usize> {
    if grouped {
        let b = dict
            .bottleneck()
            .ok_or_else(|| Error::invalid("grouped pruning needs a bottleneck dictionary"))?;
        Ok(active.count_in(b.target_range()))
    } else {
        Ok(active.len())
    }
}

fn by_magnitude_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The sparsify step: the largest-energy subset of the allowed size.
///
/// Ungrouped, this keeps the active elements with the largest `|a_i|`;
/// grouped, the bottleneck groups with the largest `Σ_k a_{k·d_in+l}²`.
/// Ties drop the lowest index first.
pub fn sparsify_step(
    dict: &Dictionary,
    active: &ActiveSet,
    w: &[f64],
    schedule: &PruneSchedule,
) -> Result<ActiveSet> {
    schedule.validate()?;
    if active.dim() != dict.dim() {
        return Err(Error::invalid("active set and dictionary dimensions differ"));
    }
    let a = dict.to_coefficients(w)?;
    if schedule.grouped {
        let b = dict
            .bottleneck()
            .ok_or_else(|| Error::invalid("grouped pruning needs a bottleneck dictionary"))?;
        let groups = b.surviving_groups(active)?;
        let keep = schedule.next_count(groups.len()).ok_or_else(|| {
            Error::ScheduleExhausted(format!("{} groups left, floor {}", groups.len(), schedule.min_active))
        })?;
        let energy = b.group_energies(&a);
        let mut ranked: Vec<(f64, usize)> = groups.iter().map(|&l| (energy[l], l)).collect();
        ranked.sort_by(|x, y| by_magnitude_then_index(*x, *y));
        let dropped = ranked.len() - keep;
        let mut drop = vec![false; b.d_in];
        for &(_, l) in &ranked[..dropped] {
            drop[l] = true;
        }
        let t = b.target_range();
        let kept = active
            .indices()
            .iter()
            .copied()
            .filter(|&i| !t.contains(&i) || !drop[(i - t.start) % b.d_in]);
        ActiveSet::from_indices(dict.dim(), kept)
    } else {
        let keep = schedule.next_count(active.len()).ok_or_else(|| {
            Error::ScheduleExhausted(format!("{} elements left, floor {}", active.len(), schedule.min_active))
        })?;
        let mut ranked: Vec<(f64, usize)> = active.indices().iter().map(|&i| (a[i].abs(), i)).collect();
        ranked.sort_by(|x, y| by_magnitude_then_index(*x, *y));
        let dropped = ranked.len() - keep;
        ActiveSet::from_indices(dict.dim(), ranked[dropped..].iter().map(|&(_, i)| i))
    }
}

/// A trained point of `Span(active)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSolution {
    /// Dictionary coefficients; inactive entries are exactly zero.
    pub coefficients: Vec<f64>,
    pub params: ParamVector,
}

/// `P_active start`, computed through the coefficient path used in training.
pub fn projected_start(dict: &Dictionary, active: &ActiveSet, start: &ParamVector) -> Result<(Vec<f64>, ParamVector)> {
    let mut a = dict.to_coefficients(start.values())?;
    if active.dim() != a.len() {
        return Err(Error::invalid("active set and dictionary dimensions differ"));
    }
    active.mask_coefficients(&mut a);
    let w = start.with_values(dict.from_coefficients(&a)?)?;
    Ok((a, w))
}

/// SGD on the active coefficients, starting from `P_active start`.
///
/// The gradient with respect to the coefficients is `Vᵀ ∇_w L`, with inactive
/// entries zeroed, so pinned coefficients never move.
pub fn train_in_subspace(
    net: &Network,
    dict: &Dictionary,
    active: &ActiveSet,
    start: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<SubspaceSolution> {
    if dict.dim() != net.param_count() {
        return Err(Error::invalid(format!(
            "dictionary dimension {} does not match {} network parameters",
            dict.dim(),
            net.param_count()
        )));
    }
    let (mut a, _) = projected_start(dict, active, start)?;
    let mask = active.mask();
    let mut w = vec![0.0; dict.dim()];
    let mut grad_w = vec![0.0; dict.dim()];
    sgd(&mut a, data, cfg, |coef, batch, grad| {
        dict.forward_into(coef, &mut w)?;
        let loss = net.loss_and_grad_into(&w, batch, &mut grad_w)?;
        dict.adjoint_into(&grad_w, grad)?;
        for (g, &on) in grad.iter_mut().zip(&mask) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(loss)
    })?;
    let params = start.with_values(dict.from_coefficients(&a)?)?;
    Ok(SubspaceSolution {
        coefficients: a,
        params,
    })
}

/// Callbacks for persisting a pruning run as it progresses.
pub trait ImpObserver {
    /// Called once with `w₀` before the first round trains.
    fn on_init(&mut self, _w0: &ParamVector) -> Result<()> {
        Ok(())
    }

    /// Called with the projected starting point of each round.
    fn on_round_start(&mut self, _round: usize, _active: &ActiveSet, _start: &ParamVector) -> Result<()> {
        Ok(())
    }

    fn on_round_end(&mut self, _record: &RunRecord, _active: &ActiveSet, _solution: &SubspaceSolution) -> Result<()> {
        Ok(())
    }
}

impl ImpObserver for () {}

#[derive(Clone, Debug)]
pub struct ImpRun {
    pub w0: ParamVector,
    pub records: Vec<RunRecord>,
    pub final_active: ActiveSet,
    pub final_solution: SubspaceSolution,
}

fn make_record(
    net: &Network,
    dict: &Dictionary,
    active: &ActiveSet,
    grouped: bool,
    round: usize,
    residual: f64,
    solution: &SubspaceSolution,
    data: &Splits,
) -> Result<RunRecord> {
    let total = prunable_dim(dict, grouped)?;
    let active_count = prunable_active(dict, active, grouped)?;
    Ok(RunRecord {
        round,
        active_count,
        compression_ratio: 1.0 - active_count as f64 / total as f64,
        train_accuracy: net.evaluate(solution.params.values(), &data.train)?,
        test_accuracy: net.evaluate(solution.params.values(), &data.test)?,
        sparsify_residual: residual,
    })
}

/// Runs `schedule.rounds` pruning rounds after an unpruned round 0.
///
/// `w₀` is drawn from `cfg.seed`. Round `t` trains from `P_{D_t} w₀` and is
/// followed by a sparsify step; the run stops early when the schedule can
/// remove nothing more.
pub fn run_imp(
    net: &Network,
    dict: &Dictionary,
    schedule: &PruneSchedule,
    cfg: &TrainConfig,
    data: &Splits,
    observer: &mut dyn ImpObserver,
) -> Result<ImpRun> {
    schedule.validate()?;
    cfg.validate()?;
    prunable_dim(dict, schedule.grouped)?;
    let w0 = net.init_params(cfg.seed);
    observer.on_init(&w0)?;

    let mut active = ActiveSet::full(dict.dim());
    let mut residual = 0.0;
    let mut records = Vec::with_capacity(schedule.rounds + 1);
    let mut previous: Option<SubspaceSolution> = None;
    for round in 0..=schedule.rounds {
        let start = match &previous {
            Some(prev) if !schedule.rewind => &prev.params,
            _ => &w0,
        };
        let (_, projected) = projected_start(dict, &active, start)?;
        observer.on_round_start(round, &active, &projected)?;
        let solution = train_in_subspace(net, dict, &active, start, &data.train, cfg)?;
        let record = make_record(net, dict, &active, schedule.grouped, round, residual, &solution, data)?;
        observer.on_round_end(&record, &active, &solution)?;
        records.push(record);

        if round < schedule.rounds {
            match sparsify_step(dict, &active, solution.params.values(), schedule) {
                Ok(next) => {
                    residual = dict.residual(&next, solution.params.values())?;
                    previous = Some(solution);
                    active = next;
                    continue;
                }
                Err(Error::ScheduleExhausted(_)) => {}
                Err(e) => return Err(e),
            }
        }
        return Ok(ImpRun {
            w0,
            records,
            final_active: active,
            final_solution: solution,
        });
    }
    unreachable!("the final round always returns")
}

/// Trains once over `s` dictionary elements chosen uniformly at random.
pub fn run_fixed_subspace(
    net: &Network,
    dict: &Dictionary,
    s: usize,
    seed: u64,
    cfg: &TrainConfig,
    data: &Splits,
) -> Result<RunRecord> {
    let d = dict.dim();
    if s == 0 || s > d {
        return Err(Error::invalid(format!("subspace size {s} is outside [1, {d}]")));
    }
    let active = if s == d {
        ActiveSet::full(d)
    } else {
        ActiveSet::from_indices(d, index::sample(&mut rng::seeded(seed), d, s).into_iter())?
    };
    let w0 = net.init_params(cfg.seed);
    let solution = train_in_subspace(net, dict, &active, &w0, &data.train, cfg)?;
    make_record(net, dict, &active, false, 0, 0.0, &solution, data)
}

/// A pruned bottleneck layer in factored form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedLayer {
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub m: usize,
    pub u_kind: BasisKind,
    /// Image geometry of the layer input, when it reads a flattened image.
    pub input_shape: Option<InputShape>,
    pub surviving: Vec<usize>,
    /// `d_in` rows of `m` entries.
    pub u_prime: Vec<Vec<f64>>,
    /// `m` rows of `d_out` entries.
    pub c_prime: Vec<Vec<f64>>,
    /// Layer bias, kept dense.
    pub bias: Vec<f64>,
}

fn rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

impl FactorizedLayer {
    /// Pre-activations `xᵀ U′ C′ + b` for one input. Costs `m·(d_in + d_out)`
    /// multiplies instead of `d_in·d_out`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::invalid(format!("input of length {} for d_in {}", x.len(), self.d_in)));
        }
        let mut z = vec![0.0; self.m];
        for (row, &xi) in self.u_prime.iter().zip(x) {
            if xi == 0.0 {
                continue;
            }
            for (zj, &u) in z.iter_mut().zip(row) {
                *zj += xi * u;
            }
        }
        let mut out = self.bias.clone();
        for (row, &zj) in self.c_prime.iter().zip(&z) {
            for (o, &c) in out.iter_mut().zip(row) {
                *o += zj * c;
            }
        }
        Ok(out)
    }

    /// Input coordinates that every unit ignores (all-zero rows of `U′`).
    pub fn ignored_inputs(&self) -> Vec<usize> {
        (0..self.d_in)
            .filter(|&i| self.u_prime[i].iter().all(|&v| v == 0.0))
            .collect()
    }
}

/// `W = U′ C′` for the bottleneck layer of `P_active w`, plus its bias.
pub fn export_factorized(net: &Network, dict: &Dictionary, active: &ActiveSet, w: &ParamVector) -> Result<FactorizedLayer> {
    let b = dict
        .bottleneck()
        .ok_or_else(|| Error::invalid("export needs a bottleneck dictionary"))?;
    let f = factorize(dict, active, w.values())?;
    let info = net.dense_info(b.layer)?;
    let bias_seg = net
        .layout()
        .segment(b.layer, crate::nn::ParamKind::Bias)
        .ok_or_else(|| Error::InvalidState(format!("layer {} has no bias", b.layer)))?;
    Ok(FactorizedLayer {
        layer: b.layer,
        d_in: f.d_in,
        d_out: f.d_out,
        m: f.m(),
        u_kind: b.u_kind,
        input_shape: info.image,
        surviving: f.surviving.clone(),
        u_prime: rows(&f.u_prime),
        c_prime: rows(&f.c_prime),
        bias: w.values()[bias_seg.range()].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};
    use crate::dictionary::make_bottleneck;
    use crate::linalg::random_orthogonal;
    use crate::nn::{NetworkSpec, ParamKind};
    use rand::Rng;

    fn blobs(shape: InputShape, classes: usize, noise_dims: usize, seed: u64) -> Splits {
        synthetic_blobs(&BlobSpec {
            classes,
            per_class: 40,
            input_shape: shape,
            noise_dims,
            separation: 4.0,
            seed,
        })
        .unwrap()
    }

    fn small_task() -> (Network, Splits) {
        let shape = InputShape::new(2, 4, 1);
        let net = Network::new(NetworkSpec::mlp(shape, &[6], 3)).unwrap();
        (net, blobs(shape, 3, 2, 11))
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::new(3, seed)
        }
    }

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
            .collect()
    }

    #[test]
    fn geometric_schedule_counts() {
        let s = PruneSchedule::new(0.5, 3);
        let mut n = 1000;
        let mut seen = vec![n];
        while let Some(k) = s.next_count(n) {
            n = k;
            seen.push(n);
            if seen.len() == 4 {
                break;
            }
        }
        assert_eq!(seen, vec![1000, 500, 250, 125]);
        assert_eq!(PruneSchedule::new(0.8, 1).next_count(5), Some(4));
        assert_eq!(PruneSchedule::new(0.67, 1).next_count(3), Some(2));
        assert_eq!(PruneSchedule::new(0.99, 1).next_count(10), Some(9));
        assert_eq!(PruneSchedule::new(0.5, 1).next_count(1), None);
        let floor = PruneSchedule {
            min_active: 4,
            ..PruneSchedule::new(0.5, 1)
        };
        assert_eq!(floor.next_count(6), Some(4));
        assert_eq!(floor.next_count(4), None);
        assert!(PruneSchedule::new(1.0, 1).validate().is_err());
        assert!(PruneSchedule::new(0.0, 1).validate().is_err());
    }

    #[test]
    fn sparsity_examples() {
        let dict = Dictionary::canonical(4);
        assert_eq!(sparsity(&dict, &[0.0; 4], ZERO_TOL).unwrap().value, 0);
        assert_eq!(sparsity(&dict, &[0.0, 5.0, 0.0, -2.0], ZERO_TOL).unwrap().value, 2);
        let rot = Dictionary::global_random(12, 5).unwrap();
        let mut a = vec![0.0; 12];
        for (j, i) in [0, 2, 3, 5, 7, 8, 11].into_iter().enumerate() {
            a[i] = 1.0 + j as f64;
        }
        let w = rot.from_coefficients(&a).unwrap();
        assert_eq!(sparsity(&rot, &w, ZERO_TOL).unwrap().value, 7);
    }

    #[test]
    fn canonical_sparsify_keeps_largest_magnitudes() {
        let dict = Dictionary::canonical(4);
        let next = sparsify_step(
            &dict,
            &ActiveSet::full(4),
            &[3.0, -1.0, 4.0, 0.5],
            &PruneSchedule::new(0.5, 1),
        )
        .unwrap();
        assert_eq!(next.indices(), &[0, 2]);

        // equal magnitudes: the lowest index goes first
        let next = sparsify_step(&dict, &ActiveSet::full(4), &[1.0, -1.0, 1.0, 2.0], &PruneSchedule::new(0.5, 1))
            .unwrap();
        assert_eq!(next.indices(), &[2, 3]);

        let one = ActiveSet::from_indices(4, [2]).unwrap();
        assert!(matches!(
            sparsify_step(&dict, &one, &[0.0; 4], &PruneSchedule::new(0.5, 1)),
            Err(Error::ScheduleExhausted(_))
        ));
    }

    #[test]
    fn sparsify_matches_exhaustive_search() {
        let mut rng = rng::seeded(3);
        for trial in 0..10 {
            let dict = Dictionary::dense(random_orthogonal(8, trial).unwrap());
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let schedule = PruneSchedule::new(0.5, 1);
            let chosen = sparsify_step(&dict, &ActiveSet::full(8), &w, &schedule).unwrap();
            let mut best = (f64::INFINITY, Vec::new());
            for s in subsets(8, 4) {
                let r = dict.residual(&ActiveSet::from_indices(8, s.clone()).unwrap(), &w).unwrap();
                if r < best.0 {
                    best = (r, s);
                }
            }
            let got = dict.residual(&chosen, &w).unwrap();
            assert!((got - best.0).abs() <= 1e-9, "{got} vs {}", best.0);
            assert_eq!(chosen.indices(), best.1.as_slice());
        }
    }

    fn grouped_net() -> Network {
        Network::new(NetworkSpec::mlp(InputShape::new(1, 3, 1), &[2], 2)).unwrap()
    }

    #[test]
    fn grouped_sparsify_drops_lowest_energy_group() {
        let net = grouped_net();
        let dict = make_bottleneck(&net, 1, BasisKind::Identity).unwrap();
        let b = dict.bottleneck().unwrap().clone();
        assert_eq!((b.d_in, b.d_out), (3, 2));
        let mut w = net.init_params(0).into_values();
        let t = b.target_range();
        w[t.clone()].copy_from_slice(&[3.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
        let a = dict.to_coefficients(&w).unwrap();
        assert_eq!(b.group_energies(&a), vec![9.0, 1.0, 4.0]);

        let schedule = PruneSchedule::new(0.67, 1).grouped();
        let next = sparsify_step(&dict, &ActiveSet::full(dict.dim()), &w, &schedule).unwrap();
        assert_eq!(b.surviving_groups(&next).unwrap(), vec![0, 2]);
        // indices outside the target layer are never touched
        for i in (0..dict.dim()).filter(|i| !t.contains(i)) {
            assert!(next.contains(i));
        }

        let residuals: Vec<f64> = (0..3)
            .map(|drop| {
                let keep: Vec<usize> = (0..3).filter(|&l| l != drop).collect();
                let set = b.active_from_groups(dict.dim(), &keep).unwrap();
                dict.residual(&set, &w).unwrap()
            })
            .collect();
        let argmin = (0..3).min_by(|&x, &y| residuals[x].total_cmp(&residuals[y])).unwrap();
        assert_eq!(argmin, 1);
        assert!((dict.residual(&next, &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_sparsify_needs_a_bottleneck() {
        let dict = Dictionary::canonical(4);
        let schedule = PruneSchedule::new(0.5, 1).grouped();
        assert!(sparsify_step(&dict, &ActiveSet::full(4), &[1.0; 4], &schedule).is_err());
    }

    #[test]
    fn zero_rounds_is_vanilla_training() {
        let (net, data) = small_task();
        let dict = Dictionary::canonical(net.param_count());
        let c = cfg(4);
        let run = run_imp(&net, &dict, &PruneSchedule::new(0.8, 0), &c, &data, &mut ()).unwrap();
        assert_eq!(run.records.len(), 1);
        let r = &run.records[0];
        assert_eq!((r.round, r.compression_ratio, r.sparsify_residual), (0, 0.0, 0.0));
        assert_eq!(r.active_count, net.param_count());

        let vanilla = net.train(&net.init_params(4), &data.train, &c, None).unwrap();
        assert_eq!(r.test_accuracy, net.evaluate(vanilla.values(), &data.test).unwrap());
        assert_eq!(r.train_accuracy, net.evaluate(vanilla.values(), &data.train).unwrap());

        let full = run_fixed_subspace(&net, &dict, net.param_count(), 99, &c, &data).unwrap();
        assert_eq!(&full, r);
    }

    #[test]
    fn fixed_subspace_range_is_checked() {
        let (net, data) = small_task();
        let dict = Dictionary::canonical(net.param_count());
        let d = net.param_count();
        assert!(run_fixed_subspace(&net, &dict, 0, 1, &cfg(1), &data).is_err());
        assert!(run_fixed_subspace(&net, &dict, d + 1, 1, &cfg(1), &data).is_err());
        let r = run_fixed_subspace(&net, &dict, d / 2, 1, &cfg(1), &data).unwrap();
        assert_eq!(r.active_count, d / 2);
        assert!((r.compression_ratio - (1.0 - (d / 2) as f64 / d as f64)).abs() < 1e-12);
    }

    #[derive(Default)]
    struct Recorder {
        w0: Option<ParamVector>,
        starts: Vec<(ActiveSet, ParamVector)>,
        ends: Vec<(RunRecord, ActiveSet, SubspaceSolution)>,
    }

    impl ImpObserver for Recorder {
        fn on_init(&mut self, w0: &ParamVector) -> Result<()> {
            self.w0 = Some(w0.clone());
            Ok(())
        }
        fn on_round_start(&mut self, _round: usize, active: &ActiveSet, start: &ParamVector) -> Result<()> {
            self.starts.push((active.clone(), start.clone()));
            Ok(())
        }
        fn on_round_end(&mut self, record: &RunRecord, active: &ActiveSet, solution: &SubspaceSolution) -> Result<()> {
            self.ends.push((record.clone(), active.clone(), solution.clone()));
            Ok(())
        }
    }

    #[test]
    fn imp_rounds_rewind_confine_and_shrink() {
        let (net, data) = small_task();
        let d = net.param_count();
        let dict = Dictionary::global_random(d, 8).unwrap();
        let schedule = PruneSchedule::new(0.8, 6);
        let mut rec = Recorder::default();
        let run = run_imp(&net, &dict, &schedule, &cfg(2), &data, &mut rec).unwrap();
        assert_eq!(run.records.len(), 7);
        let w0 = rec.w0.unwrap();
        assert_eq!(w0, net.init_params(2));
        assert_eq!(run.w0, w0);

        for (t, (active, start)) in rec.starts.iter().enumerate() {
            assert_eq!(start.values(), dict.project(active, w0.values()).unwrap().as_slice(), "round {t}");
        }
        for (t, (record, active, sol)) in rec.ends.iter().enumerate() {
            assert_eq!(record.round, t);
            assert_eq!(record.active_count, active.len());
            assert!((record.compression_ratio - (1.0 - active.len() as f64 / d as f64)).abs() <= 1e-12);
            for i in (0..d).filter(|&i| !active.contains(i)) {
                assert_eq!(sol.coefficients[i], 0.0);
            }
            assert!(sparsity(&dict, sol.params.values(), ZERO_TOL).unwrap().value <= active.len());
        }
        for pair in rec.ends.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            assert!(next.1.is_subset_of(&prev.1) && next.1.len() < prev.1.len());
            assert!(next.1.len() as f64 <= (0.8 * prev.1.len() as f64).ceil());
            assert!(next.0.compression_ratio > prev.0.compression_ratio);
            // every dropped coefficient is no larger than every kept one
            let a = &prev.2.coefficients;
            let dropped = prev.1.indices().iter().filter(|&&i| !next.1.contains(i));
            let max_dropped = dropped.map(|&i| a[i].abs()).fold(0.0, f64::max);
            let min_kept = next.1.indices().iter().map(|&i| a[i].abs()).fold(f64::INFINITY, f64::min);
            assert!(max_dropped <= min_kept);
            let expected = dict.dropped_energy(&next.1, prev.2.params.values()).unwrap();
            assert!((next.0.sparsify_residual - expected).abs() <= 1e-9 * (1.0 + expected));
        }
        assert_eq!(&run.final_active, &rec.ends.last().unwrap().1);
    }

    #[test]
    fn imp_stops_when_the_floor_is_reached() {
        let shape = InputShape::new(1, 2, 1);
        let net = Network::new(NetworkSpec::mlp(shape, &[2], 2)).unwrap();
        let data = blobs(shape, 2, 0, 1);
        let dict = Dictionary::canonical(net.param_count());
        let schedule = PruneSchedule {
            min_active: 3,
            ..PruneSchedule::new(0.5, 10)
        };
        let run = run_imp(&net, &dict, &schedule, &cfg(0), &data, &mut ()).unwrap();
        let counts: Vec<usize> = run.records.iter().map(|r| r.active_count).collect();
        assert_eq!(counts, vec![12, 6, 3]);
    }

    #[test]
    fn no_rewind_starts_from_previous_solution() {
        let (net, data) = small_task();
        let dict = Dictionary::canonical(net.param_count());
        let schedule = PruneSchedule {
            rewind: false,
            ..PruneSchedule::new(0.8, 2)
        };
        let mut rec = Recorder::default();
        run_imp(&net, &dict, &schedule, &cfg(5), &data, &mut rec).unwrap();
        for t in 1..rec.starts.len() {
            let prev = rec.ends[t - 1].2.params.values();
            let (active, start) = &rec.starts[t];
            assert_eq!(start.values(), dict.project(active, prev).unwrap().as_slice());
        }
    }

    /// Feature 0 is `±2` by class plus unit noise; feature 1 is pure noise.
    fn one_signal_feature(seed: u64) -> Splits {
        let mut rng = rng::seeded(seed);
        let mut make = |n: usize, split| {
            let mut images = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % 2;
                let mean = if label == 0 { -2.0 } else { 2.0 };
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                images.extend([(mean + e) as f32, noise as f32]);
                labels.push(label);
            }
            Dataset::new(InputShape::new(1, 2, 1), 2, split, images, labels).unwrap()
        };
        Splits {
            train: make(160, crate::data::Split::Train),
            test: make(40, crate::data::Split::Test),
        }
    }

    #[test]
    fn canonical_imp_prunes_the_noise_feature_first() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(1, 2, 1), &[1], 2)).unwrap();
        let first = net.layout().segment(1, ParamKind::Weight).unwrap().clone();
        let (signal, noise) = (first.offset, first.offset + 1);
        let dict = Dictionary::canonical(net.param_count());
        let schedule = PruneSchedule::new(0.8, 12);
        let mut wins = 0;
        for seed in 0..10 {
            let data = one_signal_feature(100 + seed);
            let mut rec = Recorder::default();
            let c = TrainConfig {
                batch_size: 16,
                ..TrainConfig::new(10, seed)
            };
            run_imp(&net, &dict, &schedule, &c, &data, &mut rec).unwrap();
            let dropped_at = |i: usize| rec.ends.iter().position(|(_, a, _)| !a.contains(i)).unwrap_or(usize::MAX);
            if dropped_at(noise) < dropped_at(signal) {
                wins += 1;
            }
        }
        assert!(wins >= 9, "noise pruned first in {wins}/10 seeds");
    }

    #[test]
    fn factorized_export_matches_projected_layer() {
        let shape = InputShape::new(2, 2, 2);
        let net = Network::new(NetworkSpec::mlp(shape, &[5], 3)).unwrap();
        let seg = net.layout().segment(1, ParamKind::Weight).unwrap().clone();
        let bias = net.layout().segment(1, ParamKind::Bias).unwrap().clone();
        let w = net.init_params(6);
        let mut rng = rng::seeded(17);
        for u_kind in [BasisKind::Identity, BasisKind::Random { seed: 3 }] {
            let dict = make_bottleneck(&net, 1, u_kind).unwrap();
            let b = dict.bottleneck().unwrap().clone();
            let active = b.active_from_groups(dict.dim(), &[1, 4, 6]).unwrap();
            let f = export_factorized(&net, &dict, &active, &w).unwrap();
            assert_eq!((f.d_in, f.d_out, f.m), (8, 5, 3));
            let p = dict.project(&active, w.values()).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = f.forward(&x).unwrap();
                for k in 0..5 {
                    let row = &p[seg.offset + k * 8..seg.offset + (k + 1) * 8];
                    let z = p[bias.offset + k] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                    assert!((got[k] - z).abs() <= 1e-5);
                }
            }
            let wmat = nalgebra::DMatrix::from_row_slice(5, 8, &p[seg.range()]);
            assert!(wmat.rank(1e-9) <= 3);
            if u_kind == BasisKind::Identity {
                assert_eq!(f.ignored_inputs(), vec![0, 2, 3, 5, 7]);
                let zero_cols = (0..8).filter(|&i| wmat.column(i).iter().all(|&v| v == 0.0)).count();
                assert_eq!(zero_cols, 8 - 3);
            }

            let full = export_factorized(&net, &dict, &ActiveSet::full(dict.dim()), &w).unwrap();
            assert_eq!(full.m, 8);
            let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
            let got = full.forward(&x).unwrap();
            for k in 0..5 {
                let row = &w.values()[seg.offset + k * 8..seg.offset + (k + 1) * 8];
                let z: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
                assert!((got[k] - z).abs() <= 1e-12);
            }
        }
        assert!(export_factorized(&net, &Dictionary::canonical(net.param_count()), &ActiveSet::full(net.param_count()), &w).is_err());
    }
}
