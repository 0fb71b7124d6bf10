//! Acceptance suite. Each criterion prints one PASS/FAIL line; the binary
//! exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use momentkv::cache::{KvLayout, Phase, TokenSlot};
use momentkv::metrics::{diagonal, median, DEFAULT_ORACLE_HORIZON};
use momentkv::model::{DecodeSession, ModelSpec, ToyModel};
use momentkv::policy::{momentkv_select, AttentionRow, LayerCache, Policy, PolicyParams};
use momentkv::trace::{
    gen_heavy_hitter_trace, gen_recency_burst_trace, replay, Dip, HeavyHitterParams, Hitter,
    RecencyBurstParams, ReplayOptions, Replayer,
};
use momentkv::TraceFile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A strictly positive row of `len` weights summing to one.
fn random_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| 0.01 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn marker_layer(policy: Policy, prefill_len: usize) -> LayerCache<f32> {
    let mut layer = LayerCache::new(KvLayout::metadata_only(), policy).unwrap();
    layer
        .prefill(
            (0..prefill_len)
                .map(|p| TokenSlot::marker(p, Phase::Prefill))
                .collect(),
        )
        .unwrap();
    layer
}

fn sliding_window(budget: usize) -> Policy {
    Policy::new(PolicyParams::StreamingSink { sink_size: 0 }, budget).unwrap()
}

fn ema_closed_form() -> Outcome {
    let started = Instant::now();
    let (m, budget, steps) = (8, 64, 1200);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (seed, alpha) in [0.5, 0.9, 0.98].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut layer = marker_layer(Policy::moment_kv(alpha, budget).unwrap(), m);
        // weights received by each decode position, indexed by step
        let mut received: Vec<Vec<(usize, f64)>> = Vec::new();
        for t in 1..=steps {
            layer
                .append(TokenSlot::marker(m + t - 1, Phase::Decode))
                .unwrap();
            received.push(Vec::new());
            let weights = random_row(&mut rng, layer.pool().total_size());
            for (slot, &w) in layer.pool().decode().iter().zip(&weights[m..]) {
                received[slot.global_position() - m].push((t, w));
            }
            layer.observe(&AttentionRow::new(weights, t, m)).unwrap();
            layer.enforce(t).unwrap();
            for (slot, &score) in layer
                .pool()
                .decode()
                .iter()
                .zip(layer.importance().scores())
            {
                let expected: f64 = received[slot.global_position() - m]
                    .iter()
                    .map(|&(s, w)| alpha.powi((t - s) as i32) * w)
                    .sum();
                let err = (score - expected).abs();
                worst = worst.max(err);
                ensure(err <= 1e-9, || {
                    format!(
                        "alpha {alpha} step {t} position {}: {score} vs {expected}",
                        slot.global_position()
                    )
                })?;
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{checked} scores over 3 x {steps} steps, max error {worst:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

#[derive(Default)]
struct FuzzStats {
    runs: usize,
    enforcements: usize,
    budget_violations: usize,
    prefill_violations: usize,
    newest_checks: usize,
    newest_violations: Vec<String>,
}

fn random_policy(rng: &mut ChaCha8Rng, prefill_len: usize, budget: usize) -> Policy {
    let params = match rng.random_range(0..4) {
        0 | 1 => PolicyParams::MomentKv {
            momentum_alpha: if rng.random_bool(0.2) {
                [0.0, 1.0][rng.random_range(0..2)]
            } else {
                rng.random()
            },
        },
        2 => PolicyParams::H2o {
            recency_window: rng.random_range(0..budget),
        },
        _ => match rng.random_bool(0.5) {
            true => PolicyParams::ScopeSlide {
                heavy_keep: rng.random_range(0..budget),
            },
            false => PolicyParams::StreamingSink {
                sink_size: rng.random_range(0..=prefill_len + budget),
            },
        },
    };
    Policy::new(params, budget).unwrap()
}

fn prefill_bits(slots: &[TokenSlot<f32>]) -> Vec<(usize, Vec<u32>, Vec<u32>)> {
    slots
        .iter()
        .map(|s| {
            (
                s.global_position(),
                s.key().iter().map(|x| x.to_bits()).collect(),
                s.value().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

/// Random append/observe/enforce sequences over every bounded policy.
fn fuzz(n_runs: usize) -> FuzzStats {
    let layout = KvLayout::new(2, 2);
    let mut stats = FuzzStats::default();
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + run as u64);
        let m = rng.random_range(1..=8);
        let budget = rng.random_range(1..=16);
        let policy = random_policy(&mut rng, m, budget);
        let vector = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..layout.width())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        };
        let mut layer: LayerCache<f32> = LayerCache::new(layout, policy).unwrap();
        let prefill: Vec<TokenSlot<f32>> = (0..m)
            .map(|p| TokenSlot::new(p, vector(&mut rng), vector(&mut rng), Phase::Prefill))
            .collect();
        layer.prefill(prefill).unwrap();
        let initial = prefill_bits(layer.pool().prefill());

        let mut position = m;
        let steps = rng.random_range(1..=60);
        for t in 1..=steps {
            // occasionally several appends before one enforcement
            let appends = if rng.random_bool(0.15) {
                rng.random_range(2..=3)
            } else {
                1
            };
            for _ in 0..appends {
                layer
                    .append(TokenSlot::new(
                        position,
                        vector(&mut rng),
                        vector(&mut rng),
                        Phase::Decode,
                    ))
                    .unwrap();
                position += 1;
            }
            let row = AttentionRow::new(random_row(&mut rng, layer.pool().total_size()), t, m);
            layer.observe(&row).unwrap();
            let decision = layer.select(t).unwrap();
            if matches!(policy.params, PolicyParams::MomentKv { .. }) {
                stats.newest_checks += 1;
                let newest = *decision.scores_snapshot.last().unwrap();
                let own = *row.decode_slice().last().unwrap();
                if !(newest > 0.0 && newest == own) {
                    stats.newest_violations.push(format!(
                        "run {run} step {t}: score {newest} vs weight {own}"
                    ));
                }
            }
            layer.apply(&decision).unwrap();
            stats.enforcements += 1;
            let pool = layer.pool();
            if pool.decode_len() > budget || pool.total_size() > m + budget {
                stats.budget_violations += 1;
            }
            if prefill_bits(pool.prefill()) != initial {
                stats.prefill_violations += 1;
            }
        }
        stats.runs += 1;
    }
    stats
}

fn budget_law(stats: &FuzzStats) -> Outcome {
    ensure(stats.budget_violations == 0, || {
        format!("{} budget violations", stats.budget_violations)
    })?;
    ensure(stats.prefill_violations == 0, || {
        format!("{} prefill mutations", stats.prefill_violations)
    })?;
    Ok(format!(
        "{} sequences, {} enforcements, zero violations",
        stats.runs, stats.enforcements
    ))
}

fn newest_token(stats: &FuzzStats) -> Outcome {
    ensure(stats.newest_violations.is_empty(), || {
        format!(
            "{} violations, first: {}",
            stats.newest_violations.len(),
            stats.newest_violations[0]
        )
    })?;
    Ok(format!(
        "{} MomentKV selections, newest score == own weight > 0",
        stats.newest_checks
    ))
}

/// Minimum-sum subset of each size, ties to the lexicographically smallest
/// index set.
fn exhaustive_minima(scores: &[f64]) -> Vec<(f64, Vec<usize>)> {
    let n = scores.len();
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; n + 1];
    for mask in 0u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = set.iter().map(|&i| scores[i]).sum();
        let slot = &mut best[set.len()];
        let better = match slot {
            None => true,
            Some((s, v)) => sum < *s || (sum == *s && set < *v),
        };
        if better {
            *slot = Some((sum, set));
        }
    }
    best.into_iter().map(Option::unwrap).collect()
}

fn eviction_optimality() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0usize;
    for n in 0..=12usize {
        for trial in 0..120 {
            // dyadic scores force exact ties; the rest are continuous
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        rng.random_range(0..4) as f64 / 8.0
                    } else {
                        rng.random()
                    }
                })
                .collect();
            let minima = exhaustive_minima(&scores);
            for (k, (min_sum, min_set)) in minima.iter().enumerate() {
                let victims = momentkv_select(&scores, k).map_err(|e| e.to_string())?;
                let sum: f64 = victims.iter().map(|&i| scores[i]).sum();
                ensure(sum == *min_sum, || {
                    format!("n={n} k={k} scores {scores:?}: sum {sum} vs minimum {min_sum}")
                })?;
                ensure(victims == *min_set, || {
                    format!("n={n} k={k} scores {scores:?}: {victims:?} vs older-first {min_set:?}")
                })?;
                cases += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{cases} (scores, overflow) cases up to n=12, exact sums and tie-break, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn shared_trace(steps: usize) -> TraceFile {
    let mut p = HeavyHitterParams::new(16, steps);
    p.hitters = vec![
        Hitter {
            position: 3,
            base_mass: 0.1,
        },
        Hitter {
            position: 40,
            base_mass: 0.15,
        },
        Hitter {
            position: 900,
            base_mass: 0.1,
        },
    ];
    p.dips = vec![Dip {
        position: 40,
        start_step: 500,
        len: 300,
    }];
    p.self_mass = 0.05;
    p.noise = 0.5;
    p.salience_spread = 1.0;
    p.seed = 4;
    gen_heavy_hitter_trace(&p).unwrap()
}

fn degenerate_equivalences() -> Outcome {
    let trace = shared_trace(4096);
    let budget = 256;
    let h2o = Policy::new(PolicyParams::H2o { recency_window: 0 }, budget).unwrap();
    let mut cumulative = Replayer::new(&trace, Policy::moment_kv(1.0, budget).unwrap(), true)
        .map_err(|e| e.to_string())?;
    let mut heavy = Replayer::new(&trace, h2o, true).map_err(|e| e.to_string())?;
    let mut instant = Replayer::new(&trace, Policy::moment_kv(0.0, budget).unwrap(), true)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    loop {
        let (a, b, c) = (
            cumulative.step().map_err(|e| e.to_string())?,
            heavy.step().map_err(|e| e.to_string())?,
            instant.step().map_err(|e| e.to_string())?,
        );
        let (Some(a), Some(b), Some(c)) = (a, b, c) else {
            break;
        };
        let (sa, sb) = (
            &a.decisions[0].scores_snapshot,
            &b.decisions[0].scores_snapshot,
        );
        ensure(sa.len() == sb.len(), || {
            format!("step {}: pool sizes differ", a.step)
        })?;
        for (x, y) in sa.iter().zip(sb) {
            worst = worst.max((x - y).abs());
        }
        ensure(worst <= 1e-12, || {
            format!("step {}: alpha=1 vs H2O gap {worst:e}", a.step)
        })?;
        ensure(
            a.decisions[0].victim_positions == b.decisions[0].victim_positions,
            || format!("step {}: victims differ", a.step),
        )?;
        compared += sa.len();
        ensure(
            c.decisions[0].scores_snapshot.as_slice() == c.rows_fed[0].decode_slice(),
            || format!("step {}: alpha=0 scores differ from latest slice", c.step),
        )?;
    }
    Ok(format!(
        "4096 steps, B_d={budget}: {compared} score pairs, max |alpha1 - H2O| {worst:e}; alpha=0 exact"
    ))
}

fn full_budget_fidelity() -> Outcome {
    let steps = 1024;
    let model = ToyModel::<f32>::new(ModelSpec::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prompt: Vec<usize> = (0..16)
        .map(|_| rng.random_range(0..model.spec().vocab_size))
        .collect();
    let mut full =
        DecodeSession::start(&model, &prompt, Policy::full_cache()).map_err(|e| e.to_string())?;
    let mut bounded = DecodeSession::start(&model, &prompt, Policy::moment_kv(0.9, steps).unwrap())
        .map_err(|e| e.to_string())?;
    for _ in 0..steps {
        let a = full.step().map_err(|e| e.to_string())?;
        let b = bounded.step().map_err(|e| e.to_string())?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.logits) == bits(&b.logits), || {
            format!("step {}: logits differ", a.step)
        })?;
        for (ra, rb) in a.attention_rows.iter().zip(&b.attention_rows) {
            let same = ra.weights.len() == rb.weights.len()
                && ra
                    .weights
                    .iter()
                    .zip(&rb.weights)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("step {}: attention rows differ", a.step))?;
        }
        ensure(b.decisions.iter().all(|d| d.is_empty()), || {
            format!("step {}: unexpected eviction", b.step)
        })?;
    }
    Ok(format!(
        "T={steps}: logits and attention rows bit-identical to FullCache"
    ))
}

/// Dip-survival instance. All non-hitter tokens receive at most `b` per step
/// during the dip, so no competitor's score exceeds `b / (1 - alpha)`; the
/// hitter's score never drops below `alpha^D * I_pre`. The dip length is the
/// largest `D` for which that bound guarantees survival.
fn dip_survival() -> Outcome {
    let (m, budget, steps, hitter, start) = (8usize, 16usize, 200usize, 8usize, 60usize);
    let (base, alpha) = (0.3f64, 0.9f64);

    // Masked, renormalized weight of the hitter at step s before the dip:
    // full rows hold `base` on the hitter and `(1 - base) / (L - 1)` on every
    // other token; once the pool is saturated only M + B_d others survive.
    let hitter_weight = |s: usize| -> f64 {
        if s <= budget + 1 {
            base
        } else {
            let others = (1.0 - base) / (m + s - 1) as f64;
            base / (base + (m + budget) as f64 * others)
        }
    };
    let i_pre: f64 = (1..start)
        .map(|s| alpha.powi((start - 1 - s) as i32) * hitter_weight(s))
        .sum();
    // During the dip every row is uniform, so each cached token gets 1/(M+B+1).
    let background_bound = 1.0 / (m + budget + 1) as f64 / (1.0 - alpha);
    let dip_len = ((background_bound / i_pre).ln() / alpha.ln()).ceil() as usize - 1;
    ensure(
        alpha.powi(dip_len as i32) * i_pre > background_bound,
        || "inequality solution is wrong".into(),
    )?;
    ensure(dip_len > budget, || {
        format!("dip {dip_len} not longer than window residency {budget}")
    })?;

    let mut p = HeavyHitterParams::new(m, steps);
    p.hitters = vec![Hitter {
        position: hitter,
        base_mass: base,
    }];
    p.dips = vec![Dip {
        position: hitter,
        start_step: start,
        len: dip_len,
    }];
    let trace = gen_heavy_hitter_trace(&p).map_err(|e| e.to_string())?;
    let opts = ReplayOptions {
        hitters: vec![hitter],
        ..ReplayOptions::default()
    };
    let retention = |policy: Policy| -> Result<f64, String> {
        let report = replay(&trace, policy, &opts).map_err(|e| e.to_string())?;
        report
            .heavy_hitter_retention
            .ok_or_else(|| "no retention reported".to_string())
    };
    let kept = retention(Policy::moment_kv(alpha, budget).unwrap())?;
    let instant = retention(Policy::moment_kv(0.0, budget).unwrap())?;
    let window = retention(sliding_window(budget))?;
    ensure(kept == 1.0 && instant == 0.0 && window == 0.0, || {
        format!("retention alpha=0.9 {kept}, alpha=0 {instant}, sliding window {window}")
    })?;
    Ok(format!(
        "I_pre={i_pre:.3}, dip {dip_len} steps: retention alpha=0.9 {kept}, alpha=0 {instant}, sliding window {window}"
    ))
}

fn recency_concentration() -> Outcome {
    let cdf_of = |concentration: f64| -> Result<Vec<f64>, String> {
        let params = RecencyBurstParams {
            seed: 8,
            ..RecencyBurstParams::new(16, 768, concentration)
        };
        let trace = gen_recency_burst_trace(&params).map_err(|e| e.to_string())?;
        let opts = ReplayOptions {
            cdf_window: Some(256),
            ..ReplayOptions::default()
        };
        let report = replay(&trace, Policy::full_cache(), &opts).map_err(|e| e.to_string())?;
        let curves = report.cdf.ok_or("no CDF")?;
        ensure(curves.len() == 1 && curves[0].is_monotone(), || {
            "bad curve".into()
        })?;
        Ok(curves[0].mass.clone())
    };
    let burst = cdf_of(0.1)?;
    let at_tenth = {
        // linear interpolation at fraction 0.1 of the window
        let x = 0.1 * burst.len() as f64;
        let k = x.floor() as usize;
        let lo = if k == 0 { 0.0 } else { burst[k - 1] };
        lo + (burst[k] - lo) * (x - k as f64)
    };
    let diag = diagonal(burst.len());
    ensure(at_tenth >= 0.8, || format!("CDF(0.1) = {at_tenth:.3}"))?;
    let dominated = burst[..burst.len() - 1]
        .iter()
        .zip(&diag)
        .all(|(c, d)| c > d);
    ensure(dominated, || {
        "burst CDF does not strictly dominate the diagonal".into()
    })?;
    let uniform = cdf_of(1.0)?;
    let gap = uniform
        .iter()
        .zip(&diag)
        .map(|(c, d)| (c - d).abs())
        .fold(0.0, f64::max);
    ensure(gap <= 1e-6, || {
        format!("uniform CDF off diagonal by {gap:e}")
    })?;
    Ok(format!(
        "burst CDF(0.1) = {at_tenth:.3}, dominates diagonal; uniform max gap {gap:.1e}"
    ))
}

/// Median per-step policy cost once the pool is saturated, best of `reps`.
fn steady_policy_cost(trace: &TraceFile, budget: usize, reps: usize) -> f64 {
    (0..reps)
        .map(|_| {
            let mut r =
                Replayer::new(trace, Policy::moment_kv(0.9, budget).unwrap(), true).unwrap();
            let mut samples = Vec::new();
            while let Some(s) = r.step().unwrap() {
                if s.step > budget + 1 {
                    samples.push(s.policy_nanos);
                }
            }
            median(&samples)
        })
        .fold(f64::INFINITY, f64::min)
}

fn overhead_scaling() -> Outcome {
    let trace = shared_trace(2560);
    let small = steady_policy_cost(&trace, 256, 5);
    let large = steady_policy_cost(&trace, 1024, 5);
    let ratio = large / small;

    let model = ToyModel::<f32>::new(ModelSpec::default()).map_err(|e| e.to_string())?;
    let prompt: Vec<usize> = (0..32).collect();
    let mut session =
        DecodeSession::start(&model, &prompt, Policy::full_cache()).map_err(|e| e.to_string())?;
    let (mut policy_ns, mut step_ns) = (0u64, 0u64);
    for _ in 0..1024 {
        let s = session.step().map_err(|e| e.to_string())?;
        policy_ns += s.policy_nanos;
        step_ns += s.step_nanos;
    }
    let share = policy_ns as f64 / step_ns as f64;
    ensure(ratio <= 4.0, || {
        format!("cost ratio B=1024/B=256 is {ratio:.2} ({large:.0}ns vs {small:.0}ns)")
    })?;
    ensure(share <= 0.05, || {
        format!("FullCache policy share {:.2}%", share * 100.0)
    })?;
    Ok(format!(
        "median policy cost {small:.0}ns at B_d=256, {large:.0}ns at B_d=1024 (ratio {ratio:.2}); FullCache share {:.2}%",
        share * 100.0
    ))
}

fn oracle_trace(seed: u64) -> TraceFile {
    let (m, steps) = (16, 600);
    let mut p = HeavyHitterParams::new(m, steps);
    let positions = [20, 60, 110, 170, 240, 320];
    p.hitters = positions
        .iter()
        .map(|&position| Hitter {
            position,
            base_mass: 0.06,
        })
        .collect();
    p.dips = positions
        .iter()
        .enumerate()
        .map(|(i, &position)| Dip {
            position,
            start_step: position - m + 40 + 25 * i,
            len: 40,
        })
        .collect();
    p.self_mass = 0.1;
    p.noise = 0.1;
    p.salience_spread = 1.0;
    p.seed = seed;
    gen_heavy_hitter_trace(&p).unwrap()
}

fn oracle_ordering() -> Outcome {
    let budget = 64;
    let opts = ReplayOptions {
        oracle_horizon: Some(DEFAULT_ORACLE_HORIZON),
        ..ReplayOptions::default()
    };
    let policies = [
        Policy::moment_kv(0.9, budget).unwrap(),
        Policy::new(
            PolicyParams::ScopeSlide {
                heavy_keep: budget / 2,
            },
            budget,
        )
        .unwrap(),
        sliding_window(budget),
    ];
    let seeds = [1u64, 2, 3];
    let mut means = [0.0f64; 3];
    for &seed in &seeds {
        let trace = oracle_trace(seed);
        for (mean, policy) in means.iter_mut().zip(policies) {
            let report = replay(&trace, policy, &opts).map_err(|e| e.to_string())?;
            *mean += report.oracle_agreement.ok_or("no evictions")? / seeds.len() as f64;
        }
    }
    let [moment, scope, window] = means;
    ensure(moment > scope && moment > window, || {
        format!("Jaccard MomentKV {moment:.3}, ScopeSlide {scope:.3}, sliding window {window:.3}")
    })?;
    Ok(format!(
        "mean Jaccard over {} traces: MomentKV(0.9) {moment:.3} > ScopeSlide {scope:.3}, sliding window {window:.3}",
        seeds.len()
    ))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let fuzzed = fuzz(10_000);
    let criteria: Vec<(&str, Check)> = vec![
        ("EMA closed form", Box::new(ema_closed_form)),
        ("budget law", Box::new(|| budget_law(&fuzzed))),
        ("eviction optimality", Box::new(eviction_optimality)),
        ("degenerate equivalences", Box::new(degenerate_equivalences)),
        ("new-token guarantee", Box::new(|| newest_token(&fuzzed))),
        ("full-budget fidelity", Box::new(full_budget_fidelity)),
        ("dip survival", Box::new(dip_survival)),
        ("recency concentration", Box::new(recency_concentration)),
        ("overhead scaling", Box::new(overhead_scaling)),
        ("oracle-agreement ordering", Box::new(oracle_ordering)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
