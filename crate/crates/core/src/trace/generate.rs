//! Synthetic attention traces.
//!
//! Two shapes are produced:
//!
//! * heavy-hitter traces, where labeled tokens hold a fixed share of every
//!   row except during configured dip windows, and all other tokens share the
//!   remainder in proportion to a persistent per-token salience;
//! * recency-burst traces, where a small fraction of the most recent decode
//!   tokens carries most of the recency window's mass.
//!
//! Rows are built in `f64`, normalized, and stored as `f32`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::{TraceError, TraceFile, TraceHeader, TraceSource, TraceStep};

/// Every generated row sums to one within this bound after conversion to
/// `f32`.
pub const GENERATOR_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hitter {
    pub position: usize,
    /// Share of each row the hitter receives while not dipped.
    pub base_mass: f64,
}

/// A window of `len` steps starting at `start_step` (1-based) during which
/// the hitter at `position` falls back to background attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dip {
    pub position: usize,
    pub start_step: usize,
    pub len: usize,
}

impl Dip {
    pub fn contains(&self, step: usize) -> bool {
        step >= self.start_step && step < self.start_step + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeavyHitterParams {
    pub prefill_len: usize,
    pub steps: usize,
    pub n_layers: usize,
    pub hitters: Vec<Hitter>,
    pub dips: Vec<Dip>,
    /// Weight the newest token puts on itself.
    pub self_mass: f64,
    /// Per-step multiplicative jitter on background weights, in `[0, 1)`.
    pub noise: f64,
    /// Log-normal sigma of persistent background salience; 0 = uniform.
    pub salience_spread: f64,
    pub seed: u64,
}

impl HeavyHitterParams {
    pub fn new(prefill_len: usize, steps: usize) -> Self {
        Self {
            prefill_len,
            steps,
            n_layers: 1,
            hitters: Vec::new(),
            dips: Vec::new(),
            self_mass: 0.0,
            noise: 0.0,
            salience_spread: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidParams(m));
        if self.prefill_len == 0 || self.steps == 0 || self.n_layers == 0 {
            return bad("prefill_len, steps and n_layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(0.0..1.0).contains(&self.self_mass) {
            return bad(format!("self_mass {} outside [0, 1)", self.self_mass));
        }
        if !(self.salience_spread >= 0.0 && self.salience_spread.is_finite()) {
            return bad(format!("salience_spread {}", self.salience_spread));
        }
        let limit = self.prefill_len + self.steps;
        let mut fixed = self.self_mass;
        for (i, h) in self.hitters.iter().enumerate() {
            if h.position >= limit {
                return Err(TraceError::InvalidHitter(format!(
                    "position {} >= M + T = {limit}",
                    h.position
                )));
            }
            if !(h.base_mass > 0.0 && h.base_mass < 1.0) {
                return Err(TraceError::InvalidHitter(format!(
                    "base mass {} outside (0, 1)",
                    h.base_mass
                )));
            }
            if self.hitters[..i].iter().any(|o| o.position == h.position) {
                return Err(TraceError::InvalidHitter(format!(
                    "duplicate position {}",
                    h.position
                )));
            }
            fixed += h.base_mass;
        }
        if fixed >= 1.0 {
            return Err(TraceError::InvalidHitter(format!(
                "hitter masses plus self mass reach {fixed} >= 1"
            )));
        }
        for d in &self.dips {
            if !self.hitters.iter().any(|h| h.position == d.position) {
                return Err(TraceError::InvalidDipWindow(format!(
                    "position {} is not a hitter",
                    d.position
                )));
            }
            if d.start_step == 0 || d.len == 0 || d.start_step + d.len - 1 > self.steps {
                return Err(TraceError::InvalidDipWindow(format!(
                    "steps [{}, {}) not within [1, {}]",
                    d.start_step,
                    d.start_step + d.len,
                    self.steps
                )));
            }
        }
        Ok(())
    }
}

fn finish_row(raw: Vec<f64>) -> Vec<f32> {
    let total: f64 = raw.iter().sum();
    let row: Vec<f32> = raw.iter().map(|&w| (w / total) as f32).collect();
    debug_assert!(
        (row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs() <= GENERATOR_SUM_TOLERANCE
    );
    row
}

/// Scales the entries at `idx` so they sum to `mass`.
fn spread(raw: &mut [f64], idx: &[usize], mass: f64) {
    let total: f64 = idx.iter().map(|&i| raw[i]).sum();
    if total > 0.0 {
        for &i in idx {
            raw[i] *= mass / total;
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, noise: f64) -> f64 {
    if noise == 0.0 {
        1.0
    } else {
        1.0 + noise * (2.0 * rng.random::<f64>() - 1.0)
    }
}

/// Heavy hitters with dips over a salience-weighted background.
pub fn gen_heavy_hitter_trace(params: &HeavyHitterParams) -> Result<TraceFile, TraceError> {
    params.validate()?;
    let m = params.prefill_len;
    let total_positions = m + params.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let salience: Vec<f64> = if params.salience_spread > 0.0 {
        let s = params.salience_spread;
        let dist = LogNormal::new(-0.5 * s * s, s)
            .map_err(|e| TraceError::InvalidParams(e.to_string()))?;
        (0..total_positions)
            .map(|_| dist.sample(&mut rng))
            .collect()
    } else {
        vec![1.0; total_positions]
    };

    let mut steps = Vec::with_capacity(params.steps);
    for t in 1..=params.steps {
        let len = m + t;
        let newest = len - 1;
        let mut rows = Vec::with_capacity(params.n_layers);
        for _ in 0..params.n_layers {
            let mut raw = vec![0.0; len];
            let mut fixed = vec![false; len];
            let mut fixed_mass = 0.0;
            let mut dipped = vec![false; len];
            for h in params.hitters.iter().filter(|h| h.position < len) {
                if params
                    .dips
                    .iter()
                    .any(|d| d.position == h.position && d.contains(t))
                {
                    dipped[h.position] = true;
                } else {
                    raw[h.position] = h.base_mass;
                    fixed[h.position] = true;
                    fixed_mass += h.base_mass;
                }
            }
            if params.self_mass > 0.0 && !fixed[newest] && !dipped[newest] {
                raw[newest] = params.self_mass;
                fixed[newest] = true;
                fixed_mass += params.self_mass;
            }
            let background: Vec<usize> = (0..len).filter(|&p| !fixed[p]).collect();
            for &p in &background {
                let base = if dipped[p] { 1.0 } else { salience[p] };
                raw[p] = base * jitter(&mut rng, params.noise);
            }
            if !background.is_empty() {
                spread(&mut raw, &background, 1.0 - fixed_mass);
            }
            rows.push(vec![finish_row(raw)]);
        }
        steps.push(TraceStep { step: t, rows });
    }

    Ok(TraceFile {
        header: TraceHeader {
            prefill_len: m,
            n_steps: params.steps,
            n_layers: params.n_layers,
            n_heads: 1,
            head_averaged: true,
            source: TraceSource::Synthetic,
            model_tag: format!(
                "synthetic:heavy-hitter:hitters={}:dips={}:seed={}",
                params.hitters.len(),
                params.dips.len(),
                params.seed
            ),
        },
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecencyBurstParams {
    pub prefill_len: usize,
    pub steps: usize,
    pub n_layers: usize,
    /// Fraction of window tokens that form the burst set, in `(0, 1]`.
    pub concentration: f64,
    /// Recency window length in decode tokens.
    pub window: usize,
    /// Row mass given to the window when older tokens exist.
    pub window_mass: f64,
    /// Share of window mass carried by the burst set.
    pub burst_share: f64,
    pub noise: f64,
    pub seed: u64,
}

impl RecencyBurstParams {
    pub fn new(prefill_len: usize, steps: usize, concentration: f64) -> Self {
        Self {
            prefill_len,
            steps,
            n_layers: 1,
            concentration,
            window: 256,
            window_mass: 0.7,
            burst_share: 0.9,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Attention concentrated on a few tokens of the recency window.
///
/// At step `t` the window is the newest `min(window, t)` decode tokens. The
/// burst set has `ceil(concentration * w)` members: the newest token plus a
/// seeded random sample of the rest, and carries `burst_share` of the
/// window's mass. With `concentration == 1` the window is uniform.
pub fn gen_recency_burst_trace(params: &RecencyBurstParams) -> Result<TraceFile, TraceError> {
    let c = params.concentration;
    if !(c > 0.0 && c <= 1.0) {
        return Err(TraceError::BadConcentration(c));
    }
    if params.prefill_len == 0 || params.steps == 0 || params.n_layers == 0 || params.window == 0 {
        return Err(TraceError::InvalidParams(
            "prefill_len, steps, n_layers and window must be >= 1".into(),
        ));
    }
    for (name, v) in [
        ("window_mass", params.window_mass),
        ("burst_share", params.burst_share),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(TraceError::InvalidParams(format!(
                "{name} {v} outside (0, 1]"
            )));
        }
    }
    if !(0.0..1.0).contains(&params.noise) {
        return Err(TraceError::InvalidParams(format!("noise {}", params.noise)));
    }

    let m = params.prefill_len;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut steps = Vec::with_capacity(params.steps);
    for t in 1..=params.steps {
        let len = m + t;
        let w = params.window.min(t);
        let start = len - w;
        let k = ((c * w as f64).ceil() as usize).clamp(1, w);
        let mut rows = Vec::with_capacity(params.n_layers);
        for _ in 0..params.n_layers {
            let mut raw = vec![1.0; len];
            let older: Vec<usize> = (0..start).collect();
            let window_mass = if older.is_empty() {
                1.0
            } else {
                params.window_mass
            };
            spread(&mut raw, &older, 1.0 - window_mass);
            let window: Vec<usize> = (start..len).collect();
            if k == w {
                spread(&mut raw, &window, window_mass);
            } else {
                let mut is_burst = vec![false; w];
                is_burst[w - 1] = true;
                for i in sample(&mut rng, w - 1, k - 1) {
                    is_burst[i] = true;
                }
                let (burst, rest): (Vec<usize>, Vec<usize>) =
                    window.iter().partition(|&&p| is_burst[p - start]);
                for &p in &window {
                    raw[p] = jitter(&mut rng, params.noise);
                }
                spread(&mut raw, &burst, window_mass * params.burst_share);
                spread(&mut raw, &rest, window_mass * (1.0 - params.burst_share));
            }
            rows.push(vec![finish_row(raw)]);
        }
        steps.push(TraceStep { step: t, rows });
    }

    Ok(TraceFile {
        header: TraceHeader {
            prefill_len: m,
            n_steps: params.steps,
            n_layers: params.n_layers,
            n_heads: 1,
            head_averaged: true,
            source: TraceSource::Synthetic,
            model_tag: format!(
                "synthetic:recency-burst:c={}:window={}:seed={}",
                c, params.window, params.seed
            ),
        },
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sum(r: &[f32]) -> f64 {
        r.iter().map(|&w| w as f64).sum()
    }

    #[test]
    fn single_hitter_holds_base_mass() {
        let mut p = HeavyHitterParams::new(4, 20);
        p.hitters = vec![Hitter {
            position: 6,
            base_mass: 0.4,
        }];
        let trace = gen_heavy_hitter_trace(&p).unwrap();
        for step in &trace.steps {
            let row = &step.rows[0][0];
            assert!((row_sum(row) - 1.0).abs() <= GENERATOR_SUM_TOLERANCE);
            if row.len() > 6 {
                assert!((row[6] as f64 - 0.4).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dipped_hitter_falls_to_background() {
        let mut p = HeavyHitterParams::new(8, 40);
        p.noise = 0.2;
        p.hitters = vec![Hitter {
            position: 2,
            base_mass: 0.5,
        }];
        p.dips = vec![Dip {
            position: 2,
            start_step: 10,
            len: 20,
        }];
        let trace = gen_heavy_hitter_trace(&p).unwrap();
        for step in &trace.steps {
            let row = &step.rows[0][0];
            let uniform = 1.0 / row.len() as f64;
            let w = row[2] as f64;
            if (10..30).contains(&step.step) {
                assert!(w <= 2.0 * uniform, "step {} weight {w}", step.step);
            } else {
                assert!((w - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_hitters_is_near_uniform() {
        let trace = gen_heavy_hitter_trace(&HeavyHitterParams::new(4, 10)).unwrap();
        for step in &trace.steps {
            let row = &step.rows[0][0];
            let u = 1.0 / row.len() as f32;
            assert!(row.iter().all(|&w| (w - u).abs() < 1e-7));
        }
    }

    #[test]
    fn invalid_windows_and_hitters() {
        let mut p = HeavyHitterParams::new(4, 10);
        p.hitters = vec![Hitter {
            position: 1,
            base_mass: 0.3,
        }];
        p.dips = vec![Dip {
            position: 1,
            start_step: 8,
            len: 5,
        }];
        assert!(matches!(
            gen_heavy_hitter_trace(&p),
            Err(TraceError::InvalidDipWindow(_))
        ));
        p.dips = vec![Dip {
            position: 1,
            start_step: 0,
            len: 2,
        }];
        assert!(matches!(
            gen_heavy_hitter_trace(&p),
            Err(TraceError::InvalidDipWindow(_))
        ));
        p.dips = vec![Dip {
            position: 3,
            start_step: 1,
            len: 2,
        }];
        assert!(matches!(
            gen_heavy_hitter_trace(&p),
            Err(TraceError::InvalidDipWindow(_))
        ));
        p.dips.clear();
        p.hitters.push(Hitter {
            position: 14,
            base_mass: 0.1,
        });
        assert!(matches!(
            gen_heavy_hitter_trace(&p),
            Err(TraceError::InvalidHitter(_))
        ));
        p.hitters[1].position = 5;
        p.hitters[1].base_mass = 0.8;
        assert!(matches!(
            gen_heavy_hitter_trace(&p),
            Err(TraceError::InvalidHitter(_))
        ));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let mut p = HeavyHitterParams::new(4, 30);
        p.noise = 0.3;
        p.salience_spread = 1.0;
        p.seed = 9;
        assert_eq!(
            gen_heavy_hitter_trace(&p).unwrap(),
            gen_heavy_hitter_trace(&p).unwrap()
        );
        let q = RecencyBurstParams {
            seed: 3,
            ..RecencyBurstParams::new(4, 30, 0.2)
        };
        assert_eq!(
            gen_recency_burst_trace(&q).unwrap(),
            gen_recency_burst_trace(&q).unwrap()
        );
    }

    #[test]
    fn full_concentration_is_uniform_over_window() {
        let trace = gen_recency_burst_trace(&RecencyBurstParams::new(4, 300, 1.0)).unwrap();
        let row = &trace.steps[299].rows[0][0];
        let window = &row[row.len() - 256..];
        assert!(window.iter().all(|&w| w == window[0]));
    }

    #[test]
    fn burst_top_fraction_carries_most_mass() {
        let trace = gen_recency_burst_trace(&RecencyBurstParams::new(8, 300, 0.1)).unwrap();
        let row = &trace.steps[299].rows[0][0];
        let mut window: Vec<f64> = row[row.len() - 256..].iter().map(|&w| w as f64).collect();
        let total: f64 = window.iter().sum();
        window.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = window[..26].iter().sum();
        assert!(top / total >= 0.8);
    }

    #[test]
    fn short_runs_use_all_decode_tokens() {
        let trace = gen_recency_burst_trace(&RecencyBurstParams::new(8, 20, 0.5)).unwrap();
        let row = &trace.steps[19].rows[0][0];
        let decode: f64 = row[8..].iter().map(|&w| w as f64).sum();
        assert!((decode - 0.7).abs() < 1e-6);
    }

    #[test]
    fn bad_concentration() {
        for c in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                gen_recency_burst_trace(&RecencyBurstParams::new(4, 10, c)),
                Err(TraceError::BadConcentration(_))
            ));
        }
    }
}
