//! No-U-turn sampler with multinomial state selection, diagonal mass
//! adaptation, and dual-averaging step-size tuning.
//!
//! Warmup follows the windowed schedule: an initial stretch adapts only the
//! step size, then doubling-length windows accumulate draw variances that
//! refresh the mass matrix, and a terminal stretch settles the step size
//! against the final metric. Sampling runs with everything frozen.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Clone, Copy)]
pub(crate) struct NutsConfig {
    pub warmup: usize,
    pub samples: usize,
    pub max_treedepth: usize,
    pub target_accept: f64,
    /// Standard deviation of the N(0, sd) jitter around zero used to
    /// initialize the chain.
    pub init_jitter: f64,
}

pub(crate) struct ChainOutput {
    /// Post-warmup draws, one parameter vector per row.
    pub draws: Vec<Vec<f64>>,
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub step_size: f64,
    pub accept_mean: f64,
}

#[derive(Clone)]
struct Phase {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, mi)| pi * pi * mi).sum::<f64>()
}

fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    from: &Phase,
    dir: f64,
    eps: f64,
    inv_mass: &[f64],
) -> Phase {
    let e = dir * eps;
    let n = from.q.len();
    let mut p: Vec<f64> = (0..n).map(|i| from.p[i] + 0.5 * e * from.grad[i]).collect();
    let q: Vec<f64> = (0..n).map(|i| from.q[i] + e * inv_mass[i] * p[i]).collect();
    let (logp, grad) = target.log_density_grad(&q);
    for i in 0..n {
        p[i] += 0.5 * e * grad[i];
    }
    Phase { q, p, grad, logp }
}

/// Mass-weighted u-turn test across the span of a trajectory segment.
fn u_turn(minus: &Phase, plus: &Phase, inv_mass: &[f64]) -> bool {
    let mut along_minus = 0.0;
    let mut along_plus = 0.0;
    for i in 0..inv_mass.len() {
        let dq = plus.q[i] - minus.q[i];
        along_minus += dq * inv_mass[i] * minus.p[i];
        along_plus += dq * inv_mass[i] * plus.p[i];
    }
    along_minus < 0.0 || along_plus < 0.0
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Tree {
    minus: Phase,
    plus: Phase,
    proposal: Phase,
    /// log sum over tree states of exp(h0 - energy).
    log_weight: f64,
    alpha_sum: f64,
    n_alpha: f64,
    divergent: bool,
    turning: bool,
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogDensity + ?Sized>(
    target: &T,
    from: &Phase,
    dir: f64,
    depth: usize,
    eps: f64,
    h0: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha12Rng,
) -> Tree {
    if depth == 0 {
        let state = leapfrog(target, from, dir, eps, inv_mass);
        let energy = kinetic(&state.p, inv_mass) - state.logp;
        let delta = h0 - energy;
        // NaN energies count as divergent.
        let divergent = !(delta >= -DIVERGENCE_THRESHOLD);
        let alpha = if delta.is_nan() { 0.0 } else { delta.min(0.0).exp() };
        return Tree {
            minus: state.clone(),
            plus: state.clone(),
            log_weight: if divergent { f64::NEG_INFINITY } else { delta },
            proposal: state,
            alpha_sum: alpha,
            n_alpha: 1.0,
            divergent,
            turning: false,
        };
    }

    let left = build_tree(target, from, dir, depth - 1, eps, h0, inv_mass, rng);
    if left.divergent || left.turning {
        return left;
    }
    let edge = if dir > 0.0 { &left.plus } else { &left.minus };
    let right = build_tree(target, edge, dir, depth - 1, eps, h0, inv_mass, rng);

    let log_weight = log_add(left.log_weight, right.log_weight);
    let take_right =
        !right.divergent && rng.random::<f64>().ln() < right.log_weight - log_weight;
    let proposal = if take_right { right.proposal.clone() } else { left.proposal.clone() };
    let (minus, plus) = if dir > 0.0 {
        (left.minus, right.plus)
    } else {
        (right.minus, left.plus)
    };
    let turning = right.turning || right.divergent || u_turn(&minus, &plus, inv_mass);
    Tree {
        minus,
        plus,
        proposal,
        log_weight,
        alpha_sum: left.alpha_sum + right.alpha_sum,
        n_alpha: left.n_alpha + right.n_alpha,
        divergent: right.divergent,
        turning,
    }
}

struct Transition {
    state: Phase,
    accept: f64,
    divergent: bool,
    max_depth_hit: bool,
}

fn transition<T: LogDensity + ?Sized>(
    target: &T,
    current: &Phase,
    eps: f64,
    max_depth: usize,
    inv_mass: &[f64],
    rng: &mut ChaCha12Rng,
) -> Transition {
    let p: Vec<f64> = inv_mass
        .iter()
        .map(|mi| {
            let z: f64 = rng.sample(StandardNormal);
            z / mi.sqrt()
        })
        .collect();
    let init = Phase {
        q: current.q.clone(),
        p,
        grad: current.grad.clone(),
        logp: current.logp,
    };
    let h0 = kinetic(&init.p, inv_mass) - init.logp;

    let mut minus = init.clone();
    let mut plus = init.clone();
    let mut proposal = init;
    let mut log_weight = 0.0_f64;
    let mut alpha_sum = 0.0;
    let mut n_alpha = 0.0;
    let mut divergent = false;
    let mut max_depth_hit = true;

    for depth in 0..max_depth {
        let dir: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sub = if dir > 0.0 {
            build_tree(target, &plus, dir, depth, eps, h0, inv_mass, rng)
        } else {
            build_tree(target, &minus, dir, depth, eps, h0, inv_mass, rng)
        };
        alpha_sum += sub.alpha_sum;
        n_alpha += sub.n_alpha;
        if sub.divergent {
            divergent = true;
            max_depth_hit = false;
            break;
        }
        if sub.turning {
            max_depth_hit = false;
            break;
        }
        // Biased progressive sampling favors the fresh half of the doubled
        // trajectory, matching the multinomial scheme.
        if rng.random::<f64>().ln() < sub.log_weight - log_weight {
            proposal = sub.proposal.clone();
        }
        log_weight = log_add(log_weight, sub.log_weight);
        if dir > 0.0 {
            plus = sub.plus;
        } else {
            minus = sub.minus;
        }
        if u_turn(&minus, &plus, inv_mass) {
            max_depth_hit = false;
            break;
        }
    }

    Transition {
        state: proposal,
        accept: if n_alpha > 0.0 { alpha_sum / n_alpha } else { 0.0 },
        divergent,
        max_depth_hit,
    }
}

/// Doubles or halves a unit step size until a single leapfrog step crosses
/// 50% acceptance from the starting point.
fn find_initial_eps<T: LogDensity + ?Sized>(
    target: &T,
    start: &Phase,
    inv_mass: &[f64],
    rng: &mut ChaCha12Rng,
) -> f64 {
    let p: Vec<f64> = inv_mass
        .iter()
        .map(|mi| {
            let z: f64 = rng.sample(StandardNormal);
            z / mi.sqrt()
        })
        .collect();
    let state = Phase {
        q: start.q.clone(),
        p,
        grad: start.grad.clone(),
        logp: start.logp,
    };
    let h0 = kinetic(&state.p, inv_mass) - state.logp;
    let log_half = 0.5_f64.ln();
    let delta_at = |eps: f64| -> f64 {
        let next = leapfrog(target, &state, 1.0, eps, inv_mass);
        h0 - (kinetic(&next.p, inv_mass) - next.logp)
    };

    let mut eps = 1.0;
    let mut delta = delta_at(eps);
    let doubling = delta > log_half;
    loop {
        eps *= if doubling { 2.0 } else { 0.5 };
        if !(1e-10..=1e7).contains(&eps) {
            break;
        }
        delta = delta_at(eps);
        let crossed = if doubling { !(delta > log_half) } else { delta > log_half };
        if crossed {
            break;
        }
    }
    eps
}

struct DualAverage {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target: f64,
}

impl DualAverage {
    fn new(eps0: f64, target: f64) -> Self {
        DualAverage {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, alpha: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.m += 1.0;
        self.h_bar += (self.target - alpha - self.h_bar) / (self.m + T0);
        self.log_eps = self.mu - self.m.sqrt() / GAMMA * self.h_bar;
        let w = self.m.powf(-KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Variance estimate shrunk toward a small constant, so early windows
    /// cannot produce a degenerate metric.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .map(|v| v.max(1e-10))
            .collect()
    }
}

/// Warmup phase boundaries: iterations before `init_end` and from
/// `term_start` on adapt only the step size; `window_ends` are the absolute
/// iterations at which the mass matrix refreshes.
fn warmup_schedule(warmup: usize) -> (usize, usize, Vec<usize>) {
    if warmup == 0 {
        return (0, 0, Vec::new());
    }
    let (init_buf, term_buf, base) = if warmup >= 150 {
        (75, 50, 25)
    } else {
        let ib = warmup * 15 / 100;
        let tb = warmup / 10;
        (ib, tb, warmup.saturating_sub(ib + tb).max(1))
    };
    let term_start = warmup - term_buf;
    let mut ends = Vec::new();
    let mut pos = init_buf;
    let mut size = base;
    while pos + size <= term_start {
        // The final window absorbs the remainder rather than leaving a
        // too-short window behind.
        let end = if pos + 3 * size > term_start { term_start } else { pos + size };
        ends.push(end);
        pos = end;
        size *= 2;
    }
    (init_buf, term_start, ends)
}

pub(crate) fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &NutsConfig,
    seed: u64,
) -> ChainOutput {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = target.dim();
    let q: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            cfg.init_jitter * z
        })
        .collect();
    let (logp, grad) = target.log_density_grad(&q);
    let mut state = Phase { q, p: vec![0.0; n], grad, logp };
    let mut inv_mass = vec![1.0; n];

    let mut eps = find_initial_eps(target, &state, &inv_mass, &mut rng);
    let mut da = DualAverage::new(eps, cfg.target_accept);
    let (init_end, term_start, window_ends) = warmup_schedule(cfg.warmup);
    let mut welford = Welford::new(n);
    let mut next_window = 0;

    for m in 0..cfg.warmup {
        let t = transition(target, &state, eps, cfg.max_treedepth, &inv_mass, &mut rng);
        state = t.state;
        da.update(t.accept);
        eps = da.log_eps.exp();
        if m >= init_end && m < term_start {
            welford.push(&state.q);
            if next_window < window_ends.len() && m + 1 == window_ends[next_window] {
                if welford.n >= 2.0 {
                    inv_mass = welford.regularized_variance();
                }
                welford = Welford::new(n);
                next_window += 1;
                // The new metric invalidates the tuned step size; restart its
                // adaptation from a fresh probe.
                eps = find_initial_eps(target, &state, &inv_mass, &mut rng);
                da = DualAverage::new(eps, cfg.target_accept);
            }
        }
    }

    let eps_final = if cfg.warmup > 0 { da.log_eps_bar.exp() } else { eps };
    let mut draws = Vec::with_capacity(cfg.samples);
    let mut divergences = 0;
    let mut max_depth_hits = 0;
    let mut accept_total = 0.0;
    for _ in 0..cfg.samples {
        let t = transition(target, &state, eps_final, cfg.max_treedepth, &inv_mass, &mut rng);
        state = t.state;
        if t.divergent {
            divergences += 1;
        }
        if t.max_depth_hit {
            max_depth_hits += 1;
        }
        accept_total += t.accept;
        draws.push(state.q.clone());
    }

    ChainOutput {
        draws,
        divergences,
        max_depth_hits,
        step_size: eps_final,
        accept_mean: if cfg.samples > 0 { accept_total / cfg.samples as f64 } else { 0.0 },
    }
}
