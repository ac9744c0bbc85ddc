//! Rényi-DP accountant for the subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer orders α uses the exact binomial expansion,
//! evaluated in log-space; composition is additive; conversion to (ε, δ)
//! minimizes `rdp(α) + ln(1/δ)/(α−1)` over the tracked orders.

use crate::error::{Error, Result};

/// Default Rényi order grid: integers 2..=256. Integer orders admit an exact
/// binomial formula, and 256 comfortably brackets the optimum for the
/// regimes this engine targets.
pub const DEFAULT_MAX_ORDER: u32 = 256;

/// Subsampled-Gaussian mechanism parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismParams {
    /// Poisson sampling probability (batch_size / dataset_size).
    pub q: f64,
    /// Noise multiplier: noise stddev = sigma × clip norm.
    pub sigma: f64,
}

impl MechanismParams {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) || !q.is_finite() {
            return Err(Error::Param(format!(
                "sampling probability q must lie in [0,1], got {q}"
            )));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Param(format!(
                "noise multiplier sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(MechanismParams { q, sigma })
    }
}

/// Total privacy spend converted to a single (ε, δ) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    /// The Rényi order at which the conversion minimum is attained.
    pub optimal_order: u32,
}

/// Per-order cumulative Rényi divergence for a fixed mechanism.
///
/// `cumulative_rdp[i]` is maintained as `steps × per_step_rdp[i]` recomputed
/// from the integer step counter, which keeps composition exactly linear:
/// `accumulate_step(a)` then `accumulate_step(b)` is bit-identical to
/// `accumulate_step(a + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantState {
    orders: Vec<u32>,
    per_step_rdp: Vec<f64>,
    cumulative_rdp: Vec<f64>,
    steps: u64,
    params: MechanismParams,
}

impl AccountantState {
    /// Fresh state over the default order grid 2..=256.
    pub fn new(params: MechanismParams) -> Result<Self> {
        Self::with_orders(params, (2..=DEFAULT_MAX_ORDER).collect())
    }

    /// Fresh state over a custom ascending order grid (all orders ≥ 2).
    pub fn with_orders(params: MechanismParams, orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Param("accountant needs at least one order".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) || orders[0] < 2 {
            return Err(Error::Param(
                "orders must be strictly ascending integers ≥ 2".into(),
            ));
        }
        let per_step_rdp = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(&params, a))
            .collect::<Result<Vec<f64>>>()?;
        let cumulative_rdp = vec![0.0; orders.len()];
        Ok(AccountantState {
            orders,
            per_step_rdp,
            cumulative_rdp,
            steps: 0,
            params,
        })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn cumulative_rdp(&self) -> &[f64] {
        &self.cumulative_rdp
    }

    pub fn per_step_rdp(&self) -> &[f64] {
        &self.per_step_rdp
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &MechanismParams {
        &self.params
    }

    /// Advances the ledger by `n_steps` mechanism invocations.
    pub fn accumulate_step(&self, n_steps: u64) -> Result<AccountantState> {
        if n_steps == 0 {
            return Err(Error::Param("accumulate_step needs n_steps ≥ 1".into()));
        }
        let steps = self.steps.checked_add(n_steps).ok_or_else(|| {
            Error::Computation("accountant step counter overflow".into())
        })?;
        let cumulative_rdp = self
            .per_step_rdp
            .iter()
            .map(|&r| steps as f64 * r)
            .collect::<Vec<f64>>();
        if cumulative_rdp.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(format!(
                "cumulative RDP overflowed after {steps} steps"
            )));
        }
        Ok(AccountantState {
            orders: self.orders.clone(),
            per_step_rdp: self.per_step_rdp.clone(),
            cumulative_rdp,
            steps,
            params: self.params,
        })
    }

    /// Converts the cumulative ledger to (ε, δ): the minimum over tracked
    /// orders of `rdp(α) + ln(1/δ)/(α−1)`, recording the minimizing order.
    pub fn to_epsilon_delta(&self, delta: f64) -> Result<PrivacySpend> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Param(format!(
                "delta must lie in (0,1), got {delta}"
            )));
        }
        let ln_inv_delta = -delta.ln();
        let mut best_eps = f64::INFINITY;
        let mut best_order = self.orders[0];
        for (i, &alpha) in self.orders.iter().enumerate() {
            let eps = self.cumulative_rdp[i] + ln_inv_delta / (alpha as f64 - 1.0);
            if eps < best_eps {
                best_eps = eps;
                best_order = alpha;
            }
        }
        Ok(PrivacySpend {
            epsilon: best_eps,
            delta,
            optimal_order: best_order,
        })
    }

    /// True iff the spend at `target_delta` already exceeds `target_epsilon`.
    pub fn budget_exceeded(&self, target_epsilon: f64, target_delta: f64) -> Result<bool> {
        if target_epsilon < 0.0 || target_epsilon.is_nan() {
            return Err(Error::Param(format!(
                "target epsilon must be ≥ 0, got {target_epsilon}"
            )));
        }
        Ok(self.to_epsilon_delta(target_delta)?.epsilon > target_epsilon)
    }

    /// Plain-text key-value snapshot (orders, cumulative_rdp, steps, q, sigma).
    pub fn to_snapshot_text(&self) -> String {
        let orders = self
            .orders
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let rdp = self
            .cumulative_rdp
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "q = {}\nsigma = {}\nsteps = {}\norders = {}\ncumulative_rdp = {}\n",
            self.params.q, self.params.sigma, self.steps, orders, rdp
        )
    }

    /// Rebuilds a state from [`Self::to_snapshot_text`] output. `source` names
    /// the artifact in error messages.
    pub fn from_snapshot_text(text: &str, source: &str) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt {
            path: source.to_string(),
            message,
        };
        let mut q = None;
        let mut sigma = None;
        let mut steps = None;
        let mut orders: Option<Vec<u32>> = None;
        let mut cumulative: Option<Vec<f64>> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("line `{line}` is not `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "q" => q = Some(parse_f64(value).map_err(&corrupt)?),
                "sigma" => sigma = Some(parse_f64(value).map_err(&corrupt)?),
                "steps" => {
                    steps = Some(value.parse::<u64>().map_err(|e| {
                        corrupt(format!("steps `{value}`: {e}"))
                    })?)
                }
                "orders" => {
                    orders = Some(
                        value
                            .split(',')
                            .map(|t| {
                                t.trim()
                                    .parse::<u32>()
                                    .map_err(|e| corrupt(format!("order `{t}`: {e}")))
                            })
                            .collect::<Result<Vec<u32>>>()?,
                    )
                }
                "cumulative_rdp" => {
                    cumulative = Some(
                        value
                            .split(',')
                            .map(|t| parse_f64(t.trim()).map_err(&corrupt))
                            .collect::<Result<Vec<f64>>>()?,
                    )
                }
                other => return Err(corrupt(format!("unknown key `{other}`"))),
            }
        }
        let q = q.ok_or_else(|| corrupt("missing key `q`".into()))?;
        let sigma = sigma.ok_or_else(|| corrupt("missing key `sigma`".into()))?;
        let steps = steps.ok_or_else(|| corrupt("missing key `steps`".into()))?;
        let orders = orders.ok_or_else(|| corrupt("missing key `orders`".into()))?;
        let cumulative = cumulative.ok_or_else(|| corrupt("missing key `cumulative_rdp`".into()))?;
        if cumulative.len() != orders.len() {
            return Err(corrupt(format!(
                "{} cumulative_rdp entries for {} orders",
                cumulative.len(),
                orders.len()
            )));
        }

        let params = MechanismParams::new(q, sigma)?;
        let fresh = AccountantState::with_orders(params, orders)?;
        let state = if steps == 0 {
            fresh
        } else {
            fresh.accumulate_step(steps)?
        };
        // The ledger must reproduce from (params, steps); a mismatch means the
        // snapshot was edited or written by an incompatible implementation.
        for (i, (&recomputed, &stored)) in state
            .cumulative_rdp
            .iter()
            .zip(cumulative.iter())
            .enumerate()
        {
            let tol = 1e-9 * recomputed.abs().max(1e-300);
            if (recomputed - stored).abs() > tol {
                return Err(corrupt(format!(
                    "cumulative_rdp[{i}] = {stored} does not match {recomputed} recomputed from q, sigma, steps"
                )));
            }
        }
        Ok(state)
    }
}

fn parse_f64(value: &str) -> std::result::Result<f64, String> {
    value
        .parse::<f64>()
        .map_err(|e| format!("value `{value}`: {e}"))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("value `{value}` is not finite"))
            }
        })
}

/// Per-step RDP of the subsampled Gaussian at integer order `alpha`:
///
/// `RDP(α) = ln( Σ_{k=0}^{α} C(α,k) (1−q)^{α−k} q^k e^{k(k−1)/(2σ²)} ) / (α−1)`
///
/// evaluated as a log-sum-exp over the binomial terms so large α and small σ
/// cannot overflow. `q = 0` returns 0 and `q = 1` returns `α/(2σ²)` exactly.
pub fn rdp_subsampled_gaussian(params: &MechanismParams, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Param(format!("RDP order must be ≥ 2, got {alpha}")));
    }
    let q = params.q;
    let sigma = params.sigma;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(alpha as f64 / (2.0 * sigma * sigma));
    }

    let a = alpha as f64;
    let ln_q = q.ln();
    let ln_1q = (-q).ln_1p();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    // Log-terms ln C(α,k) + (α−k)ln(1−q) + k ln q + k(k−1)/(2σ²), with the
    // log-binomial built incrementally.
    let mut log_terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_binom = 0.0;
    for k in 0..=alpha {
        if k > 0 {
            ln_binom += ((a - k as f64 + 1.0) / k as f64).ln();
        }
        let kf = k as f64;
        log_terms.push(ln_binom + (a - kf) * ln_1q + kf * ln_q + kf * (kf - 1.0) * inv_two_sigma_sq);
    }

    let lse = log_sum_exp(&log_terms);
    let rdp = (lse / (a - 1.0)).max(0.0);
    if !rdp.is_finite() {
        return Err(Error::Computation(format!(
            "RDP overflow at alpha={alpha}, q={q}, sigma={sigma}"
        )));
    }
    Ok(rdp)
}

/// Max-shifted log-sum-exp with compensated summation.
pub(crate) fn log_sum_exp(log_terms: &[f64]) -> f64 {
    let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &t in log_terms {
        let term = (t - m).exp();
        let y = term - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    m + sum.ln()
}

/// Largest step count whose spend stays within (`target_epsilon`,
/// `target_delta`); 0 if even a fresh ledger converts above the target, and
/// `u64::MAX` when the per-step RDP is identically zero (q = 0).
pub fn max_affordable_steps(
    params: &MechanismParams,
    target_epsilon: f64,
    target_delta: f64,
) -> Result<u64> {
    let fresh = AccountantState::new(*params)?;
    if fresh.budget_exceeded(target_epsilon, target_delta)? {
        return Ok(0);
    }
    if fresh.per_step_rdp.iter().all(|&r| r == 0.0) {
        return Ok(u64::MAX);
    }
    // Exponential bracket, then bisection on the monotone exceed predicate.
    let exceeded = |n: u64| -> Result<bool> {
        let state = if n == 0 {
            fresh.clone()
        } else {
            fresh.accumulate_step(n)?
        };
        state.budget_exceeded(target_epsilon, target_delta)
    };
    let mut lo = 0u64; // affordable
    let mut hi = 1u64;
    while !exceeded(hi)? {
        lo = hi;
        hi = hi.checked_mul(2).ok_or_else(|| {
            Error::Computation("max_affordable_steps bracket overflow".into())
        })?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if exceeded(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}
