//! Centralized optimum for efficiency checks: maximize total utility subject
//! to per-link capacity, where a group's bandwidth on a link is the maximum
//! rate among its members crossing it.
//!
//! The max-aggregation is handled with auxiliary group-link bandwidth
//! variables (rate <= bandwidth per member and link, bandwidths sum to at
//! most capacity per link), which keeps the program smooth. The solver is an
//! augmented-Lagrangian loop whose inner bound-constrained maximizations run
//! by projected gradient with backtracking; the capacity multipliers converge
//! to the link shadow prices. An exhaustive grid search over rate vectors
//! serves as the independent reference on tiny instances.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CompiledScenario, GroupId, LinkId, UserId};

/// Solution of the centralized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub rates: BTreeMap<UserId, f64>,
    pub group_bandwidth: BTreeMap<(GroupId, LinkId), f64>,
    /// Capacity shadow price per link, nonnegative.
    pub shadow_prices: BTreeMap<LinkId, f64>,
    pub welfare: f64,
    pub kkt_residual: f64,
    /// Per member-link multipliers of the rate <= bandwidth couplings, when
    /// the solving method produces them. They split a binding link's shadow
    /// price among the group's max requesters.
    pub member_link_prices: Option<BTreeMap<(UserId, LinkId), f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    pub kkt_tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { kkt_tolerance: 1e-9, max_outer: 120, max_inner: 6000 }
    }
}

/// Index bookkeeping for the (rates, bandwidths) variable vector.
struct Layout {
    n_users: usize,
    /// (group, link) pairs in link-major, group-ascending order.
    pairs: Vec<(usize, usize)>,
    /// pair index by (link, group).
    pair_at: BTreeMap<(usize, usize), usize>,
    /// For each user, indices of the pairs its couplings refer to.
    user_pairs: Vec<Vec<usize>>,
    /// Upper bound per user rate: min route capacity, and satiation if any.
    rate_upper: Vec<f64>,
}

impl Layout {
    fn new(s: &CompiledScenario) -> Self {
        let mut pairs = Vec::new();
        let mut pair_at = BTreeMap::new();
        for l in 0..s.num_links() {
            for (g, _) in &s.link_members[l] {
                pair_at.insert((l, *g), pairs.len());
                pairs.push((*g, l));
            }
        }
        let user_pairs = (0..s.num_users())
            .map(|u| {
                s.user_route[u]
                    .iter()
                    .map(|&l| pair_at[&(l, s.user_group[u])])
                    .collect()
            })
            .collect();
        let rate_upper = (0..s.num_users())
            .map(|u| {
                let min_cap =
                    s.user_route[u].iter().map(|&l| s.capacities[l]).fold(f64::INFINITY, f64::min);
                min_cap.min(s.utilities[u].domain_upper())
            })
            .collect();
        Self { n_users: s.num_users(), pairs, pair_at, user_pairs, rate_upper }
    }

    fn pair_upper(&self, s: &CompiledScenario, p: usize) -> f64 {
        s.capacities[self.pairs[p].1]
    }
}

/// Solve the centralized problem. Errors with the final residual when the
/// target tolerance is not reached.
pub fn solve_centralized(
    scenario: &CompiledScenario,
    config: &OracleConfig,
) -> Result<CentralizedSolution> {
    let layout = Layout::new(scenario);
    let nx = layout.n_users;
    let np = layout.pairs.len();
    let n_coupling: usize = layout.user_pairs.iter().map(|v| v.len()).sum();
    let n_links = scenario.num_links();

    // Variables: rates then bandwidths. Start from a feasible interior point.
    let mut z = vec![0.0; nx + np];
    for u in 0..nx {
        let fair = scenario.user_route[u]
            .iter()
            .map(|&l| scenario.capacities[l] / scenario.link_members[l].len().max(1) as f64)
            .fold(f64::INFINITY, f64::min);
        z[u] = (0.5 * fair).min(layout.rate_upper[u]);
    }
    for p in 0..np {
        let (g, l) = layout.pairs[p];
        let members = scenario.link_members[l].iter().find(|(gi, _)| *gi == g).unwrap();
        z[nx + p] = members.1.iter().map(|&u| z[u]).fold(0.0, f64::max);
    }

    // Multipliers: couplings (rate <= bandwidth) then capacities.
    let mut mult = vec![0.0; n_coupling + n_links];
    let mut rho = 10.0;
    let mut prev_violation = f64::INFINITY;
    let mut kkt = f64::INFINITY;

    // Constraint values g(z) <= 0, coupling-major then capacities.
    let eval_constraints = |z: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for u in 0..nx {
            for &p in &layout.user_pairs[u] {
                out.push(z[u] - z[nx + p]);
            }
        }
        for l in 0..n_links {
            let mut load = -scenario.capacities[l];
            for (g, _) in &scenario.link_members[l] {
                load += z[nx + layout.pair_at[&(l, *g)]];
            }
            out.push(load);
        }
    };

    let objective = |z: &[f64], cons: &[f64], mult: &[f64], rho: f64| -> f64 {
        let mut f = 0.0;
        for u in 0..nx {
            f -= scenario.utilities[u].value_saturating(z[u]);
        }
        for (k, &g) in cons.iter().enumerate() {
            let t = (mult[k] + rho * g).max(0.0);
            f += (t * t - mult[k] * mult[k]) / (2.0 * rho);
        }
        f
    };

    let gradient = |z: &[f64], cons: &[f64], mult: &[f64], rho: f64, grad: &mut [f64]| {
        grad.fill(0.0);
        for u in 0..nx {
            grad[u] = -scenario.utilities[u].marginal_saturating(z[u]);
        }
        let mut k = 0;
        for u in 0..nx {
            for &p in &layout.user_pairs[u] {
                let m = (mult[k] + rho * cons[k]).max(0.0);
                grad[u] += m;
                grad[nx + p] -= m;
                k += 1;
            }
        }
        for l in 0..n_links {
            let m = (mult[k] + rho * cons[k]).max(0.0);
            for (g, _) in &scenario.link_members[l] {
                grad[nx + layout.pair_at[&(l, *g)]] += m;
            }
            k += 1;
        }
    };

    let clamp = |z: &mut [f64]| {
        for u in 0..nx {
            z[u] = z[u].clamp(0.0, layout.rate_upper[u]);
        }
        for p in 0..np {
            z[nx + p] = z[nx + p].clamp(0.0, layout.pair_upper(scenario, p));
        }
    };

    let mut cons = Vec::new();
    let mut grad = vec![0.0; nx + np];
    let dim = nx + np;

    // Second derivative of the penalized objective: diagonal curvature of the
    // utilities plus rho * a a^T over the active penalty terms (each
    // constraint row a holds +-1 entries only).
    let hessian = |z: &[f64], cons: &[f64], mult: &[f64], rho: f64, h: &mut [f64]| {
        h.fill(0.0);
        for u in 0..nx {
            let curv = match scenario.utilities[u].kind {
                crate::model::UtilityKind::Log => {
                    let b = scenario.utilities[u].b;
                    let a = scenario.utilities[u].a;
                    a * b * b / (1.0 + b * z[u].max(0.0)).powi(2)
                }
                crate::model::UtilityKind::QuadraticCap => {
                    if z[u] < scenario.utilities[u].domain_upper() {
                        scenario.utilities[u].b
                    } else {
                        0.0
                    }
                }
            };
            h[u * dim + u] = curv + 1e-12;
        }
        for p in 0..np {
            h[(nx + p) * dim + nx + p] = 1e-12;
        }
        let mut k = 0;
        for u in 0..nx {
            for &p in &layout.user_pairs[u] {
                if mult[k] + rho * cons[k] > 0.0 {
                    let i = u;
                    let j = nx + p;
                    h[i * dim + i] += rho;
                    h[j * dim + j] += rho;
                    h[i * dim + j] -= rho;
                    h[j * dim + i] -= rho;
                }
                k += 1;
            }
        }
        for l in 0..n_links {
            if mult[k] + rho * cons[k] > 0.0 {
                let idx: Vec<usize> = scenario.link_members[l]
                    .iter()
                    .map(|(g, _)| nx + layout.pair_at[&(l, *g)])
                    .collect();
                for &i in &idx {
                    for &j in &idx {
                        h[i * dim + j] += rho;
                    }
                }
            }
            k += 1;
        }
    };

    let mut h = vec![0.0; dim * dim];
    for outer in 0..config.max_outer {
        let inner_tol = (config.kkt_tolerance * 0.02).max(1e-4 * 0.1_f64.powi(outer as i32));
        // Projected Newton with line search on the penalized objective, with
        // a projected-gradient fallback when the Newton direction stalls.
        for _ in 0..config.max_inner {
            eval_constraints(&z, &mut cons);
            let f0 = objective(&z, &cons, &mult, rho);
            gradient(&z, &cons, &mult, rho, &mut grad);

            // Projected-gradient stationarity measure (unit step).
            let mut stat: f64 = 0.0;
            for (i, zi) in z.iter().enumerate() {
                let upper =
                    if i < nx { layout.rate_upper[i] } else { layout.pair_upper(scenario, i - nx) };
                let moved = (zi - grad[i]).clamp(0.0, upper);
                stat = stat.max((moved - zi).abs());
            }
            if stat <= inner_tol {
                break;
            }

            hessian(&z, &cons, &mult, rho, &mut h);
            let dir = solve_dense(&h, &grad, dim);

            let mut accepted = false;
            if let Some(d) = dir {
                let mut t = 1.0;
                for _ in 0..40 {
                    let mut zt: Vec<f64> =
                        z.iter().zip(&d).map(|(zi, di)| zi - t * di).collect();
                    clamp(&mut zt);
                    let pred: f64 =
                        grad.iter().zip(zt.iter().zip(&z)).map(|(g, (a, b))| g * (a - b)).sum();
                    let mut cons_t = Vec::new();
                    eval_constraints(&zt, &mut cons_t);
                    let ft = objective(&zt, &cons_t, &mult, rho);
                    if pred < 0.0 && ft <= f0 + 1e-4 * pred {
                        z = zt;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !accepted {
                // Gradient fallback.
                let mut t = 1.0;
                for _ in 0..60 {
                    let mut zt: Vec<f64> =
                        z.iter().zip(&grad).map(|(zi, gi)| zi - t * gi).collect();
                    clamp(&mut zt);
                    let mut cons_t = Vec::new();
                    eval_constraints(&zt, &mut cons_t);
                    let ft = objective(&zt, &cons_t, &mult, rho);
                    let decrease: f64 = zt
                        .iter()
                        .zip(&z)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / (2.0 * t);
                    if ft <= f0 - 1e-4 * decrease && decrease > 0.0 {
                        z = zt;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !accepted {
                break;
            }
        }

        eval_constraints(&z, &mut cons);
        let violation = cons.iter().fold(0.0_f64, |m, &g| m.max(g.max(0.0)));
        for (k, &g) in cons.iter().enumerate() {
            mult[k] = (mult[k] + rho * g).max(0.0);
        }
        if violation > 0.25 * prev_violation && violation > config.kkt_tolerance {
            rho = (rho * 6.0).min(1e9);
        } else if outer % 3 == 2 {
            // Tighten steadily: complementary slackness shrinks like 1/rho.
            rho = (rho * 10.0).min(1e9);
        }
        prev_violation = violation;

        kkt = kkt_residual_dense(scenario, &layout, &z, &mult);
        if kkt <= config.kkt_tolerance {
            break;
        }
    }

    let solution = assemble_solution(scenario, &layout, &z, &mult, kkt);
    if kkt > config.kkt_tolerance {
        return Err(Error::NonConvergence { what: "centralized solver".into(), residual: kkt });
    }
    Ok(solution)
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            rhs.swap(col, pivot);
        }
        let inv = 1.0 / m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= f * m[col * n + j];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = rhs[col];
        for j in col + 1..n {
            s -= m[col * n + j] * x[j];
        }
        x[col] = s / m[col * n + col];
    }
    Some(x)
}

/// Max of primal violation, complementary slackness, and projected
/// stationarity for both variable blocks, given coupling and capacity
/// multipliers.
fn kkt_residual_dense(
    scenario: &CompiledScenario,
    layout: &Layout,
    z: &[f64],
    mult: &[f64],
) -> f64 {
    let nx = layout.n_users;
    let mut worst: f64 = 0.0;

    let mut k = 0;
    let mut mu_sum = vec![0.0; nx];
    let mut pair_mu = vec![0.0; layout.pairs.len()];
    for u in 0..nx {
        for &p in &layout.user_pairs[u] {
            mu_sum[u] += mult[k];
            pair_mu[p] += mult[k];
            worst = worst.max((mult[k] * (z[u] - z[nx + p])).abs());
            worst = worst.max((z[u] - z[nx + p]).max(0.0));
            k += 1;
        }
    }
    // Stationarity in rates: u'(x) - sum of coupling multipliers, projected
    // onto the box.
    for u in 0..nx {
        let s = scenario.utilities[u].marginal_saturating(z[u]) - mu_sum[u];
        let r = if z[u] <= 1e-12 {
            s.max(0.0)
        } else if z[u] >= layout.rate_upper[u] - 1e-12 {
            (-s).max(0.0)
        } else {
            s.abs()
        };
        worst = worst.max(r);
    }

    // Stationarity in bandwidths: coupling multipliers against the shadow
    // price; the y <= capacity box duplicates the capacity constraint, so no
    // residual is charged at that bound.
    for l in 0..scenario.num_links() {
        let lambda = mult[k];
        let mut load = -scenario.capacities[l];
        for (g, _) in &scenario.link_members[l] {
            let p = layout.pair_at[&(l, *g)];
            load += z[nx + p];
            let d = pair_mu[p] - lambda;
            let y = z[nx + p];
            let r = if y <= 1e-12 { (-d).max(0.0) } else { d.abs() };
            worst = worst.max(r);
        }
        worst = worst.max(load.max(0.0));
        worst = worst.max((lambda * load).abs());
        k += 1;
    }
    worst
}

fn assemble_solution(
    scenario: &CompiledScenario,
    layout: &Layout,
    z: &[f64],
    mult: &[f64],
    kkt: f64,
) -> CentralizedSolution {
    let nx = layout.n_users;
    let mut rates = BTreeMap::new();
    let mut welfare = 0.0;
    for u in 0..nx {
        rates.insert(scenario.user_ids[u].clone(), z[u]);
        welfare += scenario.utilities[u].value_saturating(z[u]);
    }
    let mut group_bandwidth = BTreeMap::new();
    for (p, &(g, l)) in layout.pairs.iter().enumerate() {
        group_bandwidth
            .insert((scenario.group_ids[g].clone(), scenario.link_ids[l].clone()), z[nx + p]);
    }
    let n_coupling: usize = layout.user_pairs.iter().map(|v| v.len()).sum();
    let mut shadow_prices = BTreeMap::new();
    for l in 0..scenario.num_links() {
        shadow_prices.insert(scenario.link_ids[l].clone(), mult[n_coupling + l]);
    }
    let mut member_link_prices = BTreeMap::new();
    let mut k = 0;
    for u in 0..nx {
        for &l in &scenario.user_route[u] {
            member_link_prices
                .insert((scenario.user_ids[u].clone(), scenario.link_ids[l].clone()), mult[k]);
            k += 1;
        }
    }
    CentralizedSolution {
        rates,
        group_bandwidth,
        shadow_prices,
        welfare,
        kkt_residual: kkt,
        member_link_prices: Some(member_link_prices),
    }
}

/// Welfare of a rate vector if feasible (group maxima within every capacity).
fn feasible_welfare(scenario: &CompiledScenario, rates: &[f64]) -> Option<f64> {
    for l in 0..scenario.num_links() {
        let mut load = 0.0;
        for (_, users) in &scenario.link_members[l] {
            load += users.iter().map(|&u| rates[u]).fold(0.0, f64::max);
        }
        if load > scenario.capacities[l] + 1e-12 {
            return None;
        }
    }
    Some(rates.iter().enumerate().map(|(u, &x)| scenario.utilities[u].value_saturating(x)).sum())
}

fn grid_search(
    scenario: &CompiledScenario,
    lower: &[f64],
    upper: &[f64],
    steps: &[f64],
) -> (Vec<f64>, f64) {
    let n = lower.len();
    let mut best = lower.to_vec();
    let mut best_welfare = f64::NEG_INFINITY;
    let mut point = lower.to_vec();
    let counts: Vec<usize> = (0..n)
        .map(|u| (((upper[u] - lower[u]) / steps[u]).floor() as usize).saturating_add(2))
        .collect();
    let mut idx = vec![0usize; n];
    loop {
        for u in 0..n {
            point[u] = (lower[u] + idx[u] as f64 * steps[u]).min(upper[u]);
        }
        if let Some(w) = feasible_welfare(scenario, &point) {
            if w > best_welfare {
                best_welfare = w;
                best.copy_from_slice(&point);
            }
        }
        let mut u = 0;
        loop {
            if u == n {
                return (best, best_welfare);
            }
            idx[u] += 1;
            if idx[u] < counts[u] {
                break;
            }
            idx[u] = 0;
            u += 1;
        }
    }
}

/// Exhaustive grid search over feasible rate vectors, then refinement around
/// the winning cell (the problem is concave, so the optimum cannot leave the
/// neighborhood of the coarse winner). Guard rails: at most 5 users and 3
/// links. Shadow prices are estimated by central finite differences of the
/// optimal welfare in each capacity.
pub fn brute_force_optimum(
    scenario: &CompiledScenario,
    grid_step: f64,
) -> Result<CentralizedSolution> {
    if scenario.num_users() > 5 || scenario.num_links() > 3 {
        return Err(Error::InstanceTooLarge {
            users: scenario.num_users(),
            links: scenario.num_links(),
        });
    }
    let (rates, welfare) = brute_force_rates(scenario, grid_step, &scenario.capacities);

    let mut shadow_prices = BTreeMap::new();
    for l in 0..scenario.num_links() {
        let delta = (10.0 * grid_step).max(0.02 * scenario.capacities[l]);
        let mut caps_hi = scenario.capacities.clone();
        caps_hi[l] += delta;
        let mut caps_lo = scenario.capacities.clone();
        caps_lo[l] = (caps_lo[l] - delta).max(1e-6);
        let (_, w_hi) = brute_force_rates(scenario, grid_step, &caps_hi);
        let (_, w_lo) = brute_force_rates(scenario, grid_step, &caps_lo);
        let lambda = ((w_hi - w_lo) / (caps_hi[l] - caps_lo[l])).max(0.0);
        shadow_prices.insert(scenario.link_ids[l].clone(), lambda);
    }

    let mut rate_map = BTreeMap::new();
    for (u, id) in scenario.user_ids.iter().enumerate() {
        rate_map.insert(id.clone(), rates[u]);
    }
    let mut group_bandwidth = BTreeMap::new();
    for l in 0..scenario.num_links() {
        for (g, users) in &scenario.link_members[l] {
            let demand = users.iter().map(|&u| rates[u]).fold(0.0, f64::max);
            group_bandwidth
                .insert((scenario.group_ids[*g].clone(), scenario.link_ids[l].clone()), demand);
        }
    }
    let mut solution = CentralizedSolution {
        rates: rate_map,
        group_bandwidth,
        shadow_prices,
        welfare,
        kkt_residual: f64::NAN,
        member_link_prices: None,
    };
    solution.kkt_residual = kkt_residuals(scenario, &solution).max;
    Ok(solution)
}

fn brute_force_rates(
    scenario: &CompiledScenario,
    grid_step: f64,
    capacities: &[f64],
) -> (Vec<f64>, f64) {
    // Substitute capacities for the finite-difference runs.
    let mut sc = scenario.clone();
    sc.capacities = capacities.to_vec();
    let n = sc.num_users();
    if n == 0 {
        return (Vec::new(), 0.0);
    }

    let upper: Vec<f64> = (0..n)
        .map(|u| {
            let min_cap =
                sc.user_route[u].iter().map(|&l| sc.capacities[l]).fold(f64::INFINITY, f64::min);
            min_cap.min(sc.utilities[u].domain_upper())
        })
        .collect();
    let lower = vec![0.0; n];

    // Coarse pass within a fixed evaluation budget, then shrink.
    let budget: f64 = 2.5e6;
    let per_dim = budget.powf(1.0 / n as f64).floor().max(8.0) as usize;
    let coarse_steps: Vec<f64> =
        upper.iter().map(|&b| (b / (per_dim - 1) as f64).max(grid_step)).collect();
    let (mut best, mut best_welfare) = grid_search(&sc, &lower, &upper, &coarse_steps);

    let mut steps = coarse_steps;
    // Refine by factor 4 per level until the requested step is reached, then
    // keep polishing within the final cell for tolerance headroom.
    let target = grid_step / 64.0;
    while steps.iter().any(|&s| s > target) {
        let prev = steps.clone();
        steps = steps.iter().map(|&s| (s / 4.0).max(target)).collect();
        let lo: Vec<f64> = (0..n).map(|u| (best[u] - 2.0 * prev[u]).max(0.0)).collect();
        let hi: Vec<f64> = (0..n).map(|u| (best[u] + 2.0 * prev[u]).min(upper[u])).collect();
        let (b, w) = grid_search(&sc, &lo, &hi, &steps);
        if w > best_welfare {
            best = b;
            best_welfare = w;
        }
    }
    (best, best_welfare)
}

/// First-order optimality report for a candidate solution.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Worst capacity violation (positive means infeasible).
    pub primal: f64,
    /// Worst negative shadow price.
    pub dual: f64,
    /// Worst |shadow price * capacity slack|.
    pub complementary_slackness: f64,
    /// Per-user stationarity residual.
    pub stationarity: BTreeMap<UserId, f64>,
    pub max: f64,
}

/// Evaluate primal feasibility, dual feasibility, complementary slackness,
/// and per-user stationarity for any candidate solution. When the solution
/// carries no member-link price split, a nonnegative split consistent with
/// the shadow prices is reconstructed by projected least squares first.
pub fn kkt_residuals(scenario: &CompiledScenario, solution: &CentralizedSolution) -> KktReport {
    let n = scenario.num_users();
    let rates: Vec<f64> = scenario
        .user_ids
        .iter()
        .map(|u| solution.rates.get(u).copied().unwrap_or(0.0))
        .collect();
    let lambda: Vec<f64> = scenario
        .link_ids
        .iter()
        .map(|l| solution.shadow_prices.get(l).copied().unwrap_or(0.0))
        .collect();

    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for l in 0..scenario.num_links() {
        let mut load = 0.0;
        for (_, users) in &scenario.link_members[l] {
            load += users.iter().map(|&u| rates[u]).fold(0.0, f64::max);
        }
        let slack = scenario.capacities[l] - load;
        primal = primal.max(-slack);
        comp = comp.max((lambda[l] * slack).abs());
    }
    let dual = lambda.iter().fold(0.0_f64, |m, &v| m.max(-v));

    let mu = match &solution.member_link_prices {
        Some(m) => member_prices_from_map(scenario, m),
        None => fit_member_prices(scenario, &rates, &lambda),
    };

    // Per-link consistency of the split: max requesters' multipliers must sum
    // to the shadow price; non-max members carry none.
    let mut split: f64 = 0.0;
    for l in 0..scenario.num_links() {
        for (_, users) in &scenario.link_members[l] {
            let demand = users.iter().map(|&u| rates[u]).fold(0.0, f64::max);
            let mut on_max = 0.0;
            for &u in users {
                let m = mu[u].iter().find(|(ll, _)| *ll == l).map(|(_, v)| *v).unwrap_or(0.0);
                if rates[u] >= demand - 1e-7 {
                    on_max += m;
                } else {
                    split = split.max(m.abs());
                }
            }
            split = split.max((on_max - lambda[l]).abs());
        }
    }

    let upper: Vec<f64> = (0..n)
        .map(|u| {
            let min_cap = scenario.user_route[u]
                .iter()
                .map(|&l| scenario.capacities[l])
                .fold(f64::INFINITY, f64::min);
            min_cap.min(scenario.utilities[u].domain_upper())
        })
        .collect();

    let mut stationarity = BTreeMap::new();
    let mut worst_stat: f64 = 0.0;
    for u in 0..n {
        let total_mu: f64 = mu[u].iter().map(|(_, v)| v).sum();
        let s = scenario.utilities[u].marginal_saturating(rates[u]) - total_mu;
        let r = if rates[u] <= 1e-9 {
            s.max(0.0)
        } else if rates[u] >= upper[u] - 1e-9 {
            (-s).max(0.0)
        } else {
            s.abs()
        };
        worst_stat = worst_stat.max(r);
        stationarity.insert(scenario.user_ids[u].clone(), r);
    }

    let max = primal.max(dual).max(comp).max(split).max(worst_stat);
    KktReport { primal, dual, complementary_slackness: comp, stationarity, max }
}

fn member_prices_from_map(
    scenario: &CompiledScenario,
    map: &BTreeMap<(UserId, LinkId), f64>,
) -> Vec<Vec<(usize, f64)>> {
    (0..scenario.num_users())
        .map(|u| {
            scenario.user_route[u]
                .iter()
                .map(|&l| {
                    let key = (scenario.user_ids[u].clone(), scenario.link_ids[l].clone());
                    (l, map.get(&key).copied().unwrap_or(0.0))
                })
                .collect()
        })
        .collect()
}

/// Reconstruct nonnegative member-link multipliers: supported on each group's
/// max requesters, summing to the link shadow price per group and link, and
/// matching each interior user's marginal utility across its route. Projected
/// gradient on the least-squares misfit of those two families.
fn fit_member_prices(
    scenario: &CompiledScenario,
    rates: &[f64],
    lambda: &[f64],
) -> Vec<Vec<(usize, f64)>> {
    let n = scenario.num_users();
    // Active pairs: (user, link) where the user attains the group max.
    let mut active: Vec<Vec<usize>> = vec![Vec::new(); n];
    for l in 0..scenario.num_links() {
        for (_, users) in &scenario.link_members[l] {
            let demand = users.iter().map(|&u| rates[u]).fold(0.0, f64::max);
            for &u in users {
                if rates[u] >= demand - 1e-7 {
                    active[u].push(l);
                }
            }
        }
    }
    let mut mu: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            active[u]
                .iter()
                .map(|&l| {
                    // Even split as the starting point.
                    let (_, users) = scenario.link_members[l]
                        .iter()
                        .find(|(g, _)| *g == scenario.user_group[u])
                        .unwrap();
                    let demand = users.iter().map(|&v| rates[v]).fold(0.0, f64::max);
                    let k = users.iter().filter(|&&v| rates[v] >= demand - 1e-7).count();
                    lambda[l] / k as f64
                })
                .collect()
        })
        .collect();

    let target: Vec<f64> =
        (0..n).map(|u| scenario.utilities[u].marginal_saturating(rates[u])).collect();

    for _ in 0..4000 {
        // Row misfits (per user): interior rates need equality, rates at zero
        // allow a shortfall, satiated users allow any covered shortfall.
        let mut row = vec![0.0; n];
        for u in 0..n {
            let s: f64 = mu[u].iter().sum();
            let d = s - target[u];
            row[u] = if rates[u] <= 1e-9 { d.max(0.0) } else { d };
            if target[u] <= 1e-12 && d < 0.0 {
                row[u] = 0.0;
            }
        }
        // Column misfits (per link and group): active multipliers sum to the
        // shadow price.
        let mut col_mis: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for l in 0..scenario.num_links() {
            for (g, users) in &scenario.link_members[l] {
                let mut s = 0.0;
                for &u in users {
                    if active[u].contains(&l) {
                        let pos = active[u].iter().position(|&ll| ll == l).unwrap();
                        s += mu[u][pos];
                    }
                }
                col_mis.insert((l, *g), s - lambda[l]);
            }
        }
        let mut worst: f64 = 0.0;
        for u in 0..n {
            for (pos, &l) in active[u].iter().enumerate() {
                let g = scenario.user_group[u];
                let grad = row[u] + col_mis[&(l, g)];
                worst = worst.max(grad.abs());
                mu[u][pos] = (mu[u][pos] - 0.2 * grad).max(0.0);
            }
        }
        if worst < 1e-12 {
            break;
        }
    }

    (0..n).map(|u| active[u].iter().copied().zip(mu[u].iter().copied()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinkSpec, NetworkScenario, UserSpec, UtilityFunction};

    fn scenario(
        links: &[(&str, f64)],
        users: &[(&str, &str, &[&str], UtilityFunction)],
    ) -> CompiledScenario {
        NetworkScenario::new(
            links.iter().map(|(id, c)| LinkSpec { id: LinkId::from(*id), capacity: *c }).collect(),
            users
                .iter()
                .map(|(id, g, route, u)| UserSpec {
                    id: UserId::from(*id),
                    group: GroupId::from(*g),
                    route: route.iter().map(|l| LinkId::from(*l)).collect(),
                    utility: *u,
                })
                .collect(),
        )
        .compile()
        .unwrap()
    }

    #[test]
    fn symmetric_pair_splits_capacity() {
        // Two single-user groups with identical log utilities on one link of
        // capacity 4: the optimum is (2, 2) with shadow price u'(2) = 1/3.
        let s = scenario(
            &[("l1", 4.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let sol = solve_centralized(&s, &OracleConfig::default()).unwrap();
        assert!((sol.rates[&UserId::from("a1")] - 2.0).abs() < 1e-6);
        assert!((sol.rates[&UserId::from("b1")] - 2.0).abs() < 1e-6);
        assert!((sol.shadow_prices[&LinkId::from("l1")] - 1.0 / 3.0).abs() < 1e-6);
        assert!((sol.welfare - 2.0 * 3.0_f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn slack_capacity_means_zero_shadow_price() {
        // Total satiation 2 + 3 = 5 < capacity 10.
        let s = scenario(
            &[("l1", 10.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::quadratic_cap(2.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::quadratic_cap(3.0, 1.0)),
            ],
        );
        let sol = solve_centralized(&s, &OracleConfig::default()).unwrap();
        assert!((sol.rates[&UserId::from("a1")] - 2.0).abs() < 1e-6);
        assert!((sol.rates[&UserId::from("b1")] - 3.0).abs() < 1e-6);
        assert!(sol.shadow_prices[&LinkId::from("l1")].abs() < 1e-7);
        assert!((sol.welfare - 6.5).abs() < 1e-8);
    }

    #[test]
    fn tied_group_shares_the_shadow_price() {
        // Group A: two identical log(2,1) members; group B: one log(1,1).
        // Hand solution: y_A = 7.8, y_B = 1.2, shadow price 5/11.
        let s = scenario(
            &[("l1", 9.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(2.0, 1.0)),
                ("a2", "A", &["l1"], UtilityFunction::log(2.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let sol = solve_centralized(&s, &OracleConfig::default()).unwrap();
        assert!((sol.rates[&UserId::from("a1")] - 7.8).abs() < 1e-5);
        assert!((sol.rates[&UserId::from("a2")] - 7.8).abs() < 1e-5);
        assert!((sol.rates[&UserId::from("b1")] - 1.2).abs() < 1e-5);
        assert!((sol.shadow_prices[&LinkId::from("l1")] - 5.0 / 11.0).abs() < 1e-5);
    }

    #[test]
    fn brute_force_matches_hand_symmetry() {
        let s = scenario(
            &[("l1", 4.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let sol = brute_force_optimum(&s, 0.01).unwrap();
        assert!((sol.rates[&UserId::from("a1")] - 2.0).abs() <= 0.01);
        assert!((sol.rates[&UserId::from("b1")] - 2.0).abs() <= 0.01);
        assert!(sol.welfare >= 0.0);
    }

    #[test]
    fn brute_force_guard_rails() {
        let users: Vec<(String, String)> =
            (0..6).map(|i| (format!("u{i}"), format!("G{i}"))).collect();
        let specs: Vec<UserSpec> = users
            .iter()
            .map(|(u, g)| UserSpec {
                id: UserId::from(u.as_str()),
                group: GroupId::from(g.as_str()),
                route: vec![LinkId::from("l1")],
                utility: UtilityFunction::log(1.0, 1.0),
            })
            .collect();
        let s =
            NetworkScenario::new(vec![LinkSpec { id: LinkId::from("l1"), capacity: 6.0 }], specs)
                .compile()
                .unwrap();
        assert!(matches!(brute_force_optimum(&s, 0.01), Err(Error::InstanceTooLarge { .. })));
    }

    #[test]
    fn solver_and_brute_force_agree() {
        let s = scenario(
            &[("l1", 9.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(2.0, 1.0)),
                ("a2", "A", &["l1"], UtilityFunction::log(2.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let fine = solve_centralized(&s, &OracleConfig::default()).unwrap();
        let rough = brute_force_optimum(&s, 0.01).unwrap();
        let rel = (fine.welfare - rough.welfare).abs() / fine.welfare.abs().max(1.0);
        assert!(rel < 1e-3, "welfare gap {rel}");
    }

    #[test]
    fn exact_solution_has_tiny_residuals() {
        let s = scenario(
            &[("l1", 4.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let mut rates = BTreeMap::new();
        rates.insert(UserId::from("a1"), 2.0);
        rates.insert(UserId::from("b1"), 2.0);
        let mut shadow = BTreeMap::new();
        shadow.insert(LinkId::from("l1"), 1.0 / 3.0);
        let mut bw = BTreeMap::new();
        bw.insert((GroupId::from("A"), LinkId::from("l1")), 2.0);
        bw.insert((GroupId::from("B"), LinkId::from("l1")), 2.0);
        let sol = CentralizedSolution {
            rates,
            group_bandwidth: bw,
            shadow_prices: shadow,
            welfare: 2.0 * 3.0_f64.ln(),
            kkt_residual: 0.0,
            member_link_prices: None,
        };
        let report = kkt_residuals(&s, &sol);
        assert!(report.max < 1e-9, "residuals {report:?}");
    }

    #[test]
    fn positive_price_on_slack_link_flags_slackness() {
        let s = scenario(
            &[("l1", 10.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::quadratic_cap(2.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::quadratic_cap(3.0, 1.0)),
            ],
        );
        let mut rates = BTreeMap::new();
        rates.insert(UserId::from("a1"), 2.0);
        rates.insert(UserId::from("b1"), 3.0);
        let mut shadow = BTreeMap::new();
        shadow.insert(LinkId::from("l1"), 0.5);
        let sol = CentralizedSolution {
            rates,
            group_bandwidth: BTreeMap::new(),
            shadow_prices: shadow,
            welfare: 6.5,
            kkt_residual: 0.0,
            member_link_prices: None,
        };
        let report = kkt_residuals(&s, &sol);
        assert!(report.complementary_slackness > 1.0);
    }

    #[test]
    fn zero_rates_with_zero_price_flag_stationarity() {
        let s = scenario(
            &[("l1", 4.0)],
            &[
                ("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                ("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let mut rates = BTreeMap::new();
        rates.insert(UserId::from("a1"), 0.0);
        rates.insert(UserId::from("b1"), 0.0);
        let mut shadow = BTreeMap::new();
        shadow.insert(LinkId::from("l1"), 0.0);
        let sol = CentralizedSolution {
            rates,
            group_bandwidth: BTreeMap::new(),
            shadow_prices: shadow,
            welfare: 0.0,
            kkt_residual: 0.0,
            member_link_prices: None,
        };
        let report = kkt_residuals(&s, &sol);
        // u'(0) = 1 with no multipliers to cover it: the rate could rise.
        assert!(report.stationarity[&UserId::from("a1")] > 0.5);
    }

    #[test]
    fn welfare_is_monotone_in_capacity() {
        let base = |cap: f64| {
            scenario(
                &[("l1", cap)],
                &[
                    ("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                    ("b1", "B", &["l1"], UtilityFunction::log(2.0, 0.5)),
                ],
            )
        };
        let mut prev = f64::NEG_INFINITY;
        for cap in [2.0, 4.0, 8.0, 16.0] {
            let sol = solve_centralized(&base(cap), &OracleConfig::default()).unwrap();
            assert!(sol.welfare >= prev - 1e-9, "welfare dropped at capacity {cap}");
            prev = sol.welfare;
        }
    }
}
