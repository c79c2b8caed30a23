//! The game form: message space, per-link derived quantities, the
//! differentiable per-link tax, the outcome function, analytic tax gradients,
//! and the post-hoc transfer that nets out off-equilibrium side payments.
//!
//! Per link, each group's demand is the maximum rate requested by its members
//! crossing the link. Members attaining that maximum ("max requesters") carry
//! the group's price: their posted prices sum to the group's price total P.
//! The tax of a max requester combines a linear charge at the circular
//! successor's price, two smooth terms that vanish when P matches the rival
//! groups' average price total and the link is uncongested, and an equal
//! share of a rebate pool funded by the rival groups' price-times-demand
//! products. Users below the group maximum pay their successor's price times
//! (rival demand minus capacity plus own-group demand), which is zero exactly
//! when the link is binding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CompiledScenario, GroupId, LinkId, UserId};

/// One user's message: a single requested rate (applied on every link of the
/// route) and one nonnegative price per route link.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub rate: f64,
    pub prices: BTreeMap<LinkId, f64>,
}

impl Message {
    pub fn zero(route: &[LinkId]) -> Self {
        Self { rate: 0.0, prices: route.iter().map(|l| (l.clone(), 0.0)).collect() }
    }
}

/// A full message profile, one message per user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MessageProfile(pub BTreeMap<UserId, Message>);

impl MessageProfile {
    pub fn get(&self, user: &UserId) -> Option<&Message> {
        self.0.get(user)
    }

    pub fn insert(&mut self, user: UserId, message: Message) {
        self.0.insert(user, message);
    }

    /// All-zero messages for every user of the scenario.
    pub fn zeros(scenario: &CompiledScenario) -> Self {
        let mut map = BTreeMap::new();
        for user in scenario.user_ids() {
            let route = scenario.route_of(user).expect("compiled user");
            map.insert(user.clone(), Message::zero(&route));
        }
        Self(map)
    }
}

/// Dense, index-aligned form of a profile. Prices are stored per user in
/// route order (parallel to `CompiledScenario::user_route`).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseProfile {
    pub rates: Vec<f64>,
    pub prices: Vec<Vec<f64>>,
}

impl DenseProfile {
    pub(crate) fn from_profile(
        profile: &MessageProfile,
        scenario: &CompiledScenario,
    ) -> Result<Self> {
        let n = scenario.num_users();
        let mut rates = vec![0.0; n];
        let mut prices = Vec::with_capacity(n);
        for u in 0..n {
            let id = &scenario.user_ids[u];
            let msg = profile.get(id).ok_or_else(|| Error::MalformedProfile {
                user: id.to_string(),
                reason: "missing message".into(),
            })?;
            let bad = |reason: String| Error::MalformedProfile { user: id.to_string(), reason };
            if !msg.rate.is_finite() || msg.rate < 0.0 {
                return Err(bad(format!("rate must be finite and >= 0, got {}", msg.rate)));
            }
            let route = &scenario.user_route[u];
            if msg.prices.len() != route.len() {
                return Err(bad(format!(
                    "expected prices for exactly {} route links, got {}",
                    route.len(),
                    msg.prices.len()
                )));
            }
            let mut row = Vec::with_capacity(route.len());
            for &l in route {
                let link_id = &scenario.link_ids[l];
                let p = msg.prices.get(link_id).ok_or_else(|| Error::MalformedProfile {
                    user: id.to_string(),
                    reason: format!("missing price for route link `{link_id}`"),
                })?;
                if !p.is_finite() || *p < 0.0 {
                    return Err(bad(format!("price on `{link_id}` must be finite and >= 0, got {p}")));
                }
                row.push(*p);
            }
            rates[u] = msg.rate;
            prices.push(row);
        }
        Ok(Self { rates, prices })
    }

    pub(crate) fn to_profile(&self, scenario: &CompiledScenario) -> MessageProfile {
        let mut map = BTreeMap::new();
        for u in 0..scenario.num_users() {
            let prices = scenario.user_route[u]
                .iter()
                .zip(&self.prices[u])
                .map(|(&l, &p)| (scenario.link_ids[l].clone(), p))
                .collect();
            map.insert(scenario.user_ids[u].clone(), Message { rate: self.rates[u], prices });
        }
        MessageProfile(map)
    }

    pub(crate) fn price_of(&self, scenario: &CompiledScenario, user: usize, link: usize) -> f64 {
        let pos = scenario.user_route[user]
            .iter()
            .position(|&l| l == link)
            .expect("user crosses link");
        self.prices[user][pos]
    }
}

/// Per-group state at a link.
#[derive(Debug, Clone)]
pub(crate) struct GroupLinkState {
    pub group: usize,
    /// Bandwidth the group requests here: max over members crossing the link.
    pub demand: f64,
    /// Members attaining the max, ascending user index; parallel prices.
    pub max_users: Vec<usize>,
    pub max_prices: Vec<f64>,
    /// P: sum of the max requesters' posted prices.
    pub price_sum: f64,
    /// Average of rival groups' price sums (0 when there are no rivals).
    pub rival_price: f64,
    /// Rival groups' demand minus capacity.
    pub rival_excess: f64,
    /// Rebate pool: -(1/(q-1)) * sum of rival price_sum * demand products.
    pub rebate: f64,
}

/// All per-link derived state the tax needs, in index form.
#[derive(Debug, Clone)]
pub(crate) struct LinkState {
    pub link: usize,
    pub groups: Vec<GroupLinkState>,
    pub total_demand: f64,
    /// Scaled positive part of excess demand: max(0, (total - c) / gamma_hat).
    pub congestion: f64,
}

impl LinkState {
    pub(crate) fn compute(
        dense: &DenseProfile,
        scenario: &CompiledScenario,
        link: usize,
    ) -> Self {
        let members = &scenario.link_members[link];
        let mut groups = Vec::with_capacity(members.len());
        let mut total_demand = 0.0;
        for (g, users) in members {
            let mut demand = f64::NEG_INFINITY;
            for &u in users {
                demand = demand.max(dense.rates[u]);
            }
            let mut max_users = Vec::new();
            let mut max_prices = Vec::new();
            let mut price_sum = 0.0;
            for &u in users {
                if dense.rates[u] == demand {
                    let p = dense.price_of(scenario, u, link);
                    max_users.push(u);
                    max_prices.push(p);
                    price_sum += p;
                }
            }
            total_demand += demand;
            groups.push(GroupLinkState {
                group: *g,
                demand,
                max_users,
                max_prices,
                price_sum,
                rival_price: 0.0,
                rival_excess: 0.0,
                rebate: 0.0,
            });
        }

        let capacity = scenario.capacities[link];
        let q = groups.len();
        let sum_p: f64 = groups.iter().map(|g| g.price_sum).sum();
        let sum_px: f64 = groups.iter().map(|g| g.price_sum * g.demand).sum();
        for g in groups.iter_mut() {
            if q >= 2 {
                let denom = (q - 1) as f64;
                g.rival_price = (sum_p - g.price_sum) / denom;
                g.rebate = -(sum_px - g.price_sum * g.demand) / denom;
            }
            g.rival_excess = (total_demand - g.demand) - capacity;
        }
        let congestion = ((total_demand - capacity) / scenario.gamma_hat).max(0.0);
        Self { link, groups, total_demand, congestion }
    }

    pub(crate) fn group_state(&self, group: usize) -> Option<&GroupLinkState> {
        self.groups.iter().find(|g| g.group == group)
    }
}

impl GroupLinkState {
    /// Position of `user` among the max requesters, if any.
    fn max_position(&self, user: usize) -> Option<usize> {
        self.max_users.binary_search(&user).ok()
    }

    /// Price faced by a max requester at position `k`: the next max
    /// requester's price in circular ascending-id order, or the rival groups'
    /// average price when the user is the lone max requester.
    fn successor_price_at(&self, k: usize) -> f64 {
        let n = self.max_users.len();
        if n >= 2 {
            self.max_prices[(k + 1) % n]
        } else {
            self.rival_price
        }
    }

    /// Price charged to a user below the group maximum: the first max
    /// requester with a larger user index, wrapping to the smallest. The max
    /// requester owning that price is returned alongside.
    fn successor_for_nonmax(&self, user: usize) -> (usize, f64) {
        let pos = self.max_users.partition_point(|&u| u <= user);
        let idx = if pos < self.max_users.len() { pos } else { 0 };
        (self.max_users[idx], self.max_prices[idx])
    }
}

/// Additive pieces of one user's per-link tax. `total()` is the tax actually
/// charged; the split feeds the budget decomposition and the transfer scheme.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaxTerms {
    /// Successor-price times own rate (max requesters only).
    pub linear: f64,
    /// (P - rival_price - congestion)^2 / n.
    pub quad_sq: f64,
    /// -(2 rival_price / n)(P - rival_price)(rival_excess + own rate)/gamma.
    pub quad_cross: f64,
    /// Equal share of the group's rebate pool.
    pub rebate_share: f64,
    /// Successor price times (rival_excess + group demand) for non-max users.
    pub nonmax_payment: f64,
}

impl TaxTerms {
    pub fn total(&self) -> f64 {
        self.linear + self.quad_sq + self.quad_cross + self.rebate_share + self.nonmax_payment
    }
}

pub(crate) fn tax_terms_dense(
    state: &LinkState,
    scenario: &CompiledScenario,
    user: usize,
) -> TaxTerms {
    let group = scenario.user_group[user];
    let g = state.group_state(group).expect("user's group crosses link");
    let mut terms = TaxTerms::default();
    if let Some(k) = g.max_position(user) {
        let n = g.max_users.len() as f64;
        let x = g.demand;
        let gap = g.price_sum - g.rival_price;
        terms.linear = g.successor_price_at(k) * x;
        terms.quad_sq = (gap - state.congestion).powi(2) / n;
        terms.quad_cross =
            -(2.0 * g.rival_price / n) * gap * (g.rival_excess + x) / scenario.gamma;
        terms.rebate_share = g.rebate / n;
    } else {
        let (_, succ) = g.successor_for_nonmax(user);
        terms.nonmax_payment = succ * (g.rival_excess + g.demand);
    }
    terms
}

/// Analytic partial derivatives of one user's per-link tax with respect to
/// its own posted price and own rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaxGradient {
    pub d_price: f64,
    pub d_rate: f64,
}

pub(crate) fn tax_gradient_dense(
    state: &LinkState,
    scenario: &CompiledScenario,
    user: usize,
) -> TaxGradient {
    let group = scenario.user_group[user];
    let g = state.group_state(group).expect("user's group crosses link");
    let Some(k) = g.max_position(user) else {
        // Below the group maximum neither the own price nor the own rate
        // enters the own tax (one-sided: raising the rate up to the maximum
        // leaves the group demand unchanged).
        return TaxGradient { d_price: 0.0, d_rate: 0.0 };
    };
    let n = g.max_users.len() as f64;
    let gap = g.price_sum - g.rival_price;
    let d_price = (2.0 / n) * (gap - state.congestion)
        - (2.0 * g.rival_price / n) * (g.rival_excess + g.demand) / scenario.gamma;
    // Kink convention at the capacity boundary: the congestion derivative
    // takes the value 1/gamma_hat on {total demand >= capacity}.
    let capacity = scenario.capacities[state.link];
    let d_congestion =
        if state.total_demand - capacity >= 0.0 { 1.0 / scenario.gamma_hat } else { 0.0 };
    let d_rate = g.successor_price_at(k)
        - (2.0 * g.rival_price / n) * gap / scenario.gamma
        - (2.0 / n) * (gap - state.congestion) * d_congestion;
    TaxGradient { d_price, d_rate }
}

/// All per-link derived quantities in id form, mirroring the internal state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkView {
    pub link: LinkId,
    /// Groups crossing the link, ascending by id.
    pub groups: Vec<GroupId>,
    pub group_demand: BTreeMap<GroupId, f64>,
    /// Members attaining the group max, ascending by user id.
    pub max_requesters: BTreeMap<GroupId, Vec<UserId>>,
    pub price_sum: BTreeMap<GroupId, f64>,
    pub rival_price: BTreeMap<GroupId, f64>,
    pub rival_excess: BTreeMap<GroupId, f64>,
    pub rebate: BTreeMap<GroupId, f64>,
    pub congestion: f64,
}

fn densify(profile: &MessageProfile, scenario: &CompiledScenario) -> Result<DenseProfile> {
    DenseProfile::from_profile(profile, scenario)
}

/// Bandwidth a group requests on a link: the max rate over its members
/// crossing it. Errors when no member of the group crosses the link.
pub fn group_link_demand(
    profile: &MessageProfile,
    scenario: &CompiledScenario,
    group: &GroupId,
    link: &LinkId,
) -> Result<f64> {
    let dense = densify(profile, scenario)?;
    let l = scenario.link_idx(link)?;
    let g = scenario
        .group_ids
        .binary_search(group)
        .map_err(|_| Error::GroupNotOnLink { group: group.to_string(), link: link.to_string() })?;
    let state = LinkState::compute(&dense, scenario, l);
    state
        .group_state(g)
        .map(|s| s.demand)
        .ok_or_else(|| Error::GroupNotOnLink { group: group.to_string(), link: link.to_string() })
}

/// Compute every derived quantity for one link.
pub fn compute_link_view(
    profile: &MessageProfile,
    scenario: &CompiledScenario,
    link: &LinkId,
) -> Result<LinkView> {
    let dense = densify(profile, scenario)?;
    let l = scenario.link_idx(link)?;
    Ok(link_view_from_state(&LinkState::compute(&dense, scenario, l), scenario))
}

pub(crate) fn link_view_from_state(state: &LinkState, scenario: &CompiledScenario) -> LinkView {
    let mut view = LinkView {
        link: scenario.link_ids[state.link].clone(),
        groups: Vec::new(),
        group_demand: BTreeMap::new(),
        max_requesters: BTreeMap::new(),
        price_sum: BTreeMap::new(),
        rival_price: BTreeMap::new(),
        rival_excess: BTreeMap::new(),
        rebate: BTreeMap::new(),
        congestion: state.congestion,
    };
    for g in &state.groups {
        let gid = scenario.group_ids[g.group].clone();
        view.groups.push(gid.clone());
        view.group_demand.insert(gid.clone(), g.demand);
        view.max_requesters.insert(
            gid.clone(),
            g.max_users.iter().map(|&u| scenario.user_ids[u].clone()).collect(),
        );
        view.price_sum.insert(gid.clone(), g.price_sum);
        view.rival_price.insert(gid.clone(), g.rival_price);
        view.rival_excess.insert(gid.clone(), g.rival_excess);
        view.rebate.insert(gid, g.rebate);
    }
    view
}

fn user_on_link(scenario: &CompiledScenario, user: usize, link: usize) -> Result<()> {
    if scenario.user_route[user].contains(&link) {
        Ok(())
    } else {
        Err(Error::UserNotOnLink {
            user: scenario.user_ids[user].to_string(),
            link: scenario.link_ids[link].to_string(),
        })
    }
}

/// Tax charged to one user on one link.
pub fn link_tax(
    profile: &MessageProfile,
    scenario: &CompiledScenario,
    link: &LinkId,
    user: &UserId,
) -> Result<f64> {
    Ok(link_tax_terms(profile, scenario, link, user)?.total())
}

/// Tax charged to one user on one link, split into its additive pieces.
pub fn link_tax_terms(
    profile: &MessageProfile,
    scenario: &CompiledScenario,
    link: &LinkId,
    user: &UserId,
) -> Result<TaxTerms> {
    let dense = densify(profile, scenario)?;
    let l = scenario.link_idx(link)?;
    let u = scenario.user_idx(user)?;
    user_on_link(scenario, u, l)?;
    let state = LinkState::compute(&dense, scenario, l);
    Ok(tax_terms_dense(&state, scenario, u))
}

/// Analytic tax gradient for one user on one link.
pub fn tax_gradient(
    profile: &MessageProfile,
    scenario: &CompiledScenario,
    user: &UserId,
    link: &LinkId,
) -> Result<TaxGradient> {
    let dense = densify(profile, scenario)?;
    let l = scenario.link_idx(link)?;
    let u = scenario.user_idx(user)?;
    user_on_link(scenario, u, l)?;
    let state = LinkState::compute(&dense, scenario, l);
    Ok(tax_gradient_dense(&state, scenario, u))
}

/// The outcome of a message profile: allocations are the requested rates
/// (pass-through) and taxes are summed per user over route links.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub allocation: BTreeMap<UserId, f64>,
    pub tax_by_link: BTreeMap<(UserId, LinkId), f64>,
    pub tax_total: BTreeMap<UserId, f64>,
    /// Sum of all users' total taxes.
    pub budget_residual: f64,
}

/// Evaluate the outcome function. Total on the message space: congestion
/// penalties apply when demand exceeds capacity, but the outcome is always
/// defined.
pub fn outcome(profile: &MessageProfile, scenario: &CompiledScenario) -> Result<Outcome> {
    let dense = densify(profile, scenario)?;
    Ok(outcome_dense(&dense, scenario))
}

pub(crate) fn outcome_dense(dense: &DenseProfile, scenario: &CompiledScenario) -> Outcome {
    let mut allocation = BTreeMap::new();
    let mut tax_by_link = BTreeMap::new();
    let mut tax_total: BTreeMap<UserId, f64> =
        scenario.user_ids.iter().map(|u| (u.clone(), 0.0)).collect();
    for (u, id) in scenario.user_ids.iter().enumerate() {
        allocation.insert(id.clone(), dense.rates[u]);
    }
    for l in 0..scenario.num_links() {
        let state = LinkState::compute(dense, scenario, l);
        for (_, users) in &scenario.link_members[l] {
            for &u in users {
                let t = tax_terms_dense(&state, scenario, u).total();
                let uid = scenario.user_ids[u].clone();
                tax_by_link.insert((uid.clone(), scenario.link_ids[l].clone()), t);
                *tax_total.get_mut(&uid).unwrap() += t;
            }
        }
    }
    let budget_residual = tax_total.values().sum();
    Outcome { allocation, tax_by_link, tax_total, budget_residual }
}

/// One applied redistribution from the transfer scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub link: LinkId,
    pub payer: UserId,
    /// The non-max payment being neutralized.
    pub payment: f64,
    /// Recipient of the -(successor price) * rival_excess piece (same group).
    pub excess_recipient: Option<(UserId, f64)>,
    /// Recipient of the -(successor price) * group demand piece (other group,
    /// chosen round-robin). Absent when the link has no rival group.
    pub demand_recipient: Option<(UserId, f64)>,
}

/// Transfers applied on top of an outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedOutcome {
    pub outcome: Outcome,
    pub transfers: Vec<TransferRecord>,
}

/// Neutralize every non-max side payment at a feasible profile: the payment
/// `succ * (rival_excess + demand)` is offset by crediting `-succ *
/// rival_excess` to a same-group max requester other than the price owner and
/// `-succ * demand` to a max requester of another group chosen round-robin.
/// Neither credit depends on its recipient's own message, so equilibrium
/// incentives are unchanged. Payments that are already zero (binding links)
/// are left alone. Refuses infeasible profiles.
pub fn strict_budget_transfer(
    outcome: &Outcome,
    profile: &MessageProfile,
    scenario: &CompiledScenario,
) -> Result<BalancedOutcome> {
    let dense = densify(profile, scenario)?;
    for l in 0..scenario.num_links() {
        let state = LinkState::compute(&dense, scenario, l);
        let overload = state.total_demand - scenario.capacities[l];
        if overload > 0.0 {
            return Err(Error::InfeasibleProfile {
                link: scenario.link_ids[l].to_string(),
                overload,
            });
        }
    }

    let mut result = outcome.clone();
    let mut transfers = Vec::new();
    for l in 0..scenario.num_links() {
        let state = LinkState::compute(&dense, scenario, l);
        // Round-robin cursor over the link's groups, advanced per payment.
        let mut cursor = 0usize;
        for g in &state.groups {
            let members = scenario.link_members[l]
                .iter()
                .find(|(gi, _)| *gi == g.group)
                .map(|(_, m)| m.as_slice())
                .unwrap_or(&[]);
            for &payer in members {
                if g.max_position(payer).is_some() {
                    continue;
                }
                let (owner, succ) = g.successor_for_nonmax(payer);
                let payment = succ * (g.rival_excess + g.demand);
                if payment == 0.0 {
                    continue;
                }
                // Same-group recipient for the rival-excess piece: smallest-id
                // max requester other than the price owner; when the owner is
                // the lone max requester, fall back to the smallest-id member
                // other than the owner (the credit depends on no group
                // member's own message, so any of them is incentive-safe).
                let excess_recipient = g
                    .max_users
                    .iter()
                    .copied()
                    .find(|&u| u != owner)
                    .or_else(|| members.iter().copied().find(|&u| u != owner));
                // Cross-group recipient for the demand piece: next rival group
                // in round-robin order, smallest-id max requester within it.
                let rivals: Vec<&GroupLinkState> =
                    state.groups.iter().filter(|r| r.group != g.group).collect();
                let demand_recipient = if rivals.is_empty() {
                    None
                } else {
                    let r = rivals[cursor % rivals.len()];
                    cursor += 1;
                    Some(r.max_users[0])
                };

                let mut record = TransferRecord {
                    link: scenario.link_ids[l].clone(),
                    payer: scenario.user_ids[payer].clone(),
                    payment,
                    excess_recipient: None,
                    demand_recipient: None,
                };
                if let Some(s) = excess_recipient {
                    let amount = -succ * g.rival_excess;
                    apply_credit(&mut result, scenario, s, l, amount);
                    record.excess_recipient = Some((scenario.user_ids[s].clone(), amount));
                }
                if let Some(r) = demand_recipient {
                    let amount = -succ * g.demand;
                    apply_credit(&mut result, scenario, r, l, amount);
                    record.demand_recipient = Some((scenario.user_ids[r].clone(), amount));
                }
                transfers.push(record);
            }
        }
    }
    result.budget_residual = result.tax_total.values().sum();
    Ok(BalancedOutcome { outcome: result, transfers })
}

fn apply_credit(
    outcome: &mut Outcome,
    scenario: &CompiledScenario,
    user: usize,
    link: usize,
    amount: f64,
) {
    let uid = scenario.user_ids[user].clone();
    let lid = scenario.link_ids[link].clone();
    *outcome.tax_by_link.entry((uid.clone(), lid)).or_insert(0.0) += amount;
    *outcome.tax_total.get_mut(&uid).unwrap() += amount;
}
