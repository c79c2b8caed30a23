//! Scenario data model: links with capacities, multicast groups of users with
//! routes and concave utilities, mechanism constants, and the structural
//! validation the tax machinery relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_type!(LinkId);
id_type!(UserId);
id_type!(GroupId);

/// A directed link with a strictly positive capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub id: LinkId,
    pub capacity: f64,
}

/// One receiver: it belongs to exactly one multicast group and requests a
/// single rate on every link of its route.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSpec {
    pub id: UserId,
    pub group: GroupId,
    pub route: Vec<LinkId>,
    pub utility: UtilityFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityKind {
    /// u(x) = a * ln(1 + b*x), strictly increasing everywhere.
    Log,
    /// u(x) = a*x - (b/2)*x^2 on [0, a/b], satiated at a/b.
    QuadraticCap,
}

/// Parametric concave utility with u(0) = 0. Two families are supported; both
/// are strictly increasing on the interior of their domain and differentiable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityFunction {
    pub kind: UtilityKind,
    pub a: f64,
    pub b: f64,
}

impl UtilityFunction {
    pub fn log(a: f64, b: f64) -> Self {
        Self { kind: UtilityKind::Log, a, b }
    }

    pub fn quadratic_cap(a: f64, b: f64) -> Self {
        Self { kind: UtilityKind::QuadraticCap, a, b }
    }

    /// Upper end of the domain: the satiation rate a/b for the quadratic
    /// family, unbounded for the log family.
    pub fn domain_upper(&self) -> f64 {
        match self.kind {
            UtilityKind::Log => f64::INFINITY,
            UtilityKind::QuadraticCap => self.a / self.b,
        }
    }

    /// u(x). Errors outside the domain.
    pub fn value(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.value_unchecked(x))
    }

    /// u'(x). Errors outside the domain.
    pub fn marginal(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.marginal_unchecked(x))
    }

    /// u evaluated with the argument clamped into the domain. The quadratic
    /// family extends as a constant beyond satiation, which keeps it concave
    /// and C1 because u'(a/b) = 0. The game engine uses this total form:
    /// message rates are unbounded even when utility is capped.
    pub fn value_saturating(&self, x: f64) -> f64 {
        self.value_unchecked(self.clamp(x))
    }

    /// u' with the argument clamped into the domain (0 beyond satiation).
    pub fn marginal_saturating(&self, x: f64) -> f64 {
        self.marginal_unchecked(self.clamp(x))
    }

    fn clamp(&self, x: f64) -> f64 {
        x.max(0.0).min(self.domain_upper())
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if !x.is_finite() || x < 0.0 || x > self.domain_upper() {
            return Err(Error::UtilityDomain { x, upper: self.domain_upper() });
        }
        Ok(())
    }

    fn value_unchecked(&self, x: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => self.a * (1.0 + self.b * x).ln(),
            UtilityKind::QuadraticCap => self.a * x - 0.5 * self.b * x * x,
        }
    }

    fn marginal_unchecked(&self, x: f64) -> f64 {
        match self.kind {
            UtilityKind::Log => self.a * self.b / (1.0 + self.b * x),
            UtilityKind::QuadraticCap => self.a - self.b * x,
        }
    }
}

/// u(x) for a given utility. See [`UtilityFunction::value`].
pub fn utility_value(u: &UtilityFunction, x: f64) -> Result<f64> {
    u.value(x)
}

/// u'(x) for a given utility. See [`UtilityFunction::marginal`].
pub fn utility_marginal(u: &UtilityFunction, x: f64) -> Result<f64> {
    u.marginal(x)
}

/// A full problem instance. Groups are derived from the users' group ids; the
/// constants gamma and gamma_hat scale the smooth parts of the tax and the
/// congestion level respectively and must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScenario {
    pub links: Vec<LinkSpec>,
    pub users: Vec<UserSpec>,
    pub gamma: f64,
    pub gamma_hat: f64,
}

impl NetworkScenario {
    pub const DEFAULT_GAMMA: f64 = 1.0;
    pub const DEFAULT_GAMMA_HAT: f64 = 1.0;

    pub fn new(links: Vec<LinkSpec>, users: Vec<UserSpec>) -> Self {
        Self { links, users, gamma: Self::DEFAULT_GAMMA, gamma_hat: Self::DEFAULT_GAMMA_HAT }
    }

    pub fn with_constants(mut self, gamma: f64, gamma_hat: f64) -> Self {
        self.gamma = gamma;
        self.gamma_hat = gamma_hat;
        self
    }

    /// Derived partition of users into groups, keyed by group id.
    pub fn groups(&self) -> BTreeMap<GroupId, Vec<UserId>> {
        let mut map: BTreeMap<GroupId, Vec<UserId>> = BTreeMap::new();
        for u in &self.users {
            map.entry(u.group.clone()).or_default().push(u.id.clone());
        }
        for members in map.values_mut() {
            members.sort();
        }
        map
    }

    /// Validate and freeze into the indexed form the mechanism operates on.
    /// Fails if validation reports any error; warnings are carried along.
    pub fn compile(&self) -> Result<CompiledScenario> {
        let report = validate_scenario(self);
        if !report.accepted() {
            return Err(Error::InvalidScenario(
                report.errors.len(),
                report.errors[0].message.clone(),
            ));
        }
        Ok(CompiledScenario::build(self, report))
    }
}

/// One validation finding with the offending ids spelled out.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub code: &'static str,
    pub message: String,
}

/// Outcome of structural validation. A scenario is accepted iff `errors` is
/// empty; `competition` maps each link to the number of groups crossing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
    pub competition: BTreeMap<LinkId, usize>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Check the structural assumptions the mechanism needs. Deterministic:
/// identical input yields an identical report.
///
/// A link crossed by a single group is rejected when it can be binding (the
/// sum of that group's members' satiation rates exceeds the capacity; log
/// utilities have no satiation, so any log member makes it potentially
/// binding) and merely warned about otherwise: the tax machinery is built for
/// inter-group competition and degenerates to fixed conventions without it.
pub fn validate_scenario(scenario: &NetworkScenario) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let mut err = |code: &'static str, message: String| {
        errors.push(ValidationIssue { code, message });
    };

    if !(scenario.gamma > 0.0) || !scenario.gamma.is_finite() {
        err("nonpositive-constant", format!("gamma must be > 0, got {}", scenario.gamma));
    }
    if !(scenario.gamma_hat > 0.0) || !scenario.gamma_hat.is_finite() {
        err("nonpositive-constant", format!("gamma_hat must be > 0, got {}", scenario.gamma_hat));
    }

    let mut link_ids = BTreeSet::new();
    for l in &scenario.links {
        if !link_ids.insert(l.id.clone()) {
            err("duplicate-link", format!("duplicate link id `{}`", l.id));
        }
        if !(l.capacity > 0.0) || !l.capacity.is_finite() {
            err("nonpositive-capacity", format!("link `{}` has nonpositive capacity {}", l.id, l.capacity));
        }
    }

    let mut user_ids = BTreeSet::new();
    for u in &scenario.users {
        if !user_ids.insert(u.id.clone()) {
            err("duplicate-user", format!("duplicate user id `{}`", u.id));
        }
        if u.route.is_empty() {
            err("empty-route", format!("user `{}` has an empty route", u.id));
        }
        let mut seen = BTreeSet::new();
        for l in &u.route {
            if !link_ids.contains(l) {
                err("unknown-route-link", format!("route of user `{}` references unknown link `{}`", u.id, l));
            }
            if !seen.insert(l.clone()) {
                err("duplicate-route-link", format!("route of user `{}` lists link `{}` twice", u.id, l));
            }
        }
        if !(u.utility.a > 0.0 && u.utility.b > 0.0)
            || !u.utility.a.is_finite()
            || !u.utility.b.is_finite()
        {
            err(
                "bad-utility-params",
                format!("user `{}` utility parameters must be positive, got a={} b={}", u.id, u.utility.a, u.utility.b),
            );
        }
    }

    // Per-link competition: which groups cross each link.
    let mut competition = BTreeMap::new();
    for l in &scenario.links {
        let mut groups_here: BTreeMap<&GroupId, Vec<&UserSpec>> = BTreeMap::new();
        for u in &scenario.users {
            if u.route.contains(&l.id) {
                groups_here.entry(&u.group).or_default().push(u);
            }
        }
        competition.insert(l.id.clone(), groups_here.len());

        if groups_here.len() == 1 {
            let (group, members) = groups_here.iter().next().unwrap();
            // Conservative bound on the group's demand: the sum of member
            // satiation rates (any log member makes the bound infinite).
            let cap_sum: f64 = members.iter().map(|m| m.utility.domain_upper()).sum();
            if cap_sum > l.capacity {
                err(
                    "single-group-binding",
                    format!(
                        "link `{}` is used only by group `{}` and can be binding (member rate bound {} exceeds capacity {})",
                        l.id, group, cap_sum, l.capacity
                    ),
                );
            } else {
                warnings.push(ValidationIssue {
                    code: "single-group-link",
                    message: format!(
                        "link `{}` is used only by group `{}` (provably non-binding: rate bound {} <= capacity {})",
                        l.id, group, cap_sum, l.capacity
                    ),
                });
            }
        }
    }

    ValidationReport { errors, warnings, competition }
}

/// Index-based view of a validated scenario. Users, links and groups are
/// numbered in ascending-id order; all mechanism operations run on these
/// indices and translate back to ids at the API boundary.
#[derive(Debug, Clone)]
pub struct CompiledScenario {
    pub(crate) link_ids: Vec<LinkId>,
    pub(crate) capacities: Vec<f64>,
    pub(crate) user_ids: Vec<UserId>,
    pub(crate) group_ids: Vec<GroupId>,
    pub(crate) user_group: Vec<usize>,
    pub(crate) user_route: Vec<Vec<usize>>,
    pub(crate) utilities: Vec<UtilityFunction>,
    /// For each link: groups crossing it (ascending group index), each with
    /// its members crossing the link in ascending user-index order.
    pub(crate) link_members: Vec<Vec<(usize, Vec<usize>)>>,
    pub(crate) gamma: f64,
    pub(crate) gamma_hat: f64,
    warnings: Vec<ValidationIssue>,
}

impl CompiledScenario {
    fn build(scenario: &NetworkScenario, report: ValidationReport) -> Self {
        let mut links: Vec<&LinkSpec> = scenario.links.iter().collect();
        links.sort_by(|a, b| a.id.cmp(&b.id));
        let link_ids: Vec<LinkId> = links.iter().map(|l| l.id.clone()).collect();
        let capacities: Vec<f64> = links.iter().map(|l| l.capacity).collect();

        let mut users: Vec<&UserSpec> = scenario.users.iter().collect();
        users.sort_by(|a, b| a.id.cmp(&b.id));
        let user_ids: Vec<UserId> = users.iter().map(|u| u.id.clone()).collect();

        let mut group_ids: Vec<GroupId> =
            users.iter().map(|u| u.group.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        group_ids.sort();

        let link_index: BTreeMap<&LinkId, usize> =
            link_ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let group_index: BTreeMap<&GroupId, usize> =
            group_ids.iter().enumerate().map(|(i, id)| (id, i)).collect();

        let user_group: Vec<usize> = users.iter().map(|u| group_index[&u.group]).collect();
        let user_route: Vec<Vec<usize>> = users
            .iter()
            .map(|u| {
                let mut r: Vec<usize> = u.route.iter().map(|l| link_index[l]).collect();
                r.sort_unstable();
                r
            })
            .collect();
        let utilities: Vec<UtilityFunction> = users.iter().map(|u| u.utility).collect();

        let mut link_members = vec![Vec::new(); link_ids.len()];
        for (l, members) in link_members.iter_mut().enumerate() {
            let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (u, route) in user_route.iter().enumerate() {
                if route.contains(&l) {
                    by_group.entry(user_group[u]).or_default().push(u);
                }
            }
            *members = by_group.into_iter().collect();
        }

        Self {
            link_ids,
            capacities,
            user_ids,
            group_ids,
            user_group,
            user_route,
            utilities,
            link_members,
            gamma: scenario.gamma,
            gamma_hat: scenario.gamma_hat,
            warnings: report.warnings,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_links(&self) -> usize {
        self.link_ids.len()
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.user_ids
    }

    pub fn link_ids(&self) -> &[LinkId] {
        &self.link_ids
    }

    pub fn group_ids(&self) -> &[GroupId] {
        &self.group_ids
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_hat(&self) -> f64 {
        self.gamma_hat
    }

    pub fn warnings(&self) -> &[ValidationIssue] {
        &self.warnings
    }

    pub fn capacity(&self, link: &LinkId) -> Result<f64> {
        Ok(self.capacities[self.link_idx(link)?])
    }

    pub fn utility(&self, user: &UserId) -> Result<&UtilityFunction> {
        Ok(&self.utilities[self.user_idx(user)?])
    }

    pub fn group_of(&self, user: &UserId) -> Result<&GroupId> {
        Ok(&self.group_ids[self.user_group[self.user_idx(user)?]])
    }

    pub fn route_of(&self, user: &UserId) -> Result<Vec<LinkId>> {
        let u = self.user_idx(user)?;
        Ok(self.user_route[u].iter().map(|&l| self.link_ids[l].clone()).collect())
    }

    /// Groups crossing a link, ascending by group id.
    pub fn groups_on_link(&self, link: &LinkId) -> Result<Vec<GroupId>> {
        let l = self.link_idx(link)?;
        Ok(self.link_members[l].iter().map(|(g, _)| self.group_ids[*g].clone()).collect())
    }

    pub(crate) fn user_idx(&self, user: &UserId) -> Result<usize> {
        self.user_ids
            .binary_search(user)
            .map_err(|_| Error::UnknownUser(user.to_string()))
    }

    pub(crate) fn link_idx(&self, link: &LinkId) -> Result<usize> {
        self.link_ids
            .binary_search(link)
            .map_err(|_| Error::UnknownLink(link.to_string()))
    }

    /// Upper bound of the rate search box for a user: the largest capacity on
    /// its route.
    pub(crate) fn rate_bound(&self, user: usize) -> f64 {
        self.user_route[user]
            .iter()
            .map(|&l| self.capacities[l])
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(id: &str, c: f64) -> LinkSpec {
        LinkSpec { id: LinkId::from(id), capacity: c }
    }

    fn user(id: &str, group: &str, route: &[&str], u: UtilityFunction) -> UserSpec {
        UserSpec {
            id: UserId::from(id),
            group: GroupId::from(group),
            route: route.iter().map(|l| LinkId::from(*l)).collect(),
            utility: u,
        }
    }

    #[test]
    fn utility_values_match_hand_arithmetic() {
        let log11 = UtilityFunction::log(1.0, 1.0);
        assert_eq!(log11.value(0.0).unwrap(), 0.0);
        let quad = UtilityFunction::quadratic_cap(2.0, 1.0);
        assert!((quad.value(1.0).unwrap() - 1.5).abs() < 1e-15);
        let log23 = UtilityFunction::log(2.0, 3.0);
        assert!((log23.value(1.0).unwrap() - 2.0 * 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn marginals_match_hand_arithmetic() {
        let log11 = UtilityFunction::log(1.0, 1.0);
        assert_eq!(log11.marginal(0.0).unwrap(), 1.0);
        let quad = UtilityFunction::quadratic_cap(2.0, 1.0);
        assert_eq!(quad.marginal(2.0).unwrap(), 0.0);
    }

    #[test]
    fn marginal_agrees_with_central_finite_difference() {
        // Independent derivative oracle: (u(x+h) - u(x-h)) / 2h.
        let h = 1e-6;
        for u in [
            UtilityFunction::log(1.0, 1.0),
            UtilityFunction::log(2.0, 3.0),
            UtilityFunction::quadratic_cap(2.0, 1.0),
            UtilityFunction::quadratic_cap(5.0, 0.7),
        ] {
            let x = 0.7;
            let fd = (u.value(x + h).unwrap() - u.value(x - h).unwrap()) / (2.0 * h);
            assert!(
                (u.marginal(x).unwrap() - fd).abs() < 1e-6,
                "marginal mismatch for {u:?}"
            );
        }
    }

    #[test]
    fn domain_violations_are_errors() {
        let quad = UtilityFunction::quadratic_cap(2.0, 1.0);
        assert!(quad.value(2.5).is_err());
        assert!(quad.value(-0.1).is_err());
        assert!(quad.marginal(f64::NAN).is_err());
        // The saturating forms are total.
        assert_eq!(quad.value_saturating(5.0), quad.value(2.0).unwrap());
        assert_eq!(quad.marginal_saturating(5.0), 0.0);
    }

    #[test]
    fn two_groups_sharing_a_link_validates_clean() {
        let s = NetworkScenario::new(
            vec![link("l1", 10.0)],
            vec![
                user("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
                user("b1", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let report = validate_scenario(&s);
        assert!(report.accepted(), "{:?}", report.errors);
        assert!(report.warnings.is_empty());
        assert_eq!(report.competition[&LinkId::from("l1")], 2);
    }

    #[test]
    fn zero_capacity_is_an_error() {
        let s = NetworkScenario::new(
            vec![link("l1", 0.0)],
            vec![user("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0))],
        );
        let report = validate_scenario(&s);
        assert!(report.errors.iter().any(|e| e.code == "nonpositive-capacity"));
    }

    #[test]
    fn lone_group_with_small_caps_is_a_warning_only() {
        // Members' satiation rates sum to 3 < capacity 10: non-binding.
        let s = NetworkScenario::new(
            vec![link("l1", 10.0)],
            vec![
                user("a1", "A", &["l1"], UtilityFunction::quadratic_cap(1.0, 1.0)),
                user("a2", "A", &["l1"], UtilityFunction::quadratic_cap(2.0, 1.0)),
            ],
        );
        let report = validate_scenario(&s);
        assert!(report.accepted());
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].code, "single-group-link");
    }

    #[test]
    fn lone_group_that_can_bind_is_rejected() {
        let s = NetworkScenario::new(
            vec![link("l1", 1.0)],
            vec![
                user("a1", "A", &["l1"], UtilityFunction::quadratic_cap(2.0, 1.0)),
                user("a2", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let report = validate_scenario(&s);
        assert!(report.errors.iter().any(|e| e.code == "single-group-binding"));
        assert!(s.compile().is_err());
    }

    #[test]
    fn malformed_routes_are_errors() {
        let s = NetworkScenario::new(
            vec![link("l1", 5.0)],
            vec![
                user("a1", "A", &[], UtilityFunction::log(1.0, 1.0)),
                user("b1", "B", &["nope"], UtilityFunction::log(1.0, 1.0)),
                user("b2", "B", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let report = validate_scenario(&s);
        let codes: Vec<_> = report.errors.iter().map(|e| e.code).collect();
        assert!(codes.contains(&"empty-route"));
        assert!(codes.contains(&"unknown-route-link"));
    }

    #[test]
    fn validation_is_deterministic() {
        let s = NetworkScenario::new(
            vec![link("l2", 4.0), link("l1", 0.0)],
            vec![
                user("b1", "B", &["l1", "l2"], UtilityFunction::log(1.0, 1.0)),
                user("a1", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        assert_eq!(validate_scenario(&s), validate_scenario(&s));
    }

    #[test]
    fn compile_orders_by_id_and_exposes_structure() {
        let s = NetworkScenario::new(
            vec![link("l2", 4.0), link("l1", 8.0)],
            vec![
                user("b1", "B", &["l1", "l2"], UtilityFunction::log(1.0, 1.0)),
                user("a1", "A", &["l2", "l1"], UtilityFunction::log(1.0, 1.0)),
                user("a2", "A", &["l1"], UtilityFunction::log(1.0, 1.0)),
            ],
        );
        let c = s.compile().unwrap();
        assert_eq!(c.user_ids(), &[UserId::from("a1"), UserId::from("a2"), UserId::from("b1")]);
        assert_eq!(c.link_ids(), &[LinkId::from("l1"), LinkId::from("l2")]);
        assert_eq!(
            c.groups_on_link(&LinkId::from("l1")).unwrap(),
            vec![GroupId::from("A"), GroupId::from("B")]
        );
        assert_eq!(c.groups_on_link(&LinkId::from("l2")).unwrap().len(), 2);
        assert_eq!(c.group_of(&UserId::from("b1")).unwrap(), &GroupId::from("B"));
        assert_eq!(c.route_of(&UserId::from("a1")).unwrap().len(), 2);
    }
}
