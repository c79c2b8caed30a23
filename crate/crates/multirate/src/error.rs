use thiserror::Error;

/// Errors surfaced by the engine. CLI exit codes are derived from these in
/// `cli`: parse/profile problems map to 2, non-convergence to 3, everything
/// else to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error{}: {message}", line_suffix(.line))]
    Parse { message: String, line: Option<usize> },

    #[error("scenario rejected: {0} validation error(s); first: {1}")]
    InvalidScenario(usize, String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("unknown link `{0}`")]
    UnknownLink(String),

    #[error("group `{group}` has no member crossing link `{link}`")]
    GroupNotOnLink { group: String, link: String },

    #[error("route of user `{user}` does not contain link `{link}`")]
    UserNotOnLink { user: String, link: String },

    #[error("malformed profile for user `{user}`: {reason}")]
    MalformedProfile { user: String, reason: String },

    #[error("utility argument {x} outside domain [0, {upper}]")]
    UtilityDomain { x: f64, upper: f64 },

    #[error("profile infeasible on link `{link}` (demand exceeds capacity by {overload})")]
    InfeasibleProfile { link: String, overload: f64 },

    #[error("instance too large for exhaustive search: {users} users / {links} links (limit 5 / 3)")]
    InstanceTooLarge { users: usize, links: usize },

    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: String, residual: f64 },

    #[error("solution rejected: {0}")]
    SolutionRejected(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn line_suffix(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
