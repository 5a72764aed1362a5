//! Errors carried to `main`, each mapped to an exit code.

use std::fmt;

use dpmae::accountant::AccountantError;
use dpmae::dp::DpError;
use dpmae::evaluate::EvalError;
use dpmae::mae::MaeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Runtime,
    Infeasible,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 1,
            Kind::Runtime => 2,
            Kind::Infeasible => 3,
        }
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            kind: self.kind,
            error: self.error.context(what.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_error(msg: impl Into<String>) -> Failure {
    Failure::new(Kind::Config, anyhow::anyhow!(msg.into()))
}

pub fn runtime_error(msg: impl Into<String>) -> Failure {
    Failure::new(Kind::Runtime, anyhow::anyhow!(msg.into()))
}

fn classify_accountant(e: &AccountantError) -> Kind {
    match e {
        AccountantError::InfeasibleBudget { .. } => Kind::Infeasible,
        AccountantError::InvalidArgument(_) | AccountantError::InvalidOrder(_) => Kind::Config,
        AccountantError::NonFinite { .. } => Kind::Runtime,
    }
}

fn classify(error: &anyhow::Error) -> Kind {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<AccountantError>() {
            return classify_accountant(e);
        }
        if let Some(e) = cause.downcast_ref::<DpError>() {
            return match e {
                DpError::Config(_) => Kind::Config,
                DpError::Accountant(a) => classify_accountant(a),
                DpError::Model(MaeError::Config(_)) => Kind::Config,
                _ => Kind::Runtime,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Spec(_) | EvalError::Model(MaeError::Config(_)) => Kind::Config,
                _ => Kind::Runtime,
            };
        }
        if let Some(MaeError::Config(_)) = cause.downcast_ref::<MaeError>() {
            return Kind::Config;
        }
    }
    Kind::Runtime
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Self {
            kind: classify(&error),
            error,
        }
    }
}
