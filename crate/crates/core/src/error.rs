use thiserror::Error;

use crate::adapter::AdapterError;
use crate::bertram::BertramError;
use crate::corpus::CorpusError;
use crate::harness::HarnessError;
use crate::ipet::IpetError;
use crate::pet::PetError;
use crate::pvp::PvpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error. Every variant carries the module it originated from so
/// command-line front ends can print a module-tagged line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pvp(#[from] PvpError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Pet(#[from] PetError),
    #[error(transparent)]
    Ipet(#[from] IpetError),
    #[error(transparent)]
    Bertram(#[from] BertramError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Corpus(_) => "corpus",
            Error::Pvp(_) => "pvp",
            Error::Adapter(_) => "mlm-adapter",
            Error::Pet(_) => "pet",
            Error::Ipet(_) => "ipet",
            Error::Bertram(_) => "bertram",
            Error::Harness(_) => "harness",
        }
    }
}
