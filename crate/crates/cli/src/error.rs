//! Error taxonomy mapped to process exit codes: each failure class gets a
//! distinct code so scripts can tell a typo from a data problem from a
//! numerical blow-up.

use lsgc_core::datapipe::DataError;
use lsgc_core::genmode::GenError;
use lsgc_core::model::ModelError;
use lsgc_core::numerics::NumericsError;
use lsgc_core::stegsynth::SynthError;
use lsgc_core::trainer::TrainError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation, malformed config, contract violations.
    #[error("usage: {0}")]
    Usage(String),
    /// Missing or malformed inputs.
    #[error("data: {0}")]
    Data(String),
    /// Non-finite numbers or failed numerical verification.
    #[error("numeric: {0}")]
    Numeric(String),
    /// Filesystem trouble.
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match &e {
            GenError::Model(ModelError::Numerics(_)) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::NonFiniteGrad { .. } => CliError::Numeric(e.to_string()),
            TrainError::Numerics(_) => CliError::Numeric(e.to_string()),
            TrainError::Model(ModelError::Numerics(_)) => CliError::Numeric(e.to_string()),
            TrainError::EmptyData => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<lsgc_core::metrics::MetricsError> for CliError {
    fn from(e: lsgc_core::metrics::MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<lsgc_core::selfcheck::SelfCheckError> for CliError {
    fn from(e: lsgc_core::selfcheck::SelfCheckError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_to_distinct_codes() {
        let codes = [
            CliError::Usage("u".into()).exit_code(),
            CliError::Data("d".into()).exit_code(),
            CliError::Numeric("n".into()).exit_code(),
            CliError::Io("i".into()).exit_code(),
        ];
        let mut uniq = codes.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn core_errors_land_in_the_right_class() {
        assert_eq!(
            CliError::from(TrainError::EmptyData).exit_code(),
            EXIT_DATA
        );
        let blown_up = TrainError::NonFiniteLoss {
            epoch: 0,
            step: 1,
            value: f64::NAN,
        };
        assert_eq!(CliError::from(blown_up).exit_code(), EXIT_NUMERIC);
        let io = DataError::Io {
            path: "x".into(),
            msg: "gone".into(),
        };
        assert_eq!(CliError::from(io).exit_code(), EXIT_IO);
    }
}
