use std::path::Path;

use chexopt::data::DataError;
use chexopt::metrics::MetricsError;
use chexopt::model::ModelError;
use chexopt::optim::OptimError;
use chexopt::train::TrainError;
use chexopt::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 configuration or validation, 3 I/O, 4 numerical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Train(e) => train_code(e),
            CliError::Data(e) => data_code(e),
            CliError::Model(e) => model_code(e),
            CliError::Metrics(e) => metrics_code(e),
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } | DataError::Pgm { .. } | DataError::ImageUnavailable(_) => 3,
        _ => 2,
    }
}

fn metrics_code(e: &MetricsError) -> i32 {
    match e {
        MetricsError::DegenerateVariance { .. } | MetricsError::NonFinite => 4,
        _ => 2,
    }
}

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::NonFiniteLogits => 4,
        ModelError::Tensor(t) => tensor_code(t),
        _ => 2,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::Io { .. } | TrainError::Checkpoint { .. } => 3,
        TrainError::Data(d) => data_code(d),
        TrainError::Metrics(m) => metrics_code(m),
        TrainError::Model(m) => model_code(m),
        TrainError::Tensor(t) => tensor_code(t),
        TrainError::Optim(OptimError::Tensor(t)) => tensor_code(t),
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::io(Path::new("a"), std::io::Error::other("b")).exit_code(), 3);
        let degenerate = TrainError::Metrics(MetricsError::DegenerateVariance { context: None });
        assert_eq!(CliError::Train(degenerate).exit_code(), 4);
        let few = MetricsError::TooFewSamples { n: 1, min: 2 };
        assert_eq!(CliError::Metrics(few).exit_code(), 2);
        let missing = DataError::Io {
            path: "m.json".into(),
            source: std::io::Error::other("gone"),
        };
        assert_eq!(CliError::Train(TrainError::Data(missing)).exit_code(), 3);
        let mismatch = TrainError::FingerprintMismatch {
            expected: "a".into(),
            found: "b".into(),
        };
        assert_eq!(CliError::Train(mismatch).exit_code(), 2);
    }
}
