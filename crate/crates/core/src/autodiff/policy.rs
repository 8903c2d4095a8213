use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scaler::LossScaler;
use super::AutodiffError;
use crate::tensor::Precision;

/// Apex-style optimisation level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    /// Full FP32 baseline.
    O0,
    /// Per-op whitelist: GEMMs in FP16, everything else in FP32.
    O1,
    /// FP16 weights and activations with FP32 master weights.
    O2,
    /// FP16 everywhere, no loss scaling.
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
        })
    }
}

impl FromStr for OptLevel {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<OptLevel, AutodiffError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "O0" => Ok(OptLevel::O0),
            "O1" => Ok(OptLevel::O1),
            "O2" => Ok(OptLevel::O2),
            "O3" => Ok(OptLevel::O3),
            _ => Err(AutodiffError::UnknownOptLevel(s.to_string())),
        }
    }
}

/// Operation families subject to precision dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Sigmoid,
    SoftmaxXent,
    Bce,
    Normalize,
    Sum,
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<OpKind, AutodiffError> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "softmax_xent" => OpKind::SoftmaxXent,
            "bce" => OpKind::Bce,
            "normalize" => OpKind::Normalize,
            "sum" => OpKind::Sum,
            other => return Err(AutodiffError::UnknownOpKind(other.to_string())),
        })
    }
}

/// Precision an operation runs at under `level`.
///
/// O1 whitelists only GEMMs. O2 runs the tape in FP16 except for the loss
/// reductions, which stay FP32 as under O1.
pub fn dispatch_precision(op: OpKind, level: OptLevel) -> Precision {
    match level {
        OptLevel::O0 => Precision::Fp32,
        OptLevel::O3 => Precision::Fp16,
        OptLevel::O1 => match op {
            OpKind::MatMul => Precision::Fp16,
            _ => Precision::Fp32,
        },
        OptLevel::O2 => match op {
            OpKind::SoftmaxXent | OpKind::Bce | OpKind::Sum => Precision::Fp32,
            _ => Precision::Fp16,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionPolicy {
    pub level: OptLevel,
    pub scaler: Option<LossScaler>,
    pub master_weights: bool,
    /// Accumulator precision of FP16 GEMMs and reductions.
    pub accumulate: Precision,
}

impl PrecisionPolicy {
    pub fn new(level: OptLevel) -> PrecisionPolicy {
        let scaler = match level {
            OptLevel::O1 | OptLevel::O2 => Some(LossScaler::default()),
            OptLevel::O0 | OptLevel::O3 => None,
        };
        PrecisionPolicy {
            level,
            scaler,
            master_weights: level == OptLevel::O2,
            accumulate: Precision::Fp32,
        }
    }

    pub fn with_accumulate(mut self, accumulate: Precision) -> PrecisionPolicy {
        self.accumulate = accumulate;
        self
    }

    pub fn dispatch(&self, op: OpKind) -> Precision {
        dispatch_precision(op, self.level)
    }

    /// Precision of the working weights seen by the tape.
    pub fn weight_precision(&self) -> Precision {
        match self.level {
            OptLevel::O0 | OptLevel::O1 => Precision::Fp32,
            OptLevel::O2 | OptLevel::O3 => Precision::Fp16,
        }
    }

    /// Precision of optimizer moment buffers; they live alongside the tensor
    /// the optimizer updates (the master copy under O2).
    pub fn moment_precision(&self) -> Precision {
        match self.level {
            OptLevel::O3 => Precision::Fp16,
            _ => Precision::Fp32,
        }
    }

    /// Precision dataset tensors are stored at for the whole run. Under O3 the
    /// inputs are converted once and the FP32 originals released.
    pub fn input_precision(&self) -> Precision {
        match self.level {
            OptLevel::O3 => Precision::Fp16,
            _ => Precision::Fp32,
        }
    }

    pub fn loss_scale(&self) -> f32 {
        self.scaler.as_ref().map_or(1.0, |s| s.scale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_table() {
        assert_eq!(dispatch_precision(OpKind::MatMul, OptLevel::O1), Precision::Fp16);
        assert_eq!(dispatch_precision(OpKind::SoftmaxXent, OptLevel::O1), Precision::Fp32);
        assert_eq!(dispatch_precision(OpKind::MatMul, OptLevel::O0), Precision::Fp32);
        for op in [OpKind::Add, OpKind::Relu, OpKind::Sigmoid, OpKind::Bce, OpKind::Normalize] {
            assert_eq!(dispatch_precision(op, OptLevel::O1), Precision::Fp32);
            assert_eq!(dispatch_precision(op, OptLevel::O3), Precision::Fp16);
            assert_eq!(dispatch_precision(op, OptLevel::O0), Precision::Fp32);
        }
        assert_eq!(dispatch_precision(OpKind::Relu, OptLevel::O2), Precision::Fp16);
        assert_eq!(dispatch_precision(OpKind::Bce, OptLevel::O2), Precision::Fp32);
    }

    #[test]
    fn unknown_names() {
        assert!(matches!("conv".parse::<OpKind>(), Err(AutodiffError::UnknownOpKind(_))));
        assert_eq!("o2".parse::<OptLevel>().unwrap(), OptLevel::O2);
        assert!("O4".parse::<OptLevel>().is_err());
    }

    #[test]
    fn policy_invariants() {
        let o0 = PrecisionPolicy::new(OptLevel::O0);
        assert!(o0.scaler.is_none() && !o0.master_weights);
        assert_eq!(o0.weight_precision(), Precision::Fp32);
        let o1 = PrecisionPolicy::new(OptLevel::O1);
        assert!(o1.scaler.is_some() && !o1.master_weights);
        let o2 = PrecisionPolicy::new(OptLevel::O2);
        assert!(o2.scaler.is_some() && o2.master_weights);
        assert_eq!(o2.weight_precision(), Precision::Fp16);
        let o3 = PrecisionPolicy::new(OptLevel::O3);
        assert!(o3.scaler.is_none() && !o3.master_weights);
        assert_eq!(o3.input_precision(), Precision::Fp16);
        assert_eq!(o1.loss_scale(), 65536.0);
        assert_eq!(o3.loss_scale(), 1.0);
    }
}
