use aortaseg_core::gradcheck::{run_checks, CheckReport, LayerCheck};
use serde::Serialize;

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                format!("{verdict} {:<24} max rel error {:.3e} (tol {:.0e}, {} probes)", c.name, c.max_rel_error, c.tolerance, c.checked)
            })
            .collect()
    }

    /// Check failure naming every failing layer.
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(PipelineError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn cmd_gradcheck(checks: &[LayerCheck], seed: u64) -> GradcheckReport {
    let checks = run_checks(checks, seed);
    let passed = checks.iter().all(|c| c.passed);
    GradcheckReport { seed, checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aortaseg_core::gradcheck::{check_conv2d_with, standard_checks};
    use aortaseg_core::tensor::conv2d_backward;

    #[test]
    fn perturbed_backward_is_reported_by_name() {
        fn broken(
            x: &aortaseg_core::Tensor64,
            p: &aortaseg_core::ConvParams<f64>,
            g: &aortaseg_core::Tensor64,
        ) -> aortaseg_core::Result<aortaseg_core::LayerGrad<f64>> {
            let mut lg = conv2d_backward(x, p, g)?;
            lg.weights_grad.data_mut()[0] *= 1.01;
            Ok(lg)
        }
        let mut checks = standard_checks();
        checks[0] = LayerCheck::new("conv2d", |s| check_conv2d_with(s, broken));
        let report = cmd_gradcheck(&checks[..2], 0);
        assert!(!report.passed);
        assert!(report.lines()[0].starts_with("FAIL conv2d"));
        let err = report.into_result().unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("conv2d"));
    }
}
