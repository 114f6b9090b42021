//! Optical parameters: absorption `σ(x)` and scattering `κ(x)K₀` with a
//! normalized phase function.

use crate::error::{input, Result};
use crate::grid::GridField;
use crate::kernel::KernelSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct OpticalField {
    pub sigma: GridField,
    pub kernel: KernelSpec,
}

impl OpticalField {
    pub fn new(sigma: GridField, kernel: KernelSpec) -> Result<OpticalField> {
        kernel.validate()?;
        if sigma.min() < 0.0 {
            return input("absorption must be nonnegative");
        }
        Ok(OpticalField { sigma, kernel })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.min()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.max()
    }

    /// Scattering coefficient. Because the phase function integrates to one,
    /// both kernel averages `σ̄` and `σ̄'` equal `κ`.
    pub fn kappa(&self) -> f64 {
        self.kernel.kappa
    }

    /// Accretivity constant `inf(σ - σ̄)`.
    pub fn alpha(&self) -> f64 {
        self.sigma_min() - self.kappa()
    }

    /// `sup σ̄/κ` and `sup σ̄'/κ`; one for a normalized phase function.
    pub fn ma(&self) -> f64 {
        1.0
    }

    pub fn ma_prime(&self) -> f64 {
        1.0
    }

    /// Same scattering, absorption raised by `a`.
    pub fn shifted(&self, a: f64) -> OpticalField {
        let mut s = self.clone();
        s.sigma.values.iter_mut().for_each(|v| *v += a);
        s
    }
}
