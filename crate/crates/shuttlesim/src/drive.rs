//! Drive waveform: a fundamental sine plus an optional list of harmonics.

/// One harmonic overtone of the fundamental.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonic {
    /// Multiple of the fundamental frequency (>= 1).
    pub order: u32,
    /// Amplitude in volts.
    pub amplitude: f64,
    /// Phase offset in radians.
    pub phase: f64,
}

/// Periodic drain-electrode voltage
/// `V(t) = V0 sin(w t) + sum_k a_k sin(k w t + phi_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveWaveform {
    pub v0: f64,
    pub omega: f64,
    pub harmonics: Vec<Harmonic>,
}

impl DriveWaveform {
    pub fn sine(v0: f64, omega: f64) -> Self {
        DriveWaveform {
            v0,
            omega,
            harmonics: Vec::new(),
        }
    }

    pub fn with_harmonic(mut self, order: u32, amplitude: f64, phase: f64) -> Self {
        assert!(order >= 1, "harmonic order must be >= 1");
        self.harmonics.push(Harmonic {
            order,
            amplitude,
            phase,
        });
        self
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    pub fn voltage(&self, t: f64) -> f64 {
        let wt = self.omega * t;
        let mut v = self.v0 * wt.sin();
        for h in &self.harmonics {
            v += h.amplitude * (h.order as f64 * wt + h.phase).sin();
        }
        v
    }

    pub fn dv_dt(&self, t: f64) -> f64 {
        let wt = self.omega * t;
        let mut d = self.v0 * self.omega * wt.cos();
        for h in &self.harmonics {
            let k = h.order as f64;
            d += h.amplitude * k * self.omega * (k * wt + h.phase).cos();
        }
        d
    }

    /// True when every term has odd order, which makes V(t) = -V(t + pi/w).
    pub fn is_half_wave_odd(&self) -> bool {
        self.harmonics.iter().all(|h| h.order % 2 == 1)
    }

    /// True for a bare fundamental with no overtones.
    pub fn is_pure_sine(&self) -> bool {
        self.harmonics.iter().all(|h| h.amplitude == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_waveform_flips_after_half_period() {
        let d = DriveWaveform::sine(0.05, 2.0e8).with_harmonic(3, 0.01, 0.4);
        assert!(d.is_half_wave_odd());
        let half = 0.5 * d.period();
        for i in 0..40 {
            let t = i as f64 * d.period() / 40.0;
            let sum = d.voltage(t) + d.voltage(t + half);
            assert!(sum.abs() < 1e-16 + 1e-12 * d.v0, "residual {sum}");
        }
    }

    #[test]
    fn even_harmonic_breaks_half_wave_symmetry() {
        let d = DriveWaveform::sine(0.05, 2.0e8).with_harmonic(2, 0.015, 0.0);
        assert!(!d.is_half_wave_odd());
        let half = 0.5 * d.period();
        let t = 0.1 * d.period();
        assert!((d.voltage(t) + d.voltage(t + half)).abs() > 1e-3 * d.v0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let d = DriveWaveform::sine(0.08, 5.0e7).with_harmonic(2, 0.02, 0.3);
        let h = d.period() * 1e-7;
        for i in 0..17 {
            let t = i as f64 * d.period() / 17.0;
            let fd = (d.voltage(t + h) - d.voltage(t - h)) / (2.0 * h);
            assert!((fd - d.dv_dt(t)).abs() < 1e-5 * d.v0 * d.omega);
        }
    }
}
