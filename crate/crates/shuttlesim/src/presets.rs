//! Canonical device constructions used by the test suite, the CLI examples,
//! and the browser demo.
//!
//! The geometry is never solved here; the capacitances of a source-shuttle-
//! shuttle-drain chain are taken as given, and the spatial derivatives follow
//! a parallel-plate gap model `dC/dgap = -C/gap`.

use crate::device::{CapacitanceBlocks, CapacitanceInput, ShuttleParams};
use crate::linalg::Mat;

/// Capacitances of the source-S1-S2-drain chain.
#[derive(Debug, Clone)]
pub struct SeriesChain {
    /// Junction capacitances source-S1, S1-S2, S2-drain (F).
    pub c_j: [f64; 3],
    /// Shuttle-to-substrate capacitance per shuttle (F).
    pub shuttle_ground: f64,
    /// Drain-to-ground capacitance (F).
    pub drain_ground: f64,
    /// Junction gap used for the plate-model derivatives (m).
    pub gap: f64,
    /// Optional gate: (coupling to S1, coupling to S2, gate self-cap, gate-drain).
    pub gate: Option<[f64; 4]>,
}

impl SeriesChain {
    pub fn build(&self) -> CapacitanceInput {
        let g = usize::from(self.gate.is_some());
        let [c1, c2, c3] = self.c_j;
        let mut b = CapacitanceBlocks::zeros(g);
        let (cg1, cg2, cgs, cgd) = match self.gate {
            Some([a, bb, c, d]) => (a, bb, c, d),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        b.c_ss = Mat::from_rows(&[
            vec![c1 + c2 + self.shuttle_ground + cg1, -c2],
            vec![-c2, c2 + c3 + self.shuttle_ground + cg2],
        ]);
        b.c_s = vec![0.0, -c3];
        b.c00 = c3 + self.drain_ground + cgd;
        if g == 1 {
            b.c_gs = Mat::from_rows(&[vec![-cg1, -cg2]]);
            b.c_gg = Mat::from_rows(&[vec![cg1 + cg2 + cgs + cgd]]);
            b.c_g = vec![-cgd];
        }

        // Plate model: gap(1) grows with x1, gap(2) = d + x2 - x1,
        // gap(3) shrinks with x2. Gate and ground capacitances are taken as
        // position independent.
        let dc1_dx1 = -c1 / self.gap;
        let dc2_dx1 = c2 / self.gap;
        let dc2_dx2 = -c2 / self.gap;
        let dc3_dx2 = c3 / self.gap;

        let mut d1 = CapacitanceBlocks::zeros(g);
        d1.c_ss = Mat::from_rows(&[
            vec![dc1_dx1 + dc2_dx1, -dc2_dx1],
            vec![-dc2_dx1, dc2_dx1],
        ]);
        let mut d2 = CapacitanceBlocks::zeros(g);
        d2.c_ss = Mat::from_rows(&[vec![dc2_dx2, -dc2_dx2], vec![-dc2_dx2, dc2_dx2 + dc3_dx2]]);
        d2.c_s = vec![0.0, -dc3_dx2];
        d2.c00 = dc3_dx2;

        CapacitanceInput {
            blocks: b,
            d_dx: [d1, d2],
        }
    }
}

/// Symmetric gate-free chain; exactly symmetric junction energies and pump
/// coefficients, which the small-signal analysis requires.
pub fn series_chain_default() -> CapacitanceInput {
    SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 2.5e-9,
        gate: None,
    }
    .build()
}

/// Chain with one gate coupled more strongly to shuttle 1.
pub fn series_chain_with_gate_default() -> CapacitanceInput {
    SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 2.5e-9,
        gate: Some([3.0e-18, 1.0e-18, 5.0e-18, 5.0e-19]),
    }
    .build()
}

/// Shuttle parameters matched to the default chain.
pub fn params_default() -> ShuttleParams {
    ShuttleParams::with_quality(
        [3.3e8, 3.4e8],
        [1.0e-18, 1.05e-18],
        10.0,
        [1.0e-10, 1.0e-10, 1.0e-10],
        [2.0e8, 2.0e8, 2.0e8],
        4.0,
    )
}
