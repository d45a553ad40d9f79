//! Benchmark fixtures.

use curlhom::cell::{assemble_ahom, solve_cell_corrector_with, CellCorrector, HomogenisedTensor};
use curlhom::galerkin::Discretisation;
use curlhom::spectral::CoefficientField;
use curlhom::{FrequencyCube, PeriodicMeasure, C64};

pub fn smooth_coefficient() -> CoefficientField {
    CoefficientField::scalar_series(
        1.0,
        &[([1, 0, 0], C64::new(0.15, 0.0)), ([2, 0, 0], C64::new(0.0, -0.1)), ([0, 1, 0], C64::new(0.125, 0.0))],
    )
}

pub struct Fixture {
    pub disc: Discretisation,
    pub a: CoefficientField,
    pub corr: CellCorrector,
    pub ahom: HomogenisedTensor,
}

impl Fixture {
    pub fn new(mu: PeriodicMeasure, cutoff: usize) -> Self {
        let a = smooth_coefficient();
        let disc = Discretisation::new(&FrequencyCube::new(cutoff), &mu, Some(&a));
        let corr = solve_cell_corrector_with(&disc, &a).expect("corrector");
        let ahom = assemble_ahom(&corr);
        Fixture { disc, a, corr, ahom }
    }
}
