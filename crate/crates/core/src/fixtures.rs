//! Reference parameter matrices for cubic B-spline copulas.
//!
//! `R1` is sparse with a counter-diagonal block, `R2` has no zero entries and
//! `R3` is sparse and nearly block diagonal.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::copula::CopulaModel;
use crate::error::Result;

/// Degree shared by every fixture basis.
pub const FIXTURE_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fixture {
    R1,
    R2,
    R3,
}

impl Fixture {
    pub const ALL: [Fixture; 3] = [Fixture::R1, Fixture::R2, Fixture::R3];

    pub fn name(self) -> &'static str {
        match self {
            Fixture::R1 => "R1",
            Fixture::R2 => "R2",
            Fixture::R3 => "R3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R1" => Some(Fixture::R1),
            "R2" => Some(Fixture::R2),
            "R3" => Some(Fixture::R3),
            _ => None,
        }
    }

    /// `(m, n)` of the true matrix.
    pub fn size(self) -> (usize, usize) {
        match self {
            Fixture::R1 | Fixture::R2 => (4, 5),
            Fixture::R3 => (5, 5),
        }
    }

    pub fn rows(self) -> Vec<Vec<f64>> {
        match self {
            Fixture::R1 => vec![
                vec![0.125, 0.0, 0.0, 0.0, 0.125],
                vec![0.0, 0.25, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.25, 0.0],
                vec![0.0, 0.0, 0.25, 0.0, 0.0],
            ],
            Fixture::R2 => vec![
                vec![0.05, 0.05, 0.05, 0.05, 0.05],
                vec![0.025, 0.15, 0.025, 0.025, 0.025],
                vec![0.025, 0.025, 0.025, 0.15, 0.025],
                vec![0.025, 0.025, 0.15, 0.025, 0.025],
            ],
            Fixture::R3 => vec![
                vec![0.12, 0.005, 0.0, 0.0, 0.0],
                vec![0.005, 0.245, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.24, 0.01, 0.0],
                vec![0.0, 0.0, 0.01, 0.24, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.125],
            ],
        }
    }

    /// Cubic bases of the true size.
    pub fn bases(self) -> Result<Vec<BasisSystem>> {
        let (m, n) = self.size();
        Ok(vec![
            BasisSystem::uniform(FIXTURE_DEGREE, m)?,
            BasisSystem::uniform(FIXTURE_DEGREE, n)?,
        ])
    }

    pub fn model(self) -> Result<CopulaModel> {
        let mut bases = self.bases()?;
        let col = bases.pop().expect("two bases");
        let row = bases.pop().expect("two bases");
        CopulaModel::from_rows(&self.rows(), row, col)
    }
}
