//! Synthetic grid models used by the bundled scenarios.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;

/// Laplacian of an undirected weighted edge list over `n` nodes.
pub fn laplacian_from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<DMatrix<f64>> {
    let mut l = DMatrix::zeros(n, n);
    for &(a, b, w) in edges {
        if a >= n || b >= n || a == b {
            return Err(Error::invalid(format!("edge ({a}, {b}) is not valid for {n} nodes")));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::invalid(format!("edge ({a}, {b}) has weight {w}")));
        }
        l[(a, b)] -= w;
        l[(b, a)] -= w;
        l[(a, a)] += w;
        l[(b, b)] += w;
    }
    Ok(l)
}

/// Six machines on a meshed ring: four well-coupled machines (0–3) and two
/// (4, 5) that each hang off two of them.
pub fn six_generator() -> GridModel {
    let edges = [
        (0, 1, 33.2),
        (1, 2, 27.9),
        (2, 3, 112.0),
        (3, 0, 47.7),
        (0, 4, 110.7),
        (2, 4, 117.6),
        (1, 5, 44.6),
        (3, 5, 84.1),
        (4, 5, 8.5),
    ];
    let l = laplacian_from_edges(6, &edges).expect("static edge list");
    GridModel::new(
        (1..=6).map(|i| i.to_string()).collect(),
        DVector::from_vec(vec![7.1, 10.7, 10.7, 8.1, 11.3, 5.2]),
        3.0,
        l,
    )
    .expect("static model is valid")
}

/// Random multi-area grid: dense, stiff coupling inside each area and a few
/// weak ties between neighbouring areas (areas form a ring).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaGridSpec {
    pub areas: usize,
    pub per_area: usize,
    pub seed: u64,
    pub gamma: f64,
    pub inertia: (f64, f64),
    /// Weight range of lines inside an area.
    pub intra: (f64, f64),
    /// Weight range of tie lines between areas.
    pub inter: (f64, f64),
    /// Chords added to each area's ring.
    pub chords: usize,
    /// Tie lines between each pair of neighbouring areas.
    pub ties: usize,
}

impl AreaGridSpec {
    pub fn new(areas: usize, per_area: usize, seed: u64) -> Self {
        AreaGridSpec {
            areas,
            per_area,
            seed,
            gamma: 3.0,
            inertia: (3.0, 12.0),
            intra: (30.0, 120.0),
            inter: (2.0, 6.0),
            chords: per_area / 2,
            ties: 2,
        }
    }

    /// Area of each generator.
    pub fn area_of(&self, g: usize) -> usize {
        g / self.per_area
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn area_grid(spec: &AreaGridSpec) -> Result<GridModel> {
    if spec.areas == 0 || spec.per_area < 2 {
        return Err(Error::invalid("an area grid needs at least one area of two generators"));
    }
    let n = spec.areas * spec.per_area;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut edges = Vec::new();
    for a in 0..spec.areas {
        let base = a * spec.per_area;
        let k = spec.per_area;
        for i in 0..k {
            if k > 2 || i == 0 {
                edges.push((base + i, base + (i + 1) % k, uniform(&mut rng, spec.intra)));
            }
        }
        for _ in 0..spec.chords {
            let i = rng.random_range(0..k);
            let j = rng.random_range(0..k);
            if i != j {
                edges.push((base + i, base + j, uniform(&mut rng, spec.intra)));
            }
        }
    }
    if spec.areas > 1 {
        let pairs = if spec.areas == 2 { 1 } else { spec.areas };
        for a in 0..pairs {
            let b = (a + 1) % spec.areas;
            for _ in 0..spec.ties {
                let i = a * spec.per_area + rng.random_range(0..spec.per_area);
                let j = b * spec.per_area + rng.random_range(0..spec.per_area);
                edges.push((i, j, uniform(&mut rng, spec.inter)));
            }
        }
    }
    let inertia = DVector::from_fn(n, |_, _| uniform(&mut rng, spec.inertia));
    GridModel::new(
        (1..=n).map(|i| i.to_string()).collect(),
        inertia,
        spec.gamma,
        laplacian_from_edges(n, &edges)?,
    )
}

/// Input intensity with one load fluctuation per area, shared by its
/// machines in proportion to their inertia, plus independent local noise:
/// `Q = area_sigma² Σ_a (M 1_a)(M 1_a)ᵀ + local_sigma² I`.
///
/// Inertia-proportional area loads barely excite the modes internal to an
/// area, so the speeds are dominated by the slow inter-area modes.
pub fn area_load_intensity(
    model: &GridModel,
    spec: &AreaGridSpec,
    area_sigma: f64,
    local_sigma: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = model.n();
    if n != spec.areas * spec.per_area {
        return Err(Error::invalid("model size does not match the area layout"));
    }
    let m = model.inertia();
    let q = DMatrix::from_fn(n, n, |i, j| {
        let shared = if spec.area_of(i) == spec.area_of(j) {
            area_sigma * area_sigma * m[i] * m[j]
        } else {
            0.0
        };
        shared + if i == j { local_sigma * local_sigma } else { 0.0 }
    });
    Ok((0..n).map(|i| q.row(i).iter().copied().collect()).collect())
}
