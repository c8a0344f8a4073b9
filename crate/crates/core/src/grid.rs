//! Linearized swing-equation model of a power grid.
//!
//! The network-level dynamics are
//!
//! ```text
//! M ω'(t) + D ω(t) + L θ(t) = p(t),    θ'(t) = ω(t)
//! ```
//!
//! with `M` the diagonal inertia matrix, `D = γ M` (uniform damping) and `L`
//! the Kron-reduced network Laplacian over generator buses. Diagonalizing
//! `M^{-1/2} L M^{-1/2} = V Λ Vᵀ` decouples the system into scalar modes
//! `y'' + γ y' + Λ_i y = x_i` with `y = Vᵀ M^{1/2} θ` and `x = Vᵀ M^{-1/2} p`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_SLACK: f64 = 1e-8;

/// Relative Frobenius asymmetry `‖A − Aᵀ‖ / ‖A‖` (0 for the zero matrix).
pub(crate) fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

/// Physics backbone: generator inertias, uniform damping ratio and the
/// reduced network Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    generator_ids: Vec<String>,
    inertia: DVector<f64>,
    gamma: f64,
    laplacian: DMatrix<f64>,
}

impl GridModel {
    /// Builds a model and checks its invariants: positive inertia, positive
    /// damping ratio, symmetric Laplacian and positive semidefinite
    /// `M^{-1/2} L M^{-1/2}`.
    pub fn new(
        generator_ids: Vec<String>,
        inertia: DVector<f64>,
        gamma: f64,
        laplacian: DMatrix<f64>,
    ) -> Result<Self> {
        let n = inertia.len();
        if n == 0 {
            return Err(Error::invalid("grid model needs at least one generator"));
        }
        if generator_ids.len() != n {
            return Err(Error::invalid(format!(
                "{} generator ids for {} generators",
                generator_ids.len(),
                n
            )));
        }
        if laplacian.shape() != (n, n) {
            return Err(Error::invalid(format!(
                "laplacian is {}x{}, expected {n}x{n}",
                laplacian.nrows(),
                laplacian.ncols()
            )));
        }
        if let Some((i, m)) = inertia
            .iter()
            .enumerate()
            .find(|(_, m)| !(m.is_finite() && **m > 0.0))
        {
            return Err(Error::invalid(format!(
                "inertia of generator {i} must be strictly positive, got {m}"
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!(
                "damping ratio gamma must be positive and finite, got {gamma}"
            )));
        }
        if laplacian.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("laplacian has non-finite entries"));
        }
        let asym = relative_asymmetry(&laplacian);
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "laplacian is not symmetric (relative asymmetry {asym:.3e})"
            )));
        }
        let model = GridModel {
            generator_ids,
            inertia,
            gamma,
            laplacian,
        };
        let scaled = model.scaled_laplacian();
        let min_eig = scaled.symmetric_eigenvalues().min();
        let scale = scaled.norm().max(1.0);
        if min_eig < -PSD_SLACK * scale {
            return Err(Error::invalid(format!(
                "M^-1/2 L M^-1/2 is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(model)
    }

    /// Builds a model from a per-generator damping vector, rejecting
    /// anything that is not uniform `D = γ M`.
    pub fn with_damping(
        generator_ids: Vec<String>,
        inertia: DVector<f64>,
        damping: &[f64],
        laplacian: DMatrix<f64>,
    ) -> Result<Self> {
        if damping.len() != inertia.len() {
            return Err(Error::invalid(format!(
                "{} damping coefficients for {} generators",
                damping.len(),
                inertia.len()
            )));
        }
        let ratios: Vec<f64> = damping
            .iter()
            .zip(inertia.iter())
            .map(|(d, m)| d / m)
            .collect();
        let gamma = ratios[0];
        if let Some(i) = ratios
            .iter()
            .position(|r| (r - gamma).abs() > 1e-9 * gamma.abs().max(1e-12))
        {
            return Err(Error::invalid(format!(
                "heterogeneous damping is not supported: D/M is {gamma} at generator 0 but {} at generator {i}; \
                 the modal decomposition requires D = gamma * M",
                ratios[i]
            )));
        }
        Self::new(generator_ids, inertia, gamma, laplacian)
    }

    pub fn n(&self) -> usize {
        self.inertia.len()
    }

    pub fn generator_ids(&self) -> &[String] {
        &self.generator_ids
    }

    pub fn inertia(&self) -> &DVector<f64> {
        &self.inertia
    }

    /// Uniform damping ratio γ (1/s).
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Same model with a different Laplacian, revalidated.
    pub fn with_laplacian(&self, laplacian: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.generator_ids.clone(),
            self.inertia.clone(),
            self.gamma,
            laplacian,
        )
    }

    /// `M^{-1/2} L M^{-1/2}`, symmetrized.
    pub fn scaled_laplacian(&self) -> DMatrix<f64> {
        let s = self.inertia.map(|m| 1.0 / m.sqrt());
        let n = self.n();
        let mut out = DMatrix::from_fn(n, n, |i, j| s[i] * self.laplacian[(i, j)] * s[j]);
        let t = out.transpose();
        out += t;
        out *= 0.5;
        out
    }

    /// Diagonalizes `M^{-1/2} L M^{-1/2}` with eigenvalues sorted ascending.
    /// All modes are retained initially.
    pub fn eigen_decompose(&self) -> Result<EigenBasis> {
        let scaled = self.scaled_laplacian();
        let n = self.n();
        let eig = scaled
            .try_symmetric_eigen(f64::EPSILON, 10_000)
            .ok_or_else(|| Error::numerical("symmetric eigen solver did not converge"))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).into_owned();
            // Sign convention: largest-magnitude entry positive.
            let pivot = col.iamax();
            if col[pivot] < 0.0 {
                col.neg_mut();
            }
            vectors.set_column(dst, &col);
        }
        Ok(EigenBasis {
            vectors,
            eigenvalues,
            gamma: self.gamma,
            retained: (0..n).collect(),
        })
    }

    /// Loads a model file (TOML). See [`ModelFile`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_toml(&text)?.into_model()
    }

    /// Writes the model as a TOML model file with a dense Laplacian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = ModelFile::from_model(self).to_toml()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Modal decomposition of a [`GridModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    vectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    gamma: f64,
    retained: Vec<usize>,
}

impl EigenBasis {
    /// Assembles a basis directly. `vectors` must be orthonormal; used by
    /// tests and by callers that already hold a decomposition.
    pub fn from_parts(vectors: DMatrix<f64>, eigenvalues: DVector<f64>, gamma: f64) -> Result<Self> {
        let n = eigenvalues.len();
        if vectors.shape() != (n, n) {
            return Err(Error::invalid("eigenvector matrix shape does not match eigenvalues"));
        }
        let gram = vectors.transpose() * &vectors;
        let err = (gram - DMatrix::identity(n, n)).amax();
        if err > 1e-8 {
            return Err(Error::invalid(format!(
                "eigenvectors are not orthonormal (max |VᵀV − I| = {err:.3e})"
            )));
        }
        Ok(EigenBasis {
            vectors,
            eigenvalues,
            gamma,
            retained: (0..n).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Full `n × n` orthonormal eigenvector matrix `V`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Eigenvalues `Λ` in ascending order (1/s²).
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Indices of the modes kept for learning.
    pub fn retained_modes(&self) -> &[usize] {
        &self.retained
    }

    /// Number of retained modes `r`.
    pub fn rank(&self) -> usize {
        self.retained.len()
    }

    /// `n × r` matrix of retained eigenvectors.
    pub fn retained_vectors(&self) -> DMatrix<f64> {
        self.vectors.select_columns(&self.retained)
    }

    /// Eigenvalues of the retained modes.
    pub fn retained_eigenvalues(&self) -> Vec<f64> {
        self.retained.iter().map(|&i| self.eigenvalues[i]).collect()
    }

    /// Damped natural frequency of a mode in Hz, `sqrt(max(Λ − γ²/4, 0)) / 2π`.
    ///
    /// This is the oscillation frequency visible in the data. The undamped
    /// frequency is [`EigenBasis::undamped_frequency_hz`].
    pub fn mode_frequency_hz(&self, mode: usize) -> f64 {
        damped_frequency_hz(self.eigenvalues[mode], self.gamma)
    }

    /// Undamped frequency `sqrt(Λ) / 2π` in Hz.
    pub fn undamped_frequency_hz(&self, mode: usize) -> f64 {
        self.eigenvalues[mode].max(0.0).sqrt() / (2.0 * PI)
    }

    /// `V diag(Λ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.eigenvalues) * self.vectors.transpose()
    }

    /// Keeps only the modes whose damped frequency lies in `[f_lo, f_hi]` Hz.
    ///
    /// `f_hi` may be `f64::INFINITY`. The rigid-body mode (Λ ≈ 0, frequency 0)
    /// survives only when `f_lo == 0`.
    pub fn select_modes(&self, f_lo: f64, f_hi: f64) -> Result<EigenBasis> {
        if !(f_lo >= 0.0 && f_lo < f_hi) || f_lo.is_nan() || f_hi.is_nan() {
            return Err(Error::invalid(format!(
                "bandpass must satisfy 0 <= f_lo < f_hi, got [{f_lo}, {f_hi}]"
            )));
        }
        let retained: Vec<usize> = (0..self.n())
            .filter(|&i| {
                let f = self.mode_frequency_hz(i);
                f_lo <= f && f <= f_hi
            })
            .collect();
        if retained.is_empty() {
            let freqs: Vec<String> = (0..self.n())
                .map(|i| format!("{:.3}", self.mode_frequency_hz(i)))
                .collect();
            return Err(Error::invalid(format!(
                "no mode falls inside the [{f_lo}, {f_hi}] Hz band; widen the band (mode frequencies: {} Hz)",
                freqs.join(", ")
            )));
        }
        Ok(EigenBasis {
            retained,
            ..self.clone()
        })
    }

    /// Explicitly sets the retained mode set.
    pub fn with_retained(&self, retained: Vec<usize>) -> Result<EigenBasis> {
        if retained.is_empty() || retained.iter().any(|&i| i >= self.n()) {
            return Err(Error::invalid("retained modes must be a nonempty subset of the modes"));
        }
        Ok(EigenBasis {
            retained,
            ..self.clone()
        })
    }
}

pub(crate) fn damped_frequency_hz(lambda: f64, gamma: f64) -> f64 {
    (lambda - gamma * gamma / 4.0).max(0.0).sqrt() / (2.0 * PI)
}

/// Kron reduction: Schur complement of a bus-level Laplacian onto the
/// generator buses, in the order given by `generator_buses`.
///
/// Interior buses are eliminated one at a time; a vanishing pivot reports
/// the bus at which elimination broke down.
pub fn kron_reduce(full: &DMatrix<f64>, generator_buses: &[usize]) -> Result<DMatrix<f64>> {
    let nb = full.nrows();
    if full.ncols() != nb {
        return Err(Error::invalid("network matrix must be square"));
    }
    let asym = relative_asymmetry(full);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "network matrix is not symmetric (relative asymmetry {asym:.3e})"
        )));
    }
    let mut is_gen = vec![false; nb];
    for &b in generator_buses {
        if b >= nb {
            return Err(Error::invalid(format!("generator bus {b} outside 0..{nb}")));
        }
        if is_gen[b] {
            return Err(Error::invalid(format!("generator bus {b} listed twice")));
        }
        is_gen[b] = true;
    }
    if generator_buses.is_empty() {
        return Err(Error::invalid("no generator buses given"));
    }

    let scale = full.amax().max(f64::MIN_POSITIVE);
    let mut work = full.clone();
    let mut alive = vec![true; nb];
    for k in (0..nb).filter(|&k| !is_gen[k]) {
        let pivot = work[(k, k)];
        if pivot.abs() <= 1e-12 * scale {
            return Err(Error::numerical(format!(
                "singular interior block: zero pivot {pivot:.3e} while eliminating bus {k} \
                 (is it disconnected from every generator?)"
            )));
        }
        alive[k] = false;
        let live: Vec<usize> = (0..nb).filter(|&i| alive[i]).collect();
        for &i in &live {
            let f = work[(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            for &j in &live {
                work[(i, j)] -= f * work[(k, j)];
            }
        }
    }
    let mut reduced = DMatrix::from_fn(generator_buses.len(), generator_buses.len(), |i, j| {
        work[(generator_buses[i], generator_buses[j])]
    });
    let t = reduced.transpose();
    reduced += t;
    reduced *= 0.5;
    Ok(reduced)
}

/// One branch of the bus-level network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

/// Bus/branch description of the network, reduced to generator buses on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkSpec {
    pub buses: usize,
    pub branches: Vec<Branch>,
    pub generator_buses: Vec<usize>,
}

impl NetworkSpec {
    /// Bus-level Laplacian from branch susceptances.
    pub fn bus_laplacian(&self) -> Result<DMatrix<f64>> {
        let nb = self.buses;
        let mut l = DMatrix::zeros(nb, nb);
        for br in &self.branches {
            if br.from >= nb || br.to >= nb || br.from == br.to {
                return Err(Error::config(format!(
                    "branch {}-{} is invalid for {nb} buses",
                    br.from, br.to
                )));
            }
            l[(br.from, br.from)] += br.susceptance;
            l[(br.to, br.to)] += br.susceptance;
            l[(br.from, br.to)] -= br.susceptance;
            l[(br.to, br.from)] -= br.susceptance;
        }
        Ok(l)
    }
}

/// Dense matrix as written in a model file: either rows or one flat
/// row-major array.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DenseMatrix {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl DenseMatrix {
    fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            DenseMatrix::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config(format!("laplacian must be {n}x{n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            DenseMatrix::Flat(v) => {
                if v.len() != n * n {
                    return Err(Error::config(format!(
                        "flat laplacian has {} entries, expected {}",
                        v.len(),
                        n * n
                    )));
                }
                Ok(DMatrix::from_row_slice(n, n, v))
            }
        }
    }
}

/// On-disk model description.
///
/// Units: inertia in p.u.·s², `gamma` in 1/s, Laplacian entries and branch
/// susceptances in p.u. Exactly one of `laplacian` and `network` is given;
/// `damping` may replace `gamma` when it is uniform (`D = γ M`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n: usize,
    pub generator_ids: Vec<String>,
    pub inertia: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplacian: Option<DenseMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
}

const MODEL_HEADER: &str = "\
# Grid model file.
# Units: inertia [p.u. s^2], gamma [1/s] (uniform damping D = gamma * M),
# laplacian / branch susceptance [p.u.]. Exactly one of `laplacian` or
# `[network]` must be present.
";

impl ModelFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("model file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        Ok(format!("{MODEL_HEADER}{body}"))
    }

    pub fn from_model(model: &GridModel) -> Self {
        let n = model.n();
        ModelFile {
            n,
            generator_ids: model.generator_ids.clone(),
            inertia: model.inertia.iter().copied().collect(),
            gamma: Some(model.gamma),
            damping: None,
            laplacian: Some(DenseMatrix::Rows(
                (0..n)
                    .map(|i| (0..n).map(|j| model.laplacian[(i, j)]).collect())
                    .collect(),
            )),
            network: None,
        }
    }

    pub fn into_model(self) -> Result<GridModel> {
        let n = self.n;
        if self.inertia.len() != n {
            return Err(Error::config(format!(
                "n = {n} but {} inertia values",
                self.inertia.len()
            )));
        }
        let laplacian = match (&self.laplacian, &self.network) {
            (Some(l), None) => l.to_matrix(n)?,
            (None, Some(net)) => {
                if net.generator_buses.len() != n {
                    return Err(Error::config(format!(
                        "n = {n} but {} generator buses",
                        net.generator_buses.len()
                    )));
                }
                kron_reduce(&net.bus_laplacian()?, &net.generator_buses)?
            }
            _ => {
                return Err(Error::config(
                    "model file must contain exactly one of `laplacian` or `network`",
                ))
            }
        };
        let inertia = DVector::from_vec(self.inertia);
        match (self.gamma, self.damping) {
            (Some(g), None) => GridModel::new(self.generator_ids, inertia, g, laplacian),
            (None, Some(d)) => GridModel::with_damping(self.generator_ids, inertia, &d, laplacian),
            _ => Err(Error::config(
                "model file must contain exactly one of `gamma` or `damping`",
            )),
        }
    }
}
