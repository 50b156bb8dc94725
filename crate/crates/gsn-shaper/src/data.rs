//! Toy dataset generators (2D manifolds, finite discrete targets) and CSV
//! ingestion. Every generator is deterministic given its seed and draws from
//! its own counter-based stream, so results never depend on call order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{GsnError, Result};
use crate::exact::Dist;
use crate::iofmt::{csv_row, fmt_f64};
use crate::rng::stream_rng;

const STREAM_RING: u64 = 0x01;
const STREAM_CIRCLES: u64 = 0x02;
const STREAM_SPIRAL: u64 = 0x03;
const STREAM_DISCRETE: u64 = 0x04;

/// Immutable sample matrix with cached first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    mean: Tensor,
    cov: Tensor,
}

impl Dataset {
    /// Wraps an n×d matrix, n ≥ 2, computing mean and unbiased covariance
    /// in two passes.
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(GsnError::invalid(
                "Dataset::new",
                format!("rank-2 sample matrix required, got {:?}", samples.shape()),
            ));
        }
        let (n, d) = (samples.rows(), samples.cols());
        if n < 2 {
            return Err(GsnError::invalid(
                "Dataset::new",
                "at least two samples required",
            ));
        }
        if samples.data().iter().any(|v| !v.is_finite()) {
            return Err(GsnError::NonFinite { op: "Dataset::new" });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += samples.get2(i, j);
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            for a in 0..d {
                let ca = samples.get2(i, a) - mean[a];
                for b in 0..d {
                    cov[a * d + b] += ca * (samples.get2(i, b) - mean[b]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        Ok(Dataset {
            samples,
            mean: Tensor::from_vec(vec![d], mean)?,
            cov: Tensor::from_vec(vec![d, d], cov)?,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.rows()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    /// Rows at the given indices as a new batch matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(GsnError::invalid("Dataset::gather_rows", "empty index set"));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.n() {
                return Err(GsnError::invalid(
                    "Dataset::gather_rows",
                    format!("row {i} out of range (n = {})", self.n()),
                ));
            }
            out.extend_from_slice(self.samples.row_slice(i));
        }
        Tensor::from_vec(vec![indices.len(), d], out)
    }
}

/// Mixture of k isotropic Gaussians centered evenly on a circle of the
/// given radius; components chosen uniformly.
pub fn make_ring_of_gaussians(
    k: usize,
    radius: f64,
    std: f64,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if k < 1 {
        return Err(GsnError::invalid("make_ring_of_gaussians", "k must be ≥ 1"));
    }
    if !(radius >= 0.0) {
        return Err(GsnError::invalid(
            "make_ring_of_gaussians",
            "radius must be ≥ 0",
        ));
    }
    check_std_n("make_ring_of_gaussians", std, n)?;
    let mut rng = stream_rng(seed, STREAM_RING);
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let j = rng.random_range(0..k);
        let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        data.push(radius * angle.cos() + std * ex);
        data.push(radius * angle.sin() + std * ey);
    }
    Dataset::new(Tensor::from_vec(vec![n, 2], data)?)
}

/// Two concentric circles with the given radii, points uniform in angle and
/// split evenly between circles by a fair coin, plus isotropic noise.
pub fn make_two_circles(n: usize, radii: (f64, f64), std: f64, seed: u64) -> Result<Dataset> {
    if !(radii.0 > 0.0) || !(radii.1 > 0.0) {
        return Err(GsnError::invalid("make_two_circles", "radii must be > 0"));
    }
    check_std_n("make_two_circles", std, n)?;
    let mut rng = stream_rng(seed, STREAM_CIRCLES);
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let r = if rng.random::<bool>() { radii.0 } else { radii.1 };
        let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        data.push(r * theta.cos() + std * ex);
        data.push(r * theta.sin() + std * ey);
    }
    Dataset::new(Tensor::from_vec(vec![n, 2], data)?)
}

/// Archimedean spiral r = u, θ = 2π·turns·u for u uniform on [0, 1), plus
/// isotropic noise.
pub fn make_spiral(n: usize, turns: f64, std: f64, seed: u64) -> Result<Dataset> {
    if !(turns > 0.0) {
        return Err(GsnError::invalid("make_spiral", "turns must be > 0"));
    }
    check_std_n("make_spiral", std, n)?;
    let mut rng = stream_rng(seed, STREAM_SPIRAL);
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let theta = 2.0 * std::f64::consts::PI * turns * u;
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        data.push(u * theta.cos() + std * ex);
        data.push(u * theta.sin() + std * ey);
    }
    Dataset::new(Tensor::from_vec(vec![n, 2], data)?)
}

fn check_std_n(op: &'static str, std: f64, n: usize) -> Result<()> {
    if !(std > 0.0) {
        return Err(GsnError::invalid(op, "std must be > 0"));
    }
    if n < 2 {
        return Err(GsnError::invalid(op, "n must be ≥ 2"));
    }
    Ok(())
}

/// Full-support distribution over m states from a symmetric Dirichlet,
/// realized as normalized Gamma(concentration, 1) draws.
pub fn random_discrete_target(m: usize, concentration: f64, seed: u64) -> Result<Dist> {
    if m < 2 {
        return Err(GsnError::invalid("random_discrete_target", "m must be ≥ 2"));
    }
    if !(concentration > 0.0) {
        return Err(GsnError::invalid(
            "random_discrete_target",
            "concentration must be > 0",
        ));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| GsnError::invalid("random_discrete_target", e.to_string()))?;
    let mut rng = stream_rng(seed, STREAM_DISCRETE);
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || draws.iter().any(|v| !(*v > 0.0)) {
        return Err(GsnError::SupportViolation {
            msg: "random_discrete_target: a Dirichlet draw underflowed to zero".into(),
        });
    }
    Dist::new(draws.into_iter().map(|v| v / total).collect())
}

/// Writes samples as CSV: header `x0,x1,…`, one row per sample, 17
/// significant digits (lossless for f64), LF line endings.
pub fn save_csv(samples: &Tensor, path: &Path) -> Result<()> {
    if samples.shape().len() != 2 {
        return Err(GsnError::invalid(
            "save_csv",
            format!("rank-2 matrix required, got {:?}", samples.shape()),
        ));
    }
    let d = samples.cols();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let mut out = csv_row(&header);
    out.push('\n');
    for i in 0..samples.rows() {
        let fields: Vec<String> = samples.row_slice(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&csv_row(&fields));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| GsnError::io(path.display().to_string(), e))
}

/// Reads a CSV written by [`save_csv`] (or compatible) into a Dataset.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| GsnError::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| GsnError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "missing header row".into(),
    })?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(GsnError::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("expected {d} columns, found {}", fields.len()),
            });
        }
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|e| GsnError::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("bad number {field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(GsnError::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    msg: format!("non-finite value {field:?}"),
                });
            }
            data.push(v);
        }
        n += 1;
    }
    if n < 2 {
        return Err(GsnError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: format!("at least two data rows required, found {n}"),
        });
    }
    Dataset::new(Tensor::from_vec(vec![n, d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_mean_obeys_clt_bound() {
        let n = 4000;
        let std = 0.5;
        let ds = make_ring_of_gaussians(1, 0.0, std, n, 11).unwrap();
        let bound = 4.0 * std / (n as f64).sqrt();
        for j in 0..2 {
            assert!(
                ds.mean().data()[j].abs() < bound,
                "coordinate {j} mean {} exceeds {bound}",
                ds.mean().data()[j]
            );
        }
    }

    #[test]
    fn tight_ring_hugs_the_unit_circle() {
        let ds = make_ring_of_gaussians(8, 1.0, 0.02, 2000, 5).unwrap();
        for i in 0..ds.n() {
            let r = ds.samples().row_slice(i);
            let rho = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!((rho - 1.0).abs() < 0.2, "point {i} at radius {rho}");
        }
    }

    #[test]
    fn ring_modes_sit_at_the_right_angles() {
        let ds = make_ring_of_gaussians(4, 2.0, 0.01, 400, 7).unwrap();
        let centers = [(2.0, 0.0), (0.0, 2.0), (-2.0, 0.0), (0.0, -2.0)];
        for i in 0..ds.n() {
            let r = ds.samples().row_slice(i);
            let nearest = centers
                .iter()
                .map(|c| ((r[0] - c.0).powi(2) + (r[1] - c.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.1, "point {i} is {nearest} from every mode");
        }
    }

    #[test]
    fn generators_are_deterministic_given_seed() {
        assert_eq!(
            make_ring_of_gaussians(3, 1.0, 0.1, 50, 9).unwrap(),
            make_ring_of_gaussians(3, 1.0, 0.1, 50, 9).unwrap()
        );
        assert_eq!(
            make_two_circles(50, (1.0, 2.0), 0.1, 9).unwrap(),
            make_two_circles(50, (1.0, 2.0), 0.1, 9).unwrap()
        );
        assert_eq!(
            make_spiral(50, 2.0, 0.1, 9).unwrap(),
            make_spiral(50, 2.0, 0.1, 9).unwrap()
        );
        assert_ne!(
            make_spiral(50, 2.0, 0.1, 9).unwrap(),
            make_spiral(50, 2.0, 0.1, 10).unwrap()
        );
    }

    #[test]
    fn two_circles_radial_histogram_is_bimodal() {
        let ds = make_two_circles(2000, (1.0, 2.0), 0.05, 3).unwrap();
        let (mut near_one, mut near_two, mut between) = (0, 0, 0);
        for i in 0..ds.n() {
            let r = ds.samples().row_slice(i);
            let rho = (r[0] * r[0] + r[1] * r[1]).sqrt();
            if (rho - 1.0).abs() < 0.3 {
                near_one += 1;
            } else if (rho - 2.0).abs() < 0.3 {
                near_two += 1;
            } else if (1.4..1.6).contains(&rho) {
                between += 1;
            }
        }
        assert!(near_one > 600, "{near_one} points near radius 1");
        assert!(near_two > 600, "{near_two} points near radius 2");
        assert_eq!(between, 0, "{between} points in the gap");
    }

    #[test]
    fn noiseless_spiral_satisfies_its_parametric_equation() {
        let ds = make_spiral(500, 3.0, 1e-12, 4).unwrap();
        for i in 0..ds.n() {
            let r = ds.samples().row_slice(i);
            let u = (r[0] * r[0] + r[1] * r[1]).sqrt();
            let theta = 2.0 * std::f64::consts::PI * 3.0 * u;
            let (ex, ey) = (u * theta.cos(), u * theta.sin());
            let err = ((r[0] - ex).powi(2) + (r[1] - ey).powi(2)).sqrt();
            assert!(err < 1e-9, "point {i} off-curve by {err}");
        }
    }

    #[test]
    fn discrete_target_is_a_full_support_distribution() {
        let d = random_discrete_target(8, 1.0, 0).unwrap();
        let total: f64 = d.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.probs().iter().all(|&p| p > 0.0));
        assert_eq!(d, random_discrete_target(8, 1.0, 0).unwrap());
        assert_ne!(d, random_discrete_target(8, 1.0, 1).unwrap());
    }

    #[test]
    fn huge_concentration_approaches_uniform() {
        let m = 8;
        let d = random_discrete_target(m, 1e6, 2).unwrap();
        let uniform = 1.0 / m as f64;
        for &p in d.probs() {
            assert!((p - uniform).abs() < 0.01, "entry {p} far from {uniform}");
        }
    }

    #[test]
    fn dataset_statistics_match_a_naive_recomputation() {
        let ds = make_spiral(200, 2.0, 0.1, 6).unwrap();
        let (n, d) = (ds.n(), ds.dim());
        for j in 0..d {
            let mu: f64 = (0..n).map(|i| ds.samples().get2(i, j)).sum::<f64>() / n as f64;
            assert!((mu - ds.mean().data()[j]).abs() < 1e-10);
        }
        for a in 0..d {
            for b in 0..d {
                let (ma, mb) = (ds.mean().data()[a], ds.mean().data()[b]);
                let c: f64 = (0..n)
                    .map(|i| (ds.samples().get2(i, a) - ma) * (ds.samples().get2(i, b) - mb))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!((c - ds.cov().get2(a, b)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let t = Tensor::matrix(3, 2, vec![1.5, -2.25, 0.1, 1e-300, 3.0, -7.5e20]).unwrap();
        save_csv(&t, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.samples().data(), t.data());

        let mut rng = stream_rng(20, 0);
        let big = Tensor::standard_normal(&[200, 2], &mut rng);
        save_csv(&big, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap().samples().data(), big.data());
    }

    #[test]
    fn malformed_csv_is_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "x0,x1\n1.0,2.0\n3.0,oops\n").unwrap();
        let err = load_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");

        std::fs::write(&path, "x0,x1\n1.0,2.0\n3.0\n").unwrap();
        let err = load_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("columns"), "{err}");

        std::fs::write(&path, "x0,x1\n1.0,inf\n2.0,3.0\n").unwrap();
        let err = load_csv(&path).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");

        std::fs::write(&path, "x0,x1\n1.0,2.0\n").unwrap();
        assert!(load_csv(&path).is_err(), "single data row must be rejected");

        std::fs::write(&path, "x0,x1\n").unwrap();
        assert!(load_csv(&path).is_err(), "empty data section must be rejected");
    }

    #[test]
    fn invalid_generator_parameters_are_rejected() {
        assert!(make_ring_of_gaussians(0, 1.0, 0.1, 10, 0).is_err());
        assert!(make_ring_of_gaussians(1, -1.0, 0.1, 10, 0).is_err());
        assert!(make_ring_of_gaussians(1, 1.0, 0.0, 10, 0).is_err());
        assert!(make_ring_of_gaussians(1, 1.0, 0.1, 1, 0).is_err());
        assert!(make_two_circles(10, (0.0, 1.0), 0.1, 0).is_err());
        assert!(make_spiral(10, 0.0, 0.1, 0).is_err());
        assert!(random_discrete_target(1, 1.0, 0).is_err());
        assert!(random_discrete_target(4, 0.0, 0).is_err());
    }

    #[test]
    fn gather_rows_picks_the_requested_rows() {
        let ds = Dataset::new(
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )
        .unwrap();
        let picked = ds.gather_rows(&[2, 0]).unwrap();
        assert_eq!(picked.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(ds.gather_rows(&[3]).is_err());
        assert!(ds.gather_rows(&[]).is_err());
    }
}
