//! Closed-form posteriors of two toy distributions used to test whether a
//! perturbed point is a proper adversarial example: it must keep its true
//! label under the data distribution, `p(y|x') > p(y'|x')` for all `y' != y`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Posterior pair `(p(y=1|x), p(y=-1|x))`.
pub type Posteriors = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// `None` where the point has zero probability under the data.
    pub posteriors: Option<Posteriors>,
    /// Whether the claimed label is still the most probable one.
    pub label_invariant: Option<bool>,
}

/// Two point masses with uniform labels: `x = 0` for `y = 1` and
/// `x = epsilon` for `y = -1`.
pub fn point_mass_posteriors(x: f64, epsilon: f64) -> Result<Option<Posteriors>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        bail!(InvalidArgument, "epsilon must be positive, got {epsilon}");
    }
    Ok(if x == 0.0 {
        Some((1.0, 0.0))
    } else if x == epsilon {
        Some((0.0, 1.0))
    } else {
        None
    })
}

/// Check a candidate `x_tilde` claimed to carry label `y` (either 1 or -1).
pub fn point_mass_validity(x_tilde: f64, y: i8, epsilon: f64) -> Result<Verdict> {
    check_label(y)?;
    let posteriors = point_mass_posteriors(x_tilde, epsilon)?;
    Ok(Verdict { posteriors, label_invariant: posteriors.map(|p| invariant(p, y)) })
}

fn check_label(y: i8) -> Result<()> {
    if y != 1 && y != -1 {
        bail!(InvalidArgument, "labels are 1 or -1, got {y}");
    }
    Ok(())
}

fn invariant((pos, neg): Posteriors, y: i8) -> bool {
    if y == 1 {
        pos > neg
    } else {
        neg > pos
    }
}

/// `x1` equals the label with probability `p`; `x2..xD` are i.i.d.
/// `N(y * eta, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsiprasToy {
    pub p: f64,
    pub eta: f64,
    /// Total dimension `D >= 2`.
    pub dim: usize,
}

impl Default for TsiprasToy {
    fn default() -> Self {
        Self { p: 0.9, eta: 3.0, dim: 2 }
    }
}

impl TsiprasToy {
    pub fn new(p: f64, eta: f64) -> Result<Self> {
        let t = Self { p, eta, dim: 2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.p) {
            bail!(InvalidArgument, "p must lie in [0.5, 1], got {}", self.p);
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            bail!(InvalidArgument, "eta must be positive, got {}", self.eta);
        }
        if self.dim < 2 {
            bail!(InvalidArgument, "dimension must be at least 2, got {}", self.dim);
        }
        Ok(())
    }

    /// `ln p(y=1|x) - ln p(y=-1|x)`.
    pub fn log_odds(&self, x1: f64, rest: &[f64]) -> Result<f64> {
        self.validate()?;
        if x1 != 1.0 && x1 != -1.0 {
            bail!(InvalidArgument, "x1 must be 1 or -1, got {x1}");
        }
        if rest.len() != self.dim - 1 {
            bail!(Shape, "expected {} Gaussian coordinates, got {}", self.dim - 1, rest.len());
        }
        // ln N(x; eta, 1) - ln N(x; -eta, 1) = 2 eta x
        let mirror = x1 * (self.p.ln() - (1.0 - self.p).ln());
        Ok(mirror + 2.0 * self.eta * rest.iter().sum::<f64>())
    }
}

/// Posteriors under uniform labels, evaluated in log space.
pub fn tsipras_posteriors(x1: f64, rest: &[f64], toy: &TsiprasToy) -> Result<Posteriors> {
    let l = toy.log_odds(x1, rest)?;
    if l.is_nan() {
        bail!(InvalidArgument, "posterior undefined at this point");
    }
    Ok(if l >= 0.0 {
        let e = (-l).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = l.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    })
}

/// The same posteriors from the raw densities, for cross-checking.
pub fn tsipras_posteriors_direct(x1: f64, rest: &[f64], toy: &TsiprasToy) -> Result<Posteriors> {
    toy.log_odds(x1, rest)?;
    let gauss = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let like = |y: f64| {
        let m = if x1 == y { toy.p } else { 1.0 - toy.p };
        0.5 * m * rest.iter().map(|&x| gauss(x, y * toy.eta)).product::<f64>()
    };
    let (a, b) = (like(1.0), like(-1.0));
    Ok((a / (a + b), b / (a + b)))
}

/// One row of the label-invariance table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub x1: f64,
    pub x2: f64,
    /// Amount subtracted from every Gaussian coordinate.
    pub shift: f64,
    /// Most probable label of the unshifted point.
    pub label: i8,
    pub posteriors: Posteriors,
    pub label_invariant: bool,
}

/// For the representative points `(x1, eta)` with `x1 = +-1`, shift every
/// Gaussian coordinate by `-shift` and test whether the original label
/// survives.
pub fn defense_of_definition_report(toy: &TsiprasToy, shifts: &[f64]) -> Result<Vec<ReportRow>> {
    toy.validate()?;
    let mut rows = Vec::new();
    for x1 in [-1.0, 1.0] {
        let x2 = toy.eta;
        let (p0, n0) = tsipras_posteriors(x1, &vec![x2; toy.dim - 1], toy)?;
        let label = if p0 >= n0 { 1 } else { -1 };
        for &shift in shifts {
            let posteriors = tsipras_posteriors(x1, &vec![x2 - shift; toy.dim - 1], toy)?;
            rows.push(ReportRow { x1, x2, shift, label, posteriors, label_invariant: invariant(posteriors, label) || shift == 0.0 });
        }
    }
    Ok(rows)
}

pub fn write_report_csv(rows: &[ReportRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "x1,x2,shift,x2_shifted,label,p_pos,p_neg,label_invariant")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:e},{:e},{}",
            r.x1,
            r.x2,
            r.shift,
            r.x2 - r.shift,
            r.label,
            r.posteriors.0,
            r.posteriors.1,
            u8::from(r.label_invariant)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_examples() {
        let v = point_mass_validity(0.3, 1, 0.3).unwrap();
        assert_eq!(v.posteriors, Some((0.0, 1.0)));
        assert_eq!(v.label_invariant, Some(false));
        let v = point_mass_validity(0.0, 1, 0.3).unwrap();
        assert_eq!(v.posteriors.unwrap().0, 1.0);
        assert_eq!(v.label_invariant, Some(true));
        assert_eq!(point_mass_validity(0.15, 1, 0.3).unwrap().posteriors, None);
        assert!(point_mass_validity(0.0, 1, 0.0).is_err());
        assert!(point_mass_validity(0.0, 0, 0.3).is_err());
    }

    #[test]
    fn symmetric_point() {
        let toy = TsiprasToy::new(0.5, 3.0).unwrap();
        assert_eq!(tsipras_posteriors(1.0, &[0.0], &toy).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn perturbed_point_flips_posterior() {
        let toy = TsiprasToy::default();
        let (pos, neg) = tsipras_posteriors(-1.0, &[-3.0], &toy).unwrap();
        let e = (-18.0f64).exp();
        let oracle = 0.1 * e / (0.1 * e + 0.9);
        assert!(((pos - oracle) / oracle).abs() < 1e-12);
        assert!((pos - 1.69e-9).abs() < 0.01e-9);
        assert!(pos < neg);
        let (pos, _) = tsipras_posteriors(-1.0, &[3.0], &toy).unwrap();
        assert!((1.0 - pos - 0.9 * e / (0.1 + 0.9 * e)).abs() < 1e-15);
    }

    #[test]
    fn report_flags_the_two_eta_shift() {
        let toy = TsiprasToy::default();
        let rows = defense_of_definition_report(&toy, &[0.0, 1.0, 6.0]).unwrap();
        for r in &rows {
            assert!((r.posteriors.0 + r.posteriors.1 - 1.0).abs() < 1e-12);
            if r.shift == 0.0 {
                assert!(r.label_invariant);
            }
        }
        let flip = rows.iter().find(|r| r.x1 == -1.0 && r.shift == 6.0).unwrap();
        assert_eq!(flip.label, 1);
        assert!(!flip.label_invariant);
        let mut out = Vec::new();
        write_report_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), rows.len() + 1);
    }

    #[test]
    fn higher_dimensions() {
        let toy = TsiprasToy { dim: 4, ..TsiprasToy::default() };
        let a = tsipras_posteriors(1.0, &[0.1, -0.2, 0.3], &toy).unwrap();
        let b = tsipras_posteriors_direct(1.0, &[0.1, -0.2, 0.3], &toy).unwrap();
        assert!((a.0 - b.0).abs() < 1e-10);
        assert!(tsipras_posteriors(1.0, &[0.1], &toy).is_err());
    }
}
