//! Evaluation arithmetic: PSNR, average bit-width, model size, theoretical
//! speedup and Bjøntegaard delta rate.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?, peak))
}

/// Bits assigned to one group of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBits {
    pub layer: String,
    pub params: usize,
    pub bits: f64,
    /// Whether the bit-width was chosen by a selector.
    pub dynamic: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BitProfile {
    pub layers: Vec<LayerBits>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    DynamicLayers,
    WholeModel,
}

impl BitProfile {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }
}

/// Parameter-count-weighted mean bit-width over `scope`.
pub fn avg_bitwidth(profile: &BitProfile, scope: Scope) -> Result<f64> {
    let (mut n, mut acc) = (0usize, 0.0);
    for l in &profile.layers {
        if scope == Scope::DynamicLayers && !l.dynamic {
            continue;
        }
        n += l.params;
        acc += l.params as f64 * l.bits;
    }
    if n == 0 {
        return Err(Error::Contract(format!("no parameters in scope {scope:?}")));
    }
    Ok(acc / n as f64)
}

/// Size in MB of a model whose FP32 size is `fp32_mb` when stored at an
/// average of `avg_bits` bits per parameter.
pub fn model_size(fp32_mb: f64, avg_bits: f64) -> Result<f64> {
    if !(fp32_mb > 0.0 && avg_bits > 0.0) {
        return Err(Error::Param(format!(
            "model size needs positive inputs, got {fp32_mb} MB at {avg_bits} bits"
        )));
    }
    Ok(fp32_mb * avg_bits / 32.0)
}

/// Speedup of `avg_bits` arithmetic over 32-bit floats, assuming cost is
/// linear in operand width.
pub fn theoretical_speedup(avg_bits: f64) -> Result<f64> {
    if !(avg_bits > 0.0) {
        return Err(Error::Param(format!("bit-width must be positive, got {avg_bits}")));
    }
    Ok(32.0 / avg_bits)
}

/// FP32 storage of `params` parameters in MB (2^20 bytes).
pub fn fp32_megabytes(params: usize) -> f64 {
    params as f64 * 4.0 / (1024.0 * 1024.0)
}

/// Rate-distortion points ordered by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    points: Vec<(f64, f64)>,
}

impl RDCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(bpp, psnr)) in points.iter().enumerate() {
            if !(bpp > 0.0 && bpp.is_finite()) || !psnr.is_finite() {
                return Err(Error::Data(format!(
                    "point {i} ({bpp}, {psnr}) needs positive finite bpp and finite PSNR"
                )));
            }
        }
        if let Some(i) = points.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(format!(
                "bpp must be strictly increasing (points {i} and {})",
                i + 1
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads a CSV with header `bpp,psnr_db`. Errors carry the 1-based line.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != ["bpp", "psnr_db"] {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected header `bpp,psnr_db`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                detail: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or("");
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    detail: format!("`{s}` is not a number"),
                })
            };
            points.push((field(0)?, field(1)?));
        }
        Self::new(points)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["bpp", "psnr_db"]).map_err(csv_err)?;
        for &(bpp, psnr) in &self.points {
            w.write_record([bpp.to_string(), psnr.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares cubic `log10(bpp) ≈ c0 + c1·p + c2·p² + c3·p³` in PSNR `p`.
fn fit_log_rate(curve: &RDCurve) -> Result<[f64; 4]> {
    let n = curve.len();
    let a = DMatrix::from_fn(n, 4, |r, col| curve.points[r].1.powi(col as i32));
    let y = DVector::from_iterator(n, curve.points.iter().map(|p| p.0.log10()));
    let coef = a
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Numeric(format!("cubic fit failed: {e}")))?;
    Ok([coef[0], coef[1], coef[2], coef[3]])
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent. Negative
/// means `test` needs fewer bits for the same quality.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    for (name, c) in [("anchor", anchor), ("test", test)] {
        if c.len() < 4 {
            return Err(Error::Data(format!(
                "{name} curve has {} points; BD-rate needs at least 4",
                c.len()
            )));
        }
    }
    let range = |c: &RDCurve| {
        c.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        })
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(Error::Data(format!(
            "PSNR ranges [{a_lo}, {a_hi}] and [{t_lo}, {t_hi}] do not overlap"
        )));
    }
    let ca = fit_log_rate(anchor)?;
    let ct = fit_log_rate(test)?;
    let mean_diff = (poly_integral(&ct, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((10f64.powf(mean_diff) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let x = Tensor::<f64>::full(&[2, 3], 0.4);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr(&x, &Tensor::zeros(&[3, 2]), 1.0).is_err());
    }

    #[test]
    fn weighted_average() {
        let p = BitProfile {
            layers: vec![
                LayerBits { layer: "a".into(), params: 100, bits: 4.0, dynamic: true },
                LayerBits { layer: "b".into(), params: 300, bits: 8.0, dynamic: true },
                LayerBits { layer: "c".into(), params: 100, bits: 32.0, dynamic: false },
            ],
        };
        assert_eq!(avg_bitwidth(&p, Scope::DynamicLayers).unwrap(), 7.0);
        assert_eq!(avg_bitwidth(&p, Scope::WholeModel).unwrap(), (400.0 + 2400.0 + 3200.0) / 500.0);
        assert!(avg_bitwidth(&BitProfile::default(), Scope::WholeModel).is_err());
    }

    #[test]
    fn size_and_speedup_identity() {
        for &(s, b) in &[(137.11, 8.0), (45.08, 6.19), (3.0, 2.5)] {
            let prod = theoretical_speedup(b).unwrap() * model_size(s, b).unwrap();
            assert!((prod - s).abs() < 1e-9);
        }
        assert_eq!(model_size(10.0, 32.0).unwrap(), 10.0);
        assert!(model_size(0.0, 8.0).is_err());
        assert!(theoretical_speedup(0.0).is_err());
    }

    #[test]
    fn curve_rejects_non_monotone_rate() {
        assert!(RDCurve::new(vec![(0.1, 30.0), (0.1, 31.0)]).is_err());
        assert!(RDCurve::new(vec![(0.2, 30.0), (0.1, 31.0)]).is_err());
        assert!(RDCurve::new(vec![(0.0, 30.0)]).is_err());
    }

    #[test]
    fn csv_round_trip_and_line_numbers() {
        let c = RDCurve::new(vec![(0.1, 28.0), (0.25, 30.5), (0.5, 33.0)]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"bpp,psnr_db\n"));
        assert_eq!(RDCurve::read_csv(buf.as_slice()).unwrap(), c);

        let bad = "bpp,psnr_db\n0.1,28\n0.2,oops\n";
        match RDCurve::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RDCurve::read_csv("rate,q\n1,2\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn bd_rate_basic_cases() {
        let a = RDCurve::new(vec![(0.1, 28.0), (0.2, 30.1), (0.4, 32.5), (0.8, 35.2)]).unwrap();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let doubled = RDCurve::new(a.points().iter().map(|&(r, p)| (2.0 * r, p)).collect()).unwrap();
        assert!((bd_rate(&a, &doubled).unwrap() - 100.0).abs() < 1e-6);
        let far = RDCurve::new(a.points().iter().map(|&(r, p)| (r, p + 50.0)).collect()).unwrap();
        assert!(matches!(bd_rate(&a, &far), Err(Error::Data(_))));
        let short = RDCurve::new(vec![(0.1, 28.0), (0.2, 30.0), (0.3, 31.0)]).unwrap();
        assert!(bd_rate(&a, &short).is_err());
    }
}
