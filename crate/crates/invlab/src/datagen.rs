//! Synthetic product populations, Gamma demand traces, and external trace
//! ingestion.
//!
//! Product economics are drawn from a fixed family (exponential prices,
//! holding costs and mean demands; uniform cost fractions) and each product
//! gets a single realized demand path from a Gamma distribution matching its
//! (mean, coefficient of variation) pair. All draws flow through per-product
//! counter RNG streams, so a (seed, n) pair fully determines the population
//! no matter the sampling order.

use crate::envs::EconStatics;
use crate::rng::{tag, CounterRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// A product: static economics plus the latent demand-distribution
/// parameters. The latent (mu, nu) pair is used only by omniscient
/// benchmarks and by the trace sampler, never shown to a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: u64,
    pub econ: EconStatics,
    /// Mean demand per period.
    pub mu: f64,
    /// Coefficient of variation of demand.
    pub nu: f64,
}

impl Product {
    /// Gamma parameters implied by (mu, nu): shape = 1/nu^2, scale = mu nu^2.
    pub fn gamma_params(&self) -> (f64, f64) {
        gamma_params(self.mu, self.nu)
    }
}

/// shape = 1/nu^2, scale = mu nu^2, so that shape*scale = mu and
/// 1/sqrt(shape) = nu.
pub fn gamma_params(mu: f64, nu: f64) -> (f64, f64) {
    assert!(mu > 0.0 && nu > 0.0, "gamma_params requires mu, nu > 0");
    let shape = 1.0 / (nu * nu);
    let scale = mu * nu * nu;
    (shape, scale)
}

/// Extra per-product option flags for [`sample_products`].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProductFlags {
    /// Draw distinct expedited/regular costs for dual sourcing.
    pub dual: bool,
    /// Draw a nonzero return value.
    pub returns: bool,
}

/// One realized demand path for a product, periods -H..T-1 flattened into a
/// single vector of length H+T, plus optional extra feature channels of the
/// same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandTrace {
    pub product_id: u64,
    pub demands: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl DemandTrace {
    pub fn len(&self) -> usize {
        self.demands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demands.is_empty()
    }

    /// Number of time-series channels (demand plus extra features).
    pub fn channels(&self) -> usize {
        1 + self.features.len()
    }
}

/// Sample `n` products. Economics construction guarantees c <= p, r <= c,
/// c_r <= c_e and c_e - c_r <= b for every draw.
pub fn sample_products(n: usize, seed: u64, flags: ProductFlags) -> Vec<Product> {
    (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = CounterRng::new(seed, &[tag("product"), id]);
            let price = rng.exponential(100.0);
            let cost = price * rng.uniform();
            let penalty = 10.0 * rng.uniform();
            let holding = rng.exponential(5.0);
            let mu = rng.exponential(100.0);
            let nu = rng.uniform_open();
            let (expedited_cost, regular_cost) = if flags.dual {
                let u6 = rng.uniform();
                let u2 = rng.uniform();
                (cost, cost - (penalty * u6).min(u2 * cost))
            } else {
                (cost, cost)
            };
            let return_value = if flags.returns { cost * rng.uniform() } else { 0.0 };
            Product {
                id,
                econ: EconStatics {
                    price,
                    cost,
                    holding,
                    penalty,
                    expedited_cost,
                    regular_cost,
                    return_value,
                },
                mu,
                nu,
            }
        })
        .collect()
}

/// Sample one demand trace of length `history + horizon` for a product.
/// Deterministic per (product id, seed).
pub fn sample_trace(product: &Product, history: usize, horizon: usize, seed: u64) -> DemandTrace {
    let (shape, scale) = product.gamma_params();
    let mut rng = CounterRng::new(seed, &[tag("trace"), product.id]);
    let demands = (0..history + horizon)
        .map(|_| rng.gamma(shape, scale))
        .collect();
    DemandTrace {
        product_id: product.id,
        demands,
        features: Vec::new(),
    }
}

/// Sample traces for a whole population in parallel.
pub fn sample_traces(
    products: &[Product],
    history: usize,
    horizon: usize,
    seed: u64,
) -> Vec<DemandTrace> {
    products
        .par_iter()
        .map(|p| sample_trace(p, history, horizon, seed))
        .collect()
}

/// Periods (in trace indexing) at which a recurring event occurs, e.g. one
/// entry per Christmas week. Distances enter the policy as an extra channel.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventCalendar {
    pub event_periods: Vec<i64>,
}

impl EventCalendar {
    /// Whole periods until the next event at or after `period`.
    pub fn distance(&self, period: i64) -> Option<i64> {
        self.event_periods
            .iter()
            .filter(|&&e| e >= period)
            .map(|&e| e - period)
            .min()
    }
}

/// Scale applied to the distance-to-event feature channel (weeks / year).
pub const EVENT_DISTANCE_SCALE: f64 = 1.0 / 52.0;

/// Load demand traces from a CSV with header
/// `product_id,period_index,demand[,feature...]`. Periods must be dense
/// (0..len) per product; any gap, duplicate, or negative demand is an error
/// naming the offending row. An optional event calendar adds a
/// distance-to-event channel scaled by [`EVENT_DISTANCE_SCALE`].
pub fn load_traces(path: &Path, calendar: Option<&EventCalendar>) -> crate::Result<Vec<DemandTrace>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "product_id" || cols[1] != "period_index" || cols[2] != "demand"
    {
        return Err(crate::Error::Parse {
            path: path.display().to_string(),
            row: 1,
            msg: format!(
                "expected header product_id,period_index,demand[,feature...], got {cols:?}"
            ),
        });
    }
    let n_features = cols.len() - 3;

    // product -> (period -> (demand, features))
    let mut by_product: HashMap<u64, Vec<(usize, f64, Vec<f64>)>> = HashMap::new();
    let mut order: Vec<u64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record?;
        let parse_err = |msg: String| crate::Error::Parse {
            path: path.display().to_string(),
            row,
            msg,
        };
        let id: u64 = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad product_id".into()))?;
        let period: usize = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad period_index".into()))?;
        let demand: f64 = record
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad demand".into()))?;
        if demand < 0.0 {
            return Err(parse_err(format!(
                "negative demand {demand} for product {id} period {period}"
            )));
        }
        let mut feats = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let v: f64 = record
                .get(3 + f)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(format!("bad feature column {}", cols[3 + f])))?;
            feats.push(v);
        }
        if !by_product.contains_key(&id) {
            order.push(id);
        }
        by_product.entry(id).or_default().push((period, demand, feats));
    }

    let mut traces = Vec::with_capacity(order.len());
    let mut expected_len: Option<usize> = None;
    for id in order {
        let mut rows = by_product.remove(&id).unwrap();
        rows.sort_by_key(|r| r.0);
        for (want, row) in rows.iter().enumerate() {
            if row.0 != want {
                return Err(crate::Error::Parse {
                    path: path.display().to_string(),
                    row: 0,
                    msg: format!("product {id} is missing period {want}"),
                });
            }
        }
        let len = rows.len();
        if let Some(expect) = expected_len {
            if len != expect {
                return Err(crate::Error::Parse {
                    path: path.display().to_string(),
                    row: 0,
                    msg: format!("product {id} has {len} periods, expected {expect} (ragged series)"),
                });
            }
        } else {
            expected_len = Some(len);
        }
        let demands: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mut features: Vec<Vec<f64>> =
            (0..n_features).map(|f| rows.iter().map(|r| r.2[f]).collect()).collect();
        if let Some(cal) = calendar {
            let mut channel = Vec::with_capacity(len);
            for t in 0..len {
                let dist = cal.distance(t as i64).ok_or_else(|| crate::Error::Parse {
                    path: path.display().to_string(),
                    row: 0,
                    msg: format!("event calendar has no event at or after period {t}"),
                })?;
                channel.push(dist as f64 * EVENT_DISTANCE_SCALE);
            }
            features.push(channel);
        }
        traces.push(DemandTrace {
            product_id: id,
            demands,
            features,
        });
    }
    Ok(traces)
}

/// Write traces in the same CSV schema `load_traces` reads.
pub fn save_traces(path: &Path, traces: &[DemandTrace]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_features = traces.first().map_or(0, |t| t.features.len());
    let mut header = vec!["product_id".to_string(), "period_index".into(), "demand".into()];
    for f in 0..n_features {
        header.push(format!("feature_{f}"));
    }
    w.write_record(&header)?;
    for t in traces {
        for (i, d) in t.demands.iter().enumerate() {
            let mut rec = vec![t.product_id.to_string(), i.to_string(), format!("{d}")];
            for f in &t.features {
                rec.push(format!("{}", f[i]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Product economics CSV: id,p,c,c_e,c_r,r,b,h,mu,nu.
pub fn save_products(path: &Path, products: &[Product]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "p", "c", "c_e", "c_r", "r", "b", "h", "mu", "nu"])?;
    for p in products {
        w.write_record(&[
            p.id.to_string(),
            format!("{}", p.econ.price),
            format!("{}", p.econ.cost),
            format!("{}", p.econ.expedited_cost),
            format!("{}", p.econ.regular_cost),
            format!("{}", p.econ.return_value),
            format!("{}", p.econ.penalty),
            format!("{}", p.econ.holding),
            format!("{}", p.mu),
            format!("{}", p.nu),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_products(path: &Path) -> crate::Result<Vec<Product>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = |idx: usize| -> crate::Result<f64> {
            record
                .get(idx)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| crate::Error::Parse {
                    path: path.display().to_string(),
                    row,
                    msg: format!("bad numeric field {idx}"),
                })
        };
        let id: u64 = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| crate::Error::Parse {
                path: path.display().to_string(),
                row,
                msg: "bad id".into(),
            })?;
        out.push(Product {
            id,
            econ: EconStatics {
                price: field(1)?,
                cost: field(2)?,
                expedited_cost: field(3)?,
                regular_cost: field(4)?,
                return_value: field(5)?,
                penalty: field(6)?,
                holding: field(7)?,
            },
            mu: field(8)?,
            nu: field(9)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_params_moment_identities() {
        let (shape, scale) = gamma_params(100.0, 0.5);
        assert_eq!(shape, 4.0);
        assert_eq!(scale, 25.0);
        let (shape, scale) = gamma_params(100.0, 1.0);
        assert_eq!(shape, 1.0);
        assert_eq!(scale, 100.0);
        // identities hold exactly for arbitrary inputs
        for &(mu, nu) in &[(3.7, 0.11), (250.0, 0.93), (1e-3, 0.4)] {
            let (shape, scale) = gamma_params(mu, nu);
            assert!((shape * scale - mu).abs() < 1e-9 * mu);
            assert!((1.0 / shape.sqrt() - nu).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_sampler_mean_within_one_percent_on_a_million_draws() {
        let (shape, scale) = gamma_params(100.0, 0.5);
        let mut rng = CounterRng::new(17, &[tag("mc")]);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rng.gamma(shape, scale);
        }
        let mean = sum / n as f64;
        assert!((mean - 100.0).abs() < 1.0, "mean={mean}");
    }

    #[test]
    fn small_shape_draws_are_finite_over_a_million_samples() {
        // shape < 1 exercises the boosting branch
        let mut rng = CounterRng::new(23, &[tag("stress")]);
        let mut sum = 0.0;
        for _ in 0..1_000_000 {
            let x = rng.gamma(0.25, 10.0);
            assert!(x.is_finite() && x >= 0.0);
            sum += x;
        }
        let mean = sum / 1e6;
        assert!((mean - 2.5).abs() < 0.1, "mean={mean}");
    }

    #[test]
    fn product_population_mean_price_band() {
        let products = sample_products(100_000, 31, ProductFlags::default());
        let mean_p: f64 = products.iter().map(|p| p.econ.price).sum::<f64>() / 100_000.0;
        assert!((97.0..=103.0).contains(&mean_p), "mean price {mean_p}");
    }

    #[test]
    fn economics_invariants_hold_for_every_sample() {
        let products = sample_products(
            20_000,
            55,
            ProductFlags {
                dual: true,
                returns: true,
            },
        );
        for p in &products {
            p.econ.validate().unwrap();
            assert!(p.econ.cost <= p.econ.price);
            assert!(p.econ.return_value <= p.econ.cost);
            assert!(p.econ.expedited_cost - p.econ.regular_cost <= p.econ.penalty);
            assert!(p.econ.regular_cost >= 0.0);
            assert!(p.mu > 0.0 && p.nu > 0.0 && p.nu < 1.0);
        }
    }

    #[test]
    fn seed_determinism_for_products_and_traces() {
        let a = sample_products(50, 7, ProductFlags::default());
        let b = sample_products(50, 7, ProductFlags::default());
        assert_eq!(a, b);
        let ta = sample_trace(&a[13], 8, 16, 99);
        let tb = sample_trace(&b[13], 8, 16, 99);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 24);
        let other_seed = sample_trace(&a[13], 8, 16, 100);
        assert_ne!(ta, other_seed);
    }

    #[test]
    fn trace_mean_is_inside_clt_band() {
        let p = Product {
            id: 0,
            econ: EconStatics {
                price: 10.0,
                cost: 1.0,
                holding: 0.1,
                penalty: 1.0,
                expedited_cost: 1.0,
                regular_cost: 1.0,
                return_value: 0.0,
            },
            mu: 80.0,
            nu: 0.6,
        };
        let t = sample_trace(&p, 0, 40_000, 3);
        let mean = t.demands.iter().sum::<f64>() / t.len() as f64;
        let sigma = p.mu * p.nu / (t.len() as f64).sqrt();
        assert!((mean - p.mu).abs() < 3.0 * sigma, "mean={mean}");
    }

    #[test]
    fn trace_csv_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("invlab_datagen_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traces.csv");
        let traces = vec![
            DemandTrace {
                product_id: 1,
                demands: vec![1.5, 2.0, 0.0, 3.25, 4.0],
                features: vec![],
            },
            DemandTrace {
                product_id: 2,
                demands: vec![9.0, 8.0, 7.0, 6.5, 5.0],
                features: vec![],
            },
        ];
        save_traces(&path, &traces).unwrap();
        let back = load_traces(&path, None).unwrap();
        assert_eq!(back, traces);

        // missing period 3 for product 2 -> error names product and period
        let broken = dir.join("broken.csv");
        std::fs::write(
            &broken,
            "product_id,period_index,demand\n1,0,5\n1,1,5\n2,0,5\n2,1,5\n2,2,5\n1,2,5\n2,4,5\n",
        )
        .unwrap();
        let err = load_traces(&broken, None).unwrap_err().to_string();
        assert!(err.contains("product 2") && err.contains("period 3"), "{err}");

        let negative = dir.join("negative.csv");
        std::fs::write(&negative, "product_id,period_index,demand\n1,0,-2\n").unwrap();
        let err = load_traces(&negative, None).unwrap_err().to_string();
        assert!(err.contains("negative demand") && err.contains("row 2"), "{err}");
    }

    #[test]
    fn event_calendar_distances() {
        let cal = EventCalendar {
            event_periods: vec![10, 62],
        };
        assert_eq!(cal.distance(7), Some(3));
        assert_eq!(cal.distance(10), Some(0));
        assert_eq!(cal.distance(11), Some(51));
        assert_eq!(cal.distance(63), None);

        let dir = std::env::temp_dir().join("invlab_datagen_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("with_cal.csv");
        std::fs::write(&path, "product_id,period_index,demand\n5,0,1\n5,1,2\n5,2,3\n").unwrap();
        let traces = load_traces(&path, Some(&EventCalendar { event_periods: vec![2] })).unwrap();
        assert_eq!(traces[0].features.len(), 1);
        let scaled: Vec<f64> = vec![2.0 / 52.0, 1.0 / 52.0, 0.0];
        assert_eq!(traces[0].features[0], scaled);
        assert_eq!(traces[0].channels(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn products_roundtrip_through_csv(seed in 0u64..1000) {
            let products = sample_products(5, seed, ProductFlags { dual: true, returns: true });
            let dir = std::env::temp_dir().join("invlab_datagen_prop");
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join(format!("products_{seed}.csv"));
            save_products(&path, &products).unwrap();
            let back = load_products(&path).unwrap();
            std::fs::remove_file(&path).ok();
            prop_assert_eq!(back, products);
        }
    }
}
