//! TOML scenario files.
//!
//! ```toml
//! name = "example"
//! tau = 1.0
//! n = 1
//! m = 1
//!
//! [A]
//! kind = "path-functional"
//! base = [[-1.0]]
//! amp = [[0.5]]
//! scale = 1.0
//!
//! [B]
//! kind = "constant"
//! value = [[1.0]]
//!
//! [Q]
//! kind = "deterministic-periodic"
//! base = [[1.0]]
//! sin = [[0.3]]
//! cos = [[0.0]]
//! harmonic = 1
//!
//! [R]
//! kind = "constant"
//! value = [[1.0]]
//! ```
//!
//! `A`, `B`, `Q` and `R` are required. `C`, `b`, `sigma`, `S`, `q` and `rho`
//! default to zero; `stabilizer` is optional.

use super::{CoefficientFn, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_harmonic() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoeffSpec {
    Constant {
        value: Mat,
    },
    DeterministicPeriodic {
        base: Mat,
        sin: Mat,
        cos: Mat,
        #[serde(default = "default_harmonic")]
        harmonic: u32,
    },
    /// `base + amp·tanh(scale·(W_t − W_{kτ}))`.
    PathFunctional {
        base: Mat,
        amp: Mat,
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub tau: f64,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: CoeffSpec,
    #[serde(rename = "B")]
    pub b: CoeffSpec,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<CoeffSpec>,
    #[serde(rename = "b", default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<CoeffSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<CoeffSpec>,
    #[serde(rename = "Q")]
    pub q: CoeffSpec,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s: Option<CoeffSpec>,
    #[serde(rename = "R")]
    pub r: CoeffSpec,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    pub q_lin: Option<CoeffSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<CoeffSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilizer: Option<CoeffSpec>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ScenarioFormat(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ScenarioFormat(e.to_string()))
    }

    pub fn build(&self) -> Result<PeriodicCoefficientSet> {
        let (n, m, tau) = (self.n, self.m, self.tau);
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::ScenarioFormat(format!("tau must be positive, got {tau}")));
        }
        if n == 0 || m == 0 || n > crate::linalg::MAX_DIM || m > crate::linalg::MAX_DIM {
            return Err(Error::ScenarioFormat(format!(
                "dimensions n={n}, m={m} must lie in 1..={}",
                crate::linalg::MAX_DIM
            )));
        }
        let opt = |spec: &Option<CoeffSpec>, rows: usize, cols: usize| -> Result<CoefficientFn> {
            match spec {
                Some(s) => CoefficientFn::from_spec(s, tau),
                None => Ok(CoefficientFn::zeros(rows, cols)),
            }
        };
        let set = PeriodicCoefficientSet {
            name: self.name.clone(),
            tau,
            n,
            m,
            a: CoefficientFn::from_spec(&self.a, tau)?,
            b: CoefficientFn::from_spec(&self.b, tau)?,
            c: opt(&self.c, n, n)?,
            drift: opt(&self.drift, n, 1)?,
            sigma: opt(&self.sigma, n, 1)?,
            q: CoefficientFn::from_spec(&self.q, tau)?,
            s: opt(&self.s, m, n)?,
            r: CoefficientFn::from_spec(&self.r, tau)?,
            q_lin: opt(&self.q_lin, n, 1)?,
            rho: opt(&self.rho, m, 1)?,
            stabilizer: match &self.stabilizer {
                Some(s) => Some(CoefficientFn::from_spec(s, tau)?),
                None => None,
            },
        };
        set.validate_shapes()?;
        Ok(set)
    }

    /// Describes a set; fails if any coefficient is a custom evaluator.
    pub fn from_set(set: &PeriodicCoefficientSet) -> Result<Self> {
        let need = |what: &str, f: &CoefficientFn| {
            f.spec().ok_or_else(|| {
                Error::ScenarioFormat(format!("coefficient {what} has no declarative form"))
            })
        };
        Ok(ScenarioFile {
            name: set.name.clone(),
            tau: set.tau,
            n: set.n,
            m: set.m,
            a: need("A", &set.a)?,
            b: need("B", &set.b)?,
            c: Some(need("C", &set.c)?),
            drift: Some(need("b", &set.drift)?),
            sigma: Some(need("sigma", &set.sigma)?),
            q: need("Q", &set.q)?,
            s: Some(need("S", &set.s)?),
            r: need("R", &set.r)?,
            q_lin: Some(need("q", &set.q_lin)?),
            rho: Some(need("rho", &set.rho)?),
            stabilizer: match &set.stabilizer {
                Some(f) => Some(need("stabilizer", f)?),
                None => None,
            },
        })
    }
}

/// Loads a scenario by catalog name, or from a TOML file when `name_or_path`
/// names an existing file.
pub fn resolve_scenario(name_or_path: &str) -> Result<PeriodicCoefficientSet> {
    let p = Path::new(name_or_path);
    if p.is_file() {
        return ScenarioFile::load(p)?.build();
    }
    super::builtin_scenario(name_or_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: &str = r#"
name = "example"
tau = 1.0
n = 1
m = 1

[A]
kind = "path-functional"
base = [[-1.0]]
amp = [[0.5]]
scale = 1.0

[B]
kind = "constant"
value = [[1.0]]

[Q]
kind = "deterministic-periodic"
base = [[1.0]]
sin = [[0.3]]
cos = [[0.0]]

[R]
kind = "constant"
value = [[1.0]]
"#;

    #[test]
    fn parses_documented_example() {
        let f = ScenarioFile::parse(EXAMPLE).unwrap();
        assert!(f.c.is_none());
        let set = f.build().unwrap();
        assert_eq!(set.n, 1);
        assert!(!set.is_deterministic());
        assert_eq!(set.sigma.constant_value(), Some(Mat::zeros(1, 1)));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        let bad = EXAMPLE.replace("scale = 1.0", "scale = 1.0\nextra = 2");
        assert!(matches!(ScenarioFile::parse(&bad), Err(Error::ScenarioFormat(_))));
        let bad = EXAMPLE.replace("n = 1", "n = 2");
        assert!(ScenarioFile::parse(&bad).unwrap().build().is_err());
        let bad = EXAMPLE.replace("value = [[1.0]]\n\n[Q]", "value = [[1.0], [2.0, 3.0]]\n\n[Q]");
        assert!(ScenarioFile::parse(&bad).is_err());
    }

    #[test]
    fn catalog_entries_round_trip() {
        for name in crate::coefficients::catalog_names() {
            let set = crate::coefficients::builtin_scenario(name).unwrap();
            let file = ScenarioFile::from_set(&set).unwrap();
            let text = file.to_toml().unwrap();
            let back = ScenarioFile::parse(&text).unwrap();
            assert_eq!(back, file, "{name}");
            back.build().unwrap();
        }
    }

    fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| {
            let rows_v: Vec<Vec<f64>> = v.chunks(cols).map(|c| c.to_vec()).collect();
            Mat::from_rows(&rows_v)
        })
    }

    fn spec_strategy(rows: usize, cols: usize) -> impl Strategy<Value = CoeffSpec> {
        prop_oneof![
            mat_strategy(rows, cols).prop_map(|value| CoeffSpec::Constant { value }),
            (
                mat_strategy(rows, cols),
                mat_strategy(rows, cols),
                mat_strategy(rows, cols),
                1u32..4
            )
                .prop_map(|(base, sin, cos, harmonic)| CoeffSpec::DeterministicPeriodic {
                    base,
                    sin,
                    cos,
                    harmonic
                }),
            (mat_strategy(rows, cols), mat_strategy(rows, cols), -3.0f64..3.0)
                .prop_map(|(base, amp, scale)| CoeffSpec::PathFunctional { base, amp, scale }),
        ]
    }

    fn file_strategy() -> impl Strategy<Value = ScenarioFile> {
        (1usize..=3, 1usize..=2, 0.1f64..5.0).prop_flat_map(|(n, m, tau)| {
            (
                spec_strategy(n, n),
                spec_strategy(n, m),
                proptest::option::of(spec_strategy(n, n)),
                proptest::option::of(spec_strategy(n, 1)),
                spec_strategy(n, n),
                proptest::option::of(spec_strategy(m, n)),
                spec_strategy(m, m),
                proptest::option::of(spec_strategy(m, 1)),
            )
                .prop_map(move |(a, b, c, sigma, q, s, r, rho)| ScenarioFile {
                    name: format!("p{n}{m}"),
                    tau,
                    n,
                    m,
                    a,
                    b,
                    c,
                    drift: None,
                    sigma,
                    q,
                    s,
                    r,
                    q_lin: None,
                    rho,
                    stabilizer: None,
                })
        })
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(file in file_strategy()) {
            let text = file.to_toml().unwrap();
            let once = ScenarioFile::parse(&text).unwrap();
            prop_assert_eq!(&once, &file);
            let twice = ScenarioFile::parse(&once.to_toml().unwrap()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
