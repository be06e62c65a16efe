//! Deployment spec-sheets: verified latent ranges per unit test, and the
//! run-time gate that checks an input against them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{UnitTest, VerificationReport};
use crate::bounds::{Norm, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{check_len, AuditError, Result};
use crate::linalg::{anchored_mean, Network, Role};

/// A unit test as declared in a test-suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDefinition {
    pub id: String,
    pub dims: Vec<usize>,
    pub norm: Norm,
    #[serde(default)]
    pub description: String,
}

impl TestDefinition {
    pub fn unit_test(&self, epsilon: f64) -> Result<UnitTest> {
        let pert = PerturbationSpec::new(self.dims.clone(), epsilon, self.norm)?;
        Ok(UnitTest::classification_invariance(self.id.clone(), pert).with_description(self.description.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub tests: Vec<TestDefinition>,
}

impl TestSuite {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tests {
            if !seen.insert(t.id.as_str()) {
                return Err(AuditError::Config(format!("duplicate unit test id `{}`", t.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsPoint {
    pub epsilon: f64,
    pub verified_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimRange {
    pub dim: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetEntry {
    pub test_id: String,
    pub dims: Vec<usize>,
    pub norm: Norm,
    pub eps_table: Vec<EpsPoint>,
    /// Empty when no radius met the threshold.
    pub global_range: Vec<DimRange>,
    /// Radius at which `global_range` was computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operating_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSheet {
    pub model_id: String,
    pub encoder_id: String,
    pub created_unix_seconds: u64,
    pub entries: Vec<SheetEntry>,
}

/// Short content hash of a network's JSON form.
pub fn network_id(net: &Network) -> Result<String> {
    let digest = Sha256::digest(net.to_json()?.as_bytes());
    Ok(hex::encode(&digest[..8]))
}

/// `(mean(lows) − σ(lows), mean(highs) + σ(highs))` with population σ.
pub fn aggregate_global_bounds(lows: &[f64], highs: &[f64]) -> Result<(f64, f64)> {
    if lows.is_empty() {
        return Err(AuditError::Argument("no per-sample ranges to aggregate".into()));
    }
    check_len("per-sample upper ends", lows.len(), highs.len())?;
    if let Some(i) = (0..lows.len()).find(|&i| !(lows[i] <= highs[i])) {
        return Err(AuditError::Argument(format!(
            "per-sample range {i} is inverted: [{}, {}]",
            lows[i], highs[i]
        )));
    }
    let stats = |v: &[f64]| {
        let m = anchored_mean(v);
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    };
    let (ml, sl) = stats(lows);
    let (mh, sh) = stats(highs);
    Ok((ml - sl, mh + sh))
}

pub struct SheetInputs<'a> {
    pub model: &'a Network,
    pub encoder: &'a Network,
    pub tests: &'a [TestDefinition],
    pub reports: &'a [VerificationReport],
    /// Training latents.
    pub train_set: &'a Dataset,
    pub threshold: f64,
    pub created_unix_seconds: u64,
}

/// Builds one entry per test from its reports and the training latents.
///
/// The global range uses the largest radius whose verified error is at most
/// `threshold`; per-sample ranges are `z_j ± ε` on each perturbed dim.
pub fn build_spec_sheet(inputs: &SheetInputs<'_>) -> Result<SpecSheet> {
    let SheetInputs {
        model,
        encoder,
        tests,
        reports,
        train_set,
        threshold,
        created_unix_seconds,
    } = *inputs;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(AuditError::Argument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    check_len("training latent width", model.input_dim(), train_set.dim())?;
    let mut entries = Vec::with_capacity(tests.len());
    for test in tests {
        PerturbationSpec::new(test.dims.clone(), 0.0, test.norm)?.check_width(train_set.dim())?;
        let mut eps_table: Vec<EpsPoint> = reports
            .iter()
            .filter(|r| r.test_id == test.id)
            .map(|r| EpsPoint {
                epsilon: r.epsilon,
                verified_error: r.verified_error,
            })
            .collect();
        if eps_table.is_empty() {
            return Err(AuditError::Argument(format!("no verification report for test `{}`", test.id)));
        }
        eps_table.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        let operating = eps_table
            .iter()
            .filter(|p| p.verified_error <= threshold)
            .map(|p| p.epsilon)
            .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
        let (global_range, flag) = match operating {
            Some(eps) => {
                let mut ranges = Vec::with_capacity(test.dims.len());
                for &j in &test.dims {
                    let lows: Vec<f64> = train_set.iter().map(|(z, _)| z[j] - eps).collect();
                    let highs: Vec<f64> = train_set.iter().map(|(z, _)| z[j] + eps).collect();
                    let (lower, upper) = aggregate_global_bounds(&lows, &highs)?;
                    ranges.push(DimRange { dim: j, lower, upper });
                }
                (ranges, None)
            }
            None => (
                Vec::new(),
                Some(format!("no radius reaches verified error <= {threshold}")),
            ),
        };
        entries.push(SheetEntry {
            test_id: test.id.clone(),
            dims: test.dims.clone(),
            norm: test.norm,
            eps_table,
            global_range,
            operating_epsilon: operating,
            flag,
        });
    }
    Ok(SpecSheet {
        model_id: network_id(model)?,
        encoder_id: network_id(encoder)?,
        created_unix_seconds,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub dim: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub accept: bool,
    pub test_id: String,
    pub checks: Vec<GateCheck>,
}

impl SpecSheet {
    pub fn entry(&self, test_id: &str) -> Result<&SheetEntry> {
        self.entries
            .iter()
            .find(|e| e.test_id == test_id)
            .ok_or_else(|| AuditError::UnknownTest(test_id.to_string()))
    }
}

/// Encodes `x` and checks it against the sheet's range for `test_id`.
pub fn gate(encoder: &Network, sheet: &SpecSheet, x: &[f64], test_id: &str) -> Result<GateDecision> {
    if encoder.role() != Role::Encoder {
        return Err(AuditError::Argument("gate expects an encoder network".into()));
    }
    let id = network_id(encoder)?;
    if id != sheet.encoder_id {
        return Err(AuditError::Structure(format!(
            "encoder {id} does not match the sheet's encoder {}",
            sheet.encoder_id
        )));
    }
    sheet.entry(test_id)?;
    check_len("gate input", encoder.input_dim(), x.len())?;
    gate_latent(sheet, &encoder.logits(x)?, test_id)
}

/// Gate for an input that is already a latent code.
///
/// Membership is closed on both ends; an entry without a range rejects.
pub fn gate_latent(sheet: &SpecSheet, z: &[f64], test_id: &str) -> Result<GateDecision> {
    let entry = sheet.entry(test_id)?;
    let mut checks = Vec::with_capacity(entry.global_range.len());
    for r in &entry.global_range {
        let value = *z.get(r.dim).ok_or(AuditError::Shape {
            context: "gate latent",
            expected: r.dim + 1,
            actual: z.len(),
        })?;
        checks.push(GateCheck {
            dim: r.dim,
            value,
            lower: r.lower,
            upper: r.upper,
        });
    }
    let accept = !checks.is_empty() && checks.iter().all(|c| c.lower <= c.value && c.value <= c.upper);
    Ok(GateDecision {
        accept,
        test_id: test_id.to_string(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Engine;
    use crate::linalg::{Activation, Layer, Matrix};
    use proptest::prelude::*;

    fn report(id: &str, eps: f64, ve: f64) -> VerificationReport {
        VerificationReport {
            test_id: id.into(),
            epsilon: eps,
            engine: Engine::Ibp,
            n_samples: 1,
            n_clean_errors: 0,
            n_unverified: 0,
            verified_error: ve,
            samples: vec![],
        }
    }

    fn identity(role: Role, d: usize) -> Network {
        let layer = Layer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap();
        Network::new(role, vec![layer]).unwrap()
    }

    fn two_sample_sheet() -> SpecSheet {
        let train = Dataset::new(vec![vec![1.0, 9.0], vec![2.0, -3.0]], vec![0, 1]).unwrap();
        let tests = vec![TestDefinition {
            id: "dim0".into(),
            dims: vec![0],
            norm: Norm::Linf,
            description: String::new(),
        }];
        let reports = vec![report("dim0", 1.0, 0.9), report("dim0", 0.5, 0.2), report("dim0", 0.25, 0.1)];
        build_spec_sheet(&SheetInputs {
            model: &identity(Role::Classifier, 2),
            encoder: &identity(Role::Encoder, 2),
            tests: &tests,
            reports: &reports,
            train_set: &train,
            threshold: 0.5,
            created_unix_seconds: 0,
        })
        .unwrap()
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_global_bounds(&[0.5, 1.5], &[1.5, 2.5]).unwrap(), (0.5, 2.5));
        assert_eq!(aggregate_global_bounds(&[0.3], &[0.7]).unwrap(), (0.3, 0.7));
        assert_eq!(aggregate_global_bounds(&[0.1; 7], &[0.9; 7]).unwrap(), (0.1, 0.9));
        assert!(aggregate_global_bounds(&[], &[]).is_err());
        assert!(aggregate_global_bounds(&[1.0], &[0.0]).is_err());
        assert!(aggregate_global_bounds(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn sheet_uses_largest_passing_radius() {
        let sheet = two_sample_sheet();
        let e = &sheet.entries[0];
        assert_eq!(e.eps_table.iter().map(|p| p.epsilon).collect::<Vec<_>>(), vec![0.25, 0.5, 1.0]);
        assert_eq!(e.operating_epsilon, Some(0.5));
        assert_eq!(e.global_range, vec![DimRange { dim: 0, lower: 0.5, upper: 2.5 }]);
        assert_eq!(sheet.model_id.len(), 16);
        assert_ne!(sheet.model_id, sheet.encoder_id);
    }

    #[test]
    fn unmet_threshold_is_flagged() {
        let train = Dataset::new(vec![vec![1.0]], vec![0]).unwrap();
        let tests = vec![TestDefinition { id: "a".into(), dims: vec![0], norm: Norm::L2, description: String::new() }];
        let reports = vec![report("a", 0.5, 0.9)];
        let sheet = build_spec_sheet(&SheetInputs {
            model: &identity(Role::Classifier, 1),
            encoder: &identity(Role::Encoder, 1),
            tests: &tests,
            reports: &reports,
            train_set: &train,
            threshold: 0.5,
            created_unix_seconds: 0,
        })
        .unwrap();
        assert!(sheet.entries[0].global_range.is_empty() && sheet.entries[0].flag.is_some());
        assert!(!gate_latent(&sheet, &[1.0], "a").unwrap().accept);
    }

    #[test]
    fn empty_suite_is_valid() {
        let train = Dataset::new(vec![vec![1.0]], vec![0]).unwrap();
        let sheet = build_spec_sheet(&SheetInputs {
            model: &identity(Role::Classifier, 1),
            encoder: &identity(Role::Encoder, 1),
            tests: &[],
            reports: &[],
            train_set: &train,
            threshold: 0.5,
            created_unix_seconds: 0,
        })
        .unwrap();
        assert!(sheet.entries.is_empty());
        let back: SpecSheet = serde_json::from_str(&serde_json::to_string(&sheet).unwrap()).unwrap();
        assert_eq!(back, sheet);
    }

    #[test]
    fn gate_decisions() {
        let sheet = two_sample_sheet();
        let enc = identity(Role::Encoder, 2);
        assert!(gate(&enc, &sheet, &[1.0, 100.0], "dim0").unwrap().accept);
        assert!(!gate(&enc, &sheet, &[3.0, 0.0], "dim0").unwrap().accept);
        assert!(gate(&enc, &sheet, &[2.5, 0.0], "dim0").unwrap().accept);
        assert!(gate(&enc, &sheet, &[0.5, 0.0], "dim0").unwrap().accept);
        assert!(matches!(gate(&enc, &sheet, &[1.0, 0.0], "nope"), Err(AuditError::UnknownTest(_))));
        assert!(gate(&enc, &sheet, &[1.0], "dim0").is_err());
        let other = Network::new(
            Role::Encoder,
            vec![Layer::new(Matrix::identity(2), vec![0.0, 1.0], Activation::Identity).unwrap()],
        )
        .unwrap();
        assert!(matches!(gate(&other, &sheet, &[1.0, 0.0], "dim0"), Err(AuditError::Structure(_))));
    }

    #[test]
    fn duplicating_a_central_sample_can_shrink() {
        // mean ± σ is not monotone under duplication: σ drops when a sample
        // near the mean is repeated
        let (lo, _) = aggregate_global_bounds(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        let (lo2, _) = aggregate_global_bounds(&[0.0, 1.0, 1.0, 2.0], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        assert!(lo2 > lo);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = TestDefinition { id: "a".into(), dims: vec![0], norm: Norm::L2, description: String::new() };
        assert!(TestSuite { tests: vec![t.clone(), t] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn aggregation_contains_means(pairs in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..40)) {
            let lows: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let highs: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let (lo, hi) = aggregate_global_bounds(&lows, &highs).unwrap();
            let ml = lows.iter().sum::<f64>() / lows.len() as f64;
            let mh = highs.iter().sum::<f64>() / highs.len() as f64;
            prop_assert!(lo <= ml + 1e-9 && hi >= mh - 1e-9);
            prop_assert!(lo <= hi);
        }

        #[test]
        fn duplicating_into_a_uniform_set_keeps_the_range(low in -10.0f64..10.0, width in 0.0f64..5.0, n in 1usize..20) {
            let lows = vec![low; n];
            let highs = vec![low + width; n];
            let before = aggregate_global_bounds(&lows, &highs).unwrap();
            let after = aggregate_global_bounds(&[lows.clone(), vec![low]].concat(), &[highs.clone(), vec![low + width]].concat()).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn gate_is_pure(z in -5.0f64..5.0) {
            let sheet = two_sample_sheet();
            let a = gate_latent(&sheet, &[z, 0.0], "dim0").unwrap();
            let b = gate_latent(&sheet, &[z, 0.0], "dim0").unwrap();
            prop_assert_eq!(a.accept, (0.5..=2.5).contains(&z));
            prop_assert_eq!(a, b);
        }
    }
}
