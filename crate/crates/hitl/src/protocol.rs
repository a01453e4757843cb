//! The four-group validation experiment: pick test samples the baseline gets
//! wrong, add them with their true labels to the training set, retrain, and
//! re-predict them.

use std::collections::HashSet;
use std::fmt::Write as _;

use idc_core::data::{item_seed, Samples};
use idc_core::metrics::percent;
use idc_core::model::{build_model, evaluate, train, Model, TrainError, TrainingConfig};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(
        "not enough misclassified test samples: found {fp_found} false positives and {fn_found} false negatives, \
         need {n_fp} and {n_fn}"
    )]
    Insufficient {
        fp_found: usize,
        fn_found: usize,
        n_fp: usize,
        n_fn: usize,
    },
    #[error("groups must be at least 1")]
    NoGroups,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] idc_core::model::ModelError),
}

/// Indices into the test set: `n_fp` false positives followed by `n_fn` false negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl Selection {
    pub fn indices(&self) -> Vec<usize> {
        self.false_positives.iter().chain(&self.false_negatives).copied().collect()
    }
}

/// Uniformly samples (seeded) `n_fp` false positives and `n_fn` false negatives.
pub fn select_misclassified(
    model: &Model,
    test: &Samples,
    n_fp: usize,
    n_fn: usize,
    seed: u64,
) -> Result<Selection, ProtocolError> {
    let preds = evaluate(model, test)?.predictions;
    let mut fps = Vec::new();
    let mut fns = Vec::new();
    for (i, (p, &t)) in preds.iter().zip(&test.labels).enumerate() {
        match (p.label, t) {
            (1, 0) => fps.push(i),
            (0, 1) => fns.push(i),
            _ => {}
        }
    }
    if fps.len() < n_fp || fns.len() < n_fn {
        return Err(ProtocolError::Insufficient {
            fp_found: fps.len(),
            fn_found: fns.len(),
            n_fp,
            n_fn,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pool: &[usize], n: usize| {
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, n).copied().collect();
        chosen.sort_unstable();
        chosen
    };
    Ok(Selection {
        false_positives: pick(&fps, n_fp),
        false_negatives: pick(&fns, n_fn),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub groups: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub seed: u64,
    /// Retraining schedule for each group.
    pub training: TrainingConfig,
    /// Start each group from the baseline weights rather than a fresh initialization.
    pub warm_start: bool,
    /// Times each corrected sample is added to the training set.
    pub duplication: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            n_fp: 20,
            n_fn: 20,
            seed: 0,
            training: TrainingConfig::default(),
            warm_start: true,
            duplication: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGroupResult {
    pub group_id: usize,
    pub sample_count: usize,
    pub correct_before: usize,
    pub accuracy_before: f64,
    pub correct_after: usize,
    pub accuracy_after: f64,
    /// Ids of the corrected samples.
    pub sample_ids: Vec<String>,
    /// Held-out accuracy (excluding the group's samples) of the retrained model.
    pub heldout_accuracy_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ProtocolConfig,
    pub groups: Vec<ExperimentGroupResult>,
}

impl ValidationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,samples,correct_before,accuracy_before,correct_after,accuracy_after\n");
        for g in &self.groups {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                g.group_id,
                g.sample_count,
                g.correct_before,
                percent(g.accuracy_before),
                g.correct_after,
                percent(g.accuracy_after)
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("Group   Before    After\n");
        for g in &self.groups {
            writeln!(
                s,
                "{:<5} {:>7}% {:>7}%",
                g.group_id,
                percent(g.accuracy_before),
                percent(g.accuracy_after)
            )
            .unwrap();
        }
        s
    }
}

/// Seed of group `g` (1-based) derived from the master seed.
pub fn group_seed(master: u64, group: usize) -> u64 {
    item_seed(master, "validation-group", group as u32)
}

/// Runs every group independently from the same baseline.
pub fn run_validation_protocol(
    baseline: &Model,
    train_set: &Samples,
    test: &Samples,
    cfg: &ProtocolConfig,
) -> Result<ValidationReport, ProtocolError> {
    run_validation_protocol_with(baseline, train_set, test, cfg, |_| {})
}

pub fn run_validation_protocol_with(
    baseline: &Model,
    train_set: &Samples,
    test: &Samples,
    cfg: &ProtocolConfig,
    mut on_group: impl FnMut(&ExperimentGroupResult),
) -> Result<ValidationReport, ProtocolError> {
    if cfg.groups == 0 {
        return Err(ProtocolError::NoGroups);
    }
    let mut groups = Vec::with_capacity(cfg.groups);
    for group_id in 1..=cfg.groups {
        let seed = group_seed(cfg.seed, group_id);
        let selection = select_misclassified(baseline, test, cfg.n_fp, cfg.n_fn, seed)?;
        let picked = selection.indices();
        let corrected = test.subset(&picked);
        let correct_before = count_correct(baseline, &corrected)?;

        let mut extended = train_set.clone();
        for _ in 0..cfg.duplication.max(1) {
            extended.extend(&corrected).expect("same sample shape");
        }
        let picked_set: HashSet<usize> = picked.iter().copied().collect();
        let heldout_idx: Vec<usize> = (0..test.len()).filter(|i| !picked_set.contains(i)).collect();
        let heldout = test.subset(&heldout_idx);

        let mut model = if cfg.warm_start {
            baseline.clone()
        } else {
            build_model(baseline.config(), seed)?
        };
        let training = TrainingConfig {
            seed,
            ..cfg.training.clone()
        };
        let outcome = train(&mut model, &extended, &heldout, &training)?;
        let correct_after = count_correct(&outcome.best, &corrected)?;
        let n = corrected.len();
        let result = ExperimentGroupResult {
            group_id,
            sample_count: n,
            correct_before,
            accuracy_before: correct_before as f64 / n as f64,
            correct_after,
            accuracy_after: correct_after as f64 / n as f64,
            sample_ids: corrected.ids.clone(),
            heldout_accuracy_after: outcome.history.best().map_or(0.0, |e| e.test_accuracy),
        };
        log::info!(
            "group {group_id}: {}/{n} correct after retraining",
            result.correct_after
        );
        on_group(&result);
        groups.push(result);
    }
    Ok(ValidationReport {
        config: cfg.clone(),
        groups,
    })
}

fn count_correct(model: &Model, samples: &Samples) -> Result<usize, ProtocolError> {
    let ev = evaluate(model, samples)?;
    Ok(ev.predictions.iter().zip(&samples.labels).filter(|(p, &t)| p.label == t).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use idc_core::model::{ModelConfig, Prediction};

    fn noisy(n: usize, seed: u64) -> Samples {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Samples::new(&[4]);
        for i in 0..n {
            let label = (i % 2) as u8;
            let shift = if label == 1 { 0.4 } else { -0.4 };
            let v: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0) + shift).collect();
            s.push(format!("s{i}"), label, &v).unwrap();
        }
        s
    }

    #[test]
    fn selection_is_misclassified_and_seeded() {
        let model = build_model(&ModelConfig::feature_file(4), 3).unwrap();
        let test = noisy(400, 1);
        let sel = select_misclassified(&model, &test, 5, 5, 9).unwrap();
        assert_eq!(sel, select_misclassified(&model, &test, 5, 5, 9).unwrap());
        let preds: Vec<Prediction> = evaluate(&model, &test).unwrap().predictions;
        for &i in &sel.false_positives {
            assert_eq!((preds[i].label, test.labels[i]), (1, 0));
        }
        for &i in &sel.false_negatives {
            assert_eq!((preds[i].label, test.labels[i]), (0, 1));
        }
        assert_eq!(count_correct(&model, &test.subset(&sel.indices())).unwrap(), 0);
    }

    #[test]
    fn shortfall_names_counts() {
        let model = build_model(&ModelConfig::feature_file(4), 3).unwrap();
        let test = noisy(20, 1);
        match select_misclassified(&model, &test, 50, 1, 0) {
            Err(ProtocolError::Insufficient { fp_found, n_fp: 50, .. }) => assert!(fp_found < 50),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_shapes() {
        let g = ExperimentGroupResult {
            group_id: 1,
            sample_count: 40,
            correct_before: 0,
            accuracy_before: 0.0,
            correct_after: 31,
            accuracy_after: 0.775,
            sample_ids: vec![],
            heldout_accuracy_after: 0.9,
        };
        let r = ValidationReport {
            config: ProtocolConfig::default(),
            groups: vec![g],
        };
        assert_eq!(r.to_csv().lines().nth(1).unwrap(), "1,40,0,0.00,31,77.50");
        assert!(r.to_text().contains("77.50%"));
    }
}
