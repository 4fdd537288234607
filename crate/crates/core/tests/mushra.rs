use std::collections::BTreeMap;
use std::path::PathBuf;

use bwe_core::mushra::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::statistics::Statistics;

const CONDITIONS: [&str; 6] = ["hidden_ref", "lp_anchor", "wavenet_gsm", "gsm_fr", "amr_wb", "sinc_8k"];

fn sources(utterances: usize) -> Vec<TrialSource> {
    (0..utterances)
        .map(|u| TrialSource {
            utterance: format!("utt{u:02}"),
            reference: PathBuf::from(format!("ref/utt{u:02}.wav")),
            conditions: CONDITIONS
                .iter()
                .map(|c| (c.to_string(), PathBuf::from(format!("{c}/utt{u:02}.wav"))))
                .collect(),
        })
        .collect()
}

fn definition(utterances: usize, seed: u64) -> TestDefinition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_test("t1", "hidden_ref", "lp_anchor", &sources(utterances), &mut rng).unwrap()
}

fn store(def: TestDefinition) -> MushraStore {
    let mut s = MushraStore::new();
    s.add_test(def).unwrap();
    s
}

fn condition_of(def: &TestDefinition, token: &str) -> String {
    def.trials
        .iter()
        .flat_map(|t| &t.stimuli)
        .find(|s| s.token == token)
        .unwrap()
        .condition
        .clone()
}

/// Scores every blind token of the trial at `index` with `score(condition)`.
fn submission(def: &TestDefinition, view: &TrialView, score: impl Fn(&str) -> u64) -> ScoreSubmission {
    let TrialView::Trial { stimuli, .. } = view else {
        panic!("expected a trial, got {view:?}");
    };
    ScoreSubmission {
        scores: stimuli
            .iter()
            .map(|t| (t.clone(), serde_json::json!(score(&condition_of(def, t)))))
            .collect(),
    }
}

#[test]
fn built_test_has_one_stimulus_per_condition_and_unique_tokens() {
    let def = definition(8, 1);
    assert_eq!(def.trials.len(), 8);
    let mut tokens = std::collections::HashSet::new();
    for t in &def.trials {
        assert_eq!(t.stimuli.len(), 6);
        assert_eq!(t.stimuli.iter().filter(|s| s.condition == "hidden_ref").count(), 1);
        assert_eq!(t.stimuli.iter().filter(|s| s.condition == "lp_anchor").count(), 1);
        assert!(tokens.insert(t.reference.token.clone()));
        for s in &t.stimuli {
            assert_eq!(s.token.len(), 32);
            assert!(tokens.insert(s.token.clone()));
        }
    }
}

#[test]
fn definitions_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.json");
    let def = definition(3, 2);
    def.save(&path).unwrap();
    assert_eq!(TestDefinition::load(&path).unwrap(), def);
}

#[test]
fn malformed_definitions_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dup = sources(2);
    dup[1].conditions[2].0 = "hidden_ref".into();
    assert!(build_test("t", "hidden_ref", "lp_anchor", &dup, &mut rng).is_err());
    assert!(build_test("t", "missing", "lp_anchor", &sources(2), &mut rng).is_err());

    let mut def = definition(2, 3);
    def.trials[1].stimuli[0].token = def.trials[0].stimuli[0].token.clone();
    assert!(matches!(def.validate(), Err(MushraError::Definition(_))));
    let mut def = definition(2, 3);
    def.trials[0].stimuli.pop();
    assert!(def.validate().is_err());
}

#[test]
fn sessions_are_replayable_and_independent() {
    let def = definition(8, 4);
    let a = Session::new("alpha", &def);
    assert_eq!(a, Session::new("alpha", &def));
    let b = Session::new("beta", &def);
    assert_ne!((a.trial_order.clone(), a.stimulus_order.clone()), (b.trial_order, b.stimulus_order));
    let mut order = a.trial_order.clone();
    order.sort();
    assert_eq!(order, (0..8).collect::<Vec<_>>());
}

#[test]
fn unknown_ids_are_not_found_errors() {
    let mut s = store(definition(2, 5));
    let err = s.create_session_with_id("nope", "s1").unwrap_err();
    assert!(err.is_not_found() && err.is_client_error());
    assert!(s.get_trial("ghost", 0).unwrap_err().is_not_found());
    assert!(s.token_path("0000").unwrap_err().is_not_found());
    assert!(s.aggregate("nope").unwrap_err().is_not_found());
}

#[test]
fn trial_views_are_blind_and_end_with_a_completion_marker() {
    let def = definition(8, 6);
    let mut s = store(def.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let session = s.create_session("t1", &mut rng).unwrap();
    for i in 0..8 {
        let view = s.get_trial(&session.session_id, i).unwrap();
        let body = serde_json::to_string(&view).unwrap();
        for label in CONDITIONS {
            assert!(!body.contains(label), "{label} leaked in {body}");
        }
        for t in &def.trials {
            assert!(!body.contains(&t.utterance));
        }
        let TrialView::Trial { stimuli, reference, total, .. } = &view else {
            panic!("{view:?}");
        };
        assert_eq!((stimuli.len(), *total), (6, 8));
        let trial = def.trials.iter().find(|t| &t.reference.token == reference).unwrap();
        assert!(stimuli.iter().all(|t| trial.stimuli.iter().any(|s| &s.token == t)));
    }
    let end = s.get_trial(&session.session_id, 8).unwrap();
    assert_eq!(end, TrialView::Complete { session_id: session.session_id.clone(), total: 8 });
    let v: serde_json::Value = serde_json::to_value(&end).unwrap();
    assert_eq!(v["status"], "complete");
}

#[test]
fn score_validation_names_the_offending_token() {
    let def = definition(2, 7);
    let mut s = store(def.clone());
    s.create_session_with_id("t1", "rater").unwrap();
    let view = s.get_trial("rater", 0).unwrap();

    let mut sub = submission(&def, &view, |_| 50);
    let (token, _) = sub.scores.iter().next().map(|(k, v)| (k.clone(), v.clone())).unwrap();
    sub.scores.insert(token.clone(), serde_json::json!(101));
    match s.submit_scores("rater", 0, &sub).unwrap_err() {
        MushraError::Validation(m) => assert!(m.contains(&token), "{m}"),
        e => panic!("{e:?}"),
    }

    let mut sub = submission(&def, &view, |_| 50);
    sub.scores.remove(&token);
    match s.submit_scores("rater", 0, &sub).unwrap_err() {
        MushraError::Validation(m) => assert!(m.contains(&token), "{m}"),
        e => panic!("{e:?}"),
    }

    let mut sub = submission(&def, &view, |_| 50);
    sub.scores.insert(token.clone(), serde_json::json!(12.5));
    assert!(s.submit_scores("rater", 0, &sub).unwrap_err().is_client_error());

    let mut sub = submission(&def, &view, |_| 50);
    sub.scores.insert("feedface".into(), serde_json::json!(3));
    assert!(s.submit_scores("rater", 0, &sub).is_err());

    assert!(s.ratings().is_empty());
    let sub = submission(&def, &view, |_| 50);
    s.submit_scores("rater", 0, &sub).unwrap();
    assert!(matches!(s.submit_scores("rater", 0, &sub), Err(MushraError::AlreadyRated(0))));
    assert!(matches!(
        s.submit_scores("rater", 2, &sub),
        Err(MushraError::TrialOutOfRange { index: 2, trials: 2 })
    ));
    let TrialView::Trial { rated, .. } = s.get_trial("rater", 0).unwrap() else { panic!() };
    assert!(rated);
}

#[test]
fn ratings_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("ratings.jsonl");
    let def = definition(4, 8);
    let n = 5;
    {
        let mut s = store(def.clone());
        s.attach_journal(&journal).unwrap();
        s.create_session_with_id("t1", "a").unwrap();
        s.create_session_with_id("t1", "b").unwrap();
        for (sid, i) in [("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 3)] {
            let view = s.get_trial(sid, i).unwrap();
            s.submit_scores(sid, i, &submission(&def, &view, |_| 70)).unwrap();
        }
        assert_eq!(s.ratings().len(), n);
    }
    let lines = std::fs::read_to_string(&journal).unwrap();
    let ratings = lines.lines().filter(|l| l.contains("\"kind\":\"rating\"")).count();
    assert_eq!(ratings, n);

    let mut s = store(def.clone());
    s.attach_journal(&journal).unwrap();
    assert_eq!(s.ratings().len(), n);
    let view = s.get_trial("a", 0).unwrap();
    assert!(matches!(view, TrialView::Trial { rated: true, .. }));
    assert!(s.submit_scores("a", 0, &submission(&def, &view, |_| 70)).is_err());
    let view = s.get_trial("a", 3).unwrap();
    s.submit_scores("a", 3, &submission(&def, &view, |_| 70)).unwrap();

    let mut again = store(def);
    again.attach_journal(&journal).unwrap();
    assert_eq!(again.ratings().len(), n + 1);
}

#[test]
fn corrupt_journal_lines_are_reported_with_their_number() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("ratings.jsonl");
    std::fs::write(&journal, "{\"kind\":\"session\",\"session_id\":\"a\",\"test_id\":\"t1\",\"timestamp_ms\":0}\nnot json\n").unwrap();
    let mut s = store(definition(2, 9));
    assert!(matches!(s.attach_journal(&journal), Err(MushraError::Journal { line: 2, .. })));
}

#[test]
fn documented_example_gives_mean_80_and_half_width_22_63() {
    let (mean, hw) = mean_ci(&[100.0, 80.0, 60.0]);
    assert_eq!(mean, 80.0);
    assert!((hw.unwrap() - 22.632).abs() < 1e-3);
}

/// Rates every trial of `sid` with `score(condition, trial position)`.
fn rate_all(s: &mut MushraStore, def: &TestDefinition, sid: &str, score: impl Fn(&str, usize) -> u64) {
    s.create_session_with_id("t1", sid).unwrap();
    for i in 0..def.trials.len() {
        let view = s.get_trial(sid, i).unwrap();
        s.submit_scores(sid, i, &submission(def, &view, |c| score(c, i))).unwrap();
    }
}

#[test]
fn aggregate_reproduces_analytic_means_and_intervals() {
    let def = definition(8, 10);
    let mut s = store(def.clone());
    let truth: BTreeMap<&str, f64> =
        CONDITIONS.iter().copied().zip([95.0, 20.0, 62.0, 55.0, 71.0, 40.0]).collect();
    // Offsets +/-d cancel over each rater's 8 trials.
    let deltas = [0.0, 2.0, 5.0];
    for (r, d) in deltas.iter().enumerate() {
        rate_all(&mut s, &def, &format!("r{r}"), |c, i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            (truth[c] + sign * d) as u64
        });
    }
    let agg = s.aggregate("t1").unwrap();
    assert_eq!(agg.conditions.len(), 6);
    // 24 scores: 8 at the mean, 8 at +/-2, 8 at +/-5.
    let n: f64 = 24.0;
    let ss: f64 = 8.0 * 4.0 + 8.0 * 25.0;
    let half = 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt();
    for c in &agg.conditions {
        assert_eq!(c.count, 24);
        assert!((c.mean - truth[c.condition.as_str()]).abs() < 1e-9);
        assert!((c.ci95_half_width.unwrap() - half).abs() < 1e-9);
    }
    assert!(agg.raters.iter().all(|r| !r.flagged && r.trials_rated == 8));
}

#[test]
fn aggregate_matches_an_independent_statistics_oracle() {
    let def = definition(5, 11);
    let mut s = store(def.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let table: Vec<Vec<u64>> = (0..7).map(|_| (0..5 * 6).map(|_| rng.random_range(0..=100)).collect()).collect();
    for (r, row) in table.iter().enumerate() {
        let sid = format!("rater{r}");
        s.create_session_with_id("t1", &sid).unwrap();
        for i in 0..5 {
            let view = s.get_trial(&sid, i).unwrap();
            let sub = submission(&def, &view, |c| {
                let k = CONDITIONS.iter().position(|x| *x == c).unwrap();
                row[i * 6 + k]
            });
            s.submit_scores(&sid, i, &sub).unwrap();
        }
    }
    let agg = s.aggregate("t1").unwrap();
    for (k, label) in CONDITIONS.iter().enumerate() {
        let xs: Vec<f64> = table
            .iter()
            .flat_map(|row| (0..5).map(move |i| row[i * 6 + k] as f64))
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().mean();
        let half = 1.96 * xs.iter().std_dev() / n.sqrt();
        let c = agg.conditions.iter().find(|c| c.condition == *label).unwrap();
        assert_eq!(c.count, 35);
        assert!((c.mean - mean).abs() < 1e-9);
        assert!((c.ci95_half_width.unwrap() - half).abs() < 1e-9);
    }
}

#[test]
fn screening_flags_exactly_the_constructed_violators() {
    let mut def = definition(20, 13);
    def.screening.enabled = true;
    let mut s = store(def.clone());
    // Misses on 3 of 20 trials (15%) is allowed; 4 (20%) is not.
    let plans: [(&str, usize, u64); 4] = [("good", 0, 100), ("edge", 3, 89), ("bad", 4, 89), ("awful", 20, 50)];
    for (sid, misses, low) in plans {
        rate_all(&mut s, &def, sid, |c, i| match c {
            "hidden_ref" if i < misses => low,
            "hidden_ref" => 95,
            "lp_anchor" => 10,
            _ => 60,
        });
    }
    let agg = s.aggregate("t1").unwrap();
    let flags: BTreeMap<&str, (usize, bool, bool)> = agg
        .raters
        .iter()
        .map(|r| (r.session_id.as_str(), (r.reference_misses, r.flagged, r.excluded)))
        .collect();
    assert_eq!(flags["good"], (0, false, false));
    assert_eq!(flags["edge"], (3, false, false));
    assert_eq!(flags["bad"], (4, true, true));
    assert_eq!(flags["awful"], (20, true, true));

    let hidden = agg.conditions.iter().find(|c| c.condition == "hidden_ref").unwrap();
    assert_eq!(hidden.count, 40);
    assert!((hidden.mean - (20.0 * 95.0 + 17.0 * 95.0 + 3.0 * 89.0) / 40.0).abs() < 1e-9);
    let hidden_out = agg.excluded_conditions.iter().find(|c| c.condition == "hidden_ref").unwrap();
    assert_eq!(hidden_out.count, 40);
    assert!((hidden_out.mean - (4.0 * 89.0 + 16.0 * 95.0 + 20.0 * 50.0) / 40.0).abs() < 1e-9);
}

#[test]
fn screening_off_flags_without_excluding() {
    let def = definition(4, 14);
    let mut s = store(def.clone());
    rate_all(&mut s, &def, "lazy", |_, _| 50);
    let agg = s.aggregate("t1").unwrap();
    assert!(!agg.screening_enabled);
    assert!(agg.raters[0].flagged && !agg.raters[0].excluded);
    assert_eq!(agg.conditions[0].count, 4);
    assert!(agg.excluded_conditions.is_empty());
}

#[test]
fn empty_test_aggregates_to_nothing() {
    let s = store(definition(3, 15));
    let agg = s.aggregate("t1").unwrap();
    assert!(agg.conditions.is_empty() && agg.raters.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mean_ci_matches_the_oracle(xs in prop::collection::vec(0u8..=100, 2..60)) {
        let v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let (mean, hw) = mean_ci(&v);
        let n = v.len() as f64;
        prop_assert!((mean - v.iter().mean()).abs() < 1e-9);
        prop_assert!((hw.unwrap() - 1.96 * v.iter().std_dev() / n.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn any_out_of_range_score_is_rejected(bad in 101u64..10_000, seed in 0u64..50) {
        let def = definition(1, seed);
        let trial = &def.trials[0];
        let mut scores: BTreeMap<String, serde_json::Value> =
            trial.stimuli.iter().map(|s| (s.token.clone(), serde_json::json!(50))).collect();
        let victim = trial.stimuli[(seed % 6) as usize].token.clone();
        scores.insert(victim.clone(), serde_json::json!(bad));
        let err = validate_scores(trial, &ScoreSubmission { scores }).unwrap_err();
        prop_assert!(err.to_string().contains(&victim));
    }
}
