//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use codelkt::adaptation::{mask_tokens_with, MaskVocabulary, Replacement};
use codelkt::data::{split_kfold, Interaction};
use codelkt::dkt::DktConfig;
use codelkt::encoder::{TextEncoder, ToyConfig, ToyEncoder};
use codelkt::encoding::{build_input, build_training_set, whitespace_tokens, SpecialTokens};
use codelkt::evaluation::{auc, render_markdown};
use codelkt::feedback::{
    build_prompt, parse_feedback, Comparison, Correctness, LearnerContext, Mode, ANALYSIS, CORRECTION, KEY_NOTIONS,
    NEXT_CHALLENGE, PLACEHOLDERS, POSITIVE_FEEDBACK, RELATED_HISTORY, SIMILAR_PROBLEMS,
};
use codelkt::harness::{evaluation_targets, run_comparison, ComparisonSpec};
use codelkt::llm::StubLlm;
use codelkt::model::{fit, KtModel, MetricHistory, PredictionHead, PreparedSample, TrainConfig};
use codelkt::service::{
    CreateSessionRequest, FaultPoint, ManualClock, Problem, ProblemBank, ReferencePredicate, Service, ServiceError,
    SubmitRequest,
};
use codelkt::synthetic::{parity_log, SyntheticSpec};

const AUC_BATCHES: usize = 200;
const AUC_MAX_N: usize = 100;
const AUC_TOL: f64 = 1e-12;
const AUC_BUDGET: Duration = Duration::from_secs(5);

const GRAD_BATCHES: usize = 20;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

const MASK_MIN_TOKENS: usize = 100_000;
const MASK_P: f64 = 0.15;
const MASK_FRACTION_RANGE: (f64, f64) = (0.14, 0.16);
const MASK_SUBPOLICY_TOL: f64 = 0.015;
const MASK_BUDGET: Duration = Duration::from_secs(10);

const FOLD_LOGS: usize = 100;
const FOLD_BUDGET: Duration = Duration::from_secs(10);

const STRUCTURE_HISTORIES: usize = 1000;
const STRUCTURE_BUDGET: Duration = Duration::from_secs(10);

const LEARN_MIN_TRAIN_AUC: f64 = 0.95;
const LEARN_BUDGET: Duration = Duration::from_secs(120);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took <= budget, || format!("took {took:.2?}, budget {budget:?}"))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..AUC_BATCHES {
        let n = rng.random_range(2..=AUC_MAX_N);
        // Coarse scores so ties are common.
        let levels = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
    }
    check(worst <= AUC_TOL, || format!("max |auc - pairwise| = {worst:e}"))?;
    within(start, AUC_BUDGET)?;
    Ok(format!("{AUC_BATCHES} batches, max |diff| {worst:.1e} <= {AUC_TOL:e}"))
}

fn small_toy() -> Box<dyn TextEncoder> {
    let config = ToyConfig { dim: 12, buckets: 128, window: 3, seed: 5, init_std: 0.5 };
    Box::new(ToyEncoder::for_knowledge_tracing(config).expect("toy encoder"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let log = parity_log(&SyntheticSpec { students: 6, steps_per_student: 5, ..Default::default() });
    let encoder = small_toy();
    let dim = encoder.dim();
    let model = KtModel::with_head(encoder, PredictionHead::init(dim, 3), Default::default()).map_err(|e| e.to_string())?;
    let samples = model.samples_for(&log).map_err(|e| e.to_string())?;
    let prepared: Vec<PreparedSample> = model.prepare_all(&samples).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_BATCHES {
        let batch: Vec<PreparedSample> = (0..4).map(|_| prepared[rng.random_range(0..prepared.len())].clone()).collect();
        let (_, grads) = model.loss_and_gradients(&batch).map_err(|e| e.to_string())?;
        let loss_at = |m: &KtModel| m.loss_and_gradients(&batch).map(|(l, _)| l).expect("loss");

        let active: Vec<usize> = (0..grads.encoder.len()).filter(|&i| grads.encoder[i].abs() > 1e-9).collect();
        let mut coords: Vec<usize> = (0..12).map(|_| active[rng.random_range(0..active.len())]).collect();
        coords.extend((0..4).map(|_| rng.random_range(0..grads.encoder.len())));
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &coords {
            let mut plus = model.clone();
            plus.encoder.params_mut()[i] += GRAD_STEP;
            let mut minus = model.clone();
            minus.encoder.params_mut()[i] -= GRAD_STEP;
            analytic.push(grads.encoder[i]);
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * GRAD_STEP));
        }
        for j in 0..=dim {
            let mut plus = model.clone();
            let mut minus = model.clone();
            if j < dim {
                plus.head.weight[j] += GRAD_STEP;
                minus.head.weight[j] -= GRAD_STEP;
                analytic.push(grads.weight[j]);
            } else {
                plus.head.bias += GRAD_STEP;
                minus.head.bias -= GRAD_STEP;
                analytic.push(grads.bias);
            }
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * GRAD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    check(worst < GRAD_REL_TOL, || format!("max relative error {worst:e}"))?;
    within(start, GRAD_BUDGET)?;
    Ok(format!("{GRAD_BATCHES} batches, max relative error {worst:.1e} < {GRAD_REL_TOL:e}"))
}

fn masking_statistics() -> Outcome {
    let start = Instant::now();
    let encoder = ToyEncoder::for_knowledge_tracing(ToyConfig::default()).map_err(|e| e.to_string())?;
    let vocab = MaskVocabulary::of(&encoder);
    let is_special = |id: u32| encoder.is_special_id(id);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let regular = encoder.regular_ids();
    let specials: Vec<u32> = (0..regular.start).collect();
    let (mut maskable, mut selected, mut masked, mut random, mut unchanged) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut special_hits = 0usize;
    while maskable < MASK_MIN_TOKENS {
        let ids: Vec<u32> = (0..128)
            .map(|k| if k % 16 == 0 { specials[k / 16 % specials.len()] } else { rng.random_range(regular.clone()) })
            .collect();
        maskable += ids.iter().filter(|&&id| !is_special(id)).count();
        let plan = mask_tokens_with(&ids, &is_special, &vocab, MASK_P, &mut rng);
        for p in &plan.positions {
            selected += 1;
            special_hits += usize::from(is_special(ids[p.index]));
            match p.replacement {
                Replacement::Mask => masked += 1,
                Replacement::Random(_) => random += 1,
                Replacement::Unchanged => unchanged += 1,
            }
        }
    }
    let frac = selected as f64 / maskable as f64;
    let share = |n: usize| n as f64 / selected as f64;
    let (m, r, u) = (share(masked), share(random), share(unchanged));
    check(special_hits == 0, || format!("{special_hits} special tokens selected"))?;
    check((MASK_FRACTION_RANGE.0..=MASK_FRACTION_RANGE.1).contains(&frac), || format!("masked fraction {frac:.4}"))?;
    for (got, want, name) in [(m, 0.8, "mask"), (r, 0.1, "random"), (u, 0.1, "unchanged")] {
        check((got - want).abs() <= MASK_SUBPOLICY_TOL, || format!("{name} share {got:.4}, want {want}±{MASK_SUBPOLICY_TOL}"))?;
    }
    within(start, MASK_BUDGET)?;
    Ok(format!("{maskable} tokens, fraction {frac:.4}, split {m:.3}/{r:.3}/{u:.3}"))
}

fn fold_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..FOLD_LOGS {
        let spec = SyntheticSpec {
            students: rng.random_range(10..60),
            steps_per_student: rng.random_range(1..8),
            kcs: 4,
            questions_per_kc: 2,
            seed: trial as u64,
        };
        let log = parity_log(&spec);
        let k = rng.random_range(2..=6);
        let folds = split_kfold(&log, k, trial as u64, 0.1).map_err(|e| e.to_string())?;
        let all: BTreeSet<String> = log.student_ids().map(str::to_string).collect();
        check(folds.len() == k, || format!("trial {trial}: {} folds, want {k}", folds.len()))?;
        let mut seen_test = BTreeSet::new();
        for f in &folds {
            check(f.test_students.is_disjoint(&seen_test), || format!("trial {trial}: test sets overlap"))?;
            seen_test.extend(f.test_students.iter().cloned());
            let sets = [&f.train_students, &f.validation_students, &f.test_students];
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                check(sets[a].is_disjoint(sets[b]), || format!("trial {trial} fold {}: streams overlap", f.fold_index))?;
            }
            let union: BTreeSet<String> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
            check(union == all, || format!("trial {trial} fold {}: students lost", f.fold_index))?;
            check(!f.train_students.is_empty(), || format!("trial {trial} fold {}: empty training set", f.fold_index))?;

            let data = f.partition(&log);
            check(
                data.train.num_interactions() + data.validation.num_interactions() + data.test.num_interactions()
                    == log.num_interactions(),
                || format!("trial {trial}: interactions lost in partition"),
            )?;
            for stream in [&data.train, &data.validation] {
                check(stream.iter().all(|it| !f.test_students.contains(&it.student_id)), || {
                    format!("trial {trial}: test interaction reached a training stream")
                })?;
            }
            check(data.test.iter().all(|it| f.test_students.contains(&it.student_id)), || {
                format!("trial {trial}: foreign interaction in test stream")
            })?;
            let samples = build_training_set(&data.train, 512, &whitespace_tokens, &SpecialTokens::bert())
                .map_err(|e| e.to_string())?;
            check(samples.iter().all(|s| !f.test_students.contains(&s.student_id)), || {
                format!("trial {trial}: test student in training samples")
            })?;
        }
        check(seen_test == all, || format!("trial {trial}: test sets do not cover all students"))?;
    }
    within(start, FOLD_BUDGET)?;
    Ok(format!("{FOLD_LOGS} random logs"))
}

const WORDS: [&str; 10] = ["loop", "array", "sum", "string", "index", "map", "count", "reverse", "sort", "max"];

fn random_phrase(rng: &mut ChaCha8Rng) -> String {
    (0..rng.random_range(1..6)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn input_structure() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let tokens = SpecialTokens::bert();
    let encoder = small_toy();
    let dim = encoder.dim();
    let model = KtModel::with_head(encoder, PredictionHead::zeros(dim), Default::default()).map_err(|e| e.to_string())?;
    let mut truncated = 0;
    for trial in 0..STRUCTURE_HISTORIES {
        let n = rng.random_range(0..30);
        let mk = |rng: &mut ChaCha8Rng, i: usize| {
            Interaction::new("s", format!("q{i}"), format!("k{i}"), rng.random_bool(0.5))
                .with_texts(random_phrase(rng), random_phrase(rng))
        };
        let history: Vec<Interaction> = (0..n).map(|i| mk(&mut rng, i)).collect();
        let target = mk(&mut rng, n);
        let budget = rng.random_range(12..200);
        let segment = |it: &Interaction| {
            let r = if it.correct { "[CORRECT]" } else { "[INCORRECT]" };
            format!("{} {} {r}", it.kc_text.as_deref().unwrap(), it.question_text.as_deref().unwrap())
        };
        let expected = |k: usize| {
            let mut parts = vec!["[CLS]".to_string()];
            parts.extend(history[n - k..].iter().map(segment));
            parts.push(format!("{} {}", target.kc_text.as_deref().unwrap(), target.question_text.as_deref().unwrap()));
            parts.push("[MASK] [SEP]".into());
            parts.join(" ")
        };
        if whitespace_tokens(&expected(0)) > budget {
            continue;
        }
        let s = build_input(&history, &target, budget, &whitespace_tokens, &tokens).map_err(|e| e.to_string())?;
        let k = s.interactions_included;
        check(s.text == expected(k), || format!("trial {trial}: text is not the most recent {k} interactions"))?;
        check(k == n || whitespace_tokens(&expected(k + 1)) > budget, || {
            format!("trial {trial}: kept {k} of {n} though {} fit", k + 1)
        })?;
        truncated += usize::from(k < n);
        let words: Vec<&str> = s.text.split_whitespace().collect();
        check(words.iter().filter(|w| **w == "[MASK]").count() == 1, || format!("trial {trial}: mask count"))?;
        check(words[words.len() - 2] == "[MASK]", || format!("trial {trial}: mask is not the final response slot"))?;
        let masked_tail: String = s.text.chars().skip(s.mask_char_offset).collect();
        check(masked_tail == "[MASK] [SEP]", || format!("trial {trial}: mask offset"))?;
        let p = model.prepare(0, &s).map_err(|e| e.to_string())?;
        let mask_id = model.encoder.token_id("[MASK]").unwrap();
        check(p.ids.iter().filter(|&&id| id == mask_id).count() == 1 && p.position == p.ids.len() - 2, || {
            format!("trial {trial}: encoded mask position")
        })?;
    }
    check(truncated > 50, || format!("only {truncated} histories were truncated"))?;
    within(start, STRUCTURE_BUDGET)?;
    Ok(format!("{STRUCTURE_HISTORIES} histories, {truncated} truncated"))
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let log = parity_log(&SyntheticSpec { students: 200, steps_per_student: 12, ..Default::default() });
    let config = TrainConfig::default();
    let fold = &split_kfold(&log, 5, 0, 0.1).map_err(|e| e.to_string())?[0];
    let data = fold.partition(&log);
    let encoder = ToyEncoder::for_knowledge_tracing(ToyConfig::default()).map_err(|e| e.to_string())?;
    let mut model = KtModel::new(Box::new(encoder), &config);
    let train = model.prepare_all(&model.samples_for(&data.train).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let val =
        model.prepare_all(&model.samples_for(&data.validation).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let history = fit(&mut model, &train, &val, &config, &mut |_| {}).map_err(|e| e.to_string())?;

    let labels: Vec<bool> = train.iter().map(|s| s.label).collect();
    let train_auc = auc(&model.predict_prepared(&train), &labels).map_err(|e| e.to_string())?;
    check(train_auc >= LEARN_MIN_TRAIN_AUC, || format!("train AUC {train_auc:.4}"))?;

    check_restored(&model, &history, &val)?;

    // A step size large enough that validation peaks before the last epoch.
    let noisy = TrainConfig { learning_rate: 0.5, max_epochs: 30, early_stop_patience: 30, ..config.clone() };
    let mut jumpy = KtModel::new(Box::new(ToyEncoder::for_knowledge_tracing(ToyConfig::default()).unwrap()), &noisy);
    let jumpy_history = fit(&mut jumpy, &train, &val, &noisy, &mut |_| {}).map_err(|e| e.to_string())?;
    check_restored(&jumpy, &jumpy_history, &val)?;
    check(jumpy_history.best_epoch < jumpy_history.epochs.len(), || "validation never peaked early; restore untested".into())?;
    within(start, LEARN_BUDGET)?;
    Ok(format!(
        "train AUC {train_auc:.4} >= {LEARN_MIN_TRAIN_AUC}; best epoch {} of {} restored",
        jumpy_history.best_epoch,
        jumpy_history.epochs.len()
    ))
}

fn check_restored(model: &KtModel, history: &MetricHistory, val: &[PreparedSample]) -> Result<(), String> {
    let scores: Vec<f64> = history.epochs.iter().map(|e| e.val_auc.unwrap_or(e.val_acc)).collect();
    let argmax = scores.iter().enumerate().fold(0, |b, (i, s)| if *s > scores[b] { i } else { b }) + 1;
    check(history.best_epoch == argmax, || format!("best_epoch {} but validation peaks at {argmax}", history.best_epoch))?;
    let val_labels: Vec<bool> = val.iter().map(|s| s.label).collect();
    let restored = auc(&model.predict_prepared(val), &val_labels).map_err(|e| e.to_string())?;
    let recorded = history.epochs[history.best_epoch - 1].val_auc.unwrap_or(f64::NAN);
    check(restored == recorded, || format!("restored val AUC {restored} != epoch {} record {recorded}", history.best_epoch))
}

fn harness_parity() -> Outcome {
    let log = parity_log(&SyntheticSpec { students: 45, steps_per_student: 8, ..Default::default() });
    let folds = split_kfold(&log, 3, 0, 0.1).map_err(|e| e.to_string())?;
    let train = TrainConfig { max_epochs: 3, per_step_batch_size: 16, accumulation_steps: 1, learning_rate: 1e-2, ..Default::default() };
    let dkt = DktConfig { max_epochs: 3, ..Default::default() };
    let spec = ComparisonSpec { dataset_tag: "synthetic", lkt_tag: "LKT (toy)", dkt_tag: "DKT", train: &train, dkt: &dkt };
    let factory = || -> Box<dyn TextEncoder> { Box::new(ToyEncoder::for_knowledge_tracing(ToyConfig::default()).unwrap()) };
    let run = run_comparison(&log, &folds, &factory, &spec).map_err(|e| e.to_string())?;
    let mut targets = 0;
    for ((a, b), f) in run.lkt.folds.iter().zip(&run.dkt.folds).zip(&folds) {
        let expected = evaluation_targets(&f.partition(&log).test);
        check(a.targets() == expected && b.targets() == expected, || format!("fold {}: target lists differ", f.fold_index))?;
        targets += expected.len();
    }
    let table = render_markdown(&run.reports());
    let cell = Regex::new(r"^\d\.\d{4}±\d\.\d{4}$").unwrap();
    let cells: Vec<&str> = table
        .lines()
        .filter(|l| l.contains("LKT") || l.contains("DKT"))
        .flat_map(|l| l.split('|').skip(2).map(str::trim).filter(|c| !c.is_empty()))
        .collect();
    check(cells.len() == 4 && cells.iter().all(|c| cell.is_match(c)), || format!("table cells {cells:?}"))?;
    Ok(format!("{targets} shared targets over {} folds, cells like {}", folds.len(), cells[0]))
}

fn prompt_fidelity() -> Outcome {
    let correctness: LearnerContext =
        serde_json::from_str(include_str!("fixtures/context_correctness.json")).map_err(|e| e.to_string())?;
    let hint: LearnerContext = serde_json::from_str(include_str!("fixtures/context_hint.json")).map_err(|e| e.to_string())?;
    let golden = [
        (Mode::Correctness, Comparison::C1, include_str!("golden/correctness_c1.txt")),
        (Mode::Correctness, Comparison::C2, include_str!("golden/correctness_c2.txt")),
        (Mode::Correctness, Comparison::C3, include_str!("golden/correctness_c3.txt")),
        (Mode::Hint, Comparison::C1, include_str!("golden/hint_c1.txt")),
        (Mode::Hint, Comparison::C2, include_str!("golden/hint_c2.txt")),
        (Mode::Hint, Comparison::C3, include_str!("golden/hint_c3.txt")),
    ];
    let templates = Default::default();
    for (mode, comparison, expected) in golden {
        let ctx = if mode == Mode::Correctness { &correctness } else { &hint };
        let prompt = build_prompt(mode, ctx, comparison, &templates).map_err(|e| e.to_string())?;
        let tag = format!("{mode}/{comparison}");
        check(prompt == expected, || format!("{tag} differs from golden"))?;
        check(PLACEHOLDERS.iter().all(|p| !prompt.contains(&format!("{{{p}}}"))), || format!("{tag}: placeholder left"))?;
        if comparison == Comparison::C2 {
            let texts = ctx.problem_text_past.iter().map(|p| p.question_text.as_str()).chain([ctx.problem_text_present.as_str()]);
            for t in texts {
                check(!prompt.contains(t), || format!("{tag}: contains problem text `{t}`"))?;
            }
            check(prompt.contains("['492', '34']") && prompt.contains("['492', '33', 'Correct']"), || {
                format!("{tag}: ID forms missing")
            })?;
        }
        if mode == Mode::Hint {
            for banned in ["Correctness", "real result", "answer about the problem", "zap(String s)"] {
                check(!prompt.contains(banned), || format!("{tag}: contains `{banned}`"))?;
            }
        }
    }
    Ok("6 prompts byte-identical to golden files".into())
}

/// Heading line -> body, from lines shaped `N. Title` or `N. Title:`.
fn split_numbered(text: &str) -> Vec<(String, String)> {
    let heading = Regex::new(r"^\d\. (.+?):?$").unwrap();
    let mut out: Vec<(String, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        match heading.captures(line) {
            Some(c) if c[1].len() < 60 => out.push((c[1].to_string(), Vec::new())),
            _ => out.last_mut().expect("text starts with a heading").1.push(line),
        }
    }
    out.into_iter().map(|(h, body)| (h, body.join("\n").trim().to_string())).collect()
}

fn feedback_parsing() -> Outcome {
    let correct_answer = include_str!("fixtures/answer_correct.txt");
    let hint_answer = include_str!("fixtures/answer_hint.txt");

    let bundle = parse_feedback(correct_answer, Mode::Correctness, Some(Correctness::Correct)).map_err(|e| e.to_string())?;
    let expected = split_numbered(correct_answer);
    let names: Vec<&str> = bundle.components.keys().map(String::as_str).collect();
    check(names == [POSITIVE_FEEDBACK, ANALYSIS, CORRECTION, NEXT_CHALLENGE], || format!("correctness components {names:?}"))?;
    for ((_, body), (name, text)) in expected.iter().zip(&bundle.components) {
        check(body == text, || format!("`{name}` body differs"))?;
    }
    check(!bundle.protocol_violation && bundle.preamble.is_empty(), || "clean answer flagged".into())?;

    let wrong = parse_feedback(correct_answer, Mode::Correctness, Some(Correctness::Incorrect)).map_err(|e| e.to_string())?;
    check(wrong.protocol_violation && !wrong.components.contains_key(NEXT_CHALLENGE), || {
        "Next challenge not flagged for an incorrect answer".into()
    })?;
    check(wrong.overflow.len() == 1, || format!("overflow {:?}", wrong.overflow))?;

    let hint = parse_feedback(hint_answer, Mode::Hint, None).map_err(|e| e.to_string())?;
    let names: Vec<&str> = hint.components.keys().map(String::as_str).collect();
    check(names == [POSITIVE_FEEDBACK, RELATED_HISTORY, SIMILAR_PROBLEMS, KEY_NOTIONS], || format!("hint components {names:?}"))?;
    for ((_, body), (name, text)) in split_numbered(hint_answer).iter().zip(&hint.components) {
        check(body == text, || format!("`{name}` body differs"))?;
    }
    check(!hint.protocol_violation, || "hint flagged".into())?;
    Ok("4 correctness and 4 hint components; Next challenge flagged when incorrect".into())
}

fn service_event_sourcing() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bank = ProblemBank::new(vec![Problem {
        question_id: "p0".into(),
        kc_id: "k0".into(),
        kc_text: "loops".into(),
        question_text: "Print 1 to 10.".into(),
        language: Default::default(),
        reference: ReferencePredicate::Contains("for".into()),
    }])
    .map_err(|e| e.to_string())?;
    let stub = || {
        StubLlm::fixed(
            "1. Positive feedback:\nOk.\n2. Analysis about the answer:\nOk.\n3. Correction of the answer / Tips for improvement:\nOk.",
        )
    };
    let open = || Service::builder(bank.clone(), Box::new(stub())).clock(ManualClock::new(0, 1)).open(dir.path());
    let submit = SubmitRequest { code: "for (;;) {}".into(), question_id: Some("p0".into()), ..Default::default() };

    let (id, live) = {
        let svc = open().map_err(|e| e.to_string())?;
        let s = svc.create_session(&CreateSessionRequest { student_id: "s1".into() }).map_err(|e| e.to_string())?;
        svc.inject_fault(FaultPoint::AfterSubmitPersisted);
        let crashed = svc.submit(&s.session_id, &submit);
        check(matches!(crashed, Err(ServiceError::Injected(_))), || "fault did not fire".into())?;
        let live = serde_json::to_vec(&svc.projection(&s.session_id).map_err(|e| e.to_string())?).unwrap();
        (s.session_id, live)
    };
    let svc = open().map_err(|e| e.to_string())?;
    let replayed = serde_json::to_vec(&svc.replay(&id).map_err(|e| e.to_string())?).unwrap();
    let restored = serde_json::to_vec(&svc.projection(&id).map_err(|e| e.to_string())?).unwrap();
    check(replayed == live && restored == live, || "replayed projection differs from the live one".into())?;

    svc.submit(&id, &submit).map_err(|e| e.to_string())?;
    svc.submit(&id, &submit).map_err(|e| e.to_string())?;
    let log = std::fs::read_to_string(dir.path().join("sessions").join(format!("{id}.jsonl"))).map_err(|e| e.to_string())?;
    let submitted = log.lines().filter(|l| l.contains(r#""event_type":"submitted""#)).count();
    let interactions = svc.history(&id).map_err(|e| e.to_string())?.interactions.len();
    check(submitted == 1 && interactions == 1, || format!("{submitted} submitted events, {interactions} interactions"))?;
    Ok(format!("replay byte-identical ({} bytes); 3 submits, 1 interaction", live.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("auc_oracle_equivalence", auc_oracle),
        ("gradient_check", gradient_check),
        ("masking_statistics", masking_statistics),
        ("fold_integrity", fold_integrity),
        ("input_structure", input_structure),
        ("end_to_end_learnability", learnability),
        ("harness_parity", harness_parity),
        ("prompt_fidelity", prompt_fidelity),
        ("feedback_parsing", feedback_parsing),
        ("service_event_sourcing", service_event_sourcing),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
