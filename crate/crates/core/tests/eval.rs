use tft_core::eval::{
    avg_at_k, build_table, compression_ratio, count_markers, count_tokens, evaluate, extract_answer, marker_average,
    pass_at_k, read_records_jsonl, render_table, table_from_csv, table_to_csv, write_records_jsonl, EvalMode,
    EvalReport, GenerationRecord,
};
use tft_core::model::{init_model, ModelConfig, SamplingSpec};
use tft_core::pipeline::{train_stage, OptimSpec, StageSpec};
use tft_core::taskgen::{chain_triplet, make_dataset, DatasetSpec, Op};
use tft_core::templating::Templater;
use tft_core::tokenizer::{build_vocab, TokenId, ANSWER_TAG, EOS, IM_END, PAD, THINK_CLOSE, THINK_OPEN};

fn binomial(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Fraction of the k-subsets of n items (the first c correct) that hold at
/// least one correct item, by enumeration.
fn brute_force(n: u64, c: u64, k: u64) -> f64 {
    let correct_mask = (1u32 << c) - 1;
    let (mut hit, mut total) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() as u64 != k {
            continue;
        }
        total += 1;
        if subset & correct_mask != 0 {
            hit += 1;
        }
    }
    assert_eq!(total as u128, binomial(n, k));
    hit as f64 / total as f64
}

#[test]
fn pass_at_k_equals_subset_enumeration() {
    for n in 1..=8 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n, c, k).unwrap();
                let want = brute_force(n, c, k);
                assert!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
            }
            assert_eq!(pass_at_k(n, c, n).unwrap(), if c > 0 { 1.0 } else { 0.0 });
            for k in 1..=n {
                assert_eq!(pass_at_k(n, 0, k).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn pass_at_k_is_monotone() {
    for n in 1..=8 {
        for c in 0..=n {
            for k in 1..=n {
                let p = pass_at_k(n, c, k).unwrap();
                if k < n {
                    assert!(pass_at_k(n, c, k + 1).unwrap() >= p);
                }
                if c < n {
                    assert!(pass_at_k(n, c + 1, k).unwrap() >= p);
                }
            }
        }
    }
}

#[test]
fn avg_at_k_is_pass_at_one() {
    assert_eq!(avg_at_k(&[true, true, false, false]).unwrap(), 0.5);
    assert_eq!(avg_at_k(&[true; 5]).unwrap(), 1.0);
    assert!(avg_at_k(&[]).is_err());
    for n in 1..=12usize {
        for c in 0..=n {
            let flags: Vec<bool> = (0..n).map(|i| i < c).collect();
            assert_eq!(avg_at_k(&flags).unwrap(), pass_at_k(n as u64, c as u64, 1).unwrap());
        }
    }
}

#[test]
fn token_accounting() {
    let v = build_vocab();
    let enc = |s: &str| v.encode(s).unwrap();
    // no-think: generation starts at the answer tag
    let mut nothink = vec![ANSWER_TAG];
    nothink.extend(enc("46"));
    nothink.extend([IM_END, EOS]);
    assert_eq!(count_tokens(&nothink, EvalMode::Nothink), (5, 0));
    // think: a 17-token trace, then the closing block and the answer
    let trace = enc("12+34=46\n46-15=31");
    assert_eq!(trace.len(), 17);
    let mut think = trace.clone();
    think.extend([THINK_CLOSE, v.special().newline, ANSWER_TAG]);
    think.extend(enc("31"));
    think.extend([IM_END, EOS]);
    assert_eq!(count_tokens(&think, EvalMode::Think), (think.len(), 17));
    // the no-think think block is prefilled, so nothing generated counts as span
    let mut reopened = vec![THINK_OPEN];
    reopened.extend(&trace);
    reopened.push(THINK_CLOSE);
    assert_eq!(count_tokens(&reopened, EvalMode::Nothink), (19, 0));
    let padded: Vec<TokenId> = nothink.iter().copied().chain([PAD, PAD]).collect();
    assert_eq!(count_tokens(&padded, EvalMode::Nothink).0, 5);
    assert_eq!(extract_answer(&v, &think).as_deref(), Some("31"));
}

#[test]
fn table_one_ratios_and_marker_counts() {
    assert_eq!(compression_ratio(241.0, 2020.0).unwrap(), 11.9);
    assert_eq!(compression_ratio(1505.0, 4229.0).unwrap(), 35.6);
    assert_eq!(compression_ratio(2020.0, 2020.0).unwrap(), 100.0);
    assert_eq!(marker_average(61_936, 1319).unwrap(), 46.96);
    assert_eq!(marker_average(485, 1319).unwrap(), 0.37);
    assert!(count_markers(&[], &[1]).is_err());
}

fn fixture_report(method: &str, split: &str, mode: EvalMode, acc: f64, tok: f64) -> EvalReport {
    EvalReport {
        method: method.into(),
        split: split.into(),
        mode,
        n_problems: 1319,
        n_samples: 1,
        accuracy: acc,
        pass_at_n: acc,
        mean_tokens: tok,
        mean_think_tokens: 0.0,
        overflow_count: 0,
        marker_total: 0,
        marker_avg: 0.0,
        reference: None,
    }
}

#[test]
fn report_table_from_paper_values() {
    let reports = vec![
        fixture_report("Thinking", "GSM8K", EvalMode::Think, 0.95, 2020.0),
        fixture_report("3TF", "GSM8K", EvalMode::Nothink, 0.93, 241.0),
        fixture_report("Thinking", "MATH-500", EvalMode::Think, 0.9, 4229.0),
        fixture_report("3TF", "MATH-500", EvalMode::Nothink, 0.8, 1505.0),
    ];
    let (rows, warnings) = build_table(&reports, Some("Thinking"));
    assert!(warnings.is_empty());
    let ratios: Vec<Option<f64>> = rows.iter().map(|r| r.ratio).collect();
    assert_eq!(ratios, [Some(100.0), Some(11.9), Some(100.0), Some(35.6)]);
    assert!((rows[1].ratio.unwrap() - 100.0 * 241.0 / 2020.0).abs() <= 0.1);
    assert!((rows[3].ratio.unwrap() - 100.0 * 1505.0 / 4229.0).abs() <= 0.1);
    let text = render_table(&rows);
    assert!(text.contains("Method") && text.contains("Ratio") && text.contains("11.9%"));

    let csv = table_to_csv(&rows).unwrap();
    assert_eq!(table_from_csv(&csv).unwrap(), rows);

    let (single, w) = build_table(&reports[1..2], None);
    assert!(w.is_empty());
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].ratio, Some(100.0));

    let (no_ref, w) = build_table(&[reports[1].clone(), reports[1].clone()], None);
    assert_eq!(w.len(), 1);
    assert!(no_ref.iter().all(|r| r.ratio.is_none()));
}

fn tiny_model(seed: u64) -> tft_core::model::TransformerModel {
    init_model(ModelConfig {
        vocab_size: build_vocab().len(),
        context_len: 48,
        d_model: 32,
        n_heads: 2,
        n_layers: 1,
        seed,
    })
    .unwrap()
}

fn greedy(max_new_tokens: usize) -> SamplingSpec {
    SamplingSpec {
        temperature: 0.7,
        top_k: Some(1),
        max_new_tokens,
        stop_token_ids: vec![EOS],
        seed: 3,
    }
}

#[test]
fn memorized_problem_scores_perfectly() {
    let v = build_vocab();
    let tpl = Templater::new(&v, 48);
    let tr = chain_triplet(&[12, 34], &[Op::Add], &[false]);
    let render = tpl.render_train_nothink(&tr).unwrap();
    let mut model = tiny_model(1);
    let spec = StageSpec {
        name: "memorize".into(),
        nothink_fraction: 1.0,
        epochs: 150,
        batch_size: 1,
        optim: OptimSpec {
            lr: 3e-3,
            ..OptimSpec::default()
        },
        seed: 1,
    };
    train_stage(&mut model, &[render], &spec, &mut |_| {}).unwrap();
    let records = evaluate(&model, &tpl, &[tr], EvalMode::Nothink, 4, &greedy(16)).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.correct && r.think_tokens == 0));
    assert!(records.windows(2).all(|w| w[0].output_ids == w[1].output_ids));
    let report = EvalReport::from_records("m", "one", EvalMode::Nothink, &records, &v.special().markers).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.pass_at_n, 1.0);
}

#[test]
fn untrained_model_is_near_zero_and_reports_are_pure() {
    let v = build_vocab();
    let tpl = Templater::new(&v, 48);
    let ds = make_dataset(&DatasetSpec {
        train: 0,
        validation: 0,
        test: 200,
        hard: 0,
        ..DatasetSpec::default()
    })
    .unwrap();
    let model = tiny_model(9);
    let spec = SamplingSpec {
        top_k: Some(20),
        ..greedy(24)
    };
    let a = evaluate(&model, &tpl, &ds.test, EvalMode::Nothink, 2, &spec).unwrap();
    let b = evaluate(&model, &tpl, &ds.test, EvalMode::Nothink, 2, &spec).unwrap();
    assert_eq!(write_records_jsonl(&a), write_records_jsonl(&b));
    let order: Vec<(&str, u32)> = a.iter().map(|r| (r.uid.as_str(), r.sample)).collect();
    let want: Vec<(&str, u32)> = ds.test.iter().flat_map(|p| [(p.uid.as_str(), 0), (p.uid.as_str(), 1)]).collect();
    assert_eq!(order, want);
    let markers = &v.special().markers;
    let report = EvalReport::from_records("untrained", "test", EvalMode::Nothink, &a, markers).unwrap();
    assert!(report.accuracy < 0.05, "accuracy {}", report.accuracy);
    assert!(a.iter().all(|r| r.think_tokens <= r.visible_tokens));
    assert!(a.iter().all(|r| !r.correct || r.answer.is_some()));

    let text = write_records_jsonl(&a);
    let back: Vec<GenerationRecord> = read_records_jsonl(&text).unwrap();
    assert_eq!(back, a);
    let again = EvalReport::from_records("untrained", "test", EvalMode::Nothink, &back, markers).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&report).unwrap());
}

#[test]
fn overflowing_prompts_are_marked_not_fatal() {
    let v = build_vocab();
    let tpl = Templater::new(&v, 12);
    let tr = chain_triplet(&[12, 34, 56, 78], &[Op::Add, Op::Add, Op::Sub], &[]);
    let model = init_model(ModelConfig {
        context_len: 12,
        ..*tiny_model(1).config()
    })
    .unwrap();
    let records = evaluate(&model, &tpl, &[tr], EvalMode::Think, 2, &greedy(8)).unwrap();
    assert!(records.iter().all(|r| r.overflow && !r.correct));
}
