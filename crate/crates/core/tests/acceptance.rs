//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::Rng;

use urtf::autodiff::{check_primitives, finite_diff_check, ParamStore, Tensor};
use urtf::metatrain::*;
use urtf::metrics::*;
use urtf::pairing::*;
use urtf::prompting::*;
use urtf::sel::*;
use urtf::synth::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sel_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = urtf::seeded_rng(1);
    let mut failures = 0;
    for _ in 0..10_000 {
        let record = common::random_record(&mut rng);
        let text = linearize_sel(&record).map_err(|e| e.to_string())?;
        let ok = match parse_sel(&text) {
            Ok(parsed) => parsed == record && linearize_sel(&parsed).ok().as_deref() == Some(text.as_str()),
            Err(_) => false,
        };
        failures += usize::from(!ok);
    }
    let elapsed = start.elapsed();
    ensure(
        failures == 0 && elapsed < Duration::from_secs(5),
        format!("10000 records, {failures} failures, {:.3} s", elapsed.as_secs_f64()),
    )
}

fn tuple(label: u8, start: u8) -> GroundedTuple {
    GroundedTuple {
        task_kind: TaskKind::Ner,
        elements: vec![Element {
            label: format!("L{label}"),
            offsets: Offsets::At(start as usize, start as usize + 2),
        }],
    }
}

/// Maximum number of disjoint equal pairs by exhaustive assignment.
fn brute_force_pairs(gold: &[GroundedTuple], pred: &[GroundedTuple], used: &mut Vec<bool>) -> usize {
    let Some((first, rest)) = pred.split_first() else {
        return 0;
    };
    let mut best = brute_force_pairs(gold, rest, used);
    for j in 0..gold.len() {
        if !used[j] && gold[j] == *first {
            used[j] = true;
            best = best.max(1 + brute_force_pairs(gold, rest, used));
            used[j] = false;
        }
    }
    best
}

fn metric_oracle() -> Outcome {
    let mut rng = urtf::seeded_rng(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let draw = |rng: &mut urtf::SeededRng| -> Vec<GroundedTuple> {
            (0..rng.gen_range(0..=6)).map(|_| tuple(rng.gen_range(0..3), rng.gen_range(0..2))).collect()
        };
        let gold = draw(&mut rng);
        let pred = draw(&mut rng);
        let c = match_multisets(&gold, &pred);
        let tp = brute_force_pairs(&gold, &pred, &mut vec![false; gold.len()]);
        let want = Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        };
        mismatches += usize::from(c != want);
    }
    ensure(mismatches == 0, format!("1000 multiset pairs, {mismatches} mismatches"))
}

fn class_set(names: &[&str]) -> ClassSet {
    names.iter().map(|s| s.to_string()).collect()
}

fn pairing_scores() -> Outcome {
    let cases = [
        (class_set(&["A"]), class_set(&["A"]), Ratio::from_integer(2)),
        (class_set(&["A", "B"]), class_set(&["A"]), Ratio::from_integer(1)),
        (class_set(&["A"]), class_set(&["B"]), Ratio::from_integer(1)),
    ];
    for (s, q, want) in &cases {
        let got = pairing_score(s, q).map_err(|e| e.to_string())?;
        if got != *want {
            return Err(format!("rho({s:?}, {q:?}) = {got}, expected {want}"));
        }
    }
    let mut rng = urtf::seeded_rng(3);
    let names = ["A", "B", "C", "D", "E", "F"];
    let mut asymmetric = 0;
    for _ in 0..10_000 {
        let mut draw = || -> ClassSet {
            let mut set: ClassSet = names.iter().filter(|_| rng.gen_bool(0.4)).map(|s| s.to_string()).collect();
            if set.is_empty() {
                set.insert(names[rng.gen_range(0..names.len())].to_string());
            }
            set
        };
        let (x, y) = (draw(), draw());
        let (xy, yx) = (matching_score(&x, &y), matching_score(&y, &x));
        asymmetric += usize::from(xy.map_err(|e| e.to_string())? != yx.map_err(|e| e.to_string())?);
    }
    ensure(
        asymmetric == 0,
        format!("3 hand cases exact (2, 1, 1), phi asymmetric on {asymmetric} of 10000 pairs"),
    )
}

fn brute_force_matching(n: usize, w: &dyn Fn(usize, usize) -> i64, used: &mut Vec<bool>) -> i64 {
    let Some(i) = (0..n).find(|&i| !used[i]) else {
        return 0;
    };
    used[i] = true;
    let mut best = brute_force_matching(n, w, used);
    for j in i + 1..n {
        if !used[j] {
            used[j] = true;
            best = best.max(w(i, j) + brute_force_matching(n, w, used));
            used[j] = false;
        }
    }
    used[i] = false;
    best
}

fn matching_oracle() -> Outcome {
    let mut rng = urtf::seeded_rng(4);
    let (mut mismatches, mut greedy_short) = (0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(0..=8);
        let table: Vec<i64> = (0..n * n).map(|_| rng.gen_range(0..100)).collect();
        let w = |i: usize, j: usize| table[i.min(j) * n + i.max(j)];
        let graph = PairingGraph::from_weights((0..n).collect(), w);
        let exact = exact_matching(&graph).total_weight;
        let brute = brute_force_matching(n, &w, &mut vec![false; n]);
        mismatches += usize::from(exact != brute);
        greedy_short += usize::from(2 * greedy_matching(&graph).total_weight < exact);
    }
    ensure(
        mismatches == 0 && greedy_short == 0,
        format!("1000 graphs, {mismatches} exact mismatches, greedy below half on {greedy_short}"),
    )
}

fn synthetic_corpus(path: &Path, n: usize, heldout: bool, seed: u64) -> Result<(), String> {
    let dist = gen_distribution(
        &DistConfig {
            heldout,
            ..DistConfig::default()
        },
        7,
    )
    .map_err(|e| e.to_string())?;
    write_corpus(&gen_corpus(&dist, n, seed), path).map_err(|e| e.to_string())?;
    Ok(())
}

fn two_pass_io(dir: &Path) -> Outcome {
    let mut passes = Vec::new();
    let empty = dir.join("empty.jsonl");
    std::fs::write(&empty, "").map_err(|e| e.to_string())?;
    let broken = dir.join("broken.jsonl");
    synthetic_corpus(&broken, 50, false, 1)?;
    let mut text = std::fs::read_to_string(&broken).map_err(|e| e.to_string())?;
    text.push_str("{not json\n");
    std::fs::write(&broken, text).map_err(|e| e.to_string())?;
    let mut inputs = vec![empty, broken];
    for (i, n) in [1usize, 10, 1000, 10_000].into_iter().enumerate() {
        let p = dir.join(format!("io{i}.jsonl"));
        synthetic_corpus(&p, n, false, i as u64)?;
        inputs.push(p);
    }
    for input in &inputs {
        let report = pair_corpus(input, &dir.join("io-out.jsonl"), &PairingConfig::default()).map_err(|e| e.to_string())?;
        passes.push(report.read_passes);
    }
    ensure(passes.iter().all(|&p| p == 2), format!("read passes per run {passes:?}"))
}

fn pairing_efficiency(dir: &Path) -> Outcome {
    let corpus = dir.join("bench.jsonl");
    synthetic_corpus(&corpus, 10_000, false, 42)?;
    let report = bench_pair(&corpus, &dir.join("bench-out.jsonl"), 42).map_err(|e| e.to_string())?;
    let (p, e) = (report.pairing.wall_time_ms, report.episodic.wall_time_ms);
    ensure(
        (p as f64) < 0.2 * e as f64 && p < 30_000,
        format!(
            "pairing {p} ms vs episodic {e} ms ({} seeks), ratio {:.3}",
            report.episodic.seeks,
            p as f64 / e.max(1) as f64
        ),
    )
}

fn autodiff_checks() -> Outcome {
    let eps = 1e-5;
    let primitives = check_primitives(eps, 5).map_err(|e| e.to_string())?;
    let worst_primitive = primitives.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);

    // Shrunken model: 10 tokens, width 1, 50 parameters.
    let tokens = ["<bos>", "<eos>", "(", ")", ":", "[spot]", "[text]", "A", "x", "<extra_id_0>"];
    let vocab = Vocab::new(tokens.iter().map(|s| s.to_string()).collect()).map_err(|e| e.to_string())?;
    let record = parse_sel("((A: x))").map_err(|e| e.to_string())?;
    let schema = Schema::of_record(&record);
    let inst = |id: &str| Instance::new(id, "x", &schema, &record).map_err(|e| e.to_string());
    let task = PairedTask {
        support: inst("s")?,
        query: inst("q")?,
        class: "A".into(),
    };
    let cfg = MetaConfig {
        alpha: 0.4,
        mode: MetaMode::SecondOrder,
        spot_negatives: 0,
        asso_negatives: 0,
        ..MetaConfig::default()
    };
    let prepared = prepare_task(&task, &vocab, &schema, &cfg, &mut urtf::seeded_rng(6)).map_err(|e| e.to_string())?;
    let model = ToyModel::new(vocab.len(), 1, 1.0, 6);
    let n_params = model.params.num_scalars();
    let outer = finite_diff_check(
        |_, p| Ok::<_, MetaError>(outer_loss_on_tape(&ToyObjective, p, &prepared, &cfg)?.total),
        &model.params,
        eps,
    )
    .map_err(|e| e.to_string())?;

    // Quadratic surrogate against (1 - 2 alpha) 2 (theta_1 - b).
    let mut rng = urtf::seeded_rng(7);
    let obj = QuadraticObjective {
        a: Tensor::uniform(&[5], 2.0, &mut rng),
        b: Tensor::uniform(&[5], 2.0, &mut rng),
    };
    let mut theta = ParamStore::new();
    theta.insert("theta", Tensor::uniform(&[5], 2.0, &mut rng));
    let qcfg = MetaConfig {
        alpha: 0.15,
        beta: 0.3,
        ..MetaConfig::default()
    };
    let (next, _) = outer_step(&obj, &theta, &(), &qcfg).map_err(|e| e.to_string())?;
    let t = theta.get("theta").expect("theta").data();
    let closed = (0..5)
        .map(|i| {
            let theta1 = t[i] - qcfg.alpha * 2.0 * (t[i] - obj.a.data()[i]);
            let want = t[i] - qcfg.beta * (1.0 - 2.0 * qcfg.alpha) * 2.0 * (theta1 - obj.b.data()[i]);
            (next.get("theta").expect("theta").data()[i] - want).abs()
        })
        .fold(0.0, f64::max);
    ensure(
        worst_primitive < 1e-3 && n_params <= 50 && outer < 1e-3 && closed < 1e-8,
        format!(
            "{} primitives max rel err {worst_primitive:.2e}; outer loss ({n_params} params) {outer:.2e}; quadratic closed form {closed:.2e}",
            primitives.len()
        ),
    )
}

fn corruption_statistics() -> Outcome {
    let text: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
    let mut rng = urtf::seeded_rng(8);
    let (mut removed, mut spans) = (0usize, 0usize);
    for _ in 0..10_000 {
        let pair = corrupt_text(&text, DEFAULT_CORRUPTION_RATE, DEFAULT_MEAN_SPAN, &mut rng).map_err(|e| e.to_string())?;
        removed += pair.removed_tokens();
        spans += pair.span_count();
    }
    let fraction = removed as f64 / (10_000.0 * 100.0);
    let mean_span = removed as f64 / spans as f64;
    ensure(
        (0.13..=0.17).contains(&fraction) && (2.5..=3.5).contains(&mean_span),
        format!("removed fraction {fraction:.4}, mean span {mean_span:.3}"),
    )
}

fn paired_tasks(dir: &Path, name: &str, n: usize, heldout: bool, seed: u64) -> Result<Vec<PairedTask>, String> {
    let corpus = dir.join(format!("{name}.jsonl"));
    let tasks = dir.join(format!("{name}-tasks.jsonl"));
    synthetic_corpus(&corpus, n, heldout, seed)?;
    pair_corpus(&corpus, &tasks, &PairingConfig::default()).map_err(|e| e.to_string())?;
    read_tasks(&tasks)
        .map_err(|e| e.to_string())?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())
}

fn fast_adaptation(dir: &Path) -> Outcome {
    let start = Instant::now();
    let train = paired_tasks(dir, "meta-train", 2000, false, 1)?;
    let heldout = paired_tasks(dir, "meta-heldout", 200, true, 2)?;
    let heldout = &heldout[..heldout.len().min(40)];
    let base = MetaConfig {
        alpha: 0.3,
        beta: 0.05,
        epochs: 100,
        max_steps: Some(500),
        seed: 3,
        ..MetaConfig::default()
    };
    let mut vocab = Vocab::for_tasks(&train, base.reserved_tokens).map_err(|e| e.to_string())?;
    let init = ToyModel::new(vocab.len(), base.dim, base.init_scale, 5);
    let mut models = Vec::new();
    for mode in [MetaMode::SecondOrder, MetaMode::Simple] {
        let cfg = MetaConfig { mode, ..base.clone() };
        let (model, log) = meta_pretrain(&init, &train, &vocab, &cfg).map_err(|e| e.to_string())?;
        if log.len() != 500 {
            return Err(format!("{mode} ran {} steps", log.len()));
        }
        models.push(model);
    }
    vocab.assign_tasks(heldout).map_err(|e| e.to_string())?;
    let prepared = prepare_tasks(heldout, &vocab, &base, 99).map_err(|e| e.to_string())?;
    let after_one_step = |m: &ToyModel| -> Result<Vec<f64>, String> {
        let curve = evaluate_fast_adaptation(&m.params, &prepared, 1, base.alpha).map_err(|e| e.to_string())?;
        Ok(curve.per_task.iter().map(|c| c[1]).collect())
    };
    let second = after_one_step(&models[0])?;
    let simple = after_one_step(&models[1])?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = sign_test(&second, &simple);
    let elapsed = start.elapsed();
    ensure(
        prepared.len() >= 20 && mean(&second) < mean(&simple) && test.p_two_sided < 0.05 && elapsed < Duration::from_secs(600),
        format!(
            "{} held-out tasks, 1-step query loss second_order {:.4} vs simple {:.4}, wins {}/{}, sign test p = {:.2e} (two-sided), {:.1} s",
            prepared.len(),
            mean(&second),
            mean(&simple),
            test.wins,
            test.wins + test.losses,
            test.p_two_sided,
            elapsed.as_secs_f64()
        ),
    )
}

fn retrieve_then_extract() -> Outcome {
    let record = parse_sel("((PER: Alekseev)(LOC: California))").map_err(|e| e.to_string())?;
    let inst = Instance::new("smoke", "Alekseev moved to California", &Schema::of_record(&record), &record)
        .map_err(|e| e.to_string())?;
    let text = inst.text_tokens();
    let vocab = Vocab::standard(text.iter().cloned().chain(["PER".into(), "LOC".into()]), 0);
    let ssi = build_ssi(&inst.schema(), NameOrder::Lexicographic).map_err(|e| e.to_string())?;
    let target = tokenize_record(&record);
    let retrv = Example::new(&vocab, &assemble_retrieval_input(&ssi, &text).tokens, &target).map_err(|e| e.to_string())?;
    let ext_input = assemble_extraction_input(&ssi, &text, &record).map_err(|e| e.to_string())?;
    let ext = Example::new(&vocab, &ext_input.tokens, &target).map_err(|e| e.to_string())?;
    let mut params = ToyModel::new(vocab.len(), 16, 0.1, 9).params;
    sgd_fit(&mut params, &[retrv, ext], 300, 0.5).map_err(|e| e.to_string())?;
    let out = retrieve_then_extract_inference(&params, &vocab, &ssi, &text, 64);
    let scored = [ScoredInstance {
        text: &inst.text,
        gold: &record,
        pred: &out.prediction,
    }];
    let f1 = score_dataset(&scored, TaskKind::Ner).f1;

    // Grouped scoring over a noisy synthetic dataset.
    let dist = gen_distribution(&DistConfig::default(), 10).map_err(|e| e.to_string())?;
    let corpus = gen_corpus(&dist, 300, 10);
    let mut rng = urtf::seeded_rng(10);
    let gold: Vec<SelRecord> = corpus.iter().map(|i| i.record()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let pred: Vec<SelRecord> = gold
        .iter()
        .map(|g| SelRecord::new(g.groups.iter().filter(|_| rng.gen_bool(0.7)).cloned().collect()))
        .collect();
    let dataset: Vec<ScoredInstance> = corpus
        .iter()
        .zip(gold.iter().zip(&pred))
        .map(|(i, (g, p))| ScoredInstance {
            text: &i.text,
            gold: g,
            pred: p,
        })
        .collect();
    let report = ScoreReport::build(&dataset, TaskKind::Ner, Some(&Buckets::single()));
    let single = report.buckets.as_ref().map(|b| b[0].1);
    ensure(
        f1 == 1.0 && single == Some(report.overall),
        format!(
            "memorized instance F1 {f1:.4}; single bucket {:?} vs global {:?}",
            single.map(|s| s.f1),
            report.overall.f1
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("sel round trip", Box::new(sel_round_trip)),
        ("metric oracle", Box::new(metric_oracle)),
        ("pairing scores", Box::new(pairing_scores)),
        ("matching oracle", Box::new(matching_oracle)),
        ("two-pass i/o", Box::new(|| two_pass_io(dir.path()))),
        ("pairing efficiency", Box::new(|| pairing_efficiency(dir.path()))),
        ("autodiff", Box::new(autodiff_checks)),
        ("corruption statistics", Box::new(corruption_statistics)),
        ("fast adaptation", Box::new(|| fast_adaptation(dir.path()))),
        ("retrieve-then-extract", Box::new(retrieve_then_extract)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
