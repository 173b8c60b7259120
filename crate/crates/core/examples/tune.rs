//! Scratch hyperparameter probe (not part of the library).

use std::time::Instant;

use gbpgr::tasks::{
    gen_attribute_dataset, gen_digit_dataset, gen_multi_digit_dataset, digit_domains,
    glyph_template, make_addition_rules, Split, TaskLabel,
};
use gbpgr::ground::ValueDomains;
use gbpgr::logic::parse_rules;
use gbpgr::train::{evaluate, explain_dataset, train, EvalMode, TrainConfig};
use rand::{Rng, SeedableRng};

const ATTR_RULES: &str = "\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred horselike/1 latent
pred white_black/1 latent
pred stripe/1 latent
pred leopard/1
pred tiger/1
pred zebra/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x)
R2: likecat(x) & tawny(x) & stripe(x) => tiger(x)
R3: horselike(x) & white_black(x) & stripe(x) => zebra(x)
";

fn get(args: &[String], key: &str, default: f64) -> f64 {
    args.iter()
        .find_map(|a| a.strip_prefix(&format!("{key}=")))
        .map(|v| v.parse().unwrap())
        .unwrap_or(default)
}

fn cfg_from(args: &[String], seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: get(args, "alpha", 1.0),
        beta: get(args, "beta", 1.0),
        gamma: get(args, "gamma", 1.0),
        em_rounds: get(args, "rounds", 30.0) as usize,
        e_passes: get(args, "passes", 5.0) as usize,
        m_steps: get(args, "msteps", 10.0) as usize,
        lr_theta1: get(args, "lr1", 1e-3),
        lr_theta2: get(args, "lr2", 1e-3),
        lr_w: get(args, "lrw", 0.05),
        batch: get(args, "batch", 64.0) as usize,
        seed,
        hidden_dim: get(args, "hidden", 64.0) as usize,
        feature_dim: get(args, "feature", 16.0) as usize,
        l_cro_form: if args.iter().any(|a| a == "form=conv") {
            gbpgr::neural::CrossEntropyForm::Conventional
        } else {
            gbpgr::neural::CrossEntropyForm::PaperLiteral
        },
        ..TrainConfig::default()
    }
}

fn digit_exp(args: &[String]) {
    let noise = get(args, "noise", 0.1);
    let n_seeds = get(args, "seeds", 5.0) as u64;
    let rules = make_addition_rules(1).unwrap();
    let domains = digit_domains(1).unwrap();
    let mut margins = Vec::new();
    let mut wins = 0;
    for seed in 0..n_seeds {
        let mut data = gen_digit_dataset(seed, 300, noise).unwrap();
        let test = gen_digit_dataset(seed + 1000, 200, noise)
            .unwrap()
            .with_split(Split::Test);
        data.items.extend(test.items);
        let full_cfg = cfg_from(args, seed);
        let base_cfg = TrainConfig {
            beta: 0.0,
            gamma: 0.0,
            ..full_cfg.clone()
        };
        let t0 = Instant::now();
        let full = train(&full_cfg, &data, &rules, &domains).unwrap();
        let t_full = t0.elapsed();
        let facc = evaluate(&full.checkpoint, &data, EvalMode::Transductive, None)
            .unwrap()
            .metrics
            .acc;
        if args.iter().any(|a| a == "decomp") {
            let ck = &full.checkpoint;
            let ruleset = parse_rules(&ck.ruleset_text).unwrap();
            let racc = evaluate(ck, &data, EvalMode::Inductive, Some(&ruleset))
                .unwrap()
                .metrics
                .acc;
            let space = gbpgr::train::derive_label_binding(&ruleset, &ck.domains)
                .unwrap()
                .label_space();
            let mut hit = 0;
            let mut n = 0;
            for item in data.items.iter().filter(|i| i.split == Split::Test) {
                let inputs = data.inputs(item);
                let fwd = ck.task_net.forward(std::slice::from_ref(&inputs)).unwrap();
                if space.label_at(fwd.labels[0].hard) == item.label {
                    hit += 1;
                }
                n += 1;
            }
            println!(
                "  decomp: fused={facc:.4} rules_only={racc:.4} head_only={:.4}",
                hit as f64 / n as f64
            );
        }
        let t0 = Instant::now();
        let base = train(&base_cfg, &data, &rules, &domains).unwrap();
        let t_base = t0.elapsed();
        let bacc = evaluate(&base.checkpoint, &data, EvalMode::Transductive, None)
            .unwrap()
            .metrics
            .acc;
        let margin = (facc - bacc) * 100.0;
        if facc > bacc {
            wins += 1;
        }
        margins.push(margin);
        let d = full.diagnostics.last().unwrap();
        println!(
            "seed={seed} full={facc:.4} base={bacc:.4} margin={margin:+.1} t_full={t_full:.1?} t_base={t_base:.1?} last: obj={:.1} tacc={:.3}",
            d.objective, d.train_acc
        );
    }
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    println!("wins={wins}/{n_seeds} mean_margin={mean:+.2}");
}

fn inductive_exp(args: &[String]) {
    let noise = get(args, "noise", 0.1);
    let seed = get(args, "seed", 0.0) as u64;
    let rules = make_addition_rules(1).unwrap();
    let domains = digit_domains(1).unwrap();
    let mut data = gen_digit_dataset(seed, 300, noise).unwrap();
    let test = gen_digit_dataset(seed + 1000, 200, noise)
        .unwrap()
        .with_split(Split::Test);
    data.items.extend(test.items);
    let cfg = cfg_from(args, seed);
    let t0 = Instant::now();
    let full = train(&cfg, &data, &rules, &domains).unwrap();
    let d = full.diagnostics.last().unwrap();
    println!(
        "train {:.1?} w={:?} tacc={:.3} o_logic={:.1}",
        t0.elapsed(),
        full.checkpoint.weights.as_slice(),
        d.train_acc,
        d.o_logic
    );
    let ck = &full.checkpoint;

    // Per-digit concept accuracy with the same corruption process.
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(777);
    let mut hit = 0;
    let mut total = 0;
    let mut confusion = [[0usize; 10]; 10];
    let graph = gbpgr::ground::ground_rules(
        &parse_rules(&ck.ruleset_text).unwrap(),
        &gbpgr::ground::ConstantTable::of_size(2),
        &ck.domains,
        ck.config.grounding_cap,
    )
    .unwrap();
    for digit in 0..10usize {
        for _ in 0..100 {
            let mut glyph = glyph_template(digit);
            for px in &mut glyph {
                if rng.gen_bool(noise) {
                    *px ^= 1;
                }
            }
            let item = vec![
                glyph.iter().map(|&b| b as f64).collect::<Vec<f64>>(),
                vec![0.0; 64],
            ];
            let fwd = ck.task_net.forward(std::slice::from_ref(&item)).unwrap();
            let mut best = (f64::MIN, 0i64);
            for v in 0..=9i64 {
                let probe = graph
                    .atoms
                    .iter()
                    .find(|a| a.predicate == "digit" && a.entity_args == [0] && a.value_args == [v])
                    .unwrap();
                let s = ck.concept_net.score(probe, &fwd.features[0]).unwrap();
                if s > best.0 {
                    best = (s, v);
                }
            }
            confusion[digit][best.1 as usize] += 1;
            if best.1 == digit as i64 {
                hit += 1;
            }
            total += 1;
        }
    }
    let p = hit as f64 / total as f64;
    if args.iter().any(|a| a == "confusion") {
        for (d, row) in confusion.iter().enumerate() {
            let s: Vec<String> = row.iter().map(|c| format!("{c:3}")).collect();
            println!("true {d}: {}", s.join(" "));
        }
    }

    let data2 = gen_multi_digit_dataset(9, get(args, "n2", 400.0) as usize, noise)
        .unwrap()
        .with_split(Split::Test);
    let rules2 = make_addition_rules(2).unwrap();
    let t0 = Instant::now();
    let acc2 = evaluate(ck, &data2, EvalMode::Inductive, Some(&rules2))
        .unwrap()
        .metrics
        .acc;
    println!(
        "p={p:.4} p^4={:.4} acc2={acc2:.4} |diff|={:.4} eval2 {:.1?}",
        p.powi(4),
        (acc2 - p.powi(4)).abs(),
        t0.elapsed()
    );
}

fn attr_exp(args: &[String]) {
    let noise = get(args, "noise", 0.05);
    let per_class = get(args, "per_class", 25.0) as usize;
    let seed = get(args, "seed", 0.0) as u64;
    let rules = parse_rules(ATTR_RULES).unwrap();
    let domains = ValueDomains::default();
    let data = gen_attribute_dataset(seed, per_class, noise, &rules, 1).unwrap();
    let cfg = cfg_from(args, seed);
    let t0 = Instant::now();
    let full = train(&cfg, &data, &rules, &domains).unwrap();
    println!("train {:.1?}", t0.elapsed());
    let acc = evaluate(&full.checkpoint, &data, EvalMode::Transductive, None)
        .unwrap()
        .metrics
        .acc;
    let explained = explain_dataset(&full.checkpoint, &data).unwrap();
    let mut correct = 0;
    let mut rank_first = 0;
    let mut max_err: f64 = 0.0;
    for item in &explained {
        if item.prediction != item.truth {
            continue;
        }
        correct += 1;
        let class = match &item.truth {
            TaskLabel::Class(c) => c.clone(),
            TaskLabel::Sum(_) => unreachable!(),
        };
        if let Some(ev) = &item.explanation.evidence {
            let heads: Vec<&str> = ev.rule.head.iter().map(|a| a.predicate.as_str()).collect();
            if heads.contains(&class.as_str()) {
                rank_first += 1;
            }
            let product: f64 = ev.atom_scores.iter().map(|(_, s)| s).product();
            max_err = max_err.max((product - ev.posterior).abs());
        }
    }
    println!(
        "acc={acc:.4} correct={correct}/{} rank_first={rank_first}/{correct} max_posterior_err={max_err:.2e}",
        explained.len()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("digit") => digit_exp(&args[1..]),
        Some("inductive") => inductive_exp(&args[1..]),
        Some("attr") => attr_exp(&args[1..]),
        other => panic!("unknown experiment {other:?}"),
    }
}
