//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, non-zero exit
//! if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kslt_core::certify::certification_report;
use kslt_core::checkpoint::TensorRecord;
use kslt_core::toytrain::EMBEDDING;
use kslt_core::{
    analyze_pair, count_frequencies, diff_rows, evaluate, generate_task, get_embedding, init_model,
    ks_critical_value, ks_pvalue_asymptotic, ks_pvalue_permutation, ks_statistic, select_by_alpha,
    splice_partial_transfer, tau_from_pvalue_inversion, train, Checkpoint, PredictionRecord,
    ProbSource, Sample, ToyModel, TrainConfig, TrainMode, WinningTicketSet,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z + shift
        })
        .collect()
}

// 1. ------------------------------------------------------------------------

/// Evaluates both empirical CDFs at every observed value by counting.
fn brute_force_statistic(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |xs: &[f64], t: f64| xs.iter().filter(|&&v| v <= t).count() as f64 / xs.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (cdf(a, t) - cdf(b, t)).abs())
        .fold(0.0, f64::max)
}

fn ks_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = rng.gen_range(1..=64);
        let m = rng.gen_range(1..=64);
        // Every other pair is drawn from a coarse grid so ties are common.
        let coarse = trial % 2 == 0;
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| {
                    if coarse {
                        f64::from(rng.gen_range(0..8u8))
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect()
        };
        let (a, b) = (draw(n), draw(m));
        let fast = ks_statistic(
            &Sample::new(a.clone()).unwrap(),
            &Sample::new(b.clone()).unwrap(),
        );
        if fast != brute_force_statistic(&a, &b) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("1000 pairs, {mismatches} mismatches, {elapsed:.2?} (limit 5s)"),
    )
}

// 2. ------------------------------------------------------------------------

fn critical_value() -> Outcome {
    let tau = ks_critical_value(0.05, 4096, 4096).unwrap();
    let mut pass = (tau - 0.030010).abs() <= 1e-6;
    let mut detail = format!("tau(0.05, 4096) = {tau:.7}");
    for d in [256, 1024, 4096] {
        let closed = ks_critical_value(0.05, d, d).unwrap();
        let inverted = tau_from_pvalue_inversion(0.05, d, d).unwrap();
        let rel = (inverted - closed).abs() / closed;
        pass &= rel <= 0.05;
        detail.push_str(&format!("; d={d} inversion rel err {rel:.2e}"));
    }
    outcome(pass, detail)
}

// 3. ------------------------------------------------------------------------

fn pvalue_cross_check() -> Outcome {
    let start = Instant::now();
    let diffs: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
            // Shifts from none to clearly detectable spread the p-values.
            let shift = 0.3 * i as f64 / 49.0;
            let a = Sample::new(normals(&mut rng, 256, 0.0)).unwrap();
            let b = Sample::new(normals(&mut rng, 256, shift)).unwrap();
            let asymptotic = ks_pvalue_asymptotic(ks_statistic(&a, &b), 256, 256, false);
            let permutation = ks_pvalue_permutation(&a, &b, 20_000, 1000 + i).unwrap();
            (asymptotic - permutation).abs()
        })
        .collect();
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        worst <= 0.03 && elapsed < Duration::from_secs(60),
        format!("50 pairs, max |asymptotic - permutation| = {worst:.4} (limit 0.03), {elapsed:.2?} (limit 60s)"),
    )
}

// 4. ------------------------------------------------------------------------

fn random_checkpoint_pair(
    rng: &mut ChaCha8Rng,
    v: usize,
    d: usize,
    name: &str,
) -> (Checkpoint, Checkpoint) {
    let base: Vec<f32> = (0..v * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tuned = base.clone();
    for row in tuned.chunks_mut(d) {
        // Per-row change ranging from untouched to a large shift.
        let scale: f32 = match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 0.01,
            2 => 0.1,
            _ => 0.5,
        };
        for x in row.iter_mut() {
            *x += scale * rng.gen_range(-0.5f32..1.0);
        }
    }
    let mk = |data: Vec<f32>| {
        Checkpoint::new(vec![TensorRecord::new(name, vec![v, d], data).unwrap()]).unwrap()
    };
    (mk(base), mk(tuned))
}

fn nestedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (base, tuned) = random_checkpoint_pair(&mut rng, 512, 128, "w");
    let scores = analyze_pair(
        &get_embedding(&base, "w").unwrap(),
        &get_embedding(&tuned, "w").unwrap(),
    )
    .unwrap();
    let alphas = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    let sets: Vec<BTreeSet<usize>> = alphas
        .iter()
        .map(|&a| {
            select_by_alpha(&scores, a, 128)
                .unwrap()
                .token_ids
                .into_iter()
                .collect()
        })
        .collect();
    let nested = sets.windows(2).all(|w| w[0].is_subset(&w[1]));
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    outcome(
        nested,
        format!("V=512 d=128, set sizes over alpha {alphas:?}: {sizes:?}"),
    )
}

// 5. ------------------------------------------------------------------------

fn splice_exactness() -> Outcome {
    let mut failures = Vec::new();
    for fixture in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + fixture);
        let v = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=32);
        let (mut base, mut tuned) = random_checkpoint_pair(&mut rng, v, d, EMBEDDING);
        // An unrelated tensor must pass through from the base side.
        let bias: Vec<f32> = (0..d).map(|_| rng.gen()).collect();
        let other: Vec<f32> = (0..d).map(|_| rng.gen()).collect();
        base.tensors
            .push(TensorRecord::new("bias", vec![d], bias).unwrap());
        tuned
            .tensors
            .push(TensorRecord::new("bias", vec![d], other).unwrap());

        let set = |ids: Vec<usize>| WinningTicketSet {
            method: kslt_core::Method::Ks,
            alpha: None,
            tau: None,
            vocab_size: v,
            token_ids: ids,
        };
        let k = rng.gen_range(0..=v);
        let mut picked = index::sample(&mut rng, v, k).into_vec();
        picked.sort_unstable();
        let tickets = set(picked);

        let full =
            splice_partial_transfer(&base, &tuned, EMBEDDING, &set((0..v).collect())).unwrap();
        let empty = splice_partial_transfer(&base, &tuned, EMBEDDING, &set(Vec::new())).unwrap();
        let partial = splice_partial_transfer(&base, &tuned, EMBEDDING, &tickets).unwrap();

        let bytes = |c: &Checkpoint, name: &str| -> Vec<u8> {
            c.tensor(name)
                .unwrap()
                .data
                .iter()
                .flat_map(|x| x.to_le_bytes())
                .collect()
        };
        let full_ok = bytes(&full, EMBEDDING) == bytes(&tuned, EMBEDDING)
            && bytes(&full, "bias") == bytes(&base, "bias");
        let empty_ok = empty.to_bytes().unwrap() == base.to_bytes().unwrap();
        let changed = diff_rows(&partial, &base, EMBEDDING).unwrap();
        let subset_ok = changed.iter().all(|id| tickets.contains(*id));
        if !(full_ok && empty_ok && subset_ok) {
            failures.push(fixture);
        }
    }
    outcome(
        failures.is_empty(),
        format!("100 fixtures, failing: {failures:?}"),
    )
}

// 6. ------------------------------------------------------------------------

fn random_log(rng: &mut ChaCha8Rng, n: usize, classes: u64) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let p1: f64 = rng.gen_range(1.0 / classes as f64..1.0);
            // Strictly below p1, so no record sits exactly on a zero gap.
            let p2 = (1.0 - p1).min(p1) * rng.gen_range(0.0..0.999);
            let reference = rng.gen_range(0..classes);
            let tuned_prediction = if rng.gen_bool(0.7) {
                reference
            } else {
                rng.gen_range(0..classes)
            };
            PredictionRecord {
                example_id: (i / 20) as u64,
                position: (i % 20) as u64,
                reference_token: reference,
                tuned_prediction,
                p1,
                p2,
                partial_prediction: None,
                base_p1: None,
                base_p2: None,
            }
        })
        .collect()
}

fn certification_ordering() -> Outcome {
    let alphas = [0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0];
    let mut problems = Vec::new();
    for log_seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + log_seed);
        let records = random_log(&mut rng, 400, 8);
        for d in [16, 64, 256] {
            for first_k in [None, Some(20), Some(5)] {
                let reports: Vec<_> = alphas
                    .iter()
                    .map(|&a| {
                        certification_report(&records, a, d, ProbSource::Tuned, first_k).unwrap()
                    })
                    .collect();
                let monotone = reports
                    .windows(2)
                    .all(|w| w[0].certified_accuracy <= w[1].certified_accuracy);
                let bounded = reports
                    .iter()
                    .all(|r| r.certified_accuracy <= r.tuned_accuracy);
                let last = reports.last().unwrap();
                let equal_at_one = last.certified_accuracy == last.tuned_accuracy;
                if !(monotone && bounded && equal_at_one) {
                    problems.push((log_seed, d, first_k));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "20 logs x 3 dims x 3 filters over {} alphas, violations: {problems:?}",
            alphas.len()
        ),
    )
}

// 7. ------------------------------------------------------------------------

const CLASSES: usize = 8;
const ROWS: usize = 4;
const ROW_DIM: usize = 64;
const MC_ALPHA: f64 = 0.5;

/// A randomized predictor driven by `ROWS` parameter rows. A value drawn from
/// row `r` votes for `anchor` if it is at most `threshold[r]` and for
/// `other[r]` otherwise; a fixed component `prior` is mixed in with weight
/// `1 - sum(weights)`. The class probabilities are therefore exact linear
/// functions of the rows' empirical CDFs at the thresholds.
struct Predictor {
    anchor: usize,
    other: [usize; ROWS],
    threshold: [f64; ROWS],
    weights: [f64; ROWS],
    prior: [f64; CLASSES],
    rows: Vec<Vec<f64>>,
}

impl Predictor {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let anchor = rng.gen_range(0..CLASSES);
        let mut other = [0; ROWS];
        for o in &mut other {
            *o = loop {
                let c = rng.gen_range(0..CLASSES);
                if c != anchor {
                    break c;
                }
            };
        }
        let rows: Vec<Vec<f64>> = (0..ROWS).map(|_| normals(rng, ROW_DIM, 0.0)).collect();
        let mut threshold = [0.0; ROWS];
        for t in &mut threshold {
            *t = rng.gen_range(-0.5..1.5);
        }
        let row_mass: f64 = rng.gen_range(0.3..1.0);
        let mut weights = [0.0; ROWS];
        let raw: Vec<f64> = (0..ROWS).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in weights.iter_mut().zip(&raw) {
            *w = row_mass * r / total;
        }
        let mut prior = [0.0; CLASSES];
        let raw: Vec<f64> = (0..CLASSES)
            .map(|_| rng.gen_range(0.0..1.0f64).powi(3))
            .collect();
        let total: f64 = raw.iter().sum();
        for (p, r) in prior.iter_mut().zip(&raw) {
            *p = (1.0 - row_mass) * r / total;
        }
        Predictor {
            anchor,
            other,
            threshold,
            weights,
            prior,
            rows,
        }
    }

    fn probabilities(&self, rows: &[Vec<f64>]) -> [f64; CLASSES] {
        let mut p = self.prior;
        for r in 0..ROWS {
            let below =
                rows[r].iter().filter(|&&v| v <= self.threshold[r]).count() as f64 / ROW_DIM as f64;
            p[self.anchor] += self.weights[r] * below;
            p[self.other[r]] += self.weights[r] * (1.0 - below);
        }
        p
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn top_two(p: &[f64]) -> (f64, f64) {
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[0], sorted[1])
}

/// Replaces at most `budget` values of `row`; the strategy cycles between
/// pushing values across the threshold (the worst case for the anchor
/// class), pulling them below it, and random redraws.
fn perturb(
    row: &[f64],
    threshold: f64,
    budget: usize,
    strategy: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = row.to_vec();
    let k = rng.gen_range(0..=budget);
    match strategy % 3 {
        0 => {
            let mut moved = 0;
            for v in out.iter_mut() {
                if moved == k {
                    break;
                }
                if *v <= threshold {
                    *v = threshold + rng.gen_range(0.01..2.0);
                    moved += 1;
                }
            }
        }
        1 => {
            let mut moved = 0;
            for v in out.iter_mut() {
                if moved == k {
                    break;
                }
                if *v > threshold {
                    *v = threshold - rng.gen_range(0.0..2.0);
                    moved += 1;
                }
            }
        }
        _ => {
            for i in index::sample(rng, row.len(), k) {
                out[i] = rng.gen_range(-4.0..4.0);
            }
        }
    }
    out
}

fn certified_stability() -> Outcome {
    let start = Instant::now();
    let tau = ks_critical_value(MC_ALPHA, ROW_DIM, ROW_DIM).unwrap();
    let budget = (tau * ROW_DIM as f64).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut predictors = Vec::new();
    // Inputs the anchor wins without a certificate: the same perturbations
    // should be able to flip some of them, showing the search has teeth.
    let mut controls = Vec::new();
    let mut candidates = 0;
    while predictors.len() < 500 {
        candidates += 1;
        let p = Predictor::random(&mut rng);
        let probs = p.probabilities(&p.rows);
        let (p1, p2) = top_two(&probs);
        if argmax(&probs) == p.anchor {
            if (p1 - p2) / 2.0 > tau {
                predictors.push(p);
            } else if controls.len() < 100 {
                controls.push(p);
            }
        }
    }
    let tightest = predictors
        .iter()
        .map(|p| {
            let (p1, p2) = top_two(&p.probabilities(&p.rows));
            (p1 - p2) / 2.0 - tau
        })
        .fold(f64::INFINITY, f64::min);

    let search = |p: &Predictor, seed: u64, trials: usize| -> (usize, usize, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let originals: Vec<Sample> = p
            .rows
            .iter()
            .map(|r| Sample::new(r.clone()).unwrap())
            .collect();
        let (mut flips, mut over_budget, mut worst_distance) = (0usize, 0usize, 0.0f64);
        for trial in 0..trials {
            let rows: Vec<Vec<f64>> = (0..ROWS)
                .map(|r| perturb(&p.rows[r], p.threshold[r], budget, trial + r, &mut rng))
                .collect();
            for (row, original) in rows.iter().zip(&originals) {
                let distance = ks_statistic(&Sample::new(row.clone()).unwrap(), original);
                worst_distance = worst_distance.max(distance);
                if distance > tau {
                    over_budget += 1;
                }
            }
            if argmax(&p.probabilities(&rows)) != p.anchor {
                flips += 1;
            }
        }
        (flips, over_budget, worst_distance)
    };
    let results: Vec<(usize, usize, f64)> = predictors
        .par_iter()
        .enumerate()
        .map(|(i, p)| search(p, 70_000 + i as u64, 10_000))
        .collect();
    let flipped_controls = controls
        .par_iter()
        .enumerate()
        .filter(|(i, p)| search(p, 90_000 + *i as u64, 1_000).0 > 0)
        .count();

    let flips: usize = results.iter().map(|r| r.0).sum();
    let over_budget: usize = results.iter().map(|r| r.1).sum();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        flips == 0 && over_budget == 0 && elapsed < Duration::from_secs(120),
        format!(
            "tau={tau:.4}, 500 certified inputs ({candidates} drawn, tightest margin {tightest:.4}), 5,000,000 perturbations, \
             max row KS distance {worst:.4}, {over_budget} over tau, {flips} flips, {elapsed:.2?} (limit 120s); \
             control: {flipped_controls} of {} uncertified inputs flipped",
            controls.len()
        ),
    )
}

// 8 and 9. --------------------------------------------------------------------

const TOY_VOCAB: usize = 256;
const TOY_DIM: usize = 64;
const TOY_PAIRS: usize = 4000;
const TOY_LR: f64 = 1.0;
const TOY_EPOCHS: usize = 20;

struct ToyRun {
    seed: u64,
    base: f64,
    embed: f64,
    tickets: usize,
    partial: f64,
    transfer: f64,
    frozen: f64,
    ticket_median: f64,
    other_median: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

fn toy_run(seed: u64) -> ToyRun {
    let task = generate_task(seed, TOY_VOCAB, TOY_PAIRS, 1.0).unwrap();
    let base = init_model(seed + 100, TOY_VOCAB, TOY_DIM).unwrap();
    let config = |mode: TrainMode| {
        let mut c = TrainConfig::new(mode, seed);
        c.learning_rate = TOY_LR;
        c.epochs = TOY_EPOCHS;
        c
    };
    let (embed, _) = train(&base, &task, &config(TrainMode::Embed)).unwrap();

    let base_ckpt = base.to_checkpoint().unwrap();
    let embed_ckpt = embed.to_checkpoint().unwrap();
    let scores = analyze_pair(
        &get_embedding(&base_ckpt, EMBEDDING).unwrap(),
        &get_embedding(&embed_ckpt, EMBEDDING).unwrap(),
    )
    .unwrap();
    let tickets = select_by_alpha(&scores, 0.05, TOY_DIM).unwrap();

    let (partial, _) = train(
        &base,
        &task,
        &config(TrainMode::Partial).with_tickets(tickets.clone()),
    )
    .unwrap();
    let (frozen, _) = train(
        &base,
        &task,
        &config(TrainMode::FrozenComplement).with_tickets(tickets.clone()),
    )
    .unwrap();
    let spliced = splice_partial_transfer(&base_ckpt, &embed_ckpt, EMBEDDING, &tickets).unwrap();
    let transfer = ToyModel::from_checkpoint(&spliced).unwrap();

    let counts = count_frequencies(task.sources(), TOY_VOCAB).unwrap();
    let membership = tickets.membership();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (id, &c) in counts.iter().enumerate() {
        if membership[id] {
            inside.push(c as f64);
        } else {
            outside.push(c as f64);
        }
    }
    ToyRun {
        seed,
        base: evaluate(&base, &task).unwrap(),
        embed: evaluate(&embed, &task).unwrap(),
        tickets: tickets.len(),
        partial: evaluate(&partial, &task).unwrap(),
        transfer: evaluate(&transfer, &task).unwrap(),
        frozen: evaluate(&frozen, &task).unwrap(),
        ticket_median: median(inside),
        other_median: median(outside),
    }
}

fn toy_pipeline(runs: &[ToyRun], elapsed: Duration) -> Outcome {
    let mut pass = elapsed < Duration::from_secs(180);
    let mut detail = Vec::new();
    for r in runs {
        let gain = r.embed - r.base;
        let partial_share = (r.partial - r.base) / gain;
        let transfer_share = (r.transfer - r.base) / gain;
        let a = r.embed >= 0.9;
        let b = r.tickets > 0 && r.tickets < TOY_VOCAB / 2;
        let c = gain > 0.0 && partial_share >= 0.9;
        let d = gain > 0.0 && transfer_share >= 0.8;
        let e = r.frozen < r.partial;
        pass &= a && b && c && d && e;
        detail.push(format!(
            "seed {}: base {:.3} embed {:.3}{} tickets {}{} partial {:.3} ({:.0}% of gain){} transfer {:.3} ({:.0}%){} frozen {:.3}{}",
            r.seed,
            r.base,
            r.embed,
            mark(a),
            r.tickets,
            mark(b),
            r.partial,
            100.0 * partial_share,
            mark(c),
            r.transfer,
            100.0 * transfer_share,
            mark(d),
            r.frozen,
            mark(e),
        ));
    }
    detail.push(format!("{elapsed:.2?} (limit 180s)"));
    outcome(pass, detail.join("; "))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        ""
    } else {
        " (!)"
    }
}

fn frequency_property(runs: &[ToyRun]) -> Outcome {
    let pass = runs.iter().all(|r| r.ticket_median > r.other_median);
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: tickets {} vs others {}",
                r.seed, r.ticket_median, r.other_median
            )
        })
        .collect();
    outcome(
        pass,
        format!("median source frequency, {}", detail.join("; ")),
    )
}

// 10. -----------------------------------------------------------------------

fn kslt(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kslt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "kslt {args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Runs the whole pipeline into `dir/<tag>/`.
fn cli_pipeline(dir: &Path, tag: &str) -> Result<Vec<String>, String> {
    fs::create_dir_all(dir.join(tag)).map_err(|e| e.to_string())?;
    let o = |name: &str| format!("{tag}/{name}");
    let steps: Vec<Vec<String>> = vec![
        vec!["toy gen --seed 11 --vocab 48 --pairs 600 --zipf 1.1".into(), format!("--out {} --corpus-out {}", o("task.csv"), o("corpus.txt"))],
        vec!["toy init --seed 12 --vocab 48 --dim 16".into(), format!("--out {}", o("base.kslt"))],
        vec![format!("toy train --model {} --task {} --mode embed --lr 1 --epochs 8 --seed 13", o("base.kslt"), o("task.csv")), format!("--out {} --loss-out {}", o("embed.kslt"), o("loss.csv"))],
        vec![format!("toy train --model {} --task {} --mode full --lr 0.5 --epochs 3 --seed 13", o("base.kslt"), o("task.csv")), format!("--out {}", o("full.kslt"))],
        vec![format!("freq --corpus {} --vocab 48", o("corpus.txt")), format!("--out {}", o("counts.csv"))],
        vec![format!("freq --corpus {} --vocab 48 --top-k 5", o("corpus.txt")), format!("--out {}", o("top.csv"))],
        vec![format!("analyze --base {} --tuned {} --tensor embedding --freq {}", o("base.kslt"), o("embed.kslt"), o("counts.csv")), format!("--out {}", o("scores.csv"))],
        vec![format!("select --scores {} --alpha 0.05 --dim 16", o("scores.csv")), format!("--out {}", o("tickets.toml"))],
        vec![format!("select --scores {} --method kl --top-k 6", o("scores.csv")), format!("--out {}", o("kl.toml"))],
        vec![format!("mask --tickets {} --complement", o("tickets.toml")), format!("--out {}", o("mask.txt"))],
        vec![format!("transfer --base {} --tuned {} --tensor embedding --tickets {}", o("base.kslt"), o("embed.kslt"), o("tickets.toml")), format!("--out {}", o("spliced.kslt"))],
        vec![format!("toy train --model {} --task {} --mode partial --tickets {} --lr 1 --epochs 8 --seed 14", o("base.kslt"), o("task.csv"), o("tickets.toml")), format!("--out {}", o("partial.kslt"))],
        vec![format!("toy train --model {} --task {} --mode frozen_complement --tickets {} --lr 1 --epochs 4 --seed 14", o("base.kslt"), o("task.csv"), o("tickets.toml")), format!("--out {}", o("frozen.kslt"))],
        vec![format!("toy eval --model {} --task {}", o("spliced.kslt"), o("task.csv")), format!("--out {}", o("eval.toml"))],
        vec![format!("toy predict-log --tuned {} --partial {} --base {} --task {}", o("embed.kslt"), o("partial.kslt"), o("base.kslt"), o("task.csv")), format!("--out {}", o("log.csv"))],
        vec![format!("certify --log {} --dim 16 --alpha 0.01,0.05,0.5,1 --prob-source base --first-k 20", o("log.csv")), format!("--out {}", o("report.toml"))],
    ];
    let mut outputs = Vec::new();
    for step in steps {
        let line = step.join(" ");
        let args: Vec<&str> = line.split_whitespace().collect();
        kslt(dir, &args)?;
        for pair in args.windows(2) {
            if pair[0].ends_with("out") {
                outputs.push(pair[1].trim_start_matches(&format!("{tag}/")).to_string());
            }
        }
    }
    fs::write(dir.join(tag).join("m.csv"), "0.5,-1,2\n3,4.25,-6\n").map_err(|e| e.to_string())?;
    kslt(
        dir,
        &[
            "import-csv",
            "--csv",
            &o("m.csv"),
            "--tensor",
            "w",
            "--out",
            &o("m.kslt"),
        ],
    )?;
    outputs.push("m.kslt".into());
    Ok(outputs)
}

fn cli_determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("tempdir: {e}")),
    };
    let run = || -> Result<(usize, Vec<String>), String> {
        let outputs = cli_pipeline(dir.path(), "a")?;
        cli_pipeline(dir.path(), "b")?;
        let mut differing = Vec::new();
        for name in &outputs {
            let a = fs::read(dir.path().join("a").join(name)).map_err(|e| e.to_string())?;
            let b = fs::read(dir.path().join("b").join(name)).map_err(|e| e.to_string())?;
            if a != b {
                differing.push(name.clone());
            }
        }
        Ok((outputs.len(), differing))
    };
    match run() {
        Ok((n, differing)) => outcome(
            differing.is_empty(),
            format!("{n} output files from every subcommand, differing: {differing:?}"),
        ),
        Err(e) => outcome(false, e),
    }
}

// ----------------------------------------------------------------------------

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 KS statistic matches brute force", ks_oracle()),
        ("2 critical value and p-value inversion", critical_value()),
        ("3 asymptotic vs permutation p-values", pvalue_cross_check()),
        ("4 ticket sets nested in alpha", nestedness()),
        ("5 splice exactness", splice_exactness()),
        ("6 certification ordering", certification_ordering()),
        ("7 certified predictions never flip", certified_stability()),
    ];
    let start = Instant::now();
    let runs: Vec<ToyRun> = [1u64, 2, 3].into_par_iter().map(toy_run).collect();
    let elapsed = start.elapsed();
    results.push(("8 toy pipeline", toy_pipeline(&runs, elapsed)));
    results.push(("9 tickets are frequent tokens", frequency_property(&runs)));
    results.push(("10 CLI determinism", cli_determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "[{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
