//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `WIDTHLAB_SCALE=desk` (default) runs the configs in `configs/desk`,
//! `WIDTHLAB_SCALE=full` the ones in `configs/full`. Completed cells are
//! reused on a rerun; delete the output directory (printed first) to start
//! over. `WIDTHLAB_ACCEPTANCE_ONLY=1,7` restricts the run to some criteria.
//!
//! The process exits 0 whatever the verdicts, so a FAIL line is a result,
//! not a crash. Errors inside a criterion are reported as FAIL with the
//! error text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use widthlab::injection::{late_abs_cosine, median, RetentionCell};
use widthlab::mixture::{build_mixture, MixtureSpec};
use widthlab::neuron::{
    decay_after_gap, decay_closed_form, expected_drift, monte_carlo_drift, simulate_gated, GatedConfig, TwoTaskConfig,
};
use widthlab::oracle::{feature_utilities, retained_counts};
use widthlab::runner::io::{read_rows, Checkpoint};
use widthlab::runner::{
    residual_rows, run_experiment, sweep_cell_id, write_oracles, CellSummary, ExperimentOutcome, ExperimentSpec,
    RunOptions, SummaryRow,
};
use widthlab::scaling_law::{
    asymptotic_loss, classify, constrained_loss, largest_small_model, largest_small_model_bisect, Scalability,
    ScalingLawParams,
};
use widthlab::student::{EncoderFrame, Encoder};
use widthlab::trainer::BoundTally;
use widthlab::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

struct Suite {
    scale: String,
    out: PathBuf,
    /// Outcomes by config name, so later criteria reuse earlier runs.
    runs: BTreeMap<String, ExperimentOutcome>,
}

impl Suite {
    fn config(&self, name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(&self.scale).join(format!("{name}.toml"))
    }

    fn spec(&self, name: &str) -> Result<ExperimentSpec> {
        ExperimentSpec::from_path(&self.config(name))
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn run(&mut self, name: &str) -> Result<&ExperimentOutcome> {
        if !self.runs.contains_key(name) {
            let spec = self.spec(name)?;
            let t = Instant::now();
            let outcome = run_experiment(&spec, &RunOptions::new(self.dir(name)))?;
            eprintln!(
                "  [{name}] {} cells, {} reused, {} failed, {:.0}s",
                outcome.records.len(),
                outcome.resumed,
                outcome.failed(),
                t.elapsed().as_secs_f64()
            );
            self.runs.insert(name.to_string(), outcome);
        }
        Ok(&self.runs[name])
    }

    fn summary(&mut self, name: &str) -> Result<Vec<SummaryRow>> {
        self.run(name)?;
        read_rows(&self.dir(name).join("summary.csv"))
    }
}

fn frac(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn loss_agreement(rows: &[SummaryRow]) -> (usize, usize, usize) {
    let ok = rows.iter().filter(|r| (r.loss_norm - r.oracle_loss_norm).abs() <= 0.05).count();
    let ok_dec = rows.iter().filter(|r| (r.decoder_loss_norm - r.oracle_loss_norm).abs() <= 0.05).count();
    (ok, ok_dec, rows.len())
}

fn c1_staircase(s: &mut Suite) -> Result<Verdict> {
    let rows = s.summary("rank1_staircase")?;
    let mut wrong = Vec::new();
    for r in &rows {
        let learned = r.signal > 0.5;
        let predicted = r.width > r.task;
        if learned != predicted {
            wrong.push(format!("(k={}, N={}, s={:.2})", r.task + 1, r.width, r.signal));
        }
    }
    let shown: Vec<_> = wrong.iter().take(6).cloned().collect();
    verdict(
        !rows.is_empty() && wrong.is_empty(),
        format!("{} of {} (task, width) cells misclassified {}", wrong.len(), rows.len(), shown.join(" ")),
    )
}

fn c2_loss_oracle(s: &mut Suite) -> Result<Verdict> {
    let rows = s.summary("phase")?;
    let (ok, ok_dec, n) = loss_agreement(&rows);
    verdict(
        n > 0 && frac(ok, n) >= 0.9,
        format!(
            "{ok}/{n} cells within 0.05 ({:.1}%, need 90%); trained decoders: {:.1}%",
            100.0 * frac(ok, n),
            100.0 * frac(ok_dec, n)
        ),
    )
}

fn c3_residual(s: &mut Suite) -> Result<Verdict> {
    let rows = s.summary("phase")?;
    let spec = s.spec("phase")?;
    let mixtures = write_oracles(&spec, &s.dir("phase"))?;
    let res = residual_rows(&mixtures, &rows);
    let (mut above, mut below, mut excluded, mut between) = (0, 0, 0, 0);
    let mut bad = Vec::new();
    for r in &res {
        let t = r.threshold;
        if (r.residual_f - t).abs() <= 0.2 * t {
            excluded += 1;
        } else if r.residual_f > t {
            above += 1;
            if !(r.signal_rare_norm < 0.1) {
                bad.push(format!("(beta={}, N={}, s={}: d={:.3e} > {:.3e}, s_r={:.2})", r.beta, r.width, r.seed, r.residual_f, t, r.signal_rare_norm));
            }
        } else if r.residual_f < 0.5 * t {
            below += 1;
            if !(r.signal_rare_norm > 0.8) {
                bad.push(format!("(beta={}, N={}, s={}: d={:.3e} < {:.3e}/2, s_r={:.2})", r.beta, r.width, r.seed, r.residual_f, t, r.signal_rare_norm));
            }
        } else {
            between += 1;
        }
    }
    let shown: Vec<_> = bad.iter().take(4).cloned().collect();
    verdict(
        !res.is_empty() && bad.is_empty(),
        format!(
            "{} runs: {above} above threshold, {below} below half, {between} in between, {excluded} within 20%; {} violations {}",
            res.len(),
            bad.len(),
            shown.join(" ")
        ),
    )
}

fn c4_bound(s: &mut Suite) -> Result<Verdict> {
    let mut tally = BoundTally::default();
    let mut runs = 0;
    for name in ["rank1_staircase", "phase", "complexity_sweep", "retention"] {
        let outcome = s.run(name)?;
        for rec in &outcome.records {
            let t = match &rec.summary {
                Some(CellSummary::Sweep { bound, .. }) => bound,
                Some(CellSummary::Retention(cell)) => &cell.bound,
                _ => continue,
            };
            runs += 1;
            tally.merge(t);
        }
    }
    verdict(
        tally.checks > 0 && tally.violations == 0,
        format!(
            "{} violations over {} evaluations in {runs} runs; worst excess {:.3e}",
            tally.violations,
            tally.checks,
            tally.worst_excess.unwrap_or(f64::NAN)
        ),
    )
}

fn retention_cells(s: &mut Suite) -> Result<Vec<RetentionCell>> {
    let outcome = s.run("retention")?;
    Ok(outcome
        .records
        .iter()
        .filter_map(|r| match &r.summary {
            Some(CellSummary::Retention(c)) if c.error.is_none() => Some(c.clone()),
            _ => None,
        })
        .collect())
}

fn c5_retention(s: &mut Suite) -> Result<Verdict> {
    let cells = retention_cells(s)?;
    let spec = s.spec("retention")?;
    let mut gaps = spec.retention.as_ref().map(|r| r.gaps.clone()).unwrap_or_default();
    gaps.sort_unstable();
    let med = |n: usize, g: usize| {
        let mut v: Vec<f64> = cells
            .iter()
            .filter(|c| c.width == n && c.gap == g)
            .filter_map(|c| c.final_point().map(|p| p.signal_rare_norm))
            .collect();
        median(&mut v)
    };
    let narrow: Vec<Option<f64>> = gaps.iter().map(|&g| med(32, g)).collect();
    let wide: Vec<Option<f64>> = gaps.iter().map(|&g| med(256, g)).collect();
    let fmt = |v: &[Option<f64>]| v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:.3}"))).collect::<Vec<_>>().join(", ");
    if narrow.iter().chain(&wide).any(Option::is_none) {
        return verdict(false, format!("missing cells: N=32 [{}], N=256 [{}]", fmt(&narrow), fmt(&wide)));
    }
    let narrow: Vec<f64> = narrow.into_iter().flatten().collect();
    let wide: Vec<f64> = wide.into_iter().flatten().collect();
    let monotone = narrow.windows(2).all(|w| w[1] <= w[0]);
    let stable = wide.iter().all(|v| (v - wide[0]).abs() <= 0.1);
    verdict(
        monotone && stable,
        format!(
            "median final rare signal over G = {gaps:?}: N=32 [{}] (monotone: {monotone}), N=256 [{}] (within 0.1 of G=64: {stable})",
            fmt(&narrow.iter().map(|&x| Some(x)).collect::<Vec<_>>()),
            fmt(&wide.iter().map(|&x| Some(x)).collect::<Vec<_>>())
        ),
    )
}

fn c6_cosine(s: &mut Suite) -> Result<Verdict> {
    let cells = retention_cells(s)?;
    let med = |n: usize| {
        let mut v: Vec<f64> = cells.iter().filter(|c| c.width == n).filter_map(|c| late_abs_cosine(c, 0.25)).collect();
        median(&mut v)
    };
    match (med(32), med(256)) {
        (Some(a), Some(b)) => {
            let ratio = a / b;
            verdict(ratio >= 2.0, format!("late median |cos|: N=32 {a:.4}, N=256 {b:.4}, ratio {ratio:.2} (need >= 2)"))
        }
        (a, b) => verdict(false, format!("no cosine data: N=32 {a:?}, N=256 {b:?}")),
    }
}

fn c7_decay(_: &mut Suite) -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for eta in [0.01, 0.003] {
        for gap in [50, 100, 200] {
            let sim = decay_after_gap(0.1, eta, gap);
            let closed = decay_closed_form(0.1, eta, gap);
            worst = worst.max((sim - closed).abs() / closed);
        }
    }
    let cfg = TwoTaskConfig::new(0.9, 0.01)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let mut signs = Vec::new();
    for theta in [0.3, std::f64::consts::FRAC_PI_4, 1.2] {
        let (mean, se) = monte_carlo_drift(theta, &cfg, 100_000, &mut rng);
        let expected = expected_drift(theta, cfg.p, cfg.q(), cfg.eta);
        signs.push(mean.signum() == expected.signum() && mean.abs() > 3.0 * se);
    }
    let drift_ok = signs.iter().all(|&b| b);
    verdict(
        worst <= 0.1 && drift_ok,
        format!("worst relative decay error {:.2}% (limit 10%); drift sign at 3 SE: {signs:?}", 100.0 * worst),
    )
}

fn c8_gated(_: &mut Suite) -> Result<Verdict> {
    let cfg = GatedConfig::default();
    let mut two = Vec::new();
    let mut one = Vec::new();
    for seed in 0..10u64 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1000 + seed);
        two.push(simulate_gated(2, &cfg, &mut rng)?.min_rare_after_burn_in());
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2000 + seed);
        one.push(simulate_gated(1, &cfg, &mut rng)?.max_rare_after_burn_in());
    }
    let (m2, m1) = (median(&mut two).unwrap_or(f64::NAN), median(&mut one).unwrap_or(f64::NAN));
    verdict(
        m2 > 0.9 && m1 < 0.2,
        format!("median over 10 seeds: 2-neuron min rare alignment {m2:.3} (> 0.9), 1-neuron max rare alignment {m1:.3} (< 0.2)"),
    )
}

fn random_spec<R: Rng>(rng: &mut R) -> MixtureSpec {
    let k = rng.gen_range(1..=8);
    let dt = rng.gen_range(1..=4);
    let d = k * dt + rng.gen_range(0..=8);
    let beta = rng.gen_range(0.0..3.0);
    let mut spec = if rng.gen_bool(0.5) {
        MixtureSpec::uniform(d, k, dt, beta, rng.gen_range(0.3..3.0))
    } else {
        let lo = rng.gen_range(0.3..1.5);
        MixtureSpec::with_alpha_range(d, k, dt, beta, lo, lo + rng.gen_range(0.0..2.0))
    };
    spec.input_std = rng.gen_range(0.5..2.0);
    spec
}

fn c9_eigen(_: &mut Suite) -> Result<Verdict> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    let mut eig_err: f64 = 0.0;
    let mut kyfan_excess = f64::NEG_INFINITY;
    let mut encoders = 0;
    for i in 0..100 {
        let model = build_mixture(random_spec(&mut rng), i)?;
        let m = model.mixture_covariance();
        let mut eig: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let mut util = feature_utilities(&model).values();
        util.resize(model.ambient_dim(), 0.0);
        for (a, b) in eig.iter().zip(&util) {
            eig_err = eig_err.max((a - b).abs());
        }
        for _ in 0..10 {
            let d = model.ambient_dim();
            let n = rng.gen_range(1..=d);
            let w = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let p = EncoderFrame::new(&Encoder::new(w))?.projector();
            let captured = (p * &m).trace();
            let ceiling: f64 = eig.iter().take(n).sum();
            kyfan_excess = kyfan_excess.max(captured - ceiling);
            encoders += 1;
        }
    }
    verdict(
        eig_err <= 1e-10 && kyfan_excess <= 1e-8,
        format!(
            "100 mixtures: max |eig - utility| {eig_err:.2e} (<= 1e-10); {encoders} encoders: max Ky Fan excess {kyfan_excess:.2e} (<= 1e-8)"
        ),
    )
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn c10_classifier(_: &mut Suite) -> Result<Verdict> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
    let (mut worst, mut mismatched, mut both, mut tally) = (0.0f64, 0, 0, [0usize; 3]);
    for _ in 0..1000 {
        let p = ScalingLawParams {
            l0: rng.gen_range(0.0..3.0),
            a: log_uniform(&mut rng, 1.0, 1e4),
            b: log_uniform(&mut rng, 1.0, 1e4),
            alpha: rng.gen_range(0.1..1.5),
            beta: rng.gen_range(0.1..1.5),
            gamma: None,
            flops_per_param_token: 6.0,
        };
        let compute = log_uniform(&mut rng, 1e15, 1e25);
        let n_large = log_uniform(&mut rng, 1e3, compute / 6.0 / 1e3);
        let n_small = n_large * log_uniform(&mut rng, 1e-4, 1.0);
        let eps = log_uniform(&mut rng, 1e-5, 0.5);
        let closed = largest_small_model(&p, n_large, compute, eps)?;
        let bisect = largest_small_model_bisect(&p, n_large, compute, eps, 1e-9)?;
        match (closed, bisect) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs() / a),
            (None, None) => {}
            _ => mismatched += 1,
        }
        let lc_l = constrained_loss(&p, n_large, compute)?;
        let lc_s = constrained_loss(&p, n_small, compute)?;
        let linf_s = asymptotic_loss(&p, n_small)?;
        let data = lc_s - lc_l > 0.0 && linf_s - lc_l < 0.0;
        let model = linf_s - lc_l > eps;
        if data && model {
            both += 1;
        }
        match classify(&p, n_small, n_large, compute, eps)? {
            Scalability::DataScalable => tally[0] += 1,
            Scalability::ModelScalingRequired => tally[1] += 1,
            Scalability::Neither => tally[2] += 1,
        }
    }
    verdict(
        worst <= 1e-6 && mismatched == 0 && both == 0,
        format!(
            "1000 draws: max closed-form vs bisection rel err {worst:.2e} (<= 1e-6), {mismatched} existence mismatches, {both} draws in both classes; data/model/neither = {tally:?}"
        ),
    )
}

fn c11_complexity(s: &mut Suite) -> Result<Verdict> {
    let rows = s.summary("complexity_sweep")?;
    let (ok, _, n) = loss_agreement(&rows);
    let spec = s.spec("complexity_sweep")?;
    let mix = spec.mixture.as_ref().expect("sweep has a mixture");
    let dir = s.dir("complexity_sweep");
    let mut example = None;
    let mut predicted = false;
    for &beta in &mix.betas {
        let model = build_mixture(mix.spec_for(beta), spec.seed)?;
        for &width in &spec.widths {
            let counts = retained_counts(&model, width);
            predicted |= counts.windows(2).any(|w| w[0] < w[1]);
            for seed in 0..spec.seeds {
                let path = dir.join("runs").join(sweep_cell_id(beta, width, seed)).join("checkpoint.json");
                let student = Checkpoint::load(&path)?.to_student()?;
                let frame = EncoderFrame::new(&student.encoder)?;
                let learned = |k: usize, j: usize| frame.coord_capture(model.feature_coord(k, j)) > 0.5;
                // a rarer task holds mode j while a more frequent task does not
                'search: for hi in 0..model.num_tasks() {
                    for lo in hi + 1..model.num_tasks() {
                        for j in 1..model.block_dim() {
                            if learned(lo, j) && !learned(hi, j) && example.is_none() {
                                example = Some(format!("beta={beta}, N={width}: task {} mode {} learned, task {} mode {} not", lo + 1, j + 1, hi + 1, j + 1));
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
    }
    let agree = frac(ok, n) >= 0.9;
    verdict(
        agree && example.is_some(),
        format!(
            "non-monotone boundary: {} (oracle predicts one: {predicted}); loss agreement {ok}/{n} ({:.1}%, need 90%)",
            example.as_deref().unwrap_or("none found"),
            100.0 * frac(ok, n)
        ),
    )
}

type Criterion = fn(&mut Suite) -> Result<Verdict>;

fn main() {
    let scale = std::env::var("WIDTHLAB_SCALE").unwrap_or_else(|_| "desk".into());
    let out = std::env::var("WIDTHLAB_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{scale}")));
    let only: Option<Vec<usize>> = std::env::var("WIDTHLAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    println!("acceptance suite, scale = {scale}, output in {}", out.display());
    let mut suite = Suite { scale, out, runs: BTreeMap::new() };

    let criteria: [(usize, &str, Criterion); 11] = [
        (1, "rank-1 staircase", c1_staircase),
        (2, "loss-oracle agreement", c2_loss_oracle),
        (3, "residual threshold", c3_residual),
        (4, "frequent-gradient bound", c4_bound),
        (5, "retention surface", c5_retention),
        (6, "gradient-cosine decoupling", c6_cosine),
        (7, "one-neuron decay law", c7_decay),
        (8, "gated specialization", c8_gated),
        (9, "eigen-oracle equivalence", c9_eigen),
        (10, "classifier consistency", c10_classifier),
        (11, "complexity sweeps", c11_complexity),
    ];
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("SKIP {id:>2} {name}");
            continue;
        }
        let t = Instant::now();
        let v = f(&mut suite).unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        ran += 1;
        if v.pass {
            passed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}
