//! Per-subcommand dispatch: resolve the spec, run the module operation,
//! write tidy outputs atomically, and return a run record.

use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;

use toruslab_core::algebra::{rat_from_str, rat_to_string, TorusPoint};
use toruslab_core::fp::{
    build_group_table, fp_orbit_census, gap_dichotomy_verdict, lv_decay_run, reduce_spec_mod_p,
    regular_rep_gap, FpWalkSpec, GapDichotomyVerdict,
};
use toruslab_core::margulis::{
    alpha_energy, checkerboard_decompose, diagonal_mass, fit_contraction_detailed,
    margulis_inequality_check, EnergyParams, PushMode,
};
use toruslab_core::orbit::{
    distance_to_pq_upper, orbit_closure, orbit_height, solve_integer_linear_approx,
    LinearFormSystem,
};
use toruslab_core::spectral::{decay_scan, trapping_lowerbound_check, weyl_scan, Frequency};
use toruslab_core::walk::{
    estimate_lyapunov, exact_pushforward, monte_carlo_measure, FiniteMeasure, WalkSpec,
};

use crate::builtin::{self, NamedSpec};
use crate::config::{parse_point, write_atomic, ExperimentConfig, RunRecord, SpecSource};
use crate::suite;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Ctx {
    fn mode(&self) -> Option<&str> {
        self.cfg.mode.as_deref()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Resolve the torus spec (named or inline) and any distinguished
    /// starting point the name carries.
    fn torus_spec(&self) -> Result<(WalkSpec, Option<TorusPoint>), String> {
        match &self.cfg.spec {
            None => Ok((builtin::std_sl2(), None)),
            Some(SpecSource::Named(name)) => match builtin::by_name(name) {
                Some(NamedSpec::Torus(spec, x)) => Ok((spec, x)),
                Some(NamedSpec::Fp(..)) => {
                    Err(format!("spec {name} lives on F_p^d, not the torus"))
                }
                None => Err(format!("unknown spec name {name}")),
            },
            Some(SpecSource::Inline(dto)) => Ok((dto.build(self.mode())?, None)),
        }
    }

    fn fp_spec(&self) -> Result<(FpWalkSpec, Option<Vec<u64>>), String> {
        if let Some(SpecSource::Named(name)) = &self.cfg.spec {
            if let Some(NamedSpec::Fp(spec, x0)) = builtin::by_name(name) {
                return Ok((spec, x0));
            }
        }
        let (torus, _) = self.torus_spec()?;
        let p = self.cfg.p.unwrap_or(5);
        let reduced = reduce_spec_mod_p(&torus, p).map_err(|e| e.to_string())?;
        Ok((reduced, None))
    }

    fn point(&self, fallback: Option<TorusPoint>) -> Result<TorusPoint, String> {
        if let Some(coords) = &self.cfg.x {
            return parse_point(coords, self.mode());
        }
        fallback.ok_or_else(|| "missing x".to_string())
    }

    fn frequency(&self) -> Frequency {
        Frequency(self.cfg.a.clone().unwrap_or_else(|| vec![1, 0]))
    }

    fn n_list(&self) -> Vec<usize> {
        if let Some(list) = &self.cfg.n_list {
            return list.clone();
        }
        (0..=self.cfg.n.unwrap_or(60)).collect()
    }
}

pub fn dispatch(command: &str, ctx: &Ctx) -> Result<RunRecord, String> {
    if let Some(declared) = &ctx.cfg.command {
        if declared != command {
            return Err(format!(
                "config declares command {declared:?} but {command:?} was invoked"
            ));
        }
    }
    let start = Instant::now();
    let (outputs, verdicts) = match command {
        "orbit" => cmd_orbit(ctx)?,
        "height" => cmd_height(ctx)?,
        "pq-distance" => cmd_pq_distance(ctx)?,
        "simulate" => cmd_simulate(ctx)?,
        "decay-scan" => cmd_decay_scan(ctx)?,
        "weyl" => cmd_weyl(ctx)?,
        "trap-check" => cmd_trap_check(ctx)?,
        "lyapunov" => cmd_lyapunov(ctx)?,
        "energy" => cmd_energy(ctx)?,
        "ch-fit" => cmd_ch_fit(ctx)?,
        "margulis-check" => cmd_margulis_check(ctx)?,
        "decompose" => cmd_decompose(ctx)?,
        "fp-census" => cmd_fp_census(ctx)?,
        "fp-evolve" => cmd_fp_evolve(ctx)?,
        "fp-gap" => cmd_fp_gap(ctx)?,
        "fp-dichotomy" => cmd_fp_dichotomy(ctx)?,
        "solzlin" => cmd_solzlin(ctx)?,
        "verify-all" => cmd_verify_all(ctx)?,
        other => return Err(format!("unknown command {other}")),
    };
    let record = RunRecord {
        command: command.to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ctx.cfg.hash(),
        elapsed_ms: start.elapsed().as_millis(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        verdicts,
    };
    let record_json = serde_json::to_string_pretty(&record).expect("serializable");
    write_atomic(&ctx.out("run_record.json"), &record_json)?;
    Ok(record)
}

type CmdOut = (Vec<PathBuf>, serde_json::Value);

fn cmd_orbit(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let cap = ctx.cfg.cap.unwrap_or(1_000_000);
    let report = orbit_closure(&spec, &x, cap).map_err(|e| e.to_string())?;
    let path = ctx.out("orbit.json");
    write_atomic(&path, &report.to_json())?;
    let verdicts = json!({
        "finite": report.finite,
        "height_q": report.height_q.to_string(),
        "orbit_size": report.orbit_size,
        "enumeration_capped": report.enumeration_capped,
    });
    Ok((vec![path], verdicts))
}

fn cmd_height(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let q = orbit_height(&spec, &x).map_err(|e| e.to_string())?;
    let path = ctx.out("height.json");
    write_atomic(&path, &json!({ "height_q": q.to_string() }).to_string())?;
    Ok((vec![path], json!({ "height_q": q.to_string() })))
}

fn cmd_pq_distance(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let q_max = ctx.cfg.q_max.unwrap_or(3);
    let resolution = ctx.cfg.r.unwrap_or(1e-9);
    let depth = ctx.cfg.steps.unwrap_or(12) as u32;
    let bound = distance_to_pq_upper(&spec, &x, q_max, resolution, depth);
    let path = ctx.out("pq.json");
    let body = json!({
        "bound": bound.bound,
        "q_max": q_max,
        "witness": serde_json::from_str::<serde_json::Value>(&bound.witness.to_json()).unwrap(),
    });
    write_atomic(&path, &serde_json::to_string_pretty(&body).unwrap())?;
    Ok((vec![path], json!({ "bound": bound.bound })))
}

fn cmd_simulate(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let n = ctx.cfg.n.unwrap_or(10);
    let samples = ctx.cfg.samples.unwrap_or(1000);
    let sample = monte_carlo_measure(&spec, &x, n, samples, ctx.seed);
    let mut csv = String::new();
    for i in 0..sample.dim {
        if i > 0 {
            csv.push(',');
        }
        csv.push_str(&format!("x{}", i + 1));
    }
    csv.push('\n');
    for p in &sample.points {
        let row: Vec<String> = p.iter().map(|c| format!("{c}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let path = ctx.out("endpoints.csv");
    write_atomic(&path, &csv)?;
    Ok((
        vec![path],
        json!({ "n": n, "samples": samples, "fingerprint": sample.spec_fingerprint }),
    ))
}

fn cmd_decay_scan(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let a = ctx.frequency();
    let n_list = ctx.n_list();
    let samples = ctx.cfg.samples.unwrap_or(10_000);
    let report = decay_scan(&spec, &x, &a, &n_list, samples, ctx.seed);
    let csv_path = ctx.out("decay.csv");
    write_atomic(&csv_path, &report.to_csv())?;
    let json_path = ctx.out("decay.json");
    write_atomic(&json_path, &report.to_json())?;
    let verdicts = json!({
        "first_value": report.series.first().map(|p| p.value),
        "last_value": report.series.last().map(|p| p.value),
        "fitted_rate": report.fitted_rate.map(|f| f.rate),
    });
    Ok((vec![csv_path, json_path], verdicts))
}

fn cmd_weyl(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let n = ctx.cfg.n.unwrap_or(0);
    let samples = ctx.cfg.samples.unwrap_or(10_000);
    let a_max = ctx.cfg.a_max.unwrap_or(3);
    let sample = monte_carlo_measure(&spec, &x, n, samples, ctx.seed);
    let scan = weyl_scan(&sample.to_cloud(), a_max);
    let mut csv = String::new();
    for i in 0..spec.dim() {
        csv.push_str(&format!("a{},", i + 1));
    }
    csv.push_str("modulus\n");
    for (a, m) in &scan.table {
        for c in a {
            csv.push_str(&format!("{c},"));
        }
        csv.push_str(&format!("{m}\n"));
    }
    let path = ctx.out("weyl.csv");
    write_atomic(&path, &csv)?;
    Ok((
        vec![path],
        json!({ "max_modulus": scan.max_modulus, "argmax": scan.argmax.0 }),
    ))
}

fn cmd_trap_check(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let q = ctx.cfg.q_max.unwrap_or(3);
    let a = Frequency(ctx.cfg.a.clone().unwrap_or_else(|| vec![q as i64, 0]));
    let n_list = ctx.n_list();
    let samples = ctx.cfg.samples.unwrap_or(10_000);
    let report = trapping_lowerbound_check(&spec, &x, q, &a, &n_list, samples, ctx.seed)
        .map_err(|e| e.to_string())?;
    let mut csv = String::from("n,value,stderr\n");
    for p in &report.series {
        csv.push_str(&format!("{},{},{}\n", p.n, p.value, p.stderr));
    }
    let csv_path = ctx.out("trap.csv");
    write_atomic(&csv_path, &csv)?;
    let verdicts = json!({
        "exact_trap": report.exact_trap,
        "fitted_c": report.fitted_c,
        "n1_high": report.n1_high,
        "crossover": report.crossover,
        "n2_low": report.n2_low,
    });
    let json_path = ctx.out("trap.json");
    write_atomic(&json_path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![csv_path, json_path], verdicts))
}

fn cmd_lyapunov(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, _) = ctx.torus_spec()?;
    let n = ctx.cfg.n.unwrap_or(10_000);
    let chains = ctx.cfg.samples.unwrap_or(32);
    let est = estimate_lyapunov(&spec, n, chains, ctx.seed);
    let verdicts = json!({
        "lambda1_hat": est.lambda1_hat,
        "standard_error": est.standard_error,
        "n_steps": est.n_steps,
        "n_chains": est.n_chains,
    });
    let path = ctx.out("lyapunov.json");
    write_atomic(&path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path], verdicts))
}

fn cmd_energy(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let alpha = ctx.cfg.alpha.unwrap_or(1.0);
    let steps = ctx.cfg.steps.unwrap_or(0);
    let cap = ctx.cfg.cap.unwrap_or(1_000_000);
    let nu = exact_pushforward(&spec, &FiniteMeasure::dirac(&x), steps, cap)
        .map_err(|e| e.to_string())?;
    let verdicts = json!({
        "alpha": alpha,
        "steps": steps,
        "support": nu.support_size(),
        "alpha_energy": alpha_energy(&nu, alpha),
        "diagonal_mass": diagonal_mass(&nu),
    });
    let path = ctx.out("energy.json");
    write_atomic(&path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path], verdicts))
}

fn cmd_ch_fit(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, _) = ctx.torus_spec()?;
    let alpha = ctx.cfg.alpha.unwrap_or(0.05);
    let m = ctx.cfg.m.unwrap_or(20);
    let pairs = ctx.cfg.pairs.unwrap_or(1000);
    let walks = ctx.cfg.walks.unwrap_or(1000);
    let (fit, samples) = fit_contraction_detailed(&spec, alpha, m, pairs, walks, ctx.seed);
    let mut csv = String::from("pair_id,distance,estimate,near_diagonal\n");
    for (i, s) in samples.iter().enumerate() {
        let distance = s.v.powf(-1.0 / alpha);
        csv.push_str(&format!("{i},{distance},{},{}\n", s.estimate, s.near_diagonal));
    }
    let csv_path = ctx.out("chfit_pairs.csv");
    write_atomic(&csv_path, &csv)?;
    let verdicts = json!({
        "m": fit.m,
        "a_hat": fit.a_hat,
        "c_hat": fit.c_hat,
        "pair_count": fit.pair_count,
        "max_residual": fit.max_residual,
        "contractive": fit.contractive,
    });
    let json_path = ctx.out("chfit.json");
    write_atomic(&json_path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![csv_path, json_path], verdicts))
}

fn cmd_margulis_check(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let params = EnergyParams::new(ctx.cfg.alpha.unwrap_or(0.1), ctx.cfg.lambda.unwrap_or(0.2));
    let n2 = ctx.cfg.steps.unwrap_or(8);
    let rho = ctx.cfg.rho.unwrap_or(0.1);
    let c2 = ctx.cfg.c2.unwrap_or(0.0);
    let nu = FiniteMeasure::dirac(&x);
    let mode = if spec.is_exact() && x.is_exact() {
        PushMode::Exact { support_cap: ctx.cfg.cap.unwrap_or(1_000_000) }
    } else {
        PushMode::MonteCarlo { n_samples: ctx.cfg.samples.unwrap_or(20_000) }
    };
    let check = margulis_inequality_check(&spec, &nu, params, n2, rho, c2, mode, ctx.seed)
        .map_err(|e| e.to_string())?;
    let verdicts = json!({
        "lhs": check.lhs,
        "rhs": check.rhs,
        "slack": check.slack,
        "holds": check.holds,
        "ball_mass": check.ball.mass,
        "ball_upper_bound": check.ball.upper_bound,
        "ball_stderr": check.ball_stderr,
        "diagonal": check.diagonal,
        "energy": check.energy,
    });
    let path = ctx.out("margulis.json");
    write_atomic(&path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path], verdicts))
}

fn cmd_decompose(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x) = ctx.torus_spec()?;
    let x = ctx.point(named_x)?;
    let r = ctx.cfg.r.unwrap_or(0.3);
    let f_kind = ctx.cfg.f_kind.clone().unwrap_or_else(|| "one".into());
    let f: Box<dyn Fn(&[f64]) -> f64> = match f_kind.as_str() {
        "one" => Box::new(|_: &[f64]| 1.0),
        "half" => Box::new(|x: &[f64]| {
            (0.5 + 0.5 * (std::f64::consts::TAU * x[0]).sin()).clamp(0.0, 1.0)
        }),
        other => return Err(format!("unknown f_kind {other}")),
    };
    // the decomposed measure: uniform on the enumerated orbit in exact
    // mode, a Monte Carlo cloud otherwise
    let nu = if x.is_exact() && spec.is_exact() {
        let report = orbit_closure(&spec, &x, ctx.cfg.cap.unwrap_or(10_000))
            .map_err(|e| e.to_string())?;
        match report.orbit_points {
            Some(points) => FiniteMeasure::uniform_exact(points),
            None => FiniteMeasure::dirac(&x),
        }
    } else {
        let n = ctx.cfg.n.unwrap_or(10);
        let samples = ctx.cfg.samples.unwrap_or(1000);
        let sample = monte_carlo_measure(&spec, &x, n, samples, ctx.seed);
        FiniteMeasure::from_float_atoms(
            sample
                .points
                .iter()
                .map(|p| (p.clone(), 1.0 / sample.points.len() as f64))
                .collect(),
        )
    };
    let (prime, cert) = checkerboard_decompose(&nu, r, f.as_ref(), ctx.seed)
        .map_err(|e| e.to_string())?;
    let mut csv = String::new();
    for i in 0..spec.dim() {
        csv.push_str(&format!("x{},", i + 1));
    }
    csv.push_str("weight\n");
    let cloud = prime.to_cloud();
    for (p, w) in cloud.coords.iter().zip(&cloud.weights) {
        for c in p {
            csv.push_str(&format!("{c},"));
        }
        csv.push_str(&format!("{w}\n"));
    }
    let csv_path = ctx.out("support.csv");
    write_atomic(&csv_path, &csv)?;
    let diagonal_exact = toruslab_core::margulis::diagonal_mass_exact(&prime)
        .map(|d| toruslab_core::algebra::rat_to_string(&d));
    let verdicts = json!({
        "all_ok": cert.all_ok(),
        "diagonal_value_exact": diagonal_exact,
        "pigeonhole_ok": cert.pigeonhole_ok,
        "diagonal_ok": cert.diagonal_ok,
        "separation_ok": cert.separation_ok,
        "f_integral_nu": cert.f_integral_nu,
        "f_integral_nu_prime": cert.f_integral_nu_prime,
        "diagonal_value": cert.diagonal_value,
        "diagonal_bound": cert.diagonal_bound,
        "min_separation": cert.min_separation,
        "box_side": cert.box_side,
        "support": prime.support_size(),
    });
    let json_path = ctx.out("decompose.json");
    write_atomic(&json_path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![csv_path, json_path], verdicts))
}

fn cmd_fp_census(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, _) = ctx.fp_spec()?;
    let census = fp_orbit_census(&spec);
    let mut csv = String::from("orbit_id,size\n");
    for (id, size) in census.orbit_sizes.iter().enumerate() {
        csv.push_str(&format!("{id},{size}\n"));
    }
    let path = ctx.out("census.csv");
    write_atomic(&path, &csv)?;
    let verdicts = json!({
        "p": spec.p(),
        "d": spec.dim(),
        "fingerprint": spec.fingerprint(),
        "orbits": census.orbit_sizes.len(),
        "zero_is_singleton": census.zero_is_singleton,
        "nonzero_orbits_large": census.nonzero_orbits_large,
    });
    Ok((vec![path], verdicts))
}

fn cmd_fp_evolve(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x0) = ctx.fp_spec()?;
    let x0 = ctx
        .cfg
        .x0
        .clone()
        .or(named_x0)
        .unwrap_or_else(|| {
            let mut v = vec![0u64; spec.dim()];
            v[0] = 1;
            v
        });
    let n = ctx.cfg.n.unwrap_or(50);
    let report = lv_decay_run(&spec, &x0, n, None, None);
    let mut csv = String::from("l,l2,linf,l4_hat\n");
    for row in &report.rows {
        csv.push_str(&format!("{},{},{},{}\n", row.l, row.l2, row.linf, row.l4_hat));
    }
    let path = ctx.out("fp_norms.csv");
    write_atomic(&path, &csv)?;
    let verdicts = json!({
        "p": spec.p(),
        "d": spec.dim(),
        "fingerprint": spec.fingerprint(),
        "first_passage_19p": report.first_passage_19p,
        "first_passage_orbit": report.first_passage_orbit,
        "orbit_l2_bound": report.orbit_l2_bound,
        "fixed_point_branch": report.fixed_point_branch,
    });
    Ok((vec![path], verdicts))
}

fn cmd_fp_gap(ctx: &Ctx) -> Result<CmdOut, String> {
    let (torus, _) = ctx.torus_spec()?;
    let p = ctx.cfg.p.unwrap_or(5);
    let symmetrize = ctx.cfg.symmetrize.unwrap_or(true);
    let spec = if symmetrize {
        builtin::symmetrize_linear(&torus, p)
    } else {
        reduce_spec_mod_p(&torus, p).map_err(|e| e.to_string())?
    };
    let table = build_group_table(spec.matrices(), ctx.cfg.cap.unwrap_or(10_000))
        .map_err(|e| e.to_string())?;
    let w = spec.weights_f64();
    let k_max = ctx.cfg.k.unwrap_or(12);
    let g = regular_rep_gap(&table, &w, 1);
    let mut csv = String::from("k,norm,g_pow_k\n");
    let mut rows = Vec::new();
    for k in 1..=k_max {
        let norm = regular_rep_gap(&table, &w, k);
        csv.push_str(&format!("{k},{norm},{}\n", g.powi(k as i32)));
        rows.push(norm);
    }
    let path = ctx.out("gap.csv");
    write_atomic(&path, &csv)?;
    let k_star = (1..=256u32).find(|&k| g.powi(k as i32) <= 2f64.powi(-5));
    let verdicts = json!({
        "p": p,
        "d": spec.dim(),
        "fingerprint": spec.fingerprint(),
        "seed": ctx.seed,
        "group_order": table.order(),
        "gap": g,
        "k_star_for_2^-5": k_star,
        "submultiplicative": rows
            .iter()
            .enumerate()
            .all(|(i, &n)| n <= g.powi(i as i32 + 1) + 1e-9),
    });
    let json_path = ctx.out("gap.json");
    write_atomic(&json_path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path, json_path], verdicts))
}

fn cmd_fp_dichotomy(ctx: &Ctx) -> Result<CmdOut, String> {
    let (spec, named_x0) = ctx.fp_spec()?;
    let x0 = ctx.cfg.x0.clone().or(named_x0);
    let n_max = ctx.cfg.n.unwrap_or(40);
    let epsilon = ctx.cfg.epsilon.unwrap_or(0.3);
    let verdict = gap_dichotomy_verdict(&spec, x0.as_deref(), n_max, epsilon)
        .map_err(|e| e.to_string())?;
    let verdicts = match &verdict {
        GapDichotomyVerdict::Trapped { x, y, mass, fixed_point, fixed_point_unique } => json!({
            "verdict": "TRAPPED",
            "x": x,
            "y": y,
            "mass": mass,
            "fixed_point": fixed_point,
            "fixed_point_unique": fixed_point_unique,
        }),
        GapDichotomyVerdict::Decay { worst_start, report, fitted_c } => json!({
            "verdict": "DECAY",
            "worst_start": worst_start,
            "fitted_c": fitted_c,
            "first_passage_orbit": report.first_passage_orbit,
            "final_linf": report.rows.last().map(|r| r.linf),
        }),
    };
    let path = ctx.out("dichotomy.json");
    write_atomic(&path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path], verdicts))
}

fn cmd_solzlin(ctx: &Ctx) -> Result<CmdOut, String> {
    let forms = ctx.cfg.forms.clone().ok_or("solzlin needs `forms`")?;
    let point_str = ctx.cfg.point.clone().ok_or("solzlin needs `point`")?;
    let radius = rat_from_str(ctx.cfg.radius.as_deref().ok_or("solzlin needs `radius`")?)?;
    let dim = point_str.len();
    let sys = LinearFormSystem::from_rows(dim, &forms);
    let point = point_str
        .iter()
        .map(|s| rat_from_str(s))
        .collect::<Result<Vec<_>, _>>()?;
    let out = solve_integer_linear_approx(&sys, &point, &radius).map_err(|e| e.to_string())?;
    let verdicts = json!({
        "q": out.q.to_string(),
        "kernel_part": out.kernel_part.iter().map(rat_to_string).collect::<Vec<_>>(),
        "lattice_part": out.lattice_part.iter().map(rat_to_string).collect::<Vec<_>>(),
        "remainder": out.remainder.iter().map(rat_to_string).collect::<Vec<_>>(),
        "remainder_norm_sq": rat_to_string(&out.remainder_norm_sq()),
        "remainder_bound_sq": rat_to_string(&out.remainder_bound_sq),
    });
    let path = ctx.out("solzlin.json");
    write_atomic(&path, &serde_json::to_string_pretty(&verdicts).unwrap())?;
    Ok((vec![path], verdicts))
}

fn cmd_verify_all(ctx: &Ctx) -> Result<CmdOut, String> {
    let results = suite::run_all();
    let mut csv = String::from("id,name,pass,millis,details\n");
    for r in &results {
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), "{}", r.line());
        csv.push_str(&format!(
            "{},{},{},{},\"{}\"\n",
            r.id,
            r.name,
            r.pass,
            r.millis,
            r.details.replace('"', "'")
        ));
    }
    let path = ctx.out("acceptance.csv");
    write_atomic(&path, &csv)?;
    let all_pass = results.iter().all(|r| r.pass);
    let verdicts = json!({
        "all_pass": all_pass,
        "passed": results.iter().filter(|r| r.pass).count(),
        "total": results.len(),
    });
    Ok((vec![path], verdicts))
}
