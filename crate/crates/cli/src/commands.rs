use std::fs;
use std::path::Path;

use nlkg::evolution::{Direction, TrajectoryRecord};
use nlkg::ground_state::{shoot_q, GS_TOL};
use nlkg::lab::{ejection_audit, modal_datum, set_description, witness_summary, Lab, ThresholdW};
use nlkg::linearized::{birman_schwinger_spectrum, Background, BS_GAP, BS_KEEP, BS_REFERENCE_FIFTH};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

/// 17 significant digits.
fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn background(cfg: &RunConfig) -> Result<Background, CliError> {
    Ok(Background::load_or_compute(cfg.grid()?, &cfg.cache_dir)?)
}

fn lab(cfg: &RunConfig) -> Result<Lab, CliError> {
    Ok(Lab::new(background(cfg)?, cfg.thresholds, cfg.evolve_options(), cfg.horizon)?)
}

fn eps_of(cfg: &RunConfig, lab: &Lab) -> f64 {
    cfg.experiment.eps.unwrap_or_else(|| lab.default_eps())
}

pub fn ground_state(cfg: &RunConfig) -> Result<(), CliError> {
    let bg = background(cfg)?;
    let gs = &bg.gs;
    println!("J(Q) = {}", f17(gs.jq));
    println!("Q(0) = {}", f17(gs.q0));
    println!("||Q||_4^4 = {}", f17(gs.l4q));
    println!("residual = {}", f17(gs.residual));
    println!("cache = {}", cfg.cache_dir.display());
    write_json(
        &cfg.output_dir,
        "ground-state.json",
        &json!({
            "r_max": cfg.grid.r_max, "n": cfg.grid.n,
            "jq": gs.jq, "q0": gs.q0, "l4q": gs.l4q, "h1q": gs.h1q, "residual": gs.residual,
        }),
    )
}

pub fn spectrum(cfg: &RunConfig, extrapolate: bool) -> Result<(), CliError> {
    let bg = background(cfg)?;
    let spec = &bg.spec;
    println!("k = {}", f17(spec.k));
    println!("n_neg = {}", spec.n_neg);
    let list = |v: &[f64]| v.iter().map(|x| f17(*x)).collect::<Vec<_>>().join(", ");
    println!("BS eigenvalues = {}", list(&spec.bs_top));
    let mut top = spec.bs_top.clone();
    let mut out = json!({ "k": spec.k, "n_neg": spec.n_neg, "bs_top": spec.bs_top });
    if extrapolate {
        let fine = shoot_q(cfg.grid()?.refined(2)?, GS_TOL)?;
        let fine_top = birman_schwinger_spectrum(&fine, BS_KEEP)?;
        top = top.iter().zip(&fine_top).map(|(c, f)| (4.0 * f - c) / 3.0).collect();
        println!("BS eigenvalues (h^2-extrapolated) = {}", list(&top));
        out["bs_top_fine"] = json!(fine_top);
        out["bs_top_extrapolated"] = json!(top);
    }
    println!("full-operator reference = {}", f17(BS_REFERENCE_FIFTH));
    let ok = spec.n_neg == 1 && top.len() >= 2 && top[0] > 1.0 && top[1] < BS_GAP;
    out["gap_ok"] = json!(ok);
    write_json(&cfg.output_dir, "spectrum.json", &out)?;
    if top[1] < BS_GAP {
        println!("BS gap: OK (second eigenvalue < {BS_GAP})");
    } else {
        println!("BS gap: FAIL (second eigenvalue {} >= {BS_GAP})", f17(top[1]));
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Numerical("spectral verdict failed".into()))
    }
}

fn stem(prefix: &str, d: Direction) -> String {
    format!("{prefix}-{}", d.as_str())
}

fn report_record(rec: &TrajectoryRecord) {
    println!("{}: {} at t = {} ({} steps)", rec.direction.as_str(), rec.fate.kind().as_str(), f17(rec.last_time()), rec.steps);
}

pub fn evolve(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let s0 = cfg.experiment.datum.build(&lab.bg)?;
    println!("datum: {}", cfg.experiment.datum.describe());
    for d in cfg.experiment.direction.list() {
        let rec = lab.evolve(&s0, d)?;
        rec.write(&cfg.output_dir, &stem("evolve", d))?;
        report_record(&rec);
    }
    Ok(())
}

pub fn classify(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let datum = cfg.experiment.datum;
    let (res, bwd, fwd) = lab.classify_nine(&datum.build(&lab.bg)?, &datum.describe())?;
    bwd.write(&cfg.output_dir, "classify-backward")?;
    fwd.write(&cfg.output_dir, "classify-forward")?;
    write_json(&cfg.output_dir, "classify.json", &serde_json::to_value(&res)?)?;
    println!("datum: {}", res.descriptor);
    println!("backward = {}", res.backward.as_str());
    println!("forward = {}", res.forward.as_str());
    println!("E - J(Q) = {}", f17(res.energy_excess));
    match res.set_index {
        Some(i) => println!("set {i}: {}", set_description(i)),
        None => println!("set: undetermined"),
    }
    Ok(())
}

pub fn witnesses(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let ws = lab.nine_set_witnesses(cfg.experiment.theta, eps_of(cfg, &lab))?;
    write_json(&cfg.output_dir, "witnesses.json", &witness_summary(&ws))?;
    for w in &ws {
        let got = w.result.set_index.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "set {}: lambda = {}, lambdot = {}, backward = {}, forward = {}, realized set = {got}",
            w.datum.set,
            f17(w.datum.lam),
            f17(w.datum.lamdot),
            w.result.backward.as_str(),
            w.result.forward.as_str()
        );
    }
    let realized = ws.iter().filter(|w| w.realized()).count();
    println!("realized {realized} of {}", ws.len());
    Ok(())
}

pub fn portrait(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let (le, lde) = match cfg.experiment.portrait_extents {
        Some([a, b]) => (a, b),
        None => {
            let a = cfg.experiment.theta * eps_of(cfg, &lab);
            (4.0 * a, 16.0 * a)
        }
    };
    let p = lab.phase_portrait(le, lde, cfg.experiment.portrait_side)?;
    fs::create_dir_all(&cfg.output_dir)?;
    p.write(&cfg.output_dir.join("portrait.txt"))?;
    let fit = p.boundary_fit();
    write_json(
        &cfg.output_dir,
        "portrait-fit.json",
        &json!({ "k": lab.k(), "lam_extent": le, "lamdot_extent": lde, "side": p.side(), "boundary": p.boundary_points(), "fit": fit }),
    )?;
    match fit {
        Some(f) => println!(
            "boundary slope = {} (k = {}, rel err {}), intercept = {}, r2 = {}",
            f17(f.slope),
            f17(lab.k()),
            f17(f.rel_err),
            f17(f.intercept),
            f17(f.r2)
        ),
        None => println!("boundary: too few points for a fit"),
    }
    Ok(())
}

fn w_json(w: &ThresholdW) -> serde_json::Value {
    json!({
        "sign": w.sign, "s": w.s, "c": w.c, "energy_excess": w.energy_excess,
        "forward_fate": w.forward_fate.as_str(), "backward_rate": w.backward_rate,
        "rate_rel_err": w.rate_rel_err, "fit_span": w.fit_span,
    })
}

pub fn threshold(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let mut all = Vec::new();
    for (sign, name) in [(1.0, "w-plus"), (-1.0, "w-minus")] {
        let w = lab.construct_threshold_w(sign, cfg.experiment.w_amplitude)?;
        w.forward.write(&cfg.output_dir, &stem(name, Direction::Forward))?;
        w.backward.write(&cfg.output_dir, &stem(name, Direction::Backward))?;
        println!(
            "{name}: s = {}, c = {}, forward = {}, backward rate = {} (k = {}, rel err {})",
            f17(w.s),
            f17(w.c),
            w.forward_fate.as_str(),
            f17(w.backward_rate),
            f17(lab.k()),
            f17(w.rate_rel_err)
        );
        all.push(w_json(&w));
    }
    write_json(&cfg.output_dir, "threshold.json", &json!({ "k": lab.k(), "w": all }))
}

pub fn audit(cfg: &RunConfig) -> Result<(), CliError> {
    let lab = lab(cfg)?;
    let e = &cfg.experiment;
    let rep = lab.one_pass_ensemble(e.ensemble_size, cfg.seed, e.max_batches)?;
    let k = lab.k();
    let mut fits = Vec::new();
    for lam in [e.ejection_lambda, -e.ejection_lambda] {
        let rec = lab.evolve(&modal_datum(&lab.bg, lam, k * lam, None)?, Direction::Forward)?;
        let fit = ejection_audit(&rec, lab.p.r_star, &lab.p, k)?;
        println!("pure unstable lambda = {}: rate = {} (k = {}, rel err {})", f17(lam), f17(fit.rate), f17(k), f17(fit.rel_err));
        fits.push(fit);
    }
    let rates: Vec<f64> = rep.reports.iter().filter_map(|r| r.ejection.as_ref().map(|f| f.rel_err)).collect();
    let worst = rates.iter().copied().fold(0.0, f64::max);
    println!(
        "ensemble: seed {}, {} generated, {} exited, {} with returns, {} sign failures",
        rep.seed, rep.generated, rep.exited, rep.returns, rep.sign_failures
    );
    println!("ensemble ejection fits: {} (largest rate error {})", rates.len(), f17(worst));
    let ejection_ok = fits.iter().all(|f| f.rate_ok);
    let pass = rep.pass && ejection_ok;
    write_json(&cfg.output_dir, "audit.json", &json!({ "ensemble": rep, "pure_mode_ejection": fits, "pass": pass }))?;
    println!("audit: {}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(CliError::Numerical("audit verdict failed".into()))
    }
}
