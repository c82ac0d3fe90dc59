//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use exdf_core::archive::{write_atomic, PosteriorArchive};
use exdf_core::data::{
    collocate, date_of, day_index, fmt_num, load_dataset, mean_residual_life, mrl_candidates, nearest_centroid,
    write_grid_csv, write_station_csv, CollocatedPair, Dataset,
};
use exdf_core::diagnostics::all_group_rhat;
use exdf_core::metrics::qq_table;
use exdf_core::model::ModelSpec;
use exdf_core::numeric::quantile_sorted;
use exdf_core::predict::{predict_any, predict_fitted_site, shortfall_surface, SurfaceStat};
use exdf_core::simulate::{simulate as run_simulation, SyntheticScenario};
use exdf_core::validate::{fit_model, loso_cv, LosoConfig};
use exdf_core::variogram::prefit_decay;

use crate::config::RunConfig;
use crate::manifest::{config_hash, manifest_path_for, Manifest};
use crate::{
    DiagnoseArgs, ExportArgs, FitArgs, FormatArg, Invalid, KindArg, PredictArgs, QqArgs, SimulateArgs, StatArg,
    ThresholdArgs, ValidateArgs,
};

type CsvOut<'a> = csv::Writer<&'a mut std::io::BufWriter<std::fs::File>>;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Write a CSV file atomically.
fn write_csv<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut CsvOut<'_>) -> csv::Result<()>,
{
    ensure_parent(path)?;
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        fill(&mut out)?;
        out.flush()?;
        Ok(())
    })
    .with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vec<CollocatedPair>)> {
    let ds = load_dataset(&cfg.paths.stations, &cfg.paths.grid, &cfg.data_config())?;
    if !ds.dropped.is_empty() {
        log::warn!("dropped {} station(s) for low coverage: {}", ds.dropped.len(), ds.dropped.join(", "));
    }
    if ds.stations.is_empty() {
        return Err(Invalid("no station passes the coverage filter".into()).into());
    }
    let pairs = collocate(&ds.stations, &ds.grids)?;
    log::info!("loaded {} stations and {} grid cells", ds.stations.len(), ds.grids.len());
    Ok((ds, pairs))
}

/// The model specification, with decay rates from the config or, failing
/// that, from the variogram pre-fit.
fn resolve_spec(cfg: &RunConfig, pairs: &[CollocatedPair]) -> Result<(ModelSpec, serde_json::Value)> {
    if let Some((a, b)) = cfg.fixed_decays() {
        return Ok((cfg.spec(a, b)?, json!({ "decay_source": "config", "phi_alpha": a, "phi_beta": b })));
    }
    let pre = prefit_decay(pairs, &cfg.variogram)
        .context("decay-rate pre-fit failed; set hyper.phi_alpha and hyper.phi_beta to skip it")?;
    let spec = cfg.spec(pre.alpha.decay, pre.beta.decay)?;
    log::info!("decay rates: phi_alpha = {:.4}, phi_beta = {:.4}", spec.phi_alpha, spec.phi_beta);
    Ok((
        spec.clone(),
        json!({ "decay_source": "variogram", "phi_alpha": spec.phi_alpha, "phi_beta": spec.phi_beta, "skipped_sites": pre.skipped }),
    ))
}

fn config_from_manifest(path: &Path, command: &str) -> Result<RunConfig> {
    let man = Manifest::read(path)?;
    if man.command != command {
        return Err(Invalid(format!("manifest records a '{}' run, not '{command}'", man.command)).into());
    }
    let cfg = man.config.ok_or_else(|| Invalid("manifest has no configuration".into()))?;
    if man.config_hash.as_deref() != Some(config_hash(&cfg)?.as_str()) {
        return Err(Invalid("manifest configuration does not match its recorded hash".into()).into());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let cfg = match (&a.config, &a.manifest) {
        (_, Some(m)) => config_from_manifest(m, "fit")?,
        (Some(c), None) => RunConfig::load(c)?,
        (None, None) => unreachable!("clap requires --config or --manifest"),
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.posterior_path());
    let (_, pairs) = load_data(&cfg)?;
    let (spec, details) = resolve_spec(&cfg, &pairs)?;
    log::info!(
        "fitting {:?} model: {} chains x {} iterations ({} burn-in, thin {})",
        cfg.model,
        cfg.mcmc.n_chains,
        cfg.mcmc.n_iter,
        cfg.mcmc.burn_in,
        cfg.mcmc.thin
    );
    let archive = fit_model(&pairs, &spec, cfg.model, &cfg.mcmc, None)?;
    ensure_parent(&out)?;
    archive.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} chains x {} draws)", out.display(), archive.n_chains(), archive.draws_per_chain());
    for w in &archive.header.warnings {
        println!("warning: {w}");
    }
    let mut man = Manifest::new("fit", Some(&cfg), Some(cfg.mcmc.seed))?;
    man.details = details;
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}

fn load_archive(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<PosteriorArchive> {
    let path = path.clone().unwrap_or_else(|| cfg.posterior_path());
    if !path.is_file() {
        return Err(Invalid(format!("posterior archive {} does not exist", path.display())).into());
    }
    Ok(PosteriorArchive::load(&path)?)
}

fn parse_date(s: &str) -> Result<i64> {
    let d = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Invalid(format!("bad date '{s}' (expected YYYY-MM-DD): {e}")))?;
    Ok(day_index(d))
}

fn parse_point(s: &str) -> Result<(f64, f64)> {
    let bad = || Invalid(format!("bad location '{s}' (expected X,Y)"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    let x: f64 = x.trim().parse().map_err(|_| bad())?;
    let y: f64 = y.trim().parse().map_err(|_| bad())?;
    if !(x.is_finite() && y.is_finite()) {
        return Err(bad().into());
    }
    Ok((x, y))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let archive = load_archive(&cfg, &a.posterior)?;
    let (ds, _) = load_data(&cfg)?;
    let mut man = Manifest::new("predict", Some(&cfg), Some(cfg.predict.seed))?;
    let out = if a.surface {
        let (stat, name) = match a.stat {
            StatArg::Shortfall => (SurfaceStat::ExpectedShortfall, "shortfall"),
            StatArg::Range => (SurfaceStat::ExceedanceRange, "range"),
        };
        let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join(format!("surface_{name}.csv")));
        let cells = shortfall_surface(&archive, &ds.grids, stat, &cfg.predict)?;
        write_csv(&out, |w| {
            w.write_record(["cell_id", "x_km", "y_km", name])?;
            for c in &cells {
                w.write_record([c.cell_id.to_string(), fmt_num(c.location.x), fmt_num(c.location.y), opt(c.value)])?;
            }
            Ok(())
        })?;
        let filled = cells.iter().filter(|c| c.value.is_some()).count();
        println!("surface of {} cells ({} with a value) written to {}", cells.len(), filled, out.display());
        man.details = json!({ "surface": name });
        out
    } else {
        let (px, py) = parse_point(a.at.as_deref().expect("clap requires --at without --surface"))?;
        let location = ds.projection.project(px, py);
        let cell_id = nearest_centroid(&location, &ds.grids)?;
        let cell = ds.grids.iter().find(|g| g.cell_id == cell_id).expect("id from the same slice");
        let start = a.start.as_deref().map(parse_date).transpose()?.unwrap_or(i64::MIN);
        let end = a.end.as_deref().map(parse_date).transpose()?.unwrap_or(i64::MAX);
        let basis = &archive.header.basis;
        let days: Vec<i64> = cell
            .timestamps
            .iter()
            .copied()
            .filter(|&t| t >= start && t <= end && basis.contains(t as f64))
            .collect();
        if days.is_empty() {
            return Err(Invalid("no grid days inside both the requested range and the fitted period".into()).into());
        }
        let pred = predict_any(&archive, location, &ds.grids, Some(&days), a.threshold, &cfg.predict)?;
        let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join("prediction.csv"));
        let means = pred.mean();
        let bands = pred.interval(0.95);
        write_csv(&out, |w| {
            w.write_record(["date", "mean", "median", "lower95", "upper95", "exceed_prob"])?;
            for (t, &day) in pred.timestamps.iter().enumerate() {
                let mut col = pred.column(t);
                col.sort_by(f64::total_cmp);
                w.write_record([
                    date_of(day).to_string(),
                    fmt_num(means[t]),
                    fmt_num(quantile_sorted(&col, 0.5)),
                    fmt_num(bands[t].0),
                    fmt_num(bands[t].1),
                    fmt_num(pred.exceed_prob[t]),
                ])?;
            }
            Ok(())
        })?;
        println!("{} days predicted at ({px}, {py}), nearest cell {cell_id}, written to {}", days.len(), out.display());
        man.details = json!({ "location": [px, py], "cell_id": cell_id });
        out
    };
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}

pub fn validate(a: &ValidateArgs) -> Result<()> {
    if !a.loso {
        return Err(Invalid("choose a validation scheme (--loso)".into()).into());
    }
    let cfg = RunConfig::load(&a.config)?;
    let (ds, pairs) = load_data(&cfg)?;
    let (spec, details) = resolve_spec(&cfg, &pairs)?;
    let loso = LosoConfig {
        mcmc: cfg.mcmc,
        predict: cfg.predict,
        cutoff: cfg.validation.cutoff,
        rhat_max: cfg.validation.rhat_max,
    };
    log::info!("leave-one-site-out over {} sites", pairs.len());
    let folds = loso_cv(&pairs, &ds.grids, &spec, cfg.model, &loso)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join("metrics.csv"));
    write_csv(&out, |w| {
        w.write_record([
            "site",
            "converged",
            "max_rhat",
            "n_obs",
            "n_exceedances",
            "rmse",
            "mae",
            "crps",
            "rmse_exceedances",
            "mae_exceedances",
            "crps_exceedances",
            "tp",
            "fp",
            "fn",
            "tn",
            "accuracy",
            "precision",
            "recall",
            "specificity",
            "f1",
            "coverage95",
        ])?;
        for f in &folds {
            let mut rec = vec![f.site.clone(), f.converged.to_string(), opt(f.max_rhat)];
            match &f.report {
                Some(r) => {
                    let c = &r.classification;
                    rec.extend([
                        r.n_obs.to_string(),
                        r.n_exceedances.to_string(),
                        fmt_num(r.rmse),
                        fmt_num(r.mae),
                        fmt_num(r.crps),
                        opt(r.rmse_exceedances),
                        opt(r.mae_exceedances),
                        opt(r.crps_exceedances),
                        c.tp.to_string(),
                        c.fp.to_string(),
                        c.fn_.to_string(),
                        c.tn.to_string(),
                        fmt_num(c.accuracy),
                        opt(c.precision),
                        opt(c.recall),
                        opt(c.specificity),
                        opt(c.f1),
                        fmt_num(r.coverage95),
                    ]);
                }
                None => rec.extend(std::iter::repeat(String::new()).take(18)),
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    println!("{:<12} {:>9} {:>9} {:>9} {:>9}", "site", "rmse", "mae", "crps", "cover95");
    for f in &folds {
        match &f.report {
            Some(r) => println!("{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.3}", f.site, r.rmse, r.mae, r.crps, r.coverage95),
            None => println!("{:<12} not converged (max R-hat {:.3})", f.site, f.max_rhat.unwrap_or(f64::NAN)),
        }
    }
    let mut man = Manifest::new("validate", Some(&cfg), Some(cfg.mcmc.seed))?;
    man.details = details;
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let scenario = match &a.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Invalid(format!("cannot read scenario {}: {e}", path.display())))?;
            toml::from_str::<SyntheticScenario>(&text)
                .map_err(|e| Invalid(format!("scenario {}: {e}", path.display())))?
        }
        None => match a.kind {
            KindArg::Exceedance => SyntheticScenario::exceedance(a.n_sites, a.n_days, a.m, a.seed),
            KindArg::Gaussian => SyntheticScenario::gaussian(a.n_sites, a.n_days, a.m, a.seed),
        },
    };
    let sim = run_simulation(&scenario)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let stations = a.out_dir.join("stations.csv");
    let grid = a.out_dir.join("grid.csv");
    let truth = a.out_dir.join("truth.json");
    let scen = a.out_dir.join("scenario.toml");
    write_atomic(&stations, |w| write_station_csv(w, &sim.stations))?;
    write_atomic(&grid, |w| write_grid_csv(w, &sim.grids))?;
    let truth_json = serde_json::to_vec_pretty(&sim.truth)?;
    write_atomic(&truth, |w| Ok(w.write_all(&truth_json)?))?;
    let scen_toml = toml::to_string(&scenario).context("serialising scenario")?;
    write_atomic(&scen, |w| Ok(w.write_all(scen_toml.as_bytes())?))?;
    println!(
        "simulated {} stations and {} cells over {} days into {}",
        sim.stations.len(),
        sim.grids.len(),
        scenario.n_days,
        a.out_dir.display()
    );
    let mut man = Manifest::new("simulate", None, Some(scenario.seed))?;
    man.details = json!({ "scenario": scenario });
    for p in [&stations, &grid, &truth, &scen] {
        man.add_output(p)?;
    }
    man.write(&a.out_dir.join("manifest.json"))
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let out_dir = match (&a.out_dir, &a.archive, &cfg) {
        (Some(d), _, _) => d.clone(),
        (None, Some(p), _) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "posterior".into());
            p.with_file_name(format!("{stem}_diagnostics"))
        }
        (None, None, Some(c)) => c.paths.output_dir.clone(),
        (None, None, None) => unreachable!("clap requires an archive or --variogram with --config"),
    };
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut man = Manifest::new("diagnose", cfg.as_ref(), None)?;
    let mut outputs = Vec::new();
    if let Some(path) = &a.archive {
        if !path.is_file() {
            return Err(Invalid(format!("posterior archive {} does not exist", path.display())).into());
        }
        let archive = PosteriorArchive::load(path)?;
        let layout = &archive.header.layout;
        let names = layout.names(&archive.site_ids());
        if archive.n_chains() >= 2 {
            let groups = all_group_rhat(&archive)?;
            println!("{:<14} {:>8} {:>10}  worst", "group", "params", "max R-hat");
            for g in &groups {
                let flag = if g.degenerate.is_empty() {
                    String::new()
                } else {
                    format!(" ({} constant)", g.degenerate.len())
                };
                println!("{:<14} {:>8} {:>10.4}  {}{flag}", g.group, g.n_params, g.max_rhat, g.worst_param);
            }
            let p = out_dir.join("rhat.csv");
            write_csv(&p, |w| {
                w.write_record(["group", "n_params", "max_rhat", "worst_param", "constant_params"])?;
                for g in &groups {
                    w.write_record([
                        g.group.clone(),
                        g.n_params.to_string(),
                        fmt_num(g.max_rhat),
                        g.worst_param.clone(),
                        g.degenerate.join(" "),
                    ])?;
                }
                Ok(())
            })?;
            outputs.push(p);
        } else {
            log::warn!("R-hat needs at least two chains; the archive has {}", archive.n_chains());
        }
        let p = out_dir.join("acceptance.csv");
        write_csv(&p, |w| {
            w.write_record(["chain", "block", "rate"])?;
            for b in &archive.header.acceptance {
                w.write_record([b.chain.to_string(), b.block.clone(), fmt_num(b.rate)])?;
            }
            Ok(())
        })?;
        outputs.push(p);
        for (group, start, len) in layout.groups.iter().copied() {
            let p = out_dir.join(format!("trace_{}.csv", group.name()));
            write_csv(&p, |w| {
                let mut head = vec!["chain".to_string(), "draw".to_string()];
                head.extend(names[start..start + len].iter().cloned());
                w.write_record(&head)?;
                for c in 0..archive.n_chains() {
                    for k in 0..archive.draws_per_chain() {
                        let d = archive.draw(c, k);
                        let mut rec = vec![c.to_string(), k.to_string()];
                        rec.extend(d[start..start + len].iter().map(|v| fmt_num(*v)));
                        w.write_record(&rec)?;
                    }
                }
                Ok(())
            })?;
            outputs.push(p);
        }
        for w in &archive.header.warnings {
            println!("warning: {w}");
        }
    }
    if a.variogram {
        let cfg = cfg.as_ref().expect("clap requires --config with --variogram");
        let (_, pairs) = load_data(cfg)?;
        let pre = prefit_decay(&pairs, &cfg.variogram)?;
        println!(
            "phi_alpha = {:.4}{}  phi_beta = {:.4}{}",
            pre.alpha.decay,
            if pre.alpha.at_bound { " (at bound)" } else { "" },
            pre.beta.decay,
            if pre.beta.at_bound { " (at bound)" } else { "" }
        );
        let p = out_dir.join("variogram.csv");
        write_csv(&p, |w| {
            w.write_record(["field", "distance_km", "semivariance", "pairs", "fitted"])?;
            for (name, fit) in [("alpha", &pre.alpha), ("beta", &pre.beta)] {
                for b in &fit.bins {
                    w.write_record([
                        name.to_string(),
                        fmt_num(b.distance),
                        fmt_num(b.semivariance),
                        b.count.to_string(),
                        fmt_num(fit.model(b.distance)),
                    ])?;
                }
            }
            Ok(())
        })?;
        outputs.push(p);
        man.details = json!({ "phi_alpha": pre.alpha.decay, "phi_beta": pre.beta.decay });
    }
    for p in &outputs {
        man.add_output(p)?;
    }
    man.write(&out_dir.join("manifest.json"))
}

pub fn threshold(a: &ThresholdArgs) -> Result<()> {
    if a.n < 2 {
        return Err(Invalid("--n must be at least 2".into()).into());
    }
    let cfg = RunConfig::load(&a.config)?;
    let (ds, _) = load_data(&cfg)?;
    let stations: Vec<_> = match &a.site {
        Some(id) => {
            let s = ds.stations.iter().find(|s| &s.id == id);
            vec![s.ok_or_else(|| Invalid(format!("no station '{id}' in the data")))?]
        }
        None => ds.stations.iter().collect(),
    };
    let mut tables = Vec::with_capacity(stations.len());
    println!("{:<12} {:>12} {:>12}", "site", "threshold", "exceedances");
    for s in &stations {
        let values = s.present_values();
        let rows = mean_residual_life(&values, &mrl_candidates(&values, a.n))?;
        println!("{:<12} {:>12.4} {:>12}", s.id, s.threshold, s.n_exceedances());
        tables.push((s.id.clone(), rows));
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join("mrl.csv"));
    write_csv(&out, |w| {
        w.write_record(["site", "threshold", "mean_excess", "count", "lower95", "upper95"])?;
        for (id, rows) in &tables {
            for r in rows {
                w.write_record([
                    id.clone(),
                    fmt_num(r.threshold),
                    fmt_num(r.mean_excess),
                    r.count.to_string(),
                    fmt_num(r.lower),
                    fmt_num(r.upper),
                ])?;
            }
        }
        Ok(())
    })?;
    let mut man = Manifest::new("threshold", Some(&cfg), None)?;
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}

pub fn export(a: &ExportArgs) -> Result<()> {
    if !a.archive.is_file() {
        return Err(Invalid(format!("posterior archive {} does not exist", a.archive.display())).into());
    }
    let archive = PosteriorArchive::load(&a.archive)?;
    let out = match a.format {
        FormatArg::Csv => {
            let out = a.out.clone().unwrap_or_else(|| a.archive.with_extension("csv"));
            ensure_parent(&out)?;
            write_atomic(&out, |w| archive.export_csv(w)).with_context(|| format!("writing {}", out.display()))?;
            out
        }
    };
    println!("exported {} draws of {} parameters to {}", archive.total_draws(), archive.dim(), out.display());
    let mut man = Manifest::new("export", None, Some(archive.header.mcmc.seed))?;
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}

pub fn qq(a: &QqArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let archive = load_archive(&cfg, &a.posterior)?;
    let (_, pairs) = load_data(&cfg)?;
    let site = archive
        .header
        .sites
        .iter()
        .position(|s| s.id == a.site)
        .ok_or_else(|| Invalid(format!("station '{}' is not in the fitted archive", a.site)))?;
    let pair = pairs
        .iter()
        .find(|p| p.station.id == a.site)
        .ok_or_else(|| Invalid(format!("station '{}' is not in the data", a.site)))?;
    let pred = predict_fitted_site(&archive, site, pair, &cfg.predict)?;
    let replicates: Vec<Vec<f64>> = (0..pred.n_draws).map(|k| pred.draw(k).to_vec()).collect();
    let observed: Vec<f64> = pair.station.observed().map(|(_, v)| v).collect();
    let rows = qq_table(&replicates, &observed)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join(format!("qq_{}.csv", a.site)));
    write_csv(&out, |w| {
        w.write_record(["prob", "observed", "predicted", "lower95", "upper95"])?;
        for r in &rows {
            w.write_record([fmt_num(r.prob), fmt_num(r.observed), fmt_num(r.predicted), fmt_num(r.lower), fmt_num(r.upper)])?;
        }
        Ok(())
    })?;
    let inside = rows.iter().filter(|r| r.observed >= r.lower && r.observed <= r.upper).count();
    println!("{} quantiles, {} inside the 95% band, written to {}", rows.len(), inside, out.display());
    let mut man = Manifest::new("qq", Some(&cfg), Some(cfg.predict.seed))?;
    man.add_output(&out)?;
    man.write(&manifest_path_for(&out))
}
