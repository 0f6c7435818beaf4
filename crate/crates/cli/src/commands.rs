use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use o2olab::agents::{verify_maxent_identity, IdentityGrid};
use o2olab::analysis::{
    aggregate_normalized_regret, checkpoint_matrix_csv, export_checkpoint_matrix, interpolate_eval, parse_regret_cells,
    plane_basis, plane_grid_eval, CurvePoint, RegretCell, RegretTable,
};
use o2olab::diffusion::{load_score_model, save_score_model, ScoreModel};
use o2olab::envs::{load_dataset, save_dataset, Dataset};
use o2olab::pipeline::{
    build_dataset, eval_seed, load_checkpoint, offline_pretrain, online_finetune, reference_returns, regret_records,
    save_checkpoint, train_diffusion, AgentCheckpoint, ExperimentConfig, MetricsLog, OfflineAlg, RunOutput, RunSummary,
    StableTransfer,
};

use crate::output::{sha256_file, FileHash, Manifest, OutputDir};
use crate::{CliError, CliResult, Command, Common, REFERENCE_REGRET_CELLS, DEFAULT_OUT_ROOT, OUT_ROOT_VAR};

const AGENT_FILE: &str = "agent.ckpt";
const RUN_SUMMARY_FILE: &str = "run_summary.json";
const SCORE_MODEL_FILE: &str = "score_model.bin";
const CELLS_HEADER_PREFIX: &str = "env,offline_alg,online_alg,mean_regret,stderr";

/// Stable-transfer threshold: J(π_1) ≥ 0.9·J(π_0).
const TRANSFER_FRACTION: f64 = 0.9;

/// Bundled concave quadratic used by verify-identity.
fn identity_q(a: f64) -> f64 {
    -0.5 * (a - 1.0) * (a - 1.0) + 0.25 * a
}

const IDENTITY_GRID: IdentityGrid = IdentityGrid {
    lo: -6.0,
    hi: 6.0,
    n: 2001,
};
const IDENTITY_TOLERANCE: f64 = 1e-6;

pub fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| o2olab::Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let pairs = common
        .overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not KEY=VALUE")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut cfg = ExperimentConfig::with_overrides(text.as_deref(), &pairs)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn hash_inputs(paths: &[PathBuf]) -> CliResult<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input {} is not a file", p.display())))
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn files_under(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Checkpoint files named by `inputs`; directories contribute every *.ckpt
/// below them in path order.
fn expand_checkpoints(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(files_under(p)?.into_iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")));
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no checkpoints found in the inputs".into()));
    }
    Ok(out)
}

/// Resolved inputs of a command, known before any output is written.
struct Plan {
    inputs: Vec<PathBuf>,
    options: serde_json::Value,
    seeds: Vec<u64>,
}

fn plan(cmd: &Command, cfg: &ExperimentConfig) -> CliResult<Plan> {
    let mut seeds = cfg.seeds.clone();
    let (inputs, options) = match cmd {
        Command::GenData { .. } => (vec![], json!({})),
        Command::TrainDiffusion { input, .. } => {
            let inputs: Vec<PathBuf> = input.iter().cloned().collect();
            inputs.iter().try_for_each(|p| require_file(p))?;
            (inputs, json!({}))
        }
        Command::Pretrain { input, .. } => {
            let inputs: Vec<PathBuf> = input.iter().cloned().collect();
            inputs.iter().try_for_each(|p| require_file(p))?;
            (inputs, json!({}))
        }
        Command::Finetune { input, common } => {
            let files = if input.is_dir() {
                files_under(input)?
                    .into_iter()
                    .filter(|f| f.file_name().is_some_and(|n| n == AGENT_FILE))
                    .collect()
            } else {
                require_file(input)?;
                vec![input.clone()]
            };
            if files.is_empty() {
                return Err(CliError::Usage(format!("no {AGENT_FILE} under {}", input.display())));
            }
            // seeds come from the checkpoints; --seed selects one of them
            let mut chosen = Vec::new();
            seeds.clear();
            for f in files {
                let s = load_checkpoint(&f)?.seed;
                if common.seed.is_none_or(|want| want == s) {
                    if seeds.contains(&s) {
                        return Err(CliError::Usage(format!("two checkpoints share seed {s}")));
                    }
                    seeds.push(s);
                    chosen.push(f);
                }
            }
            if chosen.is_empty() {
                return Err(CliError::Usage("no checkpoint matches --seed".into()));
            }
            (chosen, json!({}))
        }
        Command::LandscapeLine {
            input,
            points,
            t_min,
            t_max,
            ..
        } => {
            if input.len() != 2 {
                return Err(CliError::Usage("landscape-line needs exactly two --input checkpoints".into()));
            }
            if *points < 2 || !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
                return Err(CliError::Usage("need --points ≥ 2 and finite --t-min < --t-max".into()));
            }
            input.iter().try_for_each(|p| require_file(p))?;
            (input.clone(), json!({"points": points, "t_min": t_min, "t_max": t_max}))
        }
        Command::LandscapePlane {
            input,
            resolution,
            range_min,
            range_max,
            ..
        } => {
            if input.len() != 3 {
                return Err(CliError::Usage("landscape-plane needs exactly three --input checkpoints".into()));
            }
            if *resolution < 2 || !(range_min.is_finite() && range_max.is_finite() && range_min < range_max) {
                return Err(CliError::Usage("need --resolution ≥ 2 and finite --range-min < --range-max".into()));
            }
            input.iter().try_for_each(|p| require_file(p))?;
            (
                input.clone(),
                json!({"resolution": resolution, "range_min": range_min, "range_max": range_max}),
            )
        }
        Command::RegretTable { input, .. } => {
            let inputs = match input {
                None => vec![],
                Some(p) if p.is_dir() => files_under(p)?
                    .into_iter()
                    .filter(|f| {
                        f.file_name().is_some_and(|n| n == RUN_SUMMARY_FILE)
                            || f.extension().is_some_and(|e| e == "csv")
                    })
                    .collect(),
                Some(p) => {
                    require_file(p)?;
                    vec![p.clone()]
                }
            };
            let source = if input.is_none() { "bundled reference cells" } else { "inputs" };
            (inputs, json!({"source": source}))
        }
        Command::VerifyIdentity { alpha, .. } => {
            if !(*alpha > 0.0 && alpha.is_finite()) {
                return Err(CliError::Usage(format!("--alpha must be positive, got {alpha}")));
            }
            (vec![], json!({"alpha": alpha}))
        }
        Command::ExportCheckpoints { input, .. } => (expand_checkpoints(input)?, json!({})),
    };
    Ok(Plan { inputs, options, seeds })
}

pub fn execute(cmd: &Command) -> CliResult<PathBuf> {
    let common = cmd.common();
    if common.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let cfg = load_config(common)?;
    let plan = plan(cmd, &cfg)?;
    let manifest = Manifest {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(&cfg)?,
        seeds: plan.seeds.clone(),
        options: plan.options.clone(),
        inputs: hash_inputs(&plan.inputs)?,
        artifacts: vec![],
    };
    let target = match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
            root.join(format!("{}-{}", cmd.name(), manifest.run_key()?))
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", common.jobs)))?;
    let out = OutputDir::create(target)?;
    pool.install(|| run_command(cmd, &cfg, &plan, &out))?;
    out.commit(manifest)
}

fn run_command(cmd: &Command, cfg: &ExperimentConfig, plan: &Plan, out: &OutputDir) -> CliResult<()> {
    match cmd {
        Command::GenData { .. } => gen_data(cfg, out),
        Command::TrainDiffusion { .. } => train_diffusion_cmd(cfg, plan.inputs.first(), out),
        Command::Pretrain { .. } => pretrain(cfg, plan.inputs.first(), out),
        Command::Finetune { .. } => finetune(cfg, &plan.inputs, out),
        Command::LandscapeLine {
            points, t_min, t_max, common, ..
        } => landscape_line(cfg, common, &plan.inputs, *points, (*t_min, *t_max), out),
        Command::LandscapePlane {
            resolution,
            range_min,
            range_max,
            common,
            ..
        } => landscape_plane(cfg, common, &plan.inputs, *resolution, (*range_min, *range_max), out),
        Command::RegretTable { input, .. } => regret_table(input.is_none(), &plan.inputs, out),
        Command::VerifyIdentity { alpha, .. } => verify_identity(*alpha, out),
        Command::ExportCheckpoints { .. } => export_checkpoints(&plan.inputs, out),
    }
}

fn write_json(out: &OutputDir, rel: &str, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    out.write(rel, text)
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:?}\n", i + 1));
    }
    s
}

fn gen_data(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<()> {
    let ds = build_dataset(cfg)?;
    save_dataset(&ds, &out.file("dataset.jsonl")?)?;
    let summary = json!({
        "env": ds.env.name,
        "trajectories": ds.trajectories.len(),
        "transitions": ds.len(),
        "mean_return": ds.mean_undiscounted_return(),
    });
    println!(
        "{}: {} trajectories, {} transitions, mean return {:.3}",
        ds.env.name,
        ds.trajectories.len(),
        ds.len(),
        ds.mean_undiscounted_return()
    );
    write_json(out, "summary.json", &summary)
}

fn dataset_for(cfg: &ExperimentConfig, input: Option<&PathBuf>) -> CliResult<Dataset> {
    let ds = match input {
        Some(p) => load_dataset(p)?,
        None => build_dataset(cfg)?,
    };
    if ds.env.name != cfg.env {
        return Err(o2olab::Error::Config(format!("dataset is for {} but the config names {}", ds.env.name, cfg.env)).into());
    }
    Ok(ds)
}

fn fit_score_model(cfg: &ExperimentConfig, ds: &Dataset, out: &OutputDir, losses_file: &str) -> CliResult<ScoreModel> {
    let (model, losses) = train_diffusion(cfg, ds)?;
    save_score_model(&model, &out.file(SCORE_MODEL_FILE)?)?;
    out.write(losses_file, losses_csv(&losses))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "score model trained for {} steps, final loss {:.5}",
        losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(model)
}

fn train_diffusion_cmd(cfg: &ExperimentConfig, input: Option<&PathBuf>, out: &OutputDir) -> CliResult<()> {
    let ds = dataset_for(cfg, input)?;
    fit_score_model(cfg, &ds, out, "losses.csv")?;
    Ok(())
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Runs `f` for every seed on the current pool and returns the outputs in
/// seed order.
fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> o2olab::Result<T> + Sync) -> CliResult<Vec<T>> {
    let results: Vec<o2olab::Result<T>> = seeds.par_iter().map(|&s| f(s)).collect();
    Ok(results.into_iter().collect::<o2olab::Result<Vec<_>>>()?)
}

fn pretrain(cfg: &ExperimentConfig, input: Option<&PathBuf>, out: &OutputDir) -> CliResult<()> {
    let ds = build_dataset(cfg)?;
    let model = match (cfg.offline_alg, input) {
        (OfflineAlg::Smac, Some(p)) => Some(load_score_model(p)?),
        (OfflineAlg::Smac, None) => Some(fit_score_model(cfg, &ds, out, "diffusion_losses.csv")?),
        _ => None,
    };
    let runs: Vec<RunOutput> = per_seed(&cfg.seeds, |s| offline_pretrain(cfg, &ds, model.as_ref(), s))?;
    let mut all = MetricsLog::default();
    for (seed, run) in cfg.seeds.iter().zip(runs) {
        let dir = seed_dir(*seed);
        save_checkpoint(&run.state, &out.file(&format!("{dir}/{AGENT_FILE}"))?)?;
        out.write(&format!("{dir}/metrics.csv"), run.metrics.to_csv())?;
        let e = &run.evals[0].1;
        println!("seed {seed}: offline return {:.3} ± {:.3}", e.mean, e.stderr);
        all.extend(run.metrics);
    }
    out.write("metrics.csv", all.to_csv())
}

fn evals_csv(run: &RunOutput) -> String {
    let mut s = String::from("step,mean_return,stderr\n");
    for (step, e) in &run.evals {
        s.push_str(&format!("{step},{:?},{:?}\n", e.mean, e.stderr));
    }
    s
}

fn finetune(cfg: &ExperimentConfig, inputs: &[PathBuf], out: &OutputDir) -> CliResult<()> {
    let ds = build_dataset(cfg)?;
    let env = cfg.env_spec()?;
    let checkpoints: Vec<AgentCheckpoint> = inputs.iter().map(|p| load_checkpoint(p)).collect::<o2olab::Result<_>>()?;
    let runs: Vec<RunOutput> = checkpoints
        .par_iter()
        .map(|c| online_finetune(c, cfg, &ds))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<o2olab::Result<_>>()?;
    let mut all = MetricsLog::default();
    for (ckpt, run) in checkpoints.iter().zip(runs) {
        let seed = ckpt.seed;
        let dir = seed_dir(seed);
        save_checkpoint(&run.state, &out.file(&format!("{dir}/{AGENT_FILE}"))?)?;
        out.write(&format!("{dir}/metrics.csv"), run.metrics.to_csv())?;
        out.write(&format!("{dir}/evals.csv"), evals_csv(&run))?;
        let returns: Vec<f64> = run.evals.iter().map(|(_, e)| e.mean).collect();
        let summary = RunSummary {
            env: cfg.env.clone(),
            offline_alg: cfg.offline_alg.to_string(),
            online_alg: cfg.online_alg.to_string(),
            seed,
            eval_returns: returns.clone(),
        };
        write_json(out, &format!("{dir}/{RUN_SUMMARY_FILE}"), &summary)?;
        let (random, expert) = reference_returns(&env, cfg.eval_episodes, eval_seed(seed))?;
        let transfer = if returns.len() >= 2 {
            let st = StableTransfer::from_returns(&returns, random, expert)?;
            println!(
                "seed {seed}: J(π0) {:.1} → J(π1) {:.1} (normalized), final return {:.3}, stable transfer {}",
                st.j0,
                st.j1,
                returns[returns.len() - 1],
                if st.holds(TRANSFER_FRACTION) { "yes" } else { "no" }
            );
            json!({"j0": st.j0, "j1": st.j1, "delta": st.delta, "stable": st.holds(TRANSFER_FRACTION),
                   "random_return": random, "expert_return": expert})
        } else {
            println!("seed {seed}: only the initial evaluation ({:.3})", returns[0]);
            json!({"j0": null, "j1": null, "random_return": random, "expert_return": expert})
        };
        write_json(out, &format!("{dir}/transfer.json"), &transfer)?;
        all.extend(run.metrics);
    }
    out.write("metrics.csv", all.to_csv())
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<AgentCheckpoint>> {
    Ok(paths.iter().map(|p| load_checkpoint(p)).collect::<o2olab::Result<_>>()?)
}

fn landscape_line(
    cfg: &ExperimentConfig,
    common: &Common,
    inputs: &[PathBuf],
    points: usize,
    (t_min, t_max): (f64, f64),
    out: &OutputDir,
) -> CliResult<()> {
    let ck = load_all(inputs)?;
    let env = cfg.env_spec()?;
    let ts: Vec<f64> = (0..points)
        .map(|i| {
            if i + 1 == points {
                t_max
            } else {
                t_min + (t_max - t_min) * i as f64 / (points - 1) as f64
            }
        })
        .collect();
    let seed = common.seed.unwrap_or(ck[0].seed);
    let curve = interpolate_eval(&ck[0].policy, &ck[1].policy, &ts, &env, cfg.eval_episodes, eval_seed(seed))?;
    for p in &curve {
        println!("t {:>6.3}: {:.3} ± {:.3}", p.t, p.mean, p.stderr);
    }
    out.write("line.csv", CurvePoint::csv(&curve))
}

fn landscape_plane(
    cfg: &ExperimentConfig,
    common: &Common,
    inputs: &[PathBuf],
    resolution: usize,
    range: (f64, f64),
    out: &OutputDir,
) -> CliResult<()> {
    let ck = load_all(inputs)?;
    let env = cfg.env_spec()?;
    let basis = plane_basis(&ck[0].policy.params, &ck[1].policy.params, &ck[2].policy.params)?;
    let seed = common.seed.unwrap_or(ck[0].seed);
    let grid = plane_grid_eval(&basis, &ck[0].policy, range, resolution, &env, cfg.eval_episodes, eval_seed(seed))?;
    println!(
        "{resolution}×{resolution} grid, ‖u′‖ {:.4}, ‖v′‖ {:.4}, input cosine {:.4}",
        basis.u_norm, basis.v_norm, basis.cosine
    );
    out.write("grid.csv", grid.to_csv())?;
    write_json(
        out,
        "basis.json",
        &json!({
            "u_norm": basis.u_norm,
            "v_norm": basis.v_norm,
            "input_cosine": basis.cosine,
            "relative_inner_product": basis.relative_inner_product(),
        }),
    )
}

fn gather_cells(inputs: &[PathBuf]) -> CliResult<Vec<RegretCell>> {
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p)?;
        if p.file_name().is_some_and(|n| n == RUN_SUMMARY_FILE) {
            runs.push(serde_json::from_str::<RunSummary>(&text)?);
        } else if text.starts_with(CELLS_HEADER_PREFIX) {
            cells.extend(parse_regret_cells(&text)?);
        }
    }
    cells.extend(regret_records(&runs)?.iter().map(RegretCell::from));
    if cells.is_empty() {
        return Err(CliError::Usage("no regret cells or run summaries in the inputs".into()));
    }
    Ok(cells)
}

fn print_table(table: &RegretTable) {
    let offs: BTreeSet<&str> = table.averages.iter().map(|a| a.offline_alg.as_str()).collect();
    let ons: BTreeSet<&str> = table.averages.iter().map(|a| a.online_alg.as_str()).collect();
    print!("{:<10}", "offline");
    for on in &ons {
        print!("{on:>9}");
    }
    println!();
    for off in &offs {
        print!("{off:<10}");
        for on in &ons {
            print!("{:>9.3}", table.average(off, on).unwrap_or(f64::NAN));
        }
        println!();
    }
}

fn regret_table(use_fixture: bool, inputs: &[PathBuf], out: &OutputDir) -> CliResult<()> {
    let cells = if use_fixture {
        parse_regret_cells(REFERENCE_REGRET_CELLS)?
    } else {
        gather_cells(inputs)?
    };
    let table = aggregate_normalized_regret(&cells)?;
    print_table(&table);
    out.write("cells.csv", table.cells_csv())?;
    out.write("table.csv", table.averages_csv())
}

fn verify_identity(alpha: f64, out: &OutputDir) -> CliResult<()> {
    let gap = verify_maxent_identity(identity_q, alpha, IDENTITY_GRID)?;
    let pass = gap <= IDENTITY_TOLERANCE;
    println!(
        "sup-norm gap {gap:.3e} at α = {alpha} ({} the {IDENTITY_TOLERANCE:e} tolerance)",
        if pass { "within" } else { "outside" }
    );
    write_json(
        out,
        "identity.json",
        &json!({
            "alpha": alpha,
            "q": "-0.5 (a - 1)^2 + 0.25 a",
            "grid": IDENTITY_GRID,
            "sup_gap": gap,
            "tolerance": IDENTITY_TOLERANCE,
            "pass": pass,
        }),
    )
}

fn export_checkpoints(inputs: &[PathBuf], out: &OutputDir) -> CliResult<()> {
    let ck = load_all(inputs)?;
    let params: Vec<_> = ck.iter().map(|c| &c.policy.params).collect();
    let m = export_checkpoint_matrix(&params)?;
    out.write("checkpoints.csv", checkpoint_matrix_csv(&m))?;
    let mut index = String::from("row,path,seed,offline_step,online_step\n");
    for (i, (p, c)) in inputs.iter().zip(&ck).enumerate() {
        index.push_str(&format!("{i},{},{},{},{}\n", p.display(), c.seed, c.offline_step, c.online_step));
    }
    println!("{} checkpoints × {} parameters", m.rows(), m.cols());
    out.write("index.csv", index)
}
