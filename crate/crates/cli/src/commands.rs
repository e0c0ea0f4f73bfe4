use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use slfr::data::{
    binarize, interaction_matrix, leave_one_out_split, load_interactions, save_dataset, Axis,
    BinarizeRule, FeedbackKind, Format, Split, SplitMeta,
};
use slfr::eval::{evaluate, EvalReport, ExternalLabels, LabelSource};
use slfr::model::{Composition, MfModel};
use slfr::synth::{generate_world, save_round_stats, simulate_exposure, true_label_testset};
use slfr::train::{train_slfr, write_log_csv, TrainConfig, TrainOutcome};
use slfr::vae::{extract_confounders, full_data_kl, train_vae, ConfounderReps, VaeBlock, VaeConfig};

use crate::config::{parse_list, threads, RunConfig, SweepParam};
use crate::{manifest, Cli, Command, EvalArgs, PrepareArgs, PretrainArgs, ReportArgs, Side};
use crate::{SimulateArgs, SweepArgs, TrainArgs, TrainFlags, UsageError, VaeFlags};

pub fn run(cli: Cli) -> Result<()> {
    let threads = threads()?;
    if threads > 1 {
        info!("SLFR_THREADS={threads}: computation runs on one thread regardless");
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.resolve_seed(cli.seed)?;
    let (name, out) = match cli.command {
        Command::Prepare(a) => ("prepare", prepare(a, &mut cfg)?),
        Command::Pretrain(a) => ("pretrain", pretrain(a, &mut cfg)?),
        Command::Train(a) => ("train", train(a, &mut cfg)?),
        Command::Eval(a) => ("eval", eval(a, &mut cfg)?),
        Command::Sweep(a) => ("sweep", sweep(a, &mut cfg)?),
        Command::Simulate(a) => ("simulate", simulate(a, &mut cfg)?),
        Command::Report(a) => ("report", report(a)?),
    };
    if name != "report" {
        write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    }
    manifest::write(&out, name, cfg.seed, threads)?;
    info!("{name}: outputs in {}", out.display());
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn make_out(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_split(dir: &Path) -> Result<(Split, SplitMeta)> {
    if !dir.is_dir() {
        return Err(usage(format!("split directory {} does not exist", dir.display())));
    }
    Split::load(dir).with_context(|| format!("loading split from {}", dir.display()))
}

fn apply_vae_flags(cfg: &mut VaeConfig, f: &VaeFlags) {
    if let Some(v) = f.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = f.dz {
        cfg.latent_dim = v;
    }
    if let Some(v) = f.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = f.vae_epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.vae_lr {
        cfg.lr = v;
    }
}

fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = f.dim {
        cfg.dim = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.l2 {
        cfg.l2 = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.patience {
        cfg.patience = v;
    }
    if let Some(v) = f.neg_ratio {
        cfg.neg_ratio = v;
    }
    if let Some(v) = f.batch {
        cfg.batch = v;
    }
    if let Some(v) = &f.composition {
        cfg.composition = v.parse::<Composition>()?;
    }
    if f.ips_eta.is_some() {
        cfg.ips_eta = f.ips_eta;
    }
    if f.full_l2 {
        cfg.full_l2 = true;
    }
    if cfg.gamma < 0.0 {
        bail!(usage(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }
    Ok(())
}

fn ks(flag: &Option<String>, cfg: &RunConfig) -> Result<Vec<usize>> {
    let ks = match flag {
        Some(s) => parse_list::<usize>(s, "cutoff")?,
        None => cfg.eval.ks.clone(),
    };
    if ks.is_empty() || ks.contains(&0) {
        bail!(usage("cutoffs must be a non-empty list of positive integers"));
    }
    Ok(ks)
}

enum Labels {
    Heldout,
    Valid,
    External(ExternalLabels),
}

impl Labels {
    fn resolve(flag: &Option<String>, cfg: &mut RunConfig) -> Result<Labels> {
        if let Some(l) = flag {
            cfg.eval.labels = l.clone();
        }
        match cfg.eval.labels.as_str() {
            "heldout" => Ok(Labels::Heldout),
            "valid" => Ok(Labels::Valid),
            path => {
                let p = Path::new(path);
                if !p.is_file() {
                    bail!(usage(format!(
                        "labels must be heldout, valid or an existing file (got {path:?})"
                    )));
                }
                Ok(Labels::External(ExternalLabels::load(p)?))
            }
        }
    }

    fn source(&self) -> LabelSource<'_> {
        match self {
            Labels::Heldout => LabelSource::Heldout,
            Labels::Valid => LabelSource::Valid,
            Labels::External(e) => LabelSource::External(e),
        }
    }
}

// ---------------------------------------------------------------- prepare

fn prepare(a: PrepareArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    if let Some(p) = a.input {
        cfg.data.input = Some(p);
    }
    if let Some(f) = a.format {
        cfg.data.format = Some(f.parse::<Format>()?);
    }
    if let Some(r) = a.rule {
        cfg.data.rule = r.parse::<BinarizeRule>()?;
    }
    let input = cfg
        .data
        .input
        .clone()
        .ok_or_else(|| usage("prepare needs --input or [data] input"))?;
    let format = cfg.data.format.unwrap_or_else(|| Format::from_path(&input));
    let (raw, ids) = load_interactions(&input, format, &cfg.data.schema)
        .with_context(|| format!("loading {}", input.display()))?;
    let data = binarize(&raw.deduplicate(), cfg.data.rule)?;
    let split = leave_one_out_split(&data, cfg.data.split_seed)?;
    let out = make_out(&a.out)?;
    let meta = SplitMeta {
        n_users: data.n_users,
        n_items: data.n_items,
        seed: cfg.data.split_seed,
        rule: cfg.data.rule,
        feedback_kind: data.feedback_kind,
    };
    split.save(&out, &meta)?;
    ids.save(&out)?;
    info!(
        "{} users, {} items, {} interactions ({} positive)",
        data.n_users,
        data.n_items,
        data.len(),
        data.positive_count()
    );
    Ok(out)
}

// ---------------------------------------------------------------- pretrain

fn vae_path(dir: &Path, axis: Axis) -> PathBuf {
    dir.join(match axis {
        Axis::ByUser => "vae_user.json",
        Axis::ByItem => "vae_item.json",
    })
}

fn side_name(axis: Axis) -> &'static str {
    match axis {
        Axis::ByUser => "user",
        Axis::ByItem => "item",
    }
}

#[derive(Serialize)]
struct KlSummary {
    side: &'static str,
    alpha: f64,
    final_loss: f64,
    index_code_mi: f64,
    total_correlation: f64,
    dimension_kl: f64,
}

/// Trains the requested sides, writing checkpoints, loss curves and KL
/// terms into `out`. Returns the representations once both checkpoints are
/// present in `out`.
fn pretrain_into(split: &Split, side: Side, vcfg: &VaeConfig, out: &Path) -> Result<Option<ConfounderReps>> {
    let axes: &[Axis] = match side {
        Side::User => &[Axis::ByUser],
        Side::Item => &[Axis::ByItem],
        Side::Both => &[Axis::ByUser, Axis::ByItem],
    };
    for &axis in axes {
        let matrix = interaction_matrix(split, axis);
        let start = Instant::now();
        let trained = train_vae(&matrix, vcfg)?;
        let name = side_name(axis);
        info!("{name}-side VAE trained in {:.1}s", start.elapsed().as_secs_f64());
        trained.block.save(&vae_path(out, axis), vcfg)?;
        let mut curve = String::from("epoch,loss\n");
        for (e, l) in trained.curve.iter().enumerate() {
            curve.push_str(&format!("{e},{l}\n"));
        }
        write_file(&out.join(format!("vae_{name}_curve.csv")), &curve)?;
        let kl = full_data_kl(&trained.block, &matrix, vcfg.seed)?;
        write_json(
            &out.join(format!("vae_{name}_kl.json")),
            &KlSummary {
                side: name,
                alpha: vcfg.alpha,
                final_loss: *trained.curve.last().expect("epoch 0 always measured"),
                index_code_mi: kl.index_code_mi,
                total_correlation: kl.total_correlation,
                dimension_kl: kl.dimension_kl,
            },
        )?;
    }
    let (up, ip) = (vae_path(out, Axis::ByUser), vae_path(out, Axis::ByItem));
    if !(up.exists() && ip.exists()) {
        return Ok(None);
    }
    let user = VaeBlock::load(&up)?;
    let item = VaeBlock::load(&ip)?;
    let reps = extract_confounders(
        &user,
        &item,
        &interaction_matrix(split, Axis::ByUser),
        &interaction_matrix(split, Axis::ByItem),
        user.latent_dim(),
    )?;
    reps.save(&out.join("reps.json"))?;
    Ok(Some(reps))
}

fn pretrain(a: PretrainArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    apply_vae_flags(&mut cfg.vae, &a.vae);
    let (split, _) = load_split(&a.split)?;
    let out = make_out(&a.out)?;
    if pretrain_into(&split, a.side, &cfg.vae, &out)?.is_none() {
        info!("only one side trained so far; reps.json is written once both checkpoints exist in the output directory");
    }
    Ok(out)
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainSummary {
    gamma: f64,
    epochs_run: usize,
    best_epoch: usize,
    best_valid_ndcg10: f64,
    seconds: f64,
}

fn train_checked(split: &Split, reps: Option<&ConfounderReps>, tc: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    if tc.gamma > 0.0 && reps.is_none() {
        bail!(usage("gamma > 0 needs confounder representations (--reps)"));
    }
    match train_slfr(split, reps, tc) {
        Ok(o) => Ok(o),
        Err(slfr::Error::Diverged { epoch, last_good }) => {
            if let Some(m) = &last_good {
                m.save(&out.join("last_good_model.json"))?;
                warn!("saved last good checkpoint to last_good_model.json");
            }
            Err(slfr::Error::Diverged { epoch, last_good }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn save_training(out: &Path, tc: &TrainConfig, o: &TrainOutcome, secs: f64) -> Result<()> {
    o.model.save(&out.join("model.json"))?;
    write_log_csv(&out.join("train_log.csv"), &o.log)?;
    write_json(&out.join("train_config.json"), tc)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            gamma: tc.gamma,
            epochs_run: o.log.len(),
            best_epoch: o.best_epoch,
            best_valid_ndcg10: o.best_valid_ndcg,
            seconds: secs,
        },
    )
}

fn train(a: TrainArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    apply_train_flags(&mut cfg.train, &a.train)?;
    let (split, meta) = load_split(&a.split)?;
    cfg.train.feedback_kind = meta.feedback_kind;
    let reps = match &a.reps {
        Some(p) if cfg.train.gamma > 0.0 => Some(ConfounderReps::load(p)?),
        Some(_) => {
            info!("gamma = 0: representations are not used");
            None
        }
        None => None,
    };
    let out = make_out(&a.out)?;
    let start = Instant::now();
    let outcome = train_checked(&split, reps.as_ref(), &cfg.train, &out)?;
    save_training(&out, &cfg.train, &outcome, start.elapsed().as_secs_f64())?;
    Ok(out)
}

// ---------------------------------------------------------------- eval

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    report.save_json(&dir.join("report.json"))?;
    let csv = dir.join("report.csv");
    if csv.exists() {
        fs::remove_file(&csv)?;
    }
    report.append_csv(&csv, &[], &[])?;
    Ok(())
}

fn eval(a: EvalArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    let ks = ks(&a.ks, cfg)?;
    cfg.eval.ks = ks.clone();
    let labels = Labels::resolve(&a.labels, cfg)?;
    let (split, _) = load_split(&a.split)?;
    if !a.model.is_file() {
        bail!(usage(format!("model file {} does not exist", a.model.display())));
    }
    let model = MfModel::load(&a.model)?;
    let report = evaluate(&model, &split, &ks, labels.source())?.with_digest(cfg)?;
    let out = make_out(&a.out)?;
    write_report(&out, &report)?;
    for k in &ks {
        println!("recall@{k} {:.6}  ndcg@{k} {:.6}", report.recall(*k), report.ndcg(*k));
    }
    Ok(out)
}

// ---------------------------------------------------------------- sweep

fn grid_label(param: SweepParam, v: f64) -> String {
    let name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::Alpha => "alpha",
    };
    format!("{name}_{v}")
}

fn sweep(a: SweepArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    apply_train_flags(&mut cfg.train, &a.train)?;
    apply_vae_flags(&mut cfg.vae, &a.vae);
    if let Some(p) = a.param {
        cfg.sweep.param = p;
    }
    if let Some(g) = &a.grid {
        cfg.sweep.grid = parse_list::<f64>(g, "grid")?;
    }
    if cfg.sweep.grid.is_empty() {
        bail!(usage("sweep grid is empty"));
    }
    let ks = ks(&a.ks, cfg)?;
    cfg.eval.ks = ks.clone();
    let labels = Labels::resolve(&a.labels, cfg)?;
    let (split, meta) = load_split(&a.split)?;
    cfg.train.feedback_kind = meta.feedback_kind;
    if cfg.vae.latent_dim != cfg.train.dim {
        bail!(usage(format!(
            "VAE latent dim ({}) must equal the MF dim ({})",
            cfg.vae.latent_dim, cfg.train.dim
        )));
    }
    let out = make_out(&a.out)?;
    let table = out.join("sweep.csv");
    if table.exists() {
        fs::remove_file(&table)?;
    }
    let param = cfg.sweep.param;
    let shared_reps = match param {
        SweepParam::Gamma => match &a.reps {
            Some(p) => Some(ConfounderReps::load(p)?),
            None if cfg.sweep.grid.iter().any(|&g| g > 0.0) => {
                let dir = make_out(&out.join("pretrain"))?;
                pretrain_into(&split, Side::Both, &cfg.vae, &dir)?
            }
            None => None,
        },
        SweepParam::Alpha => {
            if cfg.train.gamma <= 0.0 {
                bail!(usage("an alpha sweep needs gamma > 0 (set --gamma or [train] gamma)"));
            }
            None
        }
    };
    for &v in &cfg.sweep.grid.clone() {
        let point = make_out(&out.join("points").join(grid_label(param, v)))?;
        let mut tc = cfg.train.clone();
        let reps = match param {
            SweepParam::Gamma => {
                tc.gamma = v;
                shared_reps.clone()
            }
            SweepParam::Alpha => {
                let vc = VaeConfig { alpha: v, ..cfg.vae.clone() };
                pretrain_into(&split, Side::Both, &vc, &point)?
            }
        };
        let start = Instant::now();
        let outcome = train_checked(&split, reps.as_ref().filter(|_| tc.gamma > 0.0), &tc, &point)?;
        save_training(&point, &tc, &outcome, start.elapsed().as_secs_f64())?;
        let report = evaluate(&outcome.model, &split, &ks, labels.source())?.with_digest(&tc)?;
        write_report(&point, &report)?;
        let tags = [
            format!("{v}"),
            format!("{}", tc.gamma),
            format!("{}", outcome.best_epoch),
        ];
        report.append_csv(&table, &["value", "gamma", "best_epoch"], &tags)?;
        info!(
            "{}: ndcg@{} {:.5}",
            grid_label(param, v),
            ks[0],
            report.ndcg(ks[0])
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimSummary {
    interactions: usize,
    positives: usize,
    users_with_true_labels: usize,
    users_without_true_labels: usize,
}

fn simulate(a: SimulateArgs, cfg: &mut RunConfig) -> Result<PathBuf> {
    if let Some(v) = a.conf_strength {
        cfg.synth.conf_strength = v;
    }
    if let Some(v) = a.rounds {
        cfg.synth.rounds = v;
    }
    cfg.synth.validate().map_err(|e| usage(e.to_string()))?;
    let world = generate_world(&cfg.synth)?;
    let sim = simulate_exposure(&world, &cfg.synth)?;
    let split = leave_one_out_split(&sim.dataset, cfg.data.split_seed)?;
    let (labels, dropped) = true_label_testset(&world, &split)?;

    let out = make_out(&a.out)?;
    world.save(&out.join("world.json"))?;
    save_dataset(&sim.dataset, &out.join("interactions.csv"))?;
    save_round_stats(&out.join("rounds.csv"), &sim.rounds)?;
    let split_dir = make_out(&out.join("split"))?;
    split.save(
        &split_dir,
        &SplitMeta {
            n_users: split.n_users(),
            n_items: split.n_items(),
            seed: cfg.data.split_seed,
            rule: BinarizeRule::Passthrough,
            feedback_kind: FeedbackKind::Implicit,
        },
    )?;
    labels.save(&out.join("true_labels.csv"))?;
    write_json(
        &out.join("summary.json"),
        &SimSummary {
            interactions: sim.dataset.len(),
            positives: sim.dataset.positive_count(),
            users_with_true_labels: labels.users.len(),
            users_without_true_labels: dropped,
        },
    )?;
    for r in &sim.rounds {
        println!(
            "round {}: fpr {:.4} fnr {:.4} positive_rate {:.4}",
            r.round, r.false_positive_rate, r.false_negative_rate, r.positive_rate
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------- report

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            found.push(p);
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<PathBuf> {
    if !a.runs.is_dir() {
        bail!(usage(format!("runs directory {} does not exist", a.runs.display())));
    }
    let mut paths = Vec::new();
    find_reports(&a.runs, &mut paths)?;
    if paths.is_empty() {
        bail!(usage(format!("no report.json found under {}", a.runs.display())));
    }
    let mut rows = Vec::new();
    let mut ks: Vec<usize> = Vec::new();
    for p in &paths {
        let r = EvalReport::load_json(p)?;
        for k in r.metrics.keys() {
            if !ks.contains(k) {
                ks.push(*k);
            }
        }
        let run = p
            .parent()
            .and_then(|d| d.strip_prefix(&a.runs).ok())
            .map(|d| d.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        rows.push((run, r));
    }
    ks.sort_unstable();
    let mut header = vec!["run".to_string(), "labels".into(), "users".into()];
    for k in &ks {
        header.push(format!("recall@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(run, r)| {
            let mut c = vec![run.clone(), r.label_source.clone(), r.n_users_evaluated.to_string()];
            for k in &ks {
                match r.metrics.get(k) {
                    Some(m) => {
                        c.push(format!("{:.6}", m.recall));
                        c.push(format!("{:.6}", m.ndcg));
                    }
                    None => c.extend(["".to_string(), "".to_string()]),
                }
            }
            c
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|j| cells.iter().map(|c| c[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |c: &[String]| {
        c.iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (s, w))| if j < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut text = fmt_row(&header) + "\n";
    text.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    text.push('\n');
    for c in &cells {
        text.push_str(&fmt_row(c));
        text.push('\n');
    }
    print!("{text}");

    let out = make_out(a.out.as_deref().unwrap_or(&a.runs))?;
    write_file(&out.join("comparison.txt"), &text)?;
    let mut csv = header.join(",") + "\n";
    for c in &cells {
        csv.push_str(&c.join(","));
        csv.push('\n');
    }
    write_file(&out.join("comparison.csv"), &csv)?;
    Ok(out)
}
