//! Subcommand implementations. Every output lands under `--out-dir` with a
//! fixed file name.

use std::fs;
use std::path::Path;

use pointbev::attention::{TemporalThreshold, WindowSpec};
use pointbev::geometry::SceneGeometry;
use pointbev::sampling::{CoarseSpec, MaskSource};
use pointbev::selftest::{attention_oracle, gradient_suites, pulling_oracle};
use pointbev::world::BENCHMARK_FRAMES;

use crate::bench::{bench_attention, bench_pulling, temporal_instance, AttentionRow, PullingRow, BENCH_WINDOWS};
use crate::config::{Command, EvalArgs, RunConfig, SweepArgs, SweepKind, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::experiment::{dense_eval, load_geometry, prepare, save_model, sparse_eval, Benchmark};
use crate::svg::{line_chart, Panel};
use crate::sweep::{temporal_params, temporal_tau, SweepContext, SweepRow, TemporalRow};

/// Validates `cfg`, then runs its subcommand on a pool of `--threads` workers.
pub fn run(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cfg))
}

fn dispatch(cfg: &RunConfig) -> CliResult<()> {
    if !matches!(cfg.command, Command::Plot { .. }) {
        fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    }
    let geometry = || load_geometry(cfg.geometry.as_deref(), cfg.feat_w, cfg.feat_h);
    match &cfg.command {
        Command::Selftest { instances } => cmd_selftest(cfg, *instances),
        Command::BenchPulling { points, channels } => cmd_bench_pulling(cfg, *points, *channels),
        Command::BenchAttention { model, tau_temp } => {
            let (model, bench) = prepare(geometry()?, model, cfg.seed, BENCHMARK_FRAMES - 1)?;
            cmd_bench_attention(cfg, &model, &bench, *tau_temp)
        }
        Command::Train(args) => cmd_train(cfg, geometry()?, args),
        Command::Eval(args) => cmd_eval(cfg, geometry()?, args),
        Command::Sweep(args) => cmd_sweep(cfg, geometry()?, args),
        Command::Plot { csv, x, out } => {
            let out = out.clone().unwrap_or_else(|| csv.with_extension("svg"));
            cmd_plot(csv, x.as_deref(), &out)
        }
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_selftest(cfg: &RunConfig, instances: usize) -> CliResult<()> {
    let mut reports = vec![pulling_oracle(instances, cfg.seed), attention_oracle(instances, cfg.seed.wrapping_add(1))];
    reports.extend(gradient_suites(cfg.seed));
    for r in &reports {
        println!("{}", r.line());
    }
    write_csv(
        &cfg.out_dir.join("selftest.csv"),
        &["suite", "passed", "instances", "max_error", "tolerance"],
        reports.iter().map(|r| {
            vec![r.name.to_string(), r.passed.to_string(), r.instances.to_string(), r.max_error.to_string(), r.tolerance.to_string()]
        }),
    )?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} suites failed", reports.len())));
    }
    println!("selftest: all {} suites passed", reports.len());
    Ok(())
}

fn cmd_bench_pulling(cfg: &RunConfig, points: Option<usize>, channels: usize) -> CliResult<()> {
    let rows = bench_pulling(channels, points, cfg.seed)?;
    write_csv(&cfg.out_dir.join("bench_pulling.csv"), &PullingRow::HEADER, rows.iter().map(PullingRow::record))?;
    for pair in rows.chunks(2) {
        if let [sparse, naive] = pair {
            println!(
                "{:<12} points={:<7} sparse_ops={:<8} naive_ops={:<8} ratio={:.4} visible=[{:.4}, {:.4}]",
                sparse.shape,
                sparse.n_points,
                sparse.interp_ops,
                naive.interp_ops,
                sparse.interp_ops as f64 / naive.interp_ops.max(1) as f64,
                sparse.visible_min,
                sparse.visible_max
            );
        }
    }
    Ok(())
}

fn cmd_bench_attention(cfg: &RunConfig, model: &pointbev::train::Model, bench: &Benchmark, tau_temp: f64) -> CliResult<()> {
    let sample = bench.eval.first().ok_or_else(|| CliError::Config("benchmark has no eval scene".into()))?;
    let params = temporal_params(model, WindowSpec::new(8, 4, 4), cfg.seed);
    let (set, candidates) = temporal_instance(&model.head, &bench.geometry, sample, TemporalThreshold::new(tau_temp)?)?;
    let rows = bench_attention(&set, candidates, &params.attn, &BENCH_WINDOWS)?;
    write_csv(&cfg.out_dir.join("bench_attention.csv"), &AttentionRow::HEADER, rows.iter().map(AttentionRow::record))?;
    for r in &rows {
        println!("window={:<7} pairs={:<9} dense={:<11} ratio={:.6}", r.window, r.sparse_pairs, r.dense_pairs, r.pair_ratio());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, geometry: SceneGeometry, args: &TrainArgs) -> CliResult<()> {
    let train_cfg = args.to_train_config(cfg.seed)?;
    let bench = Benchmark::render(geometry, args.history())?;
    let (model, log) = bench.train_model(&train_cfg)?;
    write_csv(
        &cfg.out_dir.join("train_metrics.csv"),
        &["step", "loss", "iou", "n_points", "interp_ops"],
        log.iter().map(|r| vec![r.step.to_string(), r.loss.to_string(), r.iou.to_string(), r.n_points.to_string(), r.interp_ops.to_string()]),
    )?;
    save_model(&model, &cfg.out_dir.join("checkpoint.pbev"))?;
    let (eval_iou, _) = dense_eval(&model, &bench.geometry, &bench.eval)?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("train: {} steps, final loss {last:.6}, dense eval IoU {eval_iou:.6}", log.len());
    Ok(())
}

/// Round-trippable text form of a coarse spec.
pub fn describe_coarse(spec: &CoarseSpec) -> String {
    match spec {
        CoarseSpec::Random { n, seed: None } => format!("random:{n}"),
        CoarseSpec::Random { n, seed: Some(s) } => format!("random:{n}:seed={s}"),
        CoarseSpec::Regular { spacing } => format!("regular:{spacing}"),
        CoarseSpec::Gauss { sigma, n } => format!("gauss:{sigma}:{n}"),
        CoarseSpec::Mask { source: MaskSource::Lidar, n } => format!("mask:lidar:{n}"),
    }
}

fn cmd_eval(cfg: &RunConfig, geometry: SceneGeometry, args: &EvalArgs) -> CliResult<()> {
    let (model, bench) = prepare(geometry, &args.model, cfg.seed, 0)?;
    let samples = bench.eval_subset(args.model.eval_scenes);
    let n_cells = bench.geometry.grid.n_cells().to_string();
    let (dense_iou, dense_ops) = dense_eval(&model, &bench.geometry, samples)?;
    let mut rows = vec![vec![
        "dense".to_string(),
        "-".to_string(),
        "-".to_string(),
        "-".to_string(),
        n_cells.clone(),
        "0".to_string(),
        n_cells,
        dense_ops.to_string(),
        dense_iou.to_string(),
    ]];
    println!("eval dense: IoU {dense_iou:.6}");
    for spec in &args.coarse {
        let r = sparse_eval(&model, &bench.geometry, samples, spec, cfg.seed, args.tau, args.k_fine)?;
        println!(
            "eval {:<16} IoU {:.6} sampled {:.1} ({:.2}% of cells)",
            describe_coarse(spec),
            r.iou,
            r.n_sampled,
            100.0 * r.n_sampled / bench.geometry.grid.n_cells() as f64
        );
        rows.push(vec![
            "two-pass".to_string(),
            describe_coarse(spec),
            args.tau.to_string(),
            args.k_fine.to_string(),
            r.n_coarse.to_string(),
            r.n_fine.to_string(),
            r.n_sampled.to_string(),
            r.interp_ops.to_string(),
            r.iou.to_string(),
        ]);
    }
    write_csv(
        &cfg.out_dir.join("eval_metrics.csv"),
        &["mode", "coarse", "tau", "k_fine", "n_coarse", "n_fine", "n_sampled", "interp_ops", "iou"],
        rows,
    )
}

fn cmd_sweep(cfg: &RunConfig, geometry: SceneGeometry, args: &SweepArgs) -> CliResult<()> {
    let min_history = if args.kind == SweepKind::TemporalTau { BENCHMARK_FRAMES - 1 } else { 0 };
    let (model, bench) = prepare(geometry, &args.model, cfg.seed, min_history)?;
    let samples = bench.eval_subset(args.model.eval_scenes);
    let csv_path = cfg.out_dir.join(format!("{}.csv", args.kind.file_stem()));
    let ctx = SweepContext { model: &model, geometry: &bench.geometry, samples, seed: cfg.seed };
    let (x_label, points): (&str, Vec<(f64, f64, f64)>) = match args.kind {
        SweepKind::TemporalTau => {
            let window = WindowSpec::new(args.window[0], args.window[1], args.window[2]);
            let params = temporal_params(&model, window, cfg.seed);
            let rows = temporal_tau(&model, &params, &bench.geometry, samples, &args.logit_list)?;
            write_csv(&csv_path, &TemporalRow::HEADER, rows.iter().map(TemporalRow::record))?;
            for r in &rows {
                println!("tau_temp={:<10.6} kept={:<9.1} pairs={:<11.1} iou={:.6}", r.tau_temp, r.n_past_kept, r.n_pairs, r.iou);
            }
            ("tau_temp", rows.iter().map(|r| (r.tau_temp, r.iou, r.interp_ops)).collect())
        }
        kind => {
            let (label, rows) = match kind {
                SweepKind::Kfine => ("k_fine", ctx.kfine(&args.coarse, args.tau, &args.k_list)?),
                SweepKind::Tau => ("tau", ctx.tau(&args.coarse, &args.tau_list, args.k_fine)?),
                _ => ("subsample factor", ctx.subsample(&args.subsample_pairs()?, args.tau)?),
            };
            write_csv(&csv_path, &SweepRow::HEADER, rows.iter().map(SweepRow::record))?;
            for r in &rows {
                println!(
                    "{label}={:<6} k_fine={:<3} n_fine={:<9.1} sampled={:<9.1} iou={:.6}",
                    r.param, r.k_fine, r.n_fine, r.n_sampled, r.iou
                );
            }
            (label, rows.iter().map(|r| (r.param, r.iou, r.interp_ops)).collect())
        }
    };
    if cfg.svg {
        let svg = line_chart(
            args.kind.file_stem(),
            x_label,
            &[
                Panel { y_label: "iou".into(), points: points.iter().map(|p| (p.0, p.1)).collect() },
                Panel { y_label: "interp_ops".into(), points: points.iter().map(|p| (p.0, p.2)).collect() },
            ],
        );
        write_text(&csv_path.with_extension("svg"), &svg)?;
    }
    Ok(())
}

/// Reads `csv` and draws the `iou` and `interp_ops` columns against `x`.
pub fn cmd_plot(csv: &Path, x: Option<&str>, out: &Path) -> CliResult<()> {
    let mut reader = csv::Reader::from_path(csv).map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let x_col = match x {
        None => 0,
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{} has no column `{name}`", csv.display())))?,
    };
    let y_cols: Vec<usize> = ["iou", "interp_ops"].iter().filter_map(|n| header.iter().position(|h| h == n)).collect();
    if y_cols.is_empty() {
        return Err(CliError::Config(format!("{} has neither an iou nor an interp_ops column", csv.display())));
    }
    let mut panels: Vec<Panel> = y_cols.iter().map(|&c| Panel { y_label: header[c].clone(), points: Vec::new() }).collect();
    for record in reader.records() {
        let record = record?;
        let Some(xv) = record.get(x_col).and_then(|v| v.parse::<f64>().ok()) else { continue };
        for (panel, &c) in panels.iter_mut().zip(&y_cols) {
            if let Some(yv) = record.get(c).and_then(|v| v.parse::<f64>().ok()) {
                panel.points.push((xv, yv));
            }
        }
    }
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_text(out, &line_chart(&title, &header[x_col], &panels))?;
    println!("plot: wrote {}", out.display());
    Ok(())
}
