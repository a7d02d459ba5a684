use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use sdcl_core::data::{self, SegConfig};
use sdcl_core::trainer_cl::{self, EvalMode, MetricsRecord, TrainError};
use sdcl_core::trainer_css::{self, CssError, CssMetrics};
use sdcl_core::{bench, gradcheck};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig};

/// Creates `dir`, refusing to reuse a nonempty one unless `force`.
fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if nonempty && !force {
            bail!("output directory {} already exists; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn save_checkpoint(path: &Path, net: &sdcl_core::nn::Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    net.save(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AccRow<'a> {
    method: &'a str,
    seed: u64,
    task: usize,
    eval_task: usize,
    mode: &'a str,
    accuracy: f64,
}

#[derive(Serialize)]
struct ClTaskSummary {
    task: usize,
    avg_acc_class_il: f64,
    avg_acc_task_il: f64,
    wall_time: f64,
}

#[derive(Serialize)]
struct ClSummary<'a> {
    method: &'a str,
    seed: u64,
    status: &'a str,
    final_avg_acc_class_il: f64,
    final_avg_acc_task_il: f64,
    forgetting_class_il: f64,
    forgetting_task_il: f64,
    tasks: Vec<ClTaskSummary>,
}

fn write_cl_metrics(dir: &Path, method: &str, seed: u64, m: &MetricsRecord, status: &str) -> Result<()> {
    let mut rows = Vec::new();
    for mode in [EvalMode::ClassIl, EvalMode::TaskIl] {
        for (t, row) in m.acc(mode).iter().enumerate() {
            for (i, &accuracy) in row.iter().enumerate() {
                rows.push(AccRow {
                    method,
                    seed,
                    task: t + 1,
                    eval_task: i + 1,
                    mode: mode.name(),
                    accuracy,
                });
            }
        }
    }
    write_rows(&dir.join("metrics.csv"), rows)?;
    let cil = m.avg_acc(EvalMode::ClassIl);
    let til = m.avg_acc(EvalMode::TaskIl);
    let summary = ClSummary {
        method,
        seed,
        status,
        final_avg_acc_class_il: m.final_avg_acc(EvalMode::ClassIl),
        final_avg_acc_task_il: m.final_avg_acc(EvalMode::TaskIl),
        forgetting_class_il: m.forgetting(EvalMode::ClassIl),
        forgetting_task_il: m.forgetting(EvalMode::TaskIl),
        tasks: (0..cil.len())
            .map(|t| ClTaskSummary {
                task: t + 1,
                avg_acc_class_il: cil[t],
                avg_acc_task_il: til[t],
                wall_time: m.wall_time[t],
            })
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)
}

pub fn train_cl(config: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut exp = ExperimentConfig::load(config)?;
    let Some(cl) = exp.cl.as_mut() else {
        bail!("{} has no `cl` section", config.display());
    };
    if let Some(s) = seed {
        cl.seed = s;
    }
    cl.validate()?;
    let cl = cl.clone();
    let stream = exp.data.task_stream()?;
    let dir = exp.output_dir.clone();
    prepare_output_dir(&dir, force)?;
    write_json(&dir.join("config.json"), &exp)?;
    info!("train-cl: {} tasks, method {}", stream.tasks.len(), cl.method.name());

    match trainer_cl::run_cl(&stream, &cl) {
        Ok(run) => {
            write_cl_metrics(&dir, cl.method.name(), cl.seed, &run.metrics, "ok")?;
            write_rows(&dir.join("losses.csv"), &run.logs)?;
            save_checkpoint(&dir.join("model.ckpt"), &run.net)?;
            println!(
                "{} seed {}: class-IL {:.4} task-IL {:.4} -> {}",
                cl.method.name(),
                cl.seed,
                run.metrics.final_avg_acc(EvalMode::ClassIl),
                run.metrics.final_avg_acc(EvalMode::TaskIl),
                dir.display()
            );
            Ok(())
        }
        Err(TrainError::NonFinite { task, step, partial }) => {
            write_cl_metrics(&dir, cl.method.name(), cl.seed, &partial, "non_finite")?;
            bail!("non-finite loss at task {}, step {step}; partial metrics kept in {}", task + 1, dir.display())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct MiouRow {
    step: usize,
    class_group: &'static str,
    miou: f64,
}

#[derive(Serialize)]
struct CssSummary<'a> {
    seed: u64,
    status: &'a str,
    tasks: Vec<CssMetrics>,
}

fn write_css_metrics(dir: &Path, seed: u64, metrics: &[CssMetrics], status: &str) -> Result<()> {
    let mut rows = Vec::new();
    for m in metrics {
        let step = m.task + 1;
        rows.push(MiouRow {
            step,
            class_group: "base",
            miou: m.base,
        });
        if let Some(novel) = m.novel {
            rows.push(MiouRow {
                step,
                class_group: "novel",
                miou: novel,
            });
        }
        rows.push(MiouRow {
            step,
            class_group: "all",
            miou: m.all,
        });
    }
    write_rows(&dir.join("miou.csv"), rows)?;
    write_json(
        &dir.join("summary.json"),
        &CssSummary {
            seed,
            status,
            tasks: metrics.to_vec(),
        },
    )
}

pub fn train_css(config: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut exp = ExperimentConfig::load(config)?;
    let Some(css) = exp.css.as_mut() else {
        bail!("{} has no `css` section", config.display());
    };
    if let Some(s) = seed {
        css.seed = s;
    }
    css.validate()?;
    let css = css.clone();
    let seg: SegConfig = match &exp.data {
        DataConfig::Seg(s) => s.clone(),
        _ => bail!("train-css needs `data.kind = \"seg\"`"),
    };
    let tasks = data::synth_seg_tasks(&seg)?;
    let dir = exp.output_dir.clone();
    prepare_output_dir(&dir, force)?;
    write_json(&dir.join("config.json"), &exp)?;

    match trainer_css::run_css(&tasks, &css, seg.image_size) {
        Ok((metrics, learner)) => {
            write_css_metrics(&dir, css.seed, &metrics, "ok")?;
            write_rows(&dir.join("losses.csv"), &learner.logs)?;
            save_checkpoint(&dir.join("model.ckpt"), &learner.net)?;
            if let Some(last) = metrics.last() {
                println!(
                    "css seed {}: base {:.4} novel {} all {:.4} -> {}",
                    css.seed,
                    last.base,
                    last.novel.map_or("-".into(), |v| format!("{v:.4}")),
                    last.all,
                    dir.display()
                );
            }
            Ok(())
        }
        Err(CssError::NonFinite { task, step, partial }) => {
            write_css_metrics(&dir, css.seed, &partial, "non_finite")?;
            bail!("non-finite loss at task {}, step {step}; partial metrics kept in {}", task + 1, dir.display())
        }
        Err(e) => Err(e.into()),
    }
}

/// Returns whether every size passed.
pub fn gradcheck(seed: u64, instances: usize, flip_term3: bool) -> bool {
    let variant = if flip_term3 {
        gradcheck::Variant::FlippedTerm3
    } else {
        gradcheck::Variant::Correct
    };
    let reports = gradcheck::run(seed, &gradcheck::DEFAULT_SIZES, instances, variant);
    println!("{:>4} {:>4} {:>3} {:>9} {:>7} {:>12}  result", "d", "p", "m", "instances", "skipped", "max_rel_err");
    for r in &reports {
        println!(
            "{:>4} {:>4} {:>3} {:>9} {:>7} {:>12.3e}  {}",
            r.d,
            r.p,
            r.m,
            r.instances,
            r.skipped,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    reports.iter().all(|r| r.passed)
}

pub fn bench(ds: &[usize], p: usize, m: usize, out: Option<&Path>) -> Result<()> {
    if let Some(&d) = ds.iter().find(|&&d| d < m) {
        bail!("every d must be at least m = {m}, got {d}");
    }
    if m == 0 || m > p {
        bail!("need 1 <= m <= p, got m = {m}, p = {p}");
    }
    let rows = bench::run(ds, p, m, 0);
    match out {
        Some(path) => bench::write_csv(&rows, File::create(path).with_context(|| format!("creating {}", path.display()))?)?,
        None => bench::write_csv(&rows, std::io::stdout().lock())?,
    }
    if rows.len() >= 2 {
        eprintln!("log-log slope of time vs d: {:.3}", bench::loglog_slope(&rows));
    }
    Ok(())
}
