use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedsim::analysis::{entropy_histogram, pairwise_cka, LayerLevel};
use fedsim::data::Dataset;
use fedsim::experiment::{ExperimentConfig, Prepared};
use fedsim::federation::{write_reports_csv, write_selection_csv, Federation, RoundReport};
use fedsim::{FederationConfig, Model};
use log::info;

use crate::manifest::{now, read_manifest, OutputDir, RunManifest};

fn dataset_digests(source: &Dataset, target: &Dataset) -> BTreeMap<String, String> {
    use crate::manifest::sha256_hex;
    BTreeMap::from([
        ("source".to_string(), sha256_hex(&source.to_bytes())),
        ("target".to_string(), sha256_hex(&target.to_bytes())),
    ])
}

fn manifest(
    config: &ExperimentConfig,
    command: &str,
    started_at: String,
    prepared: &Prepared,
) -> Result<RunManifest> {
    Ok(RunManifest {
        tool: "fedsim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        master_seed: config.federation.master_seed,
        started_at,
        finished_at: now(),
        config: serde_json::to_value(config)?,
        datasets: dataset_digests(&prepared.source, &prepared.target),
        files: Vec::new(),
    })
}

fn start(config: &ExperimentConfig) -> Result<(OutputDir, Prepared)> {
    let out = OutputDir::create(&config.output_dir)?;
    let prepared = config.prepare()?;
    info!(
        "target: {} train / {} test samples over {} clients",
        prepared.train.len(),
        prepared.test.len(),
        prepared.partitions.len()
    );
    Ok((out, prepared))
}

fn federation<'a>(config: &FederationConfig, prepared: &'a Prepared) -> Result<Federation<'a>> {
    Ok(Federation::new(
        config.clone(),
        Some(&prepared.source),
        &prepared.train,
        &prepared.test,
        &prepared.partitions,
    )?)
}

fn cka_csv(
    models: &[Model],
    labels: &[String],
    probe_set: &Dataset,
    level: LayerLevel,
) -> Result<(Vec<u8>, Option<f64>)> {
    let matrix = pairwise_cka(models, probe_set, level)?;
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf, labels)?;
    Ok((buf, matrix.mean_off_diagonal()))
}

pub fn generate(config: &ExperimentConfig) -> Result<()> {
    let started = now();
    let (mut out, prepared) = start(config)?;
    out.write("source.fedds", &prepared.source.to_bytes())?;
    out.write("target.fedds", &prepared.target.to_bytes())?;
    out.write("config.toml", config.to_toml().as_bytes())?;
    println!(
        "wrote {} source and {} target samples to {}",
        prepared.source.len(),
        prepared.target.len(),
        out.root().display()
    );
    let m = manifest(config, "generate", started, &prepared)?;
    out.finish(m)
}

pub fn run(config: &ExperimentConfig) -> Result<()> {
    let started = now();
    let (mut out, prepared) = start(config)?;
    let f = &config.federation;
    let mut fed = federation(f, &prepared)?;
    let mut reports: Vec<RoundReport> = Vec::with_capacity(f.rounds);
    let mut selections = Vec::new();
    let mut last_updates = Vec::new();
    for _ in 0..f.rounds {
        let round = fed.run_round()?;
        let r = &round.report;
        info!(
            "round {}: acc {:.4} loss {:.4} selected {}",
            r.round,
            r.global_test_accuracy,
            r.global_test_loss,
            r.total_selected()
        );
        if config.analysis.selection_dump {
            selections.push((r.round, round.selections));
        }
        last_updates = round.updates;
        reports.push(round.report);
    }

    let mut csv = Vec::new();
    write_reports_csv(&mut csv, f.strategy, &reports)?;
    out.write("reports.csv", &csv)?;
    out.write("pretrained.fedft", &fed.initial_model().to_bytes())?;
    out.write("final.fedft", &fed.global_model().to_bytes())?;
    out.write("config.toml", config.to_toml().as_bytes())?;
    if config.analysis.selection_dump {
        let mut buf = Vec::new();
        write_selection_csv(&mut buf, &selections, &prepared.partitions)?;
        out.write("selection.csv", &buf)?;
    }
    if config.analysis.cka && last_updates.len() >= 2 {
        let models = last_updates
            .iter()
            .map(|u| fed.client_model(u))
            .collect::<fedsim::Result<Vec<_>>>()?;
        let labels: Vec<String> = last_updates
            .iter()
            .map(|u| format!("client_{}", u.client_id))
            .collect();
        for level in LayerLevel::ALL {
            let (buf, _) = cka_csv(&models, &labels, &prepared.test, level)?;
            out.write(&format!("cka_{level}.csv"), &buf)?;
        }
    }
    if config.analysis.entropy_histogram {
        let h = entropy_histogram(
            fed.global_model(),
            &prepared.train,
            f.rho,
            config.analysis.histogram_bins,
        )?;
        let mut buf = Vec::new();
        h.write_csv(&mut buf)?;
        out.write("entropy_hist.csv", &buf)?;
    }

    match reports.last() {
        Some(last) => println!(
            "{}: final accuracy {:.4}, best {:.4}, client time {:.4}s",
            f.strategy,
            last.global_test_accuracy,
            reports
                .iter()
                .map(|r| r.global_test_accuracy)
                .fold(0.0, f64::max),
            last.cumulative_client_train_time
        ),
        None => println!("{}: no rounds run", f.strategy),
    }
    let m = manifest(config, "run", started, &prepared)?;
    out.finish(m)
}

pub fn analyze_cka(
    config: &ExperimentConfig,
    checkpoints: &[PathBuf],
    levels: &[LayerLevel],
) -> Result<()> {
    let started = now();
    let (mut out, prepared) = start(config)?;
    let (models, labels): (Vec<Model>, Vec<String>) = if checkpoints.is_empty() {
        // client models after one round of the configured experiment
        let mut fed = federation(&config.federation, &prepared)?;
        let round = fed.run_round()?;
        let models = round
            .updates
            .iter()
            .map(|u| fed.client_model(u))
            .collect::<fedsim::Result<Vec<_>>>()?;
        let labels = round
            .updates
            .iter()
            .map(|u| format!("client_{}", u.client_id))
            .collect();
        (models, labels)
    } else {
        let mut models = Vec::new();
        let mut labels = Vec::new();
        for path in checkpoints {
            models.push(Model::load(path).with_context(|| format!("loading {}", path.display()))?);
            labels.push(
                path.file_stem()
                    .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            );
        }
        (models, labels)
    };
    if models.len() < 2 {
        bail!("CKA needs at least two models, got {}", models.len());
    }
    for &level in levels {
        let (buf, mean) = cka_csv(&models, &labels, &prepared.test, level)?;
        out.write(&format!("cka_{level}.csv"), &buf)?;
        match mean {
            Some(m) => println!("{level}: mean off-diagonal CKA {m:.6}"),
            None => println!("{level}: mean off-diagonal CKA undefined"),
        }
    }
    let m = manifest(config, "analyze-cka", started, &prepared)?;
    out.finish(m)
}

pub fn entropy_hist(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let started = now();
    let (mut out, prepared) = start(config)?;
    let model = match checkpoint {
        Some(path) => Model::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => federation(&config.federation, &prepared)?
            .initial_model()
            .clone(),
    };
    let rho = config.federation.rho;
    let h = entropy_histogram(&model, &prepared.train, rho, config.analysis.histogram_bins)?;
    let mut buf = Vec::new();
    h.write_csv(&mut buf)?;
    out.write("entropy_hist.csv", &buf)?;
    let lowest = h.counts[0] as f64 / h.total() as f64;
    println!(
        "rho {rho}: {} samples, {:.1}% in the lowest entropy bin",
        h.total(),
        100.0 * lowest
    );
    let m = manifest(config, "entropy-hist", started, &prepared)?;
    out.finish(m)
}

/// Summary of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub strategy: String,
    pub p_ds: f64,
    pub f_n: f64,
    pub best_accuracy: f64,
    pub efficiency: Option<f64>,
    pub rounds_to_threshold: Option<usize>,
}

struct ReportRow {
    round: usize,
    test_acc: f64,
    cum_time: f64,
}

fn read_reports(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let (round, acc, time) = (col("round")?, col("test_acc")?, col("cum_client_time_s")?);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| {
            record
                .get(c)
                .with_context(|| format!("{}: short row {}", path.display(), i + 1))
        };
        rows.push(ReportRow {
            round: field(round)?.parse()?,
            test_acc: field(acc)?.parse()?,
            cum_time: field(time)?.parse()?,
        });
    }
    Ok(rows)
}

pub fn summarize(dir: &Path, threshold: f64) -> Result<(RunSummary, BTreeMap<String, String>)> {
    let manifest = read_manifest(dir)?;
    let config: ExperimentConfig = serde_json::from_value(manifest.config.clone())
        .with_context(|| format!("{}: config snapshot", dir.display()))?;
    let rows = read_reports(&dir.join("reports.csv"))?;
    let best = rows.iter().map(|r| r.test_acc).fold(0.0, f64::max);
    let efficiency = rows
        .last()
        .and_then(|last| fedsim::analysis::efficiency_from(best, last.cum_time));
    let summary = RunSummary {
        run: dir.display().to_string(),
        strategy: config.federation.strategy.to_string(),
        p_ds: config.federation.effective_p_ds(),
        f_n: config.federation.participation_fraction,
        best_accuracy: best,
        efficiency,
        rounds_to_threshold: rows
            .iter()
            .find(|r| r.test_acc >= threshold)
            .map(|r| r.round),
    };
    Ok((summary, manifest.datasets))
}

pub fn compare(dirs: &[PathBuf], threshold: Option<f64>, out: Option<&Path>) -> Result<()> {
    if dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let threshold = match threshold {
        Some(t) => t,
        None => {
            let m = read_manifest(&dirs[0])?;
            let c: ExperimentConfig = serde_json::from_value(m.config)?;
            c.analysis.accuracy_threshold
        }
    };
    let mut rows = Vec::new();
    let mut reference: Option<(&Path, BTreeMap<String, String>)> = None;
    for dir in dirs {
        let (summary, datasets) = summarize(dir, threshold)?;
        match &reference {
            None => reference = Some((dir, datasets)),
            Some((first, digests)) if *digests != datasets => bail!(
                "dataset digests of {} differ from {}; runs are not comparable",
                dir.display(),
                first.display()
            ),
            Some(_) => {}
        }
        rows.push(summary);
    }
    let table = comparison_csv(&rows);
    print!("{table}");
    if let Some(out) = out {
        let mut dir = OutputDir::create(out)?;
        dir.write("comparison.csv", table.as_bytes())?;
    }
    Ok(())
}

pub fn comparison_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from("run,strategy,p_ds,f_n,best_acc,efficiency,rounds_to_threshold\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run,
            r.strategy,
            r.p_ds,
            r.f_n,
            r.best_accuracy,
            r.efficiency
                .map_or_else(|| "NA".to_string(), |e| e.to_string()),
            r.rounds_to_threshold
                .map_or_else(|| "NA".to_string(), |n| n.to_string())
        );
    }
    s
}
