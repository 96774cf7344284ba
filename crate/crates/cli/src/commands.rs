use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use serde_json::json;

use rgr::analysis::{analyze, group_by_point, extract_dk_star, SweepRecord};
use rgr::embed::{gen_gaussian_unit_norm, gen_one_hot, gen_sparse_binary};
use rgr::graph::{random_bounded_degree_graph, random_derangement, random_directed_graph, DirectedGraph};
use rgr::io::{
    embedding_to_csv, read_contexts, read_embedding, read_json, read_params, read_run_log, write_embedding, write_params,
    RunLogWriter,
};
use rgr::sweep::{aggregate, run_sweep};
use rgr::train::train_run;
use rgr::verify::{build_instance, full_separation_check, micro_f1_graph, monte_carlo_success};

use crate::config::{section, AnalyzeSection, EmbeddingSection, GraphSection, Loaded};
use crate::manifest::RunManifest;

pub enum Status {
    Ok,
    VerificationFailed,
}

/// Output directory plus the manifest collecting every file written into it.
pub struct Out {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Out {
    pub fn new(dir: &Path, command: &str, config_hash: &str, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Out { dir: dir.to_path_buf(), manifest: RunManifest::begin(command, config_hash, seed) })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.manifest.output(&p);
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.manifest.finish(&self.dir)
    }
}

pub fn gen_graph(cfg: &Loaded, seed: u64, out: &mut Out) -> Result<Status> {
    match section(&cfg.config.graph, "graph")? {
        GraphSection::Permutation { m } => {
            let pi = random_derangement(*m, seed)?;
            out.json("permutation.json", &pi)?;
            out.json("graph.json", &pi.to_graph())?;
        }
        GraphSection::Random { m, m_prime } => out.json("graph.json", &random_directed_graph(*m, *m_prime, seed)?)?,
        GraphSection::Bounded { m, m_prime, max_degree } => {
            out.json("graph.json", &random_bounded_degree_graph(*m, *m_prime, *max_degree, seed)?)?
        }
    }
    Ok(Status::Ok)
}

pub fn gen_embed(cfg: &Loaded, seed: u64, out: &mut Out) -> Result<Status> {
    let x = match section(&cfg.config.embedding, "embedding")? {
        EmbeddingSection::OneHot { m } => gen_one_hot(*m)?,
        EmbeddingSection::GaussianUnitNorm { m, d_model } => gen_gaussian_unit_norm(*m, *d_model, seed)?,
        EmbeddingSection::SparseBinary { m, d_model, p_b } => gen_sparse_binary(*m, *d_model, *p_b, seed)?,
    };
    write_embedding(&out.path("embedding.bin"), &x)?;
    out.text("embedding.csv", &embedding_to_csv(&x))?;
    Ok(Status::Ok)
}

pub fn construct(cfg: &Loaded, seed: u64, out: &mut Out) -> Result<Status> {
    let spec = section(&cfg.config.construct, "construct")?;
    let inst = build_instance(spec, seed)?;
    let report = inst.separation()?;
    write_params(&out.path("params.bin"), &inst.params)?;
    write_embedding(&out.path("embedding.bin"), &inst.embedding)?;
    out.json("graph.json", &inst.graph)?;
    if let Some(pi) = &inst.permutation {
        out.json("permutation.json", pi)?;
    }
    out.json(
        "report.json",
        &json!({
            "construction": inst.params.construction.label(),
            "seed": seed,
            "heads": inst.params.heads,
            "d_k": inst.params.d_k,
            "D_K": inst.params.total_key_dim(),
            "tau": inst.params.tau,
            "report": report,
        }),
    )?;
    println!(
        "construction {}: h = {}, d_k = {}, pass = {} (min true margin {:.4}, max false margin {:.4})",
        inst.params.construction.label(),
        inst.params.heads,
        inst.params.d_k,
        report.pass,
        report.min_true_margin,
        report.max_false_margin
    );
    Ok(if report.pass { Status::Ok } else { Status::VerificationFailed })
}

/// Stored artifacts to check instead of a Monte-Carlo run.
pub struct Artifacts {
    pub params: PathBuf,
    pub embedding: PathBuf,
    pub graph: PathBuf,
    pub contexts: Option<PathBuf>,
}

pub fn verify(cfg: &Loaded, seed: u64, artifacts: Option<Artifacts>, out: &mut Out) -> Result<Status> {
    if let Some(a) = artifacts {
        let params = read_params(&a.params)?;
        let x = read_embedding(&a.embedding)?;
        let g: DirectedGraph = read_json(&a.graph)?;
        let report = full_separation_check(&params, &x, &g)?;
        let f1 = match &a.contexts {
            Some(p) => Some(micro_f1_graph(&params, &x, &g, &read_contexts(p, x.m())?)?),
            None => None,
        };
        out.json("verify.json", &json!({ "report": report, "micro_f1": f1 }))?;
        println!("pass = {}, micro-F1 = {}", report.pass, f1.map_or("n/a".into(), |v| format!("{v:.6}")));
        let ok = report.pass && f1.is_none_or(|v| v == 1.0);
        return Ok(if ok { Status::Ok } else { Status::VerificationFailed });
    }
    let spec = section(&cfg.config.construct, "construct")?;
    let opts = cfg.config.verify.clone().unwrap_or_default();
    if opts.trials == 0 {
        bail!("[verify] trials must be at least 1");
    }
    let mc = monte_carlo_success(spec, opts.trials, seed)?;
    out.json("monte_carlo.json", &mc)?;
    println!(
        "{} trials: failure rate {:.4}, median min true margin {:.4}, median max false margin {:.4}",
        opts.trials, mc.failure_rate, mc.median_min_true_margin, mc.median_max_false_margin
    );
    Ok(if mc.failure_rate <= opts.max_failure_rate { Status::Ok } else { Status::VerificationFailed })
}

pub fn train(cfg: &Loaded, seed: u64, out: &mut Out) -> Result<Status> {
    let t = section(&cfg.config.train, "train")?;
    let r = train_run(t.m, t.d_model, t.h, t.dk, seed, &t.options)?;
    write_params(&out.path("params.bin"), &r.final_params)?;
    out.json(
        "train.json",
        &json!({
            "m": t.m,
            "d_model": t.d_model,
            "h": t.h,
            "D_K": t.dk,
            "seed": seed,
            "test_f1": r.test_f1,
            "steps": r.steps_used,
            "stopped_early": r.stopped_early,
            "tau": r.final_params.tau,
            "loss_curve": r.loss_curve,
            "val_curve": r.val_curve,
        }),
    )?;
    println!("test micro-F1 {:.6} after {} steps", r.test_f1, r.steps_used);
    Ok(Status::Ok)
}

pub fn sweep(cfg: &Loaded, seed: Option<u64>, serial: bool, out: &mut Out) -> Result<Status> {
    let mut sc = section(&cfg.config.sweep, "sweep")?.clone();
    if let Some(s) = seed {
        sc.seed_offset = s;
    }
    let log = out.path("sweep.jsonl");
    let existing = read_run_log(&log)?;
    let hash = sc.config_hash();
    if let Some(bad) = existing.iter().find(|r| r.config_hash != hash) {
        bail!(
            "{} was written under config hash {}, current config hashes to {hash}; refusing to append",
            log.display(),
            bad.config_hash
        );
    }
    let mut writer = RunLogWriter::open(&log)?;
    let before = existing.len();
    let all = run_sweep(&sc, &existing, !serial, |r| writer.append(r))?;
    println!("{} runs in log ({} new)", all.len(), all.len() - before);
    Ok(Status::Ok)
}

fn load_records(log: &Path) -> Result<Vec<SweepRecord>> {
    if !log.exists() {
        bail!("sweep log {} does not exist", log.display());
    }
    let runs = read_run_log(log)?;
    if runs.is_empty() {
        bail!("sweep log {} is empty; nothing to analyze", log.display());
    }
    Ok(aggregate(&runs)?)
}

fn opt_cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn analyze_log(cfg: &Loaded, log: &Path, exclude_outliers: bool, out: &mut Out) -> Result<Status> {
    let opts = cfg.config.analyze.clone().unwrap_or_default();
    let AnalyzeSection { bar, .. } = opts;
    let exclude = exclude_outliers || opts.exclude_outliers;
    let records = load_records(log)?;
    let report = analyze(&records, bar, |m, d| exclude && d == 16 && m > 64)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    out.json("analysis.json", &report)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["m", "d_model", "dk_star", "dk_star_optimistic", "dk_star_conservative", "h_star", "h_min", "h_max", "excluded"])?;
    for p in &report.points {
        let e = &p.estimate;
        w.write_record([
            p.m.to_string(),
            p.d_model.to_string(),
            opt_cell(e.central),
            opt_cell(e.optimistic),
            opt_cell(e.conservative),
            opt_cell(e.h_star),
            opt_cell(e.h_interval.map(|v| v.0)),
            opt_cell(e.h_interval.map(|v| v.1)),
            p.excluded.to_string(),
        ])?;
    }
    out.text("points.csv", &String::from_utf8(w.into_inner()?)?)?;
    if let Some(f) = &report.capacity_fit {
        println!("D_K* ~ {:.4} * m ln m / d_model (R² {:.4}, {} points)", f.slope, f.r_squared, f.points);
    }
    if let Some(f) = &report.head_fit {
        println!("h* ~ {:.4} * m / d_model + {:.4} (R² {:.4})", f.slope, f.intercept, f.r_squared);
    }
    Ok(Status::Ok)
}

pub fn report(cfg: &Loaded, log: &Path, out: &mut Out) -> Result<Status> {
    let bar = cfg.config.analyze.clone().unwrap_or_default().bar;
    let records = load_records(log)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["m", "d_model", "h", "D_K", "seeds", "mean_f1", "f1_ci_low", "f1_ci_high"])?;
    for r in &records {
        w.write_record([
            r.m.to_string(),
            r.d_model.to_string(),
            r.h.to_string(),
            r.dk.to_string(),
            r.seeds.to_string(),
            format!("{:.6}", r.mean_f1),
            format!("{:.6}", r.f1_ci_low),
            format!("{:.6}", r.f1_ci_high),
        ])?;
    }
    out.text("records.csv", &String::from_utf8(w.into_inner()?)?)?;

    let mut summary = format!("{:>6} {:>8} {:>8} {:>6}\n", "m", "d_model", "D_K*", "h*");
    for ((m, d), recs) in group_by_point(&records) {
        let e = extract_dk_star(&recs, bar);
        summary.push_str(&format!(
            "{m:>6} {d:>8} {:>8} {:>6}\n",
            e.central.map_or("-".into(), |v| v.to_string()),
            e.h_star.map_or("-".into(), |v| v.to_string())
        ));
    }
    out.text("summary.txt", &summary)?;
    print!("{summary}");
    Ok(Status::Ok)
}
